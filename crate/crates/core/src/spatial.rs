//! Exact k-nearest-neighbour queries over static 3-D point sets.

use crate::math::Vec3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// A static kd-tree. Neighbour lists are ordered by `(squared distance, index)`,
/// so results are deterministic and agree with a brute-force scan.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len(), 0);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE || depth > 64 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // Split along the widest axis of the bounding box.
        let (mut lo, mut hi) = (Vec3::repeat(f64::MAX), Vec3::repeat(f64::MIN));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] <= lo[axis] {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid, depth + 1);
        let right = self.build_node(mid, end, depth + 1);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points to `query`, optionally skipping one index.
    pub fn knn(&self, query: &Vec3, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return best;
        }
        self.search(0, query, k, exclude, &mut best);
        best
    }

    fn search(
        &self,
        node: usize,
        query: &Vec3,
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<Neighbor>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let d = (self.points[i] - query).norm_squared();
                    insert_sorted(best, k, Neighbor { index: i, dist_sq: d });
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, best);
                let worst = if best.len() < k { f64::INFINITY } else { best[k - 1].dist_sq };
                // Ties at equal distance must still be visited to keep index ordering exact.
                if diff * diff <= worst {
                    self.search(far, query, k, exclude, best);
                }
            }
        }
    }
}

fn insert_sorted(best: &mut Vec<Neighbor>, k: usize, n: Neighbor) {
    let key = |x: &Neighbor| (x.dist_sq, x.index);
    if best.len() == k {
        let last = &best[k - 1];
        if key(&n).partial_cmp(&key(last)) != Some(std::cmp::Ordering::Less) {
            return;
        }
    }
    let pos = best
        .iter()
        .position(|b| key(&n).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less))
        .unwrap_or(best.len());
    best.insert(pos, n);
    best.truncate(k);
}

/// Brute-force reference used by tests and small inputs.
pub fn knn_brute_force(points: &[Vec3], query: &Vec3, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| Neighbor { index: i, dist_sq: (p - query).norm_squared() })
        .collect();
    all.sort_by(|a, b| a.dist_sq.total_cmp(&b.dist_sq).then(a.index.cmp(&b.index)));
    all.truncate(k);
    all
}
