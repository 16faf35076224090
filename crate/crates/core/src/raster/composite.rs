//! Front-to-back alpha compositing.

pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Composite ordered `(α, payload)` hits. Returns the accumulated payload
/// (before any background) and the final transmittance. Compositing stops
/// once transmittance falls below 1e-4; α is clamped to the renderer's
/// maximum.
pub fn composite_pixel<'a>(hits: impl IntoIterator<Item = (f64, &'a [f64])>, channels: usize) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; channels];
    let mut t = 1.0;
    for (alpha, payload) in hits {
        let a = alpha.min(super::ALPHA_MAX);
        let w = t * a;
        for (o, p) in out.iter_mut().zip(payload) {
            *o += w * p;
        }
        t *= 1.0 - a;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    (out, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_opaque_hit() {
        let (out, _) = composite_pixel([(1.0, &[0.2, 0.4, 0.6][..])], 3);
        for (o, c) in out.iter().zip([0.2, 0.4, 0.6]) {
            assert!((o - 0.999 * c).abs() < 1e-15);
        }
    }

    #[test]
    fn two_half_hits() {
        let (out, t) = composite_pixel([(0.5, &[1.0, 0.0][..]), (0.5, &[0.0, 1.0][..])], 2);
        assert_eq!(out, vec![0.5, 0.25]);
        assert_eq!(t, 0.25);
    }

    #[test]
    fn matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let hits: Vec<(f64, Vec<f64>)> = (0..10).map(|_| (rng.random_range(0.01..0.999), vec![rng.random(), rng.random()])).collect();
            let (out, _) = composite_pixel(hits.iter().map(|(a, p)| (*a, p.as_slice())), 2);
            let mut oracle = [0.0; 2];
            for i in 0..hits.len() {
                let t: f64 = hits[..i].iter().map(|(a, _)| 1.0 - a).product();
                if t < MIN_TRANSMITTANCE {
                    break;
                }
                for c in 0..2 {
                    oracle[c] += t * hits[i].0 * hits[i].1[c];
                }
            }
            for c in 0..2 {
                assert!((out[c] - oracle[c]).abs() < 1e-12);
            }
        }
    }
}
