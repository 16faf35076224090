//! Per-frame keypoint text files: one `x y confidence` row per regressed
//! keypoint, in regressor order. `#` starts a comment; blank lines are skipped.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scene::Keypoint;

pub fn parse_keypoints(text: &str) -> std::result::Result<Vec<Keypoint>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: `{t}` is not a number", n + 1)))
            .collect::<std::result::Result<_, _>>()?;
        let [x, y, confidence] = vals[..] else {
            return Err(format!("line {}: expected 3 values (x y confidence), found {}", n + 1, vals.len()));
        };
        if !(x.is_finite() && y.is_finite()) || !(0.0..=1.0).contains(&confidence) {
            return Err(format!("line {}: coordinates must be finite and confidence in [0, 1]", n + 1));
        }
        out.push(Keypoint { x, y, confidence });
    }
    Ok(out)
}

pub fn format_keypoints(points: &[Keypoint]) -> String {
    let mut s = String::from("# x y confidence\n");
    for k in points {
        s.push_str(&format!("{:?} {:?} {:?}\n", k.x, k.y, k.confidence));
    }
    s
}

pub fn load_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text).map_err(|m| Error::format(path, m))
}

pub fn save_keypoints(path: &Path, points: &[Keypoint]) -> Result<()> {
    write_atomic(path, format_keypoints(points).as_bytes())
}
