//! File formats and filesystem helpers.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

mod checkpoint;
mod images;
mod keypoints;
mod manifest;
mod template;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use images::{decode_normals, encode_normals_16, load_mask, load_normals, load_rgb, save_mask, save_normals, save_rgb, LoadedNormals, MIN_NORMAL_NORM};
pub use keypoints::{format_keypoints, load_keypoints, parse_keypoints, save_keypoints};
pub use manifest::{load_manifest, write_scene, CameraEntry, FrameEntry, LoadedScene, SceneManifest, MANIFEST_VERSION, NORMAL_WARN_DEVIATION};
pub use template::{decode_template, encode_template, load_template, save_template, TEMPLATE_MAGIC};

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
