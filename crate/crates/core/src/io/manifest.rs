//! Scene manifests: a JSON document listing the template, per-frame assets,
//! cameras and initial poses. Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::articulation::{BodyTemplate, Pose};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::images::{load_mask, load_normals, load_rgb, save_mask, save_normals, save_rgb};
use crate::io::keypoints::{load_keypoints, save_keypoints};
use crate::io::template::{load_template, save_template};
use crate::io::write_atomic;
use crate::math::{Mat3, Vec3};
use crate::scene::{Frame, PoseSequence};

pub const MANIFEST_VERSION: u32 = 1;

/// Renormalization larger than this is reported as a warning.
pub const NORMAL_WARN_DEVIATION: f64 = 1e-2;

/// Pinhole camera with row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub intrinsics: [[f64; 3]; 3],
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

fn rows(m: &Mat3) -> [[f64; 3]; 3] {
    [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
}

fn from_rows(r: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
}

impl CameraEntry {
    pub fn from_camera(c: &Camera) -> Self {
        CameraEntry { intrinsics: rows(&c.intrinsics), rotation: rows(&c.rotation), translation: c.translation.into() }
    }

    pub fn to_camera(&self, width: usize, height: usize) -> Result<Camera> {
        Camera::new(from_rows(&self.intrinsics), from_rows(&self.rotation), Vec3::from(self.translation), width, height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    pub rgb: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub back_normal: Option<PathBuf>,
    pub keypoints: PathBuf,
    pub pose: Pose,
    pub camera: CameraEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub template: PathBuf,
    /// Forwarded verbatim to the denoiser.
    #[serde(default)]
    pub prompt: String,
    pub width: usize,
    pub height: usize,
    /// Initial shape coefficients.
    pub betas: Vec<f64>,
    pub frames: Vec<FrameEntry>,
    /// Pipeline configuration overrides, with the layout of the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl SceneManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// A validated manifest with every asset loaded.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub path: PathBuf,
    pub manifest: SceneManifest,
    pub template: BodyTemplate,
    pub frames: Vec<Frame>,
    pub initial: PoseSequence,
    pub warnings: Vec<String>,
}

fn check_size(problems: &mut Vec<String>, frame: usize, what: &str, path: &Path, img: &Image, w: usize, h: usize) {
    if img.width != w || img.height != h {
        problems.push(format!("frame {frame}: {what} {} is {}x{}, manifest declares {w}x{h}", path.display(), img.width, img.height));
    }
}

struct FrameLoad {
    frame: Option<Frame>,
    problems: Vec<String>,
    warnings: Vec<String>,
}

fn load_frame(root: &Path, t: usize, e: &FrameEntry, m: &SceneManifest, template: Option<&BodyTemplate>) -> FrameLoad {
    let (w, h) = (m.width, m.height);
    let mut problems = Vec::new();
    let mut warnings = Vec::new();
    if e.index != t {
        problems.push(format!("frame {t}: index {} breaks contiguous numbering (expected {t})", e.index));
    }
    let mut file = |what: &str, rel: &Path| -> Option<PathBuf> {
        let p = root.join(rel);
        if p.is_file() {
            Some(p)
        } else {
            problems.push(format!("frame {t}: missing {what} file {}", p.display()));
            None
        }
    };
    let rgb_path = file("rgb", &e.rgb);
    let mask_path = file("mask", &e.mask);
    let normal_path = e.normal.as_ref().and_then(|p| file("normal map", p));
    let back_path = e.back_normal.as_ref().and_then(|p| file("back normal map", p));
    let kp_path = file("keypoint", &e.keypoints);
    let missing = rgb_path.is_none()
        || mask_path.is_none()
        || kp_path.is_none()
        || (e.normal.is_some() && normal_path.is_none())
        || (e.back_normal.is_some() && back_path.is_none());

    let mut image = |what: &str, p: Option<PathBuf>, load: fn(&Path) -> Result<Image>| -> Option<Image> {
        let p = p?;
        match load(&p) {
            Ok(img) => {
                check_size(&mut problems, t, what, &p, &img, w, h);
                Some(img)
            }
            Err(err) => {
                problems.push(format!("frame {t}: {err}"));
                None
            }
        }
    };
    let rgb = image("rgb", rgb_path, load_rgb);
    let mask = image("mask", mask_path, load_mask);
    let mut normals = |what: &str, p: Option<PathBuf>| -> Option<Image> {
        let p = p?;
        match load_normals(&p) {
            Ok(n) => {
                check_size(&mut problems, t, what, &p, &n.image, w, h);
                if n.max_deviation > NORMAL_WARN_DEVIATION {
                    warnings.push(format!("frame {t}: {what} {} renormalized (max length deviation {:.3})", p.display(), n.max_deviation));
                }
                Some(n.image)
            }
            Err(err) => {
                problems.push(format!("frame {t}: {err}"));
                None
            }
        }
    };
    let normal = normals("normal map", normal_path);
    let back_normal = normals("back normal map", back_path);

    let keypoints = kp_path.and_then(|p| match load_keypoints(&p) {
        Ok(k) => {
            if let Some(tpl) = template {
                if k.len() != tpl.num_keypoints() {
                    problems.push(format!(
                        "frame {t}: keypoint file {} has {} rows, template regresses {}",
                        p.display(),
                        k.len(),
                        tpl.num_keypoints()
                    ));
                }
            }
            if k.iter().all(|k| k.confidence == 0.0) {
                warnings.push(format!("frame {t}: no confident keypoints"));
            }
            Some(k)
        }
        Err(err) => {
            problems.push(format!("frame {t}: {err}"));
            None
        }
    });

    if let Some(tpl) = template {
        if e.pose.axis_angles.len() != tpl.num_joints() {
            problems.push(format!("frame {t}: pose has {} joints, template has {}", e.pose.axis_angles.len(), tpl.num_joints()));
        }
    }
    if !e.pose.is_finite() {
        problems.push(format!("frame {t}: pose is not finite"));
    }
    let camera = match e.camera.to_camera(w, h) {
        Ok(c) => Some(c),
        Err(err) => {
            problems.push(format!("frame {t}: camera: {err}"));
            None
        }
    };

    let frame = match (missing, camera, rgb, mask, keypoints) {
        (false, Some(camera), Some(rgb), Some(mask), Some(keypoints)) if problems.is_empty() => {
            Some(Frame { camera, rgb, mask, normal, back_normal, keypoints })
        }
        _ => None,
    };
    FrameLoad { frame, problems, warnings }
}

/// Load and validate every asset. All problems are collected into one
/// [`Error::Validation`].
pub fn load_manifest(path: &Path) -> Result<LoadedScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = SceneManifest::parse(&text, path)?;
    let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut problems = Vec::new();
    if manifest.version != MANIFEST_VERSION {
        problems.push(format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.version));
    }
    if manifest.width == 0 || manifest.height == 0 {
        problems.push(format!("resolution {}x{} has zero area", manifest.width, manifest.height));
    }
    if manifest.frames.is_empty() {
        problems.push("manifest lists no frames".into());
    }
    let template_path = root.join(&manifest.template);
    let template = if template_path.is_file() {
        match load_template(&template_path) {
            Ok(t) => Some(t),
            Err(e) => {
                problems.push(format!("template: {e}"));
                None
            }
        }
    } else {
        problems.push(format!("missing template file {}", template_path.display()));
        None
    };
    if let Some(t) = &template {
        if manifest.betas.len() != t.num_betas {
            problems.push(format!("{} shape coefficients, template has {}", manifest.betas.len(), t.num_betas));
        }
    }
    if manifest.betas.iter().any(|b| !b.is_finite()) {
        problems.push("shape coefficients are not finite".into());
    }

    let loads: Vec<FrameLoad> =
        manifest.frames.par_iter().enumerate().map(|(t, e)| load_frame(&root, t, e, &manifest, template.as_ref())).collect();
    let mut warnings = Vec::new();
    let mut frames = Vec::with_capacity(loads.len());
    for l in loads {
        problems.extend(l.problems);
        warnings.extend(l.warnings);
        frames.extend(l.frame);
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    let initial = PoseSequence { betas: manifest.betas.clone(), poses: manifest.frames.iter().map(|f| f.pose.clone()).collect() };
    Ok(LoadedScene { path: path.to_path_buf(), manifest, template: template.expect("validated"), frames, initial, warnings })
}

/// Write a scene as a manifest plus assets under `dir`, returning the
/// manifest path.
pub fn write_scene(dir: &Path, template: &BodyTemplate, frames: &[Frame], initial: &PoseSequence, prompt: &str, config: Option<serde_json::Value>) -> Result<PathBuf> {
    if frames.is_empty() || frames.len() != initial.len() {
        return Err(Error::Dimension(format!("{} frames and {} poses", frames.len(), initial.len())));
    }
    let (width, height) = (frames[0].camera.width, frames[0].camera.height);
    save_template(&dir.join("template.bin"), template)?;
    let mut entries = Vec::with_capacity(frames.len());
    for (t, (f, pose)) in frames.iter().zip(&initial.poses).enumerate() {
        f.validate()?;
        if (f.camera.width, f.camera.height) != (width, height) {
            return Err(Error::Dimension(format!("frame {t} is {}x{}, frame 0 is {width}x{height}", f.camera.width, f.camera.height)));
        }
        let name = |s: &str| PathBuf::from(format!("frames/{t:04}_{s}"));
        save_rgb(&dir.join(name("rgb.png")), &f.rgb)?;
        save_mask(&dir.join(name("mask.png")), &f.mask)?;
        if let Some(n) = &f.normal {
            save_normals(&dir.join(name("normal.png")), n)?;
        }
        if let Some(n) = &f.back_normal {
            save_normals(&dir.join(name("back_normal.png")), n)?;
        }
        save_keypoints(&dir.join(name("keypoints.txt")), &f.keypoints)?;
        entries.push(FrameEntry {
            index: t,
            rgb: name("rgb.png"),
            mask: name("mask.png"),
            normal: f.normal.as_ref().map(|_| name("normal.png")),
            back_normal: f.back_normal.as_ref().map(|_| name("back_normal.png")),
            keypoints: name("keypoints.txt"),
            pose: pose.clone(),
            camera: CameraEntry::from_camera(&f.camera),
        });
    }
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        template: "template.bin".into(),
        prompt: prompt.to_string(),
        width,
        height,
        betas: initial.betas.clone(),
        frames: entries,
        config,
    };
    let path = dir.join("manifest.json");
    write_atomic(&path, manifest.to_json().as_bytes())?;
    Ok(path)
}
