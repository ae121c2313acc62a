//! Dataset directories:
//!
//! ```text
//! <root>/left/<name>.png
//! <root>/right/<name>.png
//! <root>/gt/<name>.pfm        (or <name>.png, 16-bit, value / 256)
//! <root>/teacher/<name>.pfm   (optional)
//! ```
//!
//! Samples are matched by file stem and returned in lexicographic order.

use std::path::{Path, PathBuf};

use tdstereo_tensor::Tensor;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::io::{pfm, png};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `3×H×W`, channels in [0, 1].
    pub left: Tensor,
    pub right: Tensor,
    pub gt: DisparityMap,
    pub teacher: Option<DisparityMap>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let bad = |what: &str, shape: &[usize]| {
            Error::Invalid(format!("sample {}: {what} has shape {shape:?}, left image is {h}×{w}", self.name))
        };
        if self.right.shape() != self.left.shape() {
            return Err(bad("right image", self.right.shape()));
        }
        if self.gt.values().shape() != [h, w] {
            return Err(bad("ground truth", self.gt.values().shape()));
        }
        if let Some(t) = &self.teacher {
            if t.values().shape() != [h, w] {
                return Err(bad("teacher", t.values().shape()));
            }
        }
        Ok(())
    }
}

fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_gt(root: &Path, name: &str) -> Result<DisparityMap> {
    let pfm_path = root.join("gt").join(format!("{name}.pfm"));
    if pfm_path.exists() {
        return pfm::read_disparity(&pfm_path);
    }
    let png_path = root.join("gt").join(format!("{name}.png"));
    if png_path.exists() {
        return png::read_disparity16(&png_path);
    }
    Err(Error::io(
        format!("reading {}", pfm_path.display()),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no ground truth (.pfm or .png)"),
    ))
}

pub fn load_dir(root: &Path) -> Result<Vec<Sample>> {
    let names = stems(&root.join("left"), "png")?;
    if names.is_empty() {
        return Err(Error::Format {
            path: root.join("left"),
            msg: "no .png images found".into(),
        });
    }
    let teacher_dir = root.join("teacher");
    names
        .into_iter()
        .map(|name| {
            let left = png::read_rgb(&root.join("left").join(format!("{name}.png")))?;
            let right = png::read_rgb(&root.join("right").join(format!("{name}.png")))?;
            let gt = read_gt(root, &name)?;
            let tp = teacher_dir.join(format!("{name}.pfm"));
            let teacher = if tp.exists() {
                Some(pfm::read_disparity(&tp)?)
            } else {
                None
            };
            let s = Sample {
                name,
                left,
                right,
                gt,
                teacher,
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}

fn mkdir(p: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
    Ok(p.to_path_buf())
}

/// Writes samples in the directory layout above (images as 8-bit PNG).
pub fn write_dir(root: &Path, samples: &[Sample]) -> Result<()> {
    let (l, r, g) = (mkdir(&root.join("left"))?, mkdir(&root.join("right"))?, mkdir(&root.join("gt"))?);
    let t = if samples.iter().any(|s| s.teacher.is_some()) {
        Some(mkdir(&root.join("teacher"))?)
    } else {
        None
    };
    for s in samples {
        png::write_rgb(&l.join(format!("{}.png", s.name)), &s.left)?;
        png::write_rgb(&r.join(format!("{}.png", s.name)), &s.right)?;
        pfm::write_disparity(&g.join(format!("{}.pfm", s.name)), &s.gt)?;
        if let (Some(dir), Some(teacher)) = (&t, &s.teacher) {
            pfm::write_disparity(&dir.join(format!("{}.pfm", s.name)), teacher)?;
        }
    }
    Ok(())
}
