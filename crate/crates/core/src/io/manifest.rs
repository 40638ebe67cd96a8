//! Probe and evaluation manifests.
//!
//! ```json
//! {"grid": [R, C],
//!  "samples": [{"image": "a.ppm", "concept": "wing", "mask": "a_wing.pgm",
//!               "class": "sparrow", "present": true}]}
//! ```
//!
//! Relative paths resolve against the manifest's directory. `class` is
//! optional; `present` defaults to `true`, and only samples with the concept
//! present must carry a mask. `image` may also point at a precomputed maps
//! file (`.json`, see [`crate::pipeline`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub image: PathBuf,
    pub concept: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default = "default_present")]
    pub present: bool,
}

fn default_present() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub grid: (usize, usize),
    pub samples: Vec<ProbeSample>,
}

impl Manifest {
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Reads a manifest, resolving paths and checking that every referenced
/// file exists.
pub fn load_probe_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.grid.0 == 0 || manifest.grid.1 == 0 {
        return Err(Error::format(path, "grid dimensions must be positive"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for (index, s) in manifest.samples.iter_mut().enumerate() {
        if s.concept.is_empty() {
            return Err(Error::Manifest {
                index,
                msg: "empty concept name".into(),
            });
        }
        s.image = base.join(&s.image);
        if !s.image.is_file() {
            return Err(Error::Manifest {
                index,
                msg: format!("image {} does not exist", s.image.display()),
            });
        }
        match &mut s.mask {
            Some(m) => {
                *m = base.join(&*m);
                if !m.is_file() {
                    return Err(Error::Manifest {
                        index,
                        msg: format!("mask {} does not exist", m.display()),
                    });
                }
            }
            None if s.present => {
                return Err(Error::Manifest {
                    index,
                    msg: "concept marked present but no mask given".into(),
                });
            }
            None => {}
        }
    }
    Ok(manifest)
}
