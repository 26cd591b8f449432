use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObs {
    pub center: [f64; 2],
    pub size: [f64; 2],
}

/// One video frame in pixel coordinates (y up). Missing keypoints are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub shoulder: Option<[f64; 2]>,
    pub elbow: Option<[f64; 2]>,
    pub wrist: Option<[f64; 2]>,
    #[serde(rename = "box")]
    pub box_obs: Option<BoxObs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTrace {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub fps: f64,
    /// known box mass (kg); the regen config supplies a default when absent
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_mass: Option<f64>,
    pub frames: Vec<Frame>,
}

fn default_schema() -> u32 {
    1
}

impl SceneTrace {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Rejected("trace has no frames".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Validation(format!("frame rate must be positive, got {}", self.fps)));
        }
        let dt = 1.0 / self.fps;
        for w in self.frames.windows(2) {
            let step = w[1].t - w[0].t;
            if !(step > 0.0) {
                return Err(Error::Validation(format!("timestamps not increasing at t = {}", w[1].t)));
            }
            if (step - dt).abs() > 0.25 * dt {
                return Err(Error::Validation(format!("frame spacing {step:.4} s far from 1/fps at t = {}", w[1].t)));
            }
        }
        for f in &self.frames {
            let pts = [f.shoulder, f.elbow, f.wrist].into_iter().flatten().chain(f.box_obs.iter().flat_map(|b| [b.center, b.size]));
            for p in pts {
                if !p[0].is_finite() || !p[1].is_finite() {
                    return Err(Error::Validation(format!("non-finite keypoint at t = {}", f.t)));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            file: source.to_string(),
            msg: format!("{e} (line {}, column {}, byte offset {})", e.line(), e.column(), byte_offset(text, e.line(), e.column())),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    /// Multiplies every pixel coordinate and extent by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        let sc = |p: &mut Option<[f64; 2]>| {
            if let Some(p) = p.as_mut() {
                p[0] *= k;
                p[1] *= k;
            }
        };
        for f in &mut out.frames {
            sc(&mut f.shoulder);
            sc(&mut f.elbow);
            sc(&mut f.wrist);
            if let Some(b) = f.box_obs.as_mut() {
                for v in b.center.iter_mut().chain(b.size.iter_mut()) {
                    *v *= k;
                }
            }
        }
        out
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut off = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return off + column.saturating_sub(1);
        }
        off += l.len();
    }
    off
}
