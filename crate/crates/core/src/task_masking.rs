//! Task masks: every animation task is a masked spatio-temporal
//! reconstruction problem that differs only in which latent positions are
//! given and which are generated.
//!
//! Convention: `1` marks a position to generate, `0` a given (preserved) one,
//! so [`TaskMask::ratio`] is the fraction of the clip to reconstruct.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    T2V,
    I2V,
    Flf2V,
    LipSync,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::T2V,
        TaskKind::I2V,
        TaskKind::Flf2V,
        TaskKind::LipSync,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2V => "t2v",
            TaskKind::I2V => "i2v",
            TaskKind::Flf2V => "flf2v",
            TaskKind::LipSync => "lip_sync",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}

/// Axis-aligned rectangle on the latent spatial grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Region {
            top,
            left,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::invalid("region must cover at least one position"));
        }
        if self.top + self.height > h || self.left + self.width > w {
            return Err(Error::invalid(format!(
                "region {self:?} exceeds the {h}x{w} grid"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMask {
    values: Tensor,
    kind: TaskKind,
}

impl TaskMask {
    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    /// Shape `(frames, 1, height, width)`.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }

    /// Fraction of positions marked for generation.
    pub fn ratio(&self) -> f64 {
        self.values.sum() / self.values.len() as f64
    }

    pub fn count_generated(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Mask value at `(frame, y, x)`.
    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize) -> f64 {
        let (h, w) = self.spatial();
        self.values.data()[(f * h + y) * w + x]
    }

    /// Builds a mask from raw values, rejecting anything that is not 0 or 1.
    pub fn from_values(values: Tensor, kind: TaskKind) -> Result<Self> {
        if values.rank() != 4 || values.shape()[1] != 1 {
            return Err(Error::shape(format!(
                "mask must be (frames, 1, h, w), got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(TaskMask { values, kind })
    }

    /// Sub-mask covering frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<TaskMask> {
        Ok(TaskMask {
            values: self.values.slice_outer(start, len)?,
            kind: self.kind,
        })
    }
}

/// Builds the closed-form mask for `kind` over a `(frames, height, width)`
/// latent grid.
pub fn build_task_mask(
    kind: TaskKind,
    shape: (usize, usize, usize),
    region: Option<Region>,
) -> Result<TaskMask> {
    let (frames, h, w) = shape;
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("empty mask shape {shape:?}")));
    }
    match (kind, &region) {
        (TaskKind::LipSync, None) => {
            return Err(Error::invalid("lip-sync mask needs a mouth region"))
        }
        (TaskKind::LipSync, Some(r)) => r.validate(h, w)?,
        (_, Some(_)) => {
            return Err(Error::invalid(format!(
                "a region is only meaningful for lip sync, not {kind}"
            )))
        }
        (TaskKind::Flf2V, None) if frames < 2 => {
            return Err(Error::invalid(
                "first-last-frame task needs at least 2 frames",
            ))
        }
        _ => {}
    }
    let values = Tensor::from_fn(&[frames, 1, h, w], |i| {
        let f = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        let generate = match kind {
            TaskKind::T2V => true,
            TaskKind::I2V => f != 0,
            TaskKind::Flf2V => f != 0 && f != frames - 1,
            TaskKind::LipSync => region.unwrap().contains(y, x),
        };
        if generate {
            1.0
        } else {
            0.0
        }
    });
    Ok(TaskMask { values, kind })
}

pub fn mask_ratio(mask: &TaskMask) -> f64 {
    mask.ratio()
}

fn check_latent_against_mask(t: &Tensor, mask: &TaskMask, what: &str) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[0] != mask.frames() || (s[2], s[3]) != mask.spatial() {
        return Err(Error::shape(format!(
            "{what} {s:?} does not match mask {:?}",
            mask.values.shape()
        )));
    }
    Ok(())
}

/// Channel concatenation `[noisy; reference * (1 - mask); mask]`, giving a
/// `(frames, 2C + 1, h, w)` tensor.
pub fn assemble_model_input(
    noisy: &Tensor,
    clean_reference: &Tensor,
    mask: &TaskMask,
) -> Result<Tensor> {
    noisy.check_same_shape(clean_reference, "noisy vs reference")?;
    check_latent_against_mask(noisy, mask, "latent")?;
    let s = noisy.shape();
    let (frames, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(frames * (2 * c + 1) * plane);
    let md = mask.values.data();
    for f in 0..frames {
        let m = &md[f * plane..(f + 1) * plane];
        let base = f * c * plane;
        out.extend_from_slice(&noisy.data()[base..base + c * plane]);
        for ch in 0..c {
            let r = &clean_reference.data()[base + ch * plane..base + (ch + 1) * plane];
            out.extend(
                r.iter()
                    .zip(m)
                    .map(|(&v, &mm)| if mm == 1.0 { 0.0 } else { v }),
            );
        }
        out.extend_from_slice(m);
    }
    Tensor::new(&[frames, 2 * c + 1, h, w], out)
}

/// `mask * latent + (1 - mask) * reference`, broadcasting the mask over
/// channels.
pub fn reimpose_known(latent: &Tensor, reference: &Tensor, mask: &TaskMask) -> Result<Tensor> {
    latent.check_same_shape(reference, "latent vs reference")?;
    check_latent_against_mask(latent, mask, "latent")?;
    let s = latent.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let md = mask.values.data();
    let out = Tensor::from_fn(s, |i| {
        let f = i / (c * plane);
        let p = i % plane;
        if md[f * plane + p] == 1.0 {
            latent.data()[i]
        } else {
            reference.data()[i]
        }
    });
    Ok(out)
}
