//! Timestep phase-aware allocation of modal expert weights.
//!
//! Each modal `c` ramps linearly from `w_floor` to `w_ceil` between its two
//! critical timesteps `b1 <= b2`:
//!
//! ```text
//! W(c, t) = w_floor                                   t <  b1
//!         = w_floor + (t - b1) (w_ceil - w_floor)/(b2 - b1)   b1 <= t < b2
//!         = w_ceil                                    t >= b2
//! ```
//!
//! Timestep 1000 is pure noise (the earliest denoising phase).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_TIMESTEP: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modal {
    Text,
    Image,
    Audio,
}

impl Modal {
    pub const ALL: [Modal; 3] = [Modal::Text, Modal::Image, Modal::Audio];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modal::Text => "text",
            Modal::Image => "image",
            Modal::Audio => "audio",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knots {
    pub b1: f64,
    pub b2: f64,
    /// Ablation switch: the expert is silenced (weight 0) for timesteps in
    /// this closed interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub off: Option<[f64; 2]>,
}

impl Knots {
    pub const fn new(b1: f64, b2: f64) -> Self {
        Knots { b1, b2, off: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhdaConfig {
    pub text: Knots,
    pub image: Knots,
    pub audio: Knots,
    #[serde(default = "default_floor")]
    pub w_floor: f64,
    #[serde(default = "default_ceil")]
    pub w_ceil: f64,
}

fn default_floor() -> f64 {
    0.5
}

fn default_ceil() -> f64 {
    1.0
}

impl Default for PhdaConfig {
    /// Text is equally important throughout, image matters in the early and
    /// middle phases, audio mostly in the earliest phase.
    fn default() -> Self {
        PhdaConfig {
            text: Knots::new(0.0, 0.0),
            image: Knots::new(100.0, 400.0),
            audio: Knots::new(400.0, 700.0),
            w_floor: default_floor(),
            w_ceil: default_ceil(),
        }
    }
}

impl PhdaConfig {
    /// Every modal at constant `w_ceil`.
    pub fn flat() -> Self {
        PhdaConfig {
            text: Knots::new(0.0, 0.0),
            image: Knots::new(0.0, 0.0),
            audio: Knots::new(0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn knots(&self, c: Modal) -> &Knots {
        match c {
            Modal::Text => &self.text,
            Modal::Image => &self.image,
            Modal::Audio => &self.audio,
        }
    }

    pub fn knots_mut(&mut self, c: Modal) -> &mut Knots {
        match c {
            Modal::Text => &mut self.text,
            Modal::Image => &mut self.image,
            Modal::Audio => &mut self.audio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_floor > self.w_ceil {
            return Err(Error::Config(format!(
                "phda: w_floor {} exceeds w_ceil {}",
                self.w_floor, self.w_ceil
            )));
        }
        for c in Modal::ALL {
            let k = self.knots(c);
            if !(0.0 <= k.b1 && k.b1 <= k.b2 && k.b2 <= MAX_TIMESTEP) {
                return Err(Error::Config(format!(
                    "phda.{c}: need 0 <= b1 <= b2 <= 1000, got b1 = {}, b2 = {}",
                    k.b1, k.b2
                )));
            }
            if let Some([lo, hi]) = k.off {
                if lo > hi {
                    return Err(Error::Config(format!("phda.{c}.off: {lo} > {hi}")));
                }
            }
        }
        Ok(())
    }

    /// Slope and intercept of the transition branch, when it is non-empty.
    pub fn line(&self, c: Modal) -> Option<(f64, f64)> {
        let k = self.knots(c);
        (k.b1 < k.b2).then(|| {
            let m = (self.w_ceil - self.w_floor) / (k.b2 - k.b1);
            (m, self.w_floor - m * k.b1)
        })
    }
}

pub fn modal_weight(c: Modal, tau: f64, cfg: &PhdaConfig) -> Result<f64> {
    if !(0.0..=MAX_TIMESTEP).contains(&tau) {
        return Err(Error::invalid(format!("timestep {tau} outside [0, 1000]")));
    }
    let k = cfg.knots(c);
    if let Some([lo, hi]) = k.off {
        if lo <= tau && tau <= hi {
            return Ok(0.0);
        }
    }
    Ok(if tau < k.b1 {
        cfg.w_floor
    } else if tau < k.b2 {
        // equal to m * tau + b, anchored at b1 so the knot is exact
        cfg.w_floor + (tau - k.b1) * (cfg.w_ceil - cfg.w_floor) / (k.b2 - k.b1)
    } else {
        cfg.w_ceil
    })
}

/// Weights for (text, image, audio), indexed by [`Modal::index`].
pub fn weights_all(tau: f64, cfg: &PhdaConfig) -> Result<[f64; 3]> {
    Ok([
        modal_weight(Modal::Text, tau, cfg)?,
        modal_weight(Modal::Image, tau, cfg)?,
        modal_weight(Modal::Audio, tau, cfg)?,
    ])
}
