//! Injected defects and the automatic issue tagger that stands in for
//! human feedback when mining negatives.
//!
//! All functions work on videos with values in `[0, 1]`; latents are
//! converted with [`latent_to_unit`] first.

use super::data::{
    latent_to_unit, to_latent, ArtifactKind, IdentityLibrary, Layout, SyntheticClip,
};
use super::metrics::identity_trace;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::IssueOracle;

/// Largest per-channel drift a colour shift reaches by the last frame.
pub const COLOR_SHIFT_AMPLITUDE: f64 = 0.15;
/// Hue drift above which a clip is tagged as colour-shifted.
pub const HUE_DRIFT_THRESHOLD: f64 = 0.05;
/// Identity similarity below which a clip is tagged as identity-swapped.
pub const IDENTITY_THRESHOLD: f64 = 0.5;

fn dims(video: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *video.shape() {
        [t, 3, h, w] if t >= 2 => Ok((t, 3, h, w)),
        ref s => Err(Error::shape(format!(
            "expected an RGB video of at least 2 frames, got {s:?}"
        ))),
    }
}

/// Adds a red-up, blue-down drift growing linearly over the frames.
pub fn color_shift(video: &Tensor, amplitude: f64) -> Result<Tensor> {
    let (t, c, h, w) = dims(video)?;
    let n = h * w;
    let mut out = video.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (f, ch) = (i / (c * n), (i / n) % c);
        let d = amplitude * f as f64 / (t - 1) as f64;
        *v += match ch {
            0 => d,
            2 => -d,
            _ => 0.0,
        };
    }
    Ok(out)
}

/// Replaces the identity band of frames `from..` with `replacement`'s.
pub fn identity_swap(video: &Tensor, replacement: &Tensor, from: usize) -> Result<Tensor> {
    let (t, c, h, w) = dims(video)?;
    if replacement.shape() != [c, h, w] {
        return Err(Error::shape(format!(
            "replacement {:?} for frames of {:?}",
            replacement.shape(),
            [c, h, w]
        )));
    }
    let band = Layout::new(h, w).identity_band();
    let mut out = video.clone();
    let d = out.data_mut();
    for f in from..t {
        for ch in 0..c {
            for y in band.top..band.top + band.height {
                for x in band.left..band.left + band.width {
                    d[((f * c + ch) * h + y) * w + x] = replacement.data()[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}

/// Identity `k`'s pattern at `h x w`, average-pooled from the library's
/// resolution.
pub fn pattern_at(library: &IdentityLibrary, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let p = library.pattern(k);
    let ph = p.shape()[1];
    if !ph.is_multiple_of(h) || ph / h != p.shape()[2] / w {
        return Err(Error::shape(format!(
            "cannot pool {:?} to {h}x{w}",
            p.shape()
        )));
    }
    let pooled = to_latent(&p.clone().reshape(&[1, 3, ph, p.shape()[2]])?, 1, ph / h)?;
    latent_to_unit(&pooled).reshape(&[3, h, w])
}

/// Applies `kind` to a unit-range video of identity `identity`.
pub fn inject_video(
    video: &Tensor,
    kind: ArtifactKind,
    identity: usize,
    library: &IdentityLibrary,
) -> Result<Tensor> {
    let (t, _, h, w) = dims(video)?;
    match kind {
        ArtifactKind::ColorShift => color_shift(video, COLOR_SHIFT_AMPLITUDE),
        ArtifactKind::IdentitySwap => {
            let other = pattern_at(library, library.most_dissimilar(identity), h, w)?;
            identity_swap(video, &other, t / 2)
        }
    }
}

/// `clip` with the artifact applied and tagged.
pub fn inject_artifact(
    clip: &SyntheticClip,
    kind: ArtifactKind,
    library: &IdentityLibrary,
) -> Result<SyntheticClip> {
    let mut out = clip.clone();
    out.pixels = inject_video(&clip.pixels, kind, clip.spec.identity, library)?;
    out.issue = Some(kind);
    Ok(out)
}

/// Largest change of the mean channel differences (R-G, G-B) relative to
/// the first frame, measured below the identity band so that an identity
/// swap does not register as a hue change.
pub fn hue_drift(video: &Tensor) -> Result<f64> {
    let (t, c, h, w) = dims(video)?;
    let n = h * w;
    let skip = Layout::new(h, w).identity_band().height * w;
    let hue = |f: usize| -> [f64; 2] {
        let m: Vec<f64> = (0..c)
            .map(|ch| {
                let plane = &video.data()[(f * c + ch) * n + skip..(f * c + ch + 1) * n];
                plane.iter().sum::<f64>() / plane.len() as f64
            })
            .collect();
        [m[0] - m[1], m[1] - m[2]]
    };
    let h0 = hue(0);
    Ok((1..t)
        .map(|f| {
            let hf = hue(f);
            (hf[0] - h0[0]).abs().max((hf[1] - h0[1]).abs())
        })
        .fold(0.0, f64::max))
}

/// Mean identity similarity of the second half of the clip to frame 0.
pub fn late_identity(video: &Tensor) -> Result<f64> {
    let (t, c, h, w) = dims(video)?;
    let first = video.slice_outer(0, 1)?.reshape(&[c, h, w])?;
    let late = video.slice_outer(t / 2, t - t / 2)?;
    let tr = identity_trace(&late, &first)?;
    Ok(tr.iter().sum::<f64>() / tr.len() as f64)
}

/// Issue found in a unit-range video, colour shift taking precedence.
pub fn oracle_tag(video: &Tensor) -> Result<Option<ArtifactKind>> {
    if hue_drift(video)? > HUE_DRIFT_THRESHOLD {
        return Ok(Some(ArtifactKind::ColorShift));
    }
    if late_identity(video)? < IDENTITY_THRESHOLD {
        return Ok(Some(ArtifactKind::IdentitySwap));
    }
    Ok(None)
}

/// [`oracle_tag`] on latents.
pub struct LatentOracle;

impl IssueOracle for LatentOracle {
    fn tag(&self, latent: &Tensor) -> Option<String> {
        oracle_tag(&latent_to_unit(latent))
            .ok()
            .flatten()
            .map(|k| k.tag().to_string())
    }
}
