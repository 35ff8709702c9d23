//! Flow-matching inference.
//!
//! Euler integration from pure noise (`t = 1`) to data (`t = 0`) with
//! multi-condition classifier-free guidance, phase-aware negative prompts
//! and, for clips longer than the model window, overlapping sliding windows
//! whose shared frames are guided with a blend of both windows.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Conditioning};
use crate::error::{Error, Result};
use crate::exec;
use crate::modal_features::{
    segment_audio, AudioEmbeddings, FaceMask, ImageFeatures, ModalBundle, TextFeatures,
};
use crate::nn::ParamStore;
use crate::phda::{PhdaConfig, MAX_TIMESTEP};
use crate::task_masking::{assemble_model_input, reimpose_known, TaskMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PngConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_split")]
    pub tau_split: f64,
    #[serde(default = "one")]
    pub w_early: f64,
    #[serde(default = "one")]
    pub w_late: f64,
    /// Motion negatives apply only on this many initial steps.
    #[serde(default = "default_motion_steps")]
    pub motion_steps: usize,
    #[serde(default = "default_motion_prompt")]
    pub motion_prompt: String,
    #[serde(default = "default_detail_prompt")]
    pub detail_prompt: String,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn default_split() -> f64 {
    600.0
}
fn default_motion_steps() -> usize {
    3
}
fn default_motion_prompt() -> String {
    "static frozen stiff".into()
}
fn default_detail_prompt() -> String {
    "blurry distorted color-shift".into()
}

impl Default for PngConfig {
    fn default() -> Self {
        PngConfig {
            enabled: true,
            tau_split: default_split(),
            w_early: 1.0,
            w_late: 1.0,
            motion_steps: default_motion_steps(),
            motion_prompt: default_motion_prompt(),
            detail_prompt: default_detail_prompt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    #[serde(default = "default_s_text")]
    pub s_text: f64,
    #[serde(default = "default_s_audio")]
    pub s_audio: f64,
    #[serde(default)]
    pub png: PngConfig,
    /// Window length in latent frames.
    pub window: usize,
    /// Frames shared by consecutive windows.
    pub overlap: usize,
    /// Guidance scale of the overlap formula.
    #[serde(default = "default_lv_scale")]
    pub lv_scale: f64,
    #[serde(default = "yes")]
    pub long_video_cfg: bool,
}

fn default_s_text() -> f64 {
    3.0
}
fn default_s_audio() -> f64 {
    9.0
}
fn default_lv_scale() -> f64 {
    2.0
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 20,
            s_text: default_s_text(),
            s_audio: default_s_audio(),
            png: PngConfig::default(),
            window: 4,
            overlap: 2,
            lv_scale: default_lv_scale(),
            long_video_cfg: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler: steps must be at least 1".into()));
        }
        if self.overlap >= self.window {
            return Err(Error::Config(format!(
                "sampler: overlap {} must be smaller than window {}",
                self.overlap, self.window
            )));
        }
        Ok(())
    }
}

/// `v_u + s_text (v_t - v_u) + s_audio (v_ta - v_t)`.
pub fn compose_cfg(
    v_uncond: &Tensor,
    v_text: &Tensor,
    v_text_audio: &Tensor,
    s_text: f64,
    s_audio: f64,
) -> Result<Tensor> {
    v_uncond.check_same_shape(v_text, "unconditional vs text velocity")?;
    v_text.check_same_shape(v_text_audio, "text vs text+audio velocity")?;
    let d: Vec<f64> = v_uncond
        .data()
        .iter()
        .zip(v_text.data())
        .zip(v_text_audio.data())
        .map(|((&u, &t), &ta)| u + s_text * (t - u) + s_audio * (ta - t))
        .collect();
    Tensor::new(v_uncond.shape(), d)
}

/// Negative text condition at timestep `tau`: motion-weighted in the early
/// (high-noise) phase, detail-weighted in the late phase.
pub fn png_negative(
    tau: f64,
    png: &PngConfig,
    n_motion: &TextFeatures,
    n_detail: &TextFeatures,
) -> Result<TextFeatures> {
    let (wm, wd) = if tau >= png.tau_split {
        (png.w_early, 1.0 - png.w_early)
    } else {
        (1.0 - png.w_late, png.w_late)
    };
    let tokens = n_motion
        .tokens
        .zip_map(&n_detail.tokens, |m, d| wm * m + wd * d)?;
    Ok(TextFeatures { tokens })
}

/// Weights `(1 - f/N, f/N)` of the two windows at overlap position `f`.
pub fn blend_weights(f: f64, n: f64) -> Result<(f64, f64)> {
    if n == 0.0 {
        return if f == 0.0 {
            Ok((1.0, 0.0))
        } else {
            Err(Error::invalid(format!(
                "overlap position {f} with zero overlap"
            )))
        };
    }
    if !(0.0..=n).contains(&f) {
        return Err(Error::invalid(format!(
            "overlap position {f} outside [0, {n}]"
        )));
    }
    let w1 = f / n;
    Ok((1.0 - w1, w1))
}

/// `(1 - f/N) v_w + (f/N) v_{w+1}`.
pub fn overlap_blend(v_w: &Tensor, v_w1: &Tensor, f: f64, n: f64) -> Result<Tensor> {
    let (a, b) = blend_weights(f, n)?;
    if b == 0.0 {
        v_w.check_same_shape(v_w1, "window velocities")?;
        return Ok(v_w.clone());
    }
    if a == 0.0 {
        v_w.check_same_shape(v_w1, "window velocities")?;
        return Ok(v_w1.clone());
    }
    v_w.zip_map(v_w1, |x, y| a * x + b * y)
}

/// `v_w_cond + s (blend(v_w_cond, v_w1_cond) - v_w_uncond)`; the
/// unconditional term comes from window `w` only.
pub fn long_video_cfg(
    v_w_cond: &Tensor,
    v_w1_cond: &Tensor,
    v_w_uncond: &Tensor,
    f: f64,
    n: f64,
    s: f64,
) -> Result<Tensor> {
    let blend = overlap_blend(v_w_cond, v_w1_cond, f, n)?;
    v_w_cond.check_same_shape(v_w_uncond, "conditional vs unconditional velocity")?;
    let d: Vec<f64> = v_w_cond
        .data()
        .iter()
        .zip(blend.data())
        .zip(v_w_uncond.data())
        .map(|((&c, &b), &u)| c + s * (b - u))
        .collect();
    Tensor::new(v_w_cond.shape(), d)
}

/// Velocity field evaluated on an assembled `(frames, 2C + 1, H, W)` input.
pub trait Denoiser: Sync {
    fn velocity(&self, input: &Tensor, bundle: &ModalBundle, tau: f64) -> Result<Tensor>;
}

/// The backbone with frozen parameters.
pub struct ModelDenoiser<'a> {
    pub model: &'a Backbone,
    pub params: &'a ParamStore,
    pub phda: &'a PhdaConfig,
}

impl Denoiser for ModelDenoiser<'_> {
    fn velocity(&self, input: &Tensor, bundle: &ModalBundle, tau: f64) -> Result<Tensor> {
        self.model.predict(
            self.params,
            input,
            Conditioning {
                bundle,
                phda: self.phda,
            },
            tau,
        )
    }
}

/// The negative prompt pair used by phase-aware guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativePrompts {
    pub motion: TextFeatures,
    pub detail: TextFeatures,
}

/// Conditions of one window and the null conditions guidance compares to.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub bundle: ModalBundle,
    pub null_text: TextFeatures,
    pub negatives: Option<NegativePrompts>,
}

impl Guidance {
    /// Text condition of the unconditional pass at step `k`.
    fn uncond_text(&self, tau: f64, k: usize, png: &PngConfig) -> Result<TextFeatures> {
        match (&self.negatives, png.enabled) {
            (Some(n), true) if tau < png.tau_split || k < png.motion_steps => {
                png_negative(tau, png, &n.motion, &n.detail)
            }
            _ => Ok(self.null_text.clone()),
        }
    }
}

/// Conditional, text-only and unconditional velocities of one window.
struct Passes {
    cond: Tensor,
    text: Option<Tensor>,
    uncond: Option<Tensor>,
}

fn unit_scales(cfg: &SamplerConfig) -> bool {
    cfg.s_text == 1.0 && cfg.s_audio == 1.0
}

#[allow(clippy::too_many_arguments)]
fn window_passes(
    den: &dyn Denoiser,
    x: &Tensor,
    reference: &Tensor,
    mask: &TaskMask,
    guide: &Guidance,
    tau: f64,
    k: usize,
    cfg: &SamplerConfig,
    need_uncond: bool,
) -> Result<Passes> {
    let input = assemble_model_input(x, reference, mask)?;
    let cond = den.velocity(&input, &guide.bundle, tau)?;
    let mut silent = guide.bundle.clone();
    silent.audio.segments = Tensor::zeros(silent.audio.segments.shape());
    let text = if unit_scales(cfg) {
        None
    } else {
        Some(den.velocity(&input, &silent, tau)?)
    };
    let uncond = if need_uncond || !unit_scales(cfg) {
        silent.text = guide.uncond_text(tau, k, &cfg.png)?;
        Some(den.velocity(&input, &silent, tau)?)
    } else {
        None
    };
    Ok(Passes { cond, text, uncond })
}

fn guided(p: &Passes, cfg: &SamplerConfig) -> Result<Tensor> {
    match (&p.text, &p.uncond) {
        (Some(t), Some(u)) => compose_cfg(u, t, &p.cond, cfg.s_text, cfg.s_audio),
        _ => Ok(p.cond.clone()),
    }
}

/// Timestep at the start of Euler step `k` of `steps`.
pub fn step_timestep(k: usize, steps: usize) -> f64 {
    MAX_TIMESTEP * (1.0 - k as f64 / steps as f64)
}

/// Known positions at noise level `t`: the reference on the straight path
/// towards the initial noise, which is the reference itself at `t = 0`.
fn noised_reference(reference: &Tensor, init: &Tensor, t: f64) -> Result<Tensor> {
    if t == 0.0 {
        return Ok(reference.clone());
    }
    reference.zip_map(init, |r, e| (1.0 - t) * r + t * e)
}

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} diverged")))
    }
}

/// Integrates one window from `init` noise. Known positions (mask 0) are
/// reimposed after every step and equal `reference` at the output.
#[allow(clippy::too_many_arguments)]
pub fn euler_sample(
    den: &dyn Denoiser,
    init: &Tensor,
    guide: &Guidance,
    mask: &TaskMask,
    reference: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    init.check_same_shape(reference, "noise vs reference")?;
    let dt = 1.0 / cfg.steps as f64;
    let mut x = reimpose_known(init, &noised_reference(reference, init, 1.0)?, mask)?;
    for k in 0..cfg.steps {
        let tau = step_timestep(k, cfg.steps);
        let p = window_passes(den, &x, reference, mask, guide, tau, k, cfg, false)?;
        let v = guided(&p, cfg)?;
        x.axpy(-dt, &v)?;
        let t_next = 1.0 - (k + 1) as f64 / cfg.steps as f64;
        x = reimpose_known(&x, &noised_reference(reference, init, t_next)?, mask)?;
        check_finite(&x, "sampler state")?;
    }
    Ok(x)
}

/// Window start frames: stride `window - overlap`; when the stride does not
/// divide `total - window` a last window ends exactly at `total`.
pub fn window_starts(total: usize, window: usize, overlap: usize) -> Result<Vec<usize>> {
    if overlap >= window {
        return Err(Error::invalid(format!(
            "stride 0: overlap {overlap} >= window {window}"
        )));
    }
    if total < window {
        return Err(Error::invalid(format!(
            "{total} frames shorter than window {window}"
        )));
    }
    let stride = window - overlap;
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|s| s + window <= total)
        .collect();
    if starts.last().unwrap() + window < total {
        starts.push(total - window);
    }
    Ok(starts)
}

/// Per-window condition bundles: audio features for the window's span are
/// re-segmented; text, image and face mask are shared or sliced.
#[allow(clippy::too_many_arguments)]
pub fn window_bundles(
    text: &TextFeatures,
    image: &ImageFeatures,
    audio: &AudioEmbeddings,
    face: &FaceMask,
    starts: &[usize],
    window: usize,
    r: usize,
    e: usize,
) -> Result<Vec<ModalBundle>> {
    let per_frame = r * audio.alpha;
    let total = starts.last().map_or(0, |s| s + window);
    if audio.len() < total * per_frame {
        return Err(Error::invalid(format!(
            "audio covers {} features, video needs {}",
            audio.len(),
            total * per_frame
        )));
    }
    starts
        .iter()
        .map(|&s| {
            let span = AudioEmbeddings {
                features: audio
                    .features
                    .slice_outer(s * per_frame, window * per_frame)?,
                alpha: audio.alpha,
            };
            Ok(ModalBundle {
                text: text.clone(),
                audio: segment_audio(&span, r, e, window)?,
                image: image.clone(),
                face: face.slice_frames(s, window)?,
            })
        })
        .collect()
}

/// How each frame's velocity is formed.
#[derive(Clone, Copy, Debug, PartialEq)]
enum FrameSource {
    Single { w: usize },
    Overlap { w: usize, f: f64, n: f64 },
}

fn frame_sources(starts: &[usize], window: usize, total: usize, blend: bool) -> Vec<FrameSource> {
    (0..total)
        .map(|j| {
            let w = starts
                .iter()
                .position(|&s| s <= j && j < s + window)
                .unwrap();
            match starts.get(w + 1) {
                Some(&next) if j >= next => {
                    if !blend {
                        return FrameSource::Single { w: w + 1 };
                    }
                    let o = (starts[w] + window - next) as f64;
                    let i = (j - next) as f64;
                    FrameSource::Overlap {
                        w,
                        f: (i + 1.0) * o / (o + 1.0),
                        n: o,
                    }
                }
                _ => FrameSource::Single { w },
            }
        })
        .collect()
}

/// Generates `total` latent frames with windows of `cfg.window` frames
/// overlapping by `cfg.overlap`. All windows are denoised jointly; shared
/// frames use the long-video guidance, or when that is disabled take the
/// later window's prediction.
#[allow(clippy::too_many_arguments)]
pub fn sliding_window_generate(
    den: &dyn Denoiser,
    init: &Tensor,
    windows: &[Guidance],
    mask: &TaskMask,
    reference: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    init.check_same_shape(reference, "noise vs reference")?;
    let total = init.shape()[0];
    let starts = window_starts(total, cfg.window, cfg.overlap)?;
    if windows.len() != starts.len() {
        return Err(Error::invalid(format!(
            "{} window conditions for {} windows",
            windows.len(),
            starts.len()
        )));
    }
    if starts.len() == 1 {
        return euler_sample(den, init, &windows[0], mask, reference, cfg);
    }
    let sources = frame_sources(&starts, cfg.window, total, cfg.long_video_cfg);
    let needs_uncond: Vec<bool> = (0..starts.len())
        .map(|w| {
            sources
                .iter()
                .any(|s| matches!(s, FrameSource::Overlap { w: sw, .. } if *sw == w))
        })
        .collect();
    let frame_len = init.len() / total;
    let dt = 1.0 / cfg.steps as f64;
    let mut x = reimpose_known(init, &noised_reference(reference, init, 1.0)?, mask)?;
    for k in 0..cfg.steps {
        let tau = step_timestep(k, cfg.steps);
        let passes = exec::try_map_range(starts.len(), |w| {
            let s = starts[w];
            let xw = x.slice_outer(s, cfg.window)?;
            let rw = reference.slice_outer(s, cfg.window)?;
            let mw = mask.slice_frames(s, cfg.window)?;
            let p = window_passes(
                den,
                &xw,
                &rw,
                &mw,
                &windows[w],
                tau,
                k,
                cfg,
                needs_uncond[w],
            )?;
            let g = guided(&p, cfg)?;
            Ok::<_, Error>((p, g))
        })?;
        let mut v = Vec::with_capacity(init.len());
        for (j, src) in sources.iter().enumerate() {
            let local = |w: usize, t: &Tensor| -> Tensor {
                let o = (j - starts[w]) * frame_len;
                Tensor::new(&[frame_len], t.data()[o..o + frame_len].to_vec()).unwrap()
            };
            let vf = match *src {
                FrameSource::Single { w } => local(w, &passes[w].1),
                FrameSource::Overlap { w, f, n } => {
                    let (pw, pw1) = (&passes[w].0, &passes[w + 1].0);
                    let uncond = pw.uncond.as_ref().expect("unconditional pass for overlap");
                    long_video_cfg(
                        &local(w, &pw.cond),
                        &local(w + 1, &pw1.cond),
                        &local(w, uncond),
                        f,
                        n,
                        cfg.lv_scale,
                    )?
                }
            };
            v.extend_from_slice(vf.data());
        }
        let v = Tensor::new(init.shape(), v)?;
        x.axpy(-dt, &v)?;
        let t_next = 1.0 - (k + 1) as f64 / cfg.steps as f64;
        x = reimpose_known(&x, &noised_reference(reference, init, t_next)?, mask)?;
        check_finite(&x, "sampler state")?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal_features::AudioSegments;
    use crate::task_masking::{build_task_mask, TaskKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Const(f64);

    impl Denoiser for Const {
        fn velocity(&self, input: &Tensor, _: &ModalBundle, _: f64) -> Result<Tensor> {
            let s = input.shape();
            Ok(Tensor::full(&[s[0], (s[1] - 1) / 2, s[2], s[3]], self.0))
        }
    }

    /// Velocity depends on the text condition and on the frame's position in
    /// its window, so windows disagree.
    struct Positional;

    impl Denoiser for Positional {
        fn velocity(&self, input: &Tensor, b: &ModalBundle, _: f64) -> Result<Tensor> {
            let s = input.shape();
            let c = (s[1] - 1) / 2;
            let t = b.text.tokens.data()[0];
            let a = b.audio.segments.data()[0];
            Ok(Tensor::from_fn(&[s[0], c, s[2], s[3]], |i| {
                let f = i / (c * s[2] * s[3]);
                f as f64 * 0.3 + t + a
            }))
        }
    }

    fn guide(frames: usize, text: f64) -> Guidance {
        ModalBundle {
            text: TextFeatures {
                tokens: Tensor::full(&[1, 2], text),
            },
            audio: AudioSegments {
                segments: Tensor::full(&[frames, 1, 2], 0.5),
                r: 1,
                e: 0,
            },
            image: ImageFeatures {
                tokens: Tensor::zeros(&[1, 2]),
            },
            face: FaceMask::ones(frames, 2, 2),
        }
        .into_guidance()
    }

    trait IntoGuidance {
        fn into_guidance(self) -> Guidance;
    }

    impl IntoGuidance for ModalBundle {
        fn into_guidance(self) -> Guidance {
            Guidance {
                bundle: self,
                null_text: TextFeatures {
                    tokens: Tensor::zeros(&[1, 2]),
                },
                negatives: None,
            }
        }
    }

    fn cfg(steps: usize, window: usize, overlap: usize) -> SamplerConfig {
        SamplerConfig {
            steps,
            window,
            overlap,
            ..Default::default()
        }
    }

    #[test]
    fn compose_examples() {
        let t = |x: f64| Tensor::full(&[2], x);
        assert_eq!(
            compose_cfg(&t(0.0), &t(1.0), &t(2.0), 3.0, 9.0).unwrap(),
            t(12.0)
        );
        assert_eq!(
            compose_cfg(&t(0.4), &t(1.0), &t(2.0), 0.0, 0.0).unwrap(),
            t(0.4)
        );
        let r = compose_cfg(&t(0.4), &t(1.3), &t(2.1), 1.0, 1.0).unwrap();
        assert!(r.max_abs_diff(&t(2.1)) < 1e-15);
        assert!(compose_cfg(&t(0.0), &Tensor::zeros(&[3]), &t(0.0), 1.0, 1.0).is_err());
    }

    #[test]
    fn png_examples() {
        let m = TextFeatures {
            tokens: Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(),
        };
        let d = TextFeatures {
            tokens: Tensor::new(&[1, 2], vec![-3.0, 5.0]).unwrap(),
        };
        let png = PngConfig::default();
        assert_eq!(png_negative(600.0, &png, &m, &d).unwrap(), m);
        assert_eq!(png_negative(599.0, &png, &m, &d).unwrap(), d);
        let half = PngConfig {
            w_early: 0.5,
            ..Default::default()
        };
        assert_eq!(
            png_negative(900.0, &half, &m, &d).unwrap().tokens.data(),
            &[-1.0, 3.5]
        );
        // piecewise constant in tau on each side of the split
        assert_eq!(
            png_negative(999.0, &half, &m, &d).unwrap(),
            png_negative(601.0, &half, &m, &d).unwrap()
        );
    }

    #[test]
    fn uncond_text_schedule() {
        let mut g = guide(2, 1.0);
        let mk = |x: f64| TextFeatures {
            tokens: Tensor::full(&[1, 2], x),
        };
        g.negatives = Some(NegativePrompts {
            motion: mk(5.0),
            detail: mk(7.0),
        });
        let png = PngConfig::default();
        assert_eq!(g.uncond_text(1000.0, 0, &png).unwrap(), mk(5.0));
        assert_eq!(g.uncond_text(700.0, 3, &png).unwrap(), g.null_text);
        assert_eq!(g.uncond_text(500.0, 8, &png).unwrap(), mk(7.0));
        let off = PngConfig {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(g.uncond_text(500.0, 8, &off).unwrap(), g.null_text);
    }

    #[test]
    fn blend_and_lv_examples() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![5.0, -2.0]).unwrap();
        let u = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        assert_eq!(overlap_blend(&a, &b, 0.0, 8.0).unwrap(), a);
        assert_eq!(overlap_blend(&a, &b, 8.0, 8.0).unwrap(), b);
        let q = overlap_blend(&a, &b, 2.0, 8.0).unwrap();
        assert_eq!(
            q.data(),
            &[0.75 * 1.0 + 0.25 * 5.0, 0.75 * 2.0 + 0.25 * -2.0]
        );
        assert!(overlap_blend(&a, &b, 1.0, 0.0).is_err());
        assert_eq!(overlap_blend(&a, &b, 0.0, 0.0).unwrap(), a);

        let f0 = long_video_cfg(&a, &b, &u, 0.0, 4.0, 1.0).unwrap();
        assert_eq!(f0.data(), &[1.0 + (1.0 - 0.5), 2.0 + (2.0 - 0.5)]);
        for f in [0.0, 1.5, 4.0] {
            assert_eq!(long_video_cfg(&a, &b, &u, f, 4.0, 0.0).unwrap(), a);
            assert_eq!(long_video_cfg(&a, &a, &a, f, 4.0, 3.7).unwrap(), a);
        }
    }

    #[test]
    fn blend_weights_sum_to_one_exactly() {
        for n in 1..=64 {
            for f in 0..=n {
                let (a, b) = blend_weights(f as f64, n as f64).unwrap();
                assert_eq!(a + b, 1.0, "f={f} n={n}");
            }
            for i in 0..n {
                let f = (i + 1) as f64 * n as f64 / (n + 1) as f64;
                let (a, b) = blend_weights(f, n as f64).unwrap();
                assert_eq!(a + b, 1.0, "f={f} n={n}");
            }
        }
    }

    #[test]
    fn window_start_arithmetic() {
        assert_eq!(window_starts(13, 8, 3).unwrap(), vec![0, 5]);
        assert_eq!(window_starts(8, 8, 3).unwrap(), vec![0]);
        assert_eq!(window_starts(8, 4, 0).unwrap(), vec![0, 4]);
        assert_eq!(window_starts(11, 4, 2).unwrap(), vec![0, 2, 4, 6, 7]);
        assert!(window_starts(8, 4, 4).is_err());
        assert!(window_starts(3, 4, 1).is_err());
    }

    #[test]
    fn single_step_zero_velocity_keeps_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = Tensor::randn(&[2, 1, 2, 2], 1.0, &mut rng);
        let reference = Tensor::randn(&[2, 1, 2, 2], 1.0, &mut rng);
        let mask = build_task_mask(TaskKind::I2V, (2, 2, 2), None).unwrap();
        let c = SamplerConfig {
            s_text: 1.0,
            s_audio: 1.0,
            ..cfg(1, 2, 0)
        };
        let out = euler_sample(&Const(0.0), &init, &guide(2, 1.0), &mask, &reference, &c).unwrap();
        assert_eq!(&out.data()[..4], &reference.data()[..4]);
        assert_eq!(&out.data()[4..], &init.data()[4..]);

        let none = TaskMask::from_values(Tensor::zeros(&[2, 1, 2, 2]), TaskKind::T2V).unwrap();
        let out = euler_sample(
            &Positional,
            &init,
            &guide(2, 1.0),
            &none,
            &reference,
            &cfg(7, 2, 0),
        )
        .unwrap();
        assert_eq!(out, reference);
    }

    #[test]
    fn constant_velocity_integrates_exactly() {
        let init = Tensor::full(&[2, 1, 2, 2], 0.25);
        let reference = Tensor::zeros(&[2, 1, 2, 2]);
        let mask = build_task_mask(TaskKind::T2V, (2, 2, 2), None).unwrap();
        let out = euler_sample(
            &Const(2.0),
            &init,
            &guide(2, 1.0),
            &mask,
            &reference,
            &cfg(8, 2, 0),
        )
        .unwrap();
        // guided velocity of a constant field is that constant for any scales
        assert!(out.max_abs_diff(&Tensor::full(&[2, 1, 2, 2], 0.25 - 2.0)) < 1e-12);
    }

    #[test]
    fn single_window_matches_euler() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Tensor::randn(&[3, 1, 2, 2], 1.0, &mut rng);
        let reference = Tensor::randn(&[3, 1, 2, 2], 1.0, &mut rng);
        let mask = build_task_mask(TaskKind::Flf2V, (3, 2, 2), None).unwrap();
        let c = cfg(5, 3, 1);
        let g = guide(3, 0.7);
        let a = euler_sample(&Positional, &init, &g, &mask, &reference, &c).unwrap();
        let b = sliding_window_generate(&Positional, &init, &[g], &mask, &reference, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_denoiser_has_no_seam() {
        let init = Tensor::full(&[7, 1, 2, 2], 0.5);
        let mask = build_task_mask(TaskKind::T2V, (7, 2, 2), None).unwrap();
        let c = cfg(6, 3, 1);
        let windows: Vec<Guidance> = (0..3).map(|_| guide(3, 1.0)).collect();
        let out = sliding_window_generate(
            &Const(-0.3),
            &init,
            &windows,
            &mask,
            &Tensor::zeros(&[7, 1, 2, 2]),
            &c,
        )
        .unwrap();
        // the overlap term is c + s (c - c) = c, so every frame is identical
        let f0 = out.slice_outer(0, 1).unwrap();
        for j in 1..7 {
            assert_eq!(out.slice_outer(j, 1).unwrap(), f0);
        }
    }

    #[test]
    fn zero_overlap_concatenates_independent_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = Tensor::randn(&[4, 1, 2, 2], 1.0, &mut rng);
        let zero = Tensor::zeros(&[4, 1, 2, 2]);
        let mask = build_task_mask(TaskKind::T2V, (4, 2, 2), None).unwrap();
        let c = cfg(4, 2, 0);
        let windows = vec![guide(2, 0.1), guide(2, 0.9)];
        let out = sliding_window_generate(&Positional, &init, &windows, &mask, &zero, &c).unwrap();
        for (w, g) in windows.iter().enumerate() {
            let m = build_task_mask(TaskKind::T2V, (2, 2, 2), None).unwrap();
            let part = euler_sample(
                &Positional,
                &init.slice_outer(2 * w, 2).unwrap(),
                g,
                &m,
                &zero.slice_outer(0, 2).unwrap(),
                &c,
            )
            .unwrap();
            assert_eq!(out.slice_outer(2 * w, 2).unwrap(), part);
        }
    }

    #[test]
    fn overlap_sources() {
        let s = frame_sources(&[0, 5], 8, 13, true);
        assert_eq!(s[4], FrameSource::Single { w: 0 });
        assert_eq!(
            s[5],
            FrameSource::Overlap {
                w: 0,
                f: 0.75,
                n: 3.0
            }
        );
        assert_eq!(
            s[7],
            FrameSource::Overlap {
                w: 0,
                f: 2.25,
                n: 3.0
            }
        );
        assert_eq!(s[8], FrameSource::Single { w: 1 });
        let s = frame_sources(&[0, 5], 8, 13, false);
        assert_eq!(s[5], FrameSource::Single { w: 1 });
    }

    #[test]
    fn window_bundles_slice_audio() {
        let audio = AudioEmbeddings {
            features: Tensor::from_fn(&[26, 1], |i| i as f64),
            alpha: 2,
        };
        let text = TextFeatures {
            tokens: Tensor::zeros(&[1, 1]),
        };
        let image = ImageFeatures {
            tokens: Tensor::zeros(&[1, 1]),
        };
        let face = FaceMask::ones(13, 2, 2);
        let b = window_bundles(&text, &image, &audio, &face, &[0, 5], 8, 1, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].audio.segments.shape(), &[8, 3, 1]);
        // window 1 frame 0 is global frame 5: features 10 and 11, edge-replicated
        assert_eq!(b[1].audio.segments.data()[..3], [10.0, 10.0, 11.0]);
        let short = AudioEmbeddings {
            features: Tensor::zeros(&[20, 1]),
            alpha: 2,
        };
        assert!(window_bundles(&text, &image, &short, &face, &[0, 5], 8, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn euler_preserves_given_regions(seed in 0u64..200, steps in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = Tensor::randn(&[3, 1, 2, 2], 1.0, &mut rng);
            let reference = Tensor::randn(&[3, 1, 2, 2], 1.0, &mut rng);
            let mask = build_task_mask(TaskKind::Flf2V, (3, 2, 2), None).unwrap();
            let out = euler_sample(&Positional, &init, &guide(3, 0.2), &mask, &reference, &cfg(steps, 3, 1)).unwrap();
            let m = mask.values().data();
            for (i, (&o, &r)) in out.data().iter().zip(reference.data()).enumerate() {
                if m[i] == 0.0 {
                    prop_assert!((o - r).abs() <= 1e-6);
                }
            }
        }
    }
}
