//! Toy diffusion transformer with a velocity-prediction head.
//!
//! Input is the assembled `(frames, 2C + 1, H, W)` tensor from task masking.
//! Each `p x p` patch of each frame becomes one token. Every block applies
//! self-attention, multi-modal cross attention and an MLP, each residual and
//! each modulated (shift, scale, gate) by the timestep embedding. Tokens carry
//! an additive sinusoidal position code; self-attention can also rotate its
//! queries and keys by position. The head is zero-initialised so an
//! untrained model predicts zero velocity.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cdca::{attention, Cdca, CdcaConditions, CdcaDims};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::modal_features::{FaceMask, ModalBundle};
use crate::nn::{Bound, Init, Linear, LinearInit, ParamStore};
use crate::phda::{weights_all, PhdaConfig, MAX_TIMESTEP};
use crate::task_masking::TaskMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub depth: usize,
    pub d_model: usize,
    pub patch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    /// Width of the condition features fed to the cross-attention experts.
    pub d_cond: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Rotary position code on self-attention queries and keys.
    #[serde(default = "yes")]
    pub rotary: bool,
}

fn yes() -> bool {
    true
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 2,
            d_model: 96,
            patch: 4,
            frames: 4,
            channels: 3,
            height: 16,
            width: 16,
            heads: 4,
            d_cond: 32,
            mlp_ratio: default_mlp_ratio(),
            rotary: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return bad(format!(
                "{}x{} not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.frames == 0 || self.channels == 0 || self.d_cond == 0 || self.mlp_ratio == 0 {
            return bad("frames, channels, d_cond and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn num_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn input_channels(&self) -> usize {
        2 * self.channels + 1
    }
}

/// Noise level `t = tau / 1000` and the interpolated latent.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub tau: f64,
    pub x_t: Tensor,
}

impl DiffusionState {
    /// `x_t = (1 - t) x0 + t eps`.
    pub fn interpolate(x0: &Tensor, eps: &Tensor, tau: f64) -> Result<Self> {
        if !(0.0..=MAX_TIMESTEP).contains(&tau) {
            return Err(Error::invalid(format!("timestep {tau} outside [0, 1000]")));
        }
        let t = tau / MAX_TIMESTEP;
        let x_t = x0.zip_map(eps, |a, b| (1.0 - t) * a + t * b)?;
        Ok(DiffusionState { tau, x_t })
    }

    pub fn t(&self) -> f64 {
        self.tau / MAX_TIMESTEP
    }
}

/// Flow-matching regression target `eps - x0`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(x0)
}

/// Index map taking a `(frames, ch, H, W)` tensor to `(tokens, ch * p * p)`
/// raw patches. Token order is frame, grid row, grid column; within a patch
/// the order is channel, row, column.
fn patch_index(frames: usize, ch: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(frames * ch * h * w);
    for f in 0..frames {
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..ch {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(((f * ch + c) * h + gy * p + py) * w + gx * p + px);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`patch_index`].
fn unpatch_index(frames: usize, ch: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let fwd = patch_index(frames, ch, h, w, p);
    let mut inv = vec![0; fwd.len()];
    for (i, &j) in fwd.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

fn check_patchable(x: &Tensor, p: usize) -> Result<[usize; 4]> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "expected (frames, ch, H, W), got {s:?}"
        )));
    }
    if p == 0 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
        return Err(Error::shape(format!(
            "{}x{} not divisible by patch size {p}",
            s[2], s[3]
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Raw patches `(frames * H/p * W/p, ch * p * p)` without any embedding.
pub fn patchify_raw(x: &Tensor, p: usize) -> Result<Tensor> {
    let [f, c, h, w] = check_patchable(x, p)?;
    let idx = patch_index(f, c, h, w, p);
    let d = x.data();
    Tensor::new(
        &[f * (h / p) * (w / p), c * p * p],
        idx.iter().map(|&j| d[j]).collect(),
    )
}

/// Exact inverse of [`patchify_raw`].
pub fn unpatchify_raw(tokens: &Tensor, shape: [usize; 4], p: usize) -> Result<Tensor> {
    let [f, c, h, w] = shape;
    check_patchable(&Tensor::zeros(&[1, 1, h, w]), p)?;
    if tokens.shape() != [f * (h / p) * (w / p), c * p * p] {
        return Err(Error::shape(format!(
            "tokens {:?} do not match {shape:?}",
            tokens.shape()
        )));
    }
    let idx = unpatch_index(f, c, h, w, p);
    let d = tokens.data();
    Tensor::new(&shape, idx.iter().map(|&j| d[j]).collect())
}

fn sinusoid(pos: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
}

/// Fixed position code: the feature axis is split in three even-sized parts
/// encoding frame, grid row and grid column; leftover columns are zero.
pub fn position_encoding(frames: usize, gh: usize, gw: usize, d: usize) -> Tensor {
    let part = (d / 3) & !1;
    let n = frames * gh * gw;
    let mut data = vec![0.0; n * d];
    for t in 0..n {
        let (f, gy, gx) = (t / (gh * gw), (t / gw) % gh, t % gw);
        let row = &mut data[t * d..(t + 1) * d];
        for (k, pos) in [f, gy, gx].into_iter().enumerate() {
            sinusoid(pos as f64, part, &mut row[k * part..(k + 1) * part]);
        }
    }
    Tensor::new(&[n, d], data).unwrap()
}

/// Fixed code of each slot within an audio segment, tiled over `frames`
/// segments of `len` slots: shape `(frames * len, d)`.
pub fn segment_slot_encoding(frames: usize, len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; frames * len * d];
    for (k, row) in data.chunks_mut(d).enumerate() {
        sinusoid((k % len) as f64, d - d % 2, row);
    }
    Tensor::new(&[frames * len, d], data).unwrap()
}

const ROTARY_BASE: f64 = 100.0;

/// Rotary position tables for `(tokens, d)` queries and keys split in
/// `heads` column blocks. Within a head, rotation pairs are shared evenly by
/// frame, grid row and grid column; leftover pairs stay unrotated.
#[derive(Clone, Debug)]
struct Rotary {
    cos: Tensor,
    /// `-sin` on the first element of each pair, `+sin` on the second.
    sin: Tensor,
    /// Flat index swapping the two elements of every pair.
    swap: Arc<Vec<usize>>,
}

impl Rotary {
    fn new(frames: usize, gh: usize, gw: usize, d: usize, heads: usize) -> Self {
        let n = frames * gh * gw;
        let dh = d / heads;
        let per_axis = dh / 2 / 3;
        let mut cos = vec![1.0; n * d];
        let mut sin = vec![0.0; n * d];
        for t in 0..n {
            let pos = [t / (gh * gw), (t / gw) % gh, t % gw];
            for h in 0..heads {
                for i in 0..3 * per_axis {
                    let freq = ROTARY_BASE.powf(-((i % per_axis) as f64) / per_axis as f64);
                    let angle = pos[i / per_axis] as f64 * freq;
                    let c = t * d + h * dh + 2 * i;
                    cos[c] = angle.cos();
                    cos[c + 1] = angle.cos();
                    sin[c] = -angle.sin();
                    sin[c + 1] = angle.sin();
                }
            }
        }
        let swap = (0..n * d)
            .map(|k| {
                let c = (k % d) % dh;
                if c < 2 * (dh / 2) {
                    k - c + (c ^ 1)
                } else {
                    k
                }
            })
            .collect();
        Rotary {
            cos: Tensor::new(&[n, d], cos).unwrap(),
            sin: Tensor::new(&[n, d], sin).unwrap(),
            swap: Arc::new(swap),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let swapped = g.gather(x, self.swap.clone(), &shape);
        let cos = g.constant(self.cos.clone());
        let sin = g.constant(self.sin.clone());
        let a = g.mul(x, cos);
        let b = g.mul(swapped, sin);
        g.add(a, b)
    }
}

/// Sinusoidal code of a timestep in `[0, 1000]`, shape `(1, d)`.
pub fn timestep_encoding(tau: f64, d: usize) -> Tensor {
    let mut data = vec![0.0; d];
    sinusoid(tau, d - d % 2, &mut data);
    Tensor::new(&[1, d], data).unwrap()
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Linear,
    qkv: Linear,
    attn_out: Linear,
    cdca: Cdca,
    mlp_in: Linear,
    mlp_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    patch_in: Linear,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    head: Linear,
    pos: Tensor,
    rotary: Option<Rotary>,
    patch_idx: Arc<Vec<usize>>,
    unpatch_idx: Arc<Vec<usize>>,
}

/// Everything the model sees besides the noisy input and the timestep.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub bundle: &'a ModalBundle,
    pub phda: &'a PhdaConfig,
}

impl Backbone {
    /// Builds the layout and a freshly initialised parameter store.
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = cfg.d_model;
        let (gh, gw) = cfg.grid();
        let p = cfg.patch;
        let patch_dim = cfg.input_channels() * p * p;
        let lin = |s: &mut ParamStore, i: &mut Init, n: &str, a, b, how| {
            Linear::new(s, i, n, a, b, true, how)
        };
        let patch_in = lin(
            &mut store,
            &mut init,
            "patch_embed",
            patch_dim,
            d,
            LinearInit::FanIn,
        );
        let time_in = lin(&mut store, &mut init, "time.0", d, d, LinearInit::FanIn);
        let time_out = lin(&mut store, &mut init, "time.1", d, d, LinearInit::FanIn);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let n = format!("blocks.{b}");
            blocks.push(Block {
                modulation: lin(
                    &mut store,
                    &mut init,
                    &format!("{n}.modulation"),
                    d,
                    9 * d,
                    LinearInit::Zero,
                ),
                qkv: lin(
                    &mut store,
                    &mut init,
                    &format!("{n}.attn.qkv"),
                    d,
                    3 * d,
                    LinearInit::FanIn,
                ),
                attn_out: lin(
                    &mut store,
                    &mut init,
                    &format!("{n}.attn.out"),
                    d,
                    d,
                    LinearInit::FanIn,
                ),
                cdca: Cdca::new(
                    &mut store,
                    &mut init,
                    &format!("{n}.cdca"),
                    CdcaDims {
                        d_model: d,
                        d_attn: d,
                        d_cond: cfg.d_cond,
                        heads: cfg.heads,
                    },
                )?,
                mlp_in: lin(
                    &mut store,
                    &mut init,
                    &format!("{n}.mlp.0"),
                    d,
                    cfg.mlp_ratio * d,
                    LinearInit::FanIn,
                ),
                mlp_out: lin(
                    &mut store,
                    &mut init,
                    &format!("{n}.mlp.1"),
                    cfg.mlp_ratio * d,
                    d,
                    LinearInit::FanIn,
                ),
            });
        }
        let final_modulation = lin(
            &mut store,
            &mut init,
            "final.modulation",
            d,
            2 * d,
            LinearInit::Zero,
        );
        let head = lin(
            &mut store,
            &mut init,
            "final.head",
            d,
            cfg.channels * p * p,
            LinearInit::Zero,
        );
        let pos = position_encoding(cfg.frames, gh, gw, d);
        let rotary = (cfg.rotary && d / cfg.heads >= 6)
            .then(|| Rotary::new(cfg.frames, gh, gw, d, cfg.heads));
        let patch_idx = Arc::new(patch_index(
            cfg.frames,
            cfg.input_channels(),
            cfg.height,
            cfg.width,
            p,
        ));
        let unpatch_idx = Arc::new(unpatch_index(
            cfg.frames,
            cfg.channels,
            cfg.height,
            cfg.width,
            p,
        ));
        Ok((
            Backbone {
                cfg,
                patch_in,
                time_in,
                time_out,
                blocks,
                final_modulation,
                head,
                pos,
                rotary,
                patch_idx,
                unpatch_idx,
            },
            store,
        ))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Token embeddings `(tokens, d_model)`: linear patch embedding plus the
    /// fixed position code.
    pub fn patchify(&self, g: &mut Graph, p: &Bound, input: Var) -> Var {
        let c = &self.cfg;
        let raw = g.gather(
            input,
            self.patch_idx.clone(),
            &[c.num_tokens(), c.input_channels() * c.patch * c.patch],
        );
        let emb = self.patch_in.forward(g, p, raw);
        let pos = g.constant(self.pos.clone());
        g.add(emb, pos)
    }

    fn unpatchify(&self, g: &mut Graph, head_out: Var) -> Var {
        g.gather(head_out, self.unpatch_idx.clone(), &self.cfg.latent_shape())
    }

    fn time_embedding(&self, g: &mut Graph, p: &Bound, tau: f64) -> Var {
        let enc = g.constant(timestep_encoding(tau, self.cfg.d_model));
        let h = self.time_in.forward(g, p, enc);
        let h = g.silu(h);
        let h = self.time_out.forward(g, p, h);
        g.silu(h)
    }

    /// `LN(x) * (1 + scale) + shift`, with `shift` and `scale` as `(1, d)`.
    fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
        let h = g.layer_norm(x);
        let s1 = g.add_scalar(scale, 1.0);
        let h = g.mul_row(h, s1);
        g.add_row(h, shift)
    }

    /// Checks shapes and moves the conditions onto the graph.
    fn conditions(
        &self,
        g: &mut Graph,
        bundle: &ModalBundle,
    ) -> Result<(CdcaConditions, FaceMask)> {
        let c = &self.cfg;
        let check = |what: &str, t: &Tensor| {
            if t.rank() != 2 || t.shape()[1] != c.d_cond || t.shape()[0] == 0 {
                return Err(Error::shape(format!(
                    "{what} features {:?}, d_cond {}",
                    t.shape(),
                    c.d_cond
                )));
            }
            Ok(())
        };
        check("text", &bundle.text.tokens)?;
        check("image", &bundle.image.tokens)?;
        if bundle.audio.frames() != c.frames || bundle.audio.segments.shape()[2] != c.d_cond {
            return Err(Error::shape(format!(
                "audio segments {:?} for {} latent frames, d_cond {}",
                bundle.audio.segments.shape(),
                c.frames,
                c.d_cond
            )));
        }
        if bundle.face.values.shape() != [c.frames, c.height, c.width] {
            return Err(Error::shape(format!(
                "face mask {:?}, latent grid ({}, {}, {})",
                bundle.face.values.shape(),
                c.frames,
                c.height,
                c.width
            )));
        }
        let face = bundle.face.downsample_max(c.patch)?;
        let cond = CdcaConditions {
            text: g.constant(bundle.text.tokens.clone()),
            image: g.constant(bundle.image.tokens.clone()),
            audio: g.constant(bundle.audio.flattened().add(&segment_slot_encoding(
                c.frames,
                bundle.audio.segment_len(),
                c.d_cond,
            ))?),
            audio_frames: c.frames,
        };
        Ok((cond, face))
    }

    /// Velocity prediction `(frames, C, H, W)` on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: Var,
        cond: Conditioning<'_>,
        tau: f64,
    ) -> Result<Var> {
        let c = &self.cfg;
        let want = [c.frames, c.input_channels(), c.height, c.width];
        if g.shape(input) != want {
            return Err(Error::shape(format!(
                "model input {:?}, expected {want:?}",
                g.shape(input)
            )));
        }
        let weights = weights_all(tau, cond.phda)?;
        let (cv, face) = self.conditions(g, cond.bundle)?;
        let d = c.d_model;
        let temb = self.time_embedding(g, p, tau);
        let mut x = self.patchify(g, p, input);
        for b in &self.blocks {
            let m = b.modulation.forward(g, p, temb);
            let part = |g: &mut Graph, k: usize| g.slice_cols(m, k * d, d);
            let mods: Vec<Var> = (0..9).map(|k| part(g, k)).collect();

            let h = Self::modulate(g, x, mods[0], mods[1]);
            let qkv = b.qkv.forward(g, p, h);
            let (mut q, mut k, v) = (
                g.slice_cols(qkv, 0, d),
                g.slice_cols(qkv, d, d),
                g.slice_cols(qkv, 2 * d, d),
            );
            if let Some(r) = &self.rotary {
                q = r.apply(g, q);
                k = r.apply(g, k);
            }
            let a = attention(g, q, k, v, c.heads, None);
            let a = b.attn_out.forward(g, p, a);
            let a = g.mul_row(a, mods[2]);
            x = g.add(x, a);

            let h = Self::modulate(g, x, mods[3], mods[4]);
            let ca = b.cdca.forward_weighted(g, p, h, &cv, &face, weights)?;
            let ca = g.mul_row(ca, mods[5]);
            x = g.add(x, ca);

            let h = Self::modulate(g, x, mods[6], mods[7]);
            let h = b.mlp_in.forward(g, p, h);
            let h = g.gelu(h);
            let h = b.mlp_out.forward(g, p, h);
            let h = g.mul_row(h, mods[8]);
            x = g.add(x, h);
        }
        let m = self.final_modulation.forward(g, p, temb);
        let (shift, scale) = (g.slice_cols(m, 0, d), g.slice_cols(m, d, d));
        let h = Self::modulate(g, x, shift, scale);
        let out = self.head.forward(g, p, h);
        Ok(self.unpatchify(g, out))
    }

    /// Tensor-level forward with frozen parameters.
    pub fn predict(
        &self,
        store: &ParamStore,
        input: &Tensor,
        cond: Conditioning<'_>,
        tau: f64,
    ) -> Result<Tensor> {
        crate::nn::eval_with(store, |g, p| {
            let x = g.constant(input.clone());
            self.forward(g, p, x, cond, tau)
        })
    }
}

fn loss_weights(mask: &TaskMask, channels: usize) -> Result<(Tensor, f64)> {
    let count = mask.count_generated();
    if count == 0 {
        return Err(Error::invalid(
            "flow-matching loss over a mask with no generated positions",
        ));
    }
    let f = mask.frames();
    let (h, w) = mask.spatial();
    let plane = h * w;
    let md = mask.values().data();
    let wts = Tensor::from_fn(&[f, channels, h, w], |i| {
        md[(i / (channels * plane)) * plane + i % plane]
    });
    Ok((wts, (count * channels) as f64))
}

/// Mean of `(v_hat - (eps - x0))^2` over masked positions, every channel.
pub fn flow_matching_loss(
    v_hat: &Tensor,
    x0: &Tensor,
    eps: &Tensor,
    mask: &TaskMask,
) -> Result<f64> {
    v_hat.check_same_shape(x0, "velocity vs clean latent")?;
    x0.check_same_shape(eps, "clean latent vs noise")?;
    let (wts, n) = loss_weights(mask, x0.shape()[1])?;
    wts.check_same_shape(x0, "mask vs latent")?;
    let mut s = 0.0;
    for (((&v, &a), &e), &m) in v_hat
        .data()
        .iter()
        .zip(x0.data())
        .zip(eps.data())
        .zip(wts.data())
    {
        let r = v - (e - a);
        s += m * r * r;
    }
    Ok(s / n)
}

/// Graph form of [`flow_matching_loss`] against a precomputed target.
pub fn flow_matching_loss_var(
    g: &mut Graph,
    v_hat: Var,
    target: &Tensor,
    mask: &TaskMask,
) -> Result<Var> {
    let (wts, n) = loss_weights(mask, target.shape()[1])?;
    if g.shape(v_hat) != target.shape() || wts.shape() != target.shape() {
        return Err(Error::shape(format!(
            "velocity {:?}, target {:?}, mask {:?}",
            g.shape(v_hat),
            target.shape(),
            mask.values().shape()
        )));
    }
    let t = g.constant(target.clone());
    let r = g.sub(v_hat, t);
    let r2 = g.square(r);
    let w = g.constant(wts);
    let wr = g.mul(r2, w);
    let s = g.sum(wr);
    Ok(g.scale(s, 1.0 / n))
}

/// Uniform timestep in `[0, 1000]`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>() * MAX_TIMESTEP
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal_features::{AudioSegments, ImageFeatures, TextFeatures};
    use crate::task_masking::{assemble_model_input, build_task_mask, Region, TaskKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            depth: 1,
            d_model: 6,
            patch: 2,
            frames: 2,
            channels: 1,
            height: 4,
            width: 2,
            heads: 2,
            d_cond: 3,
            mlp_ratio: 2,
            rotary: true,
        }
    }

    fn bundle(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> ModalBundle {
        ModalBundle {
            text: TextFeatures {
                tokens: Tensor::randn(&[2, cfg.d_cond], 1.0, rng),
            },
            audio: AudioSegments {
                segments: Tensor::randn(&[cfg.frames, 3, cfg.d_cond], 1.0, rng),
                r: 1,
                e: 0,
            },
            image: ImageFeatures {
                tokens: Tensor::randn(&[2, cfg.d_cond], 1.0, rng),
            },
            face: FaceMask::from_region(cfg.frames, cfg.height, cfg.width, Region::new(2, 0, 2, 2))
                .unwrap(),
        }
    }

    fn input(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor, TaskMask) {
        let shape = cfg.latent_shape();
        let x0 = Tensor::randn(&shape, 1.0, rng);
        let eps = Tensor::randn(&shape, 1.0, rng);
        let mask =
            build_task_mask(TaskKind::I2V, (cfg.frames, cfg.height, cfg.width), None).unwrap();
        let st = DiffusionState::interpolate(&x0, &eps, 420.0).unwrap();
        let inp = assemble_model_input(&st.x_t, &x0, &mask).unwrap();
        (inp, x0, eps, mask)
    }

    #[test]
    fn raw_patch_round_trip_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[4, 7, 8, 8], 1.0, &mut rng);
        let t = patchify_raw(&x, 4).unwrap();
        assert_eq!(t.shape(), &[16, 7 * 16]);
        assert_eq!(unpatchify_raw(&t, [4, 7, 8, 8], 4).unwrap(), x);
        assert_eq!(patchify_raw(&x, 8).unwrap().shape()[0], 4);
        assert!(patchify_raw(&x, 3).is_err());
    }

    #[test]
    fn patch_layout_is_channel_then_row_then_column() {
        let x = Tensor::from_fn(&[1, 2, 2, 4], |i| i as f64);
        let t = patchify_raw(&x, 2).unwrap();
        // token 1 is grid column 1: pixels (0,2),(0,3),(1,2),(1,3) of each channel
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0, 10.0, 11.0, 14.0, 15.0]);
    }

    fn rotated(rot: &Rotary, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = rot.apply(&mut g, v);
        g.value(r).clone()
    }

    #[test]
    fn rotary_matches_pairwise_rotation() {
        // 2 frames of a 2x3 grid, two heads of width 6: one pair per axis
        let rot = Rotary::new(2, 2, 3, 12, 2);
        let x = Tensor::from_fn(&[12, 12], |i| (i as f64 * 0.37).sin());
        let y = rotated(&rot, &x);
        for t in 0..12 {
            let pos = [t / 6, (t / 3) % 2, t % 3];
            for h in 0..2 {
                for (axis, &p) in pos.iter().enumerate() {
                    let a = p as f64;
                    let c = h * 6 + 2 * axis;
                    let (x0, x1) = (x.row(t)[c], x.row(t)[c + 1]);
                    assert!((y.row(t)[c] - (x0 * a.cos() - x1 * a.sin())).abs() < 1e-12);
                    assert!((y.row(t)[c + 1] - (x1 * a.cos() + x0 * a.sin())).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotary_scores_depend_on_offset_only() {
        let rot = Rotary::new(3, 4, 4, 24, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn(&[1, 24], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 24], 1.0, &mut rng);
        let tile = |v: &Tensor| Tensor::from_fn(&[48, 24], |i| v.data()[i % 24]);
        let (rq, rk) = (rotated(&rot, &tile(&q)), rotated(&rot, &tile(&k)));
        let dot = |a: usize, b: usize| {
            rq.row(a)
                .iter()
                .zip(rk.row(b))
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let token = |f: usize, y: usize, x: usize| f * 16 + y * 4 + x;
        // same offset (+1 frame, +2 rows, -1 column) from two different origins
        let a = dot(token(0, 0, 3), token(1, 2, 2));
        let b = dot(token(1, 1, 2), token(2, 3, 1));
        assert!((a - b).abs() < 1e-12);
        for t in 0..48 {
            let n0: f64 = tile(&q).row(t).iter().map(|v| v * v).sum();
            let n1: f64 = rq.row(t).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let mut c = tiny();
        c.height = 5;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn state_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(&[2, 1, 2, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[2, 1, 2, 2], 1.0, &mut rng);
        assert_eq!(DiffusionState::interpolate(&x0, &eps, 0.0).unwrap().x_t, x0);
        assert_eq!(
            DiffusionState::interpolate(&x0, &eps, 1000.0).unwrap().x_t,
            eps
        );
        assert!(DiffusionState::interpolate(&x0, &eps, 1001.0).is_err());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let cfg = tiny();
        let (model, store) = Backbone::new(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = bundle(&cfg, &mut rng);
        let (inp, ..) = input(&cfg, &mut rng);
        let phda = PhdaConfig::default();
        let v = model
            .predict(
                &store,
                &inp,
                Conditioning {
                    bundle: &b,
                    phda: &phda,
                },
                500.0,
            )
            .unwrap();
        assert_eq!(v.shape(), &cfg.latent_shape());
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in store.values_mut() {
            *v = Tensor::randn(v.shape(), std, &mut rng);
        }
    }

    #[test]
    fn prompt_changes_prediction_and_runs_are_deterministic() {
        let cfg = tiny();
        let (model, mut store) = Backbone::new(cfg.clone(), 4).unwrap();
        randomize(&mut store, 5, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = bundle(&cfg, &mut rng);
        let (inp, ..) = input(&cfg, &mut rng);
        let phda = PhdaConfig::default();
        let cond = Conditioning {
            bundle: &b,
            phda: &phda,
        };
        let v1 = model.predict(&store, &inp, cond, 300.0).unwrap();
        let v2 = model.predict(&store, &inp, cond, 300.0).unwrap();
        assert_eq!(v1, v2);
        let mut b2 = b.clone();
        b2.text.tokens = b2.text.tokens.map(|x| -x);
        let v3 = model
            .predict(
                &store,
                &inp,
                Conditioning {
                    bundle: &b2,
                    phda: &phda,
                },
                300.0,
            )
            .unwrap();
        assert!(v3.max_abs_diff(&v1) > 1e-9);
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny();
        let (model, store) = Backbone::new(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = bundle(&cfg, &mut rng);
        let phda = PhdaConfig::default();
        let cond = Conditioning {
            bundle: &b,
            phda: &phda,
        };
        assert!(model
            .predict(&store, &Tensor::zeros(&[2, 2, 4, 2]), cond, 1.0)
            .is_err());
        let mut bad = b.clone();
        bad.text.tokens = Tensor::zeros(&[2, 5]);
        let (inp, ..) = input(&cfg, &mut rng);
        assert!(model
            .predict(
                &store,
                &inp,
                Conditioning {
                    bundle: &bad,
                    phda: &phda
                },
                1.0
            )
            .is_err());
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let full = build_task_mask(TaskKind::T2V, (2, 2, 2), None).unwrap();
        let target = velocity_target(&x0, &eps).unwrap();
        assert_eq!(flow_matching_loss(&target, &x0, &eps, &full).unwrap(), 0.0);

        let zeros = Tensor::zeros(&[2, 2, 2, 2]);
        let ones = Tensor::ones(&[2, 2, 2, 2]);
        assert_eq!(
            flow_matching_loss(&zeros, &zeros, &ones, &full).unwrap(),
            1.0
        );

        // half mask: frame 1 only, oracle over that frame's elements
        let half = build_task_mask(TaskKind::I2V, (2, 2, 2), None).unwrap();
        let v = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let oracle: f64 = (8..16)
            .map(|i| (v.data()[i] - (eps.data()[i] - x0.data()[i])).powi(2))
            .sum::<f64>()
            / 8.0;
        assert!((flow_matching_loss(&v, &x0, &eps, &half).unwrap() - oracle).abs() < 1e-12);

        let empty = TaskMask::from_values(Tensor::zeros(&[2, 1, 2, 2]), TaskKind::T2V).unwrap();
        assert!(flow_matching_loss(&v, &x0, &eps, &empty).is_err());
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = tiny();
        let (model, mut store) = Backbone::new(cfg.clone(), 8).unwrap();
        assert!(store.num_elements() <= 5000, "{}", store.num_elements());
        randomize(&mut store, 9, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = bundle(&cfg, &mut rng);
        let (inp, x0, eps, mask) = input(&cfg, &mut rng);
        let target = velocity_target(&x0, &eps).unwrap();
        let phda = PhdaConfig::default();
        let worst = crate::nn::gradient_check(&store, |g, p| {
            let x = g.constant(inp.clone());
            let v = model
                .forward(
                    g,
                    p,
                    x,
                    Conditioning {
                        bundle: &b,
                        phda: &phda,
                    },
                    550.0,
                )
                .unwrap();
            flow_matching_loss_var(g, v, &target, &mask).unwrap()
        });
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn graph_loss_matches_tensor_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let mask = build_task_mask(TaskKind::Flf2V, (3, 2, 2), None).unwrap();
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let l = flow_matching_loss_var(&mut g, vv, &velocity_target(&x0, &eps).unwrap(), &mask)
            .unwrap();
        let want = flow_matching_loss(&v, &x0, &eps, &mask).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn raw_patches_invert(f in 1usize..3, c in 1usize..4, gh in 1usize..3, gw in 1usize..3, p in 1usize..4, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [f, c, gh * p, gw * p];
            let x = Tensor::randn(&shape, 1.0, &mut rng);
            let t = patchify_raw(&x, p).unwrap();
            prop_assert_eq!(t.shape(), &[f * gh * gw, c * p * p][..]);
            prop_assert_eq!(unpatchify_raw(&t, shape, p).unwrap(), x);
        }
    }
}
