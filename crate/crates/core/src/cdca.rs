//! Coupled-decoupled multi-modal cross attention.
//!
//! One query projection is shared by the text, image and audio experts
//! (coupled); each expert owns its key, value and output projections
//! (decoupled). Expert outputs are mixed with the phase-aware weights:
//!
//! ```text
//! z_o = sum_c W(c, t) * CA_c(Q_shared, K(c), V(c))
//! ```
//!
//! The audio expert attends frame-locally (tokens of latent frame `j` only see
//! audio segment `j`) and its output is gated by the facial mask.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::modal_features::FaceMask;
use crate::nn::{Bound, Init, Linear, LinearInit, ParamStore};
use crate::phda::{weights_all, Modal, PhdaConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdcaDims {
    pub d_model: usize,
    pub d_attn: usize,
    pub d_cond: usize,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
struct Expert {
    key: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Cdca {
    dims: CdcaDims,
    query: Linear,
    experts: [Expert; 3],
}

/// Condition tensors for one forward pass, already on the graph.
#[derive(Clone, Copy, Debug)]
pub struct CdcaConditions {
    /// `(L_t, d_cond)`
    pub text: Var,
    /// `(L_i, d_cond)`
    pub image: Var,
    /// `(frames * segment_len, d_cond)`
    pub audio: Var,
    pub audio_frames: usize,
}

/// Tensor-level conditions, for use outside a training graph.
#[derive(Clone, Debug)]
pub struct CdcaInputs {
    pub text: Tensor,
    pub image: Tensor,
    /// `(frames, segment_len, d_cond)`
    pub audio: Tensor,
    /// Token-grid facial mask.
    pub face: FaceMask,
}

impl CdcaInputs {
    pub fn on_graph(&self, g: &mut Graph) -> CdcaConditions {
        let s = self.audio.shape();
        CdcaConditions {
            text: g.constant(self.text.clone()),
            image: g.constant(self.image.clone()),
            audio: g.constant(self.audio.clone().reshape(&[s[0] * s[1], s[2]]).unwrap()),
            audio_frames: s[0],
        }
    }
}

/// Multi-head scaled dot-product attention; `mask` is added to the scores.
pub(crate) fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Var {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let s = g.matmul_t(qh, false, kh, true);
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let p = g.softmax(s);
            g.matmul(p, vh)
        })
        .collect();
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Additive score mask restricting query frame `j` to key block `j`.
pub(crate) fn frame_local_mask(n_queries: usize, frames: usize, keys_per_frame: usize) -> Tensor {
    let per_frame = n_queries / frames;
    let cols = frames * keys_per_frame;
    Tensor::from_fn(&[n_queries, cols], |i| {
        let (qi, kj) = (i / cols, i % cols);
        if qi / per_frame == kj / keys_per_frame {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Row gate of shape `(N, d)` from a token-grid mask with `N` positions.
pub(crate) fn row_gate(face: &FaceMask, d: usize) -> Tensor {
    let m = face.values.data();
    Tensor::from_fn(&[m.len(), d], |i| m[i / d])
}

impl Cdca {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dims: CdcaDims,
    ) -> Result<Self> {
        if dims.heads == 0 || !dims.d_attn.is_multiple_of(dims.heads) {
            return Err(Error::Config(format!(
                "d_attn {} must be divisible by head count {}",
                dims.d_attn, dims.heads
            )));
        }
        let query = Linear::new(
            store,
            init,
            &format!("{name}.q_shared"),
            dims.d_model,
            dims.d_attn,
            true,
            LinearInit::FanIn,
        );
        let experts = Modal::ALL.map(|c| Expert {
            key: Linear::new(
                store,
                init,
                &format!("{name}.{c}.k"),
                dims.d_cond,
                dims.d_attn,
                true,
                LinearInit::FanIn,
            ),
            value: Linear::new(
                store,
                init,
                &format!("{name}.{c}.v"),
                dims.d_cond,
                dims.d_attn,
                true,
                LinearInit::FanIn,
            ),
            out: Linear::new(
                store,
                init,
                &format!("{name}.{c}.o"),
                dims.d_attn,
                dims.d_model,
                true,
                LinearInit::FanIn,
            ),
        });
        Ok(Cdca {
            dims,
            query,
            experts,
        })
    }

    pub fn dims(&self) -> CdcaDims {
        self.dims
    }

    pub fn query_layer(&self) -> Linear {
        self.query
    }

    pub fn shared_query(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        self.query.forward(g, p, z)
    }

    /// One expert's cross attention, `(N, d_model)`.
    pub fn modal_attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        q: Var,
        features: Var,
        c: Modal,
        audio_frames: usize,
    ) -> Result<Var> {
        let e = &self.experts[c.index()];
        let n = g.shape(q)[0];
        let mask = if c == Modal::Audio {
            let rows = g.shape(features)[0];
            if audio_frames == 0
                || !n.is_multiple_of(audio_frames)
                || !rows.is_multiple_of(audio_frames)
            {
                return Err(Error::shape(format!(
                    "{n} query tokens / {rows} audio rows not divisible into {audio_frames} frames"
                )));
            }
            Some(g.constant(frame_local_mask(n, audio_frames, rows / audio_frames)))
        } else {
            None
        };
        let k = e.key.forward(g, p, features);
        let v = e.value.forward(g, p, features);
        let a = attention(g, q, k, v, self.dims.heads, mask);
        Ok(e.out.forward(g, p, a))
    }

    /// Expert outputs before weighting, with the audio expert already gated.
    /// Experts whose weight is exactly zero are skipped (`None`).
    pub fn branches(
        &self,
        g: &mut Graph,
        p: &Bound,
        z: Var,
        cond: &CdcaConditions,
        face_tokens: &FaceMask,
        weights: [f64; 3],
    ) -> Result<[Option<Var>; 3]> {
        let n = g.shape(z)[0];
        if face_tokens.values.len() != n {
            return Err(Error::shape(format!(
                "face mask covers {} tokens, input has {n}",
                face_tokens.values.len()
            )));
        }
        let q = self.shared_query(g, p, z);
        let mut out = [None; 3];
        for c in Modal::ALL {
            if weights[c.index()] == 0.0 {
                continue;
            }
            let feats = match c {
                Modal::Text => cond.text,
                Modal::Image => cond.image,
                Modal::Audio => cond.audio,
            };
            let mut b = self.modal_attention(g, p, q, feats, c, cond.audio_frames)?;
            if c == Modal::Audio {
                let gate = g.constant(row_gate(face_tokens, self.dims.d_model));
                b = g.mul(b, gate);
            }
            out[c.index()] = Some(b);
        }
        Ok(out)
    }

    /// Weighted expert sum with explicit weights (text, image, audio).
    pub fn forward_weighted(
        &self,
        g: &mut Graph,
        p: &Bound,
        z: Var,
        cond: &CdcaConditions,
        face_tokens: &FaceMask,
        weights: [f64; 3],
    ) -> Result<Var> {
        let branches = self.branches(g, p, z, cond, face_tokens, weights)?;
        let mut acc: Option<Var> = None;
        for (b, w) in branches.iter().zip(weights) {
            if let Some(b) = *b {
                let s = g.scale(b, w);
                acc = Some(match acc {
                    Some(a) => g.add(a, s),
                    None => s,
                });
            }
        }
        Ok(acc.unwrap_or_else(|| {
            let n = g.shape(z)[0];
            g.constant(Tensor::zeros(&[n, self.dims.d_model]))
        }))
    }

    /// Mixture weighted by the phase-aware law at timestep `tau`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        z: Var,
        cond: &CdcaConditions,
        face_tokens: &FaceMask,
        tau: f64,
        phda: &PhdaConfig,
    ) -> Result<Var> {
        let w = weights_all(tau, phda)?;
        self.forward_weighted(g, p, z, cond, face_tokens, w)
    }

    // Tensor-level conveniences.

    pub fn shared_query_tensor(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.shape()[1] != self.dims.d_model {
            return Err(Error::shape(format!(
                "query input {:?}, d_model {}",
                z.shape(),
                self.dims.d_model
            )));
        }
        crate::nn::eval_with(store, |g, p| {
            let zv = g.constant(z.clone());
            Ok(self.shared_query(g, p, zv))
        })
    }

    pub fn modal_attention_tensor(
        &self,
        store: &ParamStore,
        q: &Tensor,
        features: &Tensor,
        c: Modal,
        audio_frames: usize,
    ) -> Result<Tensor> {
        if features.rank() != 2 || features.shape()[1] != self.dims.d_cond {
            return Err(Error::shape(format!(
                "features {:?}, d_cond {}",
                features.shape(),
                self.dims.d_cond
            )));
        }
        crate::nn::eval_with(store, |g, p| {
            let qv = g.constant(q.clone());
            let fv = g.constant(features.clone());
            self.modal_attention(g, p, qv, fv, c, audio_frames)
        })
    }

    pub fn forward_tensor(
        &self,
        store: &ParamStore,
        z: &Tensor,
        inputs: &CdcaInputs,
        tau: f64,
        phda: &PhdaConfig,
    ) -> Result<Tensor> {
        let w = weights_all(tau, phda)?;
        self.forward_weighted_tensor(store, z, inputs, w)
    }

    pub fn forward_weighted_tensor(
        &self,
        store: &ParamStore,
        z: &Tensor,
        inputs: &CdcaInputs,
        weights: [f64; 3],
    ) -> Result<Tensor> {
        crate::nn::eval_with(store, |g, p| {
            let zv = g.constant(z.clone());
            let cond = inputs.on_graph(g);
            self.forward_weighted(g, p, zv, &cond, &inputs.face, weights)
        })
    }

    pub fn branch_tensors(
        &self,
        store: &ParamStore,
        z: &Tensor,
        inputs: &CdcaInputs,
    ) -> Result<[Tensor; 3]> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let cond = inputs.on_graph(&mut g);
        let b = self.branches(&mut g, &p, zv, &cond, &inputs.face, [1.0; 3])?;
        Ok(b.map(|v| g.value(v.unwrap()).clone()))
    }
}
