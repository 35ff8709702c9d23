//! Condition features for the three modal experts: text tokens, audio
//! segments aligned to latent frames, and reference-image tokens, plus the
//! binary facial mask that gates the audio expert.
//!
//! The encoders are fixed, seeded linear maps. They carry no trainable
//! state; all learnable capacity lives in the backbone.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_masking::Region;
use crate::tensor::Tensor;

pub const DEFAULT_D_COND: usize = 64;

pub const BOS: &str = "<bos>";
pub const PAD: &str = "<pad>";

const DEFAULT_TOKENS: &[&str] = &[
    BOS,
    PAD,
    "red",
    "green",
    "blue",
    "yellow",
    "left",
    "right",
    "up",
    "down",
    "still",
    "square",
    "moving",
    "person",
    "talking",
    "static",
    "frozen",
    "stiff",
    "jitter",
    "blurry",
    "distorted",
    "color-shift",
    "overexposed",
    "identity-drift",
    "smooth",
    "natural",
];

// Stream ids keep the three encoders' tables independent under one seed.
const TEXT_STREAM: u64 = 11;
const AUDIO_STREAM: u64 = 12;
const IMAGE_STREAM: u64 = 13;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(DEFAULT_TOKENS.iter().map(|s| s.to_string()).collect()).unwrap()
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        if !index.contains_key(BOS) {
            return Err(Error::invalid(format!("vocabulary must contain {BOS}")));
        }
        Ok(Vocabulary { tokens, index })
    }

    /// One token per line; blank lines are ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken {
                token: token.to_string(),
            })
    }

    /// Whitespace-separated prompt to token ids.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        prompt.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextFeatures {
    /// `(L_t, d_cond)`
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    vocab: Vocabulary,
    table: Tensor,
}

impl TextEncoder {
    pub fn new(vocab: Vocabulary, d_cond: usize, seed: u64) -> Self {
        let table = Tensor::randn(&[vocab.len(), d_cond], 1.0, &mut seeded(seed, TEXT_STREAM));
        TextEncoder { vocab, table }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn d_cond(&self) -> usize {
        self.table.shape()[1]
    }

    /// Row `i` is the table row of `ids[i]`; an empty prompt becomes a single
    /// BOS token.
    pub fn encode(&self, ids: &[usize]) -> Result<TextFeatures> {
        let bos = [self.vocab.bos()];
        let ids = if ids.is_empty() { &bos[..] } else { ids };
        let d = self.d_cond();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.vocab.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.vocab.len(),
                });
            }
            data.extend_from_slice(self.table.row(id));
        }
        Ok(TextFeatures {
            tokens: Tensor::new(&[ids.len(), d], data)?,
        })
    }

    pub fn encode_prompt(&self, prompt: &str) -> Result<TextFeatures> {
        self.encode(&self.vocab.tokenize(prompt)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioEmbeddings {
    /// `(t_a, d_cond)`
    pub features: Tensor,
    /// Audio features per video frame.
    pub alpha: usize,
}

impl AudioEmbeddings {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normalised band centres (cycles per sample) probed by the toy front-end.
const BANDS: [f64; 3] = [0.02, 0.06, 0.15];
const RAW_AUDIO_DIM: usize = 1 + BANDS.len();

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    hop: usize,
    proj: Tensor,
}

impl AudioEncoder {
    /// `hop` is the number of waveform samples per audio feature.
    pub fn new(d_cond: usize, hop: usize, seed: u64) -> Self {
        let proj = Tensor::randn(
            &[RAW_AUDIO_DIM, d_cond],
            1.0,
            &mut seeded(seed, AUDIO_STREAM),
        );
        AudioEncoder { hop, proj }
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn d_cond(&self) -> usize {
        self.proj.shape()[1]
    }

    /// Windowed RMS energy and band magnitudes of one hop.
    fn raw_features(&self, window: &[f64]) -> [f64; RAW_AUDIO_DIM] {
        let n = window.len() as f64;
        let mut out = [0.0; RAW_AUDIO_DIM];
        out[0] = (window.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        for (b, &freq) in BANDS.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &x) in window.iter().enumerate() {
                let ph = std::f64::consts::TAU * freq * i as f64;
                re += x * ph.cos();
                im -= x * ph.sin();
            }
            out[1 + b] = 2.0 * (re * re + im * im).sqrt() / n;
        }
        out
    }

    /// `t_a = t_video * alpha` feature rows, each a projected hop.
    pub fn encode(
        &self,
        waveform: &[f64],
        alpha: usize,
        t_video: usize,
    ) -> Result<AudioEmbeddings> {
        if alpha == 0 {
            return Err(Error::invalid("alpha must be positive"));
        }
        let t_a = t_video * alpha;
        let need = t_a * self.hop;
        if waveform.len() < need {
            return Err(Error::invalid(format!(
                "waveform has {} samples, {t_video} frames at alpha {alpha} need {need}",
                waveform.len()
            )));
        }
        let mut raw = Vec::with_capacity(t_a * RAW_AUDIO_DIM);
        for k in 0..t_a {
            raw.extend(self.raw_features(&waveform[k * self.hop..(k + 1) * self.hop]));
        }
        let raw = Tensor::new(&[t_a, RAW_AUDIO_DIM], raw)?;
        Ok(AudioEmbeddings {
            features: raw.matmul(&self.proj)?,
            alpha,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioSegments {
    /// `(frames, 2(r + e) + 1, d_cond)`
    pub segments: Tensor,
    pub r: usize,
    pub e: usize,
}

impl AudioSegments {
    pub fn frames(&self) -> usize {
        self.segments.shape()[0]
    }

    pub fn segment_len(&self) -> usize {
        self.segments.shape()[1]
    }

    /// All segments stacked as `(frames * segment_len, d_cond)`.
    pub fn flattened(&self) -> Tensor {
        let s = self.segments.shape();
        self.segments.clone().reshape(&[s[0] * s[1], s[2]]).unwrap()
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<AudioSegments> {
        Ok(AudioSegments {
            segments: self.segments.slice_outer(start, len)?,
            r: self.r,
            e: self.e,
        })
    }
}

/// Centre index of segment `j` for segments of `size` features.
pub fn segment_center(j: usize, size: usize) -> usize {
    j * size + (size - 1) / 2
}

/// Raw-feature indices covered by segment `j`, clamped by edge replication.
pub fn segment_indices(j: usize, r: usize, alpha: usize, e: usize, t_a: usize) -> Vec<usize> {
    let center = segment_center(j, r * alpha) as isize;
    let half = (r + e) as isize;
    (center - half..=center + half)
        .map(|i| i.clamp(0, t_a as isize - 1) as usize)
        .collect()
}

/// Splits `emb` into one overlapping, centred segment per latent frame.
pub fn segment_audio(
    emb: &AudioEmbeddings,
    r: usize,
    e: usize,
    frames: usize,
) -> Result<AudioSegments> {
    let t_a = emb.len();
    let size = r * emb.alpha;
    if size == 0 || frames == 0 || t_a != frames * size {
        return Err(Error::invalid(format!(
            "{t_a} audio features cannot be split into {frames} segments of r*alpha = {size}"
        )));
    }
    let d = emb.features.shape()[1];
    let len = 2 * (r + e) + 1;
    let mut data = Vec::with_capacity(frames * len * d);
    for j in 0..frames {
        for i in segment_indices(j, r, emb.alpha, e, t_a) {
            data.extend_from_slice(emb.features.row(i));
        }
    }
    Ok(AudioSegments {
        segments: Tensor::new(&[frames, len, d], data)?,
        r,
        e,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    /// `(L_i, d_cond)`
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    patch: usize,
    proj: Tensor,
}

impl ImageEncoder {
    pub fn new(channels: usize, patch: usize, d_cond: usize, seed: u64) -> Self {
        let proj = Tensor::randn(&[channels, d_cond], 1.0, &mut seeded(seed, IMAGE_STREAM));
        ImageEncoder { patch, proj }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Non-overlapping patch means of a `(C, H, W)` frame, projected.
    pub fn encode(&self, frame: &Tensor) -> Result<ImageFeatures> {
        let s = frame.shape();
        if s.len() != 3 || s[0] != self.proj.shape()[0] {
            return Err(Error::shape(format!(
                "image encoder expects ({}, H, W), got {s:?}",
                self.proj.shape()[0]
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let p = self.patch;
        if p == 0 || h < p || w < p {
            return Err(Error::invalid(format!(
                "frame {h}x{w} is smaller than patch {p}"
            )));
        }
        let (ph, pw) = (h / p, w / p);
        let mut means = Vec::with_capacity(ph * pw * c);
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for y in py * p..(py + 1) * p {
                        let row = &frame.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                        acc += row[px * p..(px + 1) * p].iter().sum::<f64>();
                    }
                    means.push(acc / (p * p) as f64);
                }
            }
        }
        let means = Tensor::new(&[ph * pw, c], means)?;
        Ok(ImageFeatures {
            tokens: means.matmul(&self.proj)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceMask {
    /// `(frames, H, W)` with values in {0, 1}.
    pub values: Tensor,
}

impl FaceMask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(format!(
                "face mask must be 3-d, got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("face mask values must be 0 or 1"));
        }
        Ok(FaceMask { values })
    }

    pub fn from_region(frames: usize, h: usize, w: usize, region: Region) -> Result<Self> {
        region.validate(h, w)?;
        Ok(FaceMask {
            values: Tensor::from_fn(&[frames, h, w], |i| {
                let (y, x) = ((i / w) % h, i % w);
                if region.contains(y, x) {
                    1.0
                } else {
                    0.0
                }
            }),
        })
    }

    pub fn ones(frames: usize, h: usize, w: usize) -> Self {
        FaceMask {
            values: Tensor::ones(&[frames, h, w]),
        }
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    /// Token-grid mask: a `p x p` cell is on if any of its pixels is.
    pub fn downsample_max(&self, p: usize) -> Result<FaceMask> {
        let s = self.values.shape();
        let (f, h, w) = (s[0], s[1], s[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "face mask {h}x{w} not divisible by {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let out = Tensor::from_fn(&[f, gh, gw], |i| {
            let (fi, gy, gx) = (i / (gh * gw), (i / gw) % gh, i % gw);
            let any = (gy * p..(gy + 1) * p).any(|y| {
                (gx * p..(gx + 1) * p).any(|x| self.values.data()[(fi * h + y) * w + x] == 1.0)
            });
            if any {
                1.0
            } else {
                0.0
            }
        });
        Ok(FaceMask { values: out })
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<FaceMask> {
        Ok(FaceMask {
            values: self.values.slice_outer(start, len)?,
        })
    }
}

/// Zeroes rows of a `(frames * H * W, d)` token tensor (row-major over
/// frame, row, column) whose position is off in `face_mask`.
pub fn apply_face_mask(audio_branch_output: &Tensor, face_mask: &FaceMask) -> Result<Tensor> {
    let (n, d) = audio_branch_output.as_matrix_dims();
    if audio_branch_output.rank() != 2 || n != face_mask.values.len() {
        return Err(Error::shape(format!(
            "audio output {:?} vs face mask {:?}",
            audio_branch_output.shape(),
            face_mask.values.shape()
        )));
    }
    let mut out = audio_branch_output.clone();
    for (row, &m) in out.data_mut().chunks_mut(d).zip(face_mask.values.data()) {
        if m == 0.0 {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(out)
}

/// The complete condition set consumed by the cross-attention experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalBundle {
    pub text: TextFeatures,
    pub audio: AudioSegments,
    pub image: ImageFeatures,
    /// Latent-grid facial mask `(frames, H, W)`.
    pub face: FaceMask,
}

impl ModalBundle {
    pub fn frames(&self) -> usize {
        self.audio.frames()
    }
}
