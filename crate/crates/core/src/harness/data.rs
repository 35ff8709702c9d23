//! Synthetic talking clips.
//!
//! Each clip shows a static background identity pattern, a coloured square
//! translating as its prompt says, and a grey "mouth" patch whose brightness
//! follows the amplitude envelope of a synthesized waveform. Clips live in
//! pixel space with values in `[0, 1]`; the model sees them average-pooled
//! and mapped to `[-1, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::modal_features::{
    segment_audio, AudioEncoder, FaceMask, ImageEncoder, ModalBundle, TextEncoder, TextFeatures,
    Vocabulary,
};
use crate::task_masking::Region;
use crate::tensor::Tensor;
use crate::trainer::{TrainData, TrainSample};

/// Waveform samples per carrier period; a video frame spans whole periods.
pub const CARRIER_PERIOD: usize = 16;
const MOUTH_FLOOR: f64 = 0.15;
const MOUTH_GAIN: f64 = 0.7;
const IDENTITY_MEAN: f64 = 0.3;
const IDENTITY_STD: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_clips: usize,
    /// Video frames per latent frame.
    #[serde(default = "two")]
    pub temporal_factor: usize,
    /// Pixels per latent position along each spatial axis.
    #[serde(default = "two")]
    pub spatial_factor: usize,
    /// Audio features per video frame.
    #[serde(default = "two")]
    pub alpha: usize,
    /// Waveform samples per audio feature.
    #[serde(default = "default_hop")]
    pub hop: usize,
    /// Extra audio context on each side of a segment.
    #[serde(default = "one")]
    pub context: usize,
    #[serde(default = "default_identities")]
    pub identities: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the frozen condition encoders.
    #[serde(default = "default_encoder_seed")]
    pub encoder_seed: u64,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn default_hop() -> usize {
    40
}
fn default_identities() -> usize {
    8
}
fn default_encoder_seed() -> u64 {
    1234
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_clips: 64,
            temporal_factor: 2,
            spatial_factor: 2,
            alpha: 2,
            hop: default_hop(),
            context: 1,
            identities: default_identities(),
            seed: 0,
            encoder_seed: default_encoder_seed(),
        }
    }
}

/// Pixel geometry of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl DataConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("data: {m}")));
        if self.temporal_factor == 0
            || self.spatial_factor == 0
            || self.alpha == 0
            || self.identities == 0
        {
            return bad("factors, alpha and identities must be positive".into());
        }
        if self.hop == 0 || !self.samples_per_frame().is_multiple_of(CARRIER_PERIOD) {
            return bad(format!(
                "alpha * hop must be a positive multiple of {CARRIER_PERIOD}"
            ));
        }
        if backbone.channels != 3 {
            return bad("clips are RGB; backbone.channels must be 3".into());
        }
        let g = self.geometry(backbone);
        if g.height < 16
            || g.width < 16
            || !g.height.is_multiple_of(16)
            || !g.width.is_multiple_of(16)
        {
            return bad(format!(
                "pixel size {}x{} must be multiples of 16",
                g.height, g.width
            ));
        }
        let layout = Layout::new(g.height, g.width);
        for m in Motion::ALL {
            if layout.travel(m, g.frames).is_none() {
                return bad(format!(
                    "{} frames leave no room for {m:?} motion",
                    g.frames
                ));
            }
        }
        Ok(())
    }

    pub fn geometry(&self, backbone: &BackboneConfig) -> ClipGeometry {
        ClipGeometry {
            frames: backbone.frames * self.temporal_factor,
            height: backbone.height * self.spatial_factor,
            width: backbone.width * self.spatial_factor,
        }
    }

    /// Waveform samples per video frame.
    pub fn samples_per_frame(&self) -> usize {
        self.alpha * self.hop
    }
}

/// Where things are drawn, as fractions of the frame so the same layout
/// holds at pixel and latent resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub height: usize,
    pub width: usize,
}

impl Layout {
    pub fn new(height: usize, width: usize) -> Self {
        Layout { height, width }
    }

    /// Rows that only ever show the identity pattern.
    pub fn identity_band(&self) -> Region {
        Region::new(0, 0, self.height / 4, self.width)
    }

    pub fn mouth(&self) -> Region {
        Region::new(
            3 * self.height / 4,
            3 * self.width / 8,
            self.height / 4,
            self.width / 4,
        )
    }

    /// Rows the square moves in.
    pub fn shape_band(&self) -> (usize, usize) {
        (self.height / 4, 3 * self.height / 4)
    }

    pub fn shape_size(&self) -> usize {
        3 * self.height / 16
    }

    /// Per-frame displacement `(dy, dx)` of a motion.
    pub fn velocity(&self, m: Motion) -> (isize, isize) {
        let vx = (self.width / 16) as isize;
        let vy = (self.height / 32).max(1) as isize;
        match m {
            Motion::Left => (0, -vx),
            Motion::Right => (0, vx),
            Motion::Up => (-vy, 0),
            Motion::Down => (vy, 0),
            Motion::Still => (0, 0),
        }
    }

    /// Ranges of valid start positions `(y, x)` for a path of `frames`.
    pub fn travel(&self, m: Motion, frames: usize) -> Option<((usize, usize), (usize, usize))> {
        let (top, bottom) = self.shape_band();
        let s = self.shape_size();
        let (dy, dx) = self.velocity(m);
        let span = |lo: usize, hi: usize, d: isize| -> Option<(usize, usize)> {
            let travel = d.unsigned_abs() * frames.saturating_sub(1);
            let hi = hi.checked_sub(travel)?;
            (hi >= lo).then(|| {
                if d < 0 {
                    (lo + travel, hi + travel)
                } else {
                    (lo, hi)
                }
            })
        };
        Some((span(top, bottom - s, dy)?, span(0, self.width - s, dx)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Motion {
    pub const ALL: [Motion; 5] = [
        Motion::Left,
        Motion::Right,
        Motion::Up,
        Motion::Down,
        Motion::Still,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Still => "still",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 4] = [
        ShapeColor::Red,
        ShapeColor::Green,
        ShapeColor::Blue,
        ShapeColor::Yellow,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            ShapeColor::Red => [0.9, 0.1, 0.1],
            ShapeColor::Green => [0.1, 0.85, 0.15],
            ShapeColor::Blue => [0.1, 0.2, 0.9],
            ShapeColor::Yellow => [0.9, 0.85, 0.1],
        }
    }
}

/// Smooth random background patterns, one per identity: noise box-blurred
/// twice with a radius of a quarter of the height.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityLibrary {
    patterns: Vec<Tensor>,
}

/// Separable box blur with edge clamping, applied in place per channel.
fn box_blur(img: &mut [f64], h: usize, w: usize, radius: usize) {
    let r = radius as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in -r..=r {
                let xx = (x as isize + k).clamp(0, w as isize - 1) as usize;
                s += img[y * w + xx];
            }
            tmp[y * w + x] = s / (2 * r + 1) as f64;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in -r..=r {
                let yy = (y as isize + k).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            img[y * w + x] = s / (2 * r + 1) as f64;
        }
    }
}

impl IdentityLibrary {
    pub fn new(count: usize, height: usize, width: usize, seed: u64) -> Self {
        let radius = (height / 4).max(1);
        let patterns = (0..count)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1000 + k as u64);
                let mut data = Tensor::randn(&[3, height, width], 1.0, &mut rng).into_data();
                for ch in data.chunks_mut(height * width) {
                    box_blur(ch, height, width, radius);
                    box_blur(ch, height, width, radius);
                    let mean = ch.iter().sum::<f64>() / ch.len() as f64;
                    let sd = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64)
                        .sqrt();
                    for v in ch.iter_mut() {
                        *v = (IDENTITY_MEAN + IDENTITY_STD * (*v - mean) / sd).clamp(0.0, 1.0);
                    }
                }
                Tensor::new(&[3, height, width], data).unwrap()
            })
            .collect();
        IdentityLibrary { patterns }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// `(3, H, W)` pattern of identity `k`.
    pub fn pattern(&self, k: usize) -> &Tensor {
        &self.patterns[k % self.patterns.len()]
    }

    /// The identity whose band is least similar to identity `k`'s.
    pub fn most_dissimilar(&self, k: usize) -> usize {
        let frame = self.pattern(k);
        let layout = Layout::new(frame.shape()[1], frame.shape()[2]);
        let band = |t: &Tensor| super::metrics::identity_embedding(t, &layout);
        let a = band(frame);
        (0..self.len())
            .filter(|&j| j != k % self.len())
            .min_by(|&i, &j| {
                let si = super::metrics::cosine(&a, &band(self.pattern(i)));
                let sj = super::metrics::cosine(&a, &band(self.pattern(j)));
                si.total_cmp(&sj)
            })
            .unwrap_or(k)
    }
}

/// Everything that determines one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub identity: usize,
    pub color: ShapeColor,
    pub motion: Motion,
    /// Top-left of the square in frame 0.
    pub start: (usize, usize),
    /// Audio amplitude per video frame, in `[0, 1]`.
    pub envelope: Vec<f64>,
}

impl ClipSpec {
    pub fn prompt(&self) -> String {
        format!("{} square moving {}", self.color.word(), self.motion.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    ColorShift,
    IdentitySwap,
}

impl ArtifactKind {
    pub fn tag(self) -> &'static str {
        match self {
            ArtifactKind::ColorShift => "color_shift",
            ArtifactKind::IdentitySwap => "identity_swap",
        }
    }
}

impl std::str::FromStr for ArtifactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color_shift" => Ok(ArtifactKind::ColorShift),
            "identity_swap" => Ok(ArtifactKind::IdentitySwap),
            other => Err(Error::invalid(format!("unknown artifact kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub spec: ClipSpec,
    /// `(T_video, 3, H_px, W_px)` in `[0, 1]`.
    pub pixels: Tensor,
    pub waveform: Vec<f64>,
    pub prompt: String,
    /// Mouth rectangle in pixels.
    pub mouth: Region,
    pub motion: Motion,
    pub issue: Option<ArtifactKind>,
}

/// Waveform of a carrier whose amplitude is `envelope[f]` over frame `f`.
pub fn synth_waveform(envelope: &[f64], samples_per_frame: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(envelope.len() * samples_per_frame);
    for &a in envelope {
        for i in 0..samples_per_frame {
            let ph = std::f64::consts::TAU * (i % CARRIER_PERIOD) as f64 / CARRIER_PERIOD as f64;
            out.push(a * ph.sin());
        }
    }
    out
}

/// Folds `p` into `[lo, hi]` by bouncing off the ends.
fn reflect(p: isize, lo: usize, hi: usize) -> usize {
    let (lo, hi) = (lo as isize, hi as isize);
    let period = 2 * (hi - lo);
    if period == 0 {
        return lo as usize;
    }
    let k = (p - lo).rem_euclid(period);
    (lo + if k <= hi - lo { k } else { period - k }) as usize
}

/// Renders `spec`. The square bounces off the edges of its band, so
/// clips of any length are valid.
pub fn render_clip(
    spec: &ClipSpec,
    geom: ClipGeometry,
    library: &IdentityLibrary,
    samples_per_frame: usize,
) -> Result<SyntheticClip> {
    let ClipGeometry {
        frames,
        height: h,
        width: w,
    } = geom;
    if spec.envelope.len() != frames {
        return Err(Error::invalid(format!(
            "envelope has {} values for {frames} frames",
            spec.envelope.len()
        )));
    }
    let layout = Layout::new(h, w);
    let bg = library.pattern(spec.identity);
    if bg.shape() != [3, h, w] {
        return Err(Error::shape(format!(
            "identity pattern {:?} for {h}x{w} clip",
            bg.shape()
        )));
    }
    let mouth = layout.mouth();
    let size = layout.shape_size();
    let (dy, dx) = layout.velocity(spec.motion);
    let rgb = spec.color.rgb();
    let mut data = Vec::with_capacity(frames * 3 * h * w);
    let (top, bottom) = layout.shape_band();
    for f in 0..frames {
        let y0 = reflect(spec.start.0 as isize + dy * f as isize, top, bottom - size);
        let x0 = reflect(spec.start.1 as isize + dx * f as isize, 0, w - size);
        let square = Region::new(y0, x0, size, size);
        let b = MOUTH_FLOOR + MOUTH_GAIN * spec.envelope[f];
        for (c, &col) in rgb.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    data.push(if mouth.contains(y, x) {
                        b
                    } else if square.contains(y, x) {
                        col
                    } else {
                        bg.data()[(c * h + y) * w + x]
                    });
                }
            }
        }
    }
    Ok(SyntheticClip {
        pixels: Tensor::new(&[frames, 3, h, w], data)?,
        waveform: synth_waveform(&spec.envelope, samples_per_frame),
        prompt: spec.prompt(),
        mouth,
        motion: spec.motion,
        spec: spec.clone(),
        issue: None,
    })
}

/// A random clip. Starts are chosen so the square does not bounce when the
/// clip is short enough; longer clips start anywhere in the band.
pub fn random_spec<R: Rng>(rng: &mut R, geom: ClipGeometry, identities: usize) -> ClipSpec {
    let layout = Layout::new(geom.height, geom.width);
    let color = ShapeColor::ALL[rng.random_range(0..ShapeColor::ALL.len())];
    let motion = Motion::ALL[rng.random_range(0..Motion::ALL.len())];
    let (top, bottom) = layout.shape_band();
    let size = layout.shape_size();
    let ((ylo, yhi), (xlo, xhi)) = layout
        .travel(motion, geom.frames)
        .unwrap_or(((top, bottom - size), (0, geom.width - size)));
    let start = (rng.random_range(ylo..=yhi), rng.random_range(xlo..=xhi));
    let envelope = (0..geom.frames).map(|_| rng.random::<f64>()).collect();
    ClipSpec {
        identity: rng.random_range(0..identities),
        color,
        motion,
        start,
        envelope,
    }
}

/// `n` clips, deterministic in `seed`.
pub fn gen_dataset(
    cfg: &DataConfig,
    backbone: &BackboneConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticClip>> {
    cfg.validate(backbone)?;
    let geom = cfg.geometry(backbone);
    let library = IdentityLibrary::new(cfg.identities, geom.height, geom.width, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let spec = random_spec(&mut rng, geom, cfg.identities);
            render_clip(&spec, geom, &library, cfg.samples_per_frame())
        })
        .collect()
}

/// Average-pools `(T, C, H, W)` by `(ft, fs, fs)` and maps `[0, 1]` to
/// `[-1, 1]`.
pub fn to_latent(pixels: &Tensor, ft: usize, fs: usize) -> Result<Tensor> {
    let s = pixels.shape();
    if s.len() != 4
        || ft == 0
        || fs == 0
        || !s[0].is_multiple_of(ft)
        || !s[2].is_multiple_of(fs)
        || !s[3].is_multiple_of(fs)
    {
        return Err(Error::shape(format!(
            "cannot pool {s:?} by ({ft}, {fs}, {fs})"
        )));
    }
    let (t, c, h, w) = (s[0] / ft, s[1], s[2] / fs, s[3] / fs);
    let norm = (ft * fs * fs) as f64;
    let src = pixels.data();
    Ok(Tensor::from_fn(&[t, c, h, w], |i| {
        let (f, ch, y, x) = (i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w);
        let mut acc = 0.0;
        for df in 0..ft {
            for dy in 0..fs {
                let row = ((f * ft + df) * c + ch) * s[2] + y * fs + dy;
                acc += src[row * s[3] + x * fs..row * s[3] + (x + 1) * fs]
                    .iter()
                    .sum::<f64>();
            }
        }
        2.0 * acc / norm - 1.0
    }))
}

/// Maps a latent back to `[0, 1]` values at latent resolution.
pub fn latent_to_unit(latent: &Tensor) -> Tensor {
    latent.map(|v| (v + 1.0) / 2.0)
}

/// The frozen encoders that turn a clip into model conditions.
pub struct Encoders {
    pub text: TextEncoder,
    pub audio: AudioEncoder,
    pub image: ImageEncoder,
}

impl Encoders {
    pub fn new(cfg: &DataConfig, backbone: &BackboneConfig) -> Self {
        Encoders {
            text: TextEncoder::new(Vocabulary::default(), backbone.d_cond, cfg.encoder_seed),
            audio: AudioEncoder::new(backbone.d_cond, cfg.hop, cfg.encoder_seed),
            image: ImageEncoder::new(
                backbone.channels,
                backbone.patch,
                backbone.d_cond,
                cfg.encoder_seed,
            ),
        }
    }

    /// Text condition of an empty prompt.
    pub fn null_text(&self) -> TextFeatures {
        self.text.encode(&[]).expect("BOS is in every vocabulary")
    }

    /// Conditions of `clip` whose clean latent is `latent`; the image
    /// condition is the latent's first frame.
    pub fn bundle(
        &self,
        clip: &SyntheticClip,
        latent: &Tensor,
        cfg: &DataConfig,
    ) -> Result<ModalBundle> {
        let s = latent.shape();
        let (frames, h, w) = (s[0], s[2], s[3]);
        let emb = self
            .audio
            .encode(&clip.waveform, cfg.alpha, clip.pixels.shape()[0])?;
        let first = latent.slice_outer(0, 1)?;
        let first = first.reshape(&s[1..])?;
        Ok(ModalBundle {
            text: self.text.encode_prompt(&clip.prompt)?,
            audio: segment_audio(&emb, cfg.temporal_factor, cfg.context, frames)?,
            image: self.image.encode(&first)?,
            face: FaceMask::from_region(frames, h, w, Layout::new(h, w).mouth())?,
        })
    }

    pub fn sample(&self, clip: &SyntheticClip, cfg: &DataConfig) -> Result<TrainSample> {
        let x0 = to_latent(&clip.pixels, cfg.temporal_factor, cfg.spatial_factor)?;
        let bundle = self.bundle(clip, &x0, cfg)?;
        let s = x0.shape();
        Ok(TrainSample {
            mouth: Layout::new(s[2], s[3]).mouth(),
            x0,
            bundle,
        })
    }

    pub fn train_data(&self, clips: &[SyntheticClip], cfg: &DataConfig) -> Result<TrainData> {
        Ok(TrainData {
            samples: clips
                .iter()
                .map(|c| self.sample(c, cfg))
                .collect::<Result<_>>()?,
            null_text: self.null_text(),
        })
    }
}
