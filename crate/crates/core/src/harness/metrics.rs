//! Desk-scale clip metrics.
//!
//! These are proxies for lip sync, identity consistency and window seams,
//! meaningful only for comparing arms of an experiment against each other.
//! Videos are `(T, 3, H, W)` at any resolution; regions come from
//! [`Layout`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Layout;
use crate::error::{Error, Result};
use crate::task_masking::Region;
use crate::tensor::Tensor;

const PROJECTION_SEED: u64 = 0x1d;
const PROJECTION_DIM: usize = 64;

/// Pearson correlation; 0 when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn check_video(video: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *video.shape() {
        [t, c, h, w] if t > 0 && c > 0 => Ok((t, c, h, w)),
        ref s => Err(Error::shape(format!(
            "video must be (T, C, H, W), got {s:?}"
        ))),
    }
}

fn region_mean(frame: &[f64], c: usize, h: usize, w: usize, r: Region) -> f64 {
    let mut s = 0.0;
    for ch in 0..c {
        for y in r.top..r.top + r.height {
            let row = (ch * h + y) * w;
            s += frame[row + r.left..row + r.left + r.width]
                .iter()
                .sum::<f64>();
        }
    }
    s / (c * r.area()) as f64
}

/// Mean mouth-region value of each frame.
pub fn mouth_trace(video: &Tensor) -> Result<Vec<f64>> {
    let (t, c, h, w) = check_video(video)?;
    let mouth = Layout::new(h, w).mouth();
    let n = c * h * w;
    Ok((0..t)
        .map(|f| region_mean(&video.data()[f * n..(f + 1) * n], c, h, w, mouth))
        .collect())
}

/// RMS of each of `frames` equal spans of the waveform.
pub fn frame_envelope(waveform: &[f64], frames: usize) -> Result<Vec<f64>> {
    if frames == 0 || waveform.len() < frames {
        return Err(Error::invalid(format!(
            "{} samples for {frames} frames",
            waveform.len()
        )));
    }
    let span = waveform.len() / frames;
    Ok((0..frames)
        .map(|f| {
            let s = &waveform[f * span..(f + 1) * span];
            (s.iter().map(|x| x * x).sum::<f64>() / span as f64).sqrt()
        })
        .collect())
}

/// Correlation between mouth brightness and audio envelope per frame.
pub fn metric_sync(video: &Tensor, waveform: &[f64]) -> Result<f64> {
    let trace = mouth_trace(video)?;
    Ok(pearson(&trace, &frame_envelope(waveform, trace.len())?))
}

/// Frame means of channel `channel`.
pub fn channel_means(video: &Tensor, channel: usize) -> Result<Vec<f64>> {
    let (t, c, h, w) = check_video(video)?;
    if channel >= c {
        return Err(Error::invalid(format!("channel {channel} of {c}")));
    }
    let n = h * w;
    Ok((0..t)
        .map(|f| {
            video.data()[(f * c + channel) * n..(f * c + channel + 1) * n]
                .iter()
                .sum::<f64>()
                / n as f64
        })
        .collect())
}

/// Random projection of a frame's channel-centred identity band.
pub fn identity_embedding(frame: &Tensor, layout: &Layout) -> Vec<f64> {
    let s = frame.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let band = layout.identity_band();
    let mut v = Vec::with_capacity(c * band.area());
    for ch in 0..c {
        let start = v.len();
        for y in band.top..band.top + band.height {
            let row = (ch * h + y) * w;
            v.extend_from_slice(&frame.data()[row + band.left..row + band.left + band.width]);
        }
        let m = v[start..].iter().sum::<f64>() / band.area() as f64;
        v[start..].iter_mut().for_each(|x| *x -= m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let proj = Tensor::randn(&[v.len(), PROJECTION_DIM], 1.0, &mut rng);
    Tensor::new(&[1, v.len()], v)
        .unwrap()
        .matmul(&proj)
        .unwrap()
        .into_data()
}

/// Identity similarity of each frame to `reference` `(C, H, W)`.
pub fn identity_trace(video: &Tensor, reference: &Tensor) -> Result<Vec<f64>> {
    let (t, c, h, w) = check_video(video)?;
    if reference.shape() != [c, h, w] {
        return Err(Error::shape(format!(
            "reference {:?} for frames of {:?}",
            reference.shape(),
            [c, h, w]
        )));
    }
    let layout = Layout::new(h, w);
    let r = identity_embedding(reference, &layout);
    (0..t)
        .map(|f| {
            let frame = video.slice_outer(f, 1)?.reshape(&[c, h, w])?;
            Ok(cosine(&identity_embedding(&frame, &layout), &r))
        })
        .collect()
}

/// Mean identity similarity of the frames to `reference`.
pub fn metric_identity(video: &Tensor, reference: &Tensor) -> Result<f64> {
    let tr = identity_trace(video, reference)?;
    Ok(tr.iter().sum::<f64>() / tr.len() as f64)
}

/// First frames `j` of the pairs `(j, j + 1)` where window contributions
/// switch: the first frame of each later window and the first frame after
/// each earlier window ends.
pub fn boundary_pairs(starts: &[usize], window: usize, frames: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for k in 1..starts.len() {
        if starts[k] > 0 {
            out.push(starts[k] - 1);
        }
        let end = starts[k - 1] + window;
        if end < frames {
            out.push(end - 1);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Mean absolute frame difference across window boundaries over the mean
/// elsewhere. Degenerate cases (one window, no motion) give 1.
pub fn metric_seam(video: &Tensor, starts: &[usize], window: usize) -> Result<f64> {
    let (t, c, h, w) = check_video(video)?;
    if t < 2 {
        return Err(Error::invalid("seam metric needs at least two frames"));
    }
    let pairs = boundary_pairs(starts, window, t);
    if pairs.is_empty() {
        return Ok(1.0);
    }
    if pairs.len() == t - 1 {
        return Err(Error::invalid("every frame pair is a window boundary"));
    }
    let n = c * h * w;
    let diff = |j: usize| -> f64 {
        let a = &video.data()[j * n..(j + 1) * n];
        let b = &video.data()[(j + 1) * n..(j + 2) * n];
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
    };
    let (mut at, mut na, mut rest, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for j in 0..t - 1 {
        if pairs.binary_search(&j).is_ok() {
            at += diff(j);
            na += 1;
        } else {
            rest += diff(j);
            nr += 1;
        }
    }
    let (at, rest) = (at / na as f64, rest / nr as f64);
    Ok(match (at == 0.0, rest == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => at / rest,
    })
}

/// Peak signal-to-noise ratio in dB for values spanning `peak`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.check_same_shape(b, "psnr operands")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    use crate::harness::data::{
        render_clip, ClipGeometry, ClipSpec, IdentityLibrary, Motion, ShapeColor,
    };

    #[test]
    fn pearson_oracle() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]) - 0.9933992677987828).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 5.0]), 0.0);
        assert_eq!(pearson(&[1.0, 2.0], &[-1.0, -2.0]), -1.0);
    }

    #[test]
    fn constant_video_has_zero_sync() {
        let v = Tensor::full(&[6, 3, 16, 16], 0.4);
        let wave: Vec<f64> = (0..600).map(|i| (i as f64).sin()).collect();
        assert_eq!(metric_sync(&v, &wave).unwrap(), 0.0);
    }

    #[test]
    fn shuffled_frames_lose_sync() {
        let geom = ClipGeometry {
            frames: 32,
            height: 32,
            width: 32,
        };
        let lib = IdentityLibrary::new(1, 32, 32, 0);
        let mut total = 0.0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = ClipSpec {
                identity: 0,
                color: ShapeColor::Red,
                motion: Motion::Still,
                start: (10, 10),
                envelope: (0..32).map(|_| rng.random::<f64>()).collect(),
            };
            let clip = render_clip(&spec, geom, &lib, 80).unwrap();
            assert!(metric_sync(&clip.pixels, &clip.waveform).unwrap() >= 0.9);
            let mut order: Vec<usize> = (0..32).collect();
            order.shuffle(&mut rng);
            let frames: Vec<Tensor> = order
                .iter()
                .map(|&f| clip.pixels.slice_outer(f, 1).unwrap())
                .collect();
            let shuffled = Tensor::concat_outer(&frames).unwrap();
            total += metric_sync(&shuffled, &clip.waveform).unwrap().abs();
        }
        assert!(total / 20.0 < 0.2, "{}", total / 20.0);
    }

    #[test]
    fn identity_of_repeated_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        let v = Tensor::concat_outer(&[
            r.clone().reshape(&[1, 3, 16, 16]).unwrap(),
            r.clone().reshape(&[1, 3, 16, 16]).unwrap(),
        ])
        .unwrap();
        assert!((metric_identity(&v, &r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_of_noise_is_near_zero() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let r = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
            // noise orthogonalised against the reference band
            let mut n = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
            let band = 3 * 8 * 32;
            let (rb, nb) = (r.data(), n.data_mut());
            let idx: Vec<usize> = (0..3)
                .flat_map(|c| (0..8 * 32).map(move |i| c * 1024 + i))
                .collect();
            let dot: f64 = idx.iter().map(|&i| rb[i] * nb[i]).sum();
            let rr: f64 = idx.iter().map(|&i| rb[i] * rb[i]).sum();
            for &i in &idx {
                nb[i] -= dot / rr * rb[i];
            }
            assert_eq!(idx.len(), band);
            total += metric_identity(&n.reshape(&[1, 3, 32, 32]).unwrap(), &r)
                .unwrap()
                .abs();
        }
        assert!(total / 20.0 < 0.2, "{}", total / 20.0);
    }

    #[test]
    fn seam_examples() {
        assert_eq!(boundary_pairs(&[0, 5], 8, 13), vec![4, 7]);
        assert_eq!(boundary_pairs(&[0, 4], 4, 8), vec![3]);
        let constant = Tensor::full(&[13, 3, 4, 4], 0.2);
        assert_eq!(metric_seam(&constant, &[0, 5], 8).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cut = Tensor::from_fn(&[13, 3, 4, 4], |_| 0.01 * rng.random::<f64>());
        let n = 48;
        for v in &mut cut.data_mut()[5 * n..] {
            *v += 1.0;
        }
        assert!(metric_seam(&cut, &[0, 5], 8).unwrap() > 20.0);
        assert_eq!(metric_seam(&cut, &[0], 13).unwrap(), 1.0);
        assert!(metric_seam(&Tensor::zeros(&[1, 3, 4, 4]), &[0], 1).is_err());
    }

    #[test]
    fn psnr_oracle() {
        let a = Tensor::zeros(&[4]);
        let b = Tensor::full(&[4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }
}
