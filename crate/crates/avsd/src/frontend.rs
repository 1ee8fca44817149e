//! Data-side feature operations: frame stacking, span masking, feature
//! corruption, modality dropout, and noise injection.
//!
//! All operations are pure given an explicit RNG, so per-utterance streams
//! keep training deterministic regardless of evaluation order. The
//! in-graph twins of `corrupt` (row replacement by a learned embedding)
//! live in the model builders; these functions serve data preparation and
//! the statistical tests.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Stacks `factor` consecutive frames channel-wise: [T, C] -> [T/factor,
/// C*factor], dropping the remainder frames.
pub fn stack_audio_frames(audio: &Tensor, factor: usize) -> Result<Tensor> {
    let (t, c) = audio.dims2()?;
    if factor == 0 {
        return Err(Error::invalid("stacking factor must be >= 1"));
    }
    if t < factor {
        return Err(Error::invalid(format!("cannot stack {t} frames by factor {factor}")));
    }
    let t_out = t / factor;
    let mut data = Vec::with_capacity(t_out * c * factor);
    for i in 0..t_out {
        for j in 0..factor {
            data.extend_from_slice(audio.row(i * factor + j));
        }
    }
    Tensor::new(vec![t_out, c * factor], data)
}

/// Span mask: sample span starts uniformly without replacement, adding
/// whole (clipped) spans until the masked fraction reaches `coverage`.
/// Returns sorted unique indices.
pub fn make_span_mask(t: usize, coverage: f64, span_len: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(span_len >= 1, "span length must be >= 1");
    if t == 0 || coverage <= 0.0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..t).collect();
    starts.shuffle(r);
    let mut masked = vec![false; t];
    let mut count = 0usize;
    for &s in &starts {
        if count as f64 >= coverage * t as f64 {
            break;
        }
        for i in s..(s + span_len).min(t) {
            if !masked[i] {
                masked[i] = true;
                count += 1;
            }
        }
    }
    (0..t).filter(|&i| masked[i]).collect()
}

/// Replaces the masked rows of [T, D] features with `embedding`.
pub fn corrupt(features: &Tensor, mask: &[usize], embedding: &[f64]) -> Result<Tensor> {
    let (t, d) = features.dims2()?;
    if embedding.len() != d {
        return Err(Error::invalid(format!(
            "replacement embedding has {} dims, features have {d}",
            embedding.len()
        )));
    }
    let mut out = features.clone();
    for &i in mask {
        if i >= t {
            return Err(Error::invalid(format!("mask index {i} outside {t} frames")));
        }
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(embedding);
    }
    Ok(out)
}

/// Which modalities the student keeps this step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalityChoice {
    Both,
    AudioOnly,
    VideoOnly,
}

/// Draws the modality-dropout decision: keep both with probability p_m,
/// otherwise keep audio with probability p_a (video zeroed) or keep video
/// (audio zeroed).
pub fn draw_modality(p_m: f64, p_a: f64, r: &mut ChaCha8Rng) -> ModalityChoice {
    if r.gen_range(0.0..1.0) < p_m {
        ModalityChoice::Both
    } else if r.gen_range(0.0..1.0) < p_a {
        ModalityChoice::AudioOnly
    } else {
        ModalityChoice::VideoOnly
    }
}

/// Applies a modality choice to feature tensors: the dropped modality
/// becomes an all-zero tensor of the same shape.
pub fn modality_dropout(
    f_a: &Tensor,
    f_v: &Tensor,
    p_m: f64,
    p_a: f64,
    r: &mut ChaCha8Rng,
) -> (Tensor, Tensor, ModalityChoice) {
    let choice = draw_modality(p_m, p_a, r);
    match choice {
        ModalityChoice::Both => (f_a.clone(), f_v.clone(), choice),
        ModalityChoice::AudioOnly => (f_a.clone(), Tensor::zeros(f_v.shape()), choice),
        ModalityChoice::VideoOnly => (Tensor::zeros(f_a.shape()), f_v.clone(), choice),
    }
}

/// With probability `p_noise`, mixes Gaussian noise into the audio at the
/// given SNR (dB, measured against the utterance's mean power).
pub fn add_noise(audio: &Tensor, p_noise: f64, snr_db: f64, r: &mut ChaCha8Rng) -> Tensor {
    if p_noise <= 0.0 || r.gen_range(0.0..1.0) >= p_noise {
        return audio.clone();
    }
    let power = audio.data().iter().map(|&v| v * v).sum::<f64>() / audio.numel() as f64;
    let noise_power = power / 10f64.powf(snr_db / 10.0);
    if noise_power <= 0.0 || !noise_power.is_finite() {
        return audio.clone();
    }
    let normal = Normal::new(0.0, noise_power.sqrt()).unwrap();
    audio.map(|v| v + normal.sample(r))
}

/// Expands video frames [T, H, W] into channelized rows [T, H*W*3] with
/// channels (value, value*x/W, value*y/H). The coordinate-weighted
/// channels let channel-global pooling in the visual frontend retain
/// where intensity sits in the frame.
pub fn video_to_channels(video: &Tensor) -> Result<Tensor> {
    let shape = video.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("expected [T,H,W] video, got {shape:?}")));
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(t * h * w * 3);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let v = video.data()[(f * h + y) * w + x];
                data.push(v);
                data.push(v * x as f64 / w as f64);
                data.push(v * y as f64 / h as f64);
            }
        }
    }
    Tensor::new(vec![t, h * w * 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn stacking_shapes_and_floor() {
        let audio = Tensor::new(vec![8, 26], (0..8 * 26).map(|i| i as f64).collect()).unwrap();
        let s = stack_audio_frames(&audio, 4).unwrap();
        assert_eq!(s.shape(), &[2, 104]);
        assert_eq!(&s.row(0)[..26], audio.row(0));
        assert_eq!(&s.row(0)[78..], audio.row(3));

        let audio10 = Tensor::new(vec![10, 26], vec![0.5; 260]).unwrap();
        assert_eq!(stack_audio_frames(&audio10, 4).unwrap().shape(), &[2, 104]);
        assert_eq!(stack_audio_frames(&audio10, 1).unwrap().shape(), &[10, 26]);
        assert!(stack_audio_frames(&Tensor::zeros(&[3, 26]), 4).is_err());
    }

    #[test]
    fn span_mask_extremes() {
        let mut r = rng::stream(1, "mask", 0);
        assert!(make_span_mask(50, 0.0, 5, &mut r).is_empty());
        let all = make_span_mask(50, 1.0, 5, &mut r);
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn span_mask_mean_fraction_near_coverage() {
        // Overshoot is bounded by one span; T large keeps it small.
        let t = 1000;
        let mut total = 0.0;
        for seed in 0..100 {
            let mut r = rng::stream(seed, "mask-mc", 0);
            let m = make_span_mask(t, 0.8, 5, &mut r);
            total += m.len() as f64 / t as f64;
        }
        let mean = total / 100.0;
        assert!((0.78..=0.86).contains(&mean), "mean masked fraction {mean}");
    }

    #[test]
    fn corrupt_replaces_only_masked_rows() {
        let f = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let e = vec![9.0, 9.0, 9.0];
        let c = corrupt(&f, &[1, 3], &e).unwrap();
        assert_eq!(c.row(0), f.row(0));
        assert_eq!(c.row(1), &e[..]);
        assert_eq!(c.row(2), f.row(2));
        assert_eq!(c.row(3), &e[..]);
        assert_eq!(corrupt(&f, &[], &e).unwrap().data(), f.data());
        assert!(corrupt(&f, &[4], &e).is_err());
        assert!(corrupt(&f, &[0], &[1.0]).is_err());
    }

    #[test]
    fn modality_dropout_extremes_and_frequencies() {
        let f_a = Tensor::full(&[3, 2], 1.0);
        let f_v = Tensor::full(&[3, 2], 2.0);
        let mut r = rng::stream(3, "md", 0);
        for _ in 0..20 {
            let (a, v, c) = modality_dropout(&f_a, &f_v, 1.0, 0.5, &mut r);
            assert_eq!(c, ModalityChoice::Both);
            assert_eq!(a.data(), f_a.data());
            assert_eq!(v.data(), f_v.data());
        }
        for _ in 0..20 {
            let (_, v, c) = modality_dropout(&f_a, &f_v, 0.0, 1.0, &mut r);
            assert_eq!(c, ModalityChoice::AudioOnly);
            assert!(v.data().iter().all(|&x| x == 0.0));
        }
        let mut counts = [0usize; 3];
        let mut rr = rng::stream(4, "md-mc", 0);
        let draws = 10_000;
        for _ in 0..draws {
            match draw_modality(0.5, 0.5, &mut rr) {
                ModalityChoice::Both => counts[0] += 1,
                ModalityChoice::AudioOnly => counts[1] += 1,
                ModalityChoice::VideoOnly => counts[2] += 1,
            }
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
        assert!((freq[0] - 0.5).abs() < 0.02, "both: {}", freq[0]);
        assert!((freq[1] - 0.25).abs() < 0.02, "audio-only: {}", freq[1]);
        assert!((freq[2] - 0.25).abs() < 0.02, "video-only: {}", freq[2]);
    }

    #[test]
    fn noise_probability_and_snr() {
        let audio = Tensor::new(vec![100, 26], (0..2600).map(|i| ((i % 17) as f64 - 8.0) * 0.3).collect()).unwrap();
        let mut r = rng::stream(5, "noise", 0);
        let same = add_noise(&audio, 0.0, 0.0, &mut r);
        assert_eq!(same.data(), audio.data());
        let inf_snr = add_noise(&audio, 1.0, f64::INFINITY, &mut r);
        assert_eq!(inf_snr.data(), audio.data());

        // p=1, 0 dB: measured noise power within +-0.5 dB of signal power.
        let noisy = add_noise(&audio, 1.0, 0.0, &mut r);
        let signal_power = audio.data().iter().map(|&v| v * v).sum::<f64>() / audio.numel() as f64;
        let noise_power = audio
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(&a, &b)| (b - a) * (b - a))
            .sum::<f64>()
            / audio.numel() as f64;
        let ratio_db = 10.0 * (signal_power / noise_power).log10();
        assert!(ratio_db.abs() < 0.5, "measured SNR {ratio_db} dB");
    }

    #[test]
    fn video_channelization_shape_and_values() {
        let video = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ch = video_to_channels(&video).unwrap();
        assert_eq!(ch.shape(), &[1, 12]);
        // Pixel (y=1, x=1) has value 4: channels (4, 4*0.5, 4*0.5).
        assert_eq!(&ch.data()[9..12], &[4.0, 2.0, 2.0]);
    }
}
