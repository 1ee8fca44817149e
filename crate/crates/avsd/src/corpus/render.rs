//! Deterministic rendering of one synthetic utterance.
//!
//! Audio frames are phone embeddings plus a speaker bias and small noise.
//! The lip view draws per-phone blob patterns warped by speaker geometry;
//! the face view embeds the lip view as an exact pixel crop and adds
//! extraoral blobs that carry coarse (deliberately lossy) phone identity.
//! An occluder sprite, when requested, is stamped onto the face view only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::rng;

pub const LIP_SIZE: usize = 16;
pub const FACE_SIZE: usize = 24;
pub const AUDIO_DIM: usize = 26;
/// Audio frames per video frame (100 Hz vs 25 Hz).
pub const STACK_FACTOR: usize = 4;
/// Top-left corner of the lip crop inside the face view.
pub const LIP_ROW0: usize = 6;
pub const LIP_COL0: usize = 4;
const OCCLUDER_SIZE: usize = 10;

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    w: f64,
}

impl Blob {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let d2 = (x - self.cx) * (x - self.cx) + (y - self.cy) * (y - self.cy);
        self.w * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Per-phone rendering recipe, fully determined by (template_seed, id).
#[derive(Clone, Debug)]
pub struct PhoneTemplate {
    audio: Vec<f64>,
    lip_blobs: Vec<Blob>,
    extraoral: Vec<Blob>,
}

impl PhoneTemplate {
    pub fn derive(template_seed: u64, id: usize) -> Self {
        let mut r = rng::stream(template_seed, "phone-template", id as u64);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let audio: Vec<f64> = (0..AUDIO_DIM).map(|_| normal.sample(&mut r)).collect();
        let lip_blobs: Vec<Blob> = (0..3)
            .map(|_| Blob {
                cx: r.gen_range(3.0..13.0),
                cy: r.gen_range(3.0..13.0),
                sigma: r.gen_range(1.2..2.8),
                w: r.gen_range(0.6..1.0),
            })
            .collect();
        // Coarsely quantized so several phones share extraoral looks:
        // the face view adds partial, not complete, phone identity.
        let extraoral: Vec<Blob> = (0..2)
            .map(|_| Blob {
                cx: (r.gen_range(2.0..22.0_f64) / 5.0).round() * 5.0,
                cy: r.gen_range(1.0..4.5_f64).round(),
                sigma: 1.6,
                w: if r.gen_range(0.0..1.0) < 0.5 { 0.4 } else { 0.8 },
            })
            .collect();
        PhoneTemplate { audio, lip_blobs, extraoral }
    }
}

/// Per-speaker rendering style drawn once per speaker.
#[derive(Clone, Debug)]
pub struct SpeakerStyle {
    audio_bias: Vec<f64>,
    dx: f64,
    dy: f64,
    scale: f64,
    face_tone: f64,
    extra_gain: f64,
}

impl SpeakerStyle {
    pub fn derive(master_seed: u64, lang_tag: &str, speaker_index: usize) -> Self {
        let tag = format!("speaker:{lang_tag}");
        let mut r = rng::stream(master_seed, &tag, speaker_index as u64);
        let normal = Normal::new(0.0, 0.3).unwrap();
        SpeakerStyle {
            audio_bias: (0..AUDIO_DIM).map(|_| normal.sample(&mut r)).collect(),
            dx: r.gen_range(-1.5..1.5),
            dy: r.gen_range(-1.5..1.5),
            scale: r.gen_range(0.85..1.15),
            face_tone: r.gen_range(0.05..0.25),
            extra_gain: r.gen_range(0.8..1.2),
        }
    }
}

/// One phone occurrence: which template to render and for how many video
/// frames.
#[derive(Clone, Copy, Debug)]
pub struct PhoneSegment {
    pub template_id: usize,
    pub video_frames: usize,
}

pub struct RenderedUtterance {
    /// [T_a, 26] with T_a = 4·T_v by construction.
    pub audio: Tensor,
    /// [T_v, 16, 16]
    pub lip: Tensor,
    /// [T_v, 24, 24]
    pub face: Tensor,
}

/// Within-phone intensity envelope peaking mid-phone.
fn envelope(frame: usize, dur: usize) -> f64 {
    if dur <= 1 {
        return 1.0;
    }
    let center_dist = (2.0 * frame as f64 - (dur as f64 - 1.0)).abs() / (dur as f64 - 1.0);
    1.0 - 0.25 * center_dist
}

pub fn render_utterance(
    segments: &[PhoneSegment],
    templates: &[PhoneTemplate],
    style: &SpeakerStyle,
    occluded: bool,
    r: &mut ChaCha8Rng,
) -> RenderedUtterance {
    assert!(!segments.is_empty(), "utterance needs at least one phone");
    let t_v: usize = segments.iter().map(|s| s.video_frames).sum();
    let t_a = t_v * STACK_FACTOR;
    let mut audio = vec![0.0; t_a * AUDIO_DIM];
    let mut lip = vec![0.0; t_v * LIP_SIZE * LIP_SIZE];
    let mut face = vec![0.0; t_v * FACE_SIZE * FACE_SIZE];
    let pixel_noise = Normal::new(0.0, 0.01).unwrap();
    let audio_noise = Normal::new(0.0, 0.05).unwrap();

    let mut v = 0;
    for seg in segments {
        let tpl = &templates[seg.template_id];
        for j in 0..seg.video_frames {
            let env = envelope(j, seg.video_frames);

            let lip_frame = &mut lip[v * LIP_SIZE * LIP_SIZE..(v + 1) * LIP_SIZE * LIP_SIZE];
            for y in 0..LIP_SIZE {
                for x in 0..LIP_SIZE {
                    // Inverse speaker warp into template coordinates.
                    let cx = LIP_SIZE as f64 / 2.0 - 0.5;
                    let tx = (x as f64 - cx) / style.scale - style.dx + cx;
                    let ty = (y as f64 - cx) / style.scale - style.dy + cx;
                    let mut val: f64 = tpl.lip_blobs.iter().map(|b| b.eval(tx, ty)).sum();
                    val = val * env + pixel_noise.sample(r);
                    lip_frame[y * LIP_SIZE + x] = val;
                }
            }

            let face_frame = &mut face[v * FACE_SIZE * FACE_SIZE..(v + 1) * FACE_SIZE * FACE_SIZE];
            for y in 0..FACE_SIZE {
                for x in 0..FACE_SIZE {
                    let mut val = style.face_tone + 0.05 * y as f64 / FACE_SIZE as f64;
                    val += style.extra_gain
                        * env
                        * tpl.extraoral.iter().map(|b| b.eval(x as f64, y as f64)).sum::<f64>();
                    face_frame[y * FACE_SIZE + x] = val;
                }
            }
            // The lip view is an exact crop of the face view.
            for y in 0..LIP_SIZE {
                for x in 0..LIP_SIZE {
                    face_frame[(LIP_ROW0 + y) * FACE_SIZE + LIP_COL0 + x] =
                        lip_frame[y * LIP_SIZE + x];
                }
            }

            for a in 0..STACK_FACTOR {
                let row = &mut audio[(v * STACK_FACTOR + a) * AUDIO_DIM
                    ..(v * STACK_FACTOR + a + 1) * AUDIO_DIM];
                for c in 0..AUDIO_DIM {
                    row[c] = 0.8 * env * tpl.audio[c] + style.audio_bias[c] + audio_noise.sample(r);
                }
            }
            v += 1;
        }
    }

    if occluded {
        let max_pos = FACE_SIZE - OCCLUDER_SIZE;
        let oy = r.gen_range(0..=max_pos);
        let ox = r.gen_range(0..=max_pos);
        for frame in 0..t_v {
            let face_frame = &mut face[frame * FACE_SIZE * FACE_SIZE..(frame + 1) * FACE_SIZE * FACE_SIZE];
            for y in oy..oy + OCCLUDER_SIZE {
                for x in ox..ox + OCCLUDER_SIZE {
                    face_frame[y * FACE_SIZE + x] = 0.85;
                }
            }
        }
    }

    RenderedUtterance {
        audio: Tensor::new(vec![t_a, AUDIO_DIM], audio).unwrap(),
        lip: Tensor::new(vec![t_v, LIP_SIZE, LIP_SIZE], lip).unwrap(),
        face: Tensor::new(vec![t_v, FACE_SIZE, FACE_SIZE], face).unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn fixture() -> (Vec<PhoneTemplate>, SpeakerStyle) {
        let templates: Vec<PhoneTemplate> =
            (0..4).map(|i| PhoneTemplate::derive(1000, i)).collect();
        let style = SpeakerStyle::derive(5, "source", 0);
        (templates, style)
    }

    #[test]
    fn deterministic_given_seed() {
        let (templates, style) = fixture();
        let segs = [
            PhoneSegment { template_id: 0, video_frames: 2 },
            PhoneSegment { template_id: 3, video_frames: 1 },
        ];
        let a = render_utterance(&segs, &templates, &style, true, &mut ChaCha8Rng::seed_from_u64(9));
        let b = render_utterance(&segs, &templates, &style, true, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.audio.data(), b.audio.data());
        assert_eq!(a.lip.data(), b.lip.data());
        assert_eq!(a.face.data(), b.face.data());
    }

    #[test]
    fn audio_video_sync_factor_holds() {
        let (templates, style) = fixture();
        let segs = [
            PhoneSegment { template_id: 1, video_frames: 3 },
            PhoneSegment { template_id: 2, video_frames: 2 },
        ];
        let u = render_utterance(&segs, &templates, &style, false, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(u.lip.shape(), &[5, 16, 16]);
        assert_eq!(u.face.shape(), &[5, 24, 24]);
        assert_eq!(u.audio.shape(), &[20, 26]);
    }

    #[test]
    fn lip_is_exact_crop_when_unoccluded() {
        let (templates, style) = fixture();
        let segs = [PhoneSegment { template_id: 2, video_frames: 2 }];
        let u = render_utterance(&segs, &templates, &style, false, &mut ChaCha8Rng::seed_from_u64(3));
        for f in 0..2 {
            for y in 0..LIP_SIZE {
                for x in 0..LIP_SIZE {
                    let lip_v = u.lip.data()[(f * LIP_SIZE + y) * LIP_SIZE + x];
                    let face_v = u.face.data()
                        [(f * FACE_SIZE + LIP_ROW0 + y) * FACE_SIZE + LIP_COL0 + x];
                    assert_eq!(lip_v, face_v);
                }
            }
        }
    }

    #[test]
    fn occluder_touches_face_only() {
        let (templates, style) = fixture();
        let segs = [PhoneSegment { template_id: 0, video_frames: 2 }];
        let clean = render_utterance(&segs, &templates, &style, false, &mut ChaCha8Rng::seed_from_u64(4));
        let occ = render_utterance(&segs, &templates, &style, true, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(clean.lip.data(), occ.lip.data());
        assert_ne!(clean.face.data(), occ.face.data());
        assert!(occ.face.data().iter().filter(|&&v| v == 0.85).count() >= OCCLUDER_SIZE * OCCLUDER_SIZE);
    }

    #[test]
    fn distinct_phones_yield_distinct_lip_frames() {
        let (templates, style) = fixture();
        let a = render_utterance(
            &[PhoneSegment { template_id: 0, video_frames: 1 }],
            &templates,
            &style,
            false,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let b = render_utterance(
            &[PhoneSegment { template_id: 1, video_frames: 1 }],
            &templates,
            &style,
            false,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let l2: f64 = a
            .lip
            .data()
            .iter()
            .zip(b.lip.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        assert!(l2 > 0.5, "lip views of distinct phones too close: {l2}");
    }
}
