//! Deterministic synthetic audio-visual corpus.
//!
//! A corpus is fully determined by its spec: per-utterance RNG streams are
//! derived by counter, so regenerating with the same spec gives
//! byte-identical artifacts. Phone templates are keyed by a separate
//! template seed so a source-language corpus and a target-language corpus
//! can share the configured fraction of templates across independent runs.

pub mod featfile;
pub mod render;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::Vocabulary;
use render::{PhoneSegment, PhoneTemplate, SpeakerStyle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lang {
    Source,
    Target,
}

impl Lang {
    pub fn as_str(&self) -> &'static str {
        match self {
            Lang::Source => "source",
            Lang::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Lang::Source),
            "target" => Ok(Lang::Target),
            other => Err(Error::invalid(format!("language {other:?}, expected source|target"))),
        }
    }
}

/// Which visual stream a model consumes: the mouth crop or the full face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Lip,
    Face,
}

impl View {
    pub fn as_str(&self) -> &'static str {
        match self {
            View::Lip => "lip",
            View::Face => "face",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lip" => Ok(View::Lip),
            "face" => Ok(View::Face),
            other => Err(Error::invalid(format!("view {other:?}, expected lip|face"))),
        }
    }

    /// Frame side length in pixels.
    pub fn size(&self) -> usize {
        match self {
            View::Lip => render::LIP_SIZE,
            View::Face => render::FACE_SIZE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Phone inventory size P per language; phones map one-to-one onto the
    /// first P vocabulary tokens.
    pub phone_inventory: usize,
    pub lang: Lang,
    /// Fraction of phone templates shared between source and target.
    pub overlap_fraction: f64,
    /// Probability that an utterance's face view carries an occluder.
    pub occlusion_prob: f64,
    pub min_phones: usize,
    pub max_phones: usize,
    pub master_seed: u64,
    /// Keys the phone-template bank only; keep equal across the source and
    /// target runs that are meant to share templates.
    pub template_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_speakers: 6,
            utterances_per_speaker: 12,
            phone_inventory: 8,
            lang: Lang::Target,
            overlap_fraction: 0.5,
            occlusion_prob: 0.0,
            min_phones: 2,
            max_phones: 5,
            master_seed: 42,
            template_seed: 1000,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phone_inventory < 2 || self.phone_inventory > 32 {
            return Err(Error::invalid("phone inventory must be in 2..=32"));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::invalid("overlap fraction must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::invalid("occlusion probability must be in [0,1]"));
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return Err(Error::invalid("phone count range must satisfy 1 <= min <= max"));
        }
        if self.num_speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(Error::invalid("need at least one speaker and one utterance"));
        }
        Ok(())
    }

    pub fn shared_templates(&self) -> usize {
        (self.overlap_fraction * self.phone_inventory as f64).round() as usize
    }

    /// Template id rendered for `phone` in this corpus's language. Source
    /// phones use ids [0, P); target phones reuse the first `shared` of
    /// them and take fresh ids [P, 2P - shared) for the rest.
    pub fn template_id(&self, phone: usize) -> usize {
        let p = self.phone_inventory;
        match self.lang {
            Lang::Source => phone,
            Lang::Target => {
                let shared = self.shared_templates();
                if phone < shared {
                    phone
                } else {
                    p + (phone - shared)
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRow {
    pub utt_id: String,
    pub speaker_id: String,
    pub lang: String,
    pub audio_path: String,
    pub lip_path: String,
    pub face_path: String,
    pub transcript: String,
    pub num_video_frames: usize,
    pub occluded: bool,
}

/// Generates all feature files plus `manifest.jsonl` under `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let feats_dir = out_dir.join("feats");
    fs::create_dir_all(&feats_dir).map_err(|e| Error::io(&feats_dir, e))?;

    let vocab = Vocabulary::synthetic(32)?;
    let max_template = 2 * spec.phone_inventory;
    let templates: Vec<PhoneTemplate> = (0..max_template)
        .map(|id| PhoneTemplate::derive(spec.template_seed, id))
        .collect();

    let mut rows = Vec::new();
    for spk in 0..spec.num_speakers {
        let speaker_id = format!("{}-s{:02}", spec.lang.as_str(), spk);
        let style = SpeakerStyle::derive(spec.master_seed, spec.lang.as_str(), spk);
        for u in 0..spec.utterances_per_speaker {
            let global = (spk * spec.utterances_per_speaker + u) as u64;
            let mut r = rng::stream(spec.master_seed, "utt", global);
            let n_phones = r.gen_range(spec.min_phones..=spec.max_phones);
            let phones: Vec<usize> =
                (0..n_phones).map(|_| r.gen_range(0..spec.phone_inventory)).collect();
            let segments: Vec<PhoneSegment> = phones
                .iter()
                .map(|&p| PhoneSegment {
                    template_id: spec.template_id(p),
                    video_frames: r.gen_range(1..=3),
                })
                .collect();
            let occluded = spec.occlusion_prob > 0.0 && r.gen_bool(spec.occlusion_prob);
            let rendered = render::render_utterance(&segments, &templates, &style, occluded, &mut r);

            let utt_id = format!("{speaker_id}_u{u:03}");
            let audio_rel = format!("feats/{utt_id}.audio.avtn");
            let lip_rel = format!("feats/{utt_id}.lip.avtn");
            let face_rel = format!("feats/{utt_id}.face.avtn");
            featfile::write_tensor(&out_dir.join(&audio_rel), &rendered.audio)?;
            featfile::write_tensor(&out_dir.join(&lip_rel), &rendered.lip)?;
            featfile::write_tensor(&out_dir.join(&face_rel), &rendered.face)?;

            rows.push(ManifestRow {
                utt_id,
                speaker_id: speaker_id.clone(),
                lang: spec.lang.as_str().to_string(),
                audio_path: audio_rel,
                lip_path: lip_rel,
                face_path: face_rel,
                transcript: vocab.decode(&phones),
                num_video_frames: rendered.lip.shape()[0],
                occluded,
            });
        }
    }

    write_manifest(&out_dir.join("manifest.jsonl"), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Other(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::Other(format!(
            "{}:{}: {e}",
            path.display(),
            i + 1
        )))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loaded feature tensors of one utterance.
pub struct UtteranceData {
    pub row: ManifestRow,
    pub audio: crate::autodiff::Tensor,
    pub lip: crate::autodiff::Tensor,
    pub face: crate::autodiff::Tensor,
}

/// Reads the three feature files referenced by a manifest row. Paths are
/// relative to the manifest's directory.
pub fn load_utterance(manifest_dir: &Path, row: &ManifestRow) -> Result<UtteranceData> {
    let resolve = |rel: &str| -> PathBuf { manifest_dir.join(rel) };
    Ok(UtteranceData {
        row: row.clone(),
        audio: featfile::read_tensor(&resolve(&row.audio_path))?,
        lip: featfile::read_tensor(&resolve(&row.lip_path))?,
        face: featfile::read_tensor(&resolve(&row.face_path))?,
    })
}

/// Reads only the audio file and the selected visual stream.
pub fn load_audio_and_view(
    manifest_dir: &Path,
    row: &ManifestRow,
    view: View,
) -> Result<(crate::autodiff::Tensor, crate::autodiff::Tensor)> {
    let video_rel = match view {
        View::Lip => &row.lip_path,
        View::Face => &row.face_path,
    };
    Ok((
        featfile::read_tensor(&manifest_dir.join(&row.audio_path))?,
        featfile::read_tensor(&manifest_dir.join(video_rel))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(lang: Lang, seed: u64) -> CorpusSpec {
        CorpusSpec {
            num_speakers: 2,
            utterances_per_speaker: 3,
            phone_inventory: 6,
            lang,
            overlap_fraction: 0.5,
            occlusion_prob: 0.0,
            min_phones: 2,
            max_phones: 4,
            master_seed: seed,
            template_seed: 1000,
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = small_spec(Lang::Source, 42);
        let rows1 = generate_corpus(&spec, d1.path()).unwrap();
        let rows2 = generate_corpus(&spec, d2.path()).unwrap();
        assert_eq!(rows1, rows2);
        let m1 = fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
        for row in &rows1 {
            for rel in [&row.audio_path, &row.lip_path, &row.face_path] {
                let b1 = fs::read(d1.path().join(rel)).unwrap();
                let b2 = fs::read(d2.path().join(rel)).unwrap();
                assert_eq!(b1, b2, "{rel} differs between runs");
            }
        }
    }

    #[test]
    fn row_count_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(Lang::Source, 7);
        let rows = generate_corpus(&spec, dir.path()).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| !r.occluded), "q=0 must mean no occlusions");
        let mut occluding = small_spec(Lang::Source, 7);
        occluding.occlusion_prob = 1.0;
        let dir2 = tempfile::tempdir().unwrap();
        let rows2 = generate_corpus(&occluding, dir2.path()).unwrap();
        assert!(rows2.iter().all(|r| r.occluded));
    }

    #[test]
    fn manifest_roundtrip_and_loading() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(Lang::Target, 11);
        let rows = generate_corpus(&spec, dir.path()).unwrap();
        let back = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(rows, back);
        let utt = load_utterance(dir.path(), &back[0]).unwrap();
        assert_eq!(utt.audio.shape()[0], 4 * utt.lip.shape()[0]);
        assert_eq!(utt.lip.shape()[0], back[0].num_video_frames);
        assert_eq!(utt.face.shape()[1..], [24, 24]);
    }

    #[test]
    fn languages_share_exactly_the_configured_templates() {
        let src = small_spec(Lang::Source, 1);
        let tgt = small_spec(Lang::Target, 2);
        let src_ids: Vec<usize> = (0..6).map(|p| src.template_id(p)).collect();
        let tgt_ids: Vec<usize> = (0..6).map(|p| tgt.template_id(p)).collect();
        let shared = src_ids.iter().filter(|id| tgt_ids.contains(id)).count();
        assert_eq!(shared, 3);
        // Unshared target templates never collide with source ids 0..6.
        assert_eq!(tgt_ids[3..], [6, 7, 8]);
    }

    #[test]
    fn transcripts_encode_into_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(Lang::Source, 13);
        let rows = generate_corpus(&spec, dir.path()).unwrap();
        let vocab = Vocabulary::synthetic(6).unwrap();
        for row in rows {
            let ids = vocab.encode(&row.transcript).unwrap();
            assert!(!ids.is_empty());
            assert!(ids.iter().all(|&i| i < 6));
        }
    }
}
