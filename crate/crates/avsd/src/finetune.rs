//! Supervised fine-tuning: an attention decoder and a CTC projection on
//! top of the (optionally pretrained) encoder, trained with the joint
//! objective ce + mu * ctc.
//!
//! Fine-tuned models are lipreaders: the audio branch is fed zeros and
//! its features are multiplied by zero, so only the visual stream carries
//! information. CTC is skipped per-utterance (with a warning) when the
//! label sequence cannot fit the frame count.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::autodiff::{gradient, Bindings, Graph, NodeId, Tensor};
use crate::checkpoint::{self, Stage};
use crate::config::RunConfig;
use crate::corpus::{self, ManifestRow, View};
use crate::ctc::min_frames;
use crate::error::{Error, Result};
use crate::model::{
    init_decoder_params, init_encoder_params, lr_at, phase_steps, Adam, ModelDims, NetBuilder,
    ParamStore,
};
use crate::pretrain::{prepare_utterance, PreparedUtterance, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::rng;
use crate::vocab::Vocabulary;

/// Joint objective. A skipped CTC term contributes nothing.
pub fn joint_loss(ce: f64, ctc: Option<f64>, mu: f64) -> f64 {
    ce + mu * ctc.unwrap_or(0.0)
}

/// How the decoder distribution is supervised.
pub enum TargetMode {
    /// Standard cross-entropy against the EOS-appended transcript.
    Hard,
    /// Soft targets bound at evaluation time as "soft_targets"
    /// [N, dec_width]; rows must be distributions.
    Soft,
}

/// Nodes of one supervised training graph. Bind the parameter store under
/// "", plus "audio" (zeros), "video", and for `TargetMode::Soft` the
/// "soft_targets" matrix.
pub struct SupervisedGraph {
    pub graph: Graph,
    /// Decoder log-probabilities [N, dec_width] under teacher forcing.
    pub logp: NodeId,
    pub ce: NodeId,
    /// Frame-level CTC posteriors and negative log-likelihood; absent
    /// when the term is skipped.
    pub ctc_post: Option<NodeId>,
    pub ctc_nll: Option<NodeId>,
    pub joint: NodeId,
}

/// Builds encoder + decoder + CTC head for one utterance. `labels` is the
/// encoded transcript (no specials); CTC is included unless infeasible
/// for `t_frames` or `with_ctc` is false.
pub fn build_supervised_graph(
    dims: &ModelDims,
    video_side: usize,
    t_frames: usize,
    labels: &[usize],
    mu: f64,
    mode: TargetMode,
    with_ctc: bool,
) -> Result<SupervisedGraph> {
    if labels.is_empty() {
        return Err(Error::invalid("empty transcript"));
    }
    let vocab = Vocabulary::synthetic(dims.n_tokens)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= dims.n_tokens) {
        return Err(Error::invalid(format!(
            "label {bad} outside vocabulary of {} tokens",
            dims.n_tokens
        )));
    }
    let mut g = Graph::new();
    let mut b = NetBuilder::new(&mut g, dims);
    let audio = b.g.data_input("audio");
    let video = b.g.data_input("video");
    let f_a = b.audio_frontend(audio);
    let f_a = b.g.scale(f_a, 0.0);
    let f_v = b.video_frontend(video, video_side, video_side);
    let fused = b.fusion(f_a, f_v);
    let (enc_out, _) = b.encoder(fused, "", true);

    let mut input_ids = vec![vocab.bos()];
    input_ids.extend_from_slice(labels);
    let mut target_ids = labels.to_vec();
    target_ids.push(vocab.eos());
    let n = target_ids.len();

    let logits = b.decoder_logits(enc_out, &input_ids);
    let logp = g.log_softmax(logits);
    let ce = match mode {
        TargetMode::Hard => {
            let picked = g.pick_per_row(logp, target_ids);
            let sum = g.sum_all(picked);
            g.scale(sum, -1.0 / n as f64)
        }
        TargetMode::Soft => {
            let q = g.data_input("soft_targets");
            let weighted = g.mul(q, logp);
            let sum = g.sum_all(weighted);
            g.scale(sum, -1.0 / n as f64)
        }
    };

    let feasible = min_frames(labels) <= t_frames;
    let (ctc_post, ctc_nll, joint) = if with_ctc && feasible && mu > 0.0 {
        let mut b = NetBuilder::new(&mut g, dims);
        let post = b.ctc_posteriors(enc_out);
        let nll = g.ctc_loss(post, labels.to_vec(), vocab.blank());
        let scaled = g.scale(nll, mu);
        let joint = g.add(ce, scaled);
        (Some(post), Some(nll), joint)
    } else {
        if with_ctc && !feasible && mu > 0.0 {
            log::warn!(
                "CTC infeasible for {} labels over {} frames; term skipped",
                labels.len(),
                t_frames
            );
        }
        (None, None, ce)
    };
    Ok(SupervisedGraph {
        graph: g,
        logp,
        ce,
        ctc_post,
        ctc_nll,
        joint,
    })
}

/// Loads a pretraining checkpoint and verifies it covers every encoder
/// tensor the target dimensions require.
pub fn init_from_pretrained(path: &Path, dims: &ModelDims) -> Result<ParamStore> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.header.stage != Stage::Pretrain {
        return Err(Error::StageMismatch {
            expected: "pretrain".into(),
            found: ckpt.header.stage.to_string(),
        });
    }
    if ckpt.header.model != *dims {
        return Err(Error::invalid(format!(
            "checkpoint model dimensions {:?} do not match configured {:?}",
            ckpt.header.model, dims
        )));
    }
    let mut expected = ParamStore::new();
    init_encoder_params(&mut expected, 0, dims);
    let mut out = ParamStore::new();
    for (name, t) in expected.iter() {
        let loaded = ckpt.params.expect(name)?;
        if loaded.shape() != t.shape() {
            return Err(Error::invalid(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        out.set(name, loaded.clone());
    }
    Ok(out)
}

/// Groups rows per speaker and holds out the trailing `val_fraction` of
/// each speaker's utterances. Within a speaker, manifest order is kept.
pub fn split_rows(rows: &[ManifestRow], val_fraction: f64) -> (Vec<ManifestRow>, Vec<ManifestRow>) {
    let mut by_speaker: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
    for row in rows {
        by_speaker.entry(&row.speaker_id).or_default().push(row);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, group) in by_speaker {
        let n = group.len();
        let mut n_val = (n as f64 * val_fraction).round() as usize;
        n_val = n_val.min(n.saturating_sub(1));
        let cut = n - n_val;
        for (i, row) in group.into_iter().enumerate() {
            if i < cut {
                train.push(row.clone());
            } else {
                val.push(row.clone());
            }
        }
    }
    (train, val)
}

/// Keeps the leading `fraction` of each speaker's rows (at least one).
pub fn take_fraction(rows: &[ManifestRow], fraction: f64) -> Vec<ManifestRow> {
    if fraction >= 1.0 {
        return rows.to_vec();
    }
    let mut by_speaker: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
    for row in rows {
        by_speaker.entry(&row.speaker_id).or_default().push(row);
    }
    let mut out = Vec::new();
    for (_, group) in by_speaker {
        let keep = ((group.len() as f64 * fraction).ceil() as usize).max(1);
        for row in group.into_iter().take(keep) {
            out.push(row.clone());
        }
    }
    out
}

pub struct FinetuneOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub val_manifest: PathBuf,
    pub final_joint: f64,
}

struct TrainItem {
    prepared: PreparedUtterance,
    labels: Vec<usize>,
}

fn load_items(
    manifest_dir: &Path,
    rows: &[ManifestRow],
    view: View,
    vocab: &Vocabulary,
) -> Result<Vec<TrainItem>> {
    rows.iter()
        .map(|row| {
            let prepared = prepare_utterance(manifest_dir, row, view)?;
            let labels = vocab.encode(&row.transcript)?;
            if labels.is_empty() {
                return Err(Error::invalid(format!("utterance {} has an empty transcript", row.utt_id)));
            }
            Ok(TrainItem { prepared, labels })
        })
        .collect()
}

/// Runs fine-tuning and writes `si.ckpt`, a per-step CSV log, and the
/// held-out validation manifest under `out_dir`.
pub fn run_finetune(
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    init: Option<&Path>,
) -> Result<FinetuneOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let rows = corpus::read_manifest(manifest_path)?;
    if rows.is_empty() {
        return Err(Error::invalid("manifest has no utterances"));
    }
    let f = &cfg.finetune;
    let dims = &cfg.model;
    let vocab = Vocabulary::synthetic(dims.n_tokens)?;

    let (train_rows, val_rows) = split_rows(&rows, f.val_fraction);
    let train_rows = take_fraction(&train_rows, f.data_fraction);
    if train_rows.is_empty() {
        return Err(Error::invalid("no training utterances after the validation split"));
    }
    let val_manifest = out_dir.join("val_manifest.jsonl");
    let val_abs: Vec<ManifestRow> = val_rows
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.audio_path = manifest_dir.join(&r.audio_path).display().to_string();
            r.lip_path = manifest_dir.join(&r.lip_path).display().to_string();
            r.face_path = manifest_dir.join(&r.face_path).display().to_string();
            r
        })
        .collect();
    corpus::write_manifest(&val_manifest, &val_abs)?;

    let items = load_items(manifest_dir, &train_rows, f.view, &vocab)?;

    let mut params = match init {
        Some(path) => init_from_pretrained(path, dims)?,
        None => {
            let mut p = ParamStore::new();
            init_encoder_params(&mut p, f.seed, dims);
            p
        }
    };
    init_decoder_params(&mut params, f.seed, dims);

    let freeze_steps = if f.transfer {
        if f.freeze_steps != 0 {
            log::info!("transfer mode: overriding freeze_steps {} with 0", f.freeze_steps);
        }
        0
    } else {
        f.freeze_steps
    };

    let mut opt = Adam::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
    let (warmup, constant) = phase_steps(f.steps, f.warmup_frac, f.constant_frac);
    let log_path = out_dir.join("finetune_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "step,l_ce,l_ctc,l_si,lr,frozen").map_err(|e| Error::io(&log_path, e))?;

    let video_side = f.view.size();
    let mut final_joint = f64::NAN;
    for step in 0..f.steps {
        let mut r = rng::stream(f.seed, "finetune-step", step);
        let lr = lr_at(step, f.steps, f.peak_lr, warmup, constant);
        let frozen_now = step < freeze_steps;
        let mut acc = BTreeMap::new();
        let mut ce_sum = 0.0;
        let mut ctc_sum = 0.0;
        let mut ctc_count = 0usize;
        let mut joint_sum = 0.0;
        for _ in 0..f.utts_per_step {
            let item = &items[r.gen_range(0..items.len())];
            let built = build_supervised_graph(
                dims,
                video_side,
                item.prepared.frames,
                &item.labels,
                f.mu,
                TargetMode::Hard,
                true,
            )?;
            let mut binds = Bindings::new();
            params.bind(&mut binds, "");
            binds.set("audio", Tensor::zeros(item.prepared.audio_stacked.shape()));
            binds.set("video", item.prepared.video_channels.clone());
            let (eval, grads) = gradient(&built.graph, &binds, built.joint)?;
            ce_sum += eval.value(built.ce).item();
            if let Some(nll) = built.ctc_nll {
                ctc_sum += eval.value(nll).item();
                ctc_count += 1;
            }
            joint_sum += eval.value(built.joint).item();
            crate::pretrain::accumulate_mean_grads(&mut acc, grads.params(), f.utts_per_step);
        }
        opt.step(&mut params, &acc, lr, |name| {
            frozen_now && (name.starts_with("front.") || name.starts_with("enc."))
        })?;
        let l_ce = ce_sum / f.utts_per_step as f64;
        let l_ctc = if ctc_count > 0 { ctc_sum / ctc_count as f64 } else { f64::NAN };
        let l_si = joint_sum / f.utts_per_step as f64;
        final_joint = l_si;
        writeln!(log, "{step},{l_ce},{l_ctc},{l_si},{lr},{}", frozen_now as u8)
            .map_err(|e| Error::io(&log_path, e))?;
    }

    let ckpt_path = out_dir.join("si.ckpt");
    checkpoint::save(
        &ckpt_path,
        Stage::Si,
        None,
        None,
        &cfg.digest(),
        &vocab,
        dims,
        &params,
    )?;
    Ok(FinetuneOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        val_manifest,
        final_joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, Lang};
    use crate::oracle;
    use crate::pretrain::run_pretrain;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            width: 8,
            enc_blocks: 2,
            dec_blocks: 1,
            heads: 2,
            ffn: 12,
            n_tokens: 4,
            audio_stacked: 104,
            conv_pos_kernel: 3,
        }
    }

    #[test]
    fn joint_loss_combines_terms() {
        assert!((joint_loss(1.0, Some(2.0), 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(joint_loss(1.5, None, 0.1), 1.5);
        assert_eq!(joint_loss(1.5, Some(9.0), 0.0), 1.5);
    }

    #[test]
    fn supervised_graph_rejects_bad_transcripts() {
        let dims = tiny_dims();
        assert!(build_supervised_graph(&dims, 16, 5, &[], 0.1, TargetMode::Hard, true).is_err());
        assert!(build_supervised_graph(&dims, 16, 5, &[9], 0.1, TargetMode::Hard, true).is_err());
    }

    #[test]
    fn infeasible_ctc_is_skipped() {
        let dims = tiny_dims();
        // 3 repeated labels need 5 frames; only 2 available.
        let built = build_supervised_graph(&dims, 16, 2, &[1, 1, 1], 0.1, TargetMode::Hard, true).unwrap();
        assert!(built.ctc_nll.is_none());
        assert_eq!(built.joint, built.ce);
        let with = build_supervised_graph(&dims, 16, 8, &[1, 1, 1], 0.1, TargetMode::Hard, true).unwrap();
        assert!(with.ctc_nll.is_some());
    }

    fn demo_binds(params: &ParamStore, t: usize) -> Bindings {
        let mut binds = Bindings::new();
        params.bind(&mut binds, "");
        binds.set("audio", Tensor::zeros(&[t, 104]));
        binds.set(
            "video",
            Tensor::new(
                vec![t, 768],
                (0..t * 768).map(|i| (i as f64 * 0.015).sin() * 0.2).collect(),
            )
            .unwrap(),
        );
        binds
    }

    #[test]
    fn joint_gradient_matches_fd() {
        let dims = tiny_dims();
        let mut params = ParamStore::new();
        init_encoder_params(&mut params, 11, &dims);
        init_decoder_params(&mut params, 12, &dims);
        let t = 4;
        let built =
            build_supervised_graph(&dims, 16, t, &[0, 2], 0.1, TargetMode::Hard, true).unwrap();
        assert!(built.ctc_nll.is_some());
        let binds = demo_binds(&params, t);
        oracle::assert_grads_match_fd(&built.graph, &binds, built.joint, 1e-4);
    }

    #[test]
    fn stage_and_tensor_checks_on_init() {
        let dir = tempfile::tempdir().unwrap();
        let dims = tiny_dims();
        let vocab = Vocabulary::synthetic(dims.n_tokens).unwrap();
        let mut params = ParamStore::new();
        init_encoder_params(&mut params, 1, &dims);

        let si_path = dir.path().join("si.ckpt");
        checkpoint::save(&si_path, Stage::Si, None, None, "d", &vocab, &dims, &params).unwrap();
        let err = init_from_pretrained(&si_path, &dims).unwrap_err().to_string();
        assert!(err.contains("pretrain"), "{err}");

        let mut missing = params.subset("");
        missing.remove("enc.b0.attn.q.w");
        let bad_path = dir.path().join("missing.ckpt");
        checkpoint::save(&bad_path, Stage::Pretrain, None, None, "d", &vocab, &dims, &missing).unwrap();
        let err = init_from_pretrained(&bad_path, &dims).unwrap_err().to_string();
        assert!(err.contains("enc.b0.attn.q.w"), "{err}");

        let good_path = dir.path().join("pre.ckpt");
        checkpoint::save(&good_path, Stage::Pretrain, None, None, "d", &vocab, &dims, &params).unwrap();
        let loaded = init_from_pretrained(&good_path, &dims).unwrap();
        assert_eq!(loaded.len(), params.len());
    }

    #[test]
    fn split_holds_out_trailing_rows_per_speaker() {
        let mk = |spk: &str, u: usize| ManifestRow {
            utt_id: format!("{spk}_u{u:03}"),
            speaker_id: spk.into(),
            lang: "target".into(),
            audio_path: String::new(),
            lip_path: String::new(),
            face_path: String::new(),
            transcript: "ab".into(),
            num_video_frames: 5,
            occluded: false,
        };
        let rows: Vec<ManifestRow> = (0..5)
            .map(|u| mk("s0", u))
            .chain((0..5).map(|u| mk("s1", u)))
            .collect();
        let (train, val) = split_rows(&rows, 0.2);
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        assert!(val.iter().any(|r| r.utt_id == "s0_u004"));
        assert!(val.iter().any(|r| r.utt_id == "s1_u004"));

        let cut = take_fraction(&train, 0.5);
        assert_eq!(cut.len(), 4);
        // Never drops a speaker entirely.
        let tiny = take_fraction(&rows, 0.01);
        assert_eq!(tiny.len(), 2);
    }

    #[test]
    fn finetune_runs_from_scratch_and_from_pretrain() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let spec = CorpusSpec {
            num_speakers: 2,
            utterances_per_speaker: 3,
            phone_inventory: 4,
            lang: Lang::Target,
            min_phones: 1,
            max_phones: 2,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec, &corpus_dir).unwrap();
        let manifest = corpus_dir.join("manifest.jsonl");

        let mut cfg = RunConfig::default();
        cfg.corpus = spec;
        cfg.model = tiny_dims();
        cfg.pretrain.steps = 2;
        cfg.pretrain.target_layers = 2;
        cfg.finetune.steps = 3;
        cfg.finetune.freeze_steps = 1;

        let pre = run_pretrain(&cfg, &manifest, &dir.path().join("pre")).unwrap();
        let out = run_finetune(&cfg, &manifest, &dir.path().join("ft"), Some(&pre.checkpoint)).unwrap();
        assert!(out.final_joint.is_finite());
        let loaded = checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(loaded.header.stage, Stage::Si);
        assert!(loaded.params.contains("dec.out.w"));
        assert!(loaded.params.contains("ctc.out.w"));

        let val = corpus::read_manifest(&out.val_manifest).unwrap();
        assert_eq!(val.len(), 2); // one held-out utterance per speaker
        let csv = std::fs::read_to_string(&out.log).unwrap();
        assert!(csv.lines().next().unwrap().contains("frozen"));
        assert_eq!(csv.lines().count(), 1 + 3);

        let scratch = run_finetune(&cfg, &manifest, &dir.path().join("scratch"), None).unwrap();
        assert!(scratch.final_joint.is_finite());
    }
}
