//! Speaker adaptation: fine-tunes a speaker-independent (SI) model on one
//! speaker's data, regularized toward the frozen SI output distribution.
//!
//! The trained objective uses soft targets q = (1-rho)*onehot + rho*P_SI
//! against the adapted model's log-probabilities, plus the usual CTC
//! term. Its gradient equals that of the interpolated form
//! (1-rho)*CE + rho*KLD(P_SI || P_SD), since the two differ only by the
//! entropy of P_SI, which is constant in the adapted parameters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::autodiff::{evaluate, gradient, Bindings, Tensor};
use crate::checkpoint::{self, Stage};
use crate::config::RunConfig;
use crate::corpus::{self, ManifestRow};
use crate::error::{Error, Result};
use crate::finetune::{build_supervised_graph, split_rows, TargetMode};
use crate::model::{lr_at, phase_steps, Adam, ParamStore};
use crate::pretrain::{accumulate_mean_grads, prepare_utterance, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::rng;
use crate::vocab::Vocabulary;

/// Floor applied to adapted-model probabilities inside the divergence.
pub const KLD_PROB_FLOOR: f64 = 1e-12;

/// Mean KL divergence (1/N) sum_n sum_k P_SI ln(P_SI / P_SD). Zero
/// reference entries contribute nothing; adapted entries are clamped to
/// `KLD_PROB_FLOOR` with a warning.
pub fn kld_loss(p_si: &Tensor, p_sd: &Tensor) -> Result<f64> {
    if p_si.shape() != p_sd.shape() || p_si.rank() != 2 {
        return Err(Error::invalid(format!(
            "KLD needs matching rank-2 shapes, got {:?} and {:?}",
            p_si.shape(),
            p_sd.shape()
        )));
    }
    let (n, _) = p_si.dims2()?;
    let mut clamped = 0usize;
    let mut total = 0.0;
    for (&si, &sd) in p_si.data().iter().zip(p_sd.data()) {
        if si == 0.0 {
            continue;
        }
        let sd = if sd < KLD_PROB_FLOOR {
            clamped += 1;
            KLD_PROB_FLOOR
        } else {
            sd
        };
        total += si * (si / sd).ln();
    }
    if clamped > 0 {
        log::warn!("KLD clamped {clamped} adapted probabilities below {KLD_PROB_FLOOR}");
    }
    Ok(total / n as f64)
}

/// Soft adaptation targets: rows (1-rho)*onehot(target) + rho*P_SI.
/// `target_ids` are the EOS-appended transcript indices.
pub fn adapt_targets(target_ids: &[usize], p_si: &Tensor, rho: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho must be in [0, 1], got {rho}")));
    }
    let (n, k) = p_si.dims2()?;
    if n != target_ids.len() {
        return Err(Error::invalid(format!(
            "{} target ids but {} reference rows",
            target_ids.len(),
            n
        )));
    }
    let mut data = p_si.map(|v| rho * v).into_data();
    for (i, &t) in target_ids.iter().enumerate() {
        if t >= k {
            return Err(Error::invalid(format!("target id {t} outside width {k}")));
        }
        data[i * k + t] += 1.0 - rho;
    }
    Tensor::new(vec![n, k], data)
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub val_manifest: PathBuf,
    pub best_val: f64,
}

struct AdaptItem {
    prepared: crate::pretrain::PreparedUtterance,
    labels: Vec<usize>,
    target_ids: Vec<usize>,
}

fn load_adapt_items(
    manifest_dir: &Path,
    rows: &[ManifestRow],
    view: corpus::View,
    vocab: &Vocabulary,
) -> Result<Vec<AdaptItem>> {
    rows.iter()
        .map(|row| {
            let prepared = prepare_utterance(manifest_dir, row, view)?;
            let labels = vocab.encode(&row.transcript)?;
            if labels.is_empty() {
                return Err(Error::invalid(format!("utterance {} has an empty transcript", row.utt_id)));
            }
            let mut target_ids = labels.clone();
            target_ids.push(vocab.eos());
            Ok(AdaptItem { prepared, labels, target_ids })
        })
        .collect()
}

/// Teacher-forced decoder posteriors of `params` for one utterance.
fn model_posteriors(
    cfg: &RunConfig,
    params: &ParamStore,
    item: &AdaptItem,
    video_side: usize,
) -> Result<Tensor> {
    let built = build_supervised_graph(
        &cfg.model,
        video_side,
        item.prepared.frames,
        &item.labels,
        0.0,
        TargetMode::Hard,
        false,
    )?;
    let mut binds = Bindings::new();
    params.bind(&mut binds, "");
    binds.set("audio", Tensor::zeros(item.prepared.audio_stacked.shape()));
    binds.set("video", item.prepared.video_channels.clone());
    let eval = evaluate(&built.graph, &binds)?;
    Ok(eval.value(built.logp).map(f64::exp))
}

/// Teacher-forced mean cross-entropy of `params` on `items`.
fn mean_ce(cfg: &RunConfig, params: &ParamStore, items: &[AdaptItem], video_side: usize) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        let built = build_supervised_graph(
            &cfg.model,
            video_side,
            item.prepared.frames,
            &item.labels,
            0.0,
            TargetMode::Hard,
            false,
        )?;
        let mut binds = Bindings::new();
        params.bind(&mut binds, "");
        binds.set("audio", Tensor::zeros(item.prepared.audio_stacked.shape()));
        binds.set("video", item.prepared.video_channels.clone());
        let eval = evaluate(&built.graph, &binds)?;
        total += eval.value(built.ce).item();
    }
    Ok(total / items.len() as f64)
}

/// Adapts the SI checkpoint to `cfg.adapt.speaker` and writes `sd.ckpt`
/// (best validation cross-entropy), a CSV log, and the speaker's held-out
/// manifest under `out_dir`.
pub fn run_adapt(
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    si_ckpt: &Path,
) -> Result<AdaptOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let a = &cfg.adapt;
    if a.speaker.is_empty() {
        return Err(Error::invalid("adapt.speaker is not set"));
    }
    let loaded = checkpoint::load(si_ckpt)?;
    if loaded.header.stage != Stage::Si {
        return Err(Error::StageMismatch {
            expected: "si".into(),
            found: loaded.header.stage.to_string(),
        });
    }
    if loaded.header.model != cfg.model {
        return Err(Error::invalid(format!(
            "checkpoint model dimensions {:?} do not match configured {:?}",
            loaded.header.model, cfg.model
        )));
    }
    let parent_digest = checkpoint::file_digest(si_ckpt)?;
    let si_params = loaded.params;
    let mut sd_params = si_params.subset("");

    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let rows = corpus::read_manifest(manifest_path)?;
    let speaker_rows: Vec<ManifestRow> = rows
        .into_iter()
        .filter(|r| r.speaker_id == a.speaker)
        .collect();
    if speaker_rows.is_empty() {
        return Err(Error::invalid(format!("no utterances for speaker {:?}", a.speaker)));
    }
    let (train_rows, val_rows) = split_rows(&speaker_rows, a.val_fraction);
    let vocab = Vocabulary::synthetic(cfg.model.n_tokens)?;
    let video_side = a.view.size();
    let train = load_adapt_items(manifest_dir, &train_rows, a.view, &vocab)?;
    let val = load_adapt_items(manifest_dir, &val_rows, a.view, &vocab)?;

    let val_manifest = out_dir.join("adapt_val_manifest.jsonl");
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

    // Reference posteriors are fixed for the whole run: the SI model
    // never moves, so compute them once per training utterance.
    let p_si_cache: Vec<Tensor> = train
        .iter()
        .map(|item| model_posteriors(cfg, &si_params, item, video_side))
        .collect::<Result<_>>()?;

    let mut opt = Adam::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
    let (warmup, constant) = phase_steps(a.steps, a.warmup_frac, a.constant_frac);
    let log_path = out_dir.join("adapt_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "step,l_adapt,l_val,lr").map_err(|e| Error::io(&log_path, e))?;

    let score_val = |params: &ParamStore| -> Result<f64> {
        if val.is_empty() {
            // No held-out data: fall back to the training utterances.
            mean_ce(cfg, params, &train, video_side)
        } else {
            mean_ce(cfg, params, &val, video_side)
        }
    };

    let mut best_val = score_val(&sd_params)?;
    let mut best_params = sd_params.subset("");
    for step in 0..a.steps {
        let mut r = rng::stream(a.seed, "adapt-step", step as u64);
        let lr = lr_at(step, a.steps, a.peak_lr, warmup, constant);
        let idx = r.gen_range(0..train.len());
        let item = &train[idx];
        let built = build_supervised_graph(
            &cfg.model,
            video_side,
            item.prepared.frames,
            &item.labels,
            a.mu,
            TargetMode::Soft,
            true,
        )?;
        let q = adapt_targets(&item.target_ids, &p_si_cache[idx], a.rho)?;
        let mut binds = Bindings::new();
        sd_params.bind(&mut binds, "");
        binds.set("audio", Tensor::zeros(item.prepared.audio_stacked.shape()));
        binds.set("video", item.prepared.video_channels.clone());
        binds.set("soft_targets", q);
        let (eval, grads) = gradient(&built.graph, &binds, built.joint)?;
        let l_adapt = eval.value(built.joint).item();

        let mut acc = BTreeMap::new();
        accumulate_mean_grads(&mut acc, grads.params(), 1);
        opt.step(&mut sd_params, &acc, lr, |_| false)?;

        let l_val = score_val(&sd_params)?;
        if l_val < best_val {
            best_val = l_val;
            best_params = sd_params.subset("");
        }
        writeln!(log, "{step},{l_adapt},{l_val},{lr}").map_err(|e| Error::io(&log_path, e))?;
    }

    let ckpt_path = out_dir.join("sd.ckpt");
    checkpoint::save(
        &ckpt_path,
        Stage::Sd,
        Some(&a.speaker),
        Some(&parent_digest),
        &cfg.digest(),
        &vocab,
        &cfg.model,
        &best_params,
    )?;
    Ok(AdaptOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        val_manifest,
        best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::corpus::{generate_corpus, CorpusSpec, Lang};
    use crate::finetune::run_finetune;
    use crate::model::ModelDims;

    #[test]
    fn kld_matches_hand_example() {
        let p_si = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let p_sd = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let v = kld_loss(&p_si, &p_sd).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kld_clamps_zero_probabilities() {
        let p_si = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let p_sd = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let v = kld_loss(&p_si, &p_sd).unwrap();
        assert!(v.is_finite());
        assert!(v > 0.0);
        assert!(kld_loss(&p_si, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn kld_agrees_with_oracle() {
        let p_rows = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]];
        let q_rows = vec![vec![0.3, 0.3, 0.4], vec![0.5, 0.25, 0.25]];
        let p_si = Tensor::new(vec![2, 3], p_rows.concat()).unwrap();
        let p_sd = Tensor::new(vec![2, 3], q_rows.concat()).unwrap();
        let mine = kld_loss(&p_si, &p_sd).unwrap();
        let reference = crate::oracle::kld_direct(&p_rows, &q_rows);
        assert!((mine - reference).abs() < 1e-12);
    }

    #[test]
    fn soft_targets_match_hand_example() {
        // rho 0.1, one position, true label first of two classes,
        // reference (0.5, 0.5), adapted model (0.9, 0.1).
        let p_si = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let q = adapt_targets(&[0], &p_si, 0.1).unwrap();
        assert!((q.data()[0] - 0.95).abs() < 1e-12);
        assert!((q.data()[1] - 0.05).abs() < 1e-12);
        let loss = -(0.95 * 0.9f64.ln() + 0.05 * 0.1f64.ln());
        assert!((loss - 0.2152).abs() < 1e-4);

        assert!(adapt_targets(&[0], &p_si, -0.1).is_err());
        assert!(adapt_targets(&[0], &p_si, 1.5).is_err());
        assert!(adapt_targets(&[5], &p_si, 0.5).is_err());
    }

    /// The soft-target objective and the interpolated CE+KLD objective
    /// differ only by a constant, so their gradients agree.
    #[test]
    fn soft_target_gradient_equals_interpolated_form() {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for &rho in &[0.0, 0.1, 0.5, 1.0] {
            let n = 3;
            let k = 4;
            let logits: Vec<f64> = (0..n * k).map(|_| r.gen_range(-2.0..2.0)).collect();
            let labels = [0usize, 3, 1];
            let p_si_rows: Vec<f64> = (0..n)
                .flat_map(|_| {
                    let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.1..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(move |v| v / s).collect::<Vec<_>>()
                })
                .collect();
            let p_si = Tensor::new(vec![n, k], p_si_rows).unwrap();

            // Soft-target form.
            let grad_soft = {
                let mut g = Graph::new();
                let w = g.param("w");
                let logp = g.log_softmax(w);
                let q_t = adapt_targets(&labels, &p_si, rho).unwrap();
                let q = g.constant(q_t);
                let m = g.mul(q, logp);
                let s = g.sum_all(m);
                let loss = g.scale(s, -1.0 / n as f64);
                let mut binds = Bindings::new();
                binds.set("w", Tensor::new(vec![n, k], logits.clone()).unwrap());
                let (_, grads) = gradient(&g, &binds, loss).unwrap();
                grads.params()["w"].clone()
            };

            // Interpolated form: (1-rho)*CE + rho*cross-entropy against
            // the reference distribution (KLD plus a constant).
            let grad_interp = {
                let mut g = Graph::new();
                let w = g.param("w");
                let logp = g.log_softmax(w);
                let picked = g.pick_per_row(logp, labels.to_vec());
                let ce_sum = g.sum_all(picked);
                let ce = g.scale(ce_sum, -(1.0 - rho) / n as f64);
                let p_c = g.constant(p_si.clone());
                let m = g.mul(p_c, logp);
                let xent_sum = g.sum_all(m);
                let xent = g.scale(xent_sum, -rho / n as f64);
                let loss = g.add(ce, xent);
                let mut binds = Bindings::new();
                binds.set("w", Tensor::new(vec![n, k], logits.clone()).unwrap());
                let (_, grads) = gradient(&g, &binds, loss).unwrap();
                grads.params()["w"].clone()
            };
            assert!(
                grad_soft.max_abs_diff(&grad_interp) < 1e-8,
                "rho {rho}: {}",
                grad_soft.max_abs_diff(&grad_interp)
            );
        }
    }

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
    fn adapt_produces_speaker_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let spec = CorpusSpec {
            num_speakers: 2,
            utterances_per_speaker: 5,
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
        cfg.finetune.steps = 2;
        cfg.adapt.steps = 2;
        cfg.adapt.speaker = "target-s01".into();

        let ft = run_finetune(&cfg, &manifest, &dir.path().join("ft"), None).unwrap();
        let out = run_adapt(&cfg, &manifest, &dir.path().join("ad"), &ft.checkpoint).unwrap();
        let sd = checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(sd.header.stage, Stage::Sd);
        assert_eq!(sd.header.speaker_id.as_deref(), Some("target-s01"));
        assert_eq!(
            sd.header.parent_digest.as_deref(),
            Some(checkpoint::file_digest(&ft.checkpoint).unwrap().as_str())
        );
        assert!(out.best_val.is_finite());
        let val = corpus::read_manifest(&out.val_manifest).unwrap();
        assert_eq!(val.len(), 1);
        assert!(val.iter().all(|r| r.speaker_id == "target-s01"));

        // Stage mismatch: handing adapt its own output must fail.
        let err = run_adapt(&cfg, &manifest, &dir.path().join("ad2"), &out.checkpoint)
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage mismatch"), "{err}");
    }

    #[test]
    fn zero_steps_keeps_si_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let spec = CorpusSpec {
            num_speakers: 1,
            utterances_per_speaker: 4,
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
        cfg.finetune.steps = 2;
        cfg.adapt.steps = 0;
        cfg.adapt.speaker = "target-s00".into();

        let ft = run_finetune(&cfg, &manifest, &dir.path().join("ft"), None).unwrap();
        let out = run_adapt(&cfg, &manifest, &dir.path().join("ad"), &ft.checkpoint).unwrap();
        let si = checkpoint::load(&ft.checkpoint).unwrap();
        let sd = checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(si.params.len(), sd.params.len());
        for (name, t) in si.params.iter() {
            assert_eq!(t.data(), sd.params.expect(name).unwrap().data(), "{name}");
        }
    }
}
