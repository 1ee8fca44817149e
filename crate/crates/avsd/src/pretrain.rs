//! Masked self-distillation pretraining of the shared audio-visual
//! encoder.
//!
//! Each step the student sees corrupted inputs (span-masked features,
//! modality dropout, noisy audio) while an EMA teacher sees the clean
//! utterance. The loss regresses student outputs onto instance-normalized
//! averages of the teacher's topmost block outputs, summed over masked
//! positions only. Teacher weights are never touched by the optimizer:
//! they live outside the trainable set and move only through `ema_update`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient, Bindings, Graph, NodeId, Tensor};
use crate::checkpoint::{self, Stage};
use crate::config::{PretrainConfig, RunConfig};
use crate::corpus::{self, render, ManifestRow};
use crate::error::{Error, Result};
use crate::frontend::{
    add_noise, draw_modality, make_span_mask, stack_audio_frames, video_to_channels, ModalityChoice,
};
use crate::model::{init_encoder_params, lr_at, phase_steps, Adam, ModelDims, NetBuilder, ParamStore};
use crate::rng;
use crate::vocab::Vocabulary;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-8;

/// Teacher decay at `step`: linear from `ema_start` to `ema_end` over
/// `ema_warmup_steps`, constant afterwards.
pub fn lambda_at(step: u64, cfg: &PretrainConfig) -> f64 {
    if cfg.ema_warmup_steps == 0 || step >= cfg.ema_warmup_steps {
        return cfg.ema_end;
    }
    let frac = step as f64 / cfg.ema_warmup_steps as f64;
    cfg.ema_start + (cfg.ema_end - cfg.ema_start) * frac
}

/// In-place EMA: every teacher tensor becomes λ·teacher + (1−λ)·student.
/// The student must hold a same-shaped tensor for every teacher name.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, lambda: f64) -> Result<()> {
    for (name, t) in teacher.iter_mut() {
        let s = student.expect(name)?;
        if s.shape() != t.shape() {
            return Err(Error::invalid(format!(
                "EMA shape mismatch for {name}: teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = lambda * *tv + (1.0 - lambda) * sv;
        }
    }
    Ok(())
}

/// Sorted union of the two masked-index sets.
pub fn union_rows(audio: &[usize], video: &[usize]) -> Vec<usize> {
    let mut rows: Vec<usize> = audio.iter().chain(video.iter()).copied().collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

/// Squared-error regression restricted to `rows`: returns
/// (mean over selected positions, raw sum). Positions outside `rows`
/// never enter the loss.
pub fn masked_regression(g: &mut Graph, x: NodeId, y: NodeId, rows: &[usize]) -> (NodeId, NodeId) {
    assert!(!rows.is_empty(), "caller must skip steps with an empty mask union");
    let xs = g.gather_rows(x, rows.to_vec());
    let ys = g.gather_rows(y, rows.to_vec());
    let d = g.sub(xs, ys);
    let sq = g.mul(d, d);
    let raw = g.sum_all(sq);
    let mean = g.scale(raw, 1.0 / rows.len() as f64);
    (mean, raw)
}

/// Per-step corruption decisions, drawn before graph construction.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    pub audio: Vec<usize>,
    pub video: Vec<usize>,
    pub choice: ModalityChoice,
}

impl MaskPlan {
    pub fn draw(t: usize, cfg: &PretrainConfig, r: &mut ChaCha8Rng) -> MaskPlan {
        let audio = make_span_mask(t, cfg.audio_mask_coverage, cfg.audio_mask_span, r);
        let video = make_span_mask(t, cfg.video_mask_coverage, cfg.video_mask_span, r);
        let choice = draw_modality(cfg.p_m, cfg.p_a, r);
        MaskPlan { audio, video, choice }
    }

    pub fn union(&self) -> Vec<usize> {
        union_rows(&self.audio, &self.video)
    }
}

/// Node handles of one pretraining step graph. Bind "audio.student",
/// "video.student" (corrupted-side inputs), "audio.teacher",
/// "video.teacher" (clean), the trainable store under "", and the teacher
/// encoder store under "tch.".
pub struct PretrainGraph {
    pub graph: Graph,
    /// Optimizer objective: raw sum divided by the masked-position count.
    pub loss_mean: NodeId,
    /// Sum over masked positions, the quantity reported in logs.
    pub loss_raw: NodeId,
    /// Stop-gradient distillation target, for inspection in tests.
    pub target: NodeId,
    /// The same target before the stop-gradient; receives no gradient.
    pub target_pre: NodeId,
}

pub fn build_pretrain_graph(
    dims: &ModelDims,
    video_side: usize,
    plan: &MaskPlan,
    target_layers: usize,
    instance_norm_over_time: bool,
) -> PretrainGraph {
    let mut g = Graph::new();
    let mut b = NetBuilder::new(&mut g, dims);

    let audio_s = b.g.data_input("audio.student");
    let video_s = b.g.data_input("video.student");
    let mut f_a = b.audio_frontend(audio_s);
    let mut f_v = b.video_frontend(video_s, video_side, video_side);
    match plan.choice {
        ModalityChoice::Both => {
            f_a = b.corrupt_with_mask_embedding(f_a, "audio", plan.audio.clone());
            f_v = b.corrupt_with_mask_embedding(f_v, "video", plan.video.clone());
        }
        ModalityChoice::AudioOnly => {
            f_a = b.corrupt_with_mask_embedding(f_a, "audio", plan.audio.clone());
            f_v = b.g.scale(f_v, 0.0);
        }
        ModalityChoice::VideoOnly => {
            f_a = b.g.scale(f_a, 0.0);
            f_v = b.corrupt_with_mask_embedding(f_v, "video", plan.video.clone());
        }
    }
    let fused_s = b.fusion(f_a, f_v);
    let (student_out, _) = b.encoder(fused_s, "", true);

    let audio_t = b.g.data_input("audio.teacher");
    let video_t = b.g.data_input("video.teacher");
    let t_a = b.audio_frontend(audio_t);
    let t_v = b.video_frontend(video_t, video_side, video_side);
    let fused_t = b.fusion(t_a, t_v);
    let (_, t_blocks) = b.encoder(fused_t, "tch.", false);
    let t_blocks = if instance_norm_over_time {
        t_blocks
    } else {
        // Per-frame normalization: transpose so channels become rows.
        t_blocks
            .iter()
            .map(|&n| {
                let t = b.g.transpose(n);
                let normed = b.g.instance_norm(t, crate::model::net::LN_EPS);
                b.g.transpose(normed)
            })
            .collect()
    };
    let (target, target_pre) = if instance_norm_over_time {
        b.teacher_targets(&t_blocks, target_layers)
    } else {
        // Already normalized above; average and stop the gradient.
        let picked = &t_blocks[t_blocks.len() - target_layers..];
        let mut acc = picked[0];
        for &n in &picked[1..] {
            acc = b.g.add(acc, n);
        }
        let mean = b.g.scale(acc, 1.0 / target_layers as f64);
        (b.g.stop_grad(mean), mean)
    };

    let rows = plan.union();
    let (loss_mean, loss_raw) = masked_regression(&mut g, student_out, target, &rows);
    PretrainGraph {
        graph: g,
        loss_mean,
        loss_raw,
        target,
        target_pre,
    }
}

/// Clean per-utterance inputs, precomputed once.
pub struct PreparedUtterance {
    pub audio_stacked: Tensor,
    pub video_channels: Tensor,
    pub frames: usize,
}

pub fn prepare_utterance(
    manifest_dir: &Path,
    row: &ManifestRow,
    view: corpus::View,
) -> Result<PreparedUtterance> {
    let (audio, video) = corpus::load_audio_and_view(manifest_dir, row, view)?;
    let audio_stacked = stack_audio_frames(&audio, render::STACK_FACTOR)?;
    let video_channels = video_to_channels(&video)?;
    let frames = audio_stacked.shape()[0];
    if frames != video_channels.shape()[0] {
        return Err(Error::invalid(format!(
            "utterance {}: {} stacked audio frames vs {} video frames",
            row.utt_id,
            frames,
            video_channels.shape()[0]
        )));
    }
    Ok(PreparedUtterance {
        audio_stacked,
        video_channels,
        frames,
    })
}

fn draw_snr(cfg: &PretrainConfig, r: &mut ChaCha8Rng) -> f64 {
    if cfg.snr_db_max > cfg.snr_db_min {
        r.gen_range(cfg.snr_db_min..cfg.snr_db_max)
    } else {
        cfg.snr_db_min
    }
}

/// Accumulates `grads / count` into `acc`; calling once per utterance
/// with the batch size yields the batch-mean gradient.
pub fn accumulate_mean_grads(
    acc: &mut std::collections::BTreeMap<String, Tensor>,
    grads: &std::collections::BTreeMap<String, Tensor>,
    count: usize,
) {
    let w = 1.0 / count as f64;
    for (name, g) in grads {
        match acc.get_mut(name) {
            Some(a) => {
                for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                    *av += w * gv;
                }
            }
            None => {
                acc.insert(name.clone(), g.map(|v| w * v));
            }
        }
    }
}

pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss_raw: f64,
}

/// Runs the full pretraining loop and writes `pretrain.ckpt` plus a
/// per-step CSV log under `out_dir`.
pub fn run_pretrain(cfg: &RunConfig, manifest_path: &Path, out_dir: &Path) -> Result<PretrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let rows = corpus::read_manifest(manifest_path)?;
    if rows.is_empty() {
        return Err(Error::invalid("manifest has no utterances"));
    }
    let p = &cfg.pretrain;
    let dims = &cfg.model;
    let video_side = p.view.size();

    let prepared: Vec<PreparedUtterance> = rows
        .iter()
        .map(|row| prepare_utterance(manifest_dir, row, p.view))
        .collect::<Result<_>>()?;

    let mut params = ParamStore::new();
    init_encoder_params(&mut params, p.seed, dims);
    let mut teacher = params.subset("enc.");
    let mut opt = Adam::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
    let (warmup, constant) = phase_steps(p.steps, p.warmup_frac, p.constant_frac);

    let log_path = out_dir.join("pretrain_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "step,l_reg,lambda,lr").map_err(|e| Error::io(&log_path, e))?;

    let mut final_loss_raw = f64::NAN;
    for step in 0..p.steps {
        let mut r = rng::stream(p.seed, "pretrain-step", step);
        let lr = lr_at(step, p.steps, p.peak_lr, warmup, constant);
        let mut acc = std::collections::BTreeMap::new();
        let mut raw_sum = 0.0;
        let mut used = 0usize;
        for _ in 0..p.utts_per_step {
            let utt = &prepared[r.gen_range(0..prepared.len())];
            let plan = MaskPlan::draw(utt.frames, p, &mut r);
            if plan.union().is_empty() {
                log::warn!("step {step}: empty mask union, skipping utterance");
                continue;
            }
            let noisy_audio = add_noise(&utt.audio_stacked, p.noise_prob, draw_snr(p, &mut r), &mut r);

            let built = build_pretrain_graph(dims, video_side, &plan, p.target_layers, p.instance_norm_over_time);
            let mut binds = Bindings::new();
            params.bind(&mut binds, "");
            teacher.bind(&mut binds, "tch.");
            binds.set("audio.student", noisy_audio);
            binds.set("video.student", utt.video_channels.clone());
            binds.set("audio.teacher", utt.audio_stacked.clone());
            binds.set("video.teacher", utt.video_channels.clone());

            let (eval, grads) = gradient(&built.graph, &binds, built.loss_mean)?;
            raw_sum += eval.value(built.loss_raw).item();
            accumulate_mean_grads(&mut acc, grads.params(), p.utts_per_step);
            used += 1;
        }
        if used == 0 {
            log::warn!("step {step}: no usable utterances, optimizer step skipped");
            continue;
        }
        opt.step(&mut params, &acc, lr, |_| false)?;
        let lambda = lambda_at(step, p);
        ema_update(&mut teacher, &params.subset("enc."), lambda)?;
        let l_reg = raw_sum / used as f64;
        final_loss_raw = l_reg;
        writeln!(log, "{step},{l_reg},{lambda},{lr}").map_err(|e| Error::io(&log_path, e))?;
    }

    let ckpt_path = out_dir.join("pretrain.ckpt");
    let vocab = Vocabulary::synthetic(dims.n_tokens)?;
    checkpoint::save(
        &ckpt_path,
        Stage::Pretrain,
        None,
        None,
        &cfg.digest(),
        &vocab,
        dims,
        &params,
    )?;
    Ok(PretrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        final_loss_raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::evaluate;
    use crate::corpus::{generate_corpus, CorpusSpec, Lang, View};

    fn tiny_pretrain_cfg() -> PretrainConfig {
        PretrainConfig {
            steps: 3,
            ema_warmup_steps: 10,
            target_layers: 2,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn lambda_schedule_endpoints() {
        let cfg = PretrainConfig {
            ema_start: 0.999,
            ema_end: 0.9999,
            ema_warmup_steps: 30_000,
            ..PretrainConfig::default()
        };
        assert_eq!(lambda_at(0, &cfg), 0.999);
        assert_eq!(lambda_at(30_000, &cfg), 0.9999);
        assert_eq!(lambda_at(99_999, &cfg), 0.9999);
        let mid = lambda_at(15_000, &cfg);
        assert!((mid - 0.99945).abs() < 1e-12);

        let instant = PretrainConfig {
            ema_warmup_steps: 0,
            ..cfg
        };
        assert_eq!(lambda_at(0, &instant), 0.9999);
    }

    #[test]
    fn ema_is_exact_elementwise() {
        let dims = ModelDims {
            width: 8,
            enc_blocks: 1,
            dec_blocks: 1,
            heads: 2,
            ffn: 12,
            n_tokens: 4,
            audio_stacked: 10,
            conv_pos_kernel: 3,
        };
        let mut student = ParamStore::new();
        init_encoder_params(&mut student, 3, &dims);
        let mut teacher = student.subset("enc.");
        // Move the student so the two stores differ.
        for (_, t) in student.iter_mut() {
            for v in t.data_mut() {
                *v += 0.25;
            }
        }
        let before = teacher.subset("");
        let lambda = 0.97;
        ema_update(&mut teacher, &student.subset("enc."), lambda).unwrap();
        for (name, t) in teacher.iter() {
            let old = before.expect(name).unwrap();
            let new_s = student.expect(name).unwrap();
            for ((&tv, &ov), &sv) in t.data().iter().zip(old.data()).zip(new_s.data()) {
                assert_eq!(tv, lambda * ov + (1.0 - lambda) * sv);
            }
        }
    }

    #[test]
    fn ema_rejects_missing_and_mismatched() {
        let mut teacher = ParamStore::new();
        teacher.set("enc.x", Tensor::zeros(&[2, 2]));
        let student = ParamStore::new();
        assert!(ema_update(&mut teacher, &student, 0.9).is_err());

        let mut student = ParamStore::new();
        student.set("enc.x", Tensor::zeros(&[3]));
        assert!(ema_update(&mut teacher, &student, 0.9).is_err());
    }

    #[test]
    fn regression_ignores_unmasked_positions() {
        // Perturbing target rows outside the mask leaves the loss
        // bit-identical; perturbing inside changes it.
        let mut g = Graph::new();
        let x = g.data_input("x");
        let y = g.data_input("y");
        let (loss, _) = masked_regression(&mut g, x, y, &[1, 3]);

        let xv = Tensor::new(vec![4, 2], (0..8).map(|i| i as f64 * 0.3).collect()).unwrap();
        let yv = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let base = {
            let mut binds = Bindings::new();
            binds.set("x", xv.clone());
            binds.set("y", yv.clone());
            evaluate(&g, &binds).unwrap().value(loss).item()
        };
        let mut perturbed = yv.clone();
        perturbed.data_mut()[0] += 5.0; // row 0, unmasked
        perturbed.data_mut()[4] += 5.0; // row 2, unmasked
        let same = {
            let mut binds = Bindings::new();
            binds.set("x", xv.clone());
            binds.set("y", perturbed);
            evaluate(&g, &binds).unwrap().value(loss).item()
        };
        assert_eq!(base, same);

        let mut inside = yv.clone();
        inside.data_mut()[2] += 5.0; // row 1, masked
        let changed = {
            let mut binds = Bindings::new();
            binds.set("x", xv);
            binds.set("y", inside);
            evaluate(&g, &binds).unwrap().value(loss).item()
        };
        assert_ne!(base, changed);
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

    fn demo_plan(t: usize) -> MaskPlan {
        MaskPlan {
            audio: vec![0, 1],
            video: vec![1, 2],
            choice: ModalityChoice::Both,
        }
        .clamp(t)
    }

    impl MaskPlan {
        fn clamp(mut self, t: usize) -> MaskPlan {
            self.audio.retain(|&i| i < t);
            self.video.retain(|&i| i < t);
            self
        }
    }

    #[test]
    fn teacher_gradient_is_exactly_zero() {
        let dims = tiny_dims();
        let mut params = ParamStore::new();
        init_encoder_params(&mut params, 7, &dims);
        let teacher = params.subset("enc.");
        let t = 4;
        let built = build_pretrain_graph(&dims, 16, &demo_plan(t), 1, true);

        let mut binds = Bindings::new();
        params.bind(&mut binds, "");
        teacher.bind(&mut binds, "tch.");
        let audio = Tensor::new(vec![t, 104], (0..t * 104).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        let video = Tensor::new(
            vec![t, 16 * 16 * 3],
            (0..t * 768).map(|i| (i as f64 * 0.02).cos() * 0.1).collect(),
        )
        .unwrap();
        binds.set("audio.student", audio.clone());
        binds.set("video.student", video.clone());
        binds.set("audio.teacher", audio);
        binds.set("video.teacher", video);

        let (_, grads) = gradient(&built.graph, &binds, built.loss_mean).unwrap();
        assert!(grads.node_grad(built.target_pre).is_none());
        assert!(grads.params().keys().all(|k| !k.starts_with("tch.")));
        // Student parameters do receive gradient.
        let total: f64 = grads
            .params()
            .values()
            .map(|g| g.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(total > 0.0);
    }

    #[test]
    fn pretrain_loop_is_deterministic_and_saves_encoder_only() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let spec = CorpusSpec {
            num_speakers: 2,
            utterances_per_speaker: 2,
            phone_inventory: 4,
            lang: Lang::Source,
            min_phones: 1,
            max_phones: 2,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec, &corpus_dir).unwrap();

        let mut cfg = RunConfig::default();
        cfg.corpus = spec;
        cfg.model = tiny_dims();
        cfg.pretrain = tiny_pretrain_cfg();
        cfg.pretrain.view = View::Lip;

        let out_a = dir.path().join("run_a");
        let out_b = dir.path().join("run_b");
        let manifest = corpus_dir.join("manifest.jsonl");
        let a = run_pretrain(&cfg, &manifest, &out_a).unwrap();
        let b = run_pretrain(&cfg, &manifest, &out_b).unwrap();
        assert!(a.final_loss_raw.is_finite());
        assert_eq!(
            std::fs::read(&a.checkpoint).unwrap(),
            std::fs::read(&b.checkpoint).unwrap()
        );
        assert_eq!(std::fs::read(&a.log).unwrap(), std::fs::read(&b.log).unwrap());

        let loaded = checkpoint::load(&a.checkpoint).unwrap();
        assert_eq!(loaded.header.stage, Stage::Pretrain);
        assert!(loaded
            .params
            .names()
            .all(|n| n.starts_with("front.") || n.starts_with("enc.")));
        let csv = std::fs::read_to_string(&a.log).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3);
        assert!(csv.lines().next().unwrap().starts_with("step,"));
    }
}
