//! Joint CTC/attention beam decoding over an ensemble of checkpoints.
//!
//! Each beam step interpolates in probability space before taking the
//! log: ln[(1-alpha) * mean_m p_att + alpha * mean_m p_ctc], where the
//! per-model CTC term is the prefix-mass ratio psi(g.c) / psi(g) (and
//! the completion ratio for EOS). Checkpoints are self-describing, so
//! ensemble members may differ in size and view as long as they share a
//! vocabulary.

use std::cmp::Ordering;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{evaluate, Bindings, Graph, Tensor};
use crate::checkpoint::{self, Stage};
use crate::config::RunConfig;
use crate::corpus::{self, View};
use crate::error::{Error, Result};
use crate::model::{ModelDims, NetBuilder, ParamStore};
use crate::pretrain::prepare_utterance;
use crate::vocab::Vocabulary;

/// Probability rows entering the ensemble must sum to 1 within this.
pub const ROW_SUM_TOL: f64 = 1e-6;

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        b
    } else if b == f64::NEG_INFINITY {
        a
    } else {
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Forward CTC prefix statistics for one label prefix under one model's
/// frame posteriors, kept in log space. `lrn[t]` carries the mass of
/// paths through frame t that collapse to exactly the prefix and end on
/// its last label; `lrb[t]` the mass ending on blank; `lpsi` the total
/// mass of paths whose collapse starts with the prefix. A prefix that
/// needs more frames than exist ends up at -inf, never an error.
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    lrn: Vec<f64>,
    lrb: Vec<f64>,
    lpsi: f64,
    last: Option<usize>,
}

impl CtcPrefixState {
    /// State of the empty prefix: only all-blank paths, psi = 1.
    pub fn initial(posteriors: &Tensor, blank: usize) -> Result<Self> {
        let (t_len, k) = posteriors.dims2()?;
        if t_len == 0 {
            return Err(Error::invalid("CTC posteriors have no frames"));
        }
        if blank >= k {
            return Err(Error::invalid(format!("blank {blank} outside width {k}")));
        }
        let y = posteriors.data();
        let mut lrb = vec![0.0; t_len];
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += y[t * k + blank].ln();
            lrb[t] = acc;
        }
        Ok(CtcPrefixState {
            lrn: vec![f64::NEG_INFINITY; t_len],
            lrb,
            lpsi: 0.0,
            last: None,
        })
    }

    /// Extends the prefix by label `c`, returning the new state. The new
    /// state's `lpsi` is the log prefix mass of the extended sequence.
    pub fn extend(&self, posteriors: &Tensor, blank: usize, c: usize) -> Result<Self> {
        let (t_len, k) = posteriors.dims2()?;
        if c >= k || c == blank {
            return Err(Error::invalid(format!("cannot extend by label {c} with width {k}")));
        }
        let y = posteriors.data();
        let mut lrn = vec![f64::NEG_INFINITY; t_len];
        let mut lrb = vec![f64::NEG_INFINITY; t_len];
        let mut lpsi = f64::NEG_INFINITY;
        let mut lrn_prev = f64::NEG_INFINITY;
        let mut lrb_prev = f64::NEG_INFINITY;
        for t in 0..t_len {
            // Mass that had completed the old prefix by t-1 and may now
            // emit c. Before the first frame only the empty prefix exists.
            let (g_rb, g_rn) = if t == 0 {
                let b = if self.last.is_none() { 0.0 } else { f64::NEG_INFINITY };
                (b, f64::NEG_INFINITY)
            } else {
                (self.lrb[t - 1], self.lrn[t - 1])
            };
            let phi = if self.last == Some(c) { g_rb } else { logaddexp(g_rb, g_rn) };
            let ly_c = y[t * k + c].ln();
            let ly_b = y[t * k + blank].ln();
            lrn[t] = ly_c + logaddexp(phi, lrn_prev);
            lrb[t] = ly_b + logaddexp(lrb_prev, lrn_prev);
            lpsi = logaddexp(lpsi, phi + ly_c);
            lrn_prev = lrn[t];
            lrb_prev = lrb[t];
        }
        Ok(CtcPrefixState { lrn, lrb, lpsi, last: Some(c) })
    }

    /// Mass of paths that collapse to exactly the prefix.
    pub fn complete(&self) -> f64 {
        let t = self.lrn.len();
        logaddexp(self.lrn[t - 1], self.lrb[t - 1]).exp()
    }

    /// Mass of paths whose collapse starts with the prefix.
    pub fn prefix_mass(&self) -> f64 {
        self.lpsi.exp()
    }

    /// P(next = c | prefix) as the ratio of prefix masses. A prefix the
    /// CTC lattice cannot produce at all votes zero for everything.
    fn ratio(&self, extended_lpsi: f64) -> f64 {
        if self.lpsi == f64::NEG_INFINITY {
            0.0
        } else {
            (extended_lpsi - self.lpsi).exp()
        }
    }
}

/// Per-step CTC vote over the decoder vocabulary for one model: slots
/// 0..n are prefix-mass ratios, slot n (EOS) the completion ratio. A
/// feasible prefix yields a distribution; an infeasible one all zeros.
/// Also returns the extended state per label for reuse.
pub fn ctc_step_row(
    state: &CtcPrefixState,
    posteriors: &Tensor,
    n_tokens: usize,
) -> Result<(Vec<f64>, Vec<CtcPrefixState>)> {
    let blank = n_tokens;
    let mut row = vec![0.0; n_tokens + 1];
    let mut states = Vec::with_capacity(n_tokens);
    for c in 0..n_tokens {
        let ext = state.extend(posteriors, blank, c)?;
        row[c] = state.ratio(ext.lpsi);
        states.push(ext);
    }
    let t = state.lrn.len();
    row[n_tokens] = state.ratio(logaddexp(state.lrn[t - 1], state.lrb[t - 1]));
    Ok((row, states))
}

/// Unweighted mean of per-model probability rows. Every row must be a
/// distribution: non-negative, summing to 1 within `ROW_SUM_TOL`.
pub fn ensemble_next_token(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::invalid("ensemble got no probability rows"));
    }
    let k = rows[0].len();
    let mut mean = vec![0.0; k];
    for (m, row) in rows.iter().enumerate() {
        if row.len() != k {
            return Err(Error::invalid(format!(
                "model {m} produced a row of width {}, expected {k}",
                row.len()
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!(
                "model {m} probability row sums to {sum}, expected 1 within {ROW_SUM_TOL}"
            )));
        }
        for (acc, &p) in mean.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    for v in &mut mean {
        *v *= inv;
    }
    Ok(mean)
}

/// One ensemble member viewed from the search: frame posteriors for the
/// CTC term and a teacher-forced attention row per prefix.
pub struct ModelContext<'a> {
    pub name: String,
    pub ctc_posteriors: Tensor,
    #[allow(clippy::type_complexity)]
    pub att: Box<dyn Fn(&[usize]) -> Result<Vec<f64>> + 'a>,
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    ctc: Vec<CtcPrefixState>,
}

fn better(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Debug)]
pub struct BeamOutcome {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub warnings: Vec<String>,
}

/// Beam search over label sequences. Extensions with zero interpolated
/// probability are pruned; if nothing reaches EOS within `max_len`
/// labels the best unfinished hypothesis is returned with a warning.
pub fn beam_search(
    contexts: &[ModelContext],
    n_tokens: usize,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<BeamOutcome> {
    if contexts.is_empty() {
        return Err(Error::invalid("decoding needs at least one model"));
    }
    if beam == 0 || max_len == 0 {
        return Err(Error::invalid("beam and max_len must be at least 1"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let eos = n_tokens;
    let init = contexts
        .iter()
        .map(|m| CtcPrefixState::initial(&m.ctc_posteriors, n_tokens))
        .collect::<Result<Vec<_>>>()?;
    let mut active = vec![Hyp { tokens: Vec::new(), score: 0.0, ctc: init }];
    let mut finished: Option<Hyp> = None;

    for _ in 0..max_len {
        let mut pool: Vec<Hyp> = Vec::new();
        for hyp in &active {
            let att_rows = contexts
                .iter()
                .map(|m| (m.att)(&hyp.tokens))
                .collect::<Result<Vec<_>>>()?;
            let att = ensemble_next_token(&att_rows)?;
            // CTC votes are mass ratios, not model output rows: they sum
            // to 1 for feasible prefixes and to 0 for impossible ones, so
            // they are averaged without the distribution check.
            let mut ctc = vec![0.0; eos + 1];
            let mut ext_states = Vec::with_capacity(contexts.len());
            for (m, ctx) in contexts.iter().enumerate() {
                let (row, states) = ctc_step_row(&hyp.ctc[m], &ctx.ctc_posteriors, n_tokens)?;
                for (acc, &p) in ctc.iter_mut().zip(&row) {
                    *acc += p / contexts.len() as f64;
                }
                ext_states.push(states);
            }
            for c in 0..=eos {
                let p = (1.0 - alpha) * att[c] + alpha * ctc[c];
                if p <= 0.0 {
                    continue;
                }
                let score = hyp.score + p.ln();
                if c == eos {
                    let done = Hyp { tokens: hyp.tokens.clone(), score, ctc: Vec::new() };
                    if finished.as_ref().map_or(true, |f| better(&done, f) == Ordering::Less) {
                        finished = Some(done);
                    }
                } else {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(c);
                    let ctc = ext_states.iter().map(|s| s[c].clone()).collect();
                    pool.push(Hyp { tokens, score, ctc });
                }
            }
        }
        pool.sort_by(better);
        pool.truncate(beam);
        active = pool;
        if active.is_empty() {
            break;
        }
        // Every extension multiplies in a probability <= 1, so scores
        // only fall; once the best finished hypothesis beats everything
        // still active, nothing can overtake it.
        if let Some(f) = &finished {
            if f.score >= active[0].score {
                break;
            }
        }
    }

    if let Some(best) = finished {
        return Ok(BeamOutcome { tokens: best.tokens, score: best.score, warnings: Vec::new() });
    }
    let best = active
        .into_iter()
        .min_by(better)
        .ok_or_else(|| Error::invalid("no hypothesis survived the search"))?;
    Ok(BeamOutcome {
        tokens: best.tokens,
        score: best.score,
        warnings: vec![format!("reached max_len {max_len} before EOS")],
    })
}

/// A loaded ensemble member.
#[derive(Debug)]
pub struct DecodeModel {
    pub name: String,
    pub dims: ModelDims,
    pub params: ParamStore,
    pub vocab: Vocabulary,
    pub view: View,
}

pub fn load_model(path: &Path, view: View) -> Result<DecodeModel> {
    let ckpt = checkpoint::load(path)?;
    match ckpt.header.stage {
        Stage::Si | Stage::Sd => {}
        Stage::Pretrain => {
            return Err(Error::StageMismatch {
                expected: "si or sd".into(),
                found: ckpt.header.stage.to_string(),
            })
        }
    }
    let vocab = ckpt.header.vocabulary.clone();
    // The short name keeps decode output independent of where the
    // checkpoint happens to live; run metadata records full paths.
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(DecodeModel {
        name,
        dims: ckpt.header.model,
        params: ckpt.params,
        vocab,
        view,
    })
}

/// Encoder output and CTC frame posteriors for one utterance under one
/// model, with the posterior rows validated as distributions.
pub fn encoder_outputs(model: &DecodeModel, audio: &Tensor, video: &Tensor) -> Result<(Tensor, Tensor)> {
    let side = model.view.size();
    let mut g = Graph::new();
    let mut b = NetBuilder::new(&mut g, &model.dims);
    let a_in = b.g.data_input("audio");
    let v_in = b.g.data_input("video");
    let f_a = b.audio_frontend(a_in);
    let f_a = b.g.scale(f_a, 0.0);
    let f_v = b.video_frontend(v_in, side, side);
    let fused = b.fusion(f_a, f_v);
    let (enc_out, _) = b.encoder(fused, "", true);
    let mut b = NetBuilder::new(&mut g, &model.dims);
    let post = b.ctc_posteriors(enc_out);
    let mut binds = Bindings::new();
    model.params.bind(&mut binds, "");
    binds.set("audio", Tensor::zeros(audio.shape()));
    binds.set("video", video.clone());
    let eval = evaluate(&g, &binds)?;
    let posteriors = eval.value(post).clone();
    let (t_len, k) = posteriors.dims2()?;
    for t in 0..t_len {
        let sum: f64 = posteriors.data()[t * k..(t + 1) * k].iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!(
                "model {} frame {t} posterior sums to {sum}",
                model.name
            )));
        }
    }
    Ok((eval.value(enc_out).clone(), posteriors))
}

/// Teacher-forced next-token attention distribution after `prefix`.
pub fn att_row(model: &DecodeModel, enc_out: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut b = NetBuilder::new(&mut g, &model.dims);
    let enc = b.g.data_input("enc_out");
    let mut ids = vec![model.vocab.bos()];
    ids.extend_from_slice(prefix);
    let logits = b.decoder_logits(enc, &ids);
    let probs = g.softmax(logits);
    let mut binds = Bindings::new();
    model.params.bind(&mut binds, "");
    binds.set("enc_out", enc_out.clone());
    let eval = evaluate(&g, &binds)?;
    let t = eval.value(probs);
    let (n, k) = t.dims2()?;
    Ok(t.data()[(n - 1) * k..n * k].to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utt_id: String,
    pub hypothesis: String,
    pub score: f64,
    pub models_used: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub struct DecodeOutcome {
    pub jsonl: PathBuf,
    pub records: Vec<DecodeRecord>,
}

/// Decodes every manifest row with the ensemble and writes one JSON
/// line per utterance, in manifest order, to `decode.jsonl`.
pub fn run_decode(
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    models: &[(PathBuf, View)],
) -> Result<DecodeOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if models.is_empty() {
        return Err(Error::invalid("decoding needs at least one model"));
    }
    let loaded = models
        .iter()
        .map(|(p, v)| load_model(p, *v))
        .collect::<Result<Vec<_>>>()?;
    let vocab = loaded[0].vocab.clone();
    for m in &loaded[1..] {
        if m.vocab != vocab {
            return Err(Error::invalid(format!(
                "model {} has a different vocabulary than {}",
                m.name, loaded[0].name
            )));
        }
    }
    let n_tokens = vocab.n_tokens();
    let names: Vec<String> = loaded.iter().map(|m| m.name.clone()).collect();
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let rows = corpus::read_manifest(manifest_path)?;

    let mut records = Vec::with_capacity(rows.len());
    for row in &rows {
        let mut contexts = Vec::with_capacity(loaded.len());
        for model in &loaded {
            let prepared = prepare_utterance(manifest_dir, row, model.view)?;
            let (enc_out, posteriors) =
                encoder_outputs(model, &prepared.audio_stacked, &prepared.video_channels)?;
            contexts.push(ModelContext {
                name: model.name.clone(),
                ctc_posteriors: posteriors,
                att: Box::new(move |prefix: &[usize]| att_row(model, &enc_out, prefix)),
            });
        }
        let out = beam_search(
            &contexts,
            n_tokens,
            cfg.decode.beam,
            cfg.decode.alpha,
            cfg.decode.max_len,
        )?;
        records.push(DecodeRecord {
            utt_id: row.utt_id.clone(),
            hypothesis: vocab.decode(&out.tokens),
            score: out.score,
            models_used: names.clone(),
            warnings: out.warnings,
        });
    }

    let jsonl = out_dir.join("decode.jsonl");
    let mut f = fs::File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    for rec in &records {
        let line = serde_json::to_string(rec).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&jsonl, e))?;
    }
    Ok(DecodeOutcome { jsonl, records })
}

pub fn read_decode_records(path: &Path) -> Result<Vec<DecodeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}
