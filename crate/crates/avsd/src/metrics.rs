//! Character error rate over decode output: per-utterance edit counts,
//! aggregate CER, bootstrap confidence intervals, per-speaker report.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::RunConfig;
use crate::corpus;
use crate::decode::read_decode_records;
use crate::error::{Error, Result};
use crate::rng;

/// Edit counts for one utterance against a reference of length `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UttScore {
    pub utt_id: String,
    pub speaker_id: String,
    pub s: usize,
    pub i: usize,
    pub d: usize,
    pub n: usize,
}

/// Minimal-cost alignment counts (substitutions, insertions, deletions)
/// between reference and hypothesis characters. Ties in the backtrace
/// prefer substitution over an insert+delete pair, then deletion over
/// insertion, making the split deterministic.
pub fn edit_distance(reference: &[char], hypothesis: &[char]) -> (usize, usize, usize) {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + sub_cost {
                s += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    (s, ins, del)
}

pub fn score_pair(utt_id: &str, speaker_id: &str, reference: &str, hypothesis: &str) -> UttScore {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    let (s, i, d) = edit_distance(&r, &h);
    UttScore {
        utt_id: utt_id.to_string(),
        speaker_id: speaker_id.to_string(),
        s,
        i,
        d,
        n: r.len(),
    }
}

/// Aggregate character error rate in percent: 100 * (S + I + D) / N over
/// the pooled counts. Can exceed 100 when insertions dominate.
pub fn cer(scores: &[UttScore]) -> Result<f64> {
    let n: usize = scores.iter().map(|u| u.n).sum();
    if n == 0 {
        return Err(Error::invalid("total reference length is zero"));
    }
    let errs: usize = scores.iter().map(|u| u.s + u.i + u.d).sum();
    Ok(100.0 * errs as f64 / n as f64)
}

/// Percentile bootstrap interval for the aggregate CER: utterances are
/// resampled with replacement `b` times under counter-derived per-resample
/// seeds, and the interval is read from the sorted resample CERs with
/// linear interpolation between order statistics.
pub fn bootstrap_ci(scores: &[UttScore], b: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one utterance"));
    }
    if b == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let mut cers = Vec::with_capacity(b);
    for rep in 0..b {
        let mut r = rng::stream(seed, "bootstrap", rep as u64);
        let resample: Vec<UttScore> = (0..scores.len())
            .map(|_| scores[r.gen_range(0..scores.len())].clone())
            .collect();
        cers.push(cer(&resample)?);
    }
    cers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&cers, tail), percentile(&cers, 1.0 - tail)))
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerRow {
    pub speaker_id: String,
    pub num_utts: usize,
    pub n: usize,
    pub s: usize,
    pub i: usize,
    pub d: usize,
    pub cer: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn aggregate(speaker_id: &str, scores: &[UttScore], b: usize, level: f64, seed: u64) -> Result<SpeakerRow> {
    let point = cer(scores)?;
    let (lo, hi) = bootstrap_ci(scores, b, level, seed)?;
    Ok(SpeakerRow {
        speaker_id: speaker_id.to_string(),
        num_utts: scores.len(),
        n: scores.iter().map(|u| u.n).sum(),
        s: scores.iter().map(|u| u.s).sum(),
        i: scores.iter().map(|u| u.i).sum(),
        d: scores.iter().map(|u| u.d).sum(),
        cer: point,
        ci_low: lo,
        ci_high: hi,
    })
}

#[derive(Debug)]
pub struct ScoreOutcome {
    pub csv: PathBuf,
    pub speakers: Vec<SpeakerRow>,
    pub overall: SpeakerRow,
}

/// Scores decode output against manifest transcripts and writes a CSV
/// with one row per speaker plus a final pooled "ALL" row.
pub fn run_score(
    cfg: &RunConfig,
    manifest_path: &Path,
    decode_jsonl: &Path,
    out_dir: &Path,
) -> Result<ScoreOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = corpus::read_manifest(manifest_path)?;
    let refs: BTreeMap<&str, (&str, &str)> = rows
        .iter()
        .map(|r| (r.utt_id.as_str(), (r.speaker_id.as_str(), r.transcript.as_str())))
        .collect();
    let records = read_decode_records(decode_jsonl)?;
    if records.is_empty() {
        return Err(Error::invalid(format!("{} holds no hypotheses", decode_jsonl.display())));
    }
    let mut scores = Vec::with_capacity(records.len());
    for rec in &records {
        let (speaker, transcript) = refs.get(rec.utt_id.as_str()).ok_or_else(|| {
            Error::invalid(format!("hypothesis for unknown utterance {:?}", rec.utt_id))
        })?;
        scores.push(score_pair(&rec.utt_id, speaker, transcript, &rec.hypothesis));
    }
    if scores.len() < rows.len() {
        log::warn!("{} of {} manifest rows have no hypothesis", rows.len() - scores.len(), rows.len());
    }

    let sc = &cfg.score;
    let mut by_speaker: BTreeMap<&str, Vec<UttScore>> = BTreeMap::new();
    for u in &scores {
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(u.clone());
    }
    let speakers = by_speaker
        .iter()
        .map(|(spk, utts)| aggregate(spk, utts, sc.bootstrap_samples, sc.confidence, sc.seed))
        .collect::<Result<Vec<_>>>()?;
    let overall = aggregate("ALL", &scores, sc.bootstrap_samples, sc.confidence, sc.seed)?;

    let csv = out_dir.join("score.csv");
    let mut f = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    writeln!(f, "speaker_id,num_utts,N,S,I,D,CER,ci_low,ci_high").map_err(|e| Error::io(&csv, e))?;
    for row in speakers.iter().chain(std::iter::once(&overall)) {
        writeln!(
            f,
            "{},{},{},{},{},{},{:.4},{:.4},{:.4}",
            row.speaker_id, row.num_utts, row.n, row.s, row.i, row.d, row.cer, row.ci_low, row.ci_high
        )
        .map_err(|e| Error::io(&csv, e))?;
    }
    Ok(ScoreOutcome { csv, speakers, overall })
}

/// Reads back a score CSV into rows; the pooled row keeps id "ALL".
pub fn read_score_csv(path: &Path) -> Result<Vec<SpeakerRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::invalid(format!("{}:{}: expected 9 fields", path.display(), idx + 1)));
        }
        let field = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::invalid(format!("{}:{}: bad number {:?}", path.display(), idx + 1, parts[i])))
        };
        out.push(SpeakerRow {
            speaker_id: parts[0].to_string(),
            num_utts: field(1)? as usize,
            n: field(2)? as usize,
            s: field(3)? as usize,
            i: field(4)? as usize,
            d: field(5)? as usize,
            cer: field(6)?,
            ci_low: field(7)?,
            ci_high: field(8)?,
        });
    }
    Ok(out)
}
