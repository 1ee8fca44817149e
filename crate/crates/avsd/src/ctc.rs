//! CTC loss over per-frame posteriors.
//!
//! The loss is the negative log of the total probability of all
//! blank-augmented alignment paths that collapse (repeat removal, then
//! blank removal) to the label sequence. The DP runs in log space over the
//! extended state sequence blank,l1,blank,l2,...,blank. Gradients are the
//! exact partial derivatives of the path-sum polynomial with respect to
//! each posterior entry, so they stay valid off the probability simplex.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Structured loss: a label sequence that cannot fit in T frames has
/// probability zero, reported as `Infeasible` rather than an error so
/// training policy can decide what to do with it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CtcLoss {
    Finite(f64),
    Infeasible,
}

impl CtcLoss {
    pub fn value(&self) -> f64 {
        match self {
            CtcLoss::Finite(v) => *v,
            CtcLoss::Infeasible => f64::INFINITY,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, CtcLoss::Infeasible)
    }
}

/// Minimum frame count that admits an alignment: one slot per label plus
/// one separating blank per adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Negative log-likelihood of `labels` under `posteriors` [T, K].
pub fn ctc_loss(posteriors: &Tensor, labels: &[usize], blank: usize) -> Result<CtcLoss> {
    let (t, _) = validate(posteriors, labels, blank)?;
    if t < min_frames(labels) {
        return Ok(CtcLoss::Infeasible);
    }
    let dp = forward(posteriors, labels, blank);
    if dp.log_p == f64::NEG_INFINITY {
        // Feasible in length but zero mass on every alignment.
        return Ok(CtcLoss::Finite(f64::INFINITY));
    }
    Ok(CtcLoss::Finite(-dp.log_p))
}

/// Loss for use inside a graph node; infeasibility is a caller bug there.
pub fn neg_log_likelihood(posteriors: &Tensor, labels: &[usize], blank: usize) -> Result<f64> {
    match ctc_loss(posteriors, labels, blank)? {
        CtcLoss::Finite(v) if v.is_finite() => Ok(v),
        CtcLoss::Finite(_) => Err(Error::NonFinite("ctc loss: zero-probability alignment".into())),
        CtcLoss::Infeasible => Err(Error::invalid(format!(
            "ctc: {} labels need at least {} frames, got {}",
            labels.len(),
            min_frames(labels),
            posteriors.shape()[0]
        ))),
    }
}

/// d(NLL)/d(posteriors): -(1/P) * dP/dy_t(k), with dP/dy_t(k) computed
/// from pre-emission forward and suffix backward variables so no division
/// by y_t(k) appears.
pub fn grad_wrt_posteriors(posteriors: &Tensor, labels: &[usize], blank: usize) -> Result<Tensor> {
    let (t, k) = validate(posteriors, labels, blank)?;
    if t < min_frames(labels) {
        return Err(Error::invalid("ctc gradient of an infeasible label sequence"));
    }
    let dp = forward(posteriors, labels, blank);
    if dp.log_p == f64::NEG_INFINITY {
        return Err(Error::NonFinite("ctc gradient: zero-probability alignment".into()));
    }
    let log_b = backward_suffix(posteriors, labels, blank);
    let s_ext = 2 * labels.len() + 1;
    let mut grad = vec![0.0; t * k];
    for ti in 0..t {
        for s in 0..s_ext {
            let term = dp.log_pre[ti * s_ext + s] + log_b[ti * s_ext + s];
            if term == f64::NEG_INFINITY {
                continue;
            }
            let lab = ext_label(labels, blank, s);
            grad[ti * k + lab] -= (term - dp.log_p).exp();
        }
    }
    Tensor::new(vec![t, k], grad)
}

fn validate(posteriors: &Tensor, labels: &[usize], blank: usize) -> Result<(usize, usize)> {
    let (t, k) = posteriors.dims2()?;
    if blank >= k {
        return Err(Error::invalid(format!("blank {blank} outside {k} classes")));
    }
    for &l in labels {
        if l >= k || l == blank {
            return Err(Error::invalid(format!("ctc label {l} invalid for {k} classes with blank {blank}")));
        }
    }
    if posteriors.data().iter().any(|&p| p < 0.0) {
        return Err(Error::invalid("ctc posteriors must be non-negative"));
    }
    Ok((t, k))
}

fn ext_label(labels: &[usize], blank: usize, s: usize) -> usize {
    if s % 2 == 0 {
        blank
    } else {
        labels[(s - 1) / 2]
    }
}

/// Skip transition s-2 -> s exists for label states whose predecessor
/// label differs (repeats must pass through the separating blank).
fn skip_allowed(labels: &[usize], s: usize) -> bool {
    s % 2 == 1 && s >= 2 && labels[(s - 1) / 2] != labels[(s - 3) / 2]
}

struct ForwardDp {
    /// log of pre-emission forward variables, [T * S_ext]:
    /// sum over prefix paths arriving at state s before multiplying y_t.
    log_pre: Vec<f64>,
    log_p: f64,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn forward(posteriors: &Tensor, labels: &[usize], blank: usize) -> ForwardDp {
    let (t, k) = posteriors.dims2().expect("validated");
    let s_ext = 2 * labels.len() + 1;
    let ly = |ti: usize, cls: usize| posteriors.data()[ti * k + cls].ln();
    let mut log_pre = vec![f64::NEG_INFINITY; t * s_ext];
    // log_a[s] for the previous frame, log_a = log_pre + log y.
    let mut prev_a = vec![f64::NEG_INFINITY; s_ext];
    for ti in 0..t {
        for s in 0..s_ext {
            let pre = if ti == 0 {
                if s <= 1 { 0.0 } else { f64::NEG_INFINITY }
            } else {
                let mut acc = prev_a[s];
                if s >= 1 {
                    acc = log_add(acc, prev_a[s - 1]);
                }
                if skip_allowed(labels, s) {
                    acc = log_add(acc, prev_a[s - 2]);
                }
                acc
            };
            log_pre[ti * s_ext + s] = pre;
        }
        let row = &log_pre[ti * s_ext..(ti + 1) * s_ext];
        let mut next_a = vec![f64::NEG_INFINITY; s_ext];
        for s in 0..s_ext {
            if row[s] != f64::NEG_INFINITY {
                next_a[s] = row[s] + ly(ti, ext_label(labels, blank, s));
            }
        }
        prev_a = next_a;
    }
    let mut log_p = prev_a[s_ext - 1];
    if s_ext >= 2 {
        log_p = log_add(log_p, prev_a[s_ext - 2]);
    }
    ForwardDp { log_pre, log_p }
}

/// log_b[t][s]: sum over suffix paths for frames t+1..T starting from
/// state s (the factor at frame t itself is excluded).
fn backward_suffix(posteriors: &Tensor, labels: &[usize], blank: usize) -> Vec<f64> {
    let (t, k) = posteriors.dims2().expect("validated");
    let s_ext = 2 * labels.len() + 1;
    let ly = |ti: usize, cls: usize| posteriors.data()[ti * k + cls].ln();
    let mut log_b = vec![f64::NEG_INFINITY; t * s_ext];
    log_b[(t - 1) * s_ext + s_ext - 1] = 0.0;
    if s_ext >= 2 {
        log_b[(t - 1) * s_ext + s_ext - 2] = 0.0;
    }
    for ti in (0..t.saturating_sub(1)).rev() {
        for s in 0..s_ext {
            let mut acc = ly(ti + 1, ext_label(labels, blank, s)) + log_b[(ti + 1) * s_ext + s];
            if s + 1 < s_ext {
                acc = log_add(
                    acc,
                    ly(ti + 1, ext_label(labels, blank, s + 1)) + log_b[(ti + 1) * s_ext + s + 1],
                );
            }
            if s + 2 < s_ext && skip_allowed(labels, s + 2) {
                acc = log_add(
                    acc,
                    ly(ti + 1, ext_label(labels, blank, s + 2)) + log_b[(ti + 1) * s_ext + s + 2],
                );
            }
            log_b[ti * s_ext + s] = acc;
        }
    }
    log_b
}
