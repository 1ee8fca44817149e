//! Slow reference implementations used only to pin the fast ones in tests.
//!
//! Everything here is deliberately brute force (path enumeration, central
//! finite differences, plain DP) and shares no code with the modules it
//! checks. Exposed from the library so integration tests can use it; not
//! part of the tool's runtime paths.

use crate::autodiff::{self, Bindings, Graph, NodeId, Tensor};

/// Central finite differences of a scalar function at `x`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Checks every trainable input's analytic gradient against central
/// finite differences of the loss. Panics with the offending parameter
/// element on mismatch.
pub fn assert_grads_match_fd(graph: &Graph, binds: &Bindings, loss: NodeId, tol: f64) {
    let (_, grads) = autodiff::gradient(graph, binds, loss).expect("gradient");
    let h = 1e-5;
    for (name, analytic) in grads.params() {
        let base = binds.get(name).expect("bound param").clone();
        let fd = fd_grad(
            |xs| {
                let mut b = binds.clone();
                b.set(name, Tensor::new(base.shape().to_vec(), xs.to_vec()).unwrap());
                autodiff::evaluate(graph, &b).expect("evaluate").value(loss).item()
            },
            base.data(),
            h,
        );
        for (i, (&a, &f)) in analytic.data().iter().zip(fd.iter()).enumerate() {
            let err = rel_err(a, f);
            assert!(
                err < tol,
                "grad mismatch for {name}[{i}]: analytic {a}, fd {f}, rel err {err}"
            );
        }
    }
}

/// CTC collapse: drop consecutive repeats, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn for_each_path(t: usize, k: usize, mut f: impl FnMut(&[usize], f64), rows: &[Vec<f64>]) {
    let mut path = vec![0usize; t];
    loop {
        let prob: f64 = path.iter().enumerate().map(|(ti, &c)| rows[ti][c]).product();
        f(&path, prob);
        // Odometer increment over base-k digits.
        let mut pos = 0;
        loop {
            if pos == t {
                return;
            }
            path[pos] += 1;
            if path[pos] < k {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Total probability of paths collapsing exactly to `labels`.
pub fn ctc_path_sum(rows: &[Vec<f64>], labels: &[usize], blank: usize) -> f64 {
    let t = rows.len();
    let k = rows[0].len();
    let mut mass = 0.0;
    for_each_path(
        t,
        k,
        |path, prob| {
            if collapse(path, blank) == labels {
                mass += prob;
            }
        },
        rows,
    );
    mass
}

/// Total probability of paths whose collapse has `prefix` as a prefix.
pub fn ctc_prefix_mass(rows: &[Vec<f64>], prefix: &[usize], blank: usize) -> f64 {
    let t = rows.len();
    let k = rows[0].len();
    let mut mass = 0.0;
    for_each_path(
        t,
        k,
        |path, prob| {
            let c = collapse(path, blank);
            if c.len() >= prefix.len() && c[..prefix.len()] == *prefix {
                mass += prob;
            }
        },
        rows,
    );
    mass
}

/// d(-ln P)/d(rows[t][k]) by leave-one-out products over enumerated paths.
pub fn ctc_nll_partials(rows: &[Vec<f64>], labels: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let t = rows.len();
    let k = rows[0].len();
    let mut p_total = 0.0;
    let mut dp = vec![vec![0.0; k]; t];
    for_each_path(
        t,
        k,
        |path, prob| {
            if collapse(path, blank) != labels {
                return;
            }
            p_total += prob;
            for ti in 0..t {
                // Product excluding frame ti; recomputed to stay exact
                // when rows[ti][path[ti]] is zero.
                let rest: f64 = (0..t)
                    .filter(|&x| x != ti)
                    .map(|x| rows[x][path[x]])
                    .product();
                dp[ti][path[ti]] += rest;
            }
        },
        rows,
    );
    for row in &mut dp {
        for v in row.iter_mut() {
            *v = -*v / p_total;
        }
    }
    dp
}

/// Plain Levenshtein distance (unit costs), no operation breakdown.
pub fn edit_distance(reference: &[char], hypothesis: &[char]) -> usize {
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Direct-summation KL divergence mean over rows: (1/N) Σ p·ln(p/q).
pub fn kld_direct(p_rows: &[Vec<f64>], q_rows: &[Vec<f64>]) -> f64 {
    let n = p_rows.len();
    let mut total = 0.0;
    for (p, q) in p_rows.iter().zip(q_rows) {
        for (&pi, &qi) in p.iter().zip(q) {
            if pi > 0.0 {
                total += pi * (pi / qi.max(1e-12)).ln();
            }
        }
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_removes_repeats_then_blanks() {
        // blank = 0
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2], 0), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0, 0], 0), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 0, 0, 1], 0), vec![1, 1]);
    }

    #[test]
    fn uniform_prefix_and_complete_masses() {
        let row = vec![1.0 / 3.0; 3];
        let rows = vec![row.clone(), row];
        // blank = 2; collapse starting with [0]: 00, 02, 20, 01 -> 4/9.
        assert!((ctc_prefix_mass(&rows, &[0], 2) - 4.0 / 9.0).abs() < 1e-12);
        assert!((ctc_path_sum(&rows, &[0], 2) - 3.0 / 9.0).abs() < 1e-12);
        // Empty string: both frames blank.
        assert!((ctc_path_sum(&rows, &[], 2) - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn edit_distance_basics() {
        let r: Vec<char> = "abc".chars().collect();
        assert_eq!(edit_distance(&r, &r), 0);
        assert_eq!(edit_distance(&r, &[]), 3);
        assert_eq!(edit_distance(&r, &"axc".chars().collect::<Vec<_>>()), 1);
        assert_eq!(edit_distance(&r, &"ac".chars().collect::<Vec<_>>()), 1);
        assert_eq!(edit_distance(&r, &"aabc".chars().collect::<Vec<_>>()), 1);
    }

    #[test]
    fn fd_grad_of_quadratic() {
        let g = fd_grad(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!(rel_err(g[0], 4.0) < 1e-8);
        assert!(rel_err(g[1], 3.0) < 1e-8);
    }
}
