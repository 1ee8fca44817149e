//! Forward evaluation with all shape checking.

use super::graph::{shape_err, Bindings, Evaluation, Graph, NodeId, NodeKind, Op};
use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};

pub fn evaluate(graph: &Graph, binds: &Bindings) -> Result<Evaluation> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.len());
    for id in 0..graph.len() {
        let value = match &graph.nodes()[id].kind {
            NodeKind::Input { name, .. } => {
                let t = binds
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if !t.is_finite() {
                    return Err(Error::NonFinite(format!("input {name}")));
                }
                t.clone()
            }
            NodeKind::Const(t) => t.clone(),
            NodeKind::Op { op, inputs } => eval_op(graph, id, op, inputs, &values)?,
        };
        values.push(value);
    }
    Ok(Evaluation { values })
}

fn want2(graph: &Graph, id: NodeId, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| shape_err(graph, id, format!("expected rank-2 input, got {:?}", t.shape())))
}

fn eval_op(graph: &Graph, id: NodeId, op: &Op, inputs: &[NodeId], values: &[Tensor]) -> Result<Tensor> {
    let v = |i: usize| -> &Tensor { &values[inputs[i]] };
    match op {
        Op::MatMul => {
            let (m, k) = want2(graph, id, v(0))?;
            let (k2, n) = want2(graph, id, v(1))?;
            if k != k2 {
                return Err(shape_err(graph, id, format!("inner dims {k} vs {k2}")));
            }
            Tensor::new(vec![m, n], matmul(v(0).data(), v(1).data(), m, k, n))
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (v(0), v(1));
            if a.shape() != b.shape() {
                return Err(shape_err(
                    graph,
                    id,
                    format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Scale(s) => Ok(v(0).map(|x| x * s)),
        Op::AddRowBroadcast => {
            let (m, n) = want2(graph, id, v(0))?;
            if v(1).shape() != [n] {
                return Err(shape_err(
                    graph,
                    id,
                    format!("bias shape {:?} does not match {n} columns", v(1).shape()),
                ));
            }
            let mut data = v(0).data().to_vec();
            let b = v(1).data();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += b[j];
                }
            }
            Tensor::new(vec![m, n], data)
        }
        Op::Transpose => {
            let (m, n) = want2(graph, id, v(0))?;
            let x = v(0).data();
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = x[i * n + j];
                }
            }
            Tensor::new(vec![n, m], data)
        }
        Op::ConcatCols => {
            let (m, a) = want2(graph, id, v(0))?;
            let (m2, b) = want2(graph, id, v(1))?;
            if m != m2 {
                return Err(shape_err(graph, id, format!("row counts {m} vs {m2}")));
            }
            let mut data = Vec::with_capacity(m * (a + b));
            for i in 0..m {
                data.extend_from_slice(v(0).row(i));
                data.extend_from_slice(v(1).row(i));
            }
            Tensor::new(vec![m, a + b], data)
        }
        Op::SliceCols { start, len } => {
            let (m, n) = want2(graph, id, v(0))?;
            if start + len > n {
                return Err(shape_err(graph, id, format!("cols [{start},{}) out of {n}", start + len)));
            }
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&v(0).row(i)[*start..start + len]);
            }
            Tensor::new(vec![m, *len], data)
        }
        Op::GatherRows { rows } => {
            let (m, n) = want2(graph, id, v(0))?;
            let mut data = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                if r >= m {
                    return Err(shape_err(graph, id, format!("row {r} out of {m}")));
                }
                data.extend_from_slice(v(0).row(r));
            }
            Tensor::new(vec![rows.len(), n], data)
        }
        Op::RowReplace { rows } => {
            let (m, n) = want2(graph, id, v(0))?;
            if v(1).shape() != [n] {
                return Err(shape_err(
                    graph,
                    id,
                    format!("fill shape {:?} does not match {n} columns", v(1).shape()),
                ));
            }
            let mut seen = rows.to_vec();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(shape_err(graph, id, "duplicate row index"));
            }
            let mut data = v(0).data().to_vec();
            for &r in rows {
                if r >= m {
                    return Err(shape_err(graph, id, format!("row {r} out of {m}")));
                }
                data[r * n..(r + 1) * n].copy_from_slice(v(1).data());
            }
            Tensor::new(vec![m, n], data)
        }
        Op::Relu => Ok(v(0).map(|x| x.max(0.0))),
        Op::Gelu => Ok(v(0).map(gelu)),
        Op::Softmax => {
            let (m, n) = want2(graph, id, v(0))?;
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                softmax_row(v(0).row(i), &mut data[i * n..(i + 1) * n]);
            }
            Tensor::new(vec![m, n], data)
        }
        Op::LogSoftmax => {
            let (m, n) = want2(graph, id, v(0))?;
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                log_softmax_row(v(0).row(i), &mut data[i * n..(i + 1) * n]);
            }
            Tensor::new(vec![m, n], data)
        }
        Op::LayerNorm { eps } => {
            let (m, n) = want2(graph, id, v(0))?;
            for (which, idx) in [("gamma", 1), ("beta", 2)] {
                if v(idx).shape() != [n] {
                    return Err(shape_err(
                        graph,
                        id,
                        format!("{which} shape {:?} does not match {n} columns", v(idx).shape()),
                    ));
                }
            }
            let (gamma, beta) = (v(1).data(), v(2).data());
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let row = v(0).row(i);
                let (mu, sigma) = moments(row.iter().copied(), n, *eps);
                for j in 0..n {
                    data[i * n + j] = gamma[j] * (row[j] - mu) / sigma + beta[j];
                }
            }
            Tensor::new(vec![m, n], data)
        }
        Op::InstanceNorm { eps } => {
            let (m, n) = want2(graph, id, v(0))?;
            let x = v(0).data();
            let mut data = vec![0.0; m * n];
            for j in 0..n {
                let col = (0..m).map(|i| x[i * n + j]);
                let (mu, sigma) = moments(col, m, *eps);
                for i in 0..m {
                    data[i * n + j] = (x[i * n + j] - mu) / sigma;
                }
            }
            Tensor::new(vec![m, n], data)
        }
        Op::SumAll => Ok(Tensor::scalar(v(0).data().iter().sum())),
        Op::MeanAll => {
            if v(0).numel() == 0 {
                return Err(shape_err(graph, id, "mean of empty tensor"));
            }
            Ok(Tensor::scalar(v(0).data().iter().sum::<f64>() / v(0).numel() as f64))
        }
        Op::MeanPoolRows { group } => {
            let (m, n) = want2(graph, id, v(0))?;
            if *group == 0 || m % group != 0 {
                return Err(shape_err(graph, id, format!("{m} rows not divisible by group {group}")));
            }
            let t = m / group;
            let mut data = vec![0.0; t * n];
            for i in 0..m {
                let out = i / group;
                for j in 0..n {
                    data[out * n + j] += v(0).data()[i * n + j] / *group as f64;
                }
            }
            Tensor::new(vec![t, n], data)
        }
        Op::Unfold1d { kernel } => {
            let (t, c) = want2(graph, id, v(0))?;
            let pad = kernel / 2;
            let mut data = vec![0.0; t * kernel * c];
            for i in 0..t {
                for kk in 0..*kernel {
                    let src = i as isize - pad as isize + kk as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let dst = (i * kernel + kk) * c;
                    data[dst..dst + c].copy_from_slice(v(0).row(src as usize));
                }
            }
            Tensor::new(vec![t, kernel * c], data)
        }
        Op::Unfold2d { h, w, c, k, stride } => {
            let (t, cols) = want2(graph, id, v(0))?;
            if cols != h * w * c {
                return Err(shape_err(graph, id, format!("{cols} cols, expected {h}x{w}x{c}")));
            }
            if *k > *h || *k > *w || *stride == 0 {
                return Err(shape_err(graph, id, format!("kernel {k} stride {stride} on {h}x{w}")));
            }
            let oh = (h - k) / stride + 1;
            let ow = (w - k) / stride + 1;
            let x = v(0).data();
            let mut data = vec![0.0; t * oh * ow * k * k * c];
            let mut dst = 0;
            for f in 0..t {
                let frame = &x[f * cols..(f + 1) * cols];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ky in 0..*k {
                            let y = oy * stride + ky;
                            let row_base = (y * w + ox * stride) * c;
                            let span = k * c;
                            data[dst..dst + span].copy_from_slice(&frame[row_base..row_base + span]);
                            dst += span;
                        }
                    }
                }
            }
            Tensor::new(vec![t * oh * ow, k * k * c], data)
        }
        Op::Regroup { factor } => {
            let (m, n) = want2(graph, id, v(0))?;
            if *factor == 0 || m % factor != 0 {
                return Err(shape_err(graph, id, format!("{m} rows not divisible by factor {factor}")));
            }
            Tensor::new(vec![m / factor, factor * n], v(0).data().to_vec())
        }
        Op::PickPerRow { cols } => {
            let (m, n) = want2(graph, id, v(0))?;
            if cols.len() != m {
                return Err(shape_err(graph, id, format!("{} picks for {m} rows", cols.len())));
            }
            let mut data = Vec::with_capacity(m);
            for (i, &j) in cols.iter().enumerate() {
                if j >= n {
                    return Err(shape_err(graph, id, format!("col {j} out of {n}")));
                }
                data.push(v(0).data()[i * n + j]);
            }
            Tensor::new(vec![m], data)
        }
        Op::StopGrad => Ok(v(0).clone()),
        Op::CtcLoss { labels, blank } => {
            let nll = crate::ctc::neg_log_likelihood(v(0), labels, *blank)?;
            Ok(Tensor::scalar(nll))
        }
    }
}

pub(super) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

pub(super) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(super) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - log_sum;
    }
}

/// Mean and sqrt(population variance + eps).
pub(super) fn moments(xs: impl Iterator<Item = f64> + Clone, n: usize, eps: f64) -> (f64, f64) {
    let mu = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
    (mu, (var + eps).sqrt())
}
