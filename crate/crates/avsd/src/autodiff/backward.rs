//! Reverse-mode sweep over an evaluated graph.

use std::collections::BTreeMap;

use super::forward::{evaluate, gelu_grad, moments, softmax_row};
use super::graph::{Bindings, Evaluation, Gradients, Graph, NodeId, NodeKind, Op};
use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};

/// Forward pass plus gradients of a scalar `loss` node. Every node is
/// visited at most once; insertion order is already topological.
pub fn gradient(graph: &Graph, binds: &Bindings, loss: NodeId) -> Result<(Evaluation, Gradients)> {
    let eval = evaluate(graph, binds)?;
    if eval.value(loss).numel() != 1 {
        return Err(Error::NonScalarLoss {
            node: graph.label(loss),
            shape: eval.value(loss).shape().to_vec(),
        });
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    grads[loss] = Some(Tensor::full(eval.value(loss).shape(), 1.0));

    for id in (0..=loss).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        if let NodeKind::Op { op, inputs } = &graph.nodes()[id].kind {
            propagate(op, inputs, &g, &eval, &mut grads)?;
        }
        grads[id] = Some(g);
    }

    let mut by_param = BTreeMap::new();
    for id in 0..graph.len() {
        if let NodeKind::Input { name, trainable: true } = &graph.nodes()[id].kind {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => Tensor::zeros(eval.value(id).shape()),
            };
            by_param.insert(name.clone(), g);
        }
    }

    Ok((eval, Gradients { grads, by_param }))
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn propagate(
    op: &Op,
    inputs: &[NodeId],
    g: &Tensor,
    eval: &Evaluation,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let v = |i: usize| -> &Tensor { eval.value(inputs[i]) };
    match op {
        Op::MatMul => {
            let (m, k) = v(0).dims2()?;
            let (_, n) = v(1).dims2()?;
            // dA = g @ B^T
            let bt = transpose_data(v(1).data(), k, n);
            let da = matmul(g.data(), &bt, m, n, k);
            acc(grads, inputs[0], Tensor::new(vec![m, k], da)?);
            // dB = A^T @ g
            let at = transpose_data(v(0).data(), m, k);
            let db = matmul(&at, g.data(), k, m, n);
            acc(grads, inputs[1], Tensor::new(vec![k, n], db)?);
        }
        Op::Add => {
            acc(grads, inputs[0], g.clone());
            acc(grads, inputs[1], g.clone());
        }
        Op::Sub => {
            acc(grads, inputs[0], g.clone());
            acc(grads, inputs[1], g.map(|x| -x));
        }
        Op::Mul => {
            acc(grads, inputs[0], ew_mul(g, v(1)));
            acc(grads, inputs[1], ew_mul(g, v(0)));
        }
        Op::Scale(s) => acc(grads, inputs[0], g.map(|x| x * s)),
        Op::AddRowBroadcast => {
            acc(grads, inputs[0], g.clone());
            let (m, n) = g.dims2()?;
            let mut db = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    db[j] += g.data()[i * n + j];
                }
            }
            acc(grads, inputs[1], Tensor::new(vec![n], db)?);
        }
        Op::Transpose => {
            let (n, m) = g.dims2()?;
            acc(grads, inputs[0], Tensor::new(vec![m, n], transpose_data(g.data(), n, m))?);
        }
        Op::ConcatCols => {
            let (m, a) = v(0).dims2()?;
            let (_, b) = v(1).dims2()?;
            let mut da = Vec::with_capacity(m * a);
            let mut db = Vec::with_capacity(m * b);
            for i in 0..m {
                let row = g.row(i);
                da.extend_from_slice(&row[..a]);
                db.extend_from_slice(&row[a..]);
            }
            acc(grads, inputs[0], Tensor::new(vec![m, a], da)?);
            acc(grads, inputs[1], Tensor::new(vec![m, b], db)?);
        }
        Op::SliceCols { start, len } => {
            let (m, n) = v(0).dims2()?;
            let mut dx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let dst = i * n + start;
                dx.data_mut()[dst..dst + len].copy_from_slice(g.row(i));
            }
            acc(grads, inputs[0], dx);
        }
        Op::GatherRows { rows } => {
            let (m, n) = v(0).dims2()?;
            let mut dx = Tensor::zeros(&[m, n]);
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..n {
                    dx.data_mut()[r * n + j] += g.data()[i * n + j];
                }
            }
            acc(grads, inputs[0], dx);
        }
        Op::RowReplace { rows } => {
            let (m, n) = v(0).dims2()?;
            let mut dx = g.clone();
            let mut de = vec![0.0; n];
            for &r in rows {
                debug_assert!(r < m);
                for j in 0..n {
                    de[j] += g.data()[r * n + j];
                }
                dx.data_mut()[r * n..(r + 1) * n].fill(0.0);
            }
            acc(grads, inputs[0], dx);
            acc(grads, inputs[1], Tensor::new(vec![n], de)?);
        }
        Op::Relu => {
            let mask = v(0).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
            acc(grads, inputs[0], ew_mul(g, &mask));
        }
        Op::Gelu => {
            let dg = v(0).map(gelu_grad);
            acc(grads, inputs[0], ew_mul(g, &dg));
        }
        Op::Softmax => {
            let (m, n) = v(0).dims2()?;
            let mut yrow = vec![0.0; n];
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                softmax_row(v(0).row(i), &mut yrow);
                let grow = g.row(i);
                let dot: f64 = grow.iter().zip(&yrow).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dx[i * n + j] = yrow[j] * (grow[j] - dot);
                }
            }
            acc(grads, inputs[0], Tensor::new(vec![m, n], dx)?);
        }
        Op::LogSoftmax => {
            let (m, n) = v(0).dims2()?;
            let mut yrow = vec![0.0; n];
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                softmax_row(v(0).row(i), &mut yrow);
                let grow = g.row(i);
                let gsum: f64 = grow.iter().sum();
                for j in 0..n {
                    dx[i * n + j] = grow[j] - yrow[j] * gsum;
                }
            }
            acc(grads, inputs[0], Tensor::new(vec![m, n], dx)?);
        }
        Op::LayerNorm { eps } => {
            let (m, n) = v(0).dims2()?;
            let gamma = v(1).data();
            let mut dx = vec![0.0; m * n];
            let mut dgamma = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            for i in 0..m {
                let row = v(0).row(i);
                let grow = g.row(i);
                let (mu, sigma) = moments(row.iter().copied(), n, *eps);
                let xhat: Vec<f64> = row.iter().map(|&x| (x - mu) / sigma).collect();
                let dxhat: Vec<f64> = grow.iter().zip(gamma).map(|(&gv, &ga)| gv * ga).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                    dx[i * n + j] = (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sigma;
                }
            }
            acc(grads, inputs[0], Tensor::new(vec![m, n], dx)?);
            acc(grads, inputs[1], Tensor::new(vec![n], dgamma)?);
            acc(grads, inputs[2], Tensor::new(vec![n], dbeta)?);
        }
        Op::InstanceNorm { eps } => {
            let (m, n) = v(0).dims2()?;
            let x = v(0).data();
            let mut dx = vec![0.0; m * n];
            for j in 0..n {
                let col = (0..m).map(|i| x[i * n + j]);
                let (mu, sigma) = moments(col, m, *eps);
                let xhat: Vec<f64> = (0..m).map(|i| (x[i * n + j] - mu) / sigma).collect();
                let gcol: Vec<f64> = (0..m).map(|i| g.data()[i * n + j]).collect();
                let mean_g = gcol.iter().sum::<f64>() / m as f64;
                let mean_gx = gcol.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                for i in 0..m {
                    dx[i * n + j] = (gcol[i] - mean_g - xhat[i] * mean_gx) / sigma;
                }
            }
            acc(grads, inputs[0], Tensor::new(vec![m, n], dx)?);
        }
        Op::SumAll => acc(grads, inputs[0], Tensor::full(v(0).shape(), g.item())),
        Op::MeanAll => {
            let scale = g.item() / v(0).numel() as f64;
            acc(grads, inputs[0], Tensor::full(v(0).shape(), scale));
        }
        Op::MeanPoolRows { group } => {
            let (m, n) = v(0).dims2()?;
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let src = (i / group) * n;
                for j in 0..n {
                    dx[i * n + j] = g.data()[src + j] / *group as f64;
                }
            }
            acc(grads, inputs[0], Tensor::new(vec![m, n], dx)?);
        }
        Op::Unfold1d { kernel } => {
            let (t, c) = v(0).dims2()?;
            let pad = kernel / 2;
            let mut dx = vec![0.0; t * c];
            for i in 0..t {
                for kk in 0..*kernel {
                    let src = i as isize - pad as isize + kk as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let gbase = (i * kernel + kk) * c;
                    let xbase = src as usize * c;
                    for ch in 0..c {
                        dx[xbase + ch] += g.data()[gbase + ch];
                    }
                }
            }
            acc(grads, inputs[0], Tensor::new(vec![t, c], dx)?);
        }
        Op::Unfold2d { h, w, c, k, stride } => {
            let (t, cols) = v(0).dims2()?;
            let oh = (h - k) / stride + 1;
            let ow = (w - k) / stride + 1;
            let mut dx = vec![0.0; t * cols];
            let mut src = 0;
            for f in 0..t {
                let base = f * cols;
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ky in 0..*k {
                            let y = oy * stride + ky;
                            let row_base = base + (y * w + ox * stride) * c;
                            for off in 0..k * c {
                                dx[row_base + off] += g.data()[src + off];
                            }
                            src += k * c;
                        }
                    }
                }
            }
            acc(grads, inputs[0], Tensor::new(vec![t, cols], dx)?);
        }
        Op::Regroup { .. } => {
            acc(grads, inputs[0], Tensor::new(v(0).shape().to_vec(), g.data().to_vec())?);
        }
        Op::PickPerRow { cols } => {
            let (m, n) = v(0).dims2()?;
            let mut dx = Tensor::zeros(&[m, n]);
            for (i, &j) in cols.iter().enumerate() {
                dx.data_mut()[i * n + j] += g.data()[i];
            }
            acc(grads, inputs[0], dx);
        }
        Op::StopGrad => {}
        Op::CtcLoss { labels, blank } => {
            let dpost = crate::ctc::grad_wrt_posteriors(v(0), labels, *blank)?;
            acc(grads, inputs[0], dpost.map(|x| x * g.item()));
        }
    }
    Ok(())
}

fn ew_mul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

fn transpose_data(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
