//! Forward and backward kernels for the graph primitives.

use std::collections::BTreeMap;

use super::{Graph, NodeId, Op, ParamSet};
use crate::{Error, Result, Tensor};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let av = a.values();
    let bv = b.values();
    for i in 0..m {
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bv[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let av = a.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = av[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

/// Elementwise binary with scalar broadcast on either side.
fn broadcast_zip(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let av = a.values();
    let bv = b.values();
    let values = if a.numel() == numel && b.numel() == numel {
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    } else if a.numel() == 1 {
        bv.iter().map(|&y| f(av[0], y)).collect()
    } else {
        av.iter().map(|&x| f(x, bv[0])).collect()
    };
    Tensor::new(shape.to_vec(), values).expect("broadcast shape")
}

/// Rows/cols view: rank-1 tensors are treated as a single row.
fn as_rows(t: &Tensor) -> (usize, usize) {
    match t.shape().len() {
        1 => (1, t.shape()[0]),
        _ => (t.shape()[0], t.shape()[1]),
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = as_rows(x);
    let xv = x.values();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &xv[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[i * c + j] /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

fn logsumexp_rows(x: &Tensor) -> Vec<f64> {
    let (r, c) = as_rows(x);
    let xv = x.values();
    (0..r)
        .map(|i| {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            m + s.ln()
        })
        .collect()
}

/// Values of every `detach` node, keyed by node index. Used by `grad_check`
/// to freeze detached branches during finite-difference probes.
pub(super) fn detach_values(graph: &Graph, values: &[Tensor]) -> BTreeMap<usize, Tensor> {
    let mut pinned = BTreeMap::new();
    for (idx, node) in graph.nodes.iter().enumerate() {
        if matches!(node.op, Op::Detach(_)) {
            pinned.insert(idx, values[idx].clone());
        }
    }
    pinned
}

/// Compute the value of every node in order.
pub(super) fn forward(
    graph: &Graph,
    inputs: &ParamSet,
    pinned_detach: Option<&BTreeMap<usize, Tensor>>,
) -> Result<Vec<Tensor>> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (idx, node) in graph.nodes.iter().enumerate() {
        let id = NodeId(idx);
        let v = |n: NodeId| -> &Tensor { &values[n.0] };
        let out = match &node.op {
            Op::Input(name) => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::MissingInput { name: name.clone() })?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        node: graph.node_label(id),
                        expected: node.shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
                t.clone()
            }
            Op::Const(t) => t.clone(),
            Op::Add(a, b) => broadcast_zip(v(*a), v(*b), &node.shape, |x, y| x + y),
            Op::Sub(a, b) => broadcast_zip(v(*a), v(*b), &node.shape, |x, y| x - y),
            Op::Mul(a, b) => broadcast_zip(v(*a), v(*b), &node.shape, |x, y| x * y),
            Op::Div(a, b) => broadcast_zip(v(*a), v(*b), &node.shape, |x, y| x / y),
            Op::AddScalar(a, s) => {
                let s = *s;
                Tensor::new(
                    node.shape.clone(),
                    v(*a).values().iter().map(|x| x + s).collect(),
                )?
            }
            Op::MulScalar(a, s) => v(*a).scale(*s),
            Op::MatMul(a, b) => matmul(v(*a), v(*b)),
            Op::Affine { x, w, b } => {
                let mut out = matmul(v(*x), v(*w));
                let bias = v(*b).values();
                let n = bias.len();
                for row in out.values_mut().chunks_mut(n) {
                    for (o, bi) in row.iter_mut().zip(bias) {
                        *o += bi;
                    }
                }
                out
            }
            Op::Tanh(a) => Tensor::new(
                node.shape.clone(),
                v(*a).values().iter().map(|x| x.tanh()).collect(),
            )?,
            Op::Silu(a) => Tensor::new(
                node.shape.clone(),
                v(*a).values().iter().map(|&x| x * sigmoid(x)).collect(),
            )?,
            Op::Sum(a) => Tensor::scalar(v(*a).values().iter().sum()),
            Op::Mean(a) => {
                let t = v(*a);
                Tensor::scalar(t.values().iter().sum::<f64>() / t.numel() as f64)
            }
            Op::Square(a) => Tensor::new(
                node.shape.clone(),
                v(*a).values().iter().map(|x| x * x).collect(),
            )?,
            Op::Sqrt(a) => Tensor::new(
                node.shape.clone(),
                v(*a).values().iter().map(|x| x.sqrt()).collect(),
            )?,
            Op::Exp(a) => Tensor::new(
                node.shape.clone(),
                v(*a).values().iter().map(|x| x.exp()).collect(),
            )?,
            Op::Log(a) => Tensor::new(
                node.shape.clone(),
                v(*a).values().iter().map(|x| x.ln()).collect(),
            )?,
            Op::Softmax(a) => softmax_rows(v(*a)),
            Op::LogSumExp(a) => {
                let lse = logsumexp_rows(v(*a));
                Tensor::new(node.shape.clone(), lse)?
            }
            Op::Concat { parts, axis } => {
                let tensors: Vec<&Tensor> = parts.iter().map(|&p| v(p)).collect();
                concat_forward(&tensors, *axis, &node.shape)
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => slice_forward(v(*x), *axis, *start, *len, &node.shape),
            Op::Reshape(a) => Tensor::new(node.shape.clone(), v(*a).values().to_vec())?,
            Op::Transpose(a) => transpose(v(*a)),
            Op::Detach(a) => match pinned_detach.and_then(|m| m.get(&idx)) {
                Some(frozen) => frozen.clone(),
                None => v(*a).clone(),
            },
        };
        values.push(out);
    }
    Ok(values)
}

fn concat_forward(parts: &[&Tensor], axis: usize, out_shape: &[usize]) -> Tensor {
    if axis == 0 {
        let mut values = Vec::with_capacity(out_shape.iter().product());
        for p in parts {
            values.extend_from_slice(p.values());
        }
        return Tensor::new(out_shape.to_vec(), values).expect("concat shape");
    }
    // axis == 1, rank 2
    let rows = out_shape[0];
    let cols = out_shape[1];
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            values.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(out_shape.to_vec(), values).expect("concat shape")
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, len: usize, out_shape: &[usize]) -> Tensor {
    match x.shape().len() {
        1 => Tensor::new(out_shape.to_vec(), x.values()[start..start + len].to_vec())
            .expect("slice shape"),
        _ => {
            let cols = x.cols();
            if axis == 0 {
                Tensor::new(
                    out_shape.to_vec(),
                    x.values()[start * cols..(start + len) * cols].to_vec(),
                )
                .expect("slice shape")
            } else {
                let mut values = Vec::with_capacity(x.rows() * len);
                for i in 0..x.rows() {
                    values.extend_from_slice(&x.row(i)[start..start + len]);
                }
                Tensor::new(out_shape.to_vec(), values).expect("slice shape")
            }
        }
    }
}

/// Accumulate `g` into `acc[target]`, reducing over the broadcast if the
/// target operand was a scalar.
fn accumulate(acc: &mut [Option<Tensor>], target: NodeId, target_shape: &[usize], g: Tensor) {
    let target_numel: usize = target_shape.iter().product();
    let reduced = if g.numel() == target_numel {
        Tensor::new(target_shape.to_vec(), g.into_values()).expect("grad shape")
    } else {
        // target was the scalar side of a broadcast binary op
        Tensor::new(target_shape.to_vec(), vec![g.values().iter().sum()]).expect("grad shape")
    };
    match &mut acc[target.0] {
        Some(existing) => *existing = existing.add(&reduced),
        slot @ None => *slot = Some(reduced),
    }
}

/// Reverse sweep. Returns (output value, gradients for every input name).
pub(super) fn backward(graph: &Graph, inputs: &ParamSet) -> Result<(f64, ParamSet)> {
    let out_id = graph.output()?;
    let out_node = &graph.nodes[out_id.0];
    if out_node.shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarOutput {
            node: graph.node_label(out_id),
            shape: out_node.shape.clone(),
        });
    }
    let values = forward(graph, inputs, None)?;
    let out_value = values[out_id.0].item();

    let mut acc: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    acc[out_id.0] = Some(Tensor::full(&out_node.shape, 1.0));

    for idx in (0..=out_id.0).rev() {
        let g = match acc[idx].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &graph.nodes[idx];
        let v = |n: NodeId| -> &Tensor { &values[n.0] };
        let sh = |n: NodeId| -> &[usize] { &graph.nodes[n.0].shape };
        match &node.op {
            Op::Input(_) | Op::Const(_) => {
                if matches!(node.op, Op::Input(_)) {
                    acc[idx] = Some(g); // keep for extraction below
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut acc, *a, sh(*a), g.clone());
                accumulate(&mut acc, *b, sh(*b), g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut acc, *a, sh(*a), g.clone());
                accumulate(&mut acc, *b, sh(*b), g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = broadcast_zip(&g, v(*b), g.shape(), |gi, bi| gi * bi);
                let gb = broadcast_zip(&g, v(*a), g.shape(), |gi, ai| gi * ai);
                accumulate(&mut acc, *a, sh(*a), ga);
                accumulate(&mut acc, *b, sh(*b), gb);
            }
            Op::Div(a, b) => {
                let ga = broadcast_zip(&g, v(*b), g.shape(), |gi, bi| gi / bi);
                let gb_num = broadcast_zip(&g, v(*a), g.shape(), |gi, ai| gi * ai);
                let gb = broadcast_zip(&gb_num, v(*b), g.shape(), |n, bi| -n / (bi * bi));
                accumulate(&mut acc, *a, sh(*a), ga);
                accumulate(&mut acc, *b, sh(*b), gb);
            }
            Op::AddScalar(a, _) => accumulate(&mut acc, *a, sh(*a), g),
            Op::MulScalar(a, s) => accumulate(&mut acc, *a, sh(*a), g.scale(*s)),
            Op::MatMul(a, b) => {
                let ga = matmul(&g, &transpose(v(*b)));
                let gb = matmul(&transpose(v(*a)), &g);
                accumulate(&mut acc, *a, sh(*a), ga);
                accumulate(&mut acc, *b, sh(*b), gb);
            }
            Op::Affine { x, w, b } => {
                let gx = matmul(&g, &transpose(v(*w)));
                let gw = matmul(&transpose(v(*x)), &g);
                let n = sh(*b)[0];
                let mut gb = vec![0.0; n];
                for row in g.values().chunks(n) {
                    for (acc_b, gi) in gb.iter_mut().zip(row) {
                        *acc_b += gi;
                    }
                }
                accumulate(&mut acc, *x, sh(*x), gx);
                accumulate(&mut acc, *w, sh(*w), gw);
                accumulate(&mut acc, *b, sh(*b), Tensor::vector(gb));
            }
            Op::Tanh(a) => {
                let y = &values[idx];
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.values()
                        .iter()
                        .zip(y.values())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect(),
                )?;
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Silu(a) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.values()
                        .iter()
                        .zip(v(*a).values())
                        .map(|(gi, &xi)| {
                            let s = sigmoid(xi);
                            gi * (s * (1.0 + xi * (1.0 - s)))
                        })
                        .collect(),
                )?;
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::full(sh(*a), g.item());
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Mean(a) => {
                let n: usize = sh(*a).iter().product();
                let ga = Tensor::full(sh(*a), g.item() / n as f64);
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Square(a) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.values()
                        .iter()
                        .zip(v(*a).values())
                        .map(|(gi, xi)| gi * 2.0 * xi)
                        .collect(),
                )?;
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Sqrt(a) => {
                let y = &values[idx];
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.values()
                        .iter()
                        .zip(y.values())
                        .map(|(gi, yi)| gi / (2.0 * yi))
                        .collect(),
                )?;
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Exp(a) => {
                let y = &values[idx];
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.values()
                        .iter()
                        .zip(y.values())
                        .map(|(gi, yi)| gi * yi)
                        .collect(),
                )?;
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Log(a) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.values()
                        .iter()
                        .zip(v(*a).values())
                        .map(|(gi, xi)| gi / xi)
                        .collect(),
                )?;
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Softmax(a) => {
                let y = &values[idx];
                let (r, c) = as_rows(y);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.values()[i * c..(i + 1) * c];
                    let gr = &g.values()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut acc, *a, sh(*a), Tensor::new(sh(*a).to_vec(), ga)?);
            }
            Op::LogSumExp(a) => {
                let x = v(*a);
                let soft = softmax_rows(x);
                let (r, c) = as_rows(x);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gi = g.values()[i];
                    for j in 0..c {
                        ga[i * c + j] = gi * soft.values()[i * c + j];
                    }
                }
                accumulate(&mut acc, *a, sh(*a), Tensor::new(sh(*a).to_vec(), ga)?);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n: usize = sh(p).iter().product();
                        let gp = Tensor::new(
                            sh(p).to_vec(),
                            g.values()[offset..offset + n].to_vec(),
                        )?;
                        accumulate(&mut acc, p, sh(p), gp);
                        offset += n;
                    }
                } else {
                    let rows = node.shape[0];
                    let mut col_offset = 0;
                    for &p in parts {
                        let pc = sh(p)[1];
                        let mut gp = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            let row = g.row(i);
                            gp.extend_from_slice(&row[col_offset..col_offset + pc]);
                        }
                        accumulate(&mut acc, p, sh(p), Tensor::new(sh(p).to_vec(), gp)?);
                        col_offset += pc;
                    }
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let mut gx = Tensor::zeros(sh(*x));
                scatter_slice(&mut gx, &g, *axis, *start, *len);
                accumulate(&mut acc, *x, sh(*x), gx);
            }
            Op::Reshape(a) => {
                let ga = Tensor::new(sh(*a).to_vec(), g.into_values())?;
                accumulate(&mut acc, *a, sh(*a), ga);
            }
            Op::Transpose(a) => {
                accumulate(&mut acc, *a, sh(*a), transpose(&g));
            }
            Op::Detach(_) => {
                // gradient stops here, exactly
            }
        }
    }

    let mut grads = ParamSet::new();
    for (name, &id) in graph.inputs.iter() {
        match acc[id.0].take() {
            Some(g) => grads.insert(name.clone(), g),
            None => grads.insert(name.clone(), Tensor::zeros(&graph.nodes[id.0].shape)),
        }
    }
    Ok((out_value, grads))
}

fn scatter_slice(gx: &mut Tensor, g: &Tensor, axis: usize, start: usize, len: usize) {
    match gx.shape().len() {
        1 => {
            gx.values_mut()[start..start + len].copy_from_slice(g.values());
        }
        _ => {
            let cols = gx.cols();
            let rows = gx.rows();
            if axis == 0 {
                gx.values_mut()[start * cols..(start + len) * cols].copy_from_slice(g.values());
            } else {
                for i in 0..rows {
                    let dst = &mut gx.values_mut()[i * cols + start..i * cols + start + len];
                    dst.copy_from_slice(g.row(i));
                }
            }
        }
    }
}
