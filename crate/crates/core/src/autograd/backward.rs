//! Backward rules: one arm per [`Op`] variant.

use super::kernels::{self, sigmoid};
use super::{Binary, Node, Op, Unary, Var};
use crate::mlstm::fused;
use crate::Real;

pub(crate) fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul(a, b)
        | Op::Binary(_, a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::ScaleRows(a, b)
        | Op::DivRows(a, b)
        | Op::GroupedLinear(a, b) => vec![*a, *b],
        Op::Transpose(x)
        | Op::Unary(_, x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::SumAll(x)
        | Op::MeanRows(x)
        | Op::RowSum(x)
        | Op::Reshape(x)
        | Op::SliceRows(x, _)
        | Op::SliceCols(x, _)
        | Op::PermuteRows(x, _)
        | Op::MaskUpper(x) => vec![*x],
        Op::Norm { x, gamma, beta, .. } => {
            let mut v = vec![*x, *gamma];
            v.extend(beta);
            v
        }
        Op::Conv2d { x, kernel, bias } | Op::CausalConv1d { x, kernel, bias } => {
            let mut v = vec![*x, *kernel];
            v.extend(bias);
            v
        }
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        Op::Mlstm {
            q,
            k,
            v,
            i_pre,
            f_pre,
            ..
        } => vec![*q, *k, *v, *i_pre, *f_pre],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

fn zeros<T: Real>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

/// Runs the backward rule of node `idx`, adding its input gradients into
/// `grads`. `fault` scales every contribution (test fixture).
pub(crate) fn propagate<T: Real>(
    nodes: &[Node<T>],
    idx: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    fault: Option<T>,
) {
    let node = &nodes[idx];
    let val = |v: &Var| nodes[v.0].value.as_slice();
    let shape = |v: &Var| nodes[v.0].shape.as_slice();
    let mut out: Vec<(Var, Vec<T>)> = Vec::with_capacity(2);

    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = (shape(a)[0], shape(a)[1], shape(b)[1]);
            let mut da = zeros(m * k);
            kernels::gemm_nt_acc(g, val(b), &mut da, m, k, n);
            let mut db = zeros(k * n);
            kernels::gemm_tn_acc(val(a), g, &mut db, m, k, n);
            out.push((*a, da));
            out.push((*b, db));
        }
        Op::Transpose(a) => {
            let (m, n) = (shape(a)[0], shape(a)[1]);
            out.push((*a, kernels::transpose(g, n, m)));
        }
        Op::Unary(kind, x) => {
            let (xv, yv) = (val(x), node.value.as_slice());
            let dx = g
                .iter()
                .zip(xv.iter().zip(yv))
                .map(|(&gi, (&xi, &yi))| match kind {
                    Unary::Neg => -gi,
                    Unary::Exp => gi * yi,
                    Unary::Log => gi / xi,
                    Unary::Sigmoid => gi * yi * (T::one() - yi),
                    Unary::LogSigmoid => gi * sigmoid(-xi),
                    Unary::Silu => {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (T::one() - s))
                    }
                    Unary::Abs => {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    }
                })
                .collect();
            out.push((*x, dx));
        }
        Op::Binary(kind, a, b) => {
            let (va, vb) = (val(a), val(b));
            let (na, nb) = (va.len(), vb.len());
            let n = g.len();
            let at = |i: usize| va[if na == 1 { 0 } else { i }];
            let bt = |i: usize| vb[if nb == 1 { 0 } else { i }];
            let mut da = zeros(na);
            let mut db = zeros(nb);
            for i in 0..n {
                let (ga, gb) = match kind {
                    Binary::Add => (g[i], g[i]),
                    Binary::Sub => (g[i], -g[i]),
                    Binary::Mul => (g[i] * bt(i), g[i] * at(i)),
                    Binary::Maximum => {
                        if at(i) >= bt(i) {
                            (g[i], T::zero())
                        } else {
                            (T::zero(), g[i])
                        }
                    }
                };
                let ia = if na == 1 { 0 } else { i };
                let ib = if nb == 1 { 0 } else { i };
                da[ia] = da[ia] + ga;
                db[ib] = db[ib] + gb;
            }
            out.push((*a, da));
            out.push((*b, db));
        }
        Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
        Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
        Op::AddRow(x, b) => {
            let n = shape(x)[1];
            let mut db = zeros(n);
            for (i, &gi) in g.iter().enumerate() {
                db[i % n] = db[i % n] + gi;
            }
            out.push((*x, g.to_vec()));
            out.push((*b, db));
        }
        Op::MulRow(x, w) => {
            let n = shape(x)[1];
            let (xv, wv) = (val(x), val(w));
            let mut dw = zeros(n);
            let mut dx = zeros(g.len());
            for (i, &gi) in g.iter().enumerate() {
                dx[i] = gi * wv[i % n];
                dw[i % n] = dw[i % n] + gi * xv[i];
            }
            out.push((*x, dx));
            out.push((*w, dw));
        }
        Op::ScaleRows(x, s) => {
            let (m, n) = (shape(x)[0], shape(x)[1]);
            let (xv, sv) = (val(x), val(s));
            let mut ds = zeros(m);
            let mut dx = zeros(g.len());
            for (i, &gi) in g.iter().enumerate() {
                dx[i] = gi * sv[i / n];
                ds[i / n] = ds[i / n] + gi * xv[i];
            }
            out.push((*x, dx));
            out.push((*s, ds));
        }
        Op::DivRows(x, d) => {
            let (m, n) = (shape(x)[0], shape(x)[1]);
            let dv = val(d);
            let yv = node.value.as_slice();
            let mut dd = zeros(m);
            let mut dx = zeros(g.len());
            for (i, &gi) in g.iter().enumerate() {
                let r = i / n;
                dx[i] = gi / dv[r];
                dd[r] = dd[r] - gi * yv[i] / dv[r];
            }
            out.push((*x, dx));
            out.push((*d, dd));
        }
        Op::SumAll(x) => out.push((*x, vec![g[0]; val(x).len()])),
        Op::MeanRows(x) => {
            let (m, n) = (shape(x)[0], shape(x)[1]);
            let inv = T::one() / T::lit(m as f64);
            out.push((*x, (0..m * n).map(|i| g[i % n] * inv).collect()));
        }
        Op::RowSum(x) => {
            let (m, n) = (shape(x)[0], shape(x)[1]);
            out.push((*x, (0..m * n).map(|i| g[i / n]).collect()));
        }
        Op::Norm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            rstd,
        } => {
            let d = val(gamma).len();
            let seg = d / groups;
            let gv = val(gamma);
            let rows = g.len() / d;
            let inv_n = T::one() / T::lit(seg as f64);
            let mut dx = zeros(g.len());
            let mut dgamma = zeros(d);
            let mut dbeta = zeros(d);
            let mut dxhat = zeros(seg);
            for r in 0..rows {
                for grp in 0..*groups {
                    let lo = r * d + grp * seg;
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..seg {
                        let c = grp * seg + j;
                        let gi = g[lo + j];
                        dgamma[c] = dgamma[c] + gi * xhat[lo + j];
                        dbeta[c] = dbeta[c] + gi;
                        dxhat[j] = gi * gv[c];
                        mean_dh = mean_dh + dxhat[j];
                        mean_dh_h = mean_dh_h + dxhat[j] * xhat[lo + j];
                    }
                    mean_dh = mean_dh * inv_n;
                    mean_dh_h = mean_dh_h * inv_n;
                    let rs = rstd[r * groups + grp];
                    for j in 0..seg {
                        dx[lo + j] = rs * (dxhat[j] - mean_dh - xhat[lo + j] * mean_dh_h);
                    }
                }
            }
            out.push((*x, dx));
            out.push((*gamma, dgamma));
            if let Some(b) = beta {
                out.push((*b, dbeta));
            }
        }
        Op::Conv2d { x, kernel, bias } => {
            let (h, w, d) = (shape(x)[0], shape(x)[1], shape(x)[2]);
            let (xv, kv) = (val(x), val(kernel));
            let mut dx = zeros(xv.len());
            let mut dk = zeros(kv.len());
            let mut db = zeros(d);
            for i in 0..h {
                for j in 0..w {
                    let go = &g[(i * w + j) * d..(i * w + j + 1) * d];
                    for c in 0..d {
                        db[c] = db[c] + go[c];
                    }
                    for di in 0..3 {
                        let Some(si) = (i + di).checked_sub(1).filter(|&s| s < h) else {
                            continue;
                        };
                        for dj in 0..3 {
                            let Some(sj) = (j + dj).checked_sub(1).filter(|&s| s < w) else {
                                continue;
                            };
                            let xo = (si * w + sj) * d;
                            let ko = (di * 3 + dj) * d;
                            for c in 0..d {
                                dx[xo + c] = dx[xo + c] + go[c] * kv[ko + c];
                                dk[ko + c] = dk[ko + c] + go[c] * xv[xo + c];
                            }
                        }
                    }
                }
            }
            out.push((*x, dx));
            out.push((*kernel, dk));
            if let Some(b) = bias {
                out.push((*b, db));
            }
        }
        Op::CausalConv1d { x, kernel, bias } => {
            let (len, d) = (shape(x)[0], shape(x)[1]);
            let (xv, kv) = (val(x), val(kernel));
            let mut dx = zeros(xv.len());
            let mut dk = zeros(kv.len());
            let mut db = zeros(d);
            for t in 0..len {
                for c in 0..d {
                    let gi = g[t * d + c];
                    db[c] = db[c] + gi;
                    for j in 0..4 {
                        let Some(s) = (t + j).checked_sub(3) else {
                            continue;
                        };
                        dx[s * d + c] = dx[s * d + c] + gi * kv[j * d + c];
                        dk[j * d + c] = dk[j * d + c] + gi * xv[s * d + c];
                    }
                }
            }
            out.push((*x, dx));
            out.push((*kernel, dk));
            if let Some(b) = bias {
                out.push((*b, db));
            }
        }
        Op::GroupedLinear(x, w) => {
            let (m, n_in) = (shape(x)[0], shape(x)[1]);
            let (groups, in_g, out_g) = (shape(w)[0], shape(w)[1], shape(w)[2]);
            let n_out = groups * out_g;
            let (xv, wv) = (val(x), val(w));
            let mut dx = zeros(xv.len());
            let mut dw = zeros(wv.len());
            for r in 0..m {
                for gi in 0..groups {
                    let xs = r * n_in + gi * in_g..r * n_in + (gi + 1) * in_g;
                    let gs = &g[r * n_out + gi * out_g..r * n_out + (gi + 1) * out_g];
                    let ws = gi * in_g * out_g..(gi + 1) * in_g * out_g;
                    kernels::gemm_nt_acc(gs, &wv[ws.clone()], &mut dx[xs.clone()], 1, in_g, out_g);
                    kernels::gemm_tn_acc(&xv[xs], gs, &mut dw[ws], 1, in_g, out_g);
                }
            }
            out.push((*x, dx));
            out.push((*w, dw));
        }
        Op::SliceRows(x, start) => {
            let n = shape(x)[1];
            let mut dx = zeros(val(x).len());
            dx[start * n..start * n + g.len()].copy_from_slice(g);
            out.push((*x, dx));
        }
        Op::SliceCols(x, start) => {
            let (m, n) = (shape(x)[0], shape(x)[1]);
            let w = node.shape[1];
            let mut dx = zeros(m * n);
            for i in 0..m {
                dx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            out.push((*x, dx));
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = val(p).len();
                out.push((*p, g[off..off + len].to_vec()));
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let mut col = 0;
            for p in parts {
                let w = shape(p)[1];
                let dp = (0..m)
                    .flat_map(|i| g[i * n + col..i * n + col + w].iter().copied())
                    .collect();
                out.push((*p, dp));
                col += w;
            }
        }
        Op::PermuteRows(x, perm) => {
            let n = shape(x)[1];
            let mut dx = zeros(g.len());
            for (i, &p) in perm.iter().enumerate() {
                dx[p * n..(p + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
            }
            out.push((*x, dx));
        }
        Op::MaskUpper(x) => {
            let n = shape(x)[1];
            let dx = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| if i % n > i / n { T::zero() } else { gi })
                .collect();
            out.push((*x, dx));
        }
        Op::Mlstm {
            q,
            k,
            v,
            i_pre,
            f_pre,
            heads,
        } => {
            let dims = fused::HeadDims {
                len: shape(q)[0],
                heads: *heads,
                d_qk: shape(q)[1] / heads,
                d_v: shape(v)[1] / heads,
            };
            let gr = fused::backward(dims, val(q), val(k), val(v), val(i_pre), val(f_pre), g);
            out.push((*q, gr.dq));
            out.push((*k, gr.dk));
            out.push((*v, gr.dv));
            out.push((*i_pre, gr.di));
            out.push((*f_pre, gr.df));
        }
        Op::CrossEntropy { logits, label, probs } => {
            let dz = probs
                .iter()
                .enumerate()
                .map(|(c, &p)| g[0] * (if c == *label { p - T::one() } else { p }))
                .collect();
            out.push((*logits, dz));
        }
    }

    for (var, contrib) in out {
        if !nodes[var.0].requires_grad {
            continue;
        }
        let slot = grads[var.0].get_or_insert_with(|| zeros(contrib.len()));
        match fault {
            Some(s) => slot.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c * s),
            None => slot.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
        }
    }
}
