//! Multi-head parallel mLSTM used as a single graph operation, with a
//! hand-derived backward pass.
//!
//! The stabiliser `m_t` cancels exactly in `h_t` (both branches of the
//! denominator guard scale by `e^{-m_t}`), so it is treated as a constant
//! during differentiation.

use super::{forward_parallel, GateInputs, QkvSequence};
use crate::autograd::kernels::{dot, log_sigmoid, sigmoid};
use crate::{Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct HeadDims {
    pub len: usize,
    pub heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
}

impl HeadDims {
    /// Executed multiply-accumulates: every causal (t, s) pair touches one
    /// key and one value row; plus the per-row normalisation.
    pub fn work(&self) -> usize {
        let pairs = self.len * (self.len + 1) / 2;
        self.heads * (pairs * (self.d_qk + self.d_v) + self.len * (self.d_v + 1))
    }
}

fn gather<T: Real>(src: &[T], rows: usize, width: usize, head: usize, dh: usize) -> Vec<T> {
    (0..rows)
        .flat_map(|r| src[r * width + head * dh..r * width + (head + 1) * dh].iter().copied())
        .collect()
}

fn scatter<T: Real>(dst: &mut [T], src: &[T], rows: usize, width: usize, head: usize, dh: usize) {
    for r in 0..rows {
        dst[r * width + head * dh..r * width + (head + 1) * dh]
            .copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn head_inputs<T: Real>(
    d: HeadDims,
    h: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: &[T],
    f_pre: &[T],
) -> (QkvSequence<T>, GateInputs<T>) {
    let qk_w = d.heads * d.d_qk;
    let v_w = d.heads * d.d_v;
    let qkv = QkvSequence::new(
        gather(q, d.len, qk_w, h, d.d_qk),
        gather(k, d.len, qk_w, h, d.d_qk),
        gather(v, d.len, v_w, h, d.d_v),
        d.len,
        d.d_qk,
        d.d_v,
    )
    .expect("validated by the graph op");
    let gates = GateInputs {
        i_pre: gather(i_pre, d.len, d.heads, h, 1),
        f_pre: gather(f_pre, d.len, d.heads, h, 1),
    };
    (qkv, gates)
}

pub(crate) fn forward<T: Real>(
    d: HeadDims,
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: &[T],
    f_pre: &[T],
) -> Result<Vec<T>> {
    let v_w = d.heads * d.d_v;
    let mut out = vec![T::zero(); d.len * v_w];
    for h in 0..d.heads {
        let (qkv, gates) = head_inputs(d, h, q, k, v, i_pre, f_pre);
        let hout = forward_parallel(&qkv, &gates)?;
        scatter(&mut out, &hout, d.len, v_w, h, d.d_v);
    }
    Ok(out)
}

pub(crate) struct Grads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub di: Vec<T>,
    pub df: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    d: HeadDims,
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: &[T],
    f_pre: &[T],
    g_out: &[T],
) -> Grads<T> {
    let qk_w = d.heads * d.d_qk;
    let v_w = d.heads * d.d_v;
    let mut grads = Grads {
        dq: vec![T::zero(); q.len()],
        dk: vec![T::zero(); k.len()],
        dv: vec![T::zero(); v.len()],
        di: vec![T::zero(); i_pre.len()],
        df: vec![T::zero(); f_pre.len()],
    };
    for h in 0..d.heads {
        let (qkv, gates) = head_inputs(d, h, q, k, v, i_pre, f_pre);
        let gh = gather(g_out, d.len, v_w, h, d.d_v);
        let hg = head_backward(&qkv, &gates, &gh);
        scatter(&mut grads.dq, &hg.dq, d.len, qk_w, h, d.d_qk);
        scatter(&mut grads.dk, &hg.dk, d.len, qk_w, h, d.d_qk);
        scatter(&mut grads.dv, &hg.dv, d.len, v_w, h, d.d_v);
        scatter(&mut grads.di, &hg.di, d.len, d.heads, h, 1);
        scatter(&mut grads.df, &hg.df, d.len, d.heads, h, 1);
    }
    grads
}

/// Gradients of one head given the upstream gradient `gh` (L×d_v).
///
/// With `D[t,s] = F_t − F_s + ĩ_s`, `P = exp(D − m)`, `A = QKᵀ/√d`,
/// `S = A ⊙ P`, `r = S·1`, `N = S·V`, `den = max(|r|, e^{-m})` and
/// `H = N / den`.
fn head_backward<T: Real>(qkv: &QkvSequence<T>, gates: &GateInputs<T>, gh: &[T]) -> Grads<T> {
    let (len, d_qk, d_v) = (qkv.len(), qkv.d_qk(), qkv.d_v());
    let scale = T::one() / T::lit(d_qk as f64).sqrt();
    let lf: Vec<T> = gates.f_pre.iter().map(|&f| log_sigmoid(f)).collect();
    let mut g = Grads {
        dq: vec![T::zero(); len * d_qk],
        dk: vec![T::zero(); len * d_qk],
        dv: vec![T::zero(); len * d_v],
        di: vec![T::zero(); len],
        df: vec![T::zero(); len],
    };
    // d loss / d F_t where F is the inclusive prefix sum of log σ(f̃).
    let mut d_prefix = vec![T::zero(); len];
    let mut logw = vec![T::zero(); len];
    let mut a_row = vec![T::zero(); len];
    let mut p_row = vec![T::zero(); len];
    for t in 0..len {
        let m = super::causal_log_weights(&lf, &gates.i_pre, 0, t, &mut logw);
        let qt = qkv.q_row(t);
        let mut r = T::zero();
        let mut num = vec![T::zero(); d_v];
        for s in 0..=t {
            a_row[s] = dot(qt, qkv.k_row(s)) * scale;
            p_row[s] = (logw[s] - m).exp();
            let sv = a_row[s] * p_row[s];
            r = r + sv;
            for (o, &vs) in num.iter_mut().zip(qkv.v_row(s)) {
                *o = *o + sv * vs;
            }
        }
        let floor = (-m).exp();
        let den = r.abs().max(floor);
        let gt = &gh[t * d_v..(t + 1) * d_v];
        // dN_t = g/den; d den = −g·N/den².
        let d_den = -dot(gt, &num) / (den * den);
        let d_r = if r.abs() >= floor {
            if r >= T::zero() {
                d_den
            } else {
                -d_den
            }
        } else {
            T::zero()
        };
        for s in 0..=t {
            let vs = qkv.v_row(s);
            let sv = a_row[s] * p_row[s];
            let mut d_s = d_r;
            for (a, &gta) in gt.iter().enumerate() {
                let dn = gta / den;
                d_s = d_s + dn * vs[a];
                g.dv[s * d_v + a] = g.dv[s * d_v + a] + sv * dn;
            }
            let d_a = d_s * p_row[s] * scale;
            let d_logw = d_s * a_row[s] * p_row[s];
            let ks = qkv.k_row(s);
            for b in 0..d_qk {
                g.dq[t * d_qk + b] = g.dq[t * d_qk + b] + d_a * ks[b];
                g.dk[s * d_qk + b] = g.dk[s * d_qk + b] + d_a * qt[b];
            }
            g.di[s] = g.di[s] + d_logw;
            d_prefix[t] = d_prefix[t] + d_logw;
            d_prefix[s] = d_prefix[s] - d_logw;
        }
    }
    // F_t = Σ_{u≤t} lf_u, so d lf_u = Σ_{t≥u} dF_t; d lf / d f̃ = σ(−f̃).
    let mut acc = T::zero();
    for u in (0..len).rev() {
        acc = acc + d_prefix[u];
        g.df[u] = acc * sigmoid(-gates.f_pre[u]);
    }
    g
}
