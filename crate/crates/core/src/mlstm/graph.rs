//! Differentiable versions of the three mLSTM modes, composed from graph
//! primitives. One head; inputs are `q`,`k`: L×d_qk, `v`: L×d_v, gate
//! pre-activations L×1.
//!
//! These are slower than [`crate::mlstm`]'s kernels and the fused graph op
//! but give end-to-end gradients for every mode.

use super::MlstmState;
use crate::autograd::{Graph, Var};
use crate::{Real, Result, VilError};

/// State carried through a graph: memory `c` (d_v×d_qk), normaliser `n`
/// (1×d_qk) and the stabiliser value, which is treated as a constant.
#[derive(Debug, Clone, Copy)]
pub struct GraphState<T> {
    pub c: Var,
    pub n: Var,
    pub m: T,
}

struct Dims {
    len: usize,
    d_qk: usize,
    d_v: usize,
}

fn dims<T: Real>(g: &Graph<T>, q: Var, k: Var, v: Var, i_pre: Var, f_pre: Var) -> Result<Dims> {
    let (len, d_qk) = match g.shape(q) {
        &[l, d] => (l, d),
        s => return Err(VilError::dim(format!("q must be L×d_qk, got {s:?}"))),
    };
    let d_v = match g.shape(v) {
        &[l, d] if l == len => d,
        s => return Err(VilError::dim(format!("v must be {len}×d_v, got {s:?}"))),
    };
    if g.shape(k) != [len, d_qk] || g.shape(i_pre) != [len, 1] || g.shape(f_pre) != [len, 1] {
        return Err(VilError::dim("k/gate shapes inconsistent with q"));
    }
    Ok(Dims { len, d_qk, d_v })
}

fn init_state<T: Real>(g: &mut Graph<T>, init: &MlstmState<T>, d: &Dims) -> Result<GraphState<T>> {
    if init.d_qk() != d.d_qk || init.d_v() != d.d_v {
        return Err(VilError::dim("initial state dims do not match q/v"));
    }
    Ok(GraphState {
        c: g.constant([d.d_v, d.d_qk], init.c.clone())?,
        n: g.constant([1, d.d_qk], init.n.clone())?,
        m: init.m,
    })
}

fn lower_triangle<T: Real>(g: &mut Graph<T>, n: usize) -> Result<Var> {
    let data = (0..n * n)
        .map(|i| if i % n <= i / n { T::one() } else { T::zero() })
        .collect();
    g.constant([n, n], data)
}

/// Log gate matrix `D[t,s] = Σ_{u=s+1..t} log σ(f̃_u) + ĩ_s` (masked above
/// the diagonal) and the inclusive forget prefix sums `F`.
fn log_gate_matrix<T: Real>(g: &mut Graph<T>, i_pre: Var, f_pre: Var, len: usize) -> Result<(Var, Var)> {
    let lf = g.log_sigmoid(f_pre);
    let tri = lower_triangle(g, len)?;
    let prefix = g.matmul(tri, lf)?;
    let ones_row = g.constant([1, len], vec![T::one(); len])?;
    let ones_col = g.constant([len, 1], vec![T::one(); len])?;
    let rows = g.matmul(prefix, ones_row)?;
    let prefix_t = g.transpose(prefix)?;
    let cols = g.matmul(ones_col, prefix_t)?;
    let diff = g.sub(rows, cols)?;
    let i_t = g.transpose(i_pre)?;
    let input = g.matmul(ones_col, i_t)?;
    let d = g.add(diff, input)?;
    Ok((g.mask_upper(d, T::NEG_SENTINEL)?, prefix))
}

fn row_max<T: Real>(values: &[T], n: usize, floor: Option<&[T]>) -> Vec<T> {
    (0..n)
        .map(|t| {
            let m = values[t * n..=t * n + t].iter().copied().fold(T::neg_infinity(), T::max);
            floor.map_or(m, |f| m.max(f[t]))
        })
        .collect()
}

/// Subtracts a per-row constant and exponentiates.
fn stabilised_exp<T: Real>(g: &mut Graph<T>, d: Var, m: &[T]) -> Result<Var> {
    let n = m.len();
    let cols = g.shape(d)[1];
    let mm = g.constant([n, cols], m.iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect())?;
    let shifted = g.sub(d, mm)?;
    Ok(g.exp(shifted))
}

fn guard<T: Real>(g: &mut Graph<T>, raw: Var, m: &[T]) -> Result<Var> {
    let floor = g.constant([m.len(), 1], m.iter().map(|&x| (-x).exp()).collect())?;
    let a = g.abs(raw);
    g.maximum(a, floor)
}

/// Parallel form from a zero initial state.
pub fn parallel<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, i_pre: Var, f_pre: Var) -> Result<Var> {
    let d = dims(g, q, k, v, i_pre, f_pre)?;
    let (logd, _) = log_gate_matrix(g, i_pre, f_pre, d.len)?;
    let m = row_max(g.value(logd), d.len, None);
    let p = stabilised_exp(g, logd, &m)?;
    let kt = g.transpose(k)?;
    let qk = g.matmul(q, kt)?;
    let a = g.scale(qk, T::one() / T::lit(d.d_qk as f64).sqrt());
    let s = g.mul(a, p)?;
    let r = g.row_sum(s)?;
    let den = guard(g, r, &m)?;
    let num = g.matmul(s, v)?;
    g.div_rows(num, den)
}

/// Step-by-step recurrence.
pub fn recurrent<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    i_pre: Var,
    f_pre: Var,
    init: &MlstmState<T>,
) -> Result<(Var, GraphState<T>)> {
    let d = dims(g, q, k, v, i_pre, f_pre)?;
    let scale = T::one() / T::lit(d.d_qk as f64).sqrt();
    let mut st = init_state(g, init, &d)?;
    let mut rows = Vec::with_capacity(d.len);
    for t in 0..d.len {
        let qt = g.slice_rows(q, t, t + 1)?;
        let kraw = g.slice_rows(k, t, t + 1)?;
        let kt = g.scale(kraw, scale);
        let vt = g.slice_rows(v, t, t + 1)?;
        let it = g.slice_rows(i_pre, t, t + 1)?;
        let ft = g.slice_rows(f_pre, t, t + 1)?;
        let lf = g.log_sigmoid(ft);
        let m_new = (g.value(lf)[0] + st.m).max(g.value(it)[0]);
        let fshift = g.add_scalar(lf, st.m - m_new);
        let fgate = g.exp(fshift);
        let ishift = g.add_scalar(it, -m_new);
        let igate = g.exp(ishift);
        let vcol = g.transpose(vt)?;
        let outer = g.matmul(vcol, kt)?;
        let c_keep = g.mul(fgate, st.c)?;
        let c_write = g.mul(igate, outer)?;
        let c = g.add(c_keep, c_write)?;
        let n_keep = g.mul(fgate, st.n)?;
        let n_write = g.mul(igate, kt)?;
        let n = g.add(n_keep, n_write)?;
        let ct = g.transpose(c)?;
        let num = g.matmul(qt, ct)?;
        let nt = g.transpose(n)?;
        let nq = g.matmul(qt, nt)?;
        let den = guard(g, nq, &[m_new])?;
        rows.push(g.div_rows(num, den)?);
        st = GraphState { c, n, m: m_new };
    }
    Ok((g.concat_rows(&rows)?, st))
}

/// Chunkwise form with a carried initial state; ragged last chunk allowed.
#[allow(clippy::too_many_arguments)]
pub fn chunkwise<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    i_pre: Var,
    f_pre: Var,
    chunk: usize,
    init: &MlstmState<T>,
) -> Result<(Var, GraphState<T>)> {
    if chunk == 0 {
        return Err(VilError::config("chunk size must be at least 1"));
    }
    let d = dims(g, q, k, v, i_pre, f_pre)?;
    let scale = T::one() / T::lit(d.d_qk as f64).sqrt();
    let mut st = init_state(g, init, &d)?;
    let mut rows = Vec::new();
    let mut lo = 0;
    while lo < d.len {
        let hi = (lo + chunk).min(d.len);
        let c = hi - lo;
        let qc = g.slice_rows(q, lo, hi)?;
        let kraw = g.slice_rows(k, lo, hi)?;
        let kc = g.scale(kraw, scale);
        let vc = g.slice_rows(v, lo, hi)?;
        let ic = g.slice_rows(i_pre, lo, hi)?;
        let fc = g.slice_rows(f_pre, lo, hi)?;

        let (logd, prefix) = log_gate_matrix(g, ic, fc, c)?;
        let carried = g.add_scalar(prefix, st.m);
        let m = row_max(g.value(logd), c, Some(g.value(carried)));
        let p = stabilised_exp(g, logd, &m)?;
        let kct = g.transpose(kc)?;
        let a = g.matmul(qc, kct)?;
        let s = g.mul(a, p)?;
        let mcol = g.constant([c, 1], m.clone())?;
        let wshift = g.sub(carried, mcol)?;
        let w = g.exp(wshift);

        let intra = g.matmul(s, vc)?;
        let ct = g.transpose(st.c)?;
        let from_state = g.matmul(qc, ct)?;
        let from_state = g.scale_rows(from_state, w)?;
        let num = g.add(intra, from_state)?;
        let r = g.row_sum(s)?;
        let nt = g.transpose(st.n)?;
        let nq = g.matmul(qc, nt)?;
        let nq = g.mul(w, nq)?;
        let den_raw = g.add(r, nq)?;
        let den = guard(g, den_raw, &m)?;
        rows.push(g.div_rows(num, den)?);

        let last = g.slice_rows(prefix, c - 1, c)?;
        let since = g.sub(last, prefix)?;
        let logw = g.add(since, ic)?;
        let m_new = g
            .value(logw)
            .iter()
            .copied()
            .fold(g.value(last)[0] + st.m, T::max);
        let wshift = g.add_scalar(logw, -m_new);
        let ws = g.exp(wshift);
        let kshift = g.add_scalar(last, st.m - m_new);
        let keep = g.exp(kshift);
        let vw = g.scale_rows(vc, ws)?;
        let vwt = g.transpose(vw)?;
        let c_write = g.matmul(vwt, kc)?;
        let c_keep = g.mul(keep, st.c)?;
        let c_new = g.add(c_keep, c_write)?;
        let wst = g.transpose(ws)?;
        let n_write = g.matmul(wst, kc)?;
        let n_keep = g.mul(keep, st.n)?;
        let n_new = g.add(n_keep, n_write)?;
        st = GraphState {
            c: c_new,
            n: n_new,
            m: m_new,
        };
        lo = hi;
    }
    Ok((g.concat_rows(&rows)?, st))
}
