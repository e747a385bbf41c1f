//! The mLSTM sequence kernel.
//!
//! Matrix memory `C` (d_v×d_qk), normaliser `n` (d_qk) and log-space
//! stabiliser `m` evolve as
//!
//! ```text
//! g_t = log σ(f̃_t)
//! m_t = max(g_t + m_{t-1}, ĩ_t)
//! C_t = e^{g_t + m_{t-1} - m_t} C_{t-1} + e^{ĩ_t - m_t} v_t (k_t/√d_qk)ᵀ
//! n_t = e^{g_t + m_{t-1} - m_t} n_{t-1} + e^{ĩ_t - m_t} (k_t/√d_qk)
//! h_t = C_t q_t / max(|n_tᵀ q_t|, e^{-m_t})
//! ```
//!
//! Three execution modes compute the same `h`: step-by-step recurrence,
//! the fully parallel masked L×L form, and a chunkwise hybrid that carries
//! state between chunks and runs the parallel form inside each chunk.

pub(crate) mod fused;
pub mod graph;

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{dot, log_sigmoid};
use crate::{Real, Result, VilError};

/// Execution mode of the mLSTM kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelMode {
    Recurrent,
    Parallel,
    /// Chunk size `C ≥ 1`.
    Chunkwise(usize),
}

impl KernelMode {
    pub fn label(&self) -> String {
        match self {
            KernelMode::Recurrent => "recurrent".into(),
            KernelMode::Parallel => "parallel".into(),
            KernelMode::Chunkwise(c) => format!("chunkwise:{c}"),
        }
    }
}

impl TryFrom<String> for KernelMode {
    type Error = VilError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KernelMode> for String {
    fn from(m: KernelMode) -> String {
        m.label()
    }
}

impl std::str::FromStr for KernelMode {
    type Err = VilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(KernelMode::Recurrent),
            "parallel" => Ok(KernelMode::Parallel),
            _ => s
                .strip_prefix("chunkwise:")
                .and_then(|c| c.parse().ok())
                .map(KernelMode::Chunkwise)
                .ok_or_else(|| {
                    VilError::config(format!(
                        "unknown kernel mode {s:?} (recurrent, parallel, chunkwise:C)"
                    ))
                }),
        }
    }
}

/// Recurrent carry of one mLSTM head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlstmState<T> {
    /// Matrix memory, row-major d_v×d_qk.
    pub c: Vec<T>,
    pub n: Vec<T>,
    pub m: T,
    d_qk: usize,
    d_v: usize,
}

impl<T: Real> MlstmState<T> {
    /// Empty memory with the stabiliser at the minus-infinity sentinel.
    pub fn zeros(d_qk: usize, d_v: usize) -> Self {
        Self {
            c: vec![T::zero(); d_v * d_qk],
            n: vec![T::zero(); d_qk],
            m: T::NEG_SENTINEL,
            d_qk,
            d_v,
        }
    }

    pub fn new(c: Vec<T>, n: Vec<T>, m: T, d_qk: usize, d_v: usize) -> Result<Self> {
        if c.len() != d_v * d_qk || n.len() != d_qk {
            return Err(VilError::dim(format!(
                "state with |C|={} |n|={} for d_qk={d_qk} d_v={d_v}",
                c.len(),
                n.len()
            )));
        }
        Ok(Self { c, n, m, d_qk, d_v })
    }

    pub fn d_qk(&self) -> usize {
        self.d_qk
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }
}

/// Query, key and value rows of one head, each row-major `len × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvSequence<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    len: usize,
    d_qk: usize,
    d_v: usize,
}

impl<T: Real> QkvSequence<T> {
    pub fn new(q: Vec<T>, k: Vec<T>, v: Vec<T>, len: usize, d_qk: usize, d_v: usize) -> Result<Self> {
        if len == 0 || d_qk == 0 || d_v == 0 {
            return Err(VilError::dim("empty qkv sequence"));
        }
        if q.len() != len * d_qk || k.len() != len * d_qk || v.len() != len * d_v {
            return Err(VilError::dim(format!(
                "qkv lengths {}/{}/{} for L={len}, d_qk={d_qk}, d_v={d_v}",
                q.len(),
                k.len(),
                v.len()
            )));
        }
        Ok(Self {
            q,
            k,
            v,
            len,
            d_qk,
            d_v,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn d_qk(&self) -> usize {
        self.d_qk
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    fn q_row(&self, t: usize) -> &[T] {
        &self.q[t * self.d_qk..(t + 1) * self.d_qk]
    }

    fn k_row(&self, t: usize) -> &[T] {
        &self.k[t * self.d_qk..(t + 1) * self.d_qk]
    }

    fn v_row(&self, t: usize) -> &[T] {
        &self.v[t * self.d_v..(t + 1) * self.d_v]
    }
}

/// Per-step gate pre-activations ĩ_t and f̃_t.
#[derive(Debug, Clone, PartialEq)]
pub struct GateInputs<T> {
    pub i_pre: Vec<T>,
    pub f_pre: Vec<T>,
}

fn check_inputs<T: Real>(qkv: &QkvSequence<T>, gates: &GateInputs<T>) -> Result<()> {
    if gates.i_pre.len() != qkv.len || gates.f_pre.len() != qkv.len {
        return Err(VilError::dim(format!(
            "gate lengths {}/{} for sequence length {}",
            gates.i_pre.len(),
            gates.f_pre.len(),
            qkv.len
        )));
    }
    Ok(())
}

fn check_state<T: Real>(qkv: &QkvSequence<T>, state: &MlstmState<T>) -> Result<()> {
    if state.d_qk != qkv.d_qk || state.d_v != qkv.d_v {
        return Err(VilError::dim(format!(
            "state dims {}×{} for qkv dims d_qk={} d_v={}",
            state.d_v, state.d_qk, qkv.d_qk, qkv.d_v
        )));
    }
    Ok(())
}

fn check_finite_step<T: Real>(qkv: &QkvSequence<T>, gates: &GateInputs<T>, t: usize) -> Result<()> {
    let finite = |s: &[T]| s.iter().all(|x| x.is_finite());
    if !(finite(qkv.q_row(t))
        && finite(qkv.k_row(t))
        && finite(qkv.v_row(t))
        && gates.i_pre[t].is_finite()
        && gates.f_pre[t].is_finite())
    {
        return Err(VilError::Numeric {
            step: t,
            msg: "non-finite mLSTM input".into(),
        });
    }
    Ok(())
}

fn check_finite_all<T: Real>(qkv: &QkvSequence<T>, gates: &GateInputs<T>) -> Result<()> {
    (0..qkv.len).try_for_each(|t| check_finite_step(qkv, gates, t))
}

fn key_scale<T: Real>(d_qk: usize) -> T {
    T::one() / T::lit(d_qk as f64).sqrt()
}

/// One stabilised recurrence step, updating `state` in place and writing
/// `h_t` into `h`.
#[allow(clippy::too_many_arguments)]
fn step_in_place<T: Real>(
    state: &mut MlstmState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: T,
    f_pre: T,
    h: &mut [T],
) {
    let (d_qk, d_v) = (state.d_qk, state.d_v);
    let scale = key_scale::<T>(d_qk);
    let g = log_sigmoid(f_pre);
    let m_new = (g + state.m).max(i_pre);
    let fg = (g + state.m - m_new).exp();
    let ig = (i_pre - m_new).exp();
    for a in 0..d_v {
        let row = &mut state.c[a * d_qk..(a + 1) * d_qk];
        let iv = ig * v[a] * scale;
        for (c, &kb) in row.iter_mut().zip(k) {
            *c = fg * *c + iv * kb;
        }
    }
    for (nb, &kb) in state.n.iter_mut().zip(k) {
        *nb = fg * *nb + ig * kb * scale;
    }
    state.m = m_new;
    let den = dot(&state.n, q).abs().max((-m_new).exp());
    for (a, out) in h.iter_mut().enumerate() {
        *out = dot(&state.c[a * d_qk..(a + 1) * d_qk], q) / den;
    }
}

/// Single recurrence step from `state`.
pub fn recurrent_step<T: Real>(
    state: &MlstmState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: T,
    f_pre: T,
) -> Result<(Vec<T>, MlstmState<T>)> {
    let qkv = QkvSequence::new(q.to_vec(), k.to_vec(), v.to_vec(), 1, q.len(), v.len())?;
    check_state(&qkv, state)?;
    let gates = GateInputs {
        i_pre: vec![i_pre],
        f_pre: vec![f_pre],
    };
    check_finite_step(&qkv, &gates, 0)?;
    let mut next = state.clone();
    let mut h = vec![T::zero(); state.d_v];
    step_in_place(&mut next, q, k, v, i_pre, f_pre, &mut h);
    Ok((h, next))
}

/// Folds [`recurrent_step`] over the sequence. Returns `H` (L×d_v) and the
/// final state.
pub fn forward_recurrent<T: Real>(
    qkv: &QkvSequence<T>,
    gates: &GateInputs<T>,
    init: &MlstmState<T>,
) -> Result<(Vec<T>, MlstmState<T>)> {
    check_inputs(qkv, gates)?;
    check_state(qkv, init)?;
    let mut state = init.clone();
    let mut out = vec![T::zero(); qkv.len * qkv.d_v];
    for t in 0..qkv.len {
        check_finite_step(qkv, gates, t)?;
        step_in_place(
            &mut state,
            qkv.q_row(t),
            qkv.k_row(t),
            qkv.v_row(t),
            gates.i_pre[t],
            gates.f_pre[t],
            &mut out[t * qkv.d_v..(t + 1) * qkv.d_v],
        );
    }
    Ok((out, state))
}

/// Parallel form from a zero initial state.
///
/// Row `t` weighs position `s ≤ t` by `exp(Σ_{u=s+1..t} g_u + ĩ_s − m_t)`
/// with `m_t` the row maximum; the causal mask is implicit (only `s ≤ t`
/// is visited). Memory is O(L) per row.
pub fn forward_parallel<T: Real>(qkv: &QkvSequence<T>, gates: &GateInputs<T>) -> Result<Vec<T>> {
    check_inputs(qkv, gates)?;
    check_finite_all(qkv, gates)?;
    let lf: Vec<T> = gates.f_pre.iter().map(|&f| log_sigmoid(f)).collect();
    let mut out = vec![T::zero(); qkv.len * qkv.d_v];
    let mut logw = vec![T::zero(); qkv.len];
    for t in 0..qkv.len {
        let m = causal_log_weights(&lf, &gates.i_pre, 0, t, &mut logw);
        let (h, _) = weighted_readout(qkv, t, 0, &logw, m, None);
        out[t * qkv.d_v..(t + 1) * qkv.d_v].copy_from_slice(&h);
    }
    Ok(out)
}

/// Fills `logw[s] = Σ_{u=s+1..t} g_u + ĩ_s` for `s ∈ lo..=t`, accumulating
/// the forget sum backwards from `t` so no long prefix sums are differenced.
/// Returns the maximum.
fn causal_log_weights<T: Real>(lf: &[T], i_pre: &[T], lo: usize, t: usize, logw: &mut [T]) -> T {
    let mut acc = T::zero();
    let mut m = T::neg_infinity();
    for s in (lo..=t).rev() {
        let w = acc + i_pre[s];
        logw[s] = w;
        m = m.max(w);
        acc = acc + lf[s];
    }
    m
}

/// `Σ_{s=lo..=t} exp(logw[s] − m) (q_t·k_s/√d) v_s` plus the optional
/// carried-state term, normalised. Returns `(h_t, stabiliser)`.
fn weighted_readout<T: Real>(
    qkv: &QkvSequence<T>,
    t: usize,
    lo: usize,
    logw: &[T],
    m: T,
    carried: Option<(&MlstmState<T>, T)>,
) -> (Vec<T>, T) {
    let scale = key_scale::<T>(qkv.d_qk);
    let q = qkv.q_row(t);
    let mut num = vec![T::zero(); qkv.d_v];
    let mut den = T::zero();
    if let Some((state, w)) = carried {
        if w > T::zero() {
            for (a, o) in num.iter_mut().enumerate() {
                *o = w * dot(&state.c[a * qkv.d_qk..(a + 1) * qkv.d_qk], q);
            }
            den = w * dot(&state.n, q);
        }
    }
    for s in lo..=t {
        let coeff = (logw[s] - m).exp() * dot(q, qkv.k_row(s)) * scale;
        den = den + coeff;
        for (o, &vs) in num.iter_mut().zip(qkv.v_row(s)) {
            *o = *o + coeff * vs;
        }
    }
    let den = den.abs().max((-m).exp());
    for o in num.iter_mut() {
        *o = *o / den;
    }
    (num, m)
}

/// Chunkwise form: state is carried recurrently between chunks of size
/// `chunk` and the parallel form runs inside each chunk. The last chunk may
/// be shorter; `chunk > L` behaves like `chunk = L`.
pub fn forward_chunkwise<T: Real>(
    qkv: &QkvSequence<T>,
    gates: &GateInputs<T>,
    chunk: usize,
    init: &MlstmState<T>,
) -> Result<(Vec<T>, MlstmState<T>)> {
    if chunk == 0 {
        return Err(VilError::config("chunk size must be at least 1"));
    }
    check_inputs(qkv, gates)?;
    check_state(qkv, init)?;
    check_finite_all(qkv, gates)?;
    let (d_qk, d_v) = (qkv.d_qk, qkv.d_v);
    let scale = key_scale::<T>(d_qk);
    let lf: Vec<T> = gates.f_pre.iter().map(|&f| log_sigmoid(f)).collect();
    let mut state = init.clone();
    let mut out = vec![T::zero(); qkv.len * d_v];
    let mut logw = vec![T::zero(); qkv.len];
    let mut lo = 0;
    while lo < qkv.len {
        let hi = (lo + chunk).min(qkv.len);
        // Forget mass accumulated since the chunk start, inclusive.
        let mut decay = T::zero();
        for t in lo..hi {
            decay = decay + lf[t];
            let carried = decay + state.m;
            let m = causal_log_weights(&lf, &gates.i_pre, lo, t, &mut logw).max(carried);
            let (h, _) = weighted_readout(qkv, t, lo, &logw, m, Some((&state, (carried - m).exp())));
            out[t * d_v..(t + 1) * d_v].copy_from_slice(&h);
        }
        let carried = decay + state.m;
        let m_new = causal_log_weights(&lf, &gates.i_pre, lo, hi - 1, &mut logw).max(carried);
        let keep = (carried - m_new).exp();
        for c in state.c.iter_mut() {
            *c = keep * *c;
        }
        for n in state.n.iter_mut() {
            *n = keep * *n;
        }
        for s in lo..hi {
            let w = (logw[s] - m_new).exp() * scale;
            let k = qkv.k_row(s);
            for (a, &va) in qkv.v_row(s).iter().enumerate() {
                let wv = w * va;
                for (c, &kb) in state.c[a * d_qk..(a + 1) * d_qk].iter_mut().zip(k) {
                    *c = *c + wv * kb;
                }
            }
            for (n, &kb) in state.n.iter_mut().zip(k) {
                *n = *n + w * kb;
            }
        }
        state.m = m_new;
        lo = hi;
    }
    Ok((out, state))
}

/// Runs the requested mode from a zero initial state.
pub fn forward<T: Real>(
    mode: KernelMode,
    qkv: &QkvSequence<T>,
    gates: &GateInputs<T>,
) -> Result<Vec<T>> {
    let init = MlstmState::zeros(qkv.d_qk, qkv.d_v);
    match mode {
        KernelMode::Recurrent => forward_recurrent(qkv, gates, &init).map(|r| r.0),
        KernelMode::Parallel => forward_parallel(qkv, gates),
        KernelMode::Chunkwise(c) => forward_chunkwise(qkv, gates, c, &init).map(|r| r.0),
    }
}
