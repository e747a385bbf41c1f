//! Forward rules. Each constructor validates shapes, computes the value and
//! records the node; the matching backward rule lives in `backward.rs`.

use super::kernels::{self, log_sigmoid, sigmoid};
use super::{Binary, Graph, Op, Unary, Var};
use crate::mlstm::fused;
use crate::tensor::numel;
use crate::{Real, Result, VilError};

impl<T: Real> Graph<T> {
    fn dims2(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(x) {
            &[m, n] => Ok((m, n)),
            s => Err(VilError::dim(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn vector_len(&self, x: Var, n: usize, what: &str) -> Result<()> {
        let len = self.value(x).len();
        if len != n {
            return Err(VilError::dim(format!("{what}: expected {n} elements, got {len}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(VilError::dim(format!("matmul {m}×{k} by {k2}×{n}")));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.count_macs(m * k * n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let out = kernels::transpose(self.value(a), m, n);
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (numel(sa), numel(sb));
        let shape = if sa == sb || nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            return Err(VilError::dim(format!(
                "{kind:?}: shapes {sa:?} and {sb:?} are neither equal nor scalar"
            )));
        };
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Maximum => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let out = (0..n)
            .map(|i| f(va[if na == 1 { 0 } else { i }], vb[if nb == 1 { 0 } else { i }]))
            .collect();
        self.count_macs(n);
        Ok(self.push(shape, out, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Maximum, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                Unary::Neg => -v,
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sigmoid => sigmoid(v),
                Unary::LogSigmoid => log_sigmoid(v),
                Unary::Silu => v * sigmoid(v),
                Unary::Abs => v.abs(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.count_macs(out.len());
        self.push(shape, out, Op::Unary(kind, x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|v| **v <= T::zero()) {
            return Err(VilError::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(Unary::Log, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::LogSigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.count_macs(out.len());
        self.push(shape, out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.count_macs(out.len());
        self.push(shape, out, Op::AddScalar(x))
    }

    /// `x[m×n] + b[n]` (bias added to every row).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        self.vector_len(b, n, "add_row bias")?;
        let vb = self.value(b);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i % n])
            .collect();
        self.count_macs(m * n);
        Ok(self.push(vec![m, n], out, Op::AddRow(x, b)))
    }

    /// `x[m×n] ⊙ w[n]` (per-column scale applied to every row).
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mul_row")?;
        self.vector_len(w, n, "mul_row weight")?;
        let vw = self.value(w);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vw[i % n])
            .collect();
        self.count_macs(m * n);
        Ok(self.push(vec![m, n], out, Op::MulRow(x, w)))
    }

    /// Row `i` of `x[m×n]` multiplied by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "scale_rows")?;
        self.vector_len(s, m, "scale_rows factors")?;
        let vs = self.value(s);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs[i / n])
            .collect();
        self.count_macs(m * n);
        Ok(self.push(vec![m, n], out, Op::ScaleRows(x, s)))
    }

    /// Row `i` of `x[m×n]` divided by `d[i]`.
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "div_rows")?;
        self.vector_len(d, m, "div_rows divisors")?;
        let vd = self.value(d);
        if vd.iter().any(|v| *v == T::zero()) {
            return Err(VilError::Domain("division by zero in div_rows".into()));
        }
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v / vd[i / n])
            .collect();
        self.count_macs(m * n);
        Ok(self.push(vec![m, n], out, Op::DivRows(x, d)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        self.count_macs(self.value(x).len());
        self.push(vec![1], vec![s], Op::SumAll(x))
    }

    /// Column means of `x[m×n]`, shape `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mean_rows")?;
        let v = self.value(x);
        let inv = T::one() / T::lit(m as f64);
        let out = (0..n)
            .map(|j| (0..m).map(|i| v[i * n + j]).sum::<T>() * inv)
            .collect();
        self.count_macs(m * n);
        Ok(self.push(vec![1, n], out, Op::MeanRows(x)))
    }

    /// Row sums of `x[m×n]`, shape `[m×1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "row_sum")?;
        let v = self.value(x);
        let out = (0..m).map(|i| v[i * n..(i + 1) * n].iter().copied().sum()).collect();
        self.count_macs(m * n);
        Ok(self.push(vec![m, 1], out, Op::RowSum(x)))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Option<Var>, eps: T) -> Result<Var> {
        self.group_norm(x, 1, gamma, beta, eps)
    }

    /// Normalises each of `groups` equal slices of the last axis to zero
    /// mean and unit variance, then applies a per-channel affine map.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Option<Var>,
        eps: T,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| VilError::dim("norm of a scalar"))?;
        if groups == 0 || d % groups != 0 {
            return Err(VilError::dim(format!("{groups} groups do not divide width {d}")));
        }
        self.vector_len(gamma, d, "norm gamma")?;
        if let Some(b) = beta {
            self.vector_len(b, d, "norm beta")?;
        }
        let seg = d / groups;
        let rows = numel(&shape) / d;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = beta.map(|b| self.value(b));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows * groups);
        let inv_n = T::one() / T::lit(seg as f64);
        for r in 0..rows {
            for g in 0..groups {
                let lo = r * d + g * seg;
                let s = &xv[lo..lo + seg];
                let mean = s.iter().copied().sum::<T>() * inv_n;
                let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let rs = T::one() / (var + eps).sqrt();
                rstd.push(rs);
                for (o, &v) in xhat[lo..lo + seg].iter_mut().zip(s) {
                    *o = (v - mean) * rs;
                }
            }
        }
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % d;
                h * gv[j] + bv.map_or(T::zero(), |b| b[j])
            })
            .collect();
        self.count_macs(xv.len());
        Ok(self.push(
            shape,
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    /// Depthwise 3×3 convolution, zero padding 1, stride 1, on `x[h×w×d]`
    /// with `kernel[3×3×d]`.
    pub fn conv2d_depthwise(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (h, w, d) = match self.shape(x) {
            &[h, w, d] => (h, w, d),
            s => return Err(VilError::dim(format!("conv2d input must be h×w×d, got {s:?}"))),
        };
        match self.shape(kernel) {
            &[3, 3, kd] if kd == d => {}
            &[_, _, kd] if kd == d => {
                return Err(VilError::config(format!(
                    "conv2d kernel must be 3×3, got {:?}",
                    self.shape(kernel)
                )))
            }
            s => return Err(VilError::dim(format!("conv2d kernel {s:?} for {d} channels"))),
        }
        if let Some(b) = bias {
            self.vector_len(b, d, "conv2d bias")?;
        }
        let xv = self.value(x);
        let kv = self.value(kernel);
        let mut out = vec![T::zero(); h * w * d];
        for i in 0..h {
            for j in 0..w {
                let o = &mut out[(i * w + j) * d..(i * w + j + 1) * d];
                for di in 0..3 {
                    let Some(si) = (i + di).checked_sub(1).filter(|&s| s < h) else {
                        continue;
                    };
                    for dj in 0..3 {
                        let Some(sj) = (j + dj).checked_sub(1).filter(|&s| s < w) else {
                            continue;
                        };
                        let xs = &xv[(si * w + sj) * d..(si * w + sj + 1) * d];
                        let ks = &kv[(di * 3 + dj) * d..(di * 3 + dj + 1) * d];
                        for c in 0..d {
                            o[c] = o[c] + xs[c] * ks[c];
                        }
                    }
                }
                if let Some(b) = bias {
                    let bv = &self.nodes[b.0].value;
                    for c in 0..d {
                        o[c] = o[c] + bv[c];
                    }
                }
            }
        }
        self.count_macs(h * w * d * 9 + if bias.is_some() { h * w * d } else { 0 });
        Ok(self.push(vec![h, w, d], out, Op::Conv2d { x, kernel, bias }))
    }

    /// Depthwise causal convolution with kernel size 4 on `x[L×d]`;
    /// `kernel[3]` is the tap on the current position.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (len, d) = self.dims2(x, "causal_conv1d")?;
        match self.shape(kernel) {
            &[4, kd] if kd == d => {}
            s => return Err(VilError::dim(format!("causal conv kernel {s:?} for {d} channels"))),
        }
        if let Some(b) = bias {
            self.vector_len(b, d, "causal conv bias")?;
        }
        let xv = self.value(x);
        let kv = self.value(kernel);
        let mut out = vec![T::zero(); len * d];
        for t in 0..len {
            let o = &mut out[t * d..(t + 1) * d];
            for j in 0..4 {
                let Some(s) = (t + j).checked_sub(3) else {
                    continue;
                };
                for c in 0..d {
                    o[c] = o[c] + kv[j * d + c] * xv[s * d + c];
                }
            }
            if let Some(b) = bias {
                let bv = &self.nodes[b.0].value;
                for c in 0..d {
                    o[c] = o[c] + bv[c];
                }
            }
        }
        self.count_macs(len * d * 4 + if bias.is_some() { len * d } else { 0 });
        Ok(self.push(vec![len, d], out, Op::CausalConv1d { x, kernel, bias }))
    }

    /// Block-diagonal projection: `w[g × in_g × out_g]` maps each of `g`
    /// contiguous input slices of `x[m × g·in_g]` to its own output slice.
    pub fn grouped_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n_in) = self.dims2(x, "grouped_linear")?;
        let (g, in_g, out_g) = match self.shape(w) {
            &[g, i, o] => (g, i, o),
            s => return Err(VilError::dim(format!("grouped weight must be rank 3, got {s:?}"))),
        };
        if g * in_g != n_in {
            return Err(VilError::dim(format!(
                "grouped_linear: {g} groups of {in_g} inputs for width {n_in}"
            )));
        }
        let n_out = g * out_g;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); m * n_out];
        for r in 0..m {
            for gi in 0..g {
                kernels::gemm_acc(
                    &xv[r * n_in + gi * in_g..r * n_in + (gi + 1) * in_g],
                    &wv[gi * in_g * out_g..(gi + 1) * in_g * out_g],
                    &mut out[r * n_out + gi * out_g..r * n_out + (gi + 1) * out_g],
                    1,
                    in_g,
                    out_g,
                );
            }
        }
        self.count_macs(m * n_in * out_g);
        Ok(self.push(vec![m, n_out], out, Op::GroupedLinear(x, w)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(VilError::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape(x)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start >= end || end > m {
            return Err(VilError::dim(format!("row slice {start}..{end} of {m} rows")));
        }
        let value = self.value(x)[start * n..end * n].to_vec();
        Ok(self.push(vec![end - start, n], value, Op::SliceRows(x, start)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(VilError::dim(format!("column slice {start}..{end} of {n} columns")));
        }
        let v = self.value(x);
        let value = (0..m)
            .flat_map(|i| v[i * n + start..i * n + end].iter().copied())
            .collect();
        Ok(self.push(vec![m, end - start], value, Op::SliceCols(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| VilError::dim("concat of nothing"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (m, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(VilError::dim(format!("concat_rows: widths {n} and {pn}")));
            }
            rows += m;
            value.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, n], value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| VilError::dim("concat of nothing"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(VilError::dim(format!("concat_cols: heights {m} and {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, n], value, Op::ConcatCols(parts.to_vec())))
    }

    /// Output row `i` is input row `perm[i]`; `perm` must be a bijection.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "permute_rows")?;
        if perm.len() != m {
            return Err(VilError::dim(format!(
                "permutation of length {} for {m} rows",
                perm.len()
            )));
        }
        let mut seen = vec![false; m];
        for &p in perm {
            if p >= m || std::mem::replace(&mut seen[p], true) {
                return Err(VilError::dim(format!("not a permutation of 0..{m}")));
            }
        }
        let v = self.value(x);
        let value = perm
            .iter()
            .flat_map(|&p| v[p * n..(p + 1) * n].iter().copied())
            .collect();
        Ok(self.push(vec![m, n], value, Op::PermuteRows(x, perm.to_vec())))
    }

    /// Replaces the strict upper triangle of a square matrix by `fill`;
    /// no gradient flows through replaced entries.
    pub fn mask_upper(&mut self, x: Var, fill: T) -> Result<Var> {
        let (m, n) = self.dims2(x, "mask_upper")?;
        if m != n {
            return Err(VilError::dim(format!("mask_upper of non-square {m}×{n}")));
        }
        let mut value = self.value(x).to_vec();
        for t in 0..m {
            for s in t + 1..n {
                value[t * n + s] = fill;
            }
        }
        Ok(self.push(vec![m, n], value, Op::MaskUpper(x)))
    }

    /// Multi-head mLSTM in parallel form from a zero initial state.
    ///
    /// `q`, `k`: `L × heads·d_qk`; `v`: `L × heads·d_v`; gate
    /// pre-activations `L × heads`. Output `L × heads·d_v`.
    pub fn mlstm_parallel(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        i_pre: Var,
        f_pre: Var,
        heads: usize,
    ) -> Result<Var> {
        let (len, qw) = self.dims2(q, "mlstm q")?;
        let (lk, kw) = self.dims2(k, "mlstm k")?;
        let (lv, vw) = self.dims2(v, "mlstm v")?;
        let (li, iw) = self.dims2(i_pre, "mlstm input gate")?;
        let (lf, fw) = self.dims2(f_pre, "mlstm forget gate")?;
        if heads == 0 || qw != kw || qw % heads != 0 || vw % heads != 0 {
            return Err(VilError::dim(format!(
                "mlstm: q width {qw}, k width {kw}, v width {vw} for {heads} heads"
            )));
        }
        if [lk, lv, li, lf].iter().any(|&l| l != len) || iw != heads || fw != heads {
            return Err(VilError::dim(format!(
                "mlstm: inconsistent lengths/gate widths ({len},{lk},{lv},{li}×{iw},{lf}×{fw})"
            )));
        }
        let dims = fused::HeadDims {
            len,
            heads,
            d_qk: qw / heads,
            d_v: vw / heads,
        };
        let out = fused::forward(
            dims,
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(i_pre),
            self.value(f_pre),
        )?;
        self.count_macs(dims.work());
        Ok(self.push(
            vec![len, vw],
            out,
            Op::Mlstm {
                q,
                k,
                v,
                i_pre,
                f_pre,
                heads,
            },
        ))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(VilError::Usage(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let loss = total.ln() + max - z[label];
        let probs = exps.into_iter().map(|e| e / total).collect();
        self.count_macs(z.len());
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }
}
