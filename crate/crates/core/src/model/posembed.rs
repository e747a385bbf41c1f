use crate::tensor::Tensor;
use crate::{Real, Result, VilError};

/// Keys cubic convolution weight with `a = −0.5`.
fn keys(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x.powi(2) + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples `n` points to `m` along one axis (corners aligned), reading
/// samples through `at` and extending linearly past the ends.
fn resample_axis(n: usize, m: usize, at: impl Fn(usize) -> f64) -> Vec<f64> {
    let sample = |i: isize| -> f64 {
        if n == 1 {
            return at(0);
        }
        if i < 0 {
            at(0) + i as f64 * (at(1) - at(0))
        } else if i as usize >= n {
            let over = (i as usize - (n - 1)) as f64;
            at(n - 1) + over * (at(n - 1) - at(n - 2))
        } else {
            at(i as usize)
        }
    };
    (0..m)
        .map(|j| {
            let x = if m == 1 {
                (n - 1) as f64 / 2.0
            } else {
                j as f64 * (n - 1) as f64 / (m - 1) as f64
            };
            let base = x.floor();
            let t = x - base;
            let i0 = base as isize;
            (-1..=2)
                .map(|o| keys(t - o as f64) * sample(i0 + o))
                .sum()
        })
        .collect()
}

/// Bicubic resampling of a positional embedding `[(h·w) × D]` laid out on
/// an `h × w` grid to a new grid.
pub fn interpolate_positional<T: Real>(
    pos: &Tensor<T>,
    (h, w): (usize, usize),
    (nh, nw): (usize, usize),
) -> Result<Tensor<T>> {
    if nh == 0 || nw == 0 {
        return Err(VilError::config(format!("degenerate target grid {nh}×{nw}")));
    }
    let d = match pos.shape() {
        &[l, d] if l == h * w => d,
        s => {
            return Err(VilError::dim(format!(
                "positional embedding {s:?} does not fit a {h}×{w} grid"
            )))
        }
    };
    if (h, w) == (nh, nw) {
        return Ok(Tensor::new(pos.shape().to_vec(), pos.data().to_vec())?);
    }
    let src = pos.data();
    // Along rows first, giving h × nw, then along columns.
    let mut rows = vec![0.0; h * nw * d];
    for r in 0..h {
        for c in 0..d {
            let line = resample_axis(w, nw, |x| src[(r * w + x) * d + c].as_f64());
            for (x, v) in line.into_iter().enumerate() {
                rows[(r * nw + x) * d + c] = v;
            }
        }
    }
    let mut out = vec![T::zero(); nh * nw * d];
    for x in 0..nw {
        for c in 0..d {
            let line = resample_axis(h, nh, |r| rows[(r * nw + x) * d + c]);
            for (r, v) in line.into_iter().enumerate() {
                out[(r * nw + x) * d + c] = T::lit(v);
            }
        }
    }
    Tensor::new([nh * nw, d], out)
}
