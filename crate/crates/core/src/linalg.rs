//! Small dense kernels: f32 weights against f64 activations, normalization,
//! activation functions, and a power-iteration thin SVD.
//!
//! Weights are stored as row-major `f32`; activations and every reduction are
//! carried in `f64`.

/// Dot product of an `f32` weight row with an `f64` activation vector.
#[inline]
pub fn dot_wf(w: &[f32], x: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    let mut acc = [0.0f64; 4];
    let (wc, xc) = (w.chunks_exact(4), x.chunks_exact(4));
    let tail: f64 = wc
        .remainder()
        .iter()
        .zip(xc.remainder())
        .map(|(&a, &b)| f64::from(a) * b)
        .sum();
    for (a, b) in wc.zip(xc) {
        for i in 0..4 {
            acc[i] += f64::from(a[i]) * b[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y[o] = sum_i w[o * cols + i] * x[i]` for a row-major `rows x cols` matrix.
pub fn matvec(w: &[f32], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    w.chunks_exact(cols).map(|row| dot_wf(row, x)).collect()
}

/// Rows `[row_start, row_start + n_rows)` of a row-major matrix times `x`.
pub fn matvec_rows(w: &[f32], cols: usize, row_start: usize, n_rows: usize, x: &[f64]) -> Vec<f64> {
    w[row_start * cols..(row_start + n_rows) * cols]
        .chunks_exact(cols)
        .map(|row| dot_wf(row, x))
        .collect()
}

/// `y += W[:, col_start..col_start + x.len()] * x` for a row-major `rows x cols` matrix.
pub fn add_matvec_cols(w: &[f32], cols: usize, col_start: usize, x: &[f64], y: &mut [f64]) {
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * cols + col_start..o * cols + col_start + x.len()];
        *yo += dot_wf(row, x);
    }
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm(x: &[f64], gain: &[f32], bias: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (&g, &b))| (v - mean) * inv * f64::from(g) + f64::from(b))
        .collect()
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Projects `v` off the span of the (orthonormal) `basis` and returns the residual.
pub fn orthogonalize(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut r = v.to_vec();
    // two passes keep the residual orthogonal to working precision
    for _ in 0..2 {
        for b in basis {
            let c = dot(&r, b);
            for (ri, bi) in r.iter_mut().zip(b) {
                *ri -= c * bi;
            }
        }
    }
    r
}

/// Result of [`thin_svd_left`]: leading left singular vectors and values.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

/// Top-`k` left singular vectors of the `d x n` matrix whose columns are
/// `columns`, by power iteration on `D Dᵀ` with deflation.
///
/// Stops extracting early once the remaining spectrum is numerically zero, so
/// the returned rank can be smaller than `k`.
pub fn thin_svd_left(columns: &[Vec<f64>], k: usize, tol: f64, max_iter: usize) -> ThinSvd {
    let d = columns.first().map_or(0, Vec::len);
    let mut gram = vec![0.0; d * d];
    for c in columns {
        for i in 0..d {
            let ci = c[i];
            if ci == 0.0 {
                continue;
            }
            for j in 0..d {
                gram[i * d + j] += ci * c[j];
            }
        }
    }
    let trace: f64 = (0..d).map(|i| gram[i * d + i]).sum();

    let mut u: Vec<Vec<f64>> = Vec::new();
    let mut sigma = Vec::new();
    for idx in 0..k.min(d) {
        // deterministic start: a slightly tilted all-ones vector, orthogonalized
        let start: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i * 7 + idx * 13) % 17) as f64).collect();
        let mut v = orthogonalize(&start, &u);
        let n0 = norm(&v);
        if n0 == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= n0);
        let mut eig = 0.0;
        for _ in 0..max_iter.max(1) {
            let mut w = vec![0.0; d];
            for i in 0..d {
                w[i] = dot(&gram[i * d..(i + 1) * d], &v);
            }
            let w = orthogonalize(&w, &u);
            let nw = norm(&w);
            if nw <= trace.abs() * 1e-14 || nw == 0.0 {
                eig = 0.0;
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / nw).collect();
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            v = next;
            eig = nw;
            if delta < tol {
                break;
            }
        }
        if eig <= trace.abs() * 1e-12 || eig == 0.0 {
            break;
        }
        sigma.push(eig.sqrt());
        u.push(v);
    }
    ThinSvd { u, sigma }
}
