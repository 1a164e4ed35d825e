//! Shared dense kernels used by both the graph forward pass and the eager
//! inference path. Loop orders are fixed so the two routes agree bit for
//! bit on identical inputs.

pub(crate) use crate::graph::sigmoid;

/// y = W x for row-major W (m x k), x (k).
pub(crate) fn matvec(w: &[f64], m: usize, k: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(x.len(), k);
    let mut y = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for l in 0..k {
            acc += w[i * k + l] * x[l];
        }
        y[i] = acc;
    }
    y
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// In-place softmax with max-subtraction.
pub(crate) fn softmax_inplace(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}
