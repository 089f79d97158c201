//! Raw forward/backward kernels over row-major slices.
//!
//! The tape ops and the tape-free inference path both call into these, so
//! a value computed with or without a tape is bitwise identical.

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` accumulated into `da[m×k]`.
pub fn matmul_grad_a(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            da[i * k + l] += acc;
        }
    }
}

/// `aᵀ · g[m×n]` accumulated into `db[k×n]`.
pub fn matmul_grad_b(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let db_row = &mut db[l * n..(l + 1) * n];
            for (d, gv) in db_row.iter_mut().zip(g_row) {
                *d += a_il * gv;
            }
        }
    }
}

pub fn add_bias(x: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = bias.len();
    x.chunks(n)
        .flat_map(|row| row.iter().zip(bias).map(|(v, b)| v + b))
        .collect()
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Mean softmax cross-entropy over the rows of `logits[m×k]`.
///
/// Returns the loss and the row-wise softmax probabilities. Each row is
/// shifted by its maximum before exponentiation.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> (f64, Vec<f64>) {
    let m = labels.len();
    let mut probs = vec![0.0; m * k];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (p, &z) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (z - max).exp();
            denom += *p;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p /= denom;
        }
        total += denom.ln() - (row[label] - max);
    }
    (total / m as f64, probs)
}
