//! Scaled dot-product attention over pre-projected, head-concatenated inputs.

use crate::TensorError;

pub(crate) struct AttnShape {
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
    pub heads: usize,
}

/// Returns (output `[nq×dim]`, probabilities `[heads×nq×nk]`).
///
/// Masked entries (`mask[i*nk + j] == false`) receive exactly zero weight. A
/// row with no attendable key is an error unless `zero_empty_rows`, in which
/// case its output is all zeros.
pub(crate) fn forward(
    s: &AttnShape,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: Option<&[bool]>,
    zero_empty_rows: bool,
) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let dh = s.dim / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; s.heads * s.nq * s.nk];
    let mut out = vec![0.0; s.nq * s.dim];
    for i in 0..s.nq {
        let row_mask = mask.map(|m| &m[i * s.nk..(i + 1) * s.nk]);
        if let Some(rm) = row_mask {
            if !rm.iter().any(|&b| b) {
                if zero_empty_rows {
                    continue;
                }
                return Err(TensorError::FullyMaskedRow { row: i });
            }
        }
        for h in 0..s.heads {
            let qi = &q[i * s.dim + h * dh..i * s.dim + (h + 1) * dh];
            let p = &mut probs[(h * s.nq + i) * s.nk..(h * s.nq + i + 1) * s.nk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..s.nk {
                if row_mask.is_some_and(|rm| !rm[j]) {
                    continue;
                }
                let kj = &k[j * s.dim + h * dh..j * s.dim + (h + 1) * dh];
                let score = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                p[j] = score;
                max = max.max(score);
            }
            let mut total = 0.0;
            for j in 0..s.nk {
                if row_mask.is_some_and(|rm| !rm[j]) {
                    p[j] = 0.0;
                    continue;
                }
                p[j] = (p[j] - max).exp();
                total += p[j];
            }
            for pj in p.iter_mut() {
                *pj /= total;
            }
            let o = &mut out[i * s.dim + h * dh..i * s.dim + (h + 1) * dh];
            for j in 0..s.nk {
                if p[j] == 0.0 {
                    continue;
                }
                let vj = &v[j * s.dim + h * dh..j * s.dim + (h + 1) * dh];
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += p[j] * vc;
                }
            }
        }
    }
    Ok((out, probs))
}

pub(crate) fn backward(
    s: &AttnShape,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = s.dim / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; s.nk];
    for i in 0..s.nq {
        for h in 0..s.heads {
            let p = &probs[(h * s.nq + i) * s.nk..(h * s.nq + i + 1) * s.nk];
            if p.iter().all(|&x| x == 0.0) {
                continue;
            }
            let go = &grad_out[i * s.dim + h * dh..i * s.dim + (h + 1) * dh];
            let mut weighted = 0.0;
            for j in 0..s.nk {
                let vj = &v[j * s.dim + h * dh..j * s.dim + (h + 1) * dh];
                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += dp[j] * p[j];
                if p[j] != 0.0 {
                    let gvj = &mut gv[j * s.dim + h * dh..j * s.dim + (h + 1) * dh];
                    for (g, o) in gvj.iter_mut().zip(go) {
                        *g += p[j] * o;
                    }
                }
            }
            for j in 0..s.nk {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                let (qo, ko) = (i * s.dim + h * dh, j * s.dim + h * dh);
                for c in 0..dh {
                    gq[qo + c] += ds * k[ko + c];
                    gk[ko + c] += ds * q[qo + c];
                }
            }
        }
    }
    (gq, gk, gv)
}
