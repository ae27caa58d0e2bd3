//! Masked softmax and the grouped multi-head attention kernel.
//!
//! Masking is additive: masked logits receive [`MASK_NEG`] before the
//! softmax and the resulting probabilities are then forced to exactly zero.

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Stand-in for −∞ in additive attention masks.
pub const MASK_NEG: f64 = -1e9;

/// Additive attention bias. Either one row broadcast over all logit rows or a
/// full `rows × cols` matrix; entries are `0` (keep) or [`MASK_NEG`] (drop).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: Option<usize>,
    cols: usize,
    bias: Vec<f64>,
    allow_empty: bool,
}

impl AttentionMask {
    /// Same key mask for every query row.
    pub fn keys(keep: &[bool]) -> Self {
        AttentionMask {
            rows: None,
            cols: keep.len(),
            bias: keep.iter().map(|&k| if k { 0.0 } else { MASK_NEG }).collect(),
            allow_empty: false,
        }
    }

    /// Per-entry mask, `keep` is row-major `rows × cols`.
    pub fn full(rows: usize, cols: usize, keep: &[bool]) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::Length {
                shape: vec![rows, cols],
                len: keep.len(),
            });
        }
        Ok(AttentionMask {
            rows: Some(rows),
            cols,
            bias: keep.iter().map(|&k| if k { 0.0 } else { MASK_NEG }).collect(),
            allow_empty: false,
        })
    }

    /// Fully masked rows become all-zero instead of an error.
    pub fn allow_empty_rows(mut self) -> Self {
        self.allow_empty = true;
        self
    }

    pub fn bias(&self, r: usize, c: usize) -> f64 {
        match self.rows {
            None => self.bias[c],
            Some(_) => self.bias[r * self.cols + c],
        }
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.bias(r, c) <= MASK_NEG * 0.5
    }
}

/// Row-wise softmax of a 2-D tensor under an optional mask.
pub fn masked_softmax(logits: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let (r, c) = (logits.rows(), logits.cols());
    if let Some(m) = mask {
        if m.cols != c || m.rows.is_some_and(|mr| mr != r) {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: logits.shape().to_vec(),
                rhs: vec![m.rows.unwrap_or(1), m.cols],
            });
        }
    }
    let mut out = logits.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let keep: Vec<bool> = (0..c).map(|j| mask.map_or(true, |m| !m.is_masked(i, j))).collect();
        if let Some(m) = mask {
            for (j, x) in row.iter_mut().enumerate() {
                *x += m.bias(i, j);
            }
        }
        if !softmax_in_place(row, &keep) && !mask.is_some_and(|m| m.allow_empty) {
            return Err(Error::FullyMasked { row: i });
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Softmax over the kept entries of `row`; dropped entries become 0.
/// Returns `false` (and zeroes the row) when nothing is kept.
/// A NaN among the kept entries poisons the whole row.
pub(crate) fn softmax_in_place(row: &mut [f64], keep: &[bool]) -> bool {
    if row.iter().zip(keep).any(|(x, &k)| k && x.is_nan()) {
        row.iter_mut().for_each(|x| *x = f64::NAN);
        return true;
    }
    let max = row
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for (x, &k) in row.iter_mut().zip(keep) {
        *x = if k { (*x - max).exp() } else { 0.0 };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    true
}

/// One attention neighbourhood: each query row attends over the listed key rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Which queries see which keys. Queries outside every group produce zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub groups: Vec<AttnGroup>,
    /// Per key-row validity; invalid keys are masked in every group.
    pub key_valid: Option<Vec<bool>>,
    pub allow_empty: bool,
}

impl AttnLayout {
    /// Every query attends to every key.
    pub fn dense(n_queries: usize, n_keys: usize) -> Self {
        AttnLayout {
            groups: vec![AttnGroup {
                queries: (0..n_queries).collect(),
                keys: (0..n_keys).collect(),
            }],
            key_valid: None,
            allow_empty: false,
        }
    }

    pub fn with_key_mask(mut self, valid: Vec<bool>) -> Self {
        self.key_valid = Some(valid);
        self
    }

    pub fn allowing_empty(mut self) -> Self {
        self.allow_empty = true;
        self
    }
}

fn check_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize)> {
    let (d, dv) = (q.cols(), v.cols());
    if k.cols() != d || k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide key dim {d} / value dim {dv}"
        )));
    }
    Ok((d / heads, dv / heads))
}

/// Returns the output `[n_q × dv]` and the per-(group, head) probability matrices.
pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let (dh, dvh) = check_dims(q, k, v, heads)?;
    let (d, dv) = (q.cols(), v.cols());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.rows() * dv];
    let mut probs = Vec::with_capacity(layout.groups.len() * heads);
    for grp in &layout.groups {
        let nk = grp.keys.len();
        let keep: Vec<bool> = grp
            .keys
            .iter()
            .map(|&j| layout.key_valid.as_ref().map_or(true, |kv| kv[j]))
            .collect();
        for h in 0..heads {
            let mut p = vec![0.0; grp.queries.len() * nk];
            for (a, &qi) in grp.queries.iter().enumerate() {
                let qrow = &q.data()[qi * d + h * dh..qi * d + (h + 1) * dh];
                let row = &mut p[a * nk..(a + 1) * nk];
                for (b, &kj) in grp.keys.iter().enumerate() {
                    let krow = &k.data()[kj * d + h * dh..kj * d + (h + 1) * dh];
                    row[b] = dot(qrow, krow) * scale + if keep[b] { 0.0 } else { MASK_NEG };
                }
                if !softmax_in_place(row, &keep) && !layout.allow_empty {
                    return Err(Error::FullyMasked { row: qi });
                }
                let orow = &mut out[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                for (b, &kj) in grp.keys.iter().enumerate() {
                    let w = row[b];
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &v.data()[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
    }
    Ok((Tensor::from_parts(vec![q.rows(), dv], out), probs))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
    probs: &[Vec<f64>],
    gout: &[f64],
    need: [bool; 3],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (d, dv) = (q.cols(), v.cols());
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; if need[0] { q.len() } else { 0 }];
    let mut dk = vec![0.0; if need[1] { k.len() } else { 0 }];
    let mut dvv = vec![0.0; if need[2] { v.len() } else { 0 }];
    for (gi, grp) in layout.groups.iter().enumerate() {
        let nk = grp.keys.len();
        for h in 0..heads {
            let p = &probs[gi * heads + h];
            let mut ds = vec![0.0; nk];
            for (a, &qi) in grp.queries.iter().enumerate() {
                let prow = &p[a * nk..(a + 1) * nk];
                let go = &gout[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                // dP = dO · Vᵀ, then softmax Jacobian.
                let mut s = 0.0;
                for (b, &kj) in grp.keys.iter().enumerate() {
                    let vrow = &v.data()[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                    ds[b] = dot(go, vrow);
                    s += ds[b] * prow[b];
                }
                for b in 0..nk {
                    ds[b] = prow[b] * (ds[b] - s) * scale;
                }
                let qrow = &q.data()[qi * d + h * dh..qi * d + (h + 1) * dh];
                for (b, &kj) in grp.keys.iter().enumerate() {
                    if prow[b] == 0.0 {
                        continue;
                    }
                    if need[2] {
                        let dvrow = &mut dvv[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                        for (x, y) in dvrow.iter_mut().zip(go) {
                            *x += prow[b] * y;
                        }
                    }
                    if need[0] {
                        let krow = &k.data()[kj * d + h * dh..kj * d + (h + 1) * dh];
                        let dqrow = &mut dq[qi * d + h * dh..qi * d + (h + 1) * dh];
                        for (x, y) in dqrow.iter_mut().zip(krow) {
                            *x += ds[b] * y;
                        }
                    }
                    if need[1] {
                        let dkrow = &mut dk[kj * d + h * dh..kj * d + (h + 1) * dh];
                        for (x, y) in dkrow.iter_mut().zip(qrow) {
                            *x += ds[b] * y;
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dvv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_rows() {
        let t = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        let p = masked_softmax(&t, None).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_survivor_takes_all_mass() {
        let t = Tensor::new(vec![1, 2], vec![5.0, 1.0]).unwrap();
        let m = AttentionMask::keys(&[true, false]);
        let p = masked_softmax(&t, Some(&m)).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn direct_evaluation_of_softmax() {
        let t = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = masked_softmax(&t, None).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, &x) in p.data().iter().enumerate() {
            assert!((x - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_masked_row_errors_unless_allowed() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = AttentionMask::full(2, 2, &[true, true, false, false]).unwrap();
        assert!(matches!(
            masked_softmax(&t, Some(&m)),
            Err(Error::FullyMasked { row: 1 })
        ));
        let p = masked_softmax(&t, Some(&m.allow_empty_rows())).unwrap();
        assert_eq!(&p.data()[2..], &[0.0, 0.0]);
        assert!((p.data()[0] + p.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_must_broadcast() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(masked_softmax(&t, Some(&AttentionMask::keys(&[true, true]))).is_err());
    }

    #[test]
    fn head_divisibility_is_a_config_error() {
        let q = Tensor::zeros(&[2, 6]);
        let layout = AttnLayout::dense(2, 2);
        assert!(matches!(
            forward(&q, &q, &q, 4, &layout),
            Err(Error::Config(_))
        ));
    }
}
