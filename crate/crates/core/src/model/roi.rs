//! Mask-derived boxes, ROI alignment on the feature pyramid and the
//! prototype cross-attention that refines per-class scores.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::MapVar;
use super::decoder::MaskSet;
use crate::error::{Error, Result};
use crate::numeric::nn::{AttnDims, Linear, MultiHeadAttention};
use crate::numeric::{AttnLayout, Graph, ParamGroup, ParamStore, RowMix, Var};

/// Tight inclusive box around one class's thresholded mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub class: usize,
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
    pub area: usize,
}

/// One box per class whose mask (`sigmoid > threshold`) covers at least
/// `min_area` pixels.
pub fn mask_to_boxes(masks: &MaskSet, threshold: f64, min_area: usize) -> Vec<RoiBox> {
    let mut out = Vec::new();
    for c in 0..masks.n_cls() {
        let bin = masks.binary(c, threshold);
        let mut b: Option<RoiBox> = None;
        for (i, _) in bin.iter().enumerate().filter(|(_, &on)| on) {
            let (r, col) = (i / masks.w, i % masks.w);
            let bx = b.get_or_insert(RoiBox {
                class: c,
                r0: r,
                c0: col,
                r1: r,
                c1: col,
                area: 0,
            });
            bx.r0 = bx.r0.min(r);
            bx.r1 = bx.r1.max(r);
            bx.c0 = bx.c0.min(col);
            bx.c1 = bx.c1.max(col);
            bx.area += 1;
        }
        if let Some(bx) = b.filter(|bx| bx.area >= min_area.max(1)) {
            out.push(bx);
        }
    }
    out
}

/// Pyramid level for a box: `clamp(⌊log2(√area / 8)⌋, 0, 3)`.
pub fn level_for_area(area: usize) -> usize {
    let v = ((area as f64).sqrt() / 8.0).log2().floor();
    if v.is_nan() || v < 0.0 {
        0
    } else {
        (v as usize).min(3)
    }
}

/// Bilinear sampling weights of an `out × out` grid over `bx` on a map of
/// side `map_h × map_w` whose cells are `stride` image pixels wide. An axis
/// of extent one pixel samples that pixel's centre everywhere.
pub fn roi_align_mix(map_h: usize, map_w: usize, stride: f64, bx: &RoiBox, out: usize) -> RowMix {
    let axis = |lo: usize, hi: usize, n: usize| -> Vec<(usize, usize, f64)> {
        let extent = (hi + 1 - lo) as f64;
        (0..out)
            .map(|i| {
                let px = if hi == lo {
                    lo as f64 + 0.5
                } else {
                    lo as f64 + (i as f64 + 0.5) * extent / out as f64
                };
                let s = (px / stride - 0.5).clamp(0.0, (n - 1) as f64);
                let a = s.floor() as usize;
                (a, (a + 1).min(n - 1), s - a as f64)
            })
            .collect()
    };
    let ys = axis(bx.r0, bx.r1, map_h);
    let xs = axis(bx.c0, bx.c1, map_w);
    let mut entries = Vec::with_capacity(out * out);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let mut e = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    if wy * wx != 0.0 {
                        e.push((yy * map_w + xx, wy * wx));
                    }
                }
            }
            entries.push(e);
        }
    }
    RowMix {
        in_rows: map_h * map_w,
        entries,
    }
}

/// `out² × d` features of `bx` sampled from `map`.
pub fn roi_align(g: &mut Graph, map: MapVar, image_size: usize, bx: &RoiBox, out: usize) -> Result<Var> {
    let stride = image_size as f64 / map.h as f64;
    let mix = Rc::new(roi_align_mix(map.h, map.w, stride, bx, out));
    g.row_mix(map.var, mix)
}

/// Result of refining class scores with ROI features.
pub struct Refined {
    /// Per-class scores after adding the box refinement, `n_cls × 1`.
    pub scores: Var,
    /// Raw per-box logits, `n_boxes × n_cls` (absent without boxes).
    pub box_logits: Option<Var>,
    /// False when refinement was skipped (no boxes or no valid prototype).
    pub applied: bool,
}

#[derive(Clone, Debug)]
pub struct RoiRefiner {
    pub attn: MultiHeadAttention,
    pub classifier: Linear,
    pub out_size: usize,
    pub n_cls: usize,
}

impl RoiRefiner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_cls: usize,
        d: usize,
        heads: usize,
        out_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Head;
        RoiRefiner {
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                g,
                AttnDims {
                    q_in: d,
                    kv_in: d,
                    inner: d,
                    out: d,
                    heads,
                },
                rng,
            ),
            classifier: Linear::zeros(store, &format!("{name}.cls"), g, d, n_cls),
            out_size,
            n_cls,
        }
    }

    /// ROI tokens attend over the valid prototype rows; the pooled result is
    /// classified and each class's box logit is added to its decoder score.
    pub fn refine(
        &self,
        g: &mut Graph,
        roi_feats: &[(RoiBox, Var)],
        protos: Var,
        valid: &[bool],
        scores: Var,
    ) -> Result<Refined> {
        let n = self.n_cls;
        if valid.len() != g.value(protos).rows() {
            return Err(Error::Shape {
                op: "refine_logits",
                lhs: g.shape(protos).to_vec(),
                rhs: vec![valid.len()],
            });
        }
        if roi_feats.is_empty() || !valid.iter().any(|&v| v) {
            return Ok(Refined {
                scores,
                box_logits: None,
                applied: false,
            });
        }
        let nt = self.out_size * self.out_size;
        let nb = roi_feats.len();
        let parts: Vec<Var> = roi_feats.iter().map(|(_, v)| *v).collect();
        let q = g.concat_rows(&parts)?;
        let layout = Rc::new(AttnLayout::dense(nb * nt, n).with_key_mask(valid.to_vec()));
        let a = self.attn.forward(g, q, protos, protos, layout)?;
        let x = g.add(q, a)?;
        let w = 1.0 / nt as f64;
        let pool = Rc::new(RowMix {
            in_rows: nb * nt,
            entries: (0..nb).map(|b| (0..nt).map(|t| (b * nt + t, w)).collect()).collect(),
        });
        let pooled = g.row_mix(x, pool)?;
        let logits = self.classifier.forward(g, pooled)?;
        let flat = g.reshape(logits, &[nb * n, 1])?;
        let mut entries = vec![Vec::new(); n];
        for (b, (bx, _)) in roi_feats.iter().enumerate() {
            entries[bx.class].push((b * n + bx.class, 1.0));
        }
        let pick = g.row_mix(flat, Rc::new(RowMix { in_rows: nb * n, entries }))?;
        Ok(Refined {
            scores: g.add(scores, pick)?,
            box_logits: Some(logits),
            applied: true,
        })
    }
}
