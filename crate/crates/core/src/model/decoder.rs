//! Multi-class two-way-attention mask decoder: one learned mask token and one
//! hypernetwork per class, all masks from a single pass.

use std::rc::Rc;

use rand::Rng;

use super::backbone::MapVar;
use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::numeric::nn::{AttnDims, ConvTranspose2x2, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::numeric::{AttnLayout, Graph, ParamGroup, ParamId, ParamStore, RowMix, Tensor, Var};

/// Bilinear resize weights (half-pixel centers, edge clamped) from
/// `sh × sw` to `dh × dw`.
pub fn bilinear_mix(sh: usize, sw: usize, dh: usize, dw: usize) -> RowMix {
    let axis = |d: usize, s: usize| -> Vec<(usize, usize, f64)> {
        (0..d)
            .map(|o| {
                let src = ((o as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(s - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(dh, sh), axis(dw, sw));
    let mut entries = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let mut e = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        e.push((yy * sw + xx, w));
                    }
                }
            }
            entries.push(e);
        }
    }
    RowMix {
        in_rows: sh * sw,
        entries,
    }
}

#[derive(Clone, Debug)]
struct TwoWayBlock {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_t2i: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: MultiHeadAttention,
    norm4: LayerNorm,
}

fn mha(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> MultiHeadAttention {
    MultiHeadAttention::new(
        store,
        name,
        ParamGroup::Head,
        AttnDims {
            q_in: d,
            kv_in: d,
            inner: d,
            out: d,
            heads,
        },
        rng,
    )
}

impl TwoWayBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, mlp: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Head;
        TwoWayBlock {
            self_attn: mha(store, &format!("{name}.self"), d, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), g, d),
            cross_t2i: mha(store, &format!("{name}.t2i"), d, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), g, d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), g, (d, mlp, d), rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), g, d),
            cross_i2t: mha(store, &format!("{name}.i2t"), d, heads, rng),
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), g, d),
        }
    }

    /// Returns updated `(tokens, image)`. `tok_pe` is re-added to token
    /// queries/keys, `img_pe` to image queries/keys.
    fn forward(
        &self,
        g: &mut Graph,
        tokens: Var,
        image: Var,
        tok_pe: Var,
        img_pe: Var,
    ) -> Result<(Var, Var)> {
        let (nt, ni) = (g.value(tokens).rows(), g.value(image).rows());
        let tt = Rc::new(AttnLayout::dense(nt, nt));
        let ti = Rc::new(AttnLayout::dense(nt, ni));
        let it = Rc::new(AttnLayout::dense(ni, nt));

        let q = g.add(tokens, tok_pe)?;
        let a = self.self_attn.forward(g, q, q, tokens, tt)?;
        let t = g.add(tokens, a)?;
        let t = self.norm1.forward(g, t)?;

        let q = g.add(t, tok_pe)?;
        let k = g.add(image, img_pe)?;
        let a = self.cross_t2i.forward(g, q, k, image, ti)?;
        let t = g.add(t, a)?;
        let t = self.norm2.forward(g, t)?;

        let m = self.mlp.forward(g, t)?;
        let t = g.add(t, m)?;
        let t = self.norm3.forward(g, t)?;

        let q = g.add(image, img_pe)?;
        let k = g.add(t, tok_pe)?;
        let a = self.cross_i2t.forward(g, q, k, t, it)?;
        let img = g.add(image, a)?;
        let img = self.norm4.forward(g, img)?;
        Ok((t, img))
    }
}

/// Decoder outputs for one image.
pub struct DecoderOut {
    /// Mask logits, `(H·W) × n_cls` at full image resolution.
    pub logits: Var,
    /// Per-class token presence logits, `n_cls × 1`.
    pub scores: Var,
    /// Final class tokens, `n_cls × d`.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub n_cls: usize,
    pub mask_tokens: ParamId,
    blocks: Vec<TwoWayBlock>,
    final_attn: MultiHeadAttention,
    final_norm: LayerNorm,
    pub presence: Linear,
    pub hypernets: Vec<Mlp>,
    up1: ConvTranspose2x2,
    up1_skip: Linear,
    up1_norm: LayerNorm,
    up2: ConvTranspose2x2,
    up2_skip: Linear,
    image_size: usize,
}

pub struct DecoderDims {
    pub n_cls: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp: usize,
    pub mask_channels: usize,
    /// Channel widths of the stride-4 and stride-2 skip features.
    pub skip_channels: (usize, usize),
    pub image_size: usize,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, name: &str, dims: DecoderDims, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Head;
        let d = dims.d;
        let c1 = 2 * dims.mask_channels;
        let mc = dims.mask_channels;
        MaskDecoder {
            n_cls: dims.n_cls,
            mask_tokens: store.add_normal(format!("{name}.mask_tokens"), g, &[dims.n_cls, d], 1.0, rng),
            blocks: (0..dims.blocks)
                .map(|b| TwoWayBlock::new(store, &format!("{name}.block{b}"), d, dims.heads, dims.mlp, rng))
                .collect(),
            final_attn: mha(store, &format!("{name}.final"), d, dims.heads, rng),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), g, d),
            presence: Linear::new(store, &format!("{name}.presence"), g, d, 1, true, rng),
            hypernets: (0..dims.n_cls)
                .map(|c| Mlp::new(store, &format!("{name}.hyper{c}"), g, (d, d, mc), rng))
                .collect(),
            up1: ConvTranspose2x2::new(store, &format!("{name}.up1"), g, d, c1, rng),
            up1_skip: Linear::new(store, &format!("{name}.up1_skip"), g, dims.skip_channels.0, c1, true, rng),
            up1_norm: LayerNorm::new(store, &format!("{name}.up1_norm"), g, c1),
            up2: ConvTranspose2x2::new(store, &format!("{name}.up2"), g, c1, mc, rng),
            up2_skip: Linear::new(store, &format!("{name}.up2_skip"), g, dims.skip_channels.1, mc, true, rng),
            image_size: dims.image_size,
        }
    }

    /// `feat` and `dense` are `F′` and `D`; `sparse` holds one prompt token
    /// per class. `skips` are the stride-4 and stride-2 encoder maps.
    pub fn decode(
        &self,
        g: &mut Graph,
        feat: MapVar,
        dense: Var,
        sparse: Var,
        pe: Var,
        skips: (MapVar, MapVar),
    ) -> Result<DecoderOut> {
        if g.shape(dense) != g.shape(feat.var) {
            return Err(Error::Shape {
                op: "decode (dense prompt vs features)",
                lhs: g.shape(dense).to_vec(),
                rhs: g.shape(feat.var).to_vec(),
            });
        }
        let n = self.n_cls;
        if g.value(sparse).rows() != n {
            return Err(Error::Shape {
                op: "decode (sparse prompt)",
                lhs: g.shape(sparse).to_vec(),
                rhs: vec![n],
            });
        }
        let mt = g.param(self.mask_tokens);
        let tokens = g.add(mt, sparse)?;
        let tok_pe = tokens;
        let mut t = tokens;
        let mut img = g.add(feat.var, dense)?;
        for b in &self.blocks {
            (t, img) = b.forward(g, t, img, tok_pe, pe)?;
        }
        let q = g.add(t, tok_pe)?;
        let k = g.add(img, pe)?;
        let layout = Rc::new(AttnLayout::dense(n, feat.h * feat.w));
        let a = self.final_attn.forward(g, q, k, img, layout)?;
        let t = g.add(t, a)?;
        let t = self.final_norm.forward(g, t)?;
        let scores = self.presence.forward(g, t)?;

        // Upscale ×4 with encoder skips.
        let (s1, s2) = skips;
        let u = self.up1.forward(g, img, feat.h, feat.w)?;
        let k1 = self.up1_skip.forward(g, s1.var)?;
        let u = g.add(u, k1)?;
        let u = self.up1_norm.forward(g, u)?;
        let u = g.gelu(u);
        let u = self.up2.forward(g, u, 2 * feat.h, 2 * feat.w)?;
        let k2 = self.up2_skip.forward(g, s2.var)?;
        let u = g.add(u, k2)?;
        let u = g.gelu(u);
        let (uh, uw) = (4 * feat.h, 4 * feat.w);

        let mut hyper = Vec::with_capacity(n);
        for (c, net) in self.hypernets.iter().enumerate() {
            let row = g.slice_rows(t, c, 1)?;
            hyper.push(net.forward(g, row)?);
        }
        let hyper = g.concat_rows(&hyper)?;
        let ht = g.transpose(hyper)?;
        let low = g.matmul(u, ht)?;
        let logits = if (uh, uw) == (self.image_size, self.image_size) {
            low
        } else {
            let mix = Rc::new(bilinear_mix(uh, uw, self.image_size, self.image_size));
            g.row_mix(low, mix)?
        };
        Ok(DecoderOut {
            logits,
            scores,
            tokens: t,
        })
    }
}

/// Per-class mask logits at image resolution, stored `(H·W) × n_cls`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub h: usize,
    pub w: usize,
    pub logits: Tensor,
}

impl MaskSet {
    pub fn n_cls(&self) -> usize {
        self.logits.cols()
    }

    /// Strict `sigmoid(logit) > p` per pixel for class `c`.
    pub fn binary(&self, c: usize, p: f64) -> Vec<bool> {
        let t = (p / (1.0 - p)).ln();
        (0..self.h * self.w).map(|i| self.logits.at(i, c) > t).collect()
    }

    /// Label map from the highest logit among classes above 0.5 probability.
    /// Classes with `active[c] == false` are ignored; exact ties go to the
    /// lower class id; pixels with no class stay background.
    pub fn semantic_map(&self, active: &[bool]) -> LabelMap {
        let mut out = LabelMap::new(self.h, self.w);
        let n = self.n_cls();
        for i in 0..self.h * self.w {
            let row = self.logits.row(i);
            let mut best: Option<(usize, f64)> = None;
            for c in (0..n).filter(|&c| active[c]) {
                let v = row[c];
                if v > 0.0 && best.map_or(true, |(_, b)| v > b) {
                    best = Some((c, v));
                }
            }
            if let Some((c, _)) = best {
                out.data[i] = c as u8 + 1;
            }
        }
        out
    }
}
