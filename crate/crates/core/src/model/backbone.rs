//! Convolutional image encoder with a small attention neck.

use std::rc::Rc;

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::nn::{AttnDims, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::numeric::{AttnLayout, Graph, ParamGroup, ParamStore, Tensor, Var};

/// Fixed 2-D sinusoidal encoding, `(h·w) × d`. The first half of the channels
/// encodes the row, the second half the column.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 || d == 0 {
        return Err(Error::Config(format!("positional encoding width {d} must be even and positive")));
    }
    let dy = d / 2;
    let axis = |pos: usize, j: usize, n: usize| -> f64 {
        let f = (j / 2) as f64;
        let omega = 1.0 / 10000f64.powf(2.0 * f / n as f64);
        let a = pos as f64 * omega;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    Ok(Tensor::from_fn(&[h * w, d], |i| {
        let (p, c) = (i / d, i % d);
        let (y, x) = (p / w, p % w);
        if c < dy {
            axis(y, c, dy)
        } else {
            axis(x, c - dy, d - dy)
        }
    }))
}

/// Nearest-neighbor row indices resizing an `sh × sw` map to `dh × dw`.
pub(crate) fn nearest_rows(sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<usize> {
    (0..dh * dw)
        .map(|i| {
            let (y, x) = (i / dw, i % dw);
            (y * sh / dh) * sw + x * sw / dw
        })
        .collect()
}

struct Stage {
    down: Conv2d,
    norm: LayerNorm,
    res: Conv2d,
    res_norm: LayerNorm,
}

/// A feature map stored as `(h·w) × c`.
#[derive(Clone, Copy, Debug)]
pub struct MapVar {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

pub struct BackboneOut {
    /// Decode-time features `F′`, `(h·w) × d_model` at stride 8.
    pub feat: MapVar,
    /// Pyramid levels at strides 4/8/16/32, projected to `d_proto`.
    pub pyramid: [MapVar; 4],
    /// Unprojected pyramid levels (native widths).
    pub levels: [MapVar; 4],
    /// Stride-2 stem output, used as a high-resolution skip.
    pub stem: MapVar,
}

pub struct Backbone {
    d_model: usize,
    image_size: usize,
    stem: Conv2d,
    stages: Vec<Stage>,
    lateral: [Linear; 3],
    neck_norm: LayerNorm,
    neck_attn: MultiHeadAttention,
    neck_norm2: LayerNorm,
    neck_mlp: Mlp,
    neck_norm3: LayerNorm,
    fpn: Vec<Linear>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Backbone;
        let p = |s: &str| format!("{prefix}.{s}");
        let stem = Conv2d::new(store, &p("stem"), g, 3, cfg.stem_channels, 3, 2, 1, rng);
        let mut stages = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (i, &c) in cfg.pyramid_channels.iter().enumerate() {
            stages.push(Stage {
                down: Conv2d::new(store, &p(&format!("s{i}.down")), g, c_in, c, 3, 2, 1, rng),
                norm: LayerNorm::new(store, &p(&format!("s{i}.norm")), g, c),
                res: Conv2d::new(store, &p(&format!("s{i}.res")), g, c, c, 3, 1, 1, rng),
                res_norm: LayerNorm::new(store, &p(&format!("s{i}.res_norm")), g, c),
            });
            c_in = c;
        }
        let d = cfg.d_model;
        let pc = cfg.pyramid_channels;
        let lateral = [
            Linear::new(store, &p("lat1"), g, pc[1], d, true, rng),
            Linear::new(store, &p("lat2"), g, pc[2], d, true, rng),
            Linear::new(store, &p("lat3"), g, pc[3], d, true, rng),
        ];
        let neck_attn = MultiHeadAttention::new(
            store,
            &p("neck.attn"),
            g,
            AttnDims {
                q_in: d,
                kv_in: d,
                inner: d,
                out: d,
                heads: cfg.attn_heads,
            },
            rng,
        );
        let fpn = pc
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, &p(&format!("fpn{i}")), g, c, cfg.d_proto, true, rng))
            .collect();
        Backbone {
            d_model: d,
            image_size: cfg.image_size,
            stem,
            stages,
            lateral,
            neck_norm: LayerNorm::new(store, &p("neck.norm"), g, d),
            neck_attn,
            neck_norm2: LayerNorm::new(store, &p("neck.norm2"), g, d),
            neck_mlp: Mlp::new(store, &p("neck.mlp"), g, (d, 2 * d, d), rng),
            neck_norm3: LayerNorm::new(store, &p("neck.norm3"), g, d),
            fpn,
        }
    }

    fn conv_block(g: &mut Graph, conv: &Conv2d, norm: &LayerNorm, x: MapVar) -> Result<MapVar> {
        let (y, h, w) = conv.forward(g, x.var, x.h, x.w)?;
        let y = norm.forward(g, y)?;
        Ok(MapVar {
            var: g.gelu(y),
            h,
            w,
        })
    }

    /// Full forward pass. `image` is `(h·w) × 3`.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<BackboneOut> {
        let shape = g.shape(image).to_vec();
        let n = self.image_size;
        if shape != [n * n, 3] {
            return Err(Error::Shape {
                op: "backbone input",
                lhs: shape,
                rhs: vec![n * n, 3],
            });
        }
        // Centred input; the stem has no per-pixel normalisation, which
        // would map every grey pixel to the same vector.
        let x = MapVar {
            var: g.add_scalar(image, -0.5),
            h: n,
            w: n,
        };
        let (y, h, w) = self.stem.forward(g, x.var, x.h, x.w)?;
        let stem = MapVar { var: g.gelu(y), h, w };
        let mut levels = Vec::with_capacity(4);
        let mut cur = stem;
        for st in &self.stages {
            let down = Self::conv_block(g, &st.down, &st.norm, cur)?;
            let r = Self::conv_block(g, &st.res, &st.res_norm, down)?;
            cur = MapVar {
                var: g.add(down.var, r.var)?,
                ..down
            };
            levels.push(cur);
        }
        let levels: [MapVar; 4] = levels.try_into().map_err(|_| Error::Config("backbone needs 4 stages".into()))?;

        // Neck: stride-8 level plus upsampled coarser levels, then one
        // self-attention block over positions.
        let base = levels[1];
        let mut f = self.lateral[0].forward(g, base.var)?;
        for (lat, lvl) in self.lateral[1..].iter().zip(&levels[2..]) {
            let p = lat.forward(g, lvl.var)?;
            let up = g.gather_rows(p, &nearest_rows(lvl.h, lvl.w, base.h, base.w))?;
            f = g.add(f, up)?;
        }
        let f = self.neck_norm.forward(g, f)?;
        let pe = g.input(positional_encoding(base.h, base.w, self.d_model)?);
        let fq = g.add(f, pe)?;
        let layout = Rc::new(AttnLayout::dense(base.h * base.w, base.h * base.w));
        let a = self.neck_attn.forward(g, fq, fq, f, layout)?;
        let f = g.add(f, a)?;
        let f = self.neck_norm2.forward(g, f)?;
        let m = self.neck_mlp.forward(g, f)?;
        let f = g.add(f, m)?;
        let f = self.neck_norm3.forward(g, f)?;

        let mut pyramid = Vec::with_capacity(4);
        for (proj, lvl) in self.fpn.iter().zip(&levels) {
            pyramid.push(MapVar {
                var: proj.forward(g, lvl.var)?,
                ..*lvl
            });
        }
        Ok(BackboneOut {
            feat: MapVar {
                var: f,
                h: base.h,
                w: base.w,
            },
            pyramid: pyramid.try_into().map_err(|_| Error::Config("pyramid".into()))?,
            levels,
            stem,
        })
    }
}
