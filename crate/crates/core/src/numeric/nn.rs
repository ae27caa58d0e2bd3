//! Parameterized building blocks shared by the model modules.

use std::rc::Rc;

use rand::Rng;

use super::attention::AttnLayout;
use super::graph::{ConvGeom, Graph, Var};
use super::params::{ParamGroup, ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(
            format!("{name}.w"),
            group,
            &[d_in, d_out],
            1.0 / (d_in as f64).sqrt(),
            rng,
        );
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), group, &[d_out]));
        Linear { w, b }
    }

    /// Zero-initialized projection, used where an untrained branch must be inert.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add_zeros(format!("{name}.w"), group, &[d_in, d_out]);
        let b = Some(store.add_zeros(format!("{name}.b"), group, &[d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), group, &[dim], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), group, &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, dims.0, dims.1, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, dims.1, dims.2, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// 2-D convolution over `[h·w × c_in]` feature maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = k * k * c_in;
        Conv2d {
            w: store.add_normal(
                format!("{name}.w"),
                group,
                &[fan_in, c_out],
                (2.0 / fan_in as f64).sqrt(),
                rng,
            ),
            b: store.add_zeros(format!("{name}.b"), group, &[c_out]),
            k,
            stride,
            pad,
            c_in,
        }
    }

    /// Returns the output map and its spatial size.
    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let geom = ConvGeom {
            h,
            w,
            c: self.c_in,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let (ho, wo) = geom.out_hw();
        let cols = if self.k == 1 && self.stride == 1 && self.pad == 0 {
            x
        } else {
            g.im2col(x, geom)?
        };
        let wv = g.param(self.w);
        let y = g.matmul(cols, wv)?;
        let b = g.param(self.b);
        Ok((g.add_row(y, b)?, ho, wo))
    }
}

/// Stride-2, kernel-2 transposed convolution (exact ×2 upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub w: ParamId,
    pub b: ParamId,
    pub c_out: usize,
}

impl ConvTranspose2x2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvTranspose2x2 {
            w: store.add_normal(
                format!("{name}.w"),
                group,
                &[c_in, 4 * c_out],
                (1.0 / c_in as f64).sqrt(),
                rng,
            ),
            b: store.add_zeros(format!("{name}.b"), group, &[c_out]),
            c_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let wv = g.param(self.w);
        let y = g.matmul(x, wv)?;
        let c = self.c_out;
        let (ho, wo) = (2 * h, 2 * w);
        let mut idx = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                let src_row = (oy / 2) * w + ox / 2;
                let sub = (oy % 2) * 2 + ox % 2;
                for ch in 0..c {
                    idx.push(src_row * 4 * c + sub * c + ch);
                }
            }
        }
        let shuffled = g.gather(y, idx, &[ho * wo, c])?;
        let b = g.param(self.b);
        g.add_row(shuffled, b)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttnDims {
    pub q_in: usize,
    pub kv_in: usize,
    pub inner: usize,
    pub out: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: AttnDims,
        rng: &mut impl Rng,
    ) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), group, dims.q_in, dims.inner, true, rng),
            k: Linear::new(store, &format!("{name}.k"), group, dims.kv_in, dims.inner, true, rng),
            v: Linear::new(store, &format!("{name}.v"), group, dims.kv_in, dims.inner, true, rng),
            o: Linear::new(store, &format!("{name}.o"), group, dims.inner, dims.out, true, rng),
            heads: dims.heads,
        }
    }

    /// Same as [`MultiHeadAttention::new`] but with a zero output projection,
    /// so a residual branch built on it starts as the identity.
    pub fn new_zero_out(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: AttnDims,
        rng: &mut impl Rng,
    ) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), group, dims.q_in, dims.inner, true, rng),
            k: Linear::new(store, &format!("{name}.k"), group, dims.kv_in, dims.inner, true, rng),
            v: Linear::new(store, &format!("{name}.v"), group, dims.kv_in, dims.inner, true, rng),
            o: Linear::zeros(store, &format!("{name}.o"), group, dims.inner, dims.out),
            heads: dims.heads,
        }
    }

    /// `softmax(QKᵀ/√d + mask)V` per head, concatenated, then projected.
    pub fn forward(
        &self,
        g: &mut Graph,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        layout: Rc<AttnLayout>,
    ) -> Result<Var> {
        let q = self.q.forward(g, q_in)?;
        let k = self.k.forward(g, k_in)?;
        let v = self.v.forward(g, v_in)?;
        let a = g.attention_core(q, k, v, self.heads, layout)?;
        self.o.forward(g, a)
    }
}

/// Divides every row by its L2 norm. A zero row is an error.
pub fn l2_normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let (r, c) = (g.value(x).rows(), g.value(x).cols());
    let sq = g.unary(x, super::graph::Unary::Square);
    let ones = g.input(super::tensor::Tensor::full(&[c, 1], 1.0));
    let n2 = g.matmul(sq, ones)?;
    if g.value(n2).data().iter().any(|&v| v <= 0.0) {
        return Err(crate::error::Error::ZeroNorm);
    }
    let inv = g.unary(n2, super::graph::Unary::Rsqrt);
    debug_assert_eq!(g.value(inv).rows(), r);
    g.mul_col(x, inv)
}
