//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are stored in
//! creation order, so a single reverse sweep is a valid topological order for
//! the backward pass. Feature maps are kept as `(positions × channels)`
//! matrices throughout; convolutions are `im2col` followed by a matmul.

use std::collections::HashMap;
use std::rc::Rc;

use super::attention::{self, AttnLayout};
use super::tensor::{dot, gemm_nt, gemm_tn, transpose_raw, Tensor};
use super::{AttentionMask, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Gelu,
    Elu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    Square,
    Tanh,
    /// `x^(-1/2)`.
    Rsqrt,
    /// `1 / x`.
    Recip,
    Clamp(f64, f64),
}

/// Sparse row combination: `out.row(i) = Σ w · input.row(j)` over `entries[i]`.
#[derive(Clone, Debug)]
pub struct RowMix {
    pub in_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    SumAll(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Rc<Vec<usize>>),
    Reshape(Var),
    Im2Col(Var, ConvGeom),
    RowMix(Var, Rc<RowMix>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttnLayout>,
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    track: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl<'p> Graph<'p> {
    /// Graph without parameters; leaves may still require gradients.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track: true,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            ..Graph::new()
        }
    }

    /// Inference graph: nothing is marked for differentiation.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            track: false,
            ..Graph::with_params(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.track && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node bound to a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `v`'s value that is cut off from differentiation.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `a[n×d] + row[d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(a);
        if self.value(row).len() != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(c)
            .flat_map(|ch| ch.iter().zip(&r).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `a[n×d] ⊙ row[d]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(a);
        if self.value(row).len() != c {
            return Err(Error::Shape {
                op: "mul_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(c)
            .flat_map(|ch| ch.iter().zip(&r).map(|(x, y)| x * y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::MulRow(a, row), &[a, row]))
    }

    /// `a[n×d] ⊙ col[n]`: scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if self.value(col).len() != r {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(col).to_vec(),
            });
        }
        let s = self.value(col).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(c)
            .zip(&s)
            .flat_map(|(ch, &k)| ch.iter().map(move |x| x * k))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * k).collect());
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + k).collect());
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a);
        let value = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&x| unary_fwd(kind, x)).collect(),
        );
        self.push(value, Op::Unary(a, kind), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `[n×d] → [1×d]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, c) = self.rows_cols(a);
        let mut out = vec![0.0; c];
        for ch in self.value(a).data().chunks(c) {
            for (o, x) in out.iter_mut().zip(ch) {
                *o += x;
            }
        }
        self.push(Tensor::from_parts(vec![1, c], out), Op::SumRows(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, _) = self.rows_cols(a);
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r as f64)
    }

    /// Column maxima: `[n×d] → [1×d]`; ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_cols(a);
        let t = self.value(a);
        let mut best = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let x = t.data()[i * c + j];
                if x > best[j] {
                    best[j] = x;
                    arg[j] = i;
                }
            }
        }
        self.push(Tensor::from_parts(vec![1, c], best), Op::MaxRows(a, arg), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if start + len > c || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, len],
            });
        }
        let t = self.value(a);
        let data = t.data().chunks(c).flat_map(|ch| ch[start..start + len].iter().copied()).collect();
        Ok(self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.rows_cols(parts[0]).0;
        if parts.iter().any(|&p| self.rows_cols(p).0 != r) {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: self.shape(parts[0]).to_vec(),
                rhs: parts.iter().map(|&p| self.rows_cols(p).0).collect(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.rows_cols(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if start + len > r || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.rows_cols(parts[0]).1;
        if parts.iter().any(|&p| self.rows_cols(p).1 != c) {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: self.shape(parts[0]).to_vec(),
                rhs: parts.iter().map(|&p| self.rows_cols(p).1).collect(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c;
        Ok(self.push(
            Tensor::from_parts(vec![r, c], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Flat element gather: `out[i] = a.data[idx[i]]`, shaped `shape`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if idx.iter().any(|&i| i >= n) || shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let src = self.value(a).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather(a, Rc::new(idx)),
            &[a],
        ))
    }

    /// Row gather: `out.row(i) = a.row(rows[i])`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let c = self.rows_cols(a).1;
        let idx = rows.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
        self.gather(a, idx, &[rows.len(), c])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Patch extraction for convolution. Input `[h·w × c]`, output
    /// `[ho·wo × k·k·c]` with columns ordered `(ky, kx, c)`; zero padding.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let expect = geom.h * geom.w * geom.c;
        if self.value(a).len() != expect || geom.k == 0 || geom.stride == 0 {
            return Err(Error::Shape {
                op: "im2col",
                lhs: self.shape(a).to_vec(),
                rhs: vec![geom.h, geom.w, geom.c],
            });
        }
        let (ho, wo) = geom.out_hw();
        let kc = geom.k * geom.k * geom.c;
        let mut out = vec![0.0; ho * wo * kc];
        let src = self.value(a).data();
        im2col_each(geom, |o, col, i| out[o * kc + col..o * kc + col + geom.c].copy_from_slice(&src[i..i + geom.c]));
        Ok(self.push(
            Tensor::from_parts(vec![ho * wo, kc], out),
            Op::Im2Col(a, geom),
            &[a],
        ))
    }

    pub fn row_mix(&mut self, a: Var, mix: Rc<RowMix>) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if mix.in_rows != r {
            return Err(Error::Shape {
                op: "row_mix",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mix.in_rows],
            });
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; mix.entries.len() * c];
        for (i, ent) in mix.entries.iter().enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            for &(j, w) in ent {
                for (o, x) in orow.iter_mut().zip(&src[j * c..(j + 1) * c]) {
                    *o += w * x;
                }
            }
        }
        let n = mix.entries.len();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::RowMix(a, mix), &[a]))
    }

    /// Row-wise softmax with an optional additive mask; masked entries are exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let value = super::masked_softmax(self.value(a), mask)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        const EPS: f64 = 1e-5;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Grouped multi-head scaled dot-product attention core (no projections).
    /// See [`AttnLayout`] for how queries are matched to keys.
    pub fn attention_core(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttnLayout>,
    ) -> Result<Var> {
        let (value, probs) = attention::forward(
            self.value(q),
            self.value(k),
            self.value(v),
            heads,
            &layout,
        )?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    /// Parameter gradients from a backward pass, in parameter-id order.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(a, &|g| gemm_nt(gout, tb.data(), m, n, k, g));
                acc(b, &|g| gemm_tn(ta.data(), gout, m, k, n, g));
            }
            &Op::Transpose(a) => {
                let s = node.value.shape();
                let t = transpose_raw(gout, s[0], s[1]);
                acc(a, &|g| add_into(g, &t));
            }
            &Op::Add(a, b) => {
                acc(a, &|g| add_into(g, gout));
                acc(b, &|g| add_into(g, gout));
            }
            &Op::Sub(a, b) => {
                acc(a, &|g| add_into(g, gout));
                acc(b, &|g| g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (da, db) = (val(a).data(), val(b).data());
                acc(a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * db[i];
                    }
                });
                acc(b, &|g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * da[i];
                    }
                });
            }
            &Op::AddRow(a, row) => {
                acc(a, &|g| add_into(g, gout));
                let c = val(row).len();
                acc(row, &|g| {
                    for ch in gout.chunks(c) {
                        add_into(g, ch);
                    }
                });
            }
            &Op::MulRow(a, row) => {
                let r = val(row).data();
                let c = r.len();
                acc(a, &|g| {
                    for (gc, oc) in g.chunks_mut(c).zip(gout.chunks(c)) {
                        for j in 0..c {
                            gc[j] += oc[j] * r[j];
                        }
                    }
                });
                let da = val(a).data();
                acc(row, &|g| {
                    for (oc, ac) in gout.chunks(c).zip(da.chunks(c)) {
                        for j in 0..c {
                            g[j] += oc[j] * ac[j];
                        }
                    }
                });
            }
            &Op::MulCol(a, col) => {
                let s = val(col).data();
                let c = val(a).cols();
                acc(a, &|g| {
                    for (i, (gc, oc)) in g.chunks_mut(c).zip(gout.chunks(c)).enumerate() {
                        for j in 0..c {
                            gc[j] += oc[j] * s[i];
                        }
                    }
                });
                let da = val(a).data();
                acc(col, &|g| {
                    for (i, (oc, ac)) in gout.chunks(c).zip(da.chunks(c)).enumerate() {
                        g[i] += dot(oc, ac);
                    }
                });
            }
            &Op::Scale(a, k) => acc(a, &|g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += k * y)),
            &Op::AddScalar(a) => acc(a, &|g| add_into(g, gout)),
            &Op::Unary(a, kind) => {
                let (x, y) = (val(a).data(), node.value.data());
                acc(a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * unary_grad(kind, x[i], y[i]);
                    }
                });
            }
            &Op::SumAll(a) => acc(a, &|g| g.iter_mut().for_each(|x| *x += gout[0])),
            &Op::SumRows(a) => {
                let c = gout.len();
                acc(a, &|g| {
                    for gc in g.chunks_mut(c) {
                        add_into(gc, gout);
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let c = gout.len();
                acc(*a, &|g| {
                    for (j, &i) in arg.iter().enumerate() {
                        g[i * c + j] += gout[j];
                    }
                });
            }
            &Op::SliceCols(a, start) => {
                let c = val(a).cols();
                let len = node.value.cols();
                acc(a, &|g| {
                    for (gc, oc) in g.chunks_mut(c).zip(gout.chunks(len)) {
                        add_into(&mut gc[start..start + len], oc);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, &|g| {
                        for (gc, oc) in g.chunks_mut(c).zip(gout.chunks(total)) {
                            add_into(gc, &oc[off..off + c]);
                        }
                    });
                    off += c;
                }
            }
            &Op::SliceRows(a, start) => {
                let c = val(a).cols();
                acc(a, &|g| add_into(&mut g[start * c..start * c + gout.len()], gout));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &|g| add_into(g, &gout[off..off + n]));
                    off += n;
                }
            }
            Op::Gather(a, idx) => acc(*a, &|g| {
                for (o, &i) in idx.iter().enumerate() {
                    g[i] += gout[o];
                }
            }),
            &Op::Reshape(a) => acc(a, &|g| add_into(g, gout)),
            &Op::Im2Col(a, geom) => {
                let kc = geom.k * geom.k * geom.c;
                acc(a, &|g| {
                    im2col_each(geom, |o, col, i| {
                        add_into(&mut g[i..i + geom.c], &gout[o * kc + col..o * kc + col + geom.c])
                    })
                });
            }
            Op::RowMix(a, mix) => {
                let c = node.value.cols();
                acc(*a, &|g| {
                    for (i, ent) in mix.entries.iter().enumerate() {
                        let orow = &gout[i * c..(i + 1) * c];
                        for &(j, w) in ent {
                            for (x, y) in g[j * c..(j + 1) * c].iter_mut().zip(orow) {
                                *x += w * y;
                            }
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(a, &|g| {
                    for ((gc, yc), oc) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                        let s = dot(oc, yc);
                        for j in 0..c {
                            gc[j] += yc[j] * (oc[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*x).cols();
                let gm = val(*gamma).data();
                acc(*x, &|g| {
                    for (i, gc) in g.chunks_mut(c).enumerate() {
                        let oc = &gout[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = oc[j] * gm[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let inv_c = 1.0 / c as f64;
                        for j in 0..c {
                            let d = oc[j] * gm[j];
                            gc[j] += rstd[i] * (d - inv_c * sum_d - xh[j] * inv_c * sum_dx);
                        }
                    }
                });
                acc(*gamma, &|g| {
                    for (oc, xc) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += oc[j] * xc[j];
                        }
                    }
                });
                acc(*beta, &|g| {
                    for oc in gout.chunks(c) {
                        add_into(g, oc);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let need = [wants(*q), wants(*k), wants(*v)];
                let (dq, dk, dv) = attention::backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    *heads,
                    layout,
                    probs,
                    gout,
                    need,
                );
                acc(*q, &|g| add_into(g, &dq));
                acc(*k, &|g| add_into(g, &dk));
                acc(*v, &|g| add_into(g, &dv));
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Visits every in-bounds `(out_position, column_offset, input_offset)` triple of a convolution.
fn im2col_each(geom: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (ho, wo) = geom.out_hw();
    for oy in 0..ho {
        for ox in 0..wo {
            let o = oy * wo + ox;
            for ky in 0..geom.k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.h as isize {
                    continue;
                }
                for kx in 0..geom.k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.w as isize {
                        continue;
                    }
                    let col = (ky * geom.k + kx) * geom.c;
                    let i = (iy as usize * geom.w + ix as usize) * geom.c;
                    f(o, col, i);
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh()),
        Unary::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Square => x * x,
        Unary::Tanh => x.tanh(),
        Unary::Rsqrt => 1.0 / x.sqrt(),
        Unary::Recip => 1.0 / x,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Gelu => {
            let u = GELU_K * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        Unary::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Square => 2.0 * x,
        Unary::Tanh => 1.0 - y * y,
        Unary::Rsqrt => -0.5 * y * y * y,
        Unary::Recip => -y * y,
        Unary::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
