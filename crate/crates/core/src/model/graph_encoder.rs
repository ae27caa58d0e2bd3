//! Label embeddings refined by GATv2 message passing over the part graph.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::GatConfig;
use crate::error::{Error, Result};
use crate::numeric::io::read_tensors;
use crate::numeric::nn::Linear;
use crate::numeric::{AttentionMask, Graph, ParamGroup, ParamId, ParamStore, Tensor, Unary, Var, MASK_NEG};
use crate::ontology::{PartOntology, N_CLASSES};

/// Floor inside `log(W + ε)` so zero-weight edges stay finite.
pub const EDGE_EPS: f64 = 1e-3;

/// Name of the tensor holding label embeddings in an embedding directory.
pub const LABEL_EMBEDDING_KEY: &str = "label_embeddings";

fn l2_normalize_rows(t: &mut Tensor) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Seeded stand-in for text-encoder label embeddings: Gaussian rows,
/// L2-normalized. `13 × d_text`.
pub fn surrogate_label_embeddings(d_text: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::from_fn(&[N_CLASSES, d_text], |_| rng.sample::<f64, _>(StandardNormal));
    l2_normalize_rows(&mut t);
    t
}

/// Loads label embeddings from a tensor directory and L2-normalizes rows.
pub fn load_label_embeddings(dir: &Path) -> Result<Tensor> {
    let mut tensors = read_tensors(dir)?;
    let mut t = tensors
        .remove(LABEL_EMBEDDING_KEY)
        .ok_or_else(|| Error::format(dir, format!("no `{LABEL_EMBEDDING_KEY}` tensor")))?;
    if t.shape().len() != 2 || t.rows() != N_CLASSES {
        return Err(Error::Config(format!(
            "label embeddings have shape {:?}, need {N_CLASSES} rows",
            t.shape()
        )));
    }
    l2_normalize_rows(&mut t);
    Ok(t)
}

/// Attention neighborhoods: every ontology edge in both directions plus a
/// self-loop per node, with the co-occurrence logit bias.
#[derive(Clone, Debug)]
pub struct Neighborhoods {
    pub n: usize,
    /// `n × n` additive bias: 0 on self-loops, `log(W_ij + ε)` on edges,
    /// [`MASK_NEG`] elsewhere.
    pub bias: Tensor,
    pub mask: AttentionMask,
}

impl Neighborhoods {
    pub fn from_ontology(g: &PartOntology) -> Self {
        let n = N_CLASSES;
        let mut keep = vec![false; n * n];
        let mut bias = Tensor::full(&[n, n], MASK_NEG);
        for i in 0..n {
            keep[i * n + i] = true;
            bias.data_mut()[i * n + i] = 0.0;
        }
        for (a, b) in g.edges() {
            let w = (g.weight(a, b) + EDGE_EPS).ln();
            for (i, j) in [(a, b), (b, a)] {
                keep[i * n + j] = true;
                bias.data_mut()[i * n + j] = w;
            }
        }
        Neighborhoods {
            n,
            bias,
            mask: AttentionMask::full(n, n, &keep).expect("square mask"),
        }
    }

    /// Arbitrary graph on `n` nodes given as directed neighbor lists
    /// (`i` attends to `j`), self-loops added, zero bias.
    pub fn from_lists(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut keep = vec![false; n * n];
        for i in 0..n {
            keep[i * n + i] = true;
        }
        for &(i, j) in edges {
            keep[i * n + j] = true;
        }
        let bias = Tensor::from_fn(&[n, n], |k| if keep[k] { 0.0 } else { MASK_NEG });
        Neighborhoods {
            n,
            bias,
            mask: AttentionMask::full(n, n, &keep).expect("square mask"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GatHead {
    pub wl: ParamId,
    pub wr: ParamId,
    pub a: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub slope: f64,
    /// ELU on hidden layers, identity on the output layer.
    pub elu: bool,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_head: usize,
        heads: usize,
        slope: f64,
        elu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Embedding;
        let heads = (0..heads)
            .map(|h| GatHead {
                wl: store.add_normal(format!("{name}.h{h}.wl"), g, &[d_in, d_head], 1.0 / (d_in as f64).sqrt(), rng),
                wr: store.add_normal(format!("{name}.h{h}.wr"), g, &[d_in, d_head], 1.0 / (d_in as f64).sqrt(), rng),
                a: store.add_normal(format!("{name}.h{h}.a"), g, &[d_head, 1], 1.0 / (d_head as f64).sqrt(), rng),
            })
            .collect();
        GatLayer { heads, slope, elu }
    }

    /// One GATv2 layer. Returns the new node features and each head's
    /// attention matrix (row `i` = weights node `i` puts on its neighbors).
    pub fn forward(&self, g: &mut Graph, h: Var, nb: &Neighborhoods) -> Result<(Var, Vec<Var>)> {
        let n = nb.n;
        let left_idx: Vec<usize> = (0..n * n).map(|p| p / n).collect();
        let right_idx: Vec<usize> = (0..n * n).map(|p| p % n).collect();
        let bias = g.input(nb.bias.clone());
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (wl, wr, a) = (g.param(head.wl), g.param(head.wr), g.param(head.a));
            let l = g.matmul(h, wl)?;
            let r = g.matmul(h, wr)?;
            // e_ij = aᵀ LeakyReLU(W_l h_i + W_r h_j) for all ordered pairs.
            let li = g.gather_rows(l, &left_idx)?;
            let rj = g.gather_rows(r, &right_idx)?;
            let s = g.add(li, rj)?;
            let s = g.unary(s, Unary::LeakyRelu(self.slope));
            let e = g.matmul(s, a)?;
            let e = g.reshape(e, &[n, n])?;
            let e = g.add(e, bias)?;
            let alpha = g.masked_softmax(e, Some(&nb.mask))?;
            let msg = g.matmul(alpha, r)?;
            outs.push(if self.elu { g.elu(msg) } else { msg });
            alphas.push(alpha);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok((out, alphas))
    }
}

/// Stacked GATv2 layers producing structure-aware prototypes.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub layers: Vec<GatLayer>,
}

impl GraphEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &GatConfig,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut d = d_in;
        for (l, &heads) in cfg.heads.iter().enumerate() {
            let last = l + 1 == cfg.layers;
            let width = if last { d_out } else { cfg.hidden };
            layers.push(GatLayer::new(
                store,
                &format!("{name}.l{l}"),
                d,
                width / heads,
                heads,
                cfg.slope,
                !last,
                rng,
            ));
            d = width;
        }
        Ok(GraphEncoder { layers })
    }

    pub fn forward(&self, g: &mut Graph, t: Var, nb: &Neighborhoods) -> Result<Var> {
        let mut h = t;
        for layer in &self.layers {
            h = layer.forward(g, h, nb)?.0;
        }
        Ok(h)
    }
}

/// Source of textual prototypes `P_t`.
#[derive(Clone, Debug)]
pub enum TextEncoder {
    Graph(GraphEncoder),
    /// Ablation path: label embeddings through one linear projection.
    Linear(Linear),
}

impl TextEncoder {
    pub fn forward(&self, g: &mut Graph, t: Var, nb: &Neighborhoods) -> Result<Var> {
        match self {
            TextEncoder::Graph(enc) => enc.forward(g, t, nb),
            TextEncoder::Linear(lin) => lin.forward(g, t),
        }
    }
}
