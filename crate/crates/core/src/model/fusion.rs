//! Content-dependent prototype transfer and the prototype-to-prompt encoder.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::nn::{Linear, Mlp, MultiHeadAttention};
use crate::numeric::{AttnLayout, Graph, ParamGroup, ParamId, ParamStore, RowMix, Var};

/// Cross-attention from prototypes to image content with a residual:
/// `P̃ = P + Attn(q = P, k = proj(F′) + PE, v = F′)`. The output projection
/// starts at zero, so an untrained transfer is the identity.
#[derive(Clone, Debug)]
pub struct Cdt {
    pub attn: MultiHeadAttention,
}

impl Cdt {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Head;
        Cdt {
            attn: MultiHeadAttention {
                q: Linear::new(store, &format!("{name}.q"), g, d, d, true, rng),
                k: Linear::new(store, &format!("{name}.k"), g, d, d, true, rng),
                v: Linear::new(store, &format!("{name}.v"), g, d, d, true, rng),
                o: Linear::zeros(store, &format!("{name}.o"), g, d, d),
                heads,
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, protos: Var, feat: Var, pe: Var) -> Result<Var> {
        let (dp, df) = (g.value(protos).cols(), g.value(feat).cols());
        if dp != df {
            return Err(Error::Config(format!(
                "prototype width {dp} differs from feature width {df}"
            )));
        }
        let q = self.attn.q.forward(g, protos)?;
        let k = self.attn.k.forward(g, feat)?;
        let k = g.add(k, pe)?;
        let v = self.attn.v.forward(g, feat)?;
        let layout = Rc::new(AttnLayout::dense(g.value(q).rows(), g.value(k).rows()));
        let a = g.attention_core(q, k, v, self.attn.heads, layout)?;
        let a = self.attn.o.forward(g, a)?;
        g.add(protos, a)
    }
}

/// Similarity-gated activations `A_{i,c} = F′_i + F′_i (F′_i · P̃_c)`,
/// stacked class-major: row `c·n_pos + i` holds `A_{i,c}`. Also returns the
/// raw similarity matrix `F′ P̃ᵀ` (`n_pos × n_cls`).
pub fn ppem_activate(g: &mut Graph, feat: Var, protos: Var) -> Result<(Var, Var)> {
    let (n_pos, n_cls) = (g.value(feat).rows(), g.value(protos).rows());
    let pt = g.transpose(protos)?;
    let sim = g.matmul(feat, pt)?;
    let tiled: Vec<usize> = (0..n_cls * n_pos).map(|r| r % n_pos).collect();
    let f_rep = g.gather_rows(feat, &tiled)?;
    let st = g.transpose(sim)?;
    let s_col = g.reshape(st, &[n_cls * n_pos, 1])?;
    let gate = g.add_scalar(s_col, 1.0);
    Ok((g.mul_col(f_rep, gate)?, sim))
}

pub struct PromptEmbeddings {
    /// Dense prompt `D`, `n_pos × d_model`.
    pub dense: Var,
    /// Sparse prompt `S`, one token per class, `n_cls × d_model`.
    pub sparse: Var,
}

/// Dense and sparse prompt pathways over the activations.
#[derive(Clone, Debug)]
pub struct Ppem {
    pub dense_mlp: Mlp,
    pub dense_proj: Linear,
    pub sparse_mlp: Mlp,
    /// Class-specific embeddings added to sparse tokens, `n_cls × d`.
    pub present: ParamId,
    pub absent: ParamId,
    pub per_class: usize,
}

impl Ppem {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_cls: usize,
        d: usize,
        hidden: usize,
        per_class: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Head;
        Ppem {
            dense_mlp: Mlp::new(store, &format!("{name}.dense_mlp"), g, (d, hidden, per_class), rng),
            dense_proj: Linear::new(store, &format!("{name}.dense_proj"), g, n_cls * per_class, d, true, rng),
            sparse_mlp: Mlp::new(store, &format!("{name}.sparse_mlp"), g, (d, d, d), rng),
            present: store.add_normal(format!("{name}.present"), g, &[n_cls, d], 0.02, rng),
            absent: store.add_normal(format!("{name}.absent"), g, &[n_cls, d], 0.02, rng),
            per_class,
        }
    }

    /// `act` is the stacked output of [`ppem_activate`].
    pub fn embed(&self, g: &mut Graph, act: Var, n_cls: usize, presence: &[bool]) -> Result<PromptEmbeddings> {
        let rows = g.value(act).rows();
        if presence.len() != n_cls || rows % n_cls != 0 {
            return Err(Error::Shape {
                op: "ppem_embed",
                lhs: g.shape(act).to_vec(),
                rhs: vec![n_cls, presence.len()],
            });
        }
        let n_pos = rows / n_cls;
        let k = self.per_class;

        // Dense: shared per-class MLP, classes concatenated along channels,
        // then a 1×1 projection.
        let y = self.dense_mlp.forward(g, act)?;
        let mut idx = Vec::with_capacity(n_pos * n_cls * k);
        for i in 0..n_pos {
            for c in 0..n_cls {
                for j in 0..k {
                    idx.push((c * n_pos + i) * k + j);
                }
            }
        }
        let cat = g.gather(y, idx, &[n_pos, n_cls * k])?;
        let dense = self.dense_proj.forward(g, cat)?;

        // Sparse: mean-pool each class block, MLP, presence embedding.
        let w = 1.0 / n_pos as f64;
        let pool = Rc::new(RowMix {
            in_rows: rows,
            entries: (0..n_cls)
                .map(|c| (0..n_pos).map(|i| (c * n_pos + i, w)).collect())
                .collect(),
        });
        let pooled = g.row_mix(act, pool)?;
        let tok = self.sparse_mlp.forward(g, pooled)?;
        let (pe, ae) = (g.param(self.present), g.param(self.absent));
        let table = g.concat_rows(&[pe, ae])?;
        let pick: Vec<usize> = (0..n_cls)
            .map(|c| if presence[c] { c } else { n_cls + c })
            .collect();
        let emb = g.gather_rows(table, &pick)?;
        let sparse = g.add(tok, emb)?;
        Ok(PromptEmbeddings { dense, sparse })
    }
}

/// Auxiliary per-class presence classifier used to choose the sparse prompt
/// flags at inference: `max_i (F′_i · P̃_c) / √d + MLP(pool(F₃))_c`, where
/// `pool` concatenates mean and max over the coarsest pyramid level.
#[derive(Clone, Debug)]
pub struct PresenceHead {
    pub mlp: Mlp,
}

impl PresenceHead {
    pub fn new(store: &mut ParamStore, name: &str, n_cls: usize, global_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        PresenceHead {
            mlp: Mlp::new(store, &format!("{name}.mlp"), ParamGroup::Head, (2 * global_in, hidden, n_cls), rng),
        }
    }

    /// `sim` is `n_pos × n_cls`, `coarse` the coarsest level `(h·w) × c`.
    /// Returns `1 × n_cls` logits.
    pub fn forward(&self, g: &mut Graph, sim: Var, coarse: Var, d: usize) -> Result<Var> {
        let m = g.max_rows(sim);
        let m = g.scale(m, 1.0 / (d as f64).sqrt());
        let mean = g.mean_rows(coarse);
        let max = g.max_rows(coarse);
        let pooled = g.concat_cols(&[mean, max])?;
        let z = self.mlp.forward(g, pooled)?;
        g.add(m, z)
    }
}
