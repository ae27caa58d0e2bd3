//! Reference retrieval and visual prototypes: a small re-identification
//! embedder, an exact cosine gallery, the reference (image, mask) encoder and
//! the hierarchical class/example attention that pools references into one
//! prototype per class.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::numeric::nn::{l2_normalize_rows, AttnDims, Conv2d, Linear, MultiHeadAttention};
use crate::numeric::{AttnGroup, AttnLayout, Graph, ParamGroup, ParamStore, RowMix, Tensor, Var};

/// Floor in the support-weighted pooling denominator.
pub const POOL_EPS: f64 = 1e-6;

/// Share of the squared norm of a context feature given to its viewpoint
/// component; the rest carries identity.
pub const CONTEXT_VIEW_SHARE: f64 = 0.75;

/// Convolutional vehicle embedder with two unit-norm heads: an identity
/// embedding (the re-identification feature) and a viewpoint embedding.
/// Context retrieval concatenates both, scaled by `√(1 − CONTEXT_VIEW_SHARE)`
/// and `√CONTEXT_VIEW_SHARE`, so references come from similar vehicles seen
/// from a similar viewpoint.
#[derive(Clone, Debug)]
pub struct ReidNet {
    convs: Vec<Conv2d>,
    id_head: Linear,
    view_head: Linear,
    pub image_size: usize,
}

impl ReidNet {
    pub fn new(store: &mut ParamStore, name: &str, image_size: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Embedding;
        let widths = [3, 16, 32, 64, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(store, &format!("{name}.conv{i}"), g, w[0], w[1], 3, 2, 1, rng))
            .collect();
        let side = image_size >> (widths.len() - 1);
        ReidNet {
            convs,
            id_head: Linear::new(store, &format!("{name}.head"), g, widths[4] + 3, d_out, true, rng),
            view_head: Linear::new(store, &format!("{name}.view_head"), g, side * side * widths[4], (d_out / 4).max(1), true, rng),
            image_size,
        }
    }

    /// Unit identity and viewpoint embeddings (`1 × d_id`, `1 × d_view`) of
    /// one `(h·w) × 3` image.
    pub fn embed_parts(&self, g: &mut Graph, image: Var) -> Result<(Var, Var)> {
        let n = self.image_size;
        if g.shape(image) != [n * n, 3] {
            return Err(Error::Shape {
                op: "reid input",
                lhs: g.shape(image).to_vec(),
                rhs: vec![n * n, 3],
            });
        }
        let (mut x, mut h, mut w) = (image, n, n);
        for conv in &self.convs {
            let (y, ho, wo) = conv.forward(g, x, h, w)?;
            x = g.gelu(y);
            (h, w) = (ho, wo);
        }
        // Identity from pooled features and mean colour; viewpoint from the
        // flattened final map, which keeps the layout that separates
        // mirrored views.
        let pooled = g.mean_rows(x);
        let color = g.mean_rows(image);
        let z = g.concat_cols(&[pooled, color])?;
        let id = self.id_head.forward(g, z)?;
        let c = g.value(x).cols();
        let flat = g.reshape(x, &[1, h * w * c])?;
        let view = self.view_head.forward(g, flat)?;
        Ok((l2_normalize_rows(g, id)?, l2_normalize_rows(g, view)?))
    }

    /// Re-identification feature: the `1 × d` unit identity embedding.
    pub fn embed(&self, g: &mut Graph, image: Var) -> Result<Var> {
        Ok(self.embed_parts(g, image)?.0)
    }

    /// Unit context-retrieval feature, identity and viewpoint combined.
    pub fn embed_context(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let (id, view) = self.embed_parts(g, image)?;
        let id = g.scale(id, (1.0 - CONTEXT_VIEW_SHARE).sqrt());
        let view = g.scale(view, CONTEXT_VIEW_SHARE.sqrt());
        g.concat_cols(&[id, view])
    }

    /// Re-identification feature of an image tensor, outside any training graph.
    pub fn embed_tensor(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference(store);
        let x = g.input(image.clone());
        let f = self.embed(&mut g, x)?;
        Ok(g.value(f).data().to_vec())
    }

    /// Context-retrieval feature of an image tensor.
    pub fn context_tensor(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference(store);
        let x = g.input(image.clone());
        let f = self.embed_context(&mut g, x)?;
        Ok(g.value(f).data().to_vec())
    }
}

/// Supervised contrastive loss over a batch of unit embeddings: each anchor
/// is pulled towards every other row with the same label.
pub fn contrastive_loss(g: &mut Graph, emb: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n = labels.len();
    if g.value(emb).rows() != n {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: g.shape(emb).to_vec(),
            rhs: vec![n],
        });
    }
    let et = g.transpose(emb)?;
    let sim = g.matmul(emb, et)?;
    let sim = g.scale(sim, 1.0 / tau);
    let keep: Vec<bool> = (0..n * n).map(|i| i / n != i % n).collect();
    let mask = crate::numeric::AttentionMask::full(n, n, &keep)?;
    let p = g.masked_softmax(sim, Some(&mask))?;
    let pos: Vec<usize> = (0..n * n)
        .filter(|&i| i / n != i % n && labels[i / n] == labels[i % n])
        .collect();
    if pos.is_empty() {
        return Err(Error::Config("contrastive batch has no positive pairs".into()));
    }
    let m = pos.len();
    let pp = g.gather(p, pos, &[m, 1])?;
    let lp = g.log(pp);
    let l = g.mean_all(lp);
    Ok(g.scale(l, -1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: usize,
    pub name: String,
    pub feature: Vec<f64>,
}

/// Exact cosine-similarity index over unit features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gallery {
    pub entries: Vec<GalleryEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    /// Position in [`Gallery::entries`].
    pub index: usize,
    pub id: usize,
    pub score: f64,
}

pub const GALLERY_FILE: &str = "gallery.json";

impl Gallery {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-`k` entries by descending cosine score, ties by ascending id.
    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        self.retrieve_filtered(query, k, |_| true)
    }

    /// As [`Gallery::retrieve`], restricted to entries accepted by `keep`.
    pub fn retrieve_filtered(&self, query: &[f64], k: usize, keep: impl Fn(&GalleryEntry) -> bool) -> Result<Vec<Hit>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyGallery);
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut hits = Vec::with_capacity(self.entries.len());
        for (index, e) in self.entries.iter().enumerate() {
            if e.feature.len() != query.len() {
                return Err(Error::Shape {
                    op: "retrieve",
                    lhs: vec![query.len()],
                    rhs: vec![e.feature.len()],
                });
            }
            if keep(e) {
                let score: f64 = query.iter().zip(&e.feature).map(|(a, b)| a * b).sum();
                hits.push(Hit { index, id: e.id, score });
            }
        }
        // Equal scores (including 0.0 vs -0.0) fall through to the id order.
        hits.sort_by(|a, b| {
            if a.score == b.score {
                a.id.cmp(&b.id)
            } else {
                b.score.total_cmp(&a.score)
            }
        });
        hits.truncate(k);
        Ok(hits)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(GALLERY_FILE);
        let text = serde_json::to_string(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(GALLERY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let g: Gallery = serde_json::from_str(&text)?;
        if g.is_empty() {
            return Err(Error::EmptyGallery);
        }
        Ok(g)
    }
}

/// `flags[c]` is true iff class `c` has at least one pixel in the mask.
pub fn support_flags(mask: &LabelMap, n_cls: usize) -> Vec<bool> {
    let mut f = vec![false; n_cls];
    for &v in &mask.data {
        if v > 0 && (v as usize) <= n_cls {
            f[v as usize - 1] = true;
        }
    }
    f
}

/// One encoded reference: per-class tokens, rows `c·n_tok + t`.
pub struct EncodedRef {
    pub tokens: Var,
    pub flags: Vec<bool>,
}

/// Turns a reference image's features and mask into per-class tokens:
/// each class mask goes through stride-2 convolutions down to the feature
/// resolution and is added to the image features.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    convs: Vec<Conv2d>,
    n_cls: usize,
    image_size: usize,
    feat_side: usize,
}

impl ReferenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_cls: usize,
        image_size: usize,
        feat_side: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ratio = image_size / feat_side.max(1);
        if ratio * feat_side != image_size || !ratio.is_power_of_two() || ratio < 2 {
            return Err(Error::Config(format!(
                "feature side {feat_side} must divide image size {image_size} by a power of two"
            )));
        }
        let steps = ratio.trailing_zeros() as usize;
        let mut widths = vec![1usize];
        for s in 1..steps {
            widths.push((4 << (s - 1)).min(d));
        }
        widths.push(d);
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(store, &format!("{name}.mask{i}"), ParamGroup::Head, w[0], w[1], 2, 2, 0, rng))
            .collect();
        Ok(ReferenceEncoder {
            convs,
            n_cls,
            image_size,
            feat_side,
        })
    }

    pub fn n_tok(&self) -> usize {
        self.feat_side * self.feat_side
    }

    /// `feat` is the reference image's `n_tok × d` feature map.
    pub fn encode(&self, g: &mut Graph, feat: Var, mask: &LabelMap) -> Result<EncodedRef> {
        let (n, s) = (self.image_size, self.feat_side);
        if (mask.h, mask.w) != (n, n) {
            return Err(Error::Shape {
                op: "encode_reference (mask)",
                lhs: vec![mask.h, mask.w],
                rhs: vec![n, n],
            });
        }
        if g.value(feat).rows() != s * s {
            return Err(Error::Shape {
                op: "encode_reference (features)",
                lhs: g.shape(feat).to_vec(),
                rhs: vec![s * s],
            });
        }
        // Class masks stacked vertically; kernel-2 stride-2 convolutions never
        // mix neighbouring blocks because every block side is a multiple of
        // the total stride.
        let k = self.n_cls;
        let mut bin = vec![0.0; k * n * n];
        for (i, &v) in mask.data.iter().enumerate() {
            if v > 0 && (v as usize) <= k {
                bin[(v as usize - 1) * n * n + i] = 1.0;
            }
        }
        let (mut x, mut h, mut w) = (g.input(Tensor::new(vec![k * n * n, 1], bin)?), k * n, n);
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, ho, wo) = conv.forward(g, x, h, w)?;
            x = if i < last { g.gelu(y) } else { y };
            (h, w) = (ho, wo);
        }
        debug_assert_eq!((h, w), (k * s, s));
        let tile: Vec<usize> = (0..k * s * s).map(|r| r % (s * s)).collect();
        let f = g.gather_rows(feat, &tile)?;
        Ok(EncodedRef {
            tokens: g.add(f, x)?,
            flags: support_flags(mask, k),
        })
    }
}

/// Per-class prototypes pooled from the references.
pub struct VisualProtos {
    pub protos: Var,
    /// Classes supported by at least one reference.
    pub valid: Vec<bool>,
}

/// Hierarchical attention over stacked reference tokens followed by
/// support-weighted pooling.
#[derive(Clone, Debug)]
pub struct VisualPrototypeNet {
    proj_in: Linear,
    class_attn: MultiHeadAttention,
    example_attn: MultiHeadAttention,
    joint_attn: MultiHeadAttention,
    proj_out: Linear,
    n_cls: usize,
}

impl VisualPrototypeNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_cls: usize,
        d: usize,
        d_inner: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Head;
        let dims = || AttnDims {
            q_in: d_inner,
            kv_in: d_inner,
            inner: d_inner,
            out: d_inner,
            heads,
        };
        VisualPrototypeNet {
            proj_in: Linear::new(store, &format!("{name}.proj_in"), g, d, d_inner, true, rng),
            class_attn: MultiHeadAttention::new_zero_out(store, &format!("{name}.class_attn"), g, dims(), rng),
            example_attn: MultiHeadAttention::new_zero_out(store, &format!("{name}.example_attn"), g, dims(), rng),
            joint_attn: MultiHeadAttention::new_zero_out(store, &format!("{name}.joint_attn"), g, dims(), rng),
            proj_out: Linear::new(store, &format!("{name}.proj_out"), g, d_inner, d, true, rng),
            n_cls,
        }
    }

    pub fn forward(&self, g: &mut Graph, refs: &[EncodedRef], n_tok: usize) -> Result<VisualProtos> {
        let (k, nc) = (refs.len(), self.n_cls);
        if k == 0 {
            return Err(Error::NoSupport);
        }
        let valid: Vec<bool> = (0..nc).map(|c| refs.iter().any(|r| r.flags[c])).collect();
        if !valid.iter().any(|&v| v) {
            return Err(Error::NoSupport);
        }
        // Row of (example m, class c, token t).
        let row = |m: usize, c: usize, t: usize| (m * nc + c) * n_tok + t;
        let parts: Vec<Var> = refs.iter().map(|r| r.tokens).collect();
        let e = g.concat_rows(&parts)?;
        let key_valid: Vec<bool> = (0..k * nc * n_tok)
            .map(|r| refs[r / (nc * n_tok)].flags[(r / n_tok) % nc])
            .collect();

        let class_groups = (0..k)
            .flat_map(|m| (0..n_tok).map(move |t| (m, t)))
            .map(|(m, t)| (0..nc).map(|c| row(m, c, t)).collect())
            .collect();
        let example_groups = (0..nc)
            .flat_map(|c| (0..n_tok).map(move |t| (c, t)))
            .map(|(c, t)| (0..k).map(|m| row(m, c, t)).collect())
            .collect();
        let joint_groups = (0..n_tok)
            .map(|t| {
                (0..k)
                    .flat_map(|m| (0..nc).map(move |c| (m, c)))
                    .map(|(m, c)| row(m, c, t))
                    .collect()
            })
            .collect();

        let mut x = self.proj_in.forward(g, e)?;
        for (attn, groups) in [
            (&self.class_attn, class_groups),
            (&self.example_attn, example_groups),
            (&self.joint_attn, joint_groups),
        ] {
            let layout = Rc::new(grouped_layout(groups, key_valid.clone()));
            let a = attn.forward(g, x, x, x, layout)?;
            x = g.add(x, a)?;
        }
        let e_hat = self.proj_out.forward(g, x)?;

        let mut entries = Vec::with_capacity(nc);
        for c in 0..nc {
            let support = refs.iter().filter(|r| r.flags[c]).count() as f64;
            let w = 1.0 / (n_tok as f64 * (support + POOL_EPS));
            let mut ent = Vec::new();
            for (m, r) in refs.iter().enumerate() {
                if r.flags[c] {
                    ent.extend((0..n_tok).map(|t| (row(m, c, t), w)));
                }
            }
            entries.push(ent);
        }
        let pool = Rc::new(RowMix {
            in_rows: k * nc * n_tok,
            entries,
        });
        Ok(VisualProtos {
            protos: g.row_mix(e_hat, pool)?,
            valid,
        })
    }
}

fn grouped_layout(groups: Vec<Vec<usize>>, key_valid: Vec<bool>) -> AttnLayout {
    AttnLayout {
        groups: groups
            .into_iter()
            .map(|rows: Vec<usize>| AttnGroup {
                queries: rows.clone(),
                keys: rows,
            })
            .collect(),
        key_valid: Some(key_valid),
        allow_empty: true,
    }
}
