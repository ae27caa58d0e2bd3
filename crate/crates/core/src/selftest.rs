//! Built-in numerical checks: gradient checks of every differentiable
//! module, brute-force oracles, probability invariants and loss values.
//! Used by the `selftest` command and by the test suites.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::eval::ConfusionAccumulator;
use crate::image::{Image, LabelMap};
use crate::model::context::{Gallery, GalleryEntry, Hit};
use crate::model::graph_encoder::GatLayer;
use crate::model::{
    mask_to_boxes, ppem_activate, Ablation, Cdt, DecoderDims, GatConfig, GraphEncoder, MapVar, MaskDecoder, MaskSet,
    ModelConfig, Neighborhoods, Ppem, PresenceHead, Reference, ReferenceEncoder, RoiBox, RoiRefiner, SegModel,
    VisualPrototypeNet,
};
use crate::model::roi::roi_align;
use crate::model::graph_encoder::surrogate_label_embeddings;
use crate::numeric::{
    grad_check_params, masked_softmax, sigmoid, AttentionMask, GradCheckReport, Graph, ParamGroup, ParamId,
    ParamStore, Tensor, Var,
};
use crate::ontology::{ClassId, PartOntology, N_CLASSES};
use crate::synth::{Sample, SampleRecord, Split, Viewpoint};
use crate::train::losses::{bce_loss, cls_loss, dice_loss, presence_loss, total_loss};
use crate::train::{item_loss, LossWeights, TrainConfig};

/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-5;
/// Random instances per oracle comparison.
pub const ORACLE_INSTANCES: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn grad(name: &str, r: Result<GradCheckReport>) -> Self {
        match r {
            Ok(r) => Self::new(
                name,
                r.max_rel_err <= GRAD_TOL,
                format!(
                    "max rel err {:.2e} over {} entries (worst {}: analytic {:.6e}, numeric {:.6e})",
                    r.max_rel_err, r.checked, r.worst, r.analytic, r.numeric
                ),
            ),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, detail)) => Self::new(name, ok, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Moves every parameter off its initial value so that zero-initialised
/// projections still pass gradient to what precedes them.
fn jitter(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// `Σ v ⊙ R` for a fixed random `R` scaled by `1/√len`, so every output
/// entry matters and the scalar stays O(1) whatever the output size.
fn readout(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(v).len() as f64;
    let r = normal(&mut rng, g.shape(v), 1.0 / n.sqrt());
    let r = g.input(r);
    let p = g.mul(v, r)?;
    Ok(g.sum_all(p))
}

fn check_params(store: &ParamStore, f: impl Fn(&mut Graph) -> Result<Var>, samples: Option<usize>) -> Result<GradCheckReport> {
    grad_check_params(store, f, GRAD_EPS, samples, 7)
}

fn grad_gat() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let n = 6;
    let layer = GatLayer::new(&mut store, "gat", 5, 3, 2, 0.2, true, &mut rng);
    let x = store.add("x", ParamGroup::Head, normal(&mut rng, &[n, 5], 1.0));
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, (i + 1) % n), ((i + 1) % n, i)]).collect();
    let nb = Neighborhoods::from_lists(n, &edges);
    check_params(
        &store,
        |g| {
            let h = g.param(x);
            let (out, _) = layer.forward(g, h, &nb)?;
            readout(g, out, 11)
        },
        None,
    )
}

fn random_ontology(rng: &mut impl Rng) -> Result<PartOntology> {
    let corpus: Vec<BTreeSet<ClassId>> = (0..40)
        .map(|_| (0..N_CLASSES).filter(|_| rng.gen_bool(0.5)).collect())
        .collect();
    PartOntology::build_adjacency().compute_cooccurrence(&corpus)
}

fn grad_graph_encoder() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let cfg = GatConfig {
        layers: 3,
        heads: vec![2, 2, 1],
        hidden: 6,
        slope: 0.2,
    };
    let enc = GraphEncoder::new(&mut store, "gat", &cfg, 5, 4, &mut rng)?;
    let x = store.add("x", ParamGroup::Head, normal(&mut rng, &[N_CLASSES, 5], 1.0));
    let nb = Neighborhoods::from_ontology(&random_ontology(&mut rng)?);
    check_params(
        &store,
        |g| {
            let h = g.param(x);
            let out = enc.forward(g, h, &nb)?;
            readout(g, out, 12)
        },
        Some(300),
    )
}

fn grad_cdt() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let d = 8;
    let cdt = Cdt::new(&mut store, "cdt", d, 2, &mut rng);
    let protos = store.add("p", ParamGroup::Head, normal(&mut rng, &[5, d], 1.0));
    let feat = store.add("f", ParamGroup::Head, normal(&mut rng, &[12, d], 1.0));
    jitter(&mut store, &mut rng, 0.2);
    let pe = normal(&mut rng, &[12, d], 0.5);
    check_params(
        &store,
        |g| {
            let (p, f) = (g.param(protos), g.param(feat));
            let pe = g.input(pe.clone());
            let out = cdt.forward(g, p, f, pe)?;
            readout(g, out, 13)
        },
        None,
    )
}

/// Similarity activation, dense and sparse prompt pathways and the
/// auxiliary presence head.
fn grad_prompts() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let (d, n_cls, n_pos) = (6, 4, 9);
    let ppem = Ppem::new(&mut store, "ppem", n_cls, d, 5, 2, &mut rng);
    let head = PresenceHead::new(&mut store, "presence", n_cls, 3, 5, &mut rng);
    let feat = store.add("f", ParamGroup::Head, normal(&mut rng, &[n_pos, d], 0.5));
    let protos = store.add("p", ParamGroup::Head, normal(&mut rng, &[n_cls, d], 0.5));
    let coarse = store.add("c", ParamGroup::Head, normal(&mut rng, &[4, 3], 1.0));
    let presence = [true, false, true, false];
    check_params(
        &store,
        |g| {
            let (f, p, c) = (g.param(feat), g.param(protos), g.param(coarse));
            let (act, sim) = ppem_activate(g, f, p)?;
            let pr = ppem.embed(g, act, n_cls, &presence)?;
            let z = head.forward(g, sim, c, d)?;
            let a = readout(g, pr.dense, 14)?;
            let b = readout(g, pr.sparse, 15)?;
            let c = readout(g, z, 16)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        None,
    )
}

fn grad_decoder() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let (d, n_cls, size) = (8, 3, 16);
    let dec = MaskDecoder::new(
        &mut store,
        "decoder",
        DecoderDims {
            n_cls,
            d,
            heads: 2,
            blocks: 1,
            mlp: 8,
            mask_channels: 4,
            skip_channels: (4, 3),
            image_size: size,
        },
        &mut rng,
    );
    let side = size / 8;
    let feat = store.add("f", ParamGroup::Head, normal(&mut rng, &[side * side, d], 1.0));
    let dense = store.add("dense", ParamGroup::Head, normal(&mut rng, &[side * side, d], 0.5));
    let sparse = store.add("sparse", ParamGroup::Head, normal(&mut rng, &[n_cls, d], 0.5));
    let s4 = store.add("s4", ParamGroup::Head, normal(&mut rng, &[(size / 4) * (size / 4), 4], 1.0));
    let s2 = store.add("s2", ParamGroup::Head, normal(&mut rng, &[(size / 2) * (size / 2), 3], 1.0));
    jitter(&mut store, &mut rng, 0.1);
    let pe = normal(&mut rng, &[side * side, d], 0.5);
    check_params(
        &store,
        |g| {
            let map = |g: &mut Graph, id, s| MapVar {
                var: g.param(id),
                h: s,
                w: s,
            };
            let f = map(g, feat, side);
            let skips = (map(g, s4, size / 4), map(g, s2, size / 2));
            let (dn, sp) = (g.param(dense), g.param(sparse));
            let pe = g.input(pe.clone());
            let out = dec.decode(g, f, dn, sp, pe, skips)?;
            let a = readout(g, out.logits, 17)?;
            let b = readout(g, out.scores, 18)?;
            g.add(a, b)
        },
        Some(400),
    )
}

fn grad_roi() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let (d, n_cls, size, side) = (8, 3, 32, 8);
    let roi = RoiRefiner::new(&mut store, "roi", n_cls, d, 2, 2, &mut rng);
    let map = store.add("map", ParamGroup::Head, normal(&mut rng, &[side * side, d], 1.0));
    let protos = store.add("p", ParamGroup::Head, normal(&mut rng, &[n_cls, d], 1.0));
    let scores = store.add("s", ParamGroup::Head, normal(&mut rng, &[n_cls, 1], 1.0));
    jitter(&mut store, &mut rng, 0.2);
    let boxes = [
        RoiBox {
            class: 0,
            r0: 3,
            c0: 5,
            r1: 17,
            c1: 26,
            area: 120,
        },
        RoiBox {
            class: 2,
            r0: 20,
            c0: 2,
            r1: 30,
            c1: 9,
            area: 60,
        },
    ];
    let valid = [true, false, true];
    check_params(
        &store,
        |g| {
            let m = MapVar {
                var: g.param(map),
                h: side,
                w: side,
            };
            let mut feats = Vec::new();
            for bx in &boxes {
                feats.push((*bx, roi_align(g, m, size, bx, roi.out_size)?));
            }
            let (p, s) = (g.param(protos), g.param(scores));
            let r = roi.refine(g, &feats, p, &valid, s)?;
            readout(g, r.scores, 19)
        },
        None,
    )
}

fn grad_losses() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let n = 24;
    let p = store.add("p", ParamGroup::Head, Tensor::from_fn(&[n], |_| rng.gen_range(0.05..0.95)));
    let y_bce: Vec<f64> = (0..n).map(|i| if i % 5 == 4 { 0.3 } else { (i % 2) as f64 }).collect();
    let q = store.add("q", ParamGroup::Head, Tensor::from_fn(&[n], |_| rng.gen_range(0.05..0.95)));
    let y_dice: Vec<f64> = (0..n).map(|i| ((i / 3) % 2) as f64).collect();
    let z = store.add("z", ParamGroup::Head, normal(&mut rng, &[6, 1], 2.0));
    let present = [true, false, false, true, true, false];
    let pw = [1.0, 0.5, 2.0, 1.0, 1.5, 1.0];
    let l = store.add("l", ParamGroup::Head, normal(&mut rng, &[4, 5], 1.0));
    let targets = [0, 3, 4, 3];
    let cw = [1.0, 2.0, 0.5, 1.0, 1.5];
    let w = LossWeights::default();
    check_params(
        &store,
        |g| {
            let a = g.param(p);
            let bce = bce_loss(g, a, &y_bce)?;
            let b = g.param(q);
            let dice = dice_loss(g, b, &y_dice)?;
            let c = g.param(z);
            let pres = presence_loss(g, c, &present, &pw)?;
            let d = g.param(l);
            let probs = g.masked_softmax(d, None)?;
            let cls = cls_loss(g, probs, &targets, &cw)?;
            let cls = g.add(cls, pres)?;
            total_loss(g, bce, dice, cls, &w)
        },
        None,
    )
}

/// Model configuration small enough for exhaustive-ish gradient checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        d_model: 8,
        d_proto: 8,
        d_text: 6,
        stem_channels: 3,
        pyramid_channels: [4, 4, 6, 6],
        attn_heads: 2,
        decoder_blocks: 1,
        decoder_mlp: 8,
        mask_channels: 3,
        ppem_hidden: 4,
        ppem_per_class: 2,
        d_reid: 8,
        d_vp: 4,
        roi_size: 2,
        roi_min_area: 1,
        refs: 1,
        gat: GatConfig {
            layers: 2,
            heads: vec![2, 1],
            hidden: 4,
            slope: 0.2,
        },
        ablation: Ablation::FULL,
    }
}

/// A random image with rectangular parts of a few classes.
fn block_sample(rng: &mut impl Rng, size: usize, classes: &[ClassId]) -> Sample {
    let mut image = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            image.set(y, x, [rng.gen(), rng.gen(), rng.gen()]);
        }
    }
    let mut mask = LabelMap::new(size, size);
    for &c in classes {
        let (r0, c0) = (rng.gen_range(0..size - 6), rng.gen_range(0..size - 6));
        let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
        for y in r0..r0 + h {
            for x in c0..c0 + w {
                mask.set(y, x, c as u8 + 1);
            }
        }
    }
    Sample {
        record: SampleRecord {
            name: "block".into(),
            image: String::new(),
            mask: String::new(),
            identity: 0,
            viewpoint: Viewpoint::ALL[0],
            split: Split::Train,
            present: mask.present_classes(),
        },
        image,
        mask,
    }
}

/// Full training loss (all three losses, every component on) of a tiny
/// model against sampled parameters.
fn grad_end_to_end() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = tiny_model_config();
    let emb = surrogate_label_embeddings(cfg.d_text, 0);
    let size = cfg.image_size;
    let mut model = SegModel::new(cfg, emb, random_ontology(&mut rng)?, 3)?;
    jitter(&mut model.store, &mut rng, 0.05);
    let sample = block_sample(&mut rng, size, &[0, 4, 7, 11]);
    let ref_sample = block_sample(&mut rng, size, &[0, 2, 7]);
    let refs = [Reference {
        feat: model.reference_features(&ref_sample.image.to_tensor())?,
        mask: ref_sample.mask.clone(),
    }];
    // Uniform point sampling keeps the chosen points independent of the
    // logits being perturbed.
    let tc = TrainConfig {
        points: 24,
        oversample: 1.0,
        importance: 0.0,
        ..TrainConfig::default()
    };
    check_params(
        &model.store,
        |g| Ok(item_loss(g, &model, &sample, &refs, &tc, 5)?.total),
        Some(400),
    )
}

/// Gradient checks of each differentiable component, the losses and a tiny
/// end-to-end model.
pub fn gradient_suite() -> Vec<CheckResult> {
    vec![
        CheckResult::grad("grad: GATv2 layer", grad_gat()),
        CheckResult::grad("grad: graph encoder", grad_graph_encoder()),
        CheckResult::grad("grad: cross-domain transfer", grad_cdt()),
        CheckResult::grad("grad: prompt embeddings + presence head", grad_prompts()),
        CheckResult::grad("grad: mask decoder", grad_decoder()),
        CheckResult::grad("grad: ROI align + refinement", grad_roi()),
        CheckResult::grad("grad: bce + dice + presence + class losses", grad_losses()),
        CheckResult::grad("grad: end-to-end tiny model", grad_end_to_end()),
    ]
}

fn oracle_cooccurrence(rng: &mut impl Rng, instances: usize) -> Result<(bool, String)> {
    let base = PartOntology::build_adjacency();
    for inst in 0..instances {
        let n = rng.gen_range(1..30);
        let p = rng.gen_range(0.05..0.95);
        let corpus: Vec<BTreeSet<ClassId>> = (0..n)
            .map(|_| (0..N_CLASSES).filter(|_| rng.gen_bool(p)).collect())
            .collect();
        let got = base.compute_cooccurrence(&corpus)?;
        for i in 0..N_CLASSES {
            for j in 0..N_CLASSES {
                let want = if i != j && base.has_edge(i, j) {
                    corpus.iter().filter(|s| s.contains(&i) && s.contains(&j)).count() as f64 / n as f64
                } else {
                    0.0
                };
                if got.weight(i, j) != want {
                    return Ok((false, format!("instance {inst}: W[{i}][{j}] = {} vs {want}", got.weight(i, j))));
                }
            }
        }
    }
    Ok((true, format!("{instances} corpora")))
}

fn oracle_retrieve(rng: &mut impl Rng, instances: usize) -> Result<(bool, String)> {
    for inst in 0..instances {
        let n = rng.gen_range(1..25);
        let dim = rng.gen_range(1..5);
        let mut entries: Vec<GalleryEntry> = Vec::new();
        let mut ids: Vec<usize> = (0..n).collect();
        // Unordered ids and repeated features exercise the tie rule.
        for i in (1..n).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        for &id in &ids {
            let feature = if !entries.is_empty() && rng.gen_bool(0.3) {
                entries[rng.gen_range(0..entries.len())].feature.clone()
            } else {
                (0..dim).map(|_| rng.gen_range(-2i32..=2) as f64 * 0.5).collect()
            };
            entries.push(GalleryEntry {
                id,
                name: format!("e{id}"),
                feature,
            });
        }
        let gallery = Gallery { entries };
        let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2i32..=2) as f64 * 0.5).collect();
        let k = rng.gen_range(1..n + 3);
        let got = gallery.retrieve(&query, k)?;

        // Selection: repeatedly take the best remaining entry.
        let scores: Vec<f64> = gallery
            .entries
            .iter()
            .map(|e| e.feature.iter().zip(&query).map(|(a, b)| a * b).sum())
            .collect();
        let mut taken = vec![false; n];
        let mut want: Vec<Hit> = Vec::new();
        for _ in 0..k.min(n) {
            let mut best: Option<usize> = None;
            for i in (0..n).filter(|&i| !taken[i]) {
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let better = scores[i] > scores[b]
                            || (scores[i] == scores[b] && gallery.entries[i].id < gallery.entries[b].id);
                        Some(if better { i } else { b })
                    }
                };
            }
            let b = best.expect("k ≤ n");
            taken[b] = true;
            want.push(Hit {
                index: b,
                id: gallery.entries[b].id,
                score: scores[b],
            });
        }
        if got != want {
            return Ok((false, format!("instance {inst}: {got:?} vs {want:?}")));
        }
    }
    Ok((true, format!("{instances} galleries")))
}

fn random_labels(rng: &mut impl Rng, h: usize, w: usize) -> LabelMap {
    let mut m = LabelMap::new(h, w);
    for v in m.data.iter_mut() {
        *v = rng.gen_range(0..=N_CLASSES as u8);
    }
    m
}

fn oracle_accumulate(rng: &mut impl Rng, instances: usize) -> Result<(bool, String)> {
    for inst in 0..instances {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let pairs: Vec<(LabelMap, LabelMap)> = (0..rng.gen_range(1..4))
            .map(|_| (random_labels(rng, h, w), random_labels(rng, h, w)))
            .collect();
        let mut acc = ConfusionAccumulator::new();
        for (p, t) in &pairs {
            acc.accumulate(p, t)?;
        }
        for c in 0..N_CLASSES {
            let v = c as u8 + 1;
            let count = |f: &dyn Fn(u8, u8) -> bool| -> u64 {
                pairs
                    .iter()
                    .map(|(p, t)| p.data.iter().zip(&t.data).filter(|(&a, &b)| f(a, b)).count() as u64)
                    .sum()
            };
            let tp = count(&|a, b| a == v && b == v);
            let fp = count(&|a, b| a == v && b != v);
            let fn_ = count(&|a, b| a != v && b == v);
            if (acc.tp[c], acc.fp[c], acc.fn_[c]) != (tp, fp, fn_) {
                return Ok((
                    false,
                    format!(
                        "instance {inst}, class {c}: {:?} vs {:?}",
                        (acc.tp[c], acc.fp[c], acc.fn_[c]),
                        (tp, fp, fn_)
                    ),
                ));
            }
        }
    }
    Ok((true, format!("{instances} label-map sets")))
}

fn oracle_boxes(rng: &mut impl Rng, instances: usize) -> Result<(bool, String)> {
    for inst in 0..instances {
        let (h, w, n_cls) = (rng.gen_range(1..20), rng.gen_range(1..20), rng.gen_range(1..5));
        let threshold = rng.gen_range(0.2..0.8);
        let min_area = rng.gen_range(0..6);
        // Sparse positive logits so that some classes come out empty.
        let density: Vec<f64> = (0..n_cls).map(|_| rng.gen_range(0.0..0.3)).collect();
        let logits = Tensor::from_fn(&[h * w, n_cls], |i| {
            let mag = rng.gen_range(0.01..4.0);
            if rng.gen_bool(density[i % n_cls]) {
                mag
            } else {
                -mag
            }
        });
        let masks = MaskSet { h, w, logits };
        let got = mask_to_boxes(&masks, threshold, min_area);
        let mut want = Vec::new();
        for c in 0..n_cls {
            let on: Vec<(usize, usize)> = (0..h * w)
                .filter(|&i| sigmoid(masks.logits.at(i, c)) > threshold)
                .map(|i| (i / w, i % w))
                .collect();
            if on.is_empty() || on.len() < min_area {
                continue;
            }
            want.push(RoiBox {
                class: c,
                r0: on.iter().map(|p| p.0).min().unwrap(),
                c0: on.iter().map(|p| p.1).min().unwrap(),
                r1: on.iter().map(|p| p.0).max().unwrap(),
                c1: on.iter().map(|p| p.1).max().unwrap(),
                area: on.len(),
            });
        }
        if got != want {
            return Ok((false, format!("instance {inst}: {got:?} vs {want:?}")));
        }
    }
    Ok((true, format!("{instances} mask sets")))
}

/// Brute-force comparisons on `instances` random inputs each.
pub fn oracle_suite(instances: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    vec![
        CheckResult::from_result("oracle: co-occurrence weights", oracle_cooccurrence(&mut rng, instances)),
        CheckResult::from_result("oracle: top-k retrieval", oracle_retrieve(&mut rng, instances)),
        CheckResult::from_result("oracle: confusion accumulation", oracle_accumulate(&mut rng, instances)),
        CheckResult::from_result("oracle: mask to boxes", oracle_boxes(&mut rng, instances)),
    ]
}

fn invariant_softmax(rng: &mut impl Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for inst in 0..200 {
        let (r, c) = (rng.gen_range(1..8), rng.gen_range(1..10));
        let x = normal(rng, &[r, c], 5.0);
        let mut keep: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.6)).collect();
        for i in 0..r {
            keep[i * c + rng.gen_range(0..c)] = true;
        }
        let mask = AttentionMask::full(r, c, &keep)?;
        let y = masked_softmax(&x, Some(&mask))?;
        for i in 0..r {
            let row = y.row(i);
            if let Some(j) = (0..c).find(|&j| !keep[i * c + j] && row[j] != 0.0) {
                return Ok((false, format!("instance {inst}: masked entry ({i},{j}) = {:e}", row[j])));
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok((worst <= 1e-9, format!("max |row sum − 1| = {worst:.2e}")))
}

fn invariant_gat(rng: &mut impl Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for inst in 0..50 {
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "gat", 6, 4, 2, 0.2, true, rng);
        let nb = Neighborhoods::from_ontology(&random_ontology(rng)?);
        let x = normal(rng, &[N_CLASSES, 6], 2.0);
        let mut g = Graph::inference(&store);
        let h = g.input(x);
        let (_, alphas) = layer.forward(&mut g, h, &nb)?;
        for a in alphas {
            let a = g.value(a);
            for i in 0..N_CLASSES {
                for j in 0..N_CLASSES {
                    if nb.mask.is_masked(i, j) && a.at(i, j) != 0.0 {
                        return Ok((false, format!("instance {inst}: α[{i}][{j}] on a non-edge")));
                    }
                }
                worst = worst.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok((worst <= 1e-6, format!("max |α row sum − 1| = {worst:.2e}")))
}

fn invariant_pooling(rng: &mut impl Rng) -> Result<(bool, String)> {
    let (size, side, d) = (32, 4, 8);
    let mut store = ParamStore::new();
    let enc = ReferenceEncoder::new(&mut store, "ref", N_CLASSES, size, side, d, rng)?;
    let net = VisualPrototypeNet::new(&mut store, "vp", N_CLASSES, d, 4, 2, rng);
    jitter(&mut store, rng, 0.1);
    let mut checked = 0;
    for inst in 0..20 {
        let k = rng.gen_range(1..4);
        let mut g = Graph::inference(&store);
        let mut refs = Vec::new();
        for _ in 0..k {
            let classes: Vec<ClassId> = (0..N_CLASSES).filter(|_| rng.gen_bool(0.3)).collect();
            let s = block_sample(rng, size, &classes);
            let f = g.input(normal(rng, &[side * side, d], 1.0));
            refs.push(enc.encode(&mut g, f, &s.mask)?);
        }
        let vp = match net.forward(&mut g, &refs, enc.n_tok()) {
            Ok(vp) => vp,
            Err(crate::Error::NoSupport) => continue,
            Err(e) => return Err(e),
        };
        let p = g.value(vp.protos);
        for c in 0..N_CLASSES {
            let supported = refs.iter().any(|r| r.flags[c]);
            if supported != vp.valid[c] {
                return Ok((false, format!("instance {inst}: class {c} validity flag wrong")));
            }
            if !supported {
                checked += 1;
                if p.row(c).iter().any(|&v| v != 0.0) {
                    return Ok((false, format!("instance {inst}: unsupported class {c} has a nonzero prototype")));
                }
            }
        }
    }
    Ok((checked > 0, format!("{checked} unsupported prototypes exactly zero")))
}

pub fn invariant_suite() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a5);
    vec![
        CheckResult::from_result("invariant: masked softmax", invariant_softmax(&mut rng)),
        CheckResult::from_result("invariant: GATv2 attention rows", invariant_gat(&mut rng)),
        CheckResult::from_result("invariant: prototype pooling support", invariant_pooling(&mut rng)),
    ]
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn loss_values() -> Result<(bool, String)> {
    let mut g = Graph::new();
    let y: Vec<f64> = (0..64).map(|i| ((i / 5) % 2) as f64).collect();
    let p = g.input(Tensor::new(vec![64], y.clone())?);
    let v = dice_loss(&mut g, p, &y)?;
    let perfect = scalar(&g, v);
    let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let q = g.input(Tensor::new(vec![64], flipped)?);
    let v = dice_loss(&mut g, q, &y)?;
    let disjoint = scalar(&g, v);
    let half = g.input(Tensor::full(&[64], 0.5));
    let v = bce_loss(&mut g, half, &y)?;
    let bce = scalar(&g, v);
    let ok = perfect <= 2e-6 && (disjoint - 1.0).abs() <= 1e-9 && (bce - std::f64::consts::LN_2).abs() <= 1e-9;
    Ok((
        ok,
        format!("dice(perfect) = {perfect:.2e}, dice(disjoint) − 1 = {:.2e}, bce(0.5) − ln 2 = {:.2e}", disjoint - 1.0, bce - std::f64::consts::LN_2),
    ))
}

/// Weights recovered from the change in the total when one component moves.
fn loss_weights() -> Result<(bool, String)> {
    let w = LossWeights::default();
    let base = [0.37, 0.52, 0.81];
    let total = |v: [f64; 3]| -> Result<f64> {
        let mut g = Graph::new();
        let m = g.input(Tensor::scalar(v[0]));
        let d = g.input(Tensor::scalar(v[1]));
        let c = g.input(Tensor::scalar(v[2]));
        let t = total_loss(&mut g, m, d, c, &w)?;
        Ok(scalar(&g, t))
    };
    let t0 = total(base)?;
    let delta = 0.25;
    let mut found = [0.0; 3];
    for (k, f) in found.iter_mut().enumerate() {
        let mut v = base;
        v[k] += delta;
        *f = (total(v)? - t0) / delta;
    }
    let expected = [5.0, 5.0, 2.0];
    let ok = found.iter().zip(&expected).all(|(a, b)| (a - b).abs() <= 1e-9);
    Ok((ok, format!("recovered weights {found:?}")))
}

pub fn loss_suite() -> Vec<CheckResult> {
    vec![
        CheckResult::from_result("loss: reference values", loss_values()),
        CheckResult::from_result("loss: 5/5/2 weighting", loss_weights()),
    ]
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = gradient_suite();
    out.extend(oracle_suite(ORACLE_INSTANCES));
    out.extend(invariant_suite());
    out.extend(loss_suite());
    out
}
