//! The training loop, presence calibration and split evaluation.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bank::ReferenceBank;
use super::checkpoint::save_checkpoint;
use super::config::{ReidConfig, RunConfig, TrainConfig};
use super::losses::{bce_loss, dice_loss_cols, presence_loss, total_loss};
use super::optim::{AdamW, LrMultipliers, LrSchedule};
use super::sampling::sample_uncertain_points;
use crate::error::{Error, Result};
use crate::eval::{ConfusionAccumulator, EvalReport};
use crate::model::context::contrastive_loss;
use crate::model::graph_encoder::surrogate_label_embeddings;
use crate::model::{Presence, Reference, SegModel};
use crate::numeric::{Graph, ParamId, Tensor, Var};
use crate::ontology::{PartOntology, N_CLASSES};
use crate::synth::{Dataset, Sample, Split, Viewpoint};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_GOOD_DIR: &str = "last_good";

/// Losses and validation scores of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub iters: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_mask: f64,
    pub loss_dice: f64,
    pub loss_cls: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_macc: Option<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: SegModel,
    /// Gallery over the training split (references for evaluation).
    pub bank: ReferenceBank,
    pub metrics: Vec<EpochMetrics>,
    pub reid_losses: Vec<f64>,
}

/// Part graph with co-occurrence weights counted on the training split.
pub fn build_ontology(data: &Dataset) -> Result<PartOntology> {
    PartOntology::build_adjacency().compute_cooccurrence(&data.presence(Split::Train))
}

/// Freshly initialised model for `run` on `data`.
pub fn init_model(run: &RunConfig, data: &Dataset) -> Result<SegModel> {
    run.validate()?;
    let ontology = build_ontology(data)?;
    let emb = surrogate_label_embeddings(run.model.d_text, run.train.label_seed);
    SegModel::new(run.model.clone(), emb, ontology, run.train.seed)
}

fn view_index(s: &Sample) -> usize {
    Viewpoint::ALL.iter().position(|&v| v == s.record.viewpoint).unwrap_or(0)
}

fn has_positive_pair(labels: &[usize]) -> bool {
    labels.iter().enumerate().any(|(i, a)| labels[i + 1..].contains(a))
}

/// Contrastive training of the retrieval embedder: identity labels on the
/// identity component, viewpoint labels on the viewpoint component.
/// Returns the loss of every step.
pub fn train_reid(model: &mut SegModel, samples: &[&Sample], cfg: &ReidConfig, seed: u64) -> Result<Vec<f64>> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_id.entry(s.record.identity).or_default().push(i);
    }
    let ids: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() >= 2).collect();
    if ids.len() < 2 {
        log::warn!("fewer than two identities with two views; retrieval embedder left untrained");
        return Ok(Vec::new());
    }
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.to_tensor()).collect();
    let reid_ids: Vec<ParamId> = model.store.ids_with_prefix("reid.").collect();
    let mut opt = AdamW::new(&model.store, 0.0);
    let flat = LrMultipliers {
        backbone: 1.0,
        embedding: 1.0,
        head: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e1d);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let n_ids = cfg.ids_per_batch.min(ids.len()).max(2);
        let mut batch = Vec::new();
        let mut labels = Vec::new();
        for (label, pick) in index::sample(&mut rng, ids.len(), n_ids).into_iter().enumerate() {
            let views = ids[pick];
            let nv = cfg.views_per_id.min(views.len()).max(2);
            for v in index::sample(&mut rng, views.len(), nv) {
                batch.push(views[v]);
                labels.push(label);
            }
        }
        let mut g = Graph::with_params(&model.store);
        let (mut id_rows, mut view_rows) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
        for &i in &batch {
            let x = g.input(images[i].clone());
            let (a, b) = model.reid.embed_parts(&mut g, x)?;
            id_rows.push(a);
            view_rows.push(b);
        }
        let emb = g.concat_rows(&id_rows)?;
        let mut loss = contrastive_loss(&mut g, emb, &labels, cfg.temperature)?;
        let views: Vec<usize> = batch.iter().map(|&i| view_index(samples[i])).collect();
        if has_positive_pair(&views) {
            let emb = g.concat_rows(&view_rows)?;
            let lv = contrastive_loss(&mut g, emb, &views, cfg.temperature)?;
            loss = g.add(loss, lv)?;
        }
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged { iter: step, loss: lv });
        }
        let grads = g.backward(loss);
        let pg: Vec<(ParamId, Vec<f64>)> = g
            .param_grads(&grads)
            .into_iter()
            .filter(|(id, _)| reid_ids.contains(id))
            .collect();
        drop(g);
        opt.step(&mut model.store, &pg, cfg.lr, &flat);
        losses.push(lv);
        if step % 50 == 0 {
            log::debug!("reid step {step}: loss {lv:.4}");
        }
    }
    Ok(losses)
}

struct ItemOut {
    grads: Vec<(ParamId, Vec<f64>)>,
    mask: f64,
    dice: f64,
    cls: f64,
    total: f64,
}

/// One-hot `(H·W) × N_CLASSES` targets of a label map.
fn one_hot(s: &Sample) -> Result<Tensor> {
    let hw = s.mask.h * s.mask.w;
    let mut y = vec![0.0; hw * N_CLASSES];
    for (i, &v) in s.mask.data.iter().enumerate() {
        if v > 0 {
            y[i * N_CLASSES + v as usize - 1] = 1.0;
        }
    }
    Tensor::new(vec![hw, N_CLASSES], y)
}

fn presence_of(s: &Sample) -> Vec<bool> {
    let mut p = vec![false; N_CLASSES];
    for &v in &s.mask.data {
        if v > 0 {
            p[v as usize - 1] = true;
        }
    }
    p
}

/// Loss terms of one training image, as nodes of `g`.
pub struct ItemLoss {
    pub mask: Var,
    pub dice: Var,
    pub cls: Var,
    pub total: Var,
}

/// Training loss of one sample with ground-truth presence. `seed` drives
/// the point sampling.
pub fn item_loss(
    g: &mut Graph,
    model: &SegModel,
    s: &Sample,
    refs: &[Reference],
    tc: &TrainConfig,
    seed: u64,
) -> Result<ItemLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present = presence_of(s);
    let y = one_hot(s)?;
    let out = model.forward(g, &s.image.to_tensor(), Presence::Given(&present), refs)?;
    let hw = y.rows();

    // Point-supervised BCE over every class mask.
    let lv = g.value(out.logits).clone();
    let mut idx = Vec::with_capacity(N_CLASSES * tc.points);
    let mut col = vec![0.0; hw];
    for c in 0..N_CLASSES {
        for (i, v) in col.iter_mut().enumerate() {
            *v = lv.at(i, c);
        }
        for p in sample_uncertain_points(&col, tc.points, tc.oversample, tc.importance, &mut rng) {
            idx.push(p * N_CLASSES + c);
        }
    }
    let yd = y.data();
    let ys: Vec<f64> = idx.iter().map(|&i| yd[i]).collect();
    let n_pts = idx.len();
    let pts = g.gather(out.logits, idx, &[n_pts])?;
    let pts = g.sigmoid(pts);
    let mask = bce_loss(g, pts, &ys)?;

    // Dice averaged over the classes present in the ground truth.
    let probs = g.sigmoid(out.logits);
    let d = dice_loss_cols(g, probs, &y)?;
    let n_present = present.iter().filter(|&&p| p).count().max(1) as f64;
    let w: Vec<f64> = present.iter().map(|&p| if p { 1.0 / n_present } else { 0.0 }).collect();
    let w = g.input(Tensor::new(vec![1, N_CLASSES], w)?);
    let dw = g.mul(d, w)?;
    let dice = g.sum_all(dw);

    let cw = &tc.loss.class_weights;
    let a = presence_loss(g, out.scores, &present, cw)?;
    let b = presence_loss(g, out.presence_logits, &present, cw)?;
    let cls = g.add(a, b)?;

    let total = total_loss(g, mask, dice, cls, &tc.loss)?;
    Ok(ItemLoss { mask, dice, cls, total })
}

fn item_step(model: &SegModel, s: &Sample, refs: &[Reference], tc: &TrainConfig, seed: u64) -> Result<ItemOut> {
    let mut g = Graph::with_params(&model.store);
    let l = item_loss(&mut g, model, s, refs, tc, seed)?;
    let grads = g.backward(l.total);
    let scalar = |v| g.value(v).data()[0];
    Ok(ItemOut {
        mask: scalar(l.mask),
        dice: scalar(l.dice),
        cls: scalar(l.cls),
        total: scalar(l.total),
        grads: g.param_grads(&grads),
    })
}

/// Retrieval ids used as references for every training sample: nearest
/// gallery entries of other identities, as at test time.
fn training_references(bank: &ReferenceBank, samples: &[&Sample], k: usize) -> Result<Vec<Vec<usize>>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| bank.nearest_other_identity(&bank.gallery.entries[i].feature, k, s.record.identity))
        .collect()
}

/// Trains a model on the training split of `data`, validating on the
/// validation split. With `out`, metrics are appended to `metrics.jsonl` and
/// the final checkpoint is written there.
pub fn train(run: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let train_set = data.split(Split::Train);
    let val_set = data.split(Split::Val);
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = init_model(run, data)?;
    let tc = &run.train;
    let k = run.model.refs;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let _ = fs::remove_file(dir.join(METRICS_FILE));
    }

    let reid_losses = if model.uses_references() {
        train_reid(&mut model, &train_set, &tc.reid, tc.seed)?
    } else {
        Vec::new()
    };
    let mut bank = ReferenceBank::build(&model, &train_set)?;
    let ref_ids = if model.uses_references() {
        training_references(&bank, &train_set, k)?
    } else {
        vec![Vec::new(); train_set.len()]
    };

    let ipe = train_set.len().div_ceil(tc.batch_size);
    let sched = LrSchedule {
        base: tc.lr,
        warmup: tc.warmup_iters,
        milestones: tc.milestones.iter().map(|m| m * ipe).collect(),
        gamma: tc.gamma,
    };
    sched.validate()?;
    let mut opt = AdamW::new(&model.store, tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x51ee);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(tc.epochs);
    let mut iter = 0;
    for epoch in 0..tc.epochs {
        let t0 = std::time::Instant::now();
        bank.refresh(&model)?;
        order.shuffle(&mut rng);
        let (mut sums, mut count) = ([0.0; 4], 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            lr = sched.lr(iter + 1);
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.gen()).collect();
            let outs: Vec<ItemOut> = chunk
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &seed)| item_step(&model, train_set[i], &bank.references(&ref_ids[i]), tc, seed))
                .collect::<Result<_>>()?;

            let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
            let mut batch_loss = 0.0;
            for o in &outs {
                batch_loss += o.total;
                for (id, gv) in &o.grads {
                    match &mut acc[id.index()] {
                        Some(a) => a.iter_mut().zip(gv).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(gv.clone()),
                    }
                }
                for (s, v) in sums.iter_mut().zip([o.total, o.mask, o.dice, o.cls]) {
                    *s += v;
                }
            }
            count += outs.len();
            let scale = 1.0 / outs.len() as f64;
            let grads: Vec<(ParamId, Vec<f64>)> = model
                .store
                .ids()
                .into_iter()
                .filter_map(|id| {
                    acc[id.index()]
                        .take()
                        .map(|g| (id, g.into_iter().map(|v| v * scale).collect()))
                })
                .collect();
            let finite = batch_loss.is_finite() && grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()));
            if !finite {
                if let Some(dir) = out {
                    save_checkpoint(&dir.join(LAST_GOOD_DIR), &model, run)?;
                }
                return Err(Error::Diverged {
                    iter,
                    loss: batch_loss * scale,
                });
            }
            opt.step(&mut model.store, &grads, lr, &tc.lr_mult);
            iter += 1;
        }

        let n = count.max(1) as f64;
        let mut m = EpochMetrics {
            epoch: epoch + 1,
            iters: iter,
            lr,
            loss: sums[0] / n,
            loss_mask: sums[1] / n,
            loss_dice: sums[2] / n,
            loss_cls: sums[3] / n,
            val_miou: None,
            val_macc: None,
            seconds: 0.0,
        };
        let last = epoch + 1 == tc.epochs;
        let due = tc.val_every > 0 && (epoch + 1) % tc.val_every == 0;
        if !val_set.is_empty() && (due || last) {
            if model.uses_references() {
                bank.refresh(&model)?;
            }
            calibrate_presence(&mut model, &val_set)?;
            let r = evaluate(&model, Some(&bank), &val_set)?;
            m.val_miou = Some(r.miou);
            m.val_macc = Some(r.macc);
        }
        m.seconds = t0.elapsed().as_secs_f64();
        log::info!(
            "epoch {}: loss {:.4} (mask {:.4} dice {:.4} cls {:.4}) lr {:.2e} val mIoU {}",
            m.epoch,
            m.loss,
            m.loss_mask,
            m.loss_dice,
            m.loss_cls,
            m.lr,
            m.val_miou.map_or("-".into(), |v| format!("{v:.2}"))
        );
        if let Some(dir) = out {
            append_metrics(&dir.join(METRICS_FILE), &m)?;
        }
        metrics.push(m);
    }
    bank.refresh(&model)?;
    if val_set.is_empty() {
        log::warn!("no validation split; presence thresholds stay at 0");
    }
    if let Some(dir) = out {
        save_checkpoint(dir, &model, run)?;
    }
    Ok(TrainOutcome {
        model,
        bank,
        metrics,
        reid_losses,
    })
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(path, e))
}

/// Threshold on `scores` for labels `truth`: the cut where precision and
/// recall are closest, ties broken by accuracy, then by the lowest cut.
/// Without positives the cut sits above every score, without negatives
/// below every score.
pub fn calibrate_threshold(scores: &[f64], truth: &[bool]) -> f64 {
    let mut sorted: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) else {
        return 0.0;
    };
    let n_pos = truth.iter().filter(|&&t| t).count();
    if n_pos == 0 {
        return hi + 1.0;
    }
    if n_pos == truth.len() {
        return lo - 1.0;
    }
    let mut cuts = vec![lo - 1.0];
    cuts.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let mut best: Option<(f64, usize, f64)> = None;
    for &t in &cuts {
        let (mut tp, mut fp, mut tn) = (0usize, 0usize, 0usize);
        for (&s, &y) in scores.iter().zip(truth) {
            match (s > t, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / n_pos as f64;
        let gap = (precision - recall).abs();
        let correct = tp + tn;
        let better = match best {
            None => true,
            Some((bg, bc, _)) => gap < bg - 1e-12 || ((gap - bg).abs() <= 1e-12 && correct > bc),
        };
        if better {
            best = Some((gap, correct, t));
        }
    }
    best.map_or(0.0, |b| b.2)
}

/// Sets every class's presence threshold from the auxiliary presence logits
/// on `samples`.
pub fn calibrate_presence(model: &mut SegModel, samples: &[&Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Eval("cannot calibrate presence on an empty split".into()));
    }
    let logits: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| model.presence_logits(&s.image.to_tensor()))
        .collect::<Result<_>>()?;
    let truth: Vec<Vec<bool>> = samples.iter().map(|s| presence_of(s)).collect();
    for c in 0..N_CLASSES {
        let sc: Vec<f64> = logits.iter().map(|l| l[c]).collect();
        let tr: Vec<bool> = truth.iter().map(|t| t[c]).collect();
        model.presence_threshold[c] = calibrate_threshold(&sc, &tr);
    }
    Ok(())
}

/// mIoU / mAcc of `model` on `samples`, retrieving references from `bank`.
pub fn evaluate(model: &SegModel, bank: Option<&ReferenceBank>, samples: &[&Sample]) -> Result<EvalReport> {
    let k = model.cfg.refs;
    let parts: Vec<ConfusionAccumulator> = samples
        .par_iter()
        .map(|s| {
            let refs = match bank {
                Some(b) => b.references_for(model, &s.image, k)?,
                None => Vec::new(),
            };
            let pred = model.predict(&s.image, &refs)?;
            let mut acc = ConfusionAccumulator::new();
            acc.accumulate(&pred.label_map, &s.mask)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionAccumulator::new();
    for p in &parts {
        total.merge(p);
    }
    EvalReport::from_confusion(&total, samples.len())
}
