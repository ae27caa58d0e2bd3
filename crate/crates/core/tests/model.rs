use partseg_core::image::LabelMap;
use partseg_core::model::context::{support_flags, Gallery, GalleryEntry, POOL_EPS};
use partseg_core::model::graph_encoder::{load_label_embeddings, surrogate_label_embeddings, GatLayer, LABEL_EMBEDDING_KEY};
use partseg_core::model::roi::{roi_align, roi_align_mix};
use partseg_core::model::{
    mask_to_boxes, positional_encoding, ppem_activate, Ablation, Backbone, Cdt, DecoderDims, GatConfig, GraphEncoder,
    MapVar, MaskDecoder, MaskSet, ModelConfig, Neighborhoods, Ppem, ReferenceEncoder, ReidNet, RoiBox, RoiRefiner,
    SegModel, VisualPrototypeNet,
};
use partseg_core::numeric::io::write_tensors;
use partseg_core::numeric::{Graph, ParamStore, Tensor};
use partseg_core::ontology::{PartOntology, N_CLASSES};
use partseg_core::selftest::tiny_model_config;
use partseg_core::{Error, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn jitter(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn random_image(rng: &mut impl Rng, size: usize) -> Image {
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            img.set(y, x, [rng.gen(), rng.gen(), rng.gen()]);
        }
    }
    img
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

// ---- label embeddings and graph attention ----

#[test]
fn surrogate_embeddings_are_seeded_and_distinct() {
    let a = surrogate_label_embeddings(48, 3);
    assert_eq!(a, surrogate_label_embeddings(48, 3));
    assert_ne!(a, surrogate_label_embeddings(48, 4));
    let mut min_dist = f64::INFINITY;
    for i in 0..N_CLASSES {
        let norm: f64 = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        for j in i + 1..N_CLASSES {
            let d: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| (x - y).powi(2)).sum();
            min_dist = min_dist.min(d);
        }
    }
    assert!(min_dist > 0.0);
}

#[test]
fn label_embedding_file_needs_one_row_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(0);
    let mut tensors = std::collections::BTreeMap::new();
    tensors.insert(LABEL_EMBEDDING_KEY.to_string(), normal(&mut r, &[12, 8], 1.0));
    write_tensors(dir.path(), &tensors).unwrap();
    assert!(matches!(load_label_embeddings(dir.path()), Err(Error::Config(_))));

    tensors.insert(LABEL_EMBEDDING_KEY.to_string(), normal(&mut r, &[N_CLASSES, 8], 3.0));
    write_tensors(dir.path(), &tensors).unwrap();
    let t = load_label_embeddings(dir.path()).unwrap();
    for i in 0..N_CLASSES {
        let norm: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

/// Runs one layer on `x`, returning features and the first head's α.
fn run_layer(store: &ParamStore, layer: &GatLayer, x: &Tensor, nb: &Neighborhoods) -> (Tensor, Tensor) {
    let mut g = Graph::inference(store);
    let h = g.input(x.clone());
    let (out, alphas) = layer.forward(&mut g, h, nb).unwrap();
    (g.value(out).clone(), g.value(alphas[0]).clone())
}

#[test]
fn single_node_attends_to_itself() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 4, 3, 1, 0.2, true, &mut r);
    let x = normal(&mut r, &[1, 4], 1.0);
    let nb = Neighborhoods::from_lists(1, &[]);
    let (out, alpha) = run_layer(&store, &layer, &x, &nb);
    assert_eq!(alpha.data(), &[1.0]);
    let wr = store.get(layer.heads[0].wr);
    let want: Vec<f64> = x.matmul(wr).unwrap().data().iter().map(|&v| elu(v)).collect();
    assert_close(out.data(), &want, 1e-12);
}

#[test]
fn identical_neighbours_split_attention_evenly() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 5, 4, 2, 0.2, true, &mut r);
    let row = normal(&mut r, &[1, 5], 1.0);
    let x = Tensor::from_fn(&[2, 5], |i| row.data()[i % 5]);
    let nb = Neighborhoods::from_lists(2, &[(0, 1), (1, 0)]);
    let (_, alpha) = run_layer(&store, &layer, &x, &nb);
    assert_close(alpha.data(), &[0.5; 4], 1e-12);
}

#[test]
fn gat_layer_matches_scalar_evaluation_on_a_path() {
    let mut r = rng(3);
    let (n, d_in, d_head, slope) = (3, 4, 3, 0.2);
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", d_in, d_head, 1, slope, true, &mut r);
    let x = normal(&mut r, &[n, d_in], 1.0);
    let nb = Neighborhoods::from_lists(n, &[(0, 1), (1, 0), (1, 2), (2, 1)]);
    let (out, alpha) = run_layer(&store, &layer, &x, &nb);

    let head = &layer.heads[0];
    let (wl, wr, a) = (store.get(head.wl), store.get(head.wr), store.get(head.a));
    let proj = |w: &Tensor, i: usize| -> Vec<f64> {
        (0..d_head)
            .map(|o| (0..d_in).map(|k| x.at(i, k) * w.at(k, o)).sum())
            .collect()
    };
    let neigh = [vec![0, 1], vec![0, 1, 2], vec![1, 2]];
    for i in 0..n {
        let li = proj(wl, i);
        let e: Vec<f64> = neigh[i]
            .iter()
            .map(|&j| {
                let rj = proj(wr, j);
                (0..d_head).map(|o| a.at(o, 0) * leaky(li[o] + rj[o], slope)).sum()
            })
            .collect();
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
        let mut h = vec![0.0; d_head];
        for (jj, &j) in neigh[i].iter().enumerate() {
            let w = (e[jj] - m).exp() / z;
            assert!((alpha.at(i, j) - w).abs() < 1e-12);
            for (o, v) in proj(wr, j).iter().enumerate() {
                h[o] += w * v;
            }
        }
        for j in (0..n).filter(|j| !neigh[i].contains(j)) {
            assert_eq!(alpha.at(i, j), 0.0);
        }
        let h: Vec<f64> = h.into_iter().map(elu).collect();
        assert_close(out.row(i), &h, 1e-12);
    }
}

#[test]
fn zero_attention_vector_gives_uniform_weights() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 4, 4, 2, 0.2, true, &mut r);
    for h in &layer.heads {
        store.get_mut(h.a).data_mut().fill(0.0);
    }
    let edges = [(0, 1), (1, 0), (1, 2), (2, 1), (0, 3), (3, 0), (3, 2), (2, 3), (4, 0)];
    let nb = Neighborhoods::from_lists(5, &edges);
    let x = normal(&mut r, &[5, 4], 1.0);
    let (_, alpha) = run_layer(&store, &layer, &x, &nb);
    for i in 0..5 {
        let deg = 1 + edges.iter().filter(|e| e.0 == i).count();
        for j in 0..5 {
            let want = if i == j || edges.contains(&(i, j)) {
                1.0 / deg as f64
            } else {
                0.0
            };
            assert!((alpha.at(i, j) - want).abs() < 1e-12, "α[{i}][{j}]");
        }
    }
}

#[test]
fn graph_encoder_shape_and_node_permutation_equivariance() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let cfg = GatConfig::default();
    let enc = GraphEncoder::new(&mut store, "gat", &cfg, 10, 8, &mut r).unwrap();
    let n = 7;
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 0), (1, 4)];
    let both: Vec<(usize, usize)> = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    let x = normal(&mut r, &[n, 10], 1.0);
    let perm = [3, 6, 0, 5, 1, 4, 2]; // new index of node i
    let mut px = Tensor::zeros(&[n, 10]);
    for i in 0..n {
        px.data_mut()[perm[i] * 10..(perm[i] + 1) * 10].copy_from_slice(x.row(i));
    }
    let pedges: Vec<(usize, usize)> = both.iter().map(|&(a, b)| (perm[a], perm[b])).collect();

    let run = |x: &Tensor, e: &[(usize, usize)]| {
        let mut g = Graph::inference(&store);
        let h = g.input(x.clone());
        let out = enc.forward(&mut g, h, &Neighborhoods::from_lists(n, e)).unwrap();
        g.value(out).clone()
    };
    let a = run(&x, &both);
    let b = run(&px, &pedges);
    assert_eq!(a.shape(), &[n, 8]);
    for i in 0..n {
        assert_close(a.row(i), b.row(perm[i]), 1e-12);
    }

    // Thirteen ontology nodes through the default encoder.
    let mut store = ParamStore::new();
    let enc = GraphEncoder::new(&mut store, "gat", &cfg, 48, 32, &mut r).unwrap();
    let mut g = Graph::inference(&store);
    let t = g.input(surrogate_label_embeddings(48, 0));
    let nb = Neighborhoods::from_ontology(&PartOntology::build_adjacency());
    let out = enc.forward(&mut g, t, &nb).unwrap();
    assert_eq!(g.shape(out), &[N_CLASSES, 32]);
}

// ---- image encoder ----

#[test]
fn positional_encoding_contract() {
    let one = positional_encoding(1, 1, 8).unwrap();
    assert_eq!(one.shape(), &[1, 8]);
    assert!(one.is_finite());
    let pe = positional_encoding(8, 8, 32).unwrap();
    assert_eq!(pe, positional_encoding(8, 8, 32).unwrap());
    let mut min_dist = f64::INFINITY;
    for i in 0..64 {
        for j in i + 1..64 {
            let d: f64 = pe.row(i).iter().zip(pe.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            min_dist = min_dist.min(d);
        }
    }
    assert!(min_dist > 1e-6, "min pairwise distance {min_dist}");
    assert!(positional_encoding(4, 4, 7).is_err());
}

#[test]
fn backbone_shapes_and_determinism() {
    let cfg = ModelConfig::default();
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "backbone", &cfg, &mut r);
    let img = random_image(&mut r, 64).to_tensor();
    let run = |img: &Tensor| {
        let mut g = Graph::inference(&store);
        let x = g.input(img.clone());
        let out = bb.forward(&mut g, x).unwrap();
        let sides: Vec<(usize, usize, usize)> = out
            .pyramid
            .iter()
            .map(|m| (m.h, m.w, g.value(m.var).cols()))
            .collect();
        let widths: Vec<usize> = out.levels.iter().map(|m| g.value(m.var).cols()).collect();
        (g.value(out.feat.var).clone(), (out.feat.h, out.feat.w), sides, widths)
    };
    let (f, hw, sides, widths) = run(&img);
    assert_eq!(hw, (8, 8));
    assert_eq!(f.shape(), &[64, 32]);
    assert_eq!(sides, vec![(16, 16, 32), (8, 8, 32), (4, 4, 32), (2, 2, 32)]);
    assert_eq!(widths, vec![16, 32, 64, 128]);
    assert_eq!(run(&img).0, f);

    let mut g = Graph::inference(&store);
    let x = g.input(Tensor::zeros(&[32 * 32, 3]));
    assert!(matches!(bb.forward(&mut g, x), Err(Error::Shape { .. })));
}

// ---- prototype transfer and prompts ----

#[test]
fn untrained_transfer_is_the_identity() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let cdt = Cdt::new(&mut store, "cdt", 8, 2, &mut r);
    let p = normal(&mut r, &[5, 8], 1.0);
    let mut g = Graph::inference(&store);
    let (pv, f, pe) = (
        g.input(p.clone()),
        g.input(normal(&mut r, &[16, 8], 1.0)),
        g.input(normal(&mut r, &[16, 8], 1.0)),
    );
    let out = cdt.forward(&mut g, pv, f, pe).unwrap();
    assert_eq!(g.value(out), &p);
}

#[test]
fn constant_features_give_uniform_transfer() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let d = 6;
    let cdt = Cdt::new(&mut store, "cdt", d, 2, &mut r);
    jitter(&mut store, &mut r, 0.3);
    let p = normal(&mut r, &[3, d], 1.0);
    let f_row = normal(&mut r, &[1, d], 1.0);
    let f = Tensor::from_fn(&[4, d], |i| f_row.data()[i % d]);
    let mut g = Graph::inference(&store);
    let (pv, fv, pe) = (g.input(p.clone()), g.input(f), g.input(Tensor::zeros(&[4, d])));
    let out = cdt.forward(&mut g, pv, fv, pe).unwrap();

    // Uniform weights over equal values: P + W_o(W_v f + b_v) + b_o.
    let a = &cdt.attn;
    let v = f_row.matmul(store.get(a.v.w)).unwrap();
    let v: Vec<f64> = v.data().iter().zip(store.get(a.v.b.unwrap()).data()).map(|(x, b)| x + b).collect();
    let v = Tensor::new(vec![1, d], v).unwrap();
    let o = v.matmul(store.get(a.o.w)).unwrap();
    let o: Vec<f64> = o.data().iter().zip(store.get(a.o.b.unwrap()).data()).map(|(x, b)| x + b).collect();
    for c in 0..3 {
        let want: Vec<f64> = p.row(c).iter().zip(&o).map(|(x, y)| x + y).collect();
        assert_close(g.value(out).row(c), &want, 1e-12);
    }
}

#[test]
fn activation_gate_values() {
    let mut g = Graph::new();
    let f = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0], vec![0.0, 3.0]]).unwrap());
    let p = g.input(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let (act, sim) = ppem_activate(&mut g, f, p).unwrap();
    // Dot 1 doubles the feature; zero feature stays zero; orthogonal passes through.
    assert_eq!(g.value(act).data(), &[2.0, 4.0, 0.0, 0.0, 0.0, 3.0]);
    assert_eq!(g.value(sim).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn presence_flag_only_moves_its_own_sparse_token() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let (d, n_cls, n_pos) = (6, 5, 9);
    let ppem = Ppem::new(&mut store, "ppem", n_cls, d, 4, 2, &mut r);
    let feat = normal(&mut r, &[n_pos, d], 0.5);
    let protos = normal(&mut r, &[n_cls, d], 0.5);
    let run = |presence: &[bool]| {
        let mut g = Graph::inference(&store);
        let (f, p) = (g.input(feat.clone()), g.input(protos.clone()));
        let (act, _) = ppem_activate(&mut g, f, p).unwrap();
        let pr = ppem.embed(&mut g, act, n_cls, presence).unwrap();
        (g.value(pr.dense).clone(), g.value(pr.sparse).clone())
    };
    let on = [true, false, true, true, false];
    let mut flipped = on;
    flipped[2] = false;
    let (d1, s1) = run(&on);
    let (d2, s2) = run(&flipped);
    assert_eq!(d1.shape(), &[n_pos, d]);
    assert_eq!(s1.shape(), &[n_cls, d]);
    assert_eq!(d1, d2);
    for c in 0..n_cls {
        assert_eq!(s1.row(c) == s2.row(c), c != 2, "class {c}");
    }
}

// ---- decoder ----

fn decoder_fixture(seed: u64) -> (ParamStore, MaskDecoder, [Tensor; 6]) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let (d, n_cls, size) = (8, 4, 32);
    let dec = MaskDecoder::new(
        &mut store,
        "decoder",
        DecoderDims {
            n_cls,
            d,
            heads: 2,
            blocks: 2,
            mlp: 16,
            mask_channels: 4,
            skip_channels: (5, 3),
            image_size: size,
        },
        &mut r,
    );
    let s = size / 8;
    let inputs = [
        normal(&mut r, &[s * s, d], 1.0),
        normal(&mut r, &[s * s, d], 0.5),
        normal(&mut r, &[n_cls, d], 0.5),
        positional_encoding(s, s, d).unwrap(),
        normal(&mut r, &[(size / 4) * (size / 4), 5], 1.0),
        normal(&mut r, &[(size / 2) * (size / 2), 3], 1.0),
    ];
    (store, dec, inputs)
}

fn run_decoder(store: &ParamStore, dec: &MaskDecoder, x: &[Tensor; 6]) -> (Tensor, Tensor) {
    let size = 32;
    let mut g = Graph::inference(store);
    let map = |g: &mut Graph, t: &Tensor, s: usize| MapVar {
        var: g.input(t.clone()),
        h: s,
        w: s,
    };
    let feat = map(&mut g, &x[0], size / 8);
    let (dense, sparse, pe) = (g.input(x[1].clone()), g.input(x[2].clone()), g.input(x[3].clone()));
    let skips = (map(&mut g, &x[4], size / 4), map(&mut g, &x[5], size / 2));
    let out = dec.decode(&mut g, feat, dense, sparse, pe, skips).unwrap();
    (g.value(out.logits).clone(), g.value(out.scores).clone())
}

#[test]
fn decoder_is_equivariant_to_class_order() {
    let (store, dec, x) = decoder_fixture(10);
    let (logits, scores) = run_decoder(&store, &dec, &x);
    assert_eq!(logits.shape(), &[32 * 32, 4]);
    assert_eq!(scores.shape(), &[4, 1]);

    let perm = [2, 0, 3, 1]; // class c moves to perm[c]
    let permute_rows = |t: &Tensor| {
        let d = t.cols();
        let mut out = t.clone();
        for c in 0..t.rows() {
            out.data_mut()[perm[c] * d..(perm[c] + 1) * d].copy_from_slice(t.row(c));
        }
        out
    };
    let mut pstore = store.clone();
    *pstore.get_mut(dec.mask_tokens) = permute_rows(store.get(dec.mask_tokens));
    let mut pdec = dec.clone();
    for c in 0..4 {
        pdec.hypernets[perm[c]] = dec.hypernets[c].clone();
    }
    let mut px = x.clone();
    px[2] = permute_rows(&x[2]);
    let (pl, ps) = run_decoder(&pstore, &pdec, &px);
    for c in 0..4 {
        assert!((scores.at(c, 0) - ps.at(perm[c], 0)).abs() < 1e-10);
        for i in 0..32 * 32 {
            assert!((logits.at(i, c) - pl.at(i, perm[c])).abs() < 1e-10);
        }
    }
}

#[test]
fn model_masks_have_image_resolution() {
    let cfg = ModelConfig::default();
    let emb = surrogate_label_embeddings(cfg.d_text, 0);
    let model = SegModel::new(cfg, emb, PartOntology::build_adjacency(), 0).unwrap();
    let img = random_image(&mut rng(11), 64);
    let pred = model.predict(&img, &[]).unwrap();
    assert_eq!((pred.masks.h, pred.masks.w), (64, 64));
    assert_eq!(pred.masks.logits.shape(), &[64 * 64, N_CLASSES]);
    assert_eq!(pred.scores.len(), N_CLASSES);
    assert_eq!((pred.label_map.h, pred.label_map.w), (64, 64));
}

#[test]
fn semantic_map_rules() {
    let masks = MaskSet {
        h: 1,
        w: 4,
        logits: Tensor::from_rows(&[
            vec![2.0, -1.0, -3.0],
            vec![-1.0, -1.0, -1.0],
            vec![1.0, 3.0, 0.5],
            vec![1.5, 1.5, -1.0],
        ])
        .unwrap(),
    };
    let all = [true; 3];
    assert_eq!(masks.semantic_map(&all).data, vec![1, 0, 2, 1]);
    // An inactive class never wins.
    assert_eq!(masks.semantic_map(&[true, false, true]).data, vec![1, 0, 1, 1]);

    let zero = MaskSet {
        h: 2,
        w: 2,
        logits: Tensor::zeros(&[4, 3]),
    };
    assert!((0..3).all(|c| zero.binary(c, 0.5).iter().all(|&b| !b)));
    assert!(zero.semantic_map(&all).data.iter().all(|&v| v == 0));
}

// ---- retrieval and reference prototypes ----

#[test]
fn reid_features_are_unit_and_deterministic() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let net = ReidNet::new(&mut store, "reid", 32, 16, &mut r);
    let img = random_image(&mut r, 32).to_tensor();
    let f = net.embed_tensor(&store, &img).unwrap();
    let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    assert_eq!(f, net.embed_tensor(&store, &img).unwrap());
    let ctx = net.context_tensor(&store, &img).unwrap();
    let norm: f64 = ctx.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);

    let gallery = Gallery {
        entries: vec![
            GalleryEntry {
                id: 0,
                name: "other".into(),
                feature: net.embed_tensor(&store, &random_image(&mut r, 32).to_tensor()).unwrap(),
            },
            GalleryEntry {
                id: 1,
                name: "self".into(),
                feature: f.clone(),
            },
        ],
    };
    let hits = gallery.retrieve(&f, 2).unwrap();
    assert_eq!(hits[0].id, 1);
    assert!((hits[0].score - 1.0).abs() < 1e-6);
}

#[test]
fn orthogonal_gallery_scores_zero() {
    let gallery = Gallery {
        entries: (0..3)
            .map(|i| GalleryEntry {
                id: i,
                name: format!("e{i}"),
                feature: (0..4).map(|j| if j == i + 1 { 1.0 } else { 0.0 }).collect(),
            })
            .collect(),
    };
    let hits = gallery.retrieve(&[1.0, 0.0, 0.0, 0.0], 3).unwrap();
    assert!(hits.iter().all(|h| h.score == 0.0));
    // All tied: id order.
    assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(matches!(Gallery { entries: vec![] }.retrieve(&[1.0], 1), Err(Error::EmptyGallery)));
}

proptest! {
    #[test]
    fn retrieval_matches_sorted_dot_products(
        feats in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 5),
        query in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        let gallery = Gallery {
            entries: feats.iter().enumerate().map(|(i, f)| GalleryEntry { id: i, name: format!("e{i}"), feature: f.clone() }).collect(),
        };
        let hits = gallery.retrieve(&query, 5).unwrap();
        let mut want: Vec<(f64, usize)> = feats.iter().enumerate()
            .map(|(i, f)| (f.iter().zip(&query).map(|(a, b)| a * b).sum(), i))
            .collect();
        want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        prop_assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), want.iter().map(|w| w.1).collect::<Vec<_>>());
    }
}

fn labels(size: usize, blocks: &[(u8, usize, usize, usize)]) -> LabelMap {
    let mut m = LabelMap::new(size, size);
    for &(v, r0, c0, side) in blocks {
        for y in r0..r0 + side {
            for x in c0..c0 + side {
                m.set(y, x, v);
            }
        }
    }
    m
}

#[test]
fn reference_encoding_shape_and_flags() {
    let cfg = ModelConfig::default();
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let enc = ReferenceEncoder::new(&mut store, "ref", N_CLASSES, 64, cfg.feat_side(), cfg.d_model, &mut r).unwrap();
    assert_eq!(enc.n_tok(), 64);
    let mask = labels(64, &[(1, 0, 0, 10), (5, 20, 20, 8)]);
    let mut g = Graph::inference(&store);
    let f = g.input(normal(&mut r, &[64, cfg.d_model], 1.0));
    let e = enc.encode(&mut g, f, &mask).unwrap();
    assert_eq!(g.shape(e.tokens), &[N_CLASSES * 64, cfg.d_model]);
    let want: Vec<bool> = (0..N_CLASSES).map(|c| c == 0 || c == 4).collect();
    assert_eq!(e.flags, want);
    assert_eq!(support_flags(&mask, N_CLASSES), want);
}

struct ProtoFixture {
    store: ParamStore,
    enc: ReferenceEncoder,
    net: VisualPrototypeNet,
    feats: Vec<Tensor>,
    masks: Vec<LabelMap>,
}

fn proto_fixture(seed: u64) -> ProtoFixture {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let enc = ReferenceEncoder::new(&mut store, "ref", N_CLASSES, 32, 4, 8, &mut r).unwrap();
    let net = VisualPrototypeNet::new(&mut store, "vp", N_CLASSES, 8, 4, 2, &mut r);
    let masks = vec![
        labels(32, &[(1, 0, 0, 8), (3, 8, 8, 8)]),
        labels(32, &[(1, 16, 0, 8), (7, 0, 16, 8)]),
        labels(32, &[(3, 24, 24, 8), (7, 8, 24, 4), (13, 0, 8, 4)]),
    ];
    let feats = (0..3).map(|_| normal(&mut r, &[16, 8], 1.0)).collect();
    ProtoFixture {
        store,
        enc,
        net,
        feats,
        masks,
    }
}

fn protos(fx: &ProtoFixture, order: &[usize]) -> (Tensor, Vec<bool>) {
    let mut g = Graph::inference(&fx.store);
    let refs: Vec<_> = order
        .iter()
        .map(|&m| {
            let f = g.input(fx.feats[m].clone());
            fx.enc.encode(&mut g, f, &fx.masks[m]).unwrap()
        })
        .collect();
    let vp = fx.net.forward(&mut g, &refs, fx.enc.n_tok()).unwrap();
    (g.value(vp.protos).clone(), vp.valid)
}

#[test]
fn prototypes_ignore_reference_order() {
    let mut fx = proto_fixture(14);
    let (a, valid) = protos(&fx, &[0, 1, 2]);
    let (b, _) = protos(&fx, &[2, 0, 1]);
    assert_close(a.data(), b.data(), 1e-12);
    let want: Vec<bool> = (0..N_CLASSES).map(|c| [0, 2, 6, 12].contains(&c)).collect();
    assert_eq!(valid, want);
    for c in (0..N_CLASSES).filter(|&c| !want[c]) {
        assert!(a.row(c).iter().all(|&v| v == 0.0));
    }

    // With trained-looking attention the pooled prototypes are still
    // symmetric in the references.
    jitter(&mut fx.store, &mut rng(15), 0.2);
    let (a, _) = protos(&fx, &[0, 1, 2]);
    let (b, _) = protos(&fx, &[1, 2, 0]);
    assert_close(a.data(), b.data(), 1e-9);
}

#[test]
fn pooling_divides_by_support_plus_eps() {
    // Class 13 appears only in the third reference, so its prototype is
    // that reference's pooled embedding alone.
    let fx = proto_fixture(16);
    let (all, _) = protos(&fx, &[0, 1, 2]);
    let (third, _) = protos(&fx, &[2]);
    assert_close(all.row(12), third.row(12), 1e-12);

    // A reference repeated twice: Σ over two equal terms / (2 + ε) against
    // one term / (1 + ε).
    let (once, _) = protos(&fx, &[0]);
    let (twice, _) = protos(&fx, &[0, 0]);
    let ratio = 2.0 * (1.0 + POOL_EPS) / (2.0 + POOL_EPS);
    let scaled: Vec<f64> = once.row(0).iter().map(|v| v * ratio).collect();
    assert_close(twice.row(0), &scaled, 1e-12);
}

#[test]
fn references_without_labels_are_rejected() {
    let fx = proto_fixture(17);
    let mut g = Graph::inference(&fx.store);
    let f = g.input(fx.feats[0].clone());
    let e = fx.enc.encode(&mut g, f, &LabelMap::new(32, 32)).unwrap();
    assert!(matches!(fx.net.forward(&mut g, &[e], fx.enc.n_tok()), Err(Error::NoSupport)));
    assert!(matches!(fx.net.forward(&mut g, &[], fx.enc.n_tok()), Err(Error::NoSupport)));
}

// ---- boxes and ROI refinement ----

fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> MaskSet {
    MaskSet {
        h,
        w,
        logits: Tensor::from_fn(&[h * w, 1], |i| if on.contains(&(i / w, i % w)) { 4.0 } else { -4.0 }),
    }
}

#[test]
fn box_examples() {
    let full: Vec<_> = (0..6).flat_map(|r| (0..9).map(move |c| (r, c))).collect();
    let b = mask_to_boxes(&mask_from(6, 9, &full), 0.5, 1);
    assert_eq!((b[0].r0, b[0].c0, b[0].r1, b[0].c1), (0, 0, 5, 8));

    let b = mask_to_boxes(&mask_from(8, 8, &[(3, 5)]), 0.5, 1);
    assert_eq!((b[0].r0, b[0].c0, b[0].r1, b[0].c1, b[0].area), (3, 5, 3, 5, 1));
    assert!(mask_to_boxes(&mask_from(8, 8, &[(3, 5)]), 0.5, 2).is_empty());

    let blobs = [(1, 1), (1, 2), (2, 1), (6, 5), (7, 6)];
    let b = mask_to_boxes(&mask_from(8, 8, &blobs), 0.5, 1);
    assert_eq!(b.len(), 1);
    assert_eq!((b[0].r0, b[0].c0, b[0].r1, b[0].c1, b[0].area), (1, 1, 7, 6, 5));
}

fn align(map: &Tensor, side: usize, image_size: usize, bx: &RoiBox, out: usize) -> Tensor {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let m = MapVar {
        var: g.input(map.clone()),
        h: side,
        w: side,
    };
    let v = roi_align(&mut g, m, image_size, bx, out).unwrap();
    g.value(v).clone()
}

fn bx(r0: usize, c0: usize, r1: usize, c1: usize) -> RoiBox {
    RoiBox {
        class: 0,
        r0,
        c0,
        r1,
        c1,
        area: (r1 + 1 - r0) * (c1 + 1 - c0),
    }
}

#[test]
fn roi_align_examples() {
    let mut r = rng(18);
    let constant = Tensor::from_fn(&[16, 3], |i| [0.25, -1.0, 2.0][i % 3]);
    let out = align(&constant, 4, 32, &bx(3, 7, 20, 29), 3);
    for i in 0..9 {
        assert_close(out.row(i), &[0.25, -1.0, 2.0], 1e-12);
    }

    let map = normal(&mut r, &[36, 4], 1.0);
    let same = align(&map, 6, 6, &bx(0, 0, 5, 5), 6);
    assert_close(same.data(), map.data(), 1e-6);

    // One-pixel box: every sample is the containing cell's feature.
    let map = normal(&mut r, &[64, 2], 1.0);
    let out = align(&map, 8, 8, &bx(5, 2, 5, 2), 4);
    for i in 0..16 {
        assert_close(out.row(i), map.row(5 * 8 + 2), 1e-12);
    }
    let mix = roi_align_mix(8, 8, 1.0, &bx(5, 2, 5, 2), 4);
    assert_eq!(mix.entries.len(), 16);
}

fn refine_fixture(zero_classifier: bool) -> (ParamStore, RoiRefiner, Tensor, Tensor, Tensor) {
    let mut r = rng(19);
    let mut store = ParamStore::new();
    let roi = RoiRefiner::new(&mut store, "roi", 3, 8, 2, 2, &mut r);
    if !zero_classifier {
        jitter(&mut store, &mut r, 0.3);
    }
    let map = normal(&mut r, &[64, 8], 1.0);
    let protos = normal(&mut r, &[3, 8], 1.0);
    let scores = normal(&mut r, &[3, 1], 1.0);
    (store, roi, map, protos, scores)
}

fn refine(store: &ParamStore, roi: &RoiRefiner, map: &Tensor, protos: &Tensor, scores: &Tensor, valid: &[bool], boxes: &[RoiBox]) -> (Tensor, bool) {
    let mut g = Graph::inference(store);
    let m = MapVar {
        var: g.input(map.clone()),
        h: 8,
        w: 8,
    };
    let feats: Vec<_> = boxes
        .iter()
        .map(|b| (*b, roi_align(&mut g, m, 32, b, roi.out_size).unwrap()))
        .collect();
    let (p, s) = (g.input(protos.clone()), g.input(scores.clone()));
    let out = roi.refine(&mut g, &feats, p, valid, s).unwrap();
    (g.value(out.scores).clone(), out.applied)
}

#[test]
fn refinement_examples() {
    let boxes = [bx(2, 3, 14, 20), RoiBox { class: 2, ..bx(18, 1, 30, 12) }];

    // Zero classifier: scores pass through unchanged.
    let (store, roi, map, protos, scores) = refine_fixture(true);
    let (out, applied) = refine(&store, &roi, &map, &protos, &scores, &[true; 3], &boxes);
    assert!(applied);
    assert_eq!(out, scores);

    let (store, roi, map, protos, scores) = refine_fixture(false);
    let valid = [false, true, false];
    let (a, applied) = refine(&store, &roi, &map, &protos, &scores, &valid, &boxes);
    assert!(applied);
    assert_ne!(a, scores);
    // Only the valid row is attended: rewriting the others changes nothing.
    let mut other = protos.clone();
    for c in [0, 2] {
        for v in &mut other.data_mut()[c * 8..(c + 1) * 8] {
            *v = -*v * 3.0 + 1.0;
        }
    }
    let (b, _) = refine(&store, &roi, &map, &other, &scores, &valid, &boxes);
    assert_eq!(a, b);
    // Classes without a box keep their decoder score.
    assert_eq!(a.at(1, 0), scores.at(1, 0));

    let (none, applied) = refine(&store, &roi, &map, &protos, &scores, &valid, &[]);
    assert!(!applied);
    assert_eq!(none, scores);
    let (none, applied) = refine(&store, &roi, &map, &protos, &scores, &[false; 3], &boxes);
    assert!(!applied);
    assert_eq!(none, scores);
}

// ---- whole model ----

#[test]
fn ablated_text_path_ignores_the_ontology() {
    let mut cfg = tiny_model_config();
    cfg.ablation = Ablation::BASE;
    let emb = surrogate_label_embeddings(cfg.d_text, 1);
    let mut model = SegModel::new(cfg.clone(), emb.clone(), PartOntology::build_adjacency(), 2).unwrap();
    assert!(!model.uses_references());
    let protos = |m: &SegModel| {
        let mut g = Graph::inference(&m.store);
        let p = m.text_prototypes(&mut g).unwrap();
        g.value(p).clone()
    };
    let before = protos(&model);
    assert_eq!(before.shape(), &[N_CLASSES, cfg.d_proto]);
    let corpus = vec![(0..N_CLASSES).collect(); 3];
    model.set_ontology(PartOntology::build_adjacency().compute_cooccurrence(&corpus).unwrap());
    assert_eq!(protos(&model), before);

    cfg.ablation = Ablation::FULL;
    let mut full = SegModel::new(cfg, emb, PartOntology::build_adjacency(), 2).unwrap();
    assert!(full.uses_references());
    let before = protos(&full);
    full.set_ontology(PartOntology::build_adjacency().compute_cooccurrence(&corpus).unwrap());
    assert_ne!(protos(&full), before);
}

#[test]
fn label_embedding_width_is_checked() {
    let cfg = tiny_model_config();
    let emb = surrogate_label_embeddings(cfg.d_text + 1, 0);
    assert!(matches!(
        SegModel::new(cfg, emb, PartOntology::build_adjacency(), 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn builtin_checks_pass() {
    for r in partseg_core::selftest::run_all() {
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
}
