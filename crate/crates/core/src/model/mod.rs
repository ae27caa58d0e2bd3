//! The segmentation network: image encoder, prototype streams, prompt
//! encoder, multi-class decoder and ROI refinement.

pub mod backbone;
pub mod config;
pub mod context;
pub mod decoder;
pub mod fusion;
pub mod graph_encoder;
pub mod roi;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backbone::{positional_encoding, Backbone, BackboneOut, MapVar};
pub use config::{Ablation, GatConfig, ModelConfig};
pub use context::{EncodedRef, Gallery, GalleryEntry, Hit, ReferenceEncoder, ReidNet, VisualPrototypeNet};
pub use decoder::{DecoderDims, MaskDecoder, MaskSet};
pub use fusion::{ppem_activate, Cdt, Ppem, PresenceHead, PromptEmbeddings};
pub use graph_encoder::{GraphEncoder, Neighborhoods, TextEncoder};
pub use roi::{mask_to_boxes, RoiBox, RoiRefiner};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::numeric::nn::Linear;
use crate::numeric::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::ontology::{PartOntology, N_CLASSES};

/// A retrieved reference vehicle: its encoder features (detached) and mask.
#[derive(Clone, Debug)]
pub struct Reference {
    pub feat: Tensor,
    pub mask: LabelMap,
}

/// How the per-class presence flags feeding the sparse prompts are chosen.
#[derive(Clone, Copy, Debug)]
pub enum Presence<'a> {
    /// Ground-truth flags (training).
    Given(&'a [bool]),
    /// Auxiliary presence logits against the calibrated thresholds.
    Predict,
}

pub struct ForwardOut {
    /// `(H·W) × n_cls` mask logits.
    pub logits: Var,
    /// Decoder token scores before refinement, `n_cls × 1`.
    pub token_scores: Var,
    /// Final class scores, `n_cls × 1`.
    pub scores: Var,
    /// Auxiliary presence logits, `1 × n_cls`.
    pub presence_logits: Var,
    pub presence: Vec<bool>,
    pub boxes: Vec<RoiBox>,
    pub ram_applied: bool,
}

/// Prediction for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub masks: MaskSet,
    pub scores: Vec<f64>,
    pub presence: Vec<bool>,
    pub label_map: LabelMap,
}

struct VisualStream {
    encoder: ReferenceEncoder,
    net: VisualPrototypeNet,
    cdt: Cdt,
}

pub struct SegModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub label_embeddings: Tensor,
    pub ontology: PartOntology,
    neighborhoods: Neighborhoods,
    backbone: Backbone,
    text: TextEncoder,
    cdt_text: Cdt,
    ppem: Ppem,
    presence_head: PresenceHead,
    decoder: MaskDecoder,
    pub reid: ReidNet,
    visual: Option<VisualStream>,
    roi: Option<RoiRefiner>,
    /// Per-class thresholds on the auxiliary presence logits.
    pub presence_threshold: Vec<f64>,
}

impl SegModel {
    pub fn new(cfg: ModelConfig, label_embeddings: Tensor, ontology: PartOntology, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if label_embeddings.shape() != [N_CLASSES, cfg.d_text] {
            return Err(Error::Config(format!(
                "label embeddings have shape {:?}, expected [{N_CLASSES}, {}]",
                label_embeddings.shape(),
                cfg.d_text
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let st = &mut store;
        let d = cfg.d_model;
        let n = N_CLASSES;
        let backbone = Backbone::new(st, "backbone", &cfg, &mut rng);
        let text = if cfg.ablation.gtp {
            TextEncoder::Graph(GraphEncoder::new(st, "gat", &cfg.gat, cfg.d_text, cfg.d_proto, &mut rng)?)
        } else {
            TextEncoder::Linear(Linear::new(st, "text_proj", ParamGroup::Embedding, cfg.d_text, cfg.d_proto, true, &mut rng))
        };
        let cdt_text = Cdt::new(st, "cdt_text", d, cfg.attn_heads, &mut rng);
        let ppem = Ppem::new(st, "ppem", n, d, cfg.ppem_hidden, cfg.ppem_per_class, &mut rng);
        let presence_head = PresenceHead::new(st, "presence", n, cfg.pyramid_channels[3], cfg.decoder_mlp, &mut rng);
        let decoder = MaskDecoder::new(
            st,
            "decoder",
            DecoderDims {
                n_cls: n,
                d,
                heads: cfg.attn_heads,
                blocks: cfg.decoder_blocks,
                mlp: cfg.decoder_mlp,
                mask_channels: cfg.mask_channels,
                skip_channels: (cfg.pyramid_channels[0], cfg.stem_channels),
                image_size: cfg.image_size,
            },
            &mut rng,
        );
        let reid = ReidNet::new(st, "reid", cfg.image_size, cfg.d_reid, &mut rng);
        let visual = if cfg.ablation.vp {
            Some(VisualStream {
                encoder: ReferenceEncoder::new(st, "ref_enc", n, cfg.image_size, cfg.feat_side(), d, &mut rng)?,
                net: VisualPrototypeNet::new(st, "vproto", n, d, cfg.d_vp, cfg.attn_heads, &mut rng),
                cdt: Cdt::new(st, "cdt_visual", d, cfg.attn_heads, &mut rng),
            })
        } else {
            None
        };
        let roi = cfg
            .ablation
            .ram
            .then(|| RoiRefiner::new(st, "roi", n, d, cfg.attn_heads, cfg.roi_size, &mut rng));
        Ok(SegModel {
            neighborhoods: Neighborhoods::from_ontology(&ontology),
            cfg,
            store,
            label_embeddings,
            ontology,
            backbone,
            text,
            cdt_text,
            ppem,
            presence_head,
            decoder,
            reid,
            visual,
            roi,
            presence_threshold: vec![0.0; n],
        })
    }

    pub fn uses_references(&self) -> bool {
        self.visual.is_some()
    }

    /// Replaces the ontology (and the attention bias derived from it).
    pub fn set_ontology(&mut self, ontology: PartOntology) {
        self.neighborhoods = Neighborhoods::from_ontology(&ontology);
        self.ontology = ontology;
    }

    /// Textual prototypes `P_t` (`n_cls × d_proto`).
    pub fn text_prototypes(&self, g: &mut Graph) -> Result<Var> {
        let t = g.input(self.label_embeddings.clone());
        self.text.forward(g, t, &self.neighborhoods)
    }

    /// Decode-time features of an image, computed without a tape; used for
    /// reference vehicles.
    pub fn reference_features(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(image.clone());
        let out = self.backbone.forward(&mut g, x)?;
        Ok(g.value(out.feat.var).clone())
    }

    /// Auxiliary presence logits alone (no decoding), used to calibrate the
    /// presence thresholds.
    pub fn presence_logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(image.clone());
        let bb = self.backbone.forward(&mut g, x)?;
        let pe = g.input(positional_encoding(bb.feat.h, bb.feat.w, self.cfg.d_model)?);
        let p_t = self.text_prototypes(&mut g)?;
        let p_t = self.cdt_text.forward(&mut g, p_t, bb.feat.var, pe)?;
        let (_, sim) = ppem_activate(&mut g, bb.feat.var, p_t)?;
        let z = self.presence_head.forward(&mut g, sim, bb.levels[3].var, self.cfg.d_model)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor, presence: Presence, refs: &[Reference]) -> Result<ForwardOut> {
        let cfg = &self.cfg;
        let n = N_CLASSES;
        let x = g.input(image.clone());
        let bb = self.backbone.forward(g, x)?;
        let feat = bb.feat;
        let pe = g.input(positional_encoding(feat.h, feat.w, cfg.d_model)?);

        let p_t = self.text_prototypes(g)?;
        let p_t = self.cdt_text.forward(g, p_t, feat.var, pe)?;
        let (act, sim) = ppem_activate(g, feat.var, p_t)?;
        let presence_logits = self.presence_head.forward(g, sim, bb.levels[3].var, cfg.d_model)?;
        let presence: Vec<bool> = match presence {
            Presence::Given(p) => {
                if p.len() != n {
                    return Err(Error::Config(format!("{} presence flags for {n} classes", p.len())));
                }
                p.to_vec()
            }
            Presence::Predict => {
                let v = g.value(presence_logits).data();
                (0..n).map(|c| v[c] > self.presence_threshold[c]).collect()
            }
        };
        let prompts = self.ppem.embed(g, act, n, &presence)?;
        let dec = self
            .decoder
            .decode(g, feat, prompts.dense, prompts.sparse, pe, (bb.levels[0], bb.stem))?;

        // Prototypes the ROI refinement attends to.
        let mut keys: Option<(Var, Vec<bool>)> = None;
        if let Some(vs) = &self.visual {
            if !refs.is_empty() {
                let mut enc = Vec::with_capacity(refs.len());
                for r in refs {
                    let f = g.input(r.feat.clone());
                    enc.push(vs.encoder.encode(g, f, &r.mask)?);
                }
                match vs.net.forward(g, &enc, vs.encoder.n_tok()) {
                    Ok(vp) => {
                        let p = vs.cdt.forward(g, vp.protos, feat.var, pe)?;
                        keys = Some((p, vp.valid));
                    }
                    Err(Error::NoSupport) => log::warn!("references carry no labelled class; skipping refinement"),
                    Err(e) => return Err(e),
                }
            }
        } else {
            keys = Some((p_t, vec![true; n]));
        }

        let (mut scores, mut boxes, mut ram_applied) = (dec.scores, Vec::new(), false);
        if let (Some(roi), Some((protos, valid))) = (&self.roi, keys) {
            let masks = MaskSet {
                h: cfg.image_size,
                w: cfg.image_size,
                logits: g.value(dec.logits).clone(),
            };
            boxes = mask_to_boxes(&masks, 0.5, cfg.roi_min_area);
            let mut feats = Vec::with_capacity(boxes.len());
            for bx in &boxes {
                let lvl = bb.pyramid[roi::level_for_area(bx.area)];
                feats.push((*bx, roi::roi_align(g, lvl, cfg.image_size, bx, roi.out_size)?));
            }
            let r = roi.refine(g, &feats, protos, &valid, scores)?;
            scores = r.scores;
            ram_applied = r.applied;
        }
        Ok(ForwardOut {
            logits: dec.logits,
            token_scores: dec.scores,
            scores,
            presence_logits,
            presence,
            boxes,
            ram_applied,
        })
    }

    /// Tape-free prediction with predicted presence.
    pub fn predict(&self, image: &Image, refs: &[Reference]) -> Result<Prediction> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, &image.to_tensor(), Presence::Predict, refs)?;
        let masks = MaskSet {
            h: image.h,
            w: image.w,
            logits: g.value(out.logits).clone(),
        };
        let scores = g.value(out.scores).data().to_vec();
        let active: Vec<bool> = scores.iter().map(|&s| s > 0.0).collect();
        let label_map = masks.semantic_map(&active);
        Ok(Prediction {
            masks,
            scores,
            presence: out.presence,
            label_map,
        })
    }
}
