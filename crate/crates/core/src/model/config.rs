use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which optional components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Graph-refined textual prototypes (otherwise a linear projection of the
    /// raw label embeddings).
    pub gtp: bool,
    /// Visual prototypes from retrieved reference vehicles.
    pub vp: bool,
    /// ROI attention refinement of class scores.
    pub ram: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        gtp: true,
        vp: true,
        ram: true,
    };
    pub const BASE: Ablation = Ablation {
        gtp: false,
        vp: false,
        ram: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.gtp, self.vp, self.ram) {
            (false, false, false) => "Base",
            (true, false, false) => "+GTP",
            (true, false, true) => "+GTP+RAM",
            (false, true, true) => "+VP+RAM",
            (true, true, true) => "Full",
            (false, true, false) => "+VP",
            (false, false, true) => "+RAM",
            (true, true, false) => "+GTP+VP",
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatConfig {
    pub layers: usize,
    /// Heads per layer; the last layer must be single-head.
    pub heads: Vec<usize>,
    /// Width of the concatenated hidden representation.
    pub hidden: usize,
    pub slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            layers: 4,
            heads: vec![4, 4, 1, 1],
            hidden: 32,
            slope: 0.2,
        }
    }
}

impl GatConfig {
    /// Default head layout for a given depth: four heads in the first two
    /// layers, one head afterwards.
    pub fn with_layers(layers: usize) -> Self {
        GatConfig {
            layers,
            heads: (0..layers).map(|l| if l < 2 && l + 1 < layers { 4 } else { 1 }).collect(),
            ..GatConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads.len() != self.layers {
            return Err(Error::Config(format!(
                "gat: {} layers but {} head counts",
                self.layers,
                self.heads.len()
            )));
        }
        if self.heads.iter().any(|&h| h == 0 || self.hidden % h != 0) {
            return Err(Error::Config(format!(
                "gat: head counts {:?} must divide hidden width {}",
                self.heads, self.hidden
            )));
        }
        if *self.heads.last().unwrap() != 1 {
            return Err(Error::Config("gat: output layer must be single-head".into()));
        }
        Ok(())
    }
}

/// Network dimensions. Comments give the corresponding full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input side length (full scale: 640×480 resized).
    pub image_size: usize,
    /// Decoder feature width (256).
    pub d_model: usize,
    /// Prototype width (256).
    pub d_proto: usize,
    /// Label embedding width (768).
    pub d_text: usize,
    pub stem_channels: usize,
    /// Pyramid widths at strides 4/8/16/32 (384/768/1536/3072).
    pub pyramid_channels: [usize; 4],
    pub attn_heads: usize,
    pub decoder_blocks: usize,
    pub decoder_mlp: usize,
    /// Per-class hypernetwork output width = final upscaled channel count.
    pub mask_channels: usize,
    pub ppem_hidden: usize,
    pub ppem_per_class: usize,
    /// ReID embedding width (768).
    pub d_reid: usize,
    /// Width of the visual-prototype attention stack.
    pub d_vp: usize,
    pub roi_size: usize,
    /// Minimum predicted-mask area for an ROI, in pixels (32 at full scale).
    pub roi_min_area: usize,
    /// Number of retrieved references.
    pub refs: usize,
    pub gat: GatConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            d_model: 32,
            d_proto: 32,
            d_text: 48,
            stem_channels: 8,
            pyramid_channels: [16, 32, 64, 128],
            attn_heads: 2,
            decoder_blocks: 2,
            decoder_mlp: 64,
            mask_channels: 8,
            ppem_hidden: 16,
            ppem_per_class: 4,
            d_reid: 64,
            d_vp: 16,
            roi_size: 4,
            roi_min_area: 8,
            refs: 2,
            gat: GatConfig::default(),
            ablation: Ablation::FULL,
        }
    }
}

impl ModelConfig {
    /// Side of the decode-time feature map (stride 8).
    pub fn feat_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 16 != 0 || self.image_size == 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.d_model % 2 != 0 || self.d_model % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be even and divisible by {} heads",
                self.d_model, self.attn_heads
            )));
        }
        if self.d_proto != self.d_model {
            return Err(Error::Config(format!(
                "d_proto {} must equal d_model {}",
                self.d_proto, self.d_model
            )));
        }
        if self.d_vp % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "d_vp {} not divisible by {} heads",
                self.d_vp, self.attn_heads
            )));
        }
        if self.refs == 0 {
            return Err(Error::Config("refs must be ≥ 1".into()));
        }
        if self.ablation.gtp {
            self.gat.validate()?;
        }
        Ok(())
    }
}
