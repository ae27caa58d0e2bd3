//! On-disk retrieval index: gallery features, the embedder that produced
//! them and the dataset the entries point into.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Gallery, GalleryEntry, Hit, ReidNet, SegModel};
use crate::numeric::io::{read_tensors, write_tensors};
use crate::numeric::{ParamStore, Tensor};
use crate::synth::{Dataset, Split};

pub const INDEX_FILE: &str = "index.json";
pub const EMBEDDER_DIR: &str = "embedder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexInfo {
    /// Dataset directory holding the indexed images and masks.
    pub data: PathBuf,
    /// Indexed split; `None` indexes every sample.
    pub split: Option<Split>,
    pub image_size: usize,
    pub dim: usize,
}

pub struct GalleryIndex {
    pub info: IndexInfo,
    pub gallery: Gallery,
    store: ParamStore,
    net: ReidNet,
}

fn embedder(image_size: usize, dim: usize) -> (ParamStore, ReidNet) {
    let mut store = ParamStore::new();
    let net = ReidNet::new(&mut store, "reid", image_size, dim, &mut ChaCha8Rng::seed_from_u64(0));
    (store, net)
}

impl GalleryIndex {
    /// Indexes the samples of `data` (loaded from `data_dir`) with the
    /// model's retrieval embedder. Entry ids are positions among the
    /// indexed samples.
    pub fn build(model: &SegModel, data_dir: &Path, data: &Dataset, split: Option<Split>) -> Result<Self> {
        let samples: Vec<_> = data
            .samples
            .iter()
            .filter(|s| split.map_or(true, |sp| s.record.split == sp))
            .collect();
        if samples.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let feats: Vec<Vec<f64>> = samples
            .par_iter()
            .map(|s| model.reid.embed_tensor(&model.store, &s.image.to_tensor()))
            .collect::<Result<_>>()?;
        let gallery = Gallery {
            entries: feats
                .into_iter()
                .zip(&samples)
                .enumerate()
                .map(|(id, (feature, s))| GalleryEntry {
                    id,
                    name: s.record.name.clone(),
                    feature,
                })
                .collect(),
        };
        let (mut store, net) = embedder(model.cfg.image_size, model.cfg.d_reid);
        let reid: BTreeMap<String, Tensor> = model
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("reid."))
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        store.load_named(&reid)?;
        let data = std::fs::canonicalize(data_dir).map_err(|e| Error::io(data_dir, e))?;
        Ok(GalleryIndex {
            info: IndexInfo {
                data,
                split,
                image_size: model.cfg.image_size,
                dim: model.cfg.d_reid,
            },
            gallery,
            store,
            net,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.gallery.write(dir)?;
        let tensors: BTreeMap<String, Tensor> = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        write_tensors(&dir.join(EMBEDDER_DIR), &tensors)?;
        let path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&self.info)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let info: IndexInfo = serde_json::from_str(&text)?;
        let gallery = Gallery::load(dir)?;
        let (mut store, net) = embedder(info.image_size, info.dim);
        store.load_named(&read_tensors(&dir.join(EMBEDDER_DIR))?)?;
        if let Some(e) = gallery.entries.iter().find(|e| e.feature.len() != info.dim) {
            return Err(Error::format(&path, format!("entry {} has {} dims, index says {}", e.id, e.feature.len(), info.dim)));
        }
        Ok(GalleryIndex {
            info,
            gallery,
            store,
            net,
        })
    }

    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        self.net.embed_tensor(&self.store, &image.to_tensor())
    }

    pub fn retrieve(&self, image: &Image, k: usize) -> Result<Vec<Hit>> {
        self.gallery.retrieve(&self.embed(image)?, k)
    }
}
