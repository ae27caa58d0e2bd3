//! The gallery of labelled vehicles that references are retrieved from,
//! keyed by context-retrieval features.

use rayon::prelude::*;

use crate::error::Result;
use crate::image::{Image, LabelMap};
use crate::model::{Gallery, GalleryEntry, Reference, SegModel};
use crate::numeric::Tensor;
use crate::synth::Sample;

struct BankItem {
    name: String,
    identity: u32,
    mask: LabelMap,
    image: Tensor,
}

/// Labelled gallery with retrieval features and cached encoder features.
pub struct ReferenceBank {
    items: Vec<BankItem>,
    pub gallery: Gallery,
    feats: Vec<Tensor>,
}

impl ReferenceBank {
    /// Embeds every sample with the retrieval network and caches encoder
    /// features. Gallery ids are positions in `samples`.
    pub fn build(model: &SegModel, samples: &[&Sample]) -> Result<Self> {
        let items: Vec<BankItem> = samples
            .iter()
            .map(|s| BankItem {
                name: s.record.name.clone(),
                identity: s.record.identity,
                mask: s.mask.clone(),
                image: s.image.to_tensor(),
            })
            .collect();
        let feats: Result<Vec<Vec<f64>>> = items
            .par_iter()
            .map(|it| model.reid.context_tensor(&model.store, &it.image))
            .collect();
        let gallery = Gallery {
            entries: feats?
                .into_iter()
                .enumerate()
                .map(|(id, feature)| GalleryEntry {
                    id,
                    name: items[id].name.clone(),
                    feature,
                })
                .collect(),
        };
        let mut bank = ReferenceBank {
            items,
            gallery,
            feats: Vec::new(),
        };
        bank.refresh(model)?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn identity(&self, id: usize) -> u32 {
        self.items[id].identity
    }

    /// Recomputes the cached encoder features with the current weights.
    pub fn refresh(&mut self, model: &SegModel) -> Result<()> {
        if !model.uses_references() {
            self.feats.clear();
            return Ok(());
        }
        self.feats = self
            .items
            .par_iter()
            .map(|it| model.reference_features(&it.image))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Gallery ids of the `k` nearest entries to `query`, skipping `exclude`.
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        let hits = self.gallery.retrieve_filtered(query, k, |e| Some(e.id) != exclude)?;
        Ok(hits.into_iter().map(|h| h.id).collect())
    }

    /// Like [`Self::nearest`] but skips every entry of `identity`.
    pub fn nearest_other_identity(&self, query: &[f64], k: usize, identity: u32) -> Result<Vec<usize>> {
        let hits = self
            .gallery
            .retrieve_filtered(query, k, |e| self.items[e.id].identity != identity)?;
        Ok(hits.into_iter().map(|h| h.id).collect())
    }

    pub fn references(&self, ids: &[usize]) -> Vec<Reference> {
        ids.iter()
            .map(|&i| Reference {
                feat: self.feats[i].clone(),
                mask: self.items[i].mask.clone(),
            })
            .collect()
    }

    /// Retrieves references for an arbitrary image.
    pub fn references_for(&self, model: &SegModel, image: &Image, k: usize) -> Result<Vec<Reference>> {
        if !model.uses_references() {
            return Ok(Vec::new());
        }
        let q = model.reid.context_tensor(&model.store, &image.to_tensor())?;
        Ok(self.references(&self.nearest(&q, k, None)?))
    }
}
