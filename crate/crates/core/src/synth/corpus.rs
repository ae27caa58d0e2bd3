//! Identity-disjoint train/val/test corpora and their on-disk layout:
//! `images/*.ppm`, `masks/*.pgm`, `manifest.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate, IdentitySpec, VehicleSpec, Viewpoint};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::ontology::ClassId;

/// Below this many samples some classes may never reach the train split.
const COVERAGE_MIN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    /// Viewpoint cycle applied to every identity.
    pub views: Vec<Viewpoint>,
    /// Fractions of identities assigned to train / val / test.
    pub split_fracs: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            count: 768,
            seed: 0,
            views: Viewpoint::ALL.to_vec(),
            split_fracs: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub name: String,
    pub image: String,
    pub mask: String,
    pub identity: u32,
    pub viewpoint: Viewpoint,
    pub split: Split,
    pub present: Vec<ClassId>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SampleRecord,
    pub image: Image,
    pub mask: LabelMap,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: CorpusConfig,
    samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: CorpusConfig,
    pub samples: Vec<Sample>,
}

fn split_identities(n_ids: usize, fracs: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if fracs.iter().any(|f| *f < 0.0) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split fractions {fracs:?} must be ≥ 0 and sum to 1")));
    }
    let n_train = (n_ids as f64 * fracs[0]).round() as usize;
    let n_val = ((n_ids as f64 * fracs[1]).round() as usize).min(n_ids - n_train);
    let mut order: Vec<usize> = (0..n_ids).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5a17));
    let mut out = vec![Split::Test; n_ids];
    for (rank, &id) in order.iter().enumerate() {
        out[id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Dataset> {
    if cfg.views.is_empty() {
        return Err(Error::Config("empty view mix".into()));
    }
    if cfg.count < COVERAGE_MIN {
        log::warn!(
            "{} samples may not cover every class in the train split (want ≥ {COVERAGE_MIN})",
            cfg.count
        );
    }
    let per_id = cfg.views.len();
    let n_ids = cfg.count.div_ceil(per_id);
    let splits = split_identities(n_ids, cfg.split_fracs, cfg.seed)?;
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let identity = (i / per_id) as u32;
        let ident = IdentitySpec::from_seed(identity, cfg.seed);
        let jitter = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let spec = VehicleSpec::new(ident, cfg.views[i % per_id], jitter);
        let s = generate(&spec);
        let name = format!("{i:05}");
        samples.push(Sample {
            record: SampleRecord {
                image: format!("images/{name}.ppm"),
                mask: format!("masks/{name}.pgm"),
                name,
                identity,
                viewpoint: s.viewpoint,
                split: splits[identity as usize],
                present: s.mask.present_classes(),
            },
            image: s.image,
            mask: s.mask,
        });
    }
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.record.split == split)
            .collect()
    }

    /// Per-sample present-class sets of one split.
    pub fn presence(&self, split: Split) -> Vec<BTreeSet<ClassId>> {
        self.split(split)
            .iter()
            .map(|s| s.record.present.iter().copied().collect())
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for s in &self.samples {
            s.image.write_ppm(&dir.join(&s.record.image))?;
            s.mask.write_pgm(&dir.join(&s.record.mask))?;
        }
        let manifest = Manifest {
            config: self.config.clone(),
            samples: self.samples.iter().map(|s| s.record.clone()).collect(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for record in manifest.samples {
            let image = Image::read_ppm(&dir.join(&record.image))?;
            let mask = LabelMap::read_pgm(&dir.join(&record.mask))?;
            if (image.h, image.w) != (mask.h, mask.w) {
                return Err(Error::format(
                    dir.join(&record.mask),
                    format!("mask is {}x{}, image is {}x{}", mask.w, mask.h, image.w, image.h),
                ));
            }
            samples.push(Sample {
                record,
                image,
                mask,
            });
        }
        Ok(Dataset {
            config: manifest.config,
            samples,
        })
    }
}
