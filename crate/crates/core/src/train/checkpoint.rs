//! Checkpoint directory: `params/` (tensor manifest of every parameter plus
//! the label embeddings and presence thresholds) and `run.json` (the resolved
//! run configuration and the weighted ontology).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::graph_encoder::LABEL_EMBEDDING_KEY;
use crate::model::SegModel;
use crate::numeric::io::{read_tensors, write_tensors};
use crate::numeric::Tensor;
use crate::ontology::PartOntology;

pub const RUN_FILE: &str = "run.json";
pub const PARAMS_DIR: &str = "params";
const THRESHOLD_KEY: &str = "presence_threshold";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    run: RunConfig,
    ontology: String,
}

pub fn save_checkpoint(dir: &Path, model: &SegModel, run: &RunConfig) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = model
        .store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    tensors.insert(LABEL_EMBEDDING_KEY.into(), model.label_embeddings.clone());
    tensors.insert(
        THRESHOLD_KEY.into(),
        Tensor::new(vec![model.presence_threshold.len()], model.presence_threshold.clone())?,
    );
    write_tensors(&dir.join(PARAMS_DIR), &tensors)?;
    let rf = RunFile {
        run: run.clone(),
        ontology: model.ontology.serialize(),
    };
    let path = dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&rf)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(SegModel, RunConfig)> {
    let path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rf: RunFile = serde_json::from_str(&text)?;
    let ontology = PartOntology::parse(&rf.ontology)?;
    let mut tensors = read_tensors(&dir.join(PARAMS_DIR))?;
    let emb = tensors
        .remove(LABEL_EMBEDDING_KEY)
        .ok_or_else(|| Error::format(dir, "checkpoint has no label embeddings"))?;
    let thr = tensors
        .remove(THRESHOLD_KEY)
        .ok_or_else(|| Error::format(dir, "checkpoint has no presence thresholds"))?;
    let mut model = SegModel::new(rf.run.model.clone(), emb, ontology, rf.run.train.seed)?;
    model.store.load_named(&tensors)?;
    if thr.len() != model.presence_threshold.len() {
        return Err(Error::format(dir, "presence threshold count mismatch"));
    }
    model.presence_threshold = thr.data().to_vec();
    Ok((model, rf.run))
}
