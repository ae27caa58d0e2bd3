pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod numeric;
pub mod ontology;
pub mod selftest;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, LabelMap};
pub use numeric::{Graph, ParamStore, Tensor, Var};
pub use ontology::{ClassId, PartOntology, CLASS_NAMES, N_CLASSES};
