//! Coarse and fine saliency explanations for KG-augmented multi-choice QA
//! models, and the Oracle and SalKG-style models that consume them.

pub mod datamodel;
pub mod error;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod params;
pub mod saliency;
pub mod salkg;
pub mod synthdata;
pub mod tape;

pub use error::{Error, Result};
