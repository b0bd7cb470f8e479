pub mod error;
pub mod experiment;
pub mod learner;
pub mod metrics;
pub mod losses;
pub mod ontology;
pub mod par;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
