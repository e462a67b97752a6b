//! Inductive knowledge graph completion over triple-level relation networks.

pub mod kg;
pub mod par;
pub mod params;
pub mod relnet;
pub mod rng;
pub mod tensor;
pub mod layers;
pub mod leim;
pub mod pipeline;
pub mod synth;
pub mod influence;
pub mod gradcheck;

pub use pipeline::checkpoint::VERSION as CHECKPOINT_VERSION;

/// Any failure the library reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Kg(#[from] kg::KgError),
    #[error(transparent)]
    Relnet(#[from] relnet::RelnetError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Influence(#[from] influence::InfluenceError),
    #[error(transparent)]
    Gradcheck(#[from] gradcheck::GradcheckError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}
