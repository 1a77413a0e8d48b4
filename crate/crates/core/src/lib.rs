//! Multi-domain diffusion: one noise level per domain, so that missing views
//! are modelled as pure noise at the final timestep and any subset of domains
//! can condition the generation of the rest.

pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kv;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use dataset::{generate_dataset, DataPoint, Dataset, DatasetSpec, Domain, FactorVector, PairPolicy, SplitTag, ViewMode};
pub use denoiser::checkpoint::Checkpoint;
pub use denoiser::optim::{optimizer_step, AdamConfig, OptimizerState, PlateauScheduler};
pub use denoiser::{DataShape, Denoiser, DenoiserConfig};
pub use error::{Error, Result};
pub use eval::{mae, EvalSettings, ExperimentResult, ExperimentRow};
pub use kv::KvMap;
pub use sampler::{GenerationRequest, NoisePredictor, PhiFamily, PhiSchedule, SamplerKind};
pub use schedule::{build_tvector, gather_coefficients, NoiseSchedule, TimestepVector};
pub use tensor::{Real, Tensor};
pub use trainer::{train, Fill, LossScope, MultiDomainBatch, SchemeKind, TrainConfig, TrainingScheme};
