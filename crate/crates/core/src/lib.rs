//! Next-event prediction over clinical event streams.
//!
//! The pipeline: synthetic or loaded cohorts ([`event_model`], [`synthgen`]),
//! temperature-balanced target selection ([`sampler`]), instruction/response
//! serialization ([`serializer`]), a miniature decoder trained on next-event
//! prediction ([`nanolm`]), frozen embeddings ([`embedder`]) and downstream
//! evaluation ([`evaluator`]).

pub mod embedder;
pub mod error;
pub mod evaluator;
pub mod event_model;
pub mod nanolm;
pub mod sampler;
pub mod serializer;
pub mod synthgen;
pub mod util;

pub use embedder::{embed_cohort, embed_patient, EmbedConfig, EmbeddingMatrix, Pooling};
pub use error::{NepError, Result};
pub use evaluator::{
    auroc, c_index, cross_validate, label_efficiency_sweep, HeadConfig, LabeledDataset, Labels,
    MetricReport,
};
pub use event_model::{
    event_type_frequencies, load_cohort, ClinicalEvent, EventKey, EventType, EventVocabulary,
    FrequencyTable, Outcome, PatientRecord, TokenId,
};
pub use nanolm::{
    adapter_merge, forward, grad_check, train, AdapterSet, AttentionMaskMode, Checkpoint,
    ModelConfig, ModelParams, TrainConfig,
};
pub use sampler::{
    sample_training_positions, type_distribution, SamplingConfig, SamplingDistribution,
    TargetSelection,
};
pub use serializer::{build_instances, time_bucket, TrainingInstance, WindowConfig};
pub use synthgen::{
    generate_cohort, oracle_conditional_entropy, oracle_next_event_dist, CohortSpec, MarkovOracle,
};
