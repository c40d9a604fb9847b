//! Graph-guided testing: detecting adversarial inputs by how often an
//! ensemble of graph-pruned models disagrees with the original model.
//!
//! Pipeline: generate k-regular relational graphs and steer their average
//! shortest path length into a target bin ([`regulate`]); turn each graph
//! into channel masks ([`mapping`]) and retrain a pruned copy of the
//! original classifier ([`net`]); build normal and adversarial samples
//! ([`forge`]); decide per input with a sequential probability ratio test
//! over the ensemble's label changes ([`detector`]); summarize ([`metrics`]).

pub mod detector;
pub mod forge;
pub mod graph;
pub mod mapping;
pub mod metrics;
pub mod net;
pub mod regulate;
pub mod rng;

pub use detector::{
    calibrate, lcr, sprt_decide, sprt_detect, CalibrationMode, Decision, DetectError,
    DetectorCalibration, LabelMatrix, SprtParams, Verdict,
};
pub use forge::{Corpus, Dataset, Example, LabeledSample, SampleKind};
pub use graph::{generate_regular_graph, GraphError, RelationalGraph};
pub use mapping::{plan_for_model, Mask, MaskPlan};
pub use metrics::{auroc, dsd, EvaluationReport, ReportRow, Separation};
pub use net::{MaskedModel, ModelSpec, TrainHyper};
pub use regulate::{regulate_aspl, AsplTarget};
