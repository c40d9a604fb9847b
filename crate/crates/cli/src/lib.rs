//! Batch pipeline around `ggt-core`: configuration, on-disk stages and
//! exit-code mapping for the `ggt` binary.

pub mod config;
pub mod pipeline;

use ggt_core::graph::GraphError;
use ggt_core::net::TrainError;
use ggt_core::regulate::RegulateError;

pub use config::{ConfigError, ExperimentConfig, Profile};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_ENSEMBLE: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// Process exit code for an error anywhere in the pipeline.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<pipeline::Infeasible>()
            || matches!(
                cause.downcast_ref::<GraphError>(),
                Some(GraphError::InfeasibleDegree { .. } | GraphError::GenerationExhausted { .. })
            )
            || matches!(
                cause.downcast_ref::<RegulateError>(),
                Some(RegulateError::Graph(GraphError::InfeasibleDegree { .. }))
            )
        {
            return EXIT_INFEASIBLE;
        }
        if matches!(
            cause.downcast_ref::<TrainError>(),
            Some(TrainError::EnsembleTooSmall { .. })
        ) {
            return EXIT_ENSEMBLE;
        }
        if cause.is::<pipeline::MissingArtifact>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_FAILURE
}
