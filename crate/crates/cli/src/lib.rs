//! Library side of the `rimeforge` command line tool: configuration, run
//! directories, training drivers, subcommands and report rendering.

pub mod commands;
pub mod config;
pub mod report;
pub mod run;
pub mod train;

use rimeforge::tensorcore::TensorError;
use rimeforge::Error;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for a failed command: configuration, data and numeric
/// failures get distinct codes; everything else is 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::BadConfig(_)
                | Error::NonPositiveTemperature(_)
                | Error::GroupTooSmallK(_)
                | Error::GroupTooSmall { .. } => EXIT_CONFIG,
                Error::Format(_)
                | Error::UnknownSymbol(_)
                | Error::CheckpointMismatch(_)
                | Error::Json(_)
                | Error::UnjudgedQuery(_)
                | Error::EmptyGold
                | Error::SequenceTooLong { .. } => EXIT_DATA,
                Error::NonFiniteLoss { .. }
                | Error::Tensor(TensorError::NonFiniteEvaluation | TensorError::NonFiniteGradient { .. } | TensorError::DegenerateNorm { .. }) => {
                    EXIT_NUMERIC
                }
                _ => EXIT_OTHER,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}
