//! Config-driven experiment runner used by the `bdlab` binary.

pub mod config;
pub mod run;

use crate::error::Error;

/// Process exit status for a failed run: 2 for problems with the request
/// itself, 1 for numerical or verification failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidSpace(_)
        | Error::InvalidMixing(_)
        | Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::UnknownAtom { .. } => 2,
        _ => 1,
    }
}
