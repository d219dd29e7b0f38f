//! Command implementations behind the `cdf` binary.

pub mod commands;
pub mod config;

use std::fmt;

/// Bad command-line input or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 2 for user or configuration errors, 1 for internal failures.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<cdf_core::Error>() {
            return if e.is_user_error() { 2 } else { 1 };
        }
    }
    1
}
