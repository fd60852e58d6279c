//! Front end for the passiflow library: JSON run configurations, run
//! orchestration, CSV and summary emission, and the verification suites.

pub mod adaptive_cmd;
pub mod config;
pub mod output;
pub mod run;
pub mod verify;

/// Failure classes, each with a fixed process exit code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("synthesis error: {0}")]
    Synthesis(String),
    #[error("integrator failure: {0}")]
    Integrator(String),
    #[error("certificate failure: {0}")]
    Certificate(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 1 certificate failure, 2 config or synthesis, 3 integrator.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Certificate(_) => 1,
            CliError::Config(_) | CliError::Synthesis(_) | CliError::Io(_) => 2,
            CliError::Integrator(_) => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_fixed() {
        assert_eq!(CliError::Certificate(String::new()).exit_code(), 1);
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Synthesis(String::new()).exit_code(), 2);
        assert_eq!(CliError::Integrator(String::new()).exit_code(), 3);
    }
}
