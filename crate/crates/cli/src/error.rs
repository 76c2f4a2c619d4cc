use deom::DeomError;

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_NO_CONVERGENCE: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] DeomError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(e) => match e {
                DeomError::Divergence { .. } => EXIT_DIVERGENCE,
                DeomError::NoConvergence { .. } | DeomError::Singular(_) => EXIT_NO_CONVERGENCE,
                DeomError::Io(_) | DeomError::Snapshot(_) => EXIT_IO,
                DeomError::Invalid(_)
                | DeomError::Dimension(_)
                | DeomError::NotHermitian(_)
                | DeomError::Budget { .. } => EXIT_CONFIG,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(CliError::Config("x".into()).exit_code(), EXIT_CONFIG);
        let div = DeomError::Divergence {
            time: 1.0,
            norm: 1e9,
            bound: 1e8,
        };
        assert_eq!(CliError::from(div).exit_code(), EXIT_DIVERGENCE);
        let nc = DeomError::NoConvergence {
            what: "x".into(),
            detail: "y".into(),
        };
        assert_eq!(CliError::from(nc).exit_code(), EXIT_NO_CONVERGENCE);
        let io = std::io::Error::other("disk");
        assert_eq!(CliError::from(io).exit_code(), EXIT_IO);
        assert_eq!(
            CliError::from(DeomError::Invalid("bad".into())).exit_code(),
            EXIT_CONFIG
        );
    }
}
