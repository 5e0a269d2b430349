use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] ance_core::Error),
}

impl CliError {
    /// `(exit code, kind)`: 2 config, 3 data, 4 numerical divergence.
    pub fn classify(&self) -> (i32, &'static str) {
        use ance_core::Error as E;
        match self {
            CliError::Config(_) => (2, "config"),
            CliError::Data(_) => (3, "data"),
            CliError::Core(e) => match e {
                E::Config(_) => (2, "config"),
                E::NonFinite { .. } | E::Diverged { .. } => (4, "divergence"),
                _ => (3, "data"),
            },
        }
    }

    /// One-line JSON record for stderr.
    pub fn to_json_line(&self) -> String {
        let (code, kind) = self.classify();
        serde_json::json!({ "error": kind, "code": code, "message": self.to_string() }).to_string()
    }
}
