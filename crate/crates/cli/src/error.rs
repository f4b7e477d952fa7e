use std::fmt;

/// Exit statuses of the binary.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn field(field: &str, reason: impl fmt::Display) -> Self {
        Self::config(format!("invalid parameter `{field}`: {reason}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<lowrank_amp::Error> for CliError {
    fn from(e: lowrank_amp::Error) -> Self {
        use lowrank_amp::Error as E;
        let code = match &e {
            E::Parameter { .. } | E::Shape(_) | E::Domain(_) | E::GridRange(_) => EXIT_CONFIG,
            E::Divergence { .. } | E::NotPsd { .. } => EXIT_NUMERIC,
            E::Format(_) | E::Io(_) | E::Json(_) => EXIT_IO,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
