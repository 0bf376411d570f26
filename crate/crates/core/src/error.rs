use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; `field` is the dotted config path when known.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// A projection footprint leaves a layer grid, or grids do not match.
    #[error("geometry error ({context}): {message}")]
    Geometry { context: String, message: String },

    /// Noise model or operator is not positive definite.
    #[error("model error: {0}")]
    Model(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numerical breakdown in {solver} at iteration {iteration}: {message}")]
    Numerical {
        solver: &'static str,
        iteration: usize,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn geometry(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Geometry {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension {
                context,
                expected,
                got,
            })
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            _ => 3,
        }
    }
}
