use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The CLI maps the variants onto process exit codes: configuration
/// problems exit 2, checkpoint integrity failures exit 3 and numeric
/// failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at iteration {iteration}: {diagnostic}")]
    Divergence { iteration: u64, diagnostic: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint integrity error ({entry}): {detail}")]
    Integrity { entry: String, detail: String },

    #[error("frozen backbone digest mismatch: expected {expected:016x}, found {found:016x}")]
    DigestMismatch { expected: u64, found: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
