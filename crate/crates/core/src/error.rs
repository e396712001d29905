//! Crate-wide error type.

/// Errors surfaced by the library.
///
/// `Contract` covers every precondition/invariant violation (dimension
/// mismatches, empty inputs, unresolvable ids); the CLI maps it to exit
/// code 2. The message names the offending quantity so callers can act on
/// it without parsing structure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns a contract error unless every entry of `data` is finite.
pub fn ensure_finite(
    name: &str,
    data: impl IntoIterator<Item = f64>,
) -> Result<()> {
    for (i, x) in data.into_iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::contract(format!(
                "{name} contains non-finite entry {x} at flat index {i}"
            )));
        }
    }
    Ok(())
}
