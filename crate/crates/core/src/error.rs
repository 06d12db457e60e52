use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Variants map onto the failure classes the public APIs promise: shape
/// conformance, configuration validation, call-sequence state, name lookups,
/// file I/O, and on-disk format problems.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a contract) disagree on dimensions.
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Shape {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A parameter value outside its documented domain (e.g. lr <= 0).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation invoked out of sequence (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),

    /// A name was not found in a registry, catalog, or index.
    #[error("unknown {kind} '{name}'{}", format_available(.available))]
    Lookup {
        kind: &'static str,
        name: String,
        available: Vec<String>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// A file exists but its contents violate the documented layout.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },
}

fn format_available(available: &[String]) -> String {
    if available.is_empty() {
        String::new()
    } else {
        format!("; available: {}", available.join(", "))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn lookup(kind: &'static str, name: impl Into<String>, available: Vec<String>) -> Self {
        Error::Lookup {
            kind,
            name: name.into(),
            available,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_error_names_both_shapes() {
        let err = Error::shape("affine", &[2, 3], &[4, 5]);
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was: {msg}");
        assert!(msg.contains("[4, 5]"), "message was: {msg}");
    }

    #[test]
    fn lookup_error_lists_candidates() {
        let err = Error::lookup("language adapter", "deu", vec!["eng".into(), "fra".into()]);
        let msg = err.to_string();
        assert!(msg.contains("deu"));
        assert!(msg.contains("eng, fra"));
    }
}
