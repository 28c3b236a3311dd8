use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("parameter error: {0}")]
    Param(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("descriptor error at token {index} ({token:?}): {reason}")]
    Descriptor {
        index: usize,
        token: String,
        reason: String,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("non-finite {component} loss")]
    NonFinite { component: &'static str },

    #[error("non-finite {component} at epoch {epoch}, batch {batch}")]
    Numeric {
        component: String,
        epoch: usize,
        batch: usize,
    },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
