use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("finite-difference oracle error: {0}")]
    Oracle(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("prefix row {row} is masked and cannot be gathered")]
    MaskViolation { row: usize },

    #[error("prefix design error: {0}")]
    Design(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag, used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Oracle(_) => "oracle",
            Error::Length(_) => "length",
            Error::MaskViolation { .. } => "mask_violation",
            Error::Design(_) => "design",
            Error::Config(_) => "config",
            Error::EmptyData(_) => "empty_data",
            Error::Compatibility(_) => "compatibility",
            Error::Load(_) => "load",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
