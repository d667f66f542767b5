use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("unknown regime `{0}`")]
    UnknownRegime(String),

    #[error("do-value {value} out of range for {variable} (limit {limit})")]
    DoValueOutOfRange {
        variable: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("pathology class {0} out of range")]
    PathOutOfRange(usize),

    #[error("invalid box {0}")]
    InvalidBox(String),

    #[error("degenerate box {0} has zero area")]
    DegenerateBox(String),

    #[error("IoU gate {gate} unsatisfiable after {attempts} attempts")]
    GateUnsatisfiable { gate: f64, attempts: usize },

    #[error("variant precondition violated: {0}")]
    VariantPrecondition(String),

    #[error("token `{0}` is not in the vocabulary")]
    NotEncodable(String),

    #[error("token id {0} outside vocabulary")]
    TokenOutOfRange(u32),

    #[error("unknown stage id {0}")]
    UnknownStage(usize),

    #[error("stage {0} not available in trajectory")]
    StageUnavailable(usize),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("group size {0} < 2")]
    GroupTooSmall(usize),

    #[error("empty preference pair set")]
    EmptyPairs,

    #[error("evaluation set overlaps training corpus ({0} shared instances)")]
    EvalOverlap(usize),

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("missing input {0}")]
    MissingInput(String),

    #[error("stage `{stage}` aborted: {source}")]
    StageAborted {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidWorld(_) => "invalid_world",
            Error::UnknownRegime(_) => "unknown_regime",
            Error::DoValueOutOfRange { .. } => "do_value_out_of_range",
            Error::PathOutOfRange(_) => "path_out_of_range",
            Error::InvalidBox(_) => "invalid_box",
            Error::DegenerateBox(_) => "degenerate_box",
            Error::GateUnsatisfiable { .. } => "gate_unsatisfiable",
            Error::VariantPrecondition(_) => "variant_precondition",
            Error::NotEncodable(_) => "not_encodable",
            Error::TokenOutOfRange(_) => "token_out_of_range",
            Error::UnknownStage(_) => "unknown_stage",
            Error::StageUnavailable(_) => "stage_unavailable",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidConfig(_) => "invalid_config",
            Error::GroupTooSmall(_) => "group_too_small",
            Error::EmptyPairs => "empty_pairs",
            Error::EvalOverlap(_) => "eval_overlap",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::MissingInput(_) => "missing_input",
            Error::StageAborted { .. } => "stage_aborted",
            Error::Schema(_) => "schema",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
