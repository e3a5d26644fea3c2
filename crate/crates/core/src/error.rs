use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mode {mode} out of range for a {ndim}-way tensor")]
    ModeOutOfRange { mode: usize, ndim: usize },

    #[error("rank ({r3}, {r4}) outside bounds 1..={s} x 1..={t}")]
    RankBounds { r3: usize, r4: usize, s: usize, t: usize },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("regularized layer set is empty")]
    EmptyLayerSet,

    #[error("kernel has zero energy; rank selection is undefined")]
    DegenerateEnergy,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("forward cache does not belong to the current network state")]
    StaleCache,

    #[error("unknown layer id {0}")]
    UnknownLayer(usize),

    #[error("no rank entry for layer {0}")]
    MissingRank(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable class name, used by the CLI error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::ModeOutOfRange { .. } => "mode_out_of_range",
            Error::RankBounds { .. } => "rank_bounds",
            Error::NotSquare { .. } => "not_square",
            Error::NotSymmetric { .. } => "not_symmetric",
            Error::NoConvergence { .. } => "no_convergence",
            Error::EmptyLayerSet => "empty_layer_set",
            Error::DegenerateEnergy => "degenerate_energy",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::StaleCache => "stale_cache",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::MissingRank(_) => "missing_rank",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Truncated(_) => "truncated",
            Error::Io(_) => "io",
        }
    }
}
