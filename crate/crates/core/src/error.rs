use std::path::PathBuf;

use crate::data::PointAnnotation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("missing annotation file for image '{id}'")]
    MissingAnnotation { id: String },

    #[error("malformed annotation row in {path} at line {line}: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("point out of bounds for {rows}x{cols} image: {}", format_points(.offenders))]
    OutOfBounds {
        rows: usize,
        cols: usize,
        offenders: Vec<PointAnnotation>,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("synthetic spec infeasible: {0}")]
    Infeasible(String),

    #[error("training diverged at {phase} step {step}: non-finite loss")]
    Divergence { phase: &'static str, step: u64 },

    #[error("model has no {0} head")]
    MissingHead(&'static str),

    #[error("no prior mask for image '{0}'")]
    MissingPrior(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("csv error at {path}: {source}")]
    CsvFile {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::CsvFile {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input rather than a bug or environment failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Divergence { .. } | Error::Plot(_))
    }
}

fn format_points(points: &[PointAnnotation]) -> String {
    points
        .iter()
        .map(|p| format!("({},{},{})", p.x, p.y, p.label.index()))
        .collect::<Vec<_>>()
        .join(", ")
}
