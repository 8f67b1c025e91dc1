use std::fmt;

use cfdense::Error;

/// A failure reported as `<category>: <message>` on one line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg: Vec<&str> = self.message.split_whitespace().collect();
        write!(f, "{}: {}", self.category, msg.join(" "))
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match &e {
            Error::InvalidConfig(_)
            | Error::InvalidSpec(_)
            | Error::SingularTransform { .. }
            | Error::DegenerateCrop { .. }
            | Error::NoIntervention => "config.invalid",
            Error::LabelsRequired(_) => "data.labels_required",
            Error::NoForegroundAnchors => "data.no_foreground",
            Error::EmptyIntersection => "data.empty_intersection",
            Error::ShapeMismatch(_) => "data.shape_mismatch",
            Error::NonFiniteGradient(_) => "train.non_finite_gradient",
            Error::TooFewPoints { .. } | Error::SingleClass | Error::CollinearPoints | Error::EmptySurface { .. } => {
                "eval.degenerate"
            }
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "io.not_found",
            Error::Io { .. } => "io.error",
            Error::Format { .. } => "data.format",
        };
        CliError::new(category, e.to_string())
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: impl fmt::Display) -> CliError {
    CliError::new("io.error", format!("{}: {e}", path.display()))
}
