use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("geometry mismatch: {0:?} vs {1:?}")]
    GeometryMismatch([usize; 3], [usize; 3]),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("field kind mismatch: expected {expected}, got {got}")]
    FieldKind { expected: &'static str, got: &'static str },
    #[error("fixed-point inversion diverged after {iterations} iterations (last update {last_update})")]
    InversionDiverged { iterations: usize, last_update: f64 },
    #[error("registration diverged at iteration {0}")]
    RegistrationDiverged(usize),
    #[error("harmonic inpainting did not converge: residual {residual} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("volume range infeasible after {0} rejections")]
    VolumeRangeInfeasible(usize),
    #[error("blob placement infeasible: {0}")]
    PlacementInfeasible(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("not NIfTI-1 single-file: {0}")]
    NotNifti(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated NIfTI payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage { stage, source: Box::new(e) }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::InversionDiverged { .. }
            | Error::RegistrationDiverged(_)
            | Error::NotConverged { .. }
            | Error::NonFinite(_)
            | Error::VolumeRangeInfeasible(_)
            | Error::PlacementInfeasible(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
