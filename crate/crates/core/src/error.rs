use thiserror::Error;

use crate::scene::SceneError;
use crate::segnet::SegnetError;
use crate::teacher::TeacherError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Segnet(#[from] SegnetError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: L_Y = {l_y}, L_2D = {l_kd}")]
    NonFinite { step: usize, l_y: f32, l_kd: f32 },
    #[error("adaptation failed at rotation {rotation}, step {step}: {source}")]
    Adaptation {
        rotation: usize,
        step: usize,
        source: TensorError,
    },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        fn tensor(e: &TensorError) -> i32 {
            match e {
                TensorError::DegenerateFeature { .. } | TensorError::NonDeterministic { .. } => 3,
                _ => 2,
            }
        }
        match self {
            Error::Tensor(e) => tensor(e),
            Error::Segnet(SegnetError::Tensor(e)) => tensor(e),
            Error::Adaptation { .. } | Error::NonFinite { .. } | Error::Metric(_) => 3,
            Error::Io { .. }
            | Error::Scene(SceneError::Io { .. } | SceneError::Format { .. })
            | Error::Teacher(TeacherError::Io { .. } | TeacherError::Format { .. })
            | Error::Segnet(SegnetError::Io { .. } | SegnetError::Checkpoint { .. }) => 4,
            _ => 2,
        }
    }
}
