use lss_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("calibration line {line}: {msg}")]
    Calibration { line: usize, msg: String },
    #[error("{0}")]
    Config(String),
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("non-finite coordinate at point {0}")]
    NonFiniteCoord(usize),
    #[error("bin id {bin} out of range for {cells} cells")]
    BinOutOfRange { bin: u32, cells: usize },
    #[error("could not place vehicle {index} after {attempts} attempts")]
    Placement { index: usize, attempts: usize },
    #[error("sample {sample}, {field}: {msg}")]
    Dataset { sample: usize, field: String, msg: String },
    #[error("{0}")]
    Templates(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
