pub mod model;
pub mod qp;

use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    InvalidConfig(String),
    InvalidInput(String),
    OutOfRange(String),
    Parse { row: usize, message: String },
    Io { path: PathBuf, source: std::io::Error },
    GradientEval { component: usize, message: String },
    Numerical(String),
    Internal(String),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}
impl std::error::Error for Error {}
pub type Result<T> = std::result::Result<T, Error>;
