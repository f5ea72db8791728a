use rescalekit::Error;

pub const CONFIG: u8 = 2;
pub const NUMERICAL: u8 = 3;
pub const IO: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: IO, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Dimension(_) | Error::Parameter(_) | Error::Config(_) | Error::Json(_) => CONFIG,
            Error::Numerical(_) | Error::SingularSystem { .. } => NUMERICAL,
            Error::Io(_) | Error::Format(_) => IO,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<png::EncodingError> for Failure {
    fn from(e: png::EncodingError) -> Self {
        Self::io(format!("png: {e}"))
    }
}

/// Adds the offending path to I/O and format errors.
pub trait Context<T> {
    fn at(self, path: &std::path::Path) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn at(self, path: &std::path::Path) -> Result<T, Failure> {
        self.map_err(|e| {
            let mut f = e.into();
            f.message = format!("{}: {}", path.display(), f.message);
            f
        })
    }
}
