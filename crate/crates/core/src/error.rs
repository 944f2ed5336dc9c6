use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular profile: {0}")]
    SingularProfile(String),

    #[error("kernel is unbounded on (0,1]^2: {0}")]
    Unbounded(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    /// A trial step would drive cell `cell` negative.
    #[error("step rejected: dt = {dt:e} exceeds the positivity bound {bound:e} set by cell {cell}")]
    StepRejected { dt: f64, bound: f64, cell: usize },

    #[error("time step underflow at t = {t}: cell {cell} is too stiff for explicit stepping")]
    Stiffness { t: f64, cell: usize },

    #[error("Picard iteration: {0}")]
    Picard(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by the inputs rather than by the dynamics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Config(_)
                | Error::SingularProfile(_)
                | Error::Unbounded(_)
                | Error::InvalidScenario(_)
                | Error::Parse(_)
        )
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
