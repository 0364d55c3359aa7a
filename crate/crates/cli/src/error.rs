use ienet_core::Error as CoreError;
use ienet_data::DataError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("report: {0}")]
    Report(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    /// 1 usage/config, 2 data or file problem, 3 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Report(_) | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                CoreError::Io(_) | CoreError::Checkpoint(_) | CoreError::ArchHash { .. } | CoreError::Arch(_) => 2,
                _ => 3,
            },
        }
    }
}
