use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("environment: {0}")]
    Env(String),

    #[error("grammar line {line}: {msg}")]
    GrammarParse { line: usize, msg: String },

    #[error("grammar: {0}")]
    Grammar(String),

    #[error("search: {0}")]
    Search(String),

    #[error("model: {0}")]
    Model(String),

    #[error("replay: {0}")]
    Replay(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn env(msg: impl Into<String>) -> Self {
        Error::Env(msg.into())
    }
}
