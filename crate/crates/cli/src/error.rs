use std::fmt;

use narravoc::bench::BenchError;
use narravoc::datagen::DatagenError;
use narravoc::embed::EmbedError;
use narravoc::genret::GenretError;
use narravoc::index::IndexError;
use narravoc::npe::NpeError;
use narravoc::oov::OovError;
use narravoc::vocab::VocabError;

/// Exit 2 for usage errors, 1 for everything else.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain { code: &'static str, message: String },
}

impl Failure {
    pub fn domain(code: &'static str, message: impl Into<String>) -> Self {
        Failure::Domain { code, message: message.into() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "cli.usage",
            Failure::Domain { code, .. } => code,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Domain { .. } => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Domain { message: m, .. } => m,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code(), self.message())
    }
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Domain { code: e.code(), message: e.to_string() }
            }
        }
    )*};
}

coded!(NpeError, VocabError, EmbedError, IndexError, GenretError, DatagenError, OovError, BenchError);

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::domain("cli.io", e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::domain("cli.json", e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;
