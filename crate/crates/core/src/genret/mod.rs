//! Generative retrieval: a small causal transformer whose trailing retrieval
//! token is scored against fixed vocabulary embeddings, plus the mean-pool
//! and token-by-token baselines it is compared with.

mod baseline;
mod checkpoint;
mod gradcheck;
mod infer;
mod loss;
mod model;
mod tape;
mod tensor;
mod train;


use serde::{Deserialize, Serialize};

pub use baseline::{evaluate_baseline, retrieval_baseline, Track};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheckReport, GroupError};
pub use infer::KvCache;
pub use loss::{nce_loss, nce_loss_grad};
pub use model::{
    score, DecodeOutput, GenRetModel, GenerativeModel, HeadKind, Transformer, WordVocab, EOS, EOS_ID, UNK, UNK_ID,
};
pub use tape::{Tape, Var};
pub use tensor::{Mat, Scalar};
pub use train::{
    build_examples, evaluate_genret, retrieve_narration, train, train_generative, Adam, EpochLog, Example, GenretEval, TrainConfig,
    TrainLog,
};

#[derive(Debug, thiserror::Error)]
pub enum GenretError {
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("word id {0} outside the model's word vocabulary")]
    UnknownWord(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Index(#[from] crate::index::IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GenretError {
    pub fn code(&self) -> &'static str {
        match self {
            GenretError::SeqTooLong { .. } => "genret.seq_too_long",
            GenretError::EmptyInput => "genret.empty_input",
            GenretError::UnknownWord(_) => "genret.unknown_word",
            GenretError::DimMismatch { .. } => "genret.dim_mismatch",
            GenretError::InvalidConfig(_) => "genret.invalid_config",
            GenretError::NonFiniteLoss { .. } => "genret.non_finite_loss",
            GenretError::Checkpoint(_) => "genret.checkpoint",
            GenretError::Data(_) => "genret.data",
            GenretError::Index(e) => e.code(),
            GenretError::Io(_) => "genret.io",
        }
    }
}

/// Where the retrieval token's input embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetInit {
    /// The EOS row of the word table.
    Eos,
    /// A dedicated trained vector.
    Learnable,
    /// Mean of the projected visual tokens.
    Pool,
}

impl RetInit {
    pub const ALL: [RetInit; 3] = [RetInit::Eos, RetInit::Learnable, RetInit::Pool];

    pub fn as_str(self) -> &'static str {
        match self {
            RetInit::Eos => "eos",
            RetInit::Learnable => "learnable",
            RetInit::Pool => "pool",
        }
    }
}

impl std::str::FromStr for RetInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "eos" => Ok(RetInit::Eos),
            "learnable" => Ok(RetInit::Learnable),
            "pool" | "pooling" => Ok(RetInit::Pool),
            other => Err(format!("unknown ret_init {other:?} (eos, learnable, pool)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Vocabulary embedding dimension D.
    pub d_embed: usize,
    pub query_vocab_size: usize,
    pub max_seq_len: usize,
    pub ret_init: RetInit,
    pub temperature: f64,
    pub seed: u64,
    /// Unit-normalize the retrieval output before scoring.
    pub normalize_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_embed: 64,
            query_vocab_size: 2,
            max_seq_len: 32,
            ret_init: RetInit::Pool,
            temperature: 0.05,
            seed: 0,
            normalize_output: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GenretError> {
        let bad = |m: &str| Err(GenretError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.d_embed == 0 || self.max_seq_len == 0 {
            return bad("d_embed and max_seq_len must be positive");
        }
        if self.query_vocab_size < 2 {
            return bad("word vocabulary needs at least EOS and UNK");
        }
        Ok(())
    }
}
