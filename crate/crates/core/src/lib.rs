//! Narration vocabularies and retrieval over them.
//!
//! Narrations are split into scene labels, base prefixes and postfixes
//! ([`npe`], [`vocab`]), embedded ([`embed`]) and searched hierarchically
//! ([`index`]). [`genret`] maps video clips plus a question to a retrieval
//! query instead of generating text; [`oov`] grows the vocabulary when nothing
//! matches well.

pub mod bench;
pub mod datagen;
pub mod embed;
pub mod genret;
pub mod index;
pub mod metrics;
pub mod npe;
pub mod oov;
pub mod transport;
pub mod vocab;
