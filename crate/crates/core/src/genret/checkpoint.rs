//! NVCK named-tensor checkpoints.
//!
//! Layout (little-endian): magic `NVCK`, version u32, tensor count u32, then
//! per tensor: name length u16, UTF-8 name, rank u8, rank x u32 dims and the
//! f32 payload. The model config and the word list are stored as JSON in the
//! tensors `__config__` and `__words__`, one byte per f32 element.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{HeadKind, Transformer, WordVocab};
use super::tensor::Mat;
use super::{GenretError, ModelConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "__config__";
const WORDS_TENSOR: &str = "__words__";

#[derive(Serialize, Deserialize)]
struct Header {
    head: HeadKind,
    config: ModelConfig,
}

fn bytes_tensor(bytes: &[u8]) -> Mat<f32> {
    Mat::row_vec(bytes.iter().map(|&b| b as f32).collect())
}

fn tensor_bytes(name: &str, m: &Mat<f32>) -> Result<Vec<u8>, GenretError> {
    m.data
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(GenretError::Checkpoint(format!("{name} holds a non-byte value {v}")))
            }
        })
        .collect()
}

fn write_tensor<W: Write>(w: &mut W, name: &str, m: &Mat<f32>) -> std::io::Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[2u8])?;
    w.write_all(&(m.rows as u32).to_le_bytes())?;
    w.write_all(&(m.cols as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.data.len() * 4);
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_checkpoint<W: Write>(mut w: W, net: &Transformer<f32>, words: &WordVocab) -> Result<(), GenretError> {
    let header = serde_json::to_vec(&Header { head: net.head, config: net.config.clone() }).expect("header serializes");
    let word_json = serde_json::to_vec(words.words()).expect("words serialize");
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&((net.params.len() + 2) as u32).to_le_bytes())?;
    write_tensor(&mut w, CONFIG_TENSOR, &bytes_tensor(&header))?;
    write_tensor(&mut w, WORDS_TENSOR, &bytes_tensor(&word_json))?;
    for (name, m) in net.names.iter().zip(&net.params) {
        write_tensor(&mut w, name, m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, net: &Transformer<f32>, words: &WordVocab) -> Result<(), GenretError> {
    write_checkpoint(BufWriter::new(File::create(path)?), net, words)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), GenretError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => GenretError::Checkpoint("truncated file".into()),
        _ => GenretError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, GenretError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Mat<f32>), GenretError> {
    let mut b2 = [0u8; 2];
    read_exact(r, &mut b2)?;
    let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name).map_err(|_| GenretError::Checkpoint("tensor name is not UTF-8".into()))?;
    let mut rank = [0u8; 1];
    read_exact(r, &mut rank)?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        dims.push(read_u32(r)? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&c| c <= (1 << 31))
        .ok_or_else(|| GenretError::Checkpoint(format!("tensor {name} is implausibly large")))?;
    let mut raw = vec![0u8; count * 4];
    read_exact(r, &mut raw)?;
    let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let (rows, cols) = match dims.as_slice() {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (dims[0], count / dims[0].max(1)),
    };
    Ok((name, Mat::from_vec(rows, cols, data)))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Transformer<f32>, WordVocab), GenretError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(GenretError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(GenretError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    if count < 2 {
        return Err(GenretError::Checkpoint("missing config tensors".into()));
    }
    let (n0, cfg_t) = read_tensor(&mut r)?;
    let (n1, words_t) = read_tensor(&mut r)?;
    if n0 != CONFIG_TENSOR || n1 != WORDS_TENSOR {
        return Err(GenretError::Checkpoint("config tensors must come first".into()));
    }
    let header: Header = serde_json::from_slice(&tensor_bytes(&n0, &cfg_t)?)
        .map_err(|e| GenretError::Checkpoint(format!("bad config: {e}")))?;
    let word_list: Vec<String> = serde_json::from_slice(&tensor_bytes(&n1, &words_t)?)
        .map_err(|e| GenretError::Checkpoint(format!("bad word list: {e}")))?;
    let words = WordVocab::new(word_list.clone());
    if words.words() != word_list.as_slice() || words.len() != header.config.query_vocab_size {
        return Err(GenretError::Checkpoint("word list does not match the config".into()));
    }
    let mut named = Vec::with_capacity(count - 2);
    for _ in 2..count {
        named.push(read_tensor(&mut r)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(GenretError::Checkpoint("trailing bytes".into()));
    }
    let net = Transformer::from_named(&header.config, header.head, named)?;
    Ok((net, words.rebuild_lookup()))
}

pub fn load_checkpoint(path: &Path) -> Result<(Transformer<f32>, WordVocab), GenretError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genret::RetInit;

    fn small() -> (Transformer<f32>, WordVocab) {
        let words = WordVocab::new(["what", "is", "happening?", "cut", "the", "potato"].map(String::from));
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_embed: 8,
            query_vocab_size: words.len(),
            max_seq_len: 8,
            ret_init: RetInit::Eos,
            ..Default::default()
        };
        (Transformer::init(&cfg, HeadKind::Retrieval).unwrap(), words)
    }

    fn bytes() -> Vec<u8> {
        let (net, words) = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, &words).unwrap();
        buf
    }

    #[test]
    fn round_trip() {
        let (net, words) = small();
        let (back, w2) = read_checkpoint(bytes().as_slice()).unwrap();
        assert_eq!(back, net);
        assert_eq!(w2, words);
        assert_eq!(w2.id("potato"), words.id("potato"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nvck");
        save_checkpoint(&p, &net, &words).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().0, net);
    }

    #[test]
    fn corruption_rejected() {
        let good = bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&good[..good.len() - 3]).is_err());
        let mut bad = good.clone();
        bad.push(0);
        assert!(read_checkpoint(bad.as_slice()).is_err());
        // count claims one tensor too few
        let mut bad = good.clone();
        let n = u32::from_le_bytes([bad[8], bad[9], bad[10], bad[11]]) - 1;
        bad[8..12].copy_from_slice(&n.to_le_bytes());
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (net, words) = small();
        let mut other = net.clone();
        other.params[0] = Mat::zeros(1, 3);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &other, &words).unwrap();
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(GenretError::Checkpoint(_))));
    }
}
