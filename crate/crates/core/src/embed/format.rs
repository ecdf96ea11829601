//! NVEM binary matrix files.
//!
//! ```text
//! magic   "NVEM"          4 bytes
//! version u32 = 1         little-endian
//! dim     u32
//! count   u64
//! binding [u8; 32]        SHA-256 of the vocabulary JSONL the rows belong to
//! rows    count*dim f32   little-endian, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EmbedError, EmbeddingMatrix};

pub const MATRIX_MAGIC: &[u8; 4] = b"NVEM";
pub const MATRIX_VERSION: u32 = 1;
pub(crate) const HEADER_LEN: usize = 20;

/// Binding for matrices that are not tied to a vocabulary file.
pub const UNBOUND: [u8; 32] = [0; 32];

pub fn save_matrix(path: &Path, m: &EmbeddingMatrix, binding: &[u8; 32]) -> Result<(), EmbedError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m, binding)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_matrix<W: Write>(w: &mut W, m: &EmbeddingMatrix, binding: &[u8; 32]) -> Result<(), EmbedError> {
    // Re-checked here so nothing non-unit ever reaches disk.
    let m = EmbeddingMatrix::new(m.dim(), m.as_slice().to_vec())?;
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(m.dim() as u32).to_le_bytes())?;
    w.write_all(&(m.count() as u64).to_le_bytes())?;
    w.write_all(binding)?;
    let mut buf = Vec::with_capacity(m.as_slice().len() * 4);
    for x in m.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<(EmbeddingMatrix, [u8; 32]), EmbedError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    read_matrix(&bytes)
}

/// Load and require the stored binding to equal `expected`.
pub fn load_matrix_bound(path: &Path, expected: &[u8; 32]) -> Result<EmbeddingMatrix, EmbedError> {
    let (m, binding) = load_matrix(path)?;
    if &binding != expected {
        return Err(EmbedError::Format(format!("{} is bound to a different vocabulary", path.display())));
    }
    Ok(m)
}

pub(crate) fn read_matrix(bytes: &[u8]) -> Result<(EmbeddingMatrix, [u8; 32]), EmbedError> {
    let bad = |msg: &str| EmbedError::Format(msg.to_string());
    if bytes.len() < HEADER_LEN + 32 {
        return Err(bad("file shorter than header"));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(EmbedError::Format(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(bad("dim must be positive"));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let binding: [u8; 32] = bytes[20..52].try_into().unwrap();
    let payload = &bytes[HEADER_LEN + 32..];
    let expected = (count as u128) * (dim as u128) * 4;
    if payload.len() as u128 != expected {
        return Err(bad("row count mismatch"));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((EmbeddingMatrix::new(dim, data)?, binding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::stub_encode_text;
    use proptest::prelude::*;

    fn two_by_eight() -> EmbeddingMatrix {
        let rows = [stub_encode_text("a", 8), stub_encode_text("b", 8)];
        EmbeddingMatrix::from_rows(8, &rows).unwrap()
    }

    fn encoded(m: &EmbeddingMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        write_matrix(&mut buf, m, &[7; 32]).unwrap();
        buf
    }

    #[test]
    fn round_trip() {
        let m = two_by_eight();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nvem");
        save_matrix(&p, &m, &[7; 32]).unwrap();
        let (back, binding) = load_matrix(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(binding, [7; 32]);
        assert!(load_matrix_bound(&p, &[7; 32]).is_ok());
        assert!(load_matrix_bound(&p, &UNBOUND).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encoded(&two_by_eight());
        let err = read_matrix(&bytes[..bytes.len() - 4]).unwrap_err();
        assert_eq!(err.to_string(), "format error: row count mismatch");
    }

    #[test]
    fn zero_dim_is_rejected() {
        let mut bytes = encoded(&two_by_eight());
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(read_matrix(&bytes).unwrap_err().to_string(), "format error: dim must be positive");
    }

    #[test]
    fn bad_magic_version_and_norm_are_rejected() {
        let good = encoded(&two_by_eight());
        let mut b = good.clone();
        b[0] = b'X';
        assert!(read_matrix(&b).is_err());
        let mut b = good.clone();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(read_matrix(&b).is_err());
        let mut b = good;
        let first = HEADER_LEN + 32;
        b[first..first + 4].copy_from_slice(&3.0f32.to_le_bytes());
        assert!(matches!(read_matrix(&b), Err(EmbedError::NotUnit { row: 0, .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_matrices_round_trip(dim in 8usize..24, texts in proptest::collection::vec("[a-z ]{1,12}", 0..10)) {
            let rows: Vec<Vec<f32>> = texts.iter().map(|t| stub_encode_text(t, dim)).collect();
            let m = EmbeddingMatrix::from_rows(dim, &rows).unwrap();
            let (back, _) = read_matrix(&encoded(&m)).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
