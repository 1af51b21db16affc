//! Embedding files: a sequence of records, each
//! `u32 id_len, id bytes, u32 dim, dim × f32`, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

pub fn encode_embeddings(records: &[EmbeddingRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.extend_from_slice(&(r.vector.len() as u32).to_le_bytes());
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(Error::Data("truncated embedding file".into()));
    }
    *pos += n;
    Ok(&bytes[*pos - n..*pos])
}

fn u32_at(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()) as usize)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<EmbeddingRecord>> {
    let mut pos = 0;
    let mut records = Vec::new();
    while pos < bytes.len() {
        let len = u32_at(bytes, &mut pos)?;
        let id = String::from_utf8(take(bytes, &mut pos, len)?.to_vec())
            .map_err(|_| Error::Data("embedding id is not utf-8".into()))?;
        let dim = u32_at(bytes, &mut pos)?;
        let vector = take(bytes, &mut pos, dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(EmbeddingRecord { id, vector });
    }
    Ok(records)
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    write_atomic(path, &encode_embeddings(records))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    decode_embeddings(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let records = vec![
            EmbeddingRecord {
                id: "spk01_u03".into(),
                vector: vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0e-8],
            },
            EmbeddingRecord {
                id: "é".into(),
                vector: vec![],
            },
        ];
        let bytes = encode_embeddings(&records);
        let back = decode_embeddings(&bytes).unwrap();
        assert_eq!(encode_embeddings(&back), bytes);
        assert_eq!(back[0].vector[1].to_bits(), (-0.0f32).to_bits());
        assert!(decode_embeddings(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode_embeddings(&[]).unwrap().is_empty());
    }
}
