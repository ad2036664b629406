//! Versioned binary trace of one prefill: attention, keys, values and the
//! modality mask.
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `FKV1` |
//! | 4 | 1 | schema version |
//! | 5 | 3 | reserved, zero |
//! | 8 | 4 | layers `L` (u32) |
//! | 12 | 4 | heads `H` (u32) |
//! | 16 | 4 | tokens `n` (u32) |
//! | 20 | 4 | key/value width `d` (u32) |
//! | 24 | 4 | proxy count (u32) |
//! | 28 | n | modality mask, 0 = text, 1 = vision |
//!
//! The payload follows directly: for each layer, attention `[H][n][n]`,
//! keys `[n][d]`, values `[n][d]`, as f32.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use flowkv_core::model::Prefill;
use flowkv_core::{AttentionSnapshot, KvCache, LayerKvCache, Modality, TokenMeta};

pub const MAGIC: &[u8; 4] = b"FKV1";
pub const SCHEMA_VERSION: u8 = 1;
pub const FIXED_HEADER_LEN: usize = 28;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] io::Error),
    #[error("trace parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("trace schema version {found}, expected {expected}")]
    SchemaVersionMismatch { found: u8, expected: u8 },
    #[error("trace content invalid: {0}")]
    Invalid(#[from] flowkv_core::Error),
}

fn parse_err(offset: usize, reason: impl Into<String>) -> TraceError {
    TraceError::Parse {
        offset,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub proxy_count: usize,
}

impl TraceHeader {
    fn mask_len(&self) -> usize {
        self.seq_len
    }

    /// Payload size in bytes; `None` if it overflows.
    pub fn payload_len(&self) -> Option<usize> {
        let (h, n, d) = (self.heads, self.seq_len, self.dim);
        let per_layer = h.checked_mul(n)?.checked_mul(n)?.checked_add(n.checked_mul(d)?.checked_mul(2)?)?;
        per_layer.checked_mul(self.layers)?.checked_mul(4)
    }
}

/// A decoded trace. Caches hold exactly `seq_len` entries per layer with
/// positions `0..seq_len` and no proxy flags set.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub attention: AttentionSnapshot,
    pub cache: KvCache,
}

impl TraceFile {
    pub fn new(attention: AttentionSnapshot, cache: KvCache, proxy_count: usize) -> Result<Self, TraceError> {
        let first = cache.layers.first().ok_or(flowkv_core::Error::EmptyCache)?;
        let header = TraceHeader {
            layers: attention.layer_count(),
            heads: attention.head_count(),
            seq_len: attention.seq_len(),
            dim: first.dim().unwrap_or(0),
            proxy_count,
        };
        if cache.layer_count() != header.layers {
            return Err(flowkv_core::Error::LengthMismatch {
                what: "cache layers",
                expected: header.layers,
                got: cache.layer_count(),
            }
            .into());
        }
        for layer in &cache.layers {
            if layer.len() != header.seq_len || layer.dim().unwrap_or(0) != header.dim {
                return Err(flowkv_core::Error::InvalidSnapshot(
                    "cache layers must match the snapshot length and share one width".into(),
                )
                .into());
            }
            if layer.meta() != first.meta() {
                return Err(flowkv_core::Error::InvalidSnapshot("layers disagree on token metadata".into()).into());
            }
        }
        Ok(Self {
            header,
            attention,
            cache,
        })
    }

    pub fn from_prefill(prefill: &Prefill, proxy_count: usize) -> Result<Self, TraceError> {
        Self::new(prefill.attention.clone(), prefill.cache.clone(), proxy_count)
    }

    pub fn meta(&self) -> &[TokenMeta] {
        self.cache.layers[0].meta()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(FIXED_HEADER_LEN + h.mask_len() + h.payload_len().unwrap_or(0));
        out.extend_from_slice(MAGIC);
        out.push(SCHEMA_VERSION);
        out.extend_from_slice(&[0; 3]);
        for field in [h.layers, h.heads, h.seq_len, h.dim, h.proxy_count] {
            out.extend_from_slice(&(field as u32).to_le_bytes());
        }
        out.extend(self.meta().iter().map(|m| match m.modality {
            Modality::Text => 0u8,
            Modality::Vision => 1u8,
        }));
        let put = |out: &mut Vec<u8>, xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (l, layer) in self.cache.layers.iter().enumerate() {
            for head in 0..h.heads {
                put(&mut out, self.attention.matrix(l, head));
            }
            put(&mut out, layer.keys());
            put(&mut out, layer.values());
        }
        out
    }

    /// Parses and validates a trace: exact payload length, finite values,
    /// causal row-normalized attention.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        if bytes.len() < 5 {
            return Err(parse_err(bytes.len(), "file shorter than magic and version"));
        }
        if &bytes[..4] != MAGIC {
            return Err(parse_err(0, "bad magic"));
        }
        if bytes[4] != SCHEMA_VERSION {
            return Err(TraceError::SchemaVersionMismatch {
                found: bytes[4],
                expected: SCHEMA_VERSION,
            });
        }
        if bytes.len() < FIXED_HEADER_LEN {
            return Err(parse_err(bytes.len(), "truncated header"));
        }
        if let Some(i) = bytes[5..8].iter().position(|&b| b != 0) {
            return Err(parse_err(5 + i, "reserved byte is nonzero"));
        }
        let field = |i: usize| {
            let at = 8 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize
        };
        let header = TraceHeader {
            layers: field(0),
            heads: field(1),
            seq_len: field(2),
            dim: field(3),
            proxy_count: field(4),
        };
        if header.layers == 0 || header.heads == 0 || header.seq_len == 0 || header.dim == 0 {
            return Err(parse_err(8, "zero dimension in header"));
        }
        let mask_end = FIXED_HEADER_LEN + header.mask_len();
        if bytes.len() < mask_end {
            return Err(parse_err(bytes.len(), "truncated modality mask"));
        }
        let mut meta = Vec::with_capacity(header.seq_len);
        for (i, &b) in bytes[FIXED_HEADER_LEN..mask_end].iter().enumerate() {
            let modality = match b {
                0 => Modality::Text,
                1 => Modality::Vision,
                _ => return Err(parse_err(FIXED_HEADER_LEN + i, format!("modality byte {b}"))),
            };
            meta.push(TokenMeta::new(i, modality));
        }
        let payload_len = header
            .payload_len()
            .ok_or_else(|| parse_err(8, "header dimensions overflow"))?;
        let expected_total = mask_end
            .checked_add(payload_len)
            .ok_or_else(|| parse_err(8, "header dimensions overflow"))?;
        if bytes.len() != expected_total {
            return Err(parse_err(
                bytes.len().min(expected_total),
                format!("payload is {} bytes, header implies {payload_len}", bytes.len() - mask_end),
            ));
        }

        let mut cursor = mask_end;
        let mut take = |count: usize| -> Result<Vec<f32>, TraceError> {
            let start = cursor;
            let raw = &bytes[start..start + 4 * count];
            cursor += 4 * count;
            raw.chunks_exact(4)
                .enumerate()
                .map(|(i, c)| {
                    let x = f32::from_le_bytes(c.try_into().expect("4-byte chunk"));
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(parse_err(start + 4 * i, "non-finite value"))
                    }
                })
                .collect()
        };

        let (h, n, d) = (header.heads, header.seq_len, header.dim);
        let mut weights = Vec::with_capacity(header.layers * h * n * n);
        let mut layers = Vec::with_capacity(header.layers);
        for _ in 0..header.layers {
            weights.extend(take(h * n * n)?);
            let keys = take(n * d)?;
            let values = take(n * d)?;
            layers.push(LayerKvCache::from_parts(d, keys, values, meta.clone())?);
        }
        let attention = AttentionSnapshot::new(header.layers, h, n, weights)?;
        attention.validate_causal()?;
        Ok(Self {
            header,
            attention,
            cache: KvCache::new(layers),
        })
    }
}

pub fn write_trace(path: &Path, trace: &TraceFile) -> Result<(), TraceError> {
    let mut file = io::BufWriter::new(fs::File::create(path)?);
    file.write_all(&trace.to_bytes())?;
    file.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<TraceFile, TraceError> {
    TraceFile::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TraceFile {
        let n = 3;
        let mut attn = AttentionSnapshot::zeros(1, 1, n);
        for i in 0..n {
            for j in 0..=i {
                attn.matrix_mut(0, 0)[i * n + j] = 1.0 / (i + 1) as f32;
            }
        }
        let mut layer = LayerKvCache::new();
        for i in 0..n {
            let modality = if i == 0 { Modality::Text } else { Modality::Vision };
            layer.append(&[i as f32, -0.0], &[1.5, 2.5], TokenMeta::new(i, modality)).unwrap();
        }
        TraceFile::new(attn, KvCache::new(vec![layer]), 1).unwrap()
    }

    #[test]
    fn header_bytes() {
        let bytes = small().to_bytes();
        assert_eq!(&bytes[..8], b"FKV1\x01\0\0\0");
        assert_eq!(&bytes[8..28], &[1, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[28..31], &[0, 1, 1]);
        assert_eq!(bytes.len(), 31 + 4 * (9 + 6 + 6));
    }

    #[test]
    fn round_trip() {
        let t = small();
        let bytes = t.to_bytes();
        let back = TraceFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = small().to_bytes();
        for len in 0..bytes.len() {
            assert!(TraceFile::from_bytes(&bytes[..len]).is_err(), "len {len}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(TraceFile::from_bytes(&long), Err(TraceError::Parse { .. })));
    }

    #[test]
    fn version_and_magic() {
        let mut bytes = small().to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            TraceFile::from_bytes(&bytes),
            Err(TraceError::SchemaVersionMismatch { found: 2, expected: 1 })
        ));
        bytes[4] = 1;
        bytes[0] = b'X';
        assert!(matches!(TraceFile::from_bytes(&bytes), Err(TraceError::Parse { offset: 0, .. })));
    }

    #[test]
    fn rejects_corrupt_content() {
        let good = small().to_bytes();
        let mut bad_mask = good.clone();
        bad_mask[29] = 7;
        assert!(matches!(TraceFile::from_bytes(&bad_mask), Err(TraceError::Parse { offset: 29, .. })));

        let mut nan = good.clone();
        nan[31..35].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(TraceFile::from_bytes(&nan), Err(TraceError::Parse { offset: 31, .. })));

        // Row 0 should be [1, 0, 0]; moving mass above the diagonal breaks causality.
        let mut acausal = good;
        acausal[35..39].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(matches!(TraceFile::from_bytes(&acausal), Err(TraceError::Invalid(_))));
    }
}
