//! Deterministic trigram feature-hashing embedder.
//!
//! Stands in for a learned text encoder so the whole pipeline runs without
//! model weights. The procedure is fixed so that independent implementations
//! agree element for element:
//!
//! 1. canonicalize the text;
//! 2. frame it as `#text#`;
//! 3. slide a 3-byte window over the UTF-8 bytes;
//! 4. hash each trigram with 64-bit FNV-1a;
//! 5. bucket is `hash % dim`, sign is `+1` when the top bit is clear and `-1`
//!    otherwise;
//! 6. accumulate the signs per bucket;
//! 7. L2-normalize.

use super::{BackendDescriptor, BackendKind, EmbedError, EmbeddingBackend, EmbeddingVector};
use crate::labels::canonicalize;

pub const DEFAULT_REFERENCE_DIM: usize = 256;
const MIN_DIM: usize = 8;
const BOUNDARY: u8 = b'#';

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn reference_hash_embed(text: &str, dim: usize) -> Result<EmbeddingVector, EmbedError> {
    if dim < MIN_DIM {
        return Err(EmbedError::DimensionTooSmall { dim, min: MIN_DIM });
    }
    let canonical = canonicalize(text).map_err(|_| EmbedError::EmptyText)?;

    let mut framed = Vec::with_capacity(canonical.len() + 2);
    framed.push(BOUNDARY);
    framed.extend_from_slice(canonical.as_bytes());
    framed.push(BOUNDARY);

    let mut acc = vec![0.0f64; dim];
    for trigram in framed.windows(3) {
        let h = fnv1a_64(trigram);
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    EmbeddingVector::normalize(acc).ok_or(EmbedError::DegenerateEmbedding(canonical))
}

#[derive(Debug, Clone)]
pub struct ReferenceHashBackend {
    descriptor: BackendDescriptor,
}

impl ReferenceHashBackend {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < MIN_DIM {
            return Err(EmbedError::DimensionTooSmall { dim, min: MIN_DIM });
        }
        Ok(Self {
            descriptor: BackendDescriptor {
                backend_id: format!("reference-hash-{dim}"),
                dim,
                kind: BackendKind::ReferenceHash,
                concurrent: true,
            },
        })
    }
}

impl Default for ReferenceHashBackend {
    fn default() -> Self {
        Self::new(DEFAULT_REFERENCE_DIM).expect("default dim is valid")
    }
}

impl EmbeddingBackend for ReferenceHashBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        reference_hash_embed(text, self.descriptor.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nonzero(v: &EmbeddingVector) -> Vec<(usize, f64)> {
        v.values().iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect()
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a_64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a_64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a_64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn single_trigram_is_one_hot() {
        let v = reference_hash_embed("a", 8).unwrap();
        assert_eq!(nonzero(&v), vec![(6, -1.0)]);
    }

    #[test]
    fn two_trigrams_unit_norm() {
        let v = reference_hash_embed("ab", 256).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);
        assert!(!nonzero(&v).is_empty());
    }

    #[test]
    fn frozen_oracle_vectors() {
        // Values from tests/oracle/trigram_hash.py.
        let crib = reference_hash_embed("crib", 256).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let got = nonzero(&crib);
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].0, got[1].0), (98, 235));
        assert!((got[0].1 + h).abs() < 1e-12 && (got[1].1 + h).abs() < 1e-12);

        let bf = reference_hash_embed("blanket flower", 256).unwrap();
        let x = 0.2672612419124244;
        let expect: [(usize, f64); 14] = [
            (20, -x), (21, -x), (33, x), (52, -x), (55, -x), (77, x), (80, x),
            (97, x), (106, x), (107, x), (111, -x), (113, x), (158, x), (160, -x),
        ];
        let got = nonzero(&bf);
        assert_eq!(got.len(), expect.len());
        for ((gi, gv), (ei, ev)) in got.iter().zip(expect) {
            assert_eq!(*gi, ei);
            assert!((gv - ev).abs() < 1e-12);
        }
    }

    #[test]
    fn determinism_and_canonical_input() {
        let a = reference_hash_embed("Red  Car", 256).unwrap();
        let b = reference_hash_embed("red_car", 256).unwrap();
        let bits = |v: &EmbeddingVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(bits(&a), bits(&reference_hash_embed("red car", 256).unwrap()));
    }

    #[test]
    fn errors() {
        assert!(matches!(reference_hash_embed("", 256), Err(EmbedError::EmptyText)));
        assert!(matches!(
            reference_hash_embed("x", 4),
            Err(EmbedError::DimensionTooSmall { dim: 4, .. })
        ));
        assert!(ReferenceHashBackend::new(7).is_err());
    }
}
