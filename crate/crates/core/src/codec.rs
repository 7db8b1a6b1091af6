//! Run-length wire format for sparse updates.
//!
//! The stream is a sequence of 6-byte tokens, each a little-endian `u16`
//! run of zeros followed by a little-endian `f32` value. The run counts the
//! zeros strictly between the previous value and this one. Gaps longer than
//! `u16::MAX` are bridged with `[65535][+0.0]` filler tokens. Zeros after the
//! last value are implied by the out-of-band original length.

use std::fs;
use std::path::Path;

use crate::error::{DgcError, Result};

/// Bytes per token: 2 for the run length, 4 for the value.
pub const TOKEN_BYTES: usize = 6;
pub const MAX_RUN: usize = u16::MAX as usize;
/// Dense encoding cost of one 32-bit element.
pub const DENSE_ELEMENT_BYTES: usize = 4;

/// Indices and values of the surviving gradient entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    indices: Vec<usize>,
    values: Vec<f32>,
    length: usize,
}

impl SparseUpdate {
    pub fn new(indices: Vec<usize>, values: Vec<f32>, length: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(DgcError::InvalidUpdate(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(DgcError::InvalidUpdate(format!(
                    "indices not strictly increasing at {}",
                    w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= length {
                return Err(DgcError::InvalidUpdate(format!(
                    "index {last} out of range for length {length}"
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| **v == 0.0 || !v.is_finite()) {
            return Err(DgcError::InvalidUpdate(format!(
                "stored value {v} must be finite and nonzero"
            )));
        }
        Ok(Self {
            indices,
            values,
            length,
        })
    }

    /// Caller guarantees the invariants checked by [`SparseUpdate::new`].
    pub(crate) fn from_parts_unchecked(
        indices: Vec<usize>,
        values: Vec<f32>,
        length: usize,
    ) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(values.iter().all(|v| *v != 0.0 && v.is_finite()));
        Self {
            indices,
            values,
            length,
        }
    }

    pub fn empty(length: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            length,
        }
    }

    /// Keeps the nonzero entries of a dense slice.
    pub fn from_dense(dense: &[f32]) -> Result<Self> {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in dense.iter().enumerate() {
            if !v.is_finite() {
                return Err(DgcError::NonFinite { index: i });
            }
            if v != 0.0 {
                indices.push(i);
                values.push(v);
            }
        }
        Ok(Self::from_parts_unchecked(indices, values, dense.len()))
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn density(&self) -> f64 {
        if self.length == 0 {
            0.0
        } else {
            self.nnz() as f64 / self.length as f64
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    pub fn densify(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.length];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    /// Adds this update into a dense accumulator.
    pub fn add_into(&self, acc: &mut [f32]) -> Result<()> {
        if acc.len() != self.length {
            return Err(DgcError::LengthMismatch {
                expected: self.length,
                actual: acc.len(),
            });
        }
        for (i, v) in self.iter() {
            acc[i] += v;
        }
        Ok(())
    }
}

/// Encoded bytes plus the out-of-band length needed to decode them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedUpdate {
    bytes: Vec<u8>,
    original_length: usize,
    nonzero_count: usize,
    filler_count: usize,
}

impl EncodedUpdate {
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn byte_len(&self) -> usize {
        self.bytes.len()
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn nonzero_count(&self) -> usize {
        self.nonzero_count
    }

    pub fn filler_count(&self) -> usize {
        self.filler_count
    }

    /// Number of run-length tokens, fillers included.
    pub fn run_count(&self) -> usize {
        self.nonzero_count + self.filler_count
    }

    /// Validates a received stream and wraps it.
    pub fn from_bytes(bytes: Vec<u8>, original_length: usize) -> Result<Self> {
        let (nonzero_count, filler_count) = scan(&bytes, original_length, |_, _| {})?;
        Ok(Self {
            bytes,
            original_length,
            nonzero_count,
            filler_count,
        })
    }

    /// File dump: `[original_length: u64 LE]` followed by the token stream.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bytes.len());
        out.extend_from_slice(&(self.original_length as u64).to_le_bytes());
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_dump_bytes(dump: &[u8]) -> Result<Self> {
        if dump.len() < 8 {
            return Err(DgcError::MalformedStream(
                "dump shorter than its 8-byte length header".into(),
            ));
        }
        let mut header = [0u8; 8];
        header.copy_from_slice(&dump[..8]);
        let length = usize::try_from(u64::from_le_bytes(header))
            .map_err(|_| DgcError::MalformedStream("length header overflows usize".into()))?;
        Self::from_bytes(dump[8..].to_vec(), length)
    }

    pub fn write_dump(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_dump_bytes())
    }

    pub fn read_dump(path: &Path) -> std::io::Result<Result<Self>> {
        Ok(Self::from_dump_bytes(&fs::read(path)?))
    }
}

/// Exact encoded size of an index set without building the stream.
pub fn encoded_len(indices: &[usize]) -> usize {
    let mut next = 0usize;
    let mut tokens = 0usize;
    for &i in indices {
        let gap = i - next;
        tokens += 1 + gap / (MAX_RUN + 1);
        next = i + 1;
    }
    tokens * TOKEN_BYTES
}

pub fn encode(u: &SparseUpdate) -> EncodedUpdate {
    let mut bytes = Vec::with_capacity(u.nnz() * TOKEN_BYTES);
    let mut next = 0usize;
    let mut fillers = 0usize;
    for (i, v) in u.iter() {
        let mut gap = i - next;
        while gap > MAX_RUN {
            push_token(&mut bytes, MAX_RUN as u16, 0.0);
            fillers += 1;
            gap -= MAX_RUN + 1;
        }
        push_token(&mut bytes, gap as u16, v);
        next = i + 1;
    }
    EncodedUpdate {
        bytes,
        original_length: u.len(),
        nonzero_count: u.nnz(),
        filler_count: fillers,
    }
}

fn push_token(out: &mut Vec<u8>, run: u16, value: f32) {
    out.extend_from_slice(&run.to_le_bytes());
    out.extend_from_slice(&value.to_le_bytes());
}

/// Walks a token stream, calling `emit` for every real (non-filler) entry.
/// Returns `(nonzero_count, filler_count)`.
fn scan(bytes: &[u8], length: usize, mut emit: impl FnMut(usize, f32)) -> Result<(usize, usize)> {
    if !bytes.len().is_multiple_of(TOKEN_BYTES) {
        return Err(DgcError::MalformedStream(format!(
            "truncated stream: {} bytes is not a whole number of {TOKEN_BYTES}-byte tokens",
            bytes.len()
        )));
    }
    let mut pos = 0usize;
    let mut nonzeros = 0usize;
    let mut fillers = 0usize;
    let mut last_was_filler = false;
    for (t, token) in bytes.chunks_exact(TOKEN_BYTES).enumerate() {
        let run = usize::from(u16::from_le_bytes([token[0], token[1]]));
        let bits = u32::from_le_bytes([token[2], token[3], token[4], token[5]]);
        let value = f32::from_bits(bits);
        pos += run;
        if pos >= length {
            return Err(DgcError::MalformedStream(format!(
                "token {t} lands at index {pos}, past length {length}"
            )));
        }
        if bits == 0 {
            if run != MAX_RUN {
                return Err(DgcError::MalformedStream(format!(
                    "token {t} carries a zero value with run {run}"
                )));
            }
            fillers += 1;
            last_was_filler = true;
        } else {
            if value == 0.0 || !value.is_finite() {
                return Err(DgcError::MalformedStream(format!(
                    "token {t} carries invalid value {value}"
                )));
            }
            emit(pos, value);
            nonzeros += 1;
            last_was_filler = false;
        }
        pos += 1;
    }
    if last_was_filler {
        return Err(DgcError::MalformedStream(
            "stream ends with a filler token".into(),
        ));
    }
    Ok((nonzeros, fillers))
}

pub fn decode(e: &EncodedUpdate) -> Result<SparseUpdate> {
    decode_bytes(&e.bytes, e.original_length)
}

pub fn decode_bytes(bytes: &[u8], original_length: usize) -> Result<SparseUpdate> {
    let mut indices = Vec::with_capacity(bytes.len() / TOKEN_BYTES);
    let mut values = Vec::with_capacity(bytes.len() / TOKEN_BYTES);
    scan(bytes, original_length, |i, v| {
        indices.push(i);
        values.push(v);
    })?;
    Ok(SparseUpdate::from_parts_unchecked(
        indices,
        values,
        original_length,
    ))
}

/// Dense size over encoded size; larger is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionRatio {
    pub ratio: f64,
    /// Set when the encoding is empty and the ratio is reported as infinite.
    pub empty_encoding: bool,
}

pub fn compression_ratio(dense_length: usize, e: &EncodedUpdate) -> Result<CompressionRatio> {
    if dense_length == 0 {
        return Err(DgcError::InvalidParameter(
            "dense length must be positive".into(),
        ));
    }
    let dense = (DENSE_ELEMENT_BYTES * dense_length) as f64;
    Ok(if e.byte_len() == 0 {
        CompressionRatio {
            ratio: f64::INFINITY,
            empty_encoding: true,
        }
    } else {
        CompressionRatio {
            ratio: dense / e.byte_len() as f64,
            empty_encoding: false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(pairs: &[(usize, f32)], len: usize) -> SparseUpdate {
        SparseUpdate::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
            len,
        )
        .unwrap()
    }

    fn token(run: u16, v: f32) -> Vec<u8> {
        let mut t = run.to_le_bytes().to_vec();
        t.extend_from_slice(&v.to_le_bytes());
        t
    }

    #[test]
    fn encodes_documented_example() {
        let u = upd(&[(2, 1.5), (6, -2.0)], 8);
        let e = encode(&u);
        let expected: Vec<u8> = [token(2, 1.5), token(3, -2.0)].concat();
        assert_eq!(e.bytes(), expected.as_slice());
        assert_eq!(e.byte_len(), 12);
        assert_eq!(decode(&e).unwrap(), u);
    }

    #[test]
    fn empty_update_encodes_to_nothing() {
        let e = encode(&SparseUpdate::empty(10));
        assert_eq!(e.byte_len(), 0);
        let d = decode(&e).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.nnz(), 0);
    }

    #[test]
    fn long_gap_uses_filler() {
        let u = upd(&[(70_000, 0.25)], 70_001);
        let e = encode(&u);
        let expected: Vec<u8> = [token(65_535, 0.0), token(4_464, 0.25)].concat();
        assert_eq!(e.bytes(), expected.as_slice());
        assert_eq!(e.filler_count(), 1);
        assert_eq!(decode(&e).unwrap(), u);
    }

    #[test]
    fn gap_boundaries() {
        for idx in [
            65_534usize,
            65_535,
            65_536,
            65_537,
            131_071,
            131_072,
            131_073,
        ] {
            let u = upd(&[(idx, 1.0)], idx + 3);
            let e = encode(&u);
            assert_eq!(e.byte_len(), encoded_len(u.indices()));
            assert_eq!(e.byte_len(), TOKEN_BYTES * e.run_count());
            assert_eq!(decode(&e).unwrap(), u, "index {idx}");
        }
    }

    #[test]
    fn rejects_malformed_streams() {
        let good = encode(&upd(&[(2, 1.5), (6, -2.0)], 8));
        // truncated
        assert!(decode_bytes(&good.bytes()[..11], 8).is_err());
        // index overflow
        assert!(decode_bytes(good.bytes(), 6).is_err());
        // zero value that is not a filler
        assert!(decode_bytes(&token(3, 0.0), 10).is_err());
        // negative zero
        assert!(decode_bytes(&token(3, -0.0), 10).is_err());
        // NaN value
        assert!(decode_bytes(&token(1, f32::NAN), 10).is_err());
        // trailing filler
        assert!(decode_bytes(&token(65_535, 0.0), 70_000).is_err());
    }

    #[test]
    fn ratio_examples() {
        let one = encode(&upd(&[(1, 3.0)], 4));
        let r = compression_ratio(4, &one).unwrap();
        assert!((r.ratio - 16.0 / 6.0).abs() < 1e-12);

        let dense = SparseUpdate::from_dense(&[1.0; 100]).unwrap();
        let r = compression_ratio(100, &encode(&dense)).unwrap();
        assert!((r.ratio - 4.0 / 6.0).abs() < 1e-12);

        let r = compression_ratio(10, &encode(&SparseUpdate::empty(10))).unwrap();
        assert!(r.empty_encoding && r.ratio.is_infinite());
        assert!(compression_ratio(0, &one).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let e = encode(&upd(&[(0, 1.0), (99_999, -4.0)], 100_000));
        let dump = e.to_dump_bytes();
        assert_eq!(&dump[..8], &100_000u64.to_le_bytes());
        assert_eq!(EncodedUpdate::from_dump_bytes(&dump).unwrap(), e);
        assert!(EncodedUpdate::from_dump_bytes(&dump[..5]).is_err());
    }

    #[test]
    fn sparse_update_validation() {
        assert!(SparseUpdate::new(vec![1, 1], vec![1.0, 2.0], 5).is_err());
        assert!(SparseUpdate::new(vec![5], vec![1.0], 5).is_err());
        assert!(SparseUpdate::new(vec![1], vec![0.0], 5).is_err());
        assert!(SparseUpdate::new(vec![1, 2], vec![1.0], 5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_update() -> impl Strategy<Value = SparseUpdate> {
            // Gaps drawn from a mix of tiny, medium and >65535 sizes.
            let gap = prop_oneof![
                4 => 0usize..3,
                3 => 0usize..2_000,
                1 => 60_000usize..200_000,
            ];
            let value = prop_oneof![
                (-1e6f32..1e6).prop_filter("nonzero", |v| *v != 0.0),
                Just(f32::MIN_POSITIVE),
                Just(-f32::MAX),
            ];
            (prop::collection::vec((gap, value), 0..40), 0usize..5_000).prop_map(
                |(entries, tail)| {
                    let mut indices = Vec::new();
                    let mut values = Vec::new();
                    let mut next = 0usize;
                    for (g, v) in entries {
                        let i = next + g;
                        indices.push(i);
                        values.push(v);
                        next = i + 1;
                    }
                    SparseUpdate::new(indices, values, next + tail + usize::from(next == 0))
                        .unwrap()
                },
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(10_000))]

            #[test]
            fn round_trip_and_size(u in arb_update()) {
                let e = encode(&u);
                prop_assert_eq!(e.byte_len(), TOKEN_BYTES * (e.nonzero_count() + e.filler_count()));
                prop_assert_eq!(e.byte_len(), encoded_len(u.indices()));
                let back = decode(&e).unwrap();
                prop_assert_eq!(&back, &u);
                prop_assert_eq!(EncodedUpdate::from_bytes(e.bytes().to_vec(), u.len()).unwrap(), e);
            }
        }

        proptest! {
            #[test]
            fn decoder_never_misreads_garbage(
                bytes in prop::collection::vec(any::<u8>(), 0..64),
                len in 1usize..200_000,
            ) {
                // Anything the decoder accepts must re-encode to the same bytes.
                if let Ok(u) = decode_bytes(&bytes, len) {
                    let again = encode(&u);
                    prop_assert_eq!(again.bytes(), bytes.as_slice());
                }
            }
        }
    }
}
