//! Binary policy container.
//!
//! Layout (little endian): magic `M3POCKPT`, format version `u32`, SHA-256
//! of the payload, then the payload: vocab, window, embed, hidden,
//! end token (`u32::MAX` for none) and adapter rank as `u32`, adapter
//! scale as `f64`, and the weight arrays as `f64` in the order embedding,
//! hidden weights, hidden bias, output weights, output bias, adapter down,
//! adapter up. Floats are stored bit-exact.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{AdapterPair, BaseWeights, ModelShape, ToyPolicy};
use crate::types::TokenId;

pub const MAGIC: &[u8; 8] = b"M3POCKPT";
pub const VERSION: u32 = 1;
const NO_END_TOKEN: u32 = u32::MAX;
const HEADER_LEN: usize = 8 + 4 + 32;

pub fn encode_checkpoint(policy: &ToyPolicy) -> Vec<u8> {
    let shape = policy.shape();
    let adapter = policy.adapter();
    let mut payload = Vec::new();
    for v in [
        shape.vocab_size,
        shape.context_window,
        shape.embed_dim,
        shape.hidden_dim,
    ] {
        payload.extend_from_slice(&(v as u32).to_le_bytes());
    }
    payload.extend_from_slice(&policy.end_token().unwrap_or(NO_END_TOKEN).to_le_bytes());
    payload.extend_from_slice(&(adapter.rank as u32).to_le_bytes());
    payload.extend_from_slice(&adapter.scale.to_le_bytes());
    for v in policy.base().flatten().iter().chain(&adapter.down).chain(&adapter.up) {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyPolicy> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let payload = &bytes[HEADER_LEN..];
    if Sha256::digest(payload).as_slice() != &bytes[12..HEADER_LEN] {
        return Err(Error::Checkpoint("payload digest mismatch".into()));
    }
    let mut cur = Cursor { bytes: payload };
    let shape = ModelShape {
        vocab_size: cur.u32()? as usize,
        context_window: cur.u32()? as usize,
        embed_dim: cur.u32()? as usize,
        hidden_dim: cur.u32()? as usize,
    };
    shape
        .validate()
        .map_err(|e| Error::Checkpoint(format!("bad shape: {e}")))?;
    let end_token = match cur.u32()? {
        NO_END_TOKEN => None,
        t => Some(t as TokenId),
    };
    let rank = cur.u32()? as usize;
    let scale = cur.f64()?;

    // Size the arrays against the remaining bytes before allocating.
    let base_len = [
        shape.vocab_size.checked_mul(shape.embed_dim),
        shape.hidden_dim.checked_mul(shape.feature_dim()),
        Some(shape.hidden_dim),
        shape.vocab_size.checked_mul(shape.hidden_dim),
        Some(shape.vocab_size),
    ];
    let down_len = rank.checked_mul(shape.hidden_dim);
    let up_len = shape.vocab_size.checked_mul(rank);
    let total = base_len
        .iter()
        .chain([&down_len, &up_len])
        .try_fold(0usize, |acc, n| n.and_then(|n| acc.checked_add(n)))
        .and_then(|n| n.checked_mul(8));
    if total != Some(cur.bytes.len()) {
        return Err(Error::Checkpoint("payload length does not match the declared shape".into()));
    }
    let lens: Vec<usize> = base_len.iter().map(|n| n.expect("checked above")).collect();
    let base = BaseWeights {
        embedding: cur.f64s(lens[0])?,
        hidden_w: cur.f64s(lens[1])?,
        hidden_b: cur.f64s(lens[2])?,
        output_w: cur.f64s(lens[3])?,
        output_b: cur.f64s(lens[4])?,
    };
    let adapter = AdapterPair {
        rank,
        scale,
        down: cur.f64s(down_len.expect("checked above"))?,
        up: cur.f64s(up_len.expect("checked above"))?,
    };
    ToyPolicy::new(shape, base, adapter, end_token).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::AdapterGrad;

    fn policy() -> ToyPolicy {
        let shape = ModelShape {
            vocab_size: 11,
            context_window: 9,
            embed_dim: 3,
            hidden_dim: 5,
        };
        let mut p = ToyPolicy::random(shape, 2, 0.5, Some(0), 4).unwrap();
        let mut g = AdapterGrad::zeros_like(p.adapter());
        g.up.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin() / 3.0);
        p.apply_adapter_step(&g, 1.0);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = policy();
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode_checkpoint(&q), bytes);
    }

    #[test]
    fn no_end_token_round_trips() {
        let p = ToyPolicy::uniform(7, 4).unwrap();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&p)).unwrap(), p);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&policy());
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checkpoint(m)) if m.contains("digest")));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode_checkpoint(b"M3POCKPT").is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(decode_checkpoint(&v2).is_err());
    }

    #[test]
    fn oversized_shape_is_rejected_before_allocating() {
        let mut payload = Vec::new();
        for v in [200u32, 64, u32::MAX, u32::MAX, NO_END_TOKEN, u32::MAX] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        payload.extend_from_slice(&1.0f64.to_le_bytes());
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&Sha256::digest(&payload));
        bytes.extend_from_slice(&payload);
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
