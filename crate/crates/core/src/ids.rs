//! Span and trace identifier sources.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::model::SpanId;

/// Hands out span ids as spans are opened.
pub trait IdSource {
    fn next_span_id(&mut self) -> SpanId;
}

/// 16-character lowercase hex ids drawn from a seeded ChaCha stream.
#[derive(Debug, Clone)]
pub struct RandomIds {
    rng: ChaCha8Rng,
}

impl RandomIds {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream, used by the simulator to draw ids per request.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }
}

impl IdSource for RandomIds {
    fn next_span_id(&mut self) -> SpanId {
        SpanId(format!("{:016x}", self.rng.next_u64()))
    }
}

/// `S-01`, `S-02`, ... in opening order.
#[derive(Debug, Clone)]
pub struct SequentialIds {
    prefix: String,
    next: u64,
}

impl SequentialIds {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            next: 1,
        }
    }
}

impl IdSource for SequentialIds {
    fn next_span_id(&mut self) -> SpanId {
        let id = SpanId(format!("{}{:02}", self.prefix, self.next));
        self.next += 1;
        id
    }
}

/// Deterministic 16-hex id derived from the given parts.
pub fn derived_hex_id(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
