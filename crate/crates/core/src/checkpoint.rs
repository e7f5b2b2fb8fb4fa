//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as little-endian bytes of the scalar width
//! recorded in the header. Loading reproduces the parameters bit for bit.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CsadError, Result};
use crate::io::write_atomic;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::ssvae::{SsVae, SsVaeConfig};
use crate::strategy::ReplayRound;

pub const MAGIC: &[u8; 8] = b"CSADCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it does not fit a JSON number).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = |m: &str| CsadError::format("checkpoint rng", m.to_string());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|e| bad(&e.to_string()))?
            .try_into()
            .map_err(|_| bad("seed is not 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos"))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything besides the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    /// Last experience the model was trained on.
    pub experience: Option<usize>,
    pub rng: Option<RngState>,
    #[serde(default)]
    pub replay_rounds: Vec<ReplayRound>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    scalar_width: u8,
    n_params: usize,
    model: SsVaeConfig,
    meta: CheckpointMeta,
}

pub fn to_bytes<A: Scalar>(model: &SsVae<A>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        scalar_width: A::WIDTH,
        n_params: model.n_params(),
        model: model.config().clone(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CsadError::format("checkpoint header", e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + model.n_params() * A::WIDTH as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &p in model.params() {
        p.to_le_bytes_vec(&mut out);
    }
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |m: String| CsadError::format("checkpoint", m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| bad(e.to_string()))?;
    Ok((header, &body[len..]))
}

/// Scalar width (4 or 8 bytes) stored in a checkpoint, without decoding the
/// parameters.
pub fn scalar_width(bytes: &[u8]) -> Result<u8> {
    Ok(split_header(bytes)?.0.scalar_width)
}

pub fn from_bytes<A: Scalar>(bytes: &[u8]) -> Result<(SsVae<A>, CheckpointMeta)> {
    let (header, params) = split_header(bytes)?;
    if header.scalar_width != A::WIDTH {
        return Err(CsadError::format(
            "checkpoint",
            format!("scalar width {} where {} was requested", header.scalar_width, A::WIDTH),
        ));
    }
    let w = A::WIDTH as usize;
    if params.len() != header.n_params * w {
        return Err(CsadError::LengthMismatch {
            what: "checkpoint parameters".into(),
            expected: header.n_params * w,
            found: params.len(),
        });
    }
    let values: Vec<A> = params.chunks_exact(w).map(A::from_le_slice).collect();
    let model = SsVae::from_params(header.model, values)?;
    Ok((model, header.meta))
}

pub fn save<A: Scalar>(path: &Path, model: &SsVae<A>, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &to_bytes(model, meta)?)
}

pub fn load<A: Scalar>(path: &Path) -> Result<(SsVae<A>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| CsadError::io(path, e))?;
    from_bytes(&bytes)
}
