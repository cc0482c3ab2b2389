//! Single-file run snapshots.
//!
//! Layout: one header line `crrcd-checkpoint <version> <sha256>` followed
//! by a JSON body whose SHA-256 must equal the header digest. Floats are
//! written in shortest round-trip form, so a reloaded model reproduces the
//! saved forward outputs bitwise.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::negatives::NegativeBank;
use crate::nn::Sgd;
use crate::trainer::{MetricRow, Model};

const MAGIC: &str = "crrcd-checkpoint";
const VERSION: u32 = 1;

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Serde(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Serde("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Serde("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: String,
    /// Canonical TOML of the run config.
    pub config: String,
    /// Parameter hash of the frozen teacher (distillation only).
    pub teacher_hash: Option<String>,
    pub dataset_fingerprint: String,
    pub model: Model,
    pub optimizer: Sgd,
    pub rng: RngState,
    pub bank: Option<NegativeBank>,
    pub metrics: Vec<MetricRow>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_vec(self).map_err(|e| Error::Serde(e.to_string()))?;
        let digest = hex::encode(Sha256::digest(&body));
        let mut out = format!("{MAGIC} {VERSION} {digest}\n").into_bytes();
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = || Error::Checksum(format!("{origin}: not a checkpoint or header damaged"));
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(bad)?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad())?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(bad());
        }
        if parts[1] != VERSION.to_string() {
            return Err(Error::Serde(format!("{origin}: unsupported checkpoint version {}", parts[1])));
        }
        let body = &bytes[nl + 1..];
        if hex::encode(Sha256::digest(body)) != parts[2] {
            return Err(Error::Checksum(format!("{origin}: checkpoint body does not match its digest")));
        }
        serde_json::from_slice(body).map_err(|e| Error::Serde(format!("{origin}: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::data::{make_synthetic, Dataset};
    use crate::trainer::Trainer;
    use rand::Rng;

    fn checkpoint() -> (Checkpoint, Dataset) {
        let mut c = ExperimentConfig::default();
        c.teacher.arch = "mlp:8".into();
        c.teacher.epochs = 1;
        c.batch_size = 6;
        let ds = Dataset::new("train", 2, 4, make_synthetic(2, 5, 8, 3).unwrap()).unwrap();
        let mut t = Trainer::teacher(&c, &ds).unwrap();
        t.step().unwrap();
        (t.checkpoint(), ds)
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        let _: u64 = rng.random();
        let mut back = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let (ck, ds) = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), "mem").unwrap();
        assert_eq!(back.model.infer(&ds).unwrap(), ck.model.infer(&ds).unwrap());
        assert_eq!(back.metrics, ck.metrics);
        assert_eq!(back.model.store, ck.model.store);
    }

    #[test]
    fn corruption_is_refused() {
        let (ck, _) = checkpoint();
        let mut bytes = ck.to_bytes().unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes, "mem"), Err(Error::Checksum(_))));
        assert!(matches!(Checkpoint::from_bytes(b"garbage", "mem"), Err(Error::Checksum(_))));
    }
}
