//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SYNAUDCK"
//! version      u32
//! dtype        u8       0 = f32, 1 = f64
//! desc_len     u32
//! descriptor   desc_len bytes of JSON (model name + ordered layer specs)
//! step         u64      training-step counter
//! seed         u64      root seed of the run
//! rng_pos      u64      draws consumed from the run's stream
//! payload_len  u64      number of parameter elements
//! payload      payload_len elements, little-endian, layer order
//! digest       32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::element::{DType, Element};
use crate::error::{NnError, Result};
use crate::layers::{ArchitectureDescriptor, Layer, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SYNAUDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamSet<T>,
    pub step: u64,
    pub seed: u64,
    pub rng_pos: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn new(params: ParamSet<T>, step: u64, seed: u64) -> Self {
        Self {
            params,
            step,
            seed,
            rng_pos: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = serde_json::to_vec(&self.params.descriptor()).expect("descriptor serializes");
        let mut out =
            Vec::with_capacity(64 + desc.len() + self.params.param_count() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.rng_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.param_count() as u64).to_le_bytes());
        for v in self.params.flatten() {
            v.write_le(&mut out);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a checkpoint. Parameters stored at another precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(NnError::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(NnError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let dtype = DType::from_code(r.take(1, "dtype")?[0])
            .ok_or_else(|| NnError::CorruptCheckpoint("unknown dtype code".into()))?;
        let desc_len = r.u32("descriptor length")? as usize;
        let desc: ArchitectureDescriptor = serde_json::from_slice(r.take(desc_len, "descriptor")?)
            .map_err(|e| NnError::CorruptCheckpoint(format!("descriptor: {e}")))?;
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let rng_pos = r.u64("rng position")?;
        let count = r.u64("payload length")? as usize;
        let expected: usize = desc
            .layers
            .iter()
            .flat_map(|l| l.kind.param_shapes())
            .map(|s| s.iter().product::<usize>())
            .sum();
        if count != expected {
            return Err(NnError::CorruptCheckpoint(format!(
                "payload has {count} elements but the descriptor needs {expected}"
            )));
        }
        let payload = r.take(count * dtype.size(), "payload")?;
        let body_end = r.pos;
        let digest = r.take(32, "digest")?;
        if r.pos != bytes.len() {
            return Err(NnError::CorruptCheckpoint(
                "trailing bytes after digest".into(),
            ));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(NnError::CorruptCheckpoint("digest mismatch".into()));
        }

        let mut values = payload.chunks_exact(dtype.size()).map(|c| match dtype {
            DType::F32 => T::from_f64_lossy(f64::from(f32::read_le(c))),
            DType::F64 => T::from_f64_lossy(f64::read_le(c)),
        });
        let mut layers = Vec::with_capacity(desc.layers.len());
        for spec in desc.layers {
            let tensors = spec
                .kind
                .param_shapes()
                .into_iter()
                .map(|shape| {
                    let n = shape.iter().product();
                    let data: Vec<T> = values.by_ref().take(n).collect();
                    Tensor::new(shape, data)
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(Layer { spec, tensors });
        }
        Ok(Self {
            params: ParamSet::from_parts(desc.model, layers),
            step,
            seed,
            rng_pos,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies parameters into `target`, failing on the first mismatching layer.
    pub fn restore_into(&self, target: &mut ParamSet<T>) -> Result<()> {
        target.load_from(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new("net");
        p.push(
            "conv",
            LayerKind::Conv2d {
                in_ch: 3,
                out_ch: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            &mut rng,
        );
        p.push(
            "gn",
            LayerKind::GroupNorm {
                groups: 2,
                channels: 4,
            },
            &mut rng,
        );
        p.push(
            "fc",
            LayerKind::Linear {
                inputs: 4,
                outputs: 2,
            },
            &mut rng,
        );
        Checkpoint {
            params: p,
            step: 17,
            seed: 99,
            rng_pos: 5,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let b1 = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&b1).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b1);
    }

    #[test]
    fn truncated_is_corrupt() {
        let b = sample().to_bytes();
        for cut in [3, 20, b.len() - 40, b.len() - 1] {
            let err = Checkpoint::<f32>::from_bytes(&b[..cut]).unwrap_err();
            assert!(matches!(err, NnError::CorruptCheckpoint(_)), "{err}");
        }
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let mut b = sample().to_bytes();
        let n = b.len();
        b[n - 50] ^= 0x40;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&b),
            Err(NnError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn version_mismatch_reported() {
        let mut b = sample().to_bytes();
        b[8] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&b),
            Err(NnError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn f32_payload_loads_as_f64() {
        let c = sample();
        let wide = Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap();
        let narrow: Vec<f64> = c.params.flatten().iter().map(|&v| f64::from(v)).collect();
        assert_eq!(wide.params.flatten(), narrow);
    }
}
