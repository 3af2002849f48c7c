//! Checkpoint files: config snapshot plus named parameter tensors, guarded
//! by a trailing FNV-1a 64 checksum.
//!
//! Layout: `DCNK | u8 version | u32 config_len | config text | u32 count |`
//! then per tensor `u16 name_len | name | tensor block`, then `u64 checksum`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::model::DcnModel;
use crate::nn::Module;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCNK";
const VERSION: u8 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A trained (or freshly initialised) network together with the config
/// that produced it. The config snapshot has `base_classes` resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: DcnModel<f32>,
}

impl Checkpoint {
    pub fn new(mut config: RunConfig, model: DcnModel<f32>) -> Self {
        config.base_classes = model.config.num_classes;
        Self { config, model }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(VERSION);
        let text = self.config.dump();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let mut named = Vec::new();
        self.model.visit("", &mut |name, t| named.push((name, t)));
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&encode_tensor(t)?);
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 4 + 1 + 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic, expected DCNK".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(fmt("checksum mismatch".into()));
        }
        if body[4] != VERSION {
            return Err(fmt(format!("unsupported version {}", body[4])));
        }
        let mut r = Reader { body, pos: 5 };
        let cfg_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|e| fmt(format!("config is not UTF-8: {e}")))?;
        let config = RunConfig::parse(text)?;
        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
        for _ in 0..count {
            let n = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|e| fmt(format!("bad name: {e}")))?;
            let (t, used) =
                decode_tensor(&body[r.pos..]).map_err(|e| fmt(format!("{name}: {e}")))?;
            r.pos += used;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(fmt(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(fmt(format!(
                "{} unexpected trailing bytes",
                body.len() - r.pos
            )));
        }

        let model_cfg = config.model_config(config.base_classes);
        let mut model = DcnModel::<f32>::zeros(&model_cfg)?;
        let mut err = None;
        model.visit_mut("", &mut |name, slot| {
            if err.is_some() {
                return;
            }
            match tensors.remove(&name) {
                None => err = Some(Error::Shape(format!("checkpoint lacks tensor {name}"))),
                Some(t) if t.shape() != slot.shape() => {
                    err = Some(Error::Shape(format!(
                        "tensor {name} has shape {:?}, config implies {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                Some(t) => *slot = t,
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Shape(format!(
                "checkpoint has unexpected tensor {extra}"
            )));
        }
        Ok(Self { config, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .body
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Format("checkpoint: truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> Checkpoint {
        let cfg = RunConfig::parse("input_height = 8\ninput_width = 8\nchannels = 4, 8\nproj_hidden = 6\nproj_dim = 3\ndetail_dim = 5\n").unwrap();
        let model =
            DcnModel::init(&cfg.model_config(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Checkpoint::new(cfg, model)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = small();
        assert_eq!(ck.config.base_classes, 3);
        let (a, b) = (dir.path().join("a.ck"), dir.path().join("b.ck"));
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, ck);
        back.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn detects_corruption() {
        let bytes = small().encode().unwrap();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(Checkpoint::decode(&flipped)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
    }

    #[test]
    fn rejects_config_tensor_mismatch() {
        let ck = small();
        let mut other = ck.clone();
        other.config.detail_dim = 7;
        let bytes = other.encode().unwrap();
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }
}
