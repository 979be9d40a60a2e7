//! Versioned binary checkpoints.
//!
//! Layout: `b"DRCK"`, format version (u32 LE), header length (u32 LE), JSON
//! header echoing the model config, parameter count (u64 LE), parameters (f64
//! LE), SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArModel, ArSpec, CouplingFlow, Encoder, FlowInit, FlowSpec, Mlp, MlpSpec, Model, ModelError};

pub const MAGIC: &[u8; 4] = b"DRCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Flow { spec: FlowSpec, seed: u64 },
    Ar { spec: ArSpec, seed: u64 },
    Identity { dim: usize },
    Linear { rows: usize, cols: usize },
    Mlp { spec: MlpSpec, seed: u64 },
}

fn header_and_params(model: &Model) -> (Header, &[f64]) {
    match model {
        Model::Flow(f) => (
            Header::Flow {
                spec: f.spec().clone(),
                seed: f.seed(),
            },
            f.params(),
        ),
        Model::Ar(m) => (
            Header::Ar {
                spec: m.spec().clone(),
                seed: m.seed(),
            },
            m.params(),
        ),
        Model::Encoder(Encoder::Identity { dim }) => (Header::Identity { dim: *dim }, &[]),
        Model::Encoder(Encoder::Linear { rows, cols, matrix }) => (
            Header::Linear {
                rows: *rows,
                cols: *cols,
            },
            matrix,
        ),
        Model::Encoder(Encoder::Mlp(m)) => (
            Header::Mlp {
                spec: m.spec().clone(),
                seed: m.seed(),
            },
            m.params(),
        ),
    }
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let (header, params) = header_and_params(model);
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(28 + json.len() + 8 * params.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let json = r.take(header_len)?;
    let count = usize::try_from(r.u64()?).map_err(|_| ModelError::Truncated)?;
    let payload = r.take(count.checked_mul(8).ok_or(ModelError::Truncated)?)?;
    let body_end = r.pos;
    let digest = r.take(32)?;
    if r.pos != bytes.len() {
        return Err(ModelError::Corrupt("trailing bytes after checksum".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(ModelError::Corrupt("checksum mismatch".into()));
    }
    let header: Header =
        serde_json::from_slice(json).map_err(|e| ModelError::Corrupt(format!("header: {e}")))?;
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    Ok(match header {
        Header::Flow { spec, seed } => {
            let mut f = CouplingFlow::new(spec, seed, FlowInit::Zero)?;
            f.set_params(params)?;
            Model::Flow(f)
        }
        Header::Ar { spec, seed } => {
            let mut m = ArModel::new(spec, seed)?;
            m.set_params(params)?;
            Model::Ar(m)
        }
        Header::Identity { dim } => {
            if !params.is_empty() {
                return Err(ModelError::ParamCount {
                    expected: 0,
                    got: params.len(),
                });
            }
            Model::Encoder(Encoder::Identity { dim })
        }
        Header::Linear { rows, cols } => Model::Encoder(Encoder::linear(rows, cols, params)?),
        Header::Mlp { spec, seed } => {
            let mut m = Mlp::new(spec, seed)?;
            m.set_params(params)?;
            Model::Encoder(Encoder::Mlp(m))
        }
    })
}

pub fn checkpoint_save(model: &Model, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| ModelError::Io(path.display().to_string(), e))
}

pub fn checkpoint_load(path: &Path) -> Result<Model, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models() -> Vec<Model> {
        vec![
            Model::Flow(CouplingFlow::random(FlowSpec::for_image(2, 2, 1), 4).unwrap()),
            Model::Ar(ArModel::new(ArSpec::sequence(4, 3), 2).unwrap()),
            Model::Encoder(Encoder::Identity { dim: 3 }),
            Model::Encoder(Encoder::linear(1, 2, vec![0.5, -1.25]).unwrap()),
            Model::Encoder(Encoder::Mlp(
                Mlp::new(
                    MlpSpec {
                        input: 4,
                        hidden: vec![3],
                        output: 2,
                    },
                    9,
                )
                .unwrap(),
            )),
        ]
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (i, m) in models().into_iter().enumerate() {
            let path = dir.path().join(format!("m{i}.ckpt"));
            checkpoint_save(&m, &path).unwrap();
            let back = checkpoint_load(&path).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = encode_checkpoint(&models()[0]);
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(ModelError::Corrupt(_))));
        let mut versioned = bytes;
        versioned[4] = 9;
        assert!(matches!(
            decode_checkpoint(&versioned),
            Err(ModelError::Version { found: 9, .. })
        ));
    }
}
