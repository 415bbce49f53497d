//! Versioned single-file checkpoints (`*.blens`).
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then the tensor section (`u32` count followed by tensors in
//! [`Tensor::write_to`] layout). The header carries the training config, the
//! dataset registry, training metrics, flow permutations, a tensor index and
//! a SHA-256 over the whole file computed with the checksum field zeroed.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AeModel, Standardizer};
use crate::data::{self, DatasetSpec};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::tensor::{read_exact, read_u32, Tensor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"BLENSCKP";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_PLACEHOLDER: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// The datasets a checkpoint was trained on and the seed that renders them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub seed: u64,
    pub datasets: Vec<DatasetSpec>,
}

impl Registry {
    pub fn validate(&self) -> Result<()> {
        data::validate_registry(&self.datasets)
    }

    pub fn n_labels(&self) -> usize {
        self.datasets.len()
    }

    pub fn find(&self, name: &str) -> Result<&DatasetSpec> {
        self.datasets.iter().find(|d| d.name == name).ok_or_else(|| Error::UnknownDataset(name.to_string()))
    }

    pub fn get(&self, label: usize) -> Result<&DatasetSpec> {
        self.datasets.get(label).ok_or(Error::UnknownLabel(label))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingRecord {
    pub ae_trace: Vec<f64>,
    pub ae_val_mse: Option<f64>,
    pub flow_trace: Vec<f64>,
    pub flow_initial_nll: Option<f64>,
    pub flow_final_nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub registry: Registry,
    pub autoencoder: AeModel<f64>,
    pub standardizer: Standardizer<f64>,
    /// Absent after the autoencoder stage.
    pub flow: Option<FlowModel<f64>>,
    pub record: TrainingRecord,
}

#[derive(Serialize, Deserialize)]
struct FlowLayout {
    config: FlowConfig,
    permutations: Vec<Vec<usize>>,
    passive_first: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    registry: Registry,
    record: TrainingRecord,
    autoencoder: AeLayout,
    flow: Option<FlowLayout>,
    tensors: Vec<TensorEntry>,
    /// Byte length of the tensor section.
    body_len: u64,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct AeLayout {
    hidden: usize,
    dim: usize,
}

impl Checkpoint {
    pub fn n_labels(&self) -> usize {
        self.registry.n_labels()
    }

    /// The flow, or [`Error::NoFlow`] for an autoencoder-only checkpoint.
    pub fn flow(&self) -> Result<&FlowModel<f64>> {
        self.flow.as_ref().ok_or(Error::NoFlow)
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out: Vec<(String, &Tensor<f64>)> = Vec::new();
        for (i, t) in self.autoencoder.params().into_iter().enumerate() {
            out.push((format!("ae.{i}"), t));
        }
        out.push(("standardizer.mean".into(), &self.standardizer.mean));
        out.push(("standardizer.std".into(), &self.standardizer.std));
        if let Some(flow) = &self.flow {
            for (i, t) in flow.params().into_iter().enumerate() {
                out.push((format!("flow.{i}"), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.registry.validate()?;
        self.autoencoder.validate()?;
        if let Some(flow) = &self.flow {
            flow.validate()?;
            if !flow.is_initialized() {
                return Err(Error::NotInitialized);
            }
        }
        let tensors = self.named_tensors();
        let mut body = Vec::new();
        body.extend((tensors.len() as u32).to_le_bytes());
        for (_, t) in &tensors {
            t.write_to(&mut body)?;
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            registry: self.registry.clone(),
            record: self.record.clone(),
            autoencoder: AeLayout { hidden: self.autoencoder.hidden(), dim: self.autoencoder.dim() },
            flow: self.flow.as_ref().map(|f| FlowLayout {
                config: f.config(),
                permutations: f.blocks.iter().map(|b| b.permutation.clone()).collect(),
                passive_first: f.blocks.iter().map(|b| b.passive_first).collect(),
            }),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            body_len: body.len() as u64,
            checksum: CHECKSUM_PLACEHOLDER.into(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + body.len());
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(&json);
        out.extend(&body);
        let digest = hex::encode(Sha256::digest(&out));
        let at = checksum_offset(&out[20..20 + json.len()])? + 20;
        out[at..at + 64].copy_from_slice(digest.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let header_len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Truncated)?;
        let header_end = 20usize.checked_add(header_len).ok_or(Error::Truncated)?;
        if bytes.len() < header_end {
            return Err(Error::Truncated);
        }
        let json = &bytes[20..header_end];
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Version { found: header.version, expected: FORMAT_VERSION });
        }
        let expected_len = (header_end as u64).checked_add(header.body_len).ok_or(Error::Truncated)?;
        if (bytes.len() as u64) < expected_len {
            return Err(Error::Truncated);
        }
        if (bytes.len() as u64) > expected_len {
            return Err(Error::Format("trailing bytes after tensor section".into()));
        }
        let mut zeroed = bytes.to_vec();
        let at = checksum_offset(json)? + 20;
        zeroed[at..at + 64].copy_from_slice(CHECKSUM_PLACEHOLDER.as_bytes());
        if hex::encode(Sha256::digest(&zeroed)) != header.checksum {
            return Err(Error::Checksum);
        }

        let mut body = Cursor::new(&bytes[header_end..]);
        let count = read_u32(&mut body)? as usize;
        if count != header.tensors.len() {
            return Err(Error::Format("tensor count disagrees with header".into()));
        }
        let mut tensors = Vec::with_capacity(count);
        for entry in &header.tensors {
            let t = Tensor::<f64>::read_from(&mut body)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!("tensor {} shape disagrees with header", entry.name)));
            }
            tensors.push(t);
        }
        let mut rest = Vec::new();
        body.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("unread bytes in tensor section".into()));
        }
        assemble(header, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Byte offset of the checksum value within the header JSON.
fn checksum_offset(json: &[u8]) -> Result<usize> {
    let key = b"\"checksum\":\"";
    json.windows(key.len())
        .rposition(|w| w == key)
        .map(|p| p + key.len())
        .filter(|&p| p + 64 <= json.len())
        .ok_or_else(|| Error::Format("checkpoint header has no checksum".into()))
}

fn fill(targets: Vec<&mut Tensor<f64>>, source: &mut std::vec::IntoIter<Tensor<f64>>) -> Result<()> {
    for t in targets {
        let v = source.next().ok_or_else(|| Error::Format("missing tensors".into()))?;
        if v.shape() != t.shape() {
            return Err(Error::Format(format!("tensor shape {:?}, expected {:?}", v.shape(), t.shape())));
        }
        *t = v;
    }
    Ok(())
}

fn assemble(header: Header, tensors: Vec<Tensor<f64>>) -> Result<Checkpoint> {
    header.registry.validate()?;
    let mut source = tensors.into_iter();
    let mut autoencoder = AeModel::zeros(header.autoencoder.hidden, header.autoencoder.dim);
    fill(autoencoder.params_mut(), &mut source)?;
    autoencoder.validate()?;
    let mut standardizer = Standardizer::identity(header.autoencoder.dim);
    fill(vec![&mut standardizer.mean, &mut standardizer.std], &mut source)?;
    if standardizer.std.data().iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Format("standardizer scale must be positive".into()));
    }
    let flow = match header.flow {
        None => None,
        Some(layout) => {
            if layout.permutations.len() != layout.config.blocks || layout.passive_first.len() != layout.config.blocks {
                return Err(Error::Format("flow layout disagrees with its config".into()));
            }
            if layout.config.n_labels != header.registry.n_labels() || layout.config.dim != header.autoencoder.dim {
                return Err(Error::Format("flow dimensions disagree with registry or autoencoder".into()));
            }
            let mut flow = FlowModel::identity(&layout.config)?;
            for ((b, perm), pf) in flow.blocks.iter_mut().zip(layout.permutations).zip(layout.passive_first) {
                b.permutation = perm;
                b.passive_first = pf;
            }
            fill(flow.params_mut(), &mut source)?;
            flow.validate()?;
            Some(flow)
        }
    };
    if source.next().is_some() {
        return Err(Error::Format("unexpected extra tensors".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        registry: header.registry,
        autoencoder,
        standardizer,
        flow,
        record: header.record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    pub(crate) fn small_checkpoint(with_flow: bool) -> Checkpoint {
        let mut rng = SeedRng::new(9);
        let registry = Registry { seed: 4, datasets: data::default_family(10) };
        let config = TrainConfig { dim: 4, hidden: 8, blocks: 2, flow_hidden: 6, embed_dim: 3, ..Default::default() };
        let autoencoder = AeModel::new(8, 4, &mut rng);
        let flow = with_flow.then(|| {
            let mut f = FlowModel::new(&config.flow_config(3), &mut rng).unwrap();
            let x = Tensor::new(vec![20, 4], (0..80).map(|_| rng.normal()).collect()).unwrap();
            f.actnorm_data_init(&x, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
            f
        });
        Checkpoint {
            config,
            registry,
            autoencoder,
            standardizer: Standardizer { mean: Tensor::full(&[1, 4], 0.5), std: Tensor::full(&[1, 4], 2.0) },
            flow,
            record: TrainingRecord { ae_trace: vec![0.1, 0.05], ..Default::default() },
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for with_flow in [false, true] {
            let ck = small_checkpoint(with_flow);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn uninitialized_flow_is_not_saved() {
        let mut ck = small_checkpoint(false);
        ck.flow = Some(FlowModel::new(&ck.config.flow_config(3), &mut SeedRng::new(0)).unwrap());
        assert!(matches!(ck.to_bytes(), Err(Error::NotInitialized)));
    }

    #[test]
    fn checksum_offset_points_at_digest() {
        let bytes = small_checkpoint(true).to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + len]).unwrap();
        let at = checksum_offset(&bytes[20..20 + len]).unwrap() + 20;
        assert_eq!(header["checksum"].as_str().unwrap().as_bytes(), &bytes[at..at + 64]);
    }
}
