use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Optimizer, OptimizerKind};
use super::{Mode, StageSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::memory::{MemoryBank, MemoryRow};
use crate::model::{Category, ModelConfig, Param, SegModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ILCKPT1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub iteration: usize,
}

/// State needed to continue an interrupted stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub epochs_done: usize,
    pub optimizer: Optimizer,
    pub teacher: Option<SegModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: usize,
    pub mode: Mode,
    pub model: SegModel,
    pub bank: Option<MemoryBank>,
    pub spec: StageSpec,
    pub rng: RngState,
    /// Present only for checkpoints written mid-stage.
    pub resume: Option<ResumeState>,
    /// Training log file this stage appended to.
    pub log: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowHeader {
    category: u8,
    initialized: bool,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    feature_dim: usize,
    m0: f64,
    power: f64,
    total_iters: usize,
    rows: Vec<RowHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResumeHeader {
    epochs_done: usize,
    optimizer: OptimizerKind,
    optimizer_step: u64,
    /// Number of registry entries the teacher covers.
    teacher_categories: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: usize,
    mode: Mode,
    registry: Vec<Category>,
    model_config: ModelConfig,
    config: StageSpec,
    rng: RngState,
    bank: Option<BankHeader>,
    resume: Option<ResumeHeader>,
    log: Option<String>,
    blocks: Vec<BlockHeader>,
    payload_sha256: String,
}

fn encode_block(out: &mut Vec<u8>, data: &[f32]) {
    out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    CheckpointError::Malformed(msg.into()).into()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            blocks.push(BlockHeader { name, shape });
            encode_block(&mut payload, data);
        };
        for p in self.model.params() {
            push(format!("param/{}", p.name), p.tensor.shape().to_vec(), p.tensor.data());
        }
        let bank = self.bank.as_ref().map(|b| {
            let values: Vec<f32> = b.rows().iter().flat_map(|r| r.values.iter().copied()).collect();
            push("bank/prototypes".into(), vec![b.len(), b.feature_dim()], &values);
            BankHeader {
                feature_dim: b.feature_dim(),
                m0: b.m0(),
                power: b.power(),
                total_iters: b.total_iters(),
                rows: b
                    .rows()
                    .iter()
                    .map(|r| RowHeader {
                        category: r.category,
                        initialized: r.initialized,
                        frozen: r.frozen,
                    })
                    .collect(),
            }
        });
        let resume = self.resume.as_ref().map(|r| {
            for (i, p) in self.model.params().iter().enumerate() {
                push(format!("opt1/{}", p.name), vec![r.optimizer.first[i].len()], &r.optimizer.first[i]);
            }
            for (i, p) in self.model.params().iter().enumerate().take(r.optimizer.second.len()) {
                push(format!("opt2/{}", p.name), vec![r.optimizer.second[i].len()], &r.optimizer.second[i]);
            }
            if let Some(t) = &r.teacher {
                for p in t.params() {
                    push(format!("teacher/{}", p.name), p.tensor.shape().to_vec(), p.tensor.data());
                }
            }
            ResumeHeader {
                epochs_done: r.epochs_done,
                optimizer: r.optimizer.kind,
                optimizer_step: r.optimizer.step,
                teacher_categories: r.teacher.as_ref().map(|t| t.registry().len()),
            }
        });
        let header = Header {
            stage: self.stage,
            mode: self.mode,
            registry: self.model.registry().to_vec(),
            model_config: self.model.config().clone(),
            config: self.spec.clone(),
            rng: self.rng,
            bank,
            resume,
            log: self.log.clone(),
            blocks,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let word = |at: usize| -> Result<u32> {
            let b = bytes.get(at..at + 4).ok_or(CheckpointError::Truncated)?;
            Ok(u32::from_le_bytes(b.try_into().unwrap()))
        };
        let version = word(8)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            }
            .into());
        }
        let hlen = word(12)? as usize;
        let json = bytes.get(16..16 + hlen).ok_or(CheckpointError::Truncated)?;
        let header: Header = serde_json::from_slice(json).map_err(|e| malformed(format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let expected_len: usize = header
            .blocks
            .iter()
            .map(|b| 8 + 4 * b.shape.iter().product::<usize>())
            .sum();
        if payload.len() < expected_len {
            return Err(CheckpointError::Truncated.into());
        }
        if payload.len() > expected_len {
            return Err(malformed(format!("{} bytes after the last block", payload.len() - expected_len)));
        }
        let actual = hex::encode(Sha256::digest(payload));
        if actual != header.payload_sha256 {
            return Err(CheckpointError::Checksum {
                expected: header.payload_sha256,
                actual,
            }
            .into());
        }

        let mut blocks = std::collections::VecDeque::new();
        let mut pos = 0;
        for b in &header.blocks {
            let n = b.shape.iter().product::<usize>();
            let len = u64::from_le_bytes(payload[pos..pos + 8].try_into().unwrap()) as usize;
            if len != 4 * n {
                return Err(malformed(format!("block {} declares {len} bytes for shape {:?}", b.name, b.shape)));
            }
            pos += 8;
            let data: Vec<f32> = payload[pos..pos + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += len;
            blocks.push_back((b.name.as_str(), b.shape.clone(), data));
        }
        let mut take = |prefix: &str| -> Result<(String, Vec<usize>, Vec<f32>)> {
            let (name, shape, data) = blocks
                .pop_front()
                .ok_or_else(|| malformed(format!("missing {prefix} block")))?;
            let rest = name
                .strip_prefix(prefix)
                .ok_or_else(|| malformed(format!("expected a {prefix} block, found {name}")))?;
            Ok((rest.to_string(), shape, data))
        };
        let n_params = header
            .blocks
            .iter()
            .filter(|b| b.name.starts_with("param/"))
            .count();
        let n_teacher = header
            .blocks
            .iter()
            .filter(|b| b.name.starts_with("teacher/"))
            .count();
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let (name, shape, data) = take("param/")?;
            params.push(Param {
                name,
                tensor: Tensor::new(shape, data)?,
            });
        }
        let model = SegModel::from_parts(header.model_config.clone(), header.registry.clone(), params)?;
        let bank = match header.bank {
            None => None,
            Some(bh) => {
                let (_, shape, values) = take("bank/")?;
                if shape != [bh.rows.len(), bh.feature_dim] {
                    return Err(malformed("bank block shape disagrees with its header"));
                }
                let rows = bh
                    .rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| MemoryRow {
                        category: r.category,
                        values: values[i * bh.feature_dim..(i + 1) * bh.feature_dim].to_vec(),
                        initialized: r.initialized,
                        frozen: r.frozen,
                    })
                    .collect();
                Some(MemoryBank::from_rows(bh.feature_dim, bh.m0, bh.power, bh.total_iters, rows)?)
            }
        };
        let resume = match header.resume {
            None => None,
            Some(rh) => {
                let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
                let mut optimizer = Optimizer::new(rh.optimizer, &sizes);
                optimizer.step = rh.optimizer_step;
                for buf in optimizer.first.iter_mut() {
                    let (_, _, data) = take("opt1/")?;
                    if data.len() != buf.len() {
                        return Err(malformed("optimizer state size mismatch"));
                    }
                    *buf = data;
                }
                for buf in optimizer.second.iter_mut() {
                    let (_, _, data) = take("opt2/")?;
                    if data.len() != buf.len() {
                        return Err(malformed("optimizer state size mismatch"));
                    }
                    *buf = data;
                }
                let teacher = match rh.teacher_categories {
                    None => None,
                    Some(n) if n <= header.registry.len() => {
                        let mut params = Vec::new();
                        for _ in 0..n_teacher {
                            let (name, shape, data) = take("teacher/")?;
                            params.push(Param {
                                name,
                                tensor: Tensor::new(shape, data)?,
                            });
                        }
                        Some(SegModel::from_parts(
                            header.model_config.clone(),
                            header.registry[..n].to_vec(),
                            params,
                        )?)
                    }
                    Some(n) => return Err(malformed(format!("teacher covers {n} categories"))),
                };
                Some(ResumeState {
                    epochs_done: rh.epochs_done,
                    optimizer,
                    teacher,
                })
            }
        };
        if !blocks.is_empty() {
            return Err(malformed(format!("{} unexpected blocks", blocks.len())));
        }
        Ok(Checkpoint {
            stage: header.stage,
            mode: header.mode,
            model,
            bank,
            spec: header.config,
            rng: header.rng,
            resume,
            log: header.log,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes)
}
