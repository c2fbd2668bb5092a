//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic  b"CGSYMCKP"
//! offset 8   u32    format version
//! offset 12  u64    header length H
//! offset 20  H bytes JSON header
//! then       f32    tensor data in header order, row-major
//! then       f32    optimizer moments (first, then second) in header order
//! ```
//!
//! The header holds config, seed, step, adapter layout, tensor shapes and optimizer settings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, LoraConfig, ModelConfig, ModelState, Param};
use crate::optim::{AdamWConfig, Moments, OptimizerState};

pub const MAGIC: &[u8; 8] = b"CGSYMCKP";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamWConfig,
    step: u64,
    moments: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LoraEntry {
    config: LoraConfig,
    layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    step: u64,
    lora: Option<LoraEntry>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub step: u64,
}

/// Serialize a model (and optionally its optimizer state) to bytes.
pub fn to_bytes(model: &ModelState<f32>, optimizer: Option<&OptimizerState<f32>>, step: u64) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        seed: model.seed,
        step,
        lora: model.lora.as_ref().map(|l| LoraEntry {
            config: l.config.clone(),
            layers: model.adapted_layers(),
        }),
        tensors: model
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                group: p.group,
                rows: p.rows,
                cols: p.cols,
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerEntry {
            config: o.config.clone(),
            step: o.step,
            moments: o.moments.keys().cloned().collect(),
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let n_floats: usize = model.params.iter().map(|p| p.len()).sum::<usize>()
        + optimizer.map_or(0, |o| o.moments.values().map(|m| 2 * m.first.len()).sum());
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * n_floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f32]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for p in &model.params {
        put(&p.data);
    }
    if let Some(o) = optimizer {
        for m in o.moments.values() {
            put(&m.first);
            put(&m.second);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parse bytes produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(8, format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let hstart = r.pos;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::format(hstart, format!("header is not valid: {e}")))?;
    if header.format_version != version {
        return Err(Error::format(hstart, "header version disagrees with preamble"));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::format(hstart, format!("declared config is invalid: {e}")))?;

    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let at = r.pos;
        let data = r.floats(t.rows * t.cols, &format!("tensor `{}`", t.name))?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(at + 4 * i, format!("non-finite value in tensor `{}`", t.name)));
        }
        params.push(Param {
            name: t.name.clone(),
            group: t.group,
            rows: t.rows,
            cols: t.cols,
            data,
        });
    }
    let (lora_cfg, lora_layers) = match &header.lora {
        Some(l) => (Some(l.config.clone()), l.layers.clone()),
        None => (None, Vec::new()),
    };
    let model = ModelState::from_parts(header.config.clone(), header.seed, params, lora_cfg, &lora_layers)
        .map_err(|e| Error::format(hstart, format!("tensors do not match the declared config: {e}")))?;

    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => {
            let mut moments = BTreeMap::new();
            for name in &o.moments {
                let len = model
                    .param(name)
                    .ok_or_else(|| Error::format(hstart, format!("moments for unknown tensor `{name}`")))?
                    .len();
                let first = r.floats(len, &format!("first moment of `{name}`"))?;
                let second = r.floats(len, &format!("second moment of `{name}`"))?;
                moments.insert(name.clone(), Moments { first, second });
            }
            Some(OptimizerState {
                config: o.config.clone(),
                step: o.step,
                moments,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        step: header.step,
    })
}

pub fn save(path: &Path, model: &ModelState<f32>, optimizer: Option<&OptimizerState<f32>>, step: u64) -> Result<()> {
    let bytes = to_bytes(model, optimizer, step)?;
    // Write to a sibling temp file first so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
