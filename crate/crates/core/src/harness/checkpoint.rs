//! Checkpoint container.
//!
//! ```text
//! magic     8 bytes  "DEOCKPT\0"
//! version   u32 LE   1
//! hlen      u64 LE   length of the JSON header
//! header    hlen bytes of UTF-8 JSON
//! payload   raw little-endian f64 values
//! ```
//!
//! The header holds `format_version`, a `kind` tag (`stage1` or `stage2`),
//! free-form `meta` (architecture, template resolution, PGA scales,
//! assembly, background proportion, embedding seed) and a `tensors` list of
//! `{name, dtype, shape, offset}` where `offset` is the byte offset into the
//! payload. Only `dtype = "f64"` is defined.

use std::path::Path;

use deocc_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EMBEDDING_SEED;
use crate::maskcomp::{Stage1Config, Stage1Model, TemplateBank};
use crate::recovery::{RecoveryConfig, RecoveryModel};

pub const MAGIC: &[u8; 8] = b"DEOCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 16 << 20;
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: header plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and bounds-checks a checkpoint image.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if hlen > MAX_HEADER || hlen > (bytes.len() - 20) as u64 {
            return Err(bad(format!("header length {hlen} exceeds the file")));
        }
        let hend = 20 + hlen as usize;
        let header: Header =
            serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format_version != version {
            return Err(bad("header and prefix versions disagree".into()));
        }
        let payload = &bytes[hend..];
        let mut tensors = ParamStore::new();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("tensor `{}` has unsupported dtype `{}`", e.name, e.dtype)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c <= MAX_ELEMENTS)
                .ok_or_else(|| bad(format!("tensor `{}` is implausibly large", e.name)))?;
            let start = usize::try_from(e.offset).map_err(|_| bad("offset overflow".into()))?;
            let end = start
                .checked_add(count * 8)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| bad(format!("tensor `{}` runs past the payload", e.name)))?;
            if tensors.contains(&e.name) {
                return Err(bad(format!("duplicate tensor `{}`", e.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor `{}` holds non-finite values", e.name)));
            }
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage1Meta {
    config: Stage1Config,
    embedding_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage2Meta {
    config: RecoveryConfig,
    embedding_seed: u64,
}

fn split_prefixed(store: &ParamStore, prefix: &str) -> ParamStore {
    store.sub_store(prefix)
}

/// Checks that `got` has exactly the names and shapes of `want`.
fn check_layout(what: &str, got: &ParamStore, want: &ParamStore) -> Result<()> {
    for (name, t) in want.iter() {
        match got.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => {
                return Err(Error::Checkpoint(format!(
                    "{what} tensor `{name}` has shape {:?}, expected {:?}",
                    g.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{what} tensor `{name}` is missing"))),
        }
    }
    if let Some(extra) = got.names().find(|n| !want.contains(n)) {
        return Err(Error::Checkpoint(format!("{what} tensor `{extra}` is unexpected")));
    }
    Ok(())
}

fn meta<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, kind: &str) -> Result<T> {
    if ck.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found `{}`", ck.kind)));
    }
    serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint(format!("bad {kind} metadata: {e}")))
}

impl Stage1Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = ParamStore::new();
        tensors.merge_prefixed("g.", self.generator.clone());
        tensors.merge_prefixed("d.", self.discriminator.clone());
        tensors.insert("bank.templates", self.bank.to_tensor());
        Checkpoint {
            kind: "stage1".into(),
            meta: serde_json::to_value(Stage1Meta {
                config: self.config,
                embedding_seed: EMBEDDING_SEED,
            })
            .expect("metadata serialises"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m: Stage1Meta = meta(ck, "stage1")?;
        let bank = TemplateBank::from_tensor(
            ck.tensors
                .get("bank.templates")
                .ok_or_else(|| Error::Checkpoint("template bank missing".into()))?,
        )?;
        let reference = Stage1Model::new(m.config, bank.clone(), 0);
        let generator = split_prefixed(&ck.tensors, "g.");
        let discriminator = split_prefixed(&ck.tensors, "d.");
        check_layout("generator", &generator, &reference.generator)?;
        check_layout("discriminator", &discriminator, &reference.discriminator)?;
        Ok(Self {
            config: m.config,
            generator,
            discriminator,
            bank,
        })
    }
}

impl RecoveryModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = ParamStore::new();
        tensors.merge_prefixed("g.", self.generator.clone());
        tensors.merge_prefixed("d.", self.discriminator.clone());
        Checkpoint {
            kind: "stage2".into(),
            meta: serde_json::to_value(Stage2Meta {
                config: self.config,
                embedding_seed: EMBEDDING_SEED,
            })
            .expect("metadata serialises"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m: Stage2Meta = meta(ck, "stage2")?;
        let reference = RecoveryModel::new(m.config, 0)?;
        let generator = split_prefixed(&ck.tensors, "g.");
        let discriminator = split_prefixed(&ck.tensors, "d.");
        check_layout("generator", &generator, &reference.generator)?;
        check_layout("discriminator", &discriminator, &reference.discriminator)?;
        Ok(Self {
            config: m.config,
            generator,
            discriminator,
        })
    }
}
