//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! nvae-checkpoint/1\n
//! key=value\n            (metadata, one per line)
//! ...
//! \n                     (blank line ends the header)
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims…, f64 data
//! ```
//!
//! All integers and floats are little-endian. Floats in the metadata use
//! Rust's shortest round-trip formatting, so hyperparameters reload exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{LatentLayout, ModelConfig, NvaeModel, Objective};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &str = "nvae-checkpoint/1";
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Optimizer state needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub adam_enc: AdamState,
    pub adam_dec: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: NvaeModel,
    pub seed: u64,
    pub train: Option<TrainState>,
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn from_model(model: NvaeModel, seed: u64) -> Self {
        Self {
            model,
            seed,
            train: None,
        }
    }

    fn metadata(&self) -> Vec<(String, String)> {
        let c = self.model.config();
        let mut m: Vec<(&str, String)> = vec![
            ("library_version", LIBRARY_VERSION.into()),
            ("seed", self.seed.to_string()),
            ("input_dim", c.input_dim.to_string()),
            ("classes", c.layout.classes.to_string()),
            ("class_dim", c.layout.class_dim.to_string()),
            ("shared_dim", c.layout.shared_dim.to_string()),
            ("encoder_hidden", join(&c.encoder_hidden)),
            ("decoder_hidden", join(&c.decoder_hidden)),
            ("alpha_p", c.alpha_p.to_string()),
            ("alpha_q", c.alpha_q.to_string()),
            ("beta_c", c.beta_c.to_string()),
            ("beta_s", c.beta_s.to_string()),
            ("bias_enabled", c.bias_enabled.to_string()),
        ];
        if let Some(t) = &self.train {
            let tc = &t.config;
            m.extend([
                ("epoch", t.epoch.to_string()),
                ("train.objective", tc.objective.name().into()),
                ("train.beta_c", tc.beta_c.to_string()),
                ("train.beta_s", tc.beta_s.to_string()),
                ("train.learning_rate", tc.learning_rate.to_string()),
                ("train.beta1", tc.beta1.to_string()),
                ("train.beta2", tc.beta2.to_string()),
                ("train.batch_size", tc.batch_size.to_string()),
                ("train.epochs", tc.epochs.to_string()),
                ("train.seed", tc.seed.to_string()),
                ("train.bias_enabled", tc.bias_enabled.to_string()),
                ("train.samples", tc.samples.to_string()),
                ("adam_enc.t", t.adam_enc.t.to_string()),
                ("adam_dec.t", t.adam_dec.t.to_string()),
            ]);
        }
        m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for store in [&self.model.encoder, &self.model.decoder] {
            out.extend(store.iter().map(|(n, t)| (n.to_string(), t)));
        }
        if let Some(t) = &self.train {
            for (store, state, tag) in [
                (&self.model.encoder, &t.adam_enc, "adam_enc"),
                (&self.model.decoder, &t.adam_dec, "adam_dec"),
            ] {
                for ((name, _), (m, v)) in store.iter().zip(state.m.iter().zip(&state.v)) {
                    out.push((format!("{tag}.m.{name}"), m));
                    out.push((format!("{tag}.v.{name}"), v));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        for (k, v) in self.metadata() {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.push(b'\n');
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.line()?;
        if magic != MAGIC {
            if magic.starts_with("nvae-checkpoint/") {
                return Err(Error::VersionMismatch {
                    found: magic,
                    expected: MAGIC.into(),
                });
            }
            return Err(fmt_err("not an nvae checkpoint"));
        }
        let mut meta = BTreeMap::new();
        loop {
            let line = r.line()?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let meta = Meta(meta);
        let version = meta.get("library_version")?;
        if version != LIBRARY_VERSION {
            return Err(Error::VersionMismatch {
                found: version.to_string(),
                expected: LIBRARY_VERSION.into(),
            });
        }

        let mut tensors = BTreeMap::new();
        let mut order = Vec::new();
        let count = r.u32()?;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            order.push(name.clone());
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes after tensors"));
        }

        let config = ModelConfig {
            input_dim: meta.parse("input_dim")?,
            layout: LatentLayout::new(meta.parse("classes")?, meta.parse("class_dim")?, meta.parse("shared_dim")?)?,
            encoder_hidden: meta.list("encoder_hidden")?,
            decoder_hidden: meta.list("decoder_hidden")?,
            alpha_p: meta.parse("alpha_p")?,
            alpha_q: meta.parse("alpha_q")?,
            beta_c: meta.parse("beta_c")?,
            beta_s: meta.parse("beta_s")?,
            bias_enabled: meta.parse("bias_enabled")?,
        };
        let mut take_store = |prefix: &str| -> Result<ParamStore> {
            let mut store = ParamStore::new();
            for name in order.iter().filter(|n| n.starts_with(prefix)) {
                let t = tensors.remove(name).expect("name listed once");
                store.insert(name.clone(), t)?;
            }
            Ok(store)
        };
        let encoder = take_store("enc.")?;
        let decoder = take_store("dec.")?;
        let model = NvaeModel::from_parts(config, encoder, decoder)?;

        let train = if meta.0.contains_key("epoch") {
            let objective = meta.get("train.objective")?;
            let config = TrainConfig {
                objective: Objective::parse(objective)
                    .ok_or_else(|| fmt_err(format!("unknown objective `{objective}`")))?,
                beta_c: meta.parse("train.beta_c")?,
                beta_s: meta.parse("train.beta_s")?,
                learning_rate: meta.parse("train.learning_rate")?,
                beta1: meta.parse("train.beta1")?,
                beta2: meta.parse("train.beta2")?,
                batch_size: meta.parse("train.batch_size")?,
                epochs: meta.parse("train.epochs")?,
                seed: meta.parse("train.seed")?,
                bias_enabled: meta.parse("train.bias_enabled")?,
                samples: meta.parse("train.samples")?,
            };
            let mut state = |tag: &str, store: &ParamStore| -> Result<AdamState> {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for (name, p) in store.iter() {
                    for (kind, out) in [("m", &mut m), ("v", &mut v)] {
                        let key = format!("{tag}.{kind}.{name}");
                        let t = tensors.remove(&key).ok_or_else(|| fmt_err(format!("missing tensor `{key}`")))?;
                        if t.shape() != p.shape() {
                            return Err(Error::shape("checkpoint optimizer state", p.shape(), t.shape()));
                        }
                        out.push(t);
                    }
                }
                Ok(AdamState {
                    m,
                    v,
                    t: meta.parse(&format!("{tag}.t"))?,
                })
            };
            Some(TrainState {
                adam_enc: state("adam_enc", &model.encoder)?,
                adam_dec: state("adam_dec", &model.decoder)?,
                config,
                epoch: meta.parse("epoch")?,
            })
        } else {
            None
        };
        if let Some(name) = tensors.keys().next() {
            return Err(fmt_err(format!("unexpected tensor `{name}`")));
        }
        Ok(Checkpoint {
            model,
            seed: meta.parse("seed")?,
            train,
        })
    }
}

fn fmt_err(message: impl Into<String>) -> Error {
    Error::Format {
        path: "<checkpoint>".into(),
        message: message.into(),
    }
}

struct Meta(BTreeMap<String, String>);

impl Meta {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| fmt_err(format!("missing metadata `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| fmt_err(format!("bad value `{v}` for `{key}`")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.parse().map_err(|_| fmt_err(format!("bad value `{v}` for `{key}`"))))
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<String> {
        let rest = &self.bytes[self.pos..];
        let n = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err("truncated header"))?;
        let s = std::str::from_utf8(&rest[..n]).map_err(|_| fmt_err("header is not UTF-8"))?;
        self.pos += n + 1;
        Ok(s.to_string())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
