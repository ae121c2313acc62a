//! Checkpoint container.
//!
//! ```text
//! TDSTEREO-CKPT v1
//! meta <key>=<value>          (any number, in order)
//! tensor <name> <d0>x<d1>...  (any number; "scalar" for rank 0)
//! end
//! <payload>
//! ```
//!
//! The payload concatenates the tensors in header order as little-endian
//! 64-bit floats. Model weights are stored as `param/<name>`, optimizer
//! moments as `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use tdstereo_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;

const MAGIC: &str = "TDSTEREO-CKPT v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn malformed(offset: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        what: "checkpoint",
        offset,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if k.contains(['=', '\n', ' ']) || v.contains('\n') {
                return Err(Error::Invalid(format!("meta entry {k:?} cannot be stored")));
            }
            head.push_str(&format!("meta {k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains([' ', '\n']) {
                return Err(Error::Invalid(format!("tensor name {name:?} cannot be stored")));
            }
            let dims = if t.rank() == 0 {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            head.push_str(&format!("tensor {name} {dims}\n"));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| malformed(start, "unterminated header line"))?;
            let line = std::str::from_utf8(&bytes[start..start + rel])
                .map_err(|_| malformed(start, "header is not UTF-8"))?
                .to_string();
            *pos = start + rel + 1;
            Ok((start, line))
        };
        let (at, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(malformed(at, format!("expected '{MAGIC}', found '{magic}'")));
        }
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| malformed(at, "meta line without '='"))?;
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| malformed(at, "tensor line without dimensions"))?;
                let shape = if dims == "scalar" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| malformed(at, format!("bad dimensions '{dims}'")))?
                };
                shapes.push((name.to_string(), shape));
            } else {
                return Err(malformed(at, format!("unexpected header line '{line}'")));
            }
        }
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(malformed(pos, format!("payload of '{name}' truncated")));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.tensors.push((name, Tensor::new(shape, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(malformed(pos, "trailing bytes after payload"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Malformed { offset, msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg: format!("malformed checkpoint at byte {offset}: {msg}"),
            },
            other => other,
        })
    }

    /// Weights, model configuration and (optionally) optimizer state.
    pub fn from_model(model: &Model, adam: Option<&Adam>) -> Self {
        let mut ck = Checkpoint {
            meta: model.config.to_pairs(),
            tensors: Vec::new(),
        };
        for (name, t) in model.params.iter() {
            ck.tensors.push((format!("param/{name}"), t.clone()));
        }
        if let Some(adam) = adam {
            ck.set_meta("adam_step", adam.step);
            for (k, (name, _)) in model.params.iter().enumerate() {
                ck.tensors.push((format!("adam.m/{name}"), adam.m[k].clone()));
                ck.tensors.push((format!("adam.v/{name}"), adam.v[k].clone()));
            }
        }
        ck
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (k, v) in &self.meta {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rebuilds the model and loads its weights; every parameter must be present
    /// with a matching shape.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config()?)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = format!("param/{}", model.params.name(id));
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name}")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Invalid(format!(
                    "{name}: checkpoint shape {:?} differs from model shape {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
        }
        let expected = model.params.len();
        let stored = self.tensors.iter().filter(|(n, _)| n.starts_with("param/")).count();
        if stored != expected {
            return Err(Error::Invalid(format!(
                "checkpoint holds {stored} parameters, model expects {expected}"
            )));
        }
        Ok(model)
    }

    pub fn restore_adam(&self, model: &Model) -> Result<Option<Adam>> {
        let Some(step) = self.meta("adam_step") else {
            return Ok(None);
        };
        let mut adam = Adam::new(&model.params);
        adam.step = step
            .parse()
            .map_err(|_| Error::Invalid(format!("bad adam_step '{step}'")))?;
        for (k, (name, p)) in model.params.iter().enumerate() {
            for (slot, prefix) in [(&mut adam.m[k], "adam.m"), (&mut adam.v[k], "adam.v")] {
                let key = format!("{prefix}/{name}");
                let t = self
                    .tensor(&key)
                    .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {key}")))?;
                if t.shape() != p.shape() {
                    return Err(Error::Invalid(format!("{key}: shape mismatch")));
                }
                *slot = t.clone();
            }
        }
        Ok(Some(adam))
    }
}
