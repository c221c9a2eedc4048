//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "LDSPNCKP"
//! version u32
//! meta    u64 length + JSON (model config, token and label vocabularies)
//! count   u32
//! tensor* u32 name length, name, u32 rank, u64 dims, f64 values
//! ```
//!
//! The label propagation matrix travels as the tensor `graph.propagation`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelVocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::vocab::TokenVocabulary;

pub const MAGIC: &[u8; 8] = b"LDSPNCKP";
pub const VERSION: u32 = 1;
const PROPAGATION: &str = "graph.propagation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ModelConfig,
    tokens: Vec<String>,
    labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tokens: TokenVocabulary,
    pub labels: LabelVocabulary,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, tokens: &TokenVocabulary, labels: &LabelVocabulary) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .params
            .iter()
            .map(|(_, name, t)| {
                let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape");
                (name.to_string(), copy)
            })
            .collect();
        if let Some(p) = model.propagation() {
            tensors.push((PROPAGATION.to_string(), p.clone()));
        }
        Self {
            config: model.config.clone(),
            tokens: tokens.clone(),
            labels: labels.clone(),
            tensors,
        }
    }

    /// Rebuilds the model and overwrites every parameter by name.
    pub fn to_model(&self) -> Result<Model> {
        let propagation = self
            .tensors
            .iter()
            .find(|(n, _)| n == PROPAGATION)
            .map(|(_, t)| t.clone());
        let mut model = Model::new(self.config.clone(), propagation, 0)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let (_, saved) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            let target = model.params.get_mut(id);
            if target.shape() != saved.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, checkpoint holds {:?}",
                    target.shape(),
                    saved.shape()
                )));
            }
            target.data_mut().copy_from_slice(saved.data());
        }
        let expected = model.params.len() + usize::from(model.propagation().is_some());
        if expected != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                self.tensors.len()
            )));
        }
        Ok(model)
    }

    /// Fails unless `other` describes the same architecture.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let (a, b) = (&self.config, other);
        let sa = &a.settings;
        let sb = &b.settings;
        let dims = |c: &ModelConfig| {
            let s = &c.settings;
            (
                c.vocab_size,
                c.num_labels,
                c.m,
                s.d_model,
                s.num_heads,
                s.encoder_layers,
                s.decoder_layers,
                s.ffn_width,
                s.max_len,
                s.gcn_widths(),
            )
        };
        if dims(a) != dims(b) || sa.use_gcn != sb.use_gcn || sa.head != sb.head {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint {:?} vs configured {:?}",
                dims(a),
                dims(b)
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            tokens: self.tokens.tokens().to_vec(),
            labels: self.labels.names().to_vec(),
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let meta_len = read_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let meta: Meta = serde_json::from_slice(&meta)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut name = vec![0u8; read_u32(r)? as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                read_exact(r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)
            .map_err(|e| Error::io("reading checkpoint", e))?
            != 0
        {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self {
            config: meta.config,
            tokens: TokenVocabulary::from_tokens(meta.tokens)?,
            labels: LabelVocabulary::from_names(meta.labels)?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing checkpoint {}", path.display());
        let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(ctx(), e))?;
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("file is truncated".into()),
        _ => Error::io("reading checkpoint", e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LabelGraph;
    use crate::model::{Head, ModelSettings};

    fn fixture(head: Head) -> Checkpoint {
        let settings = ModelSettings {
            d_model: 8,
            num_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_width: 8,
            max_len: 12,
            head,
            ..ModelSettings::default()
        };
        let tokens = TokenVocabulary::build(["a b c"]);
        let labels = LabelVocabulary::build(["x", "y", "z"]);
        let config = ModelConfig::resolve(settings, tokens.len(), 3, 2).unwrap();
        let graph = LabelGraph::build(&[vec![0, 1], vec![2]], 3, 0.1, 0.25).unwrap();
        let model = Model::new(config, Some(graph.propagation), 9).unwrap();
        Checkpoint::from_model(&model, &tokens, &labels)
    }

    #[test]
    fn round_trip_is_exact() {
        for head in [Head::SetPrediction, Head::Bce] {
            let ck = fixture(head);
            let mut bytes = Vec::new();
            ck.write_to(&mut bytes).unwrap();
            let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
            assert_eq!(back, ck);
            let model = back.to_model().unwrap();
            let again = Checkpoint::from_model(&model, &back.tokens, &back.labels);
            assert_eq!(again, ck);
        }
    }

    #[test]
    fn version_mismatch_is_fatal() {
        let mut bytes = Vec::new();
        fixture(Head::SetPrediction).write_to(&mut bytes).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(ref m) if m.contains("version 2")),
            "{err}"
        );
    }

    #[test]
    fn corrupted_files_rejected() {
        let mut bytes = Vec::new();
        fixture(Head::SetPrediction).write_to(&mut bytes).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::read_from(&mut &truncated[..]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&mut extra.as_slice()).is_err());
        assert!(Checkpoint::read_from(&mut &b"nonsense"[..]).is_err());
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut ck = fixture(Head::SetPrediction);
        let (name, t) = ck.tensors[0].clone();
        ck.tensors[0] = (name, Tensor::zeros(&[t.len() + 1]));
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));

        let ck = fixture(Head::SetPrediction);
        let mut other = ck.config.clone();
        other.settings.d_model = 16;
        assert!(matches!(
            ck.check_compatible(&other),
            Err(Error::Checkpoint(_))
        ));
        assert!(ck.check_compatible(&ck.config).is_ok());
    }
}
