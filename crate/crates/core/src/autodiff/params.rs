//! Named parameter tensors grouped into the four generator partitions.
//! The flat-vector view uses a fixed ordering — partition, then name
//! (lexicographic), then row-major — so parameter-delta vectors and
//! checkpoints are portable across runs.

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SGUNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Generator module partitions, in flattening order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Encoder,
    Grl,
    Layout,
    Decoder,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Encoder,
        Partition::Grl,
        Partition::Layout,
        Partition::Decoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Partition::Encoder => "encoder",
            Partition::Grl => "grl",
            Partition::Layout => "layout",
            Partition::Decoder => "decoder",
        }
    }

    pub fn from_name(name: &str) -> Option<Partition> {
        Partition::ALL.iter().copied().find(|p| p.name() == name)
    }

    fn tag(&self) -> u8 {
        *self as u8
    }

    fn from_tag(tag: u8) -> Option<Partition> {
        Partition::ALL.get(tag as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamEntry {
    name: String,
    partition: Partition,
    tensor: Tensor,
}

/// Parameter collection with deterministic flat ordering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    /// Insert keeps entries sorted by (partition, name).
    pub fn insert(&mut self, name: &str, partition: Partition, tensor: Tensor) {
        assert!(
            self.get(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        let entry = ParamEntry {
            name: name.to_string(),
            partition,
            tensor,
        };
        let pos = self
            .entries
            .partition_point(|e| (e.partition, e.name.as_str()) < (partition, name));
        self.entries.insert(pos, entry);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Partition, &Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.partition, &e.tensor))
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Binds every parameter onto a tape as a named leaf.
    pub fn bind(&self, tape: &mut Tape) {
        for e in &self.entries {
            tape.param(&e.name, e.tensor.clone());
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat vector length mismatch");
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Gradient of a backward pass in flat order; parameters the loss never
    /// touched contribute exact zeros.
    pub fn flat_gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for e in &self.entries {
            match tape.param_var(&e.name).and_then(|v| grads.get(v)) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, e.tensor.len())),
            }
        }
        out
    }

    /// Flat-index spans (offset, len, partition) in flattening order.
    pub fn spans(&self) -> Vec<(usize, usize, Partition)> {
        let mut out = Vec::with_capacity(self.entries.len());
        let mut off = 0;
        for e in &self.entries {
            out.push((off, e.tensor.len(), e.partition));
            off += e.tensor.len();
        }
        out
    }

    /// Boolean mask over the flat view selecting the given partitions.
    pub fn partition_mask(&self, partitions: &[Partition]) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.len());
        for e in &self.entries {
            let selected = partitions.contains(&e.partition);
            mask.extend(std::iter::repeat_n(selected, e.tensor.len()));
        }
        mask
    }

    // ---- checkpoint io ----

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ParamError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            f.write_all(&[e.partition.tag()])?;
            let name = e.name.as_bytes();
            f.write_all(&(name.len() as u16).to_le_bytes())?;
            f.write_all(name)?;
            f.write_all(&[e.tensor.shape().len() as u8])?;
            for d in e.tensor.shape() {
                f.write_all(&(*d as u32).to_le_bytes())?;
            }
        }
        for e in &self.entries {
            for v in e.tensor.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<ParameterStore, ParamError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ParamError> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| ParamError::Format("truncated checkpoint".into()))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
            return Err(ParamError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ParamError::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = take(&mut pos, 1)?[0];
            let partition = Partition::from_tag(tag)
                .ok_or_else(|| ParamError::Format(format!("bad partition tag {tag}")))?;
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| ParamError::Format("non-utf8 name".into()))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            headers.push((name, partition, shape));
        }
        let mut store = ParameterStore::new();
        for (name, partition, shape) in headers {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            store.insert(&name, partition, Tensor::new(shape, data));
        }
        if pos != bytes.len() {
            return Err(ParamError::Format("trailing bytes".into()));
        }
        Ok(store)
    }
}
