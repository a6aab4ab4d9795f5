//! Named parameter storage, gradient buffers and the checkpoint format.
//!
//! A checkpoint is laid out as
//!
//! ```text
//! [u64 LE: header length N][N bytes of JSON header][f64 LE values ...]
//! ```
//!
//! where the header is `{"params":[{"name":..,"shape":[..]},..]}` and the
//! values follow in header order, each parameter row-major.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Register a parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, value)| HeaderEntry {
                    name: name.clone(),
                    shape: value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for value in &self.values {
            for x in value.data() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrite every parameter from a checkpoint. Names, order and shapes
    /// must match this store exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        self.read_from(&mut file)
    }

    pub fn read_from<R: Read>(&mut self, input: &mut R) -> Result<()> {
        let mut len = [0u8; 8];
        input
            .read_exact(&mut len)
            .map_err(|_| TensorError::Checkpoint("missing header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(TensorError::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        input
            .read_exact(&mut json)
            .map_err(|_| TensorError::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| TensorError::Checkpoint(e.to_string()))?;

        if header.params.len() != self.values.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                header.params.len()
            )));
        }
        for (i, entry) in header.params.iter().enumerate() {
            if entry.name != self.names[i] {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {i}: expected `{}`, found `{}`",
                    self.names[i], entry.name
                )));
            }
            if entry.shape != self.values[i].shape() {
                return Err(TensorError::CheckpointShape {
                    name: entry.name.clone(),
                    expected: self.values[i].shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
        }

        let mut loaded = Vec::with_capacity(self.values.len());
        let mut buf = [0u8; 8];
        for (entry, current) in header.params.iter().zip(&self.values) {
            let mut data = Vec::with_capacity(current.numel());
            for _ in 0..current.numel() {
                input
                    .read_exact(&mut buf)
                    .map_err(|_| TensorError::CheckpointTruncated {
                        name: entry.name.clone(),
                    })?;
                data.push(f64::from_le_bytes(buf));
            }
            loaded.push(Tensor::from_parts(current.shape().to_vec(), data));
        }
        if input.read(&mut buf)? != 0 {
            return Err(TensorError::Checkpoint("trailing bytes after last parameter".into()));
        }
        self.values = loaded;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    params: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

/// Gradient buffers indexed by [`ParamId`]; parameters that received no
/// gradient stay `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn accumulate_slice(&mut self, id: ParamId, grad: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(grad).for_each(|(b, g)| *b += g),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(buf) => buf.iter_mut().zip(theirs).for_each(|(b, g)| *b += scale * g),
                None => *mine = Some(theirs.iter().map(|g| scale * g).collect()),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.grads.iter_mut().flatten() {
            buf.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// First parameter (in registration order) holding a NaN or infinite gradient.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads.iter().enumerate().find_map(|(i, g)| {
            g.as_ref()
                .filter(|g| g.iter().any(|x| !x.is_finite()))
                .map(|_| ParamId(i))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}
