use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learnable tensors addressed by hierarchical dotted names, e.g.
/// `temporal.fusion.2.mca.wq`. Iteration order is the lexicographic order
/// of names, which keeps optimizers and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Gradients keyed like the [`ParamStore`] they were computed for.
pub type GradStore = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers a `[fan_in, fan_out]` matrix with Glorot-uniform entries.
    pub fn init_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(vec![fan_in, fan_out], |_| rng.random_range(-limit..limit));
        self.insert(name, t)
    }

    pub fn init_const(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        value: f64,
    ) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    /// Adds every parameter to `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }

    /// Checkpoint layout: an 8-byte little-endian header length, a JSON header
    /// mapping each name to its shape and byte offset into the payload, then
    /// the payload of little-endian `f64` values in header order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.params {
            entries.insert(
                name.clone(),
                HeaderEntry {
                    shape: t.shape().to_vec(),
                    offset,
                },
            );
            offset += 8 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            payload_bytes: offset,
            tensors: entries,
        })?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in self.params.values() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(Error::Checkpoint(format!(
                "implausible header length {len}"
            )));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}`",
                header.format
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        let mut store = ParamStore::new();
        for (name, entry) in header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 8 * n;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` runs past the payload")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            store.insert(name, Tensor::new(entry.shape, data)?)?;
        }
        Ok(store)
    }
}

pub const CHECKPOINT_FORMAT: &str = "tscan-params-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    payload_bytes: u64,
    tensors: BTreeMap<String, HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    offset: u64,
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects gradients after [`Graph::backward`]; unused parameters get zeros.
    pub fn gradients(&self, graph: &Graph) -> GradStore {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = graph
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()));
                (k.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.init_const("a.b", vec![2], 0.0).unwrap();
        assert!(s.init_const("a.b", vec![3], 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.init_glorot("temporal.encoder.msa.wq", 5, 7, &mut rng)
            .unwrap();
        s.init_const("head.b", vec![2], -0.1).unwrap();
        s.insert(
            "odd",
            Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut s = ParamStore::new();
        s.init_const("w", vec![4], 1.0).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read_from(&mut buf.as_slice()).is_err());
    }
}
