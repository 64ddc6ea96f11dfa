use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AutodiffError, Gradients, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters. Insertion order is the
/// checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

pub const CHECKPOINT_BIN: &str = "params.bin";
pub const CHECKPOINT_MANIFEST: &str = "params.manifest";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let dst = self.params[id.0].grad.data_mut();
        for (d, g) in dst.iter_mut().zip(grad.data()) {
            *d += g;
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.accumulate_grad(id, g);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies every parameter from `other` whose name and shape match.
    /// Returns the number of parameters copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.id_of(&p.name).map(|id| other.get(id)) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Writes `params.bin` (little-endian f64, parameters concatenated in
    /// order) and `params.manifest` (`name<TAB>shape<TAB>byte offset`).
    pub fn save(&self, dir: &Path) -> Result<(), AutodiffError> {
        fs::create_dir_all(dir)?;
        let mut bin = Vec::with_capacity(self.num_values() * 8);
        let mut manifest = String::new();
        for p in &self.params {
            let shape = p
                .value
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!("{}\t{}\t{}\n", p.name, shape, bin.len()));
            for v in p.value.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(dir.join(CHECKPOINT_BIN))?.write_all(&bin)?;
        fs::write(dir.join(CHECKPOINT_MANIFEST), manifest)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<Self, AutodiffError> {
        let bin = fs::read(dir.join(CHECKPOINT_BIN))?;
        let manifest = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
        let mut store = ParamStore::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| AutodiffError::Checkpoint(format!("line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 tab-separated fields"));
            }
            let shape = fields[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("bad shape"))?;
            let offset: usize = fields[2].parse().map_err(|_| bad("bad offset"))?;
            let count: usize = shape.iter().product();
            let end = offset + count * 8;
            if end > bin.len() {
                return Err(bad("offset past end of params.bin"));
            }
            let data = bin[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(fields[0], Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}
