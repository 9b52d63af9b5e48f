//! Named model parameters, deterministic initialization, and binary
//! snapshots.
//!
//! Each parameter's initial values are drawn from a ChaCha stream seeded
//! by (model seed, parameter name), so a parameter's initialization does
//! not depend on how many other parameters exist or in which order they
//! were allocated. Ablated model variants therefore share bitwise-equal
//! values for the parameters they have in common.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Snapshot file magic.
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"VCHG";
pub const SNAPSHOT_VERSION: u8 = 1;

/// A named, gradient-tracked tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat, order-stable collection of all parameters of one model.
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    seed: u64,
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ fnv1a(name))
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Allocates a parameter initialized uniformly in
    /// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn alloc(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = param_rng(self.seed, name);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(data, shape).expect("valid shape").tracked())
    }

    /// Allocates a parameter filled with a constant (layer-norm gains
    /// and shifts start at 1 and 0 rather than random values).
    pub fn alloc_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, value).tracked())
    }

    fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Number of parameters (tensors, not scalars).
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    // ── Snapshot I/O ────────────────────────────────────────────────
    //
    // Layout: magic "VCHG", one version byte, then per parameter:
    //   name length (u32 LE), name bytes (UTF-8),
    //   rank (u32 LE), extents (u64 LE each),
    //   data (f64 LE each). Records run to end of file.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.push(SNAPSHOT_VERSION);
        for p in &self.params {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &e in p.value.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Loads a snapshot into this set. Every record must match an
    /// existing parameter by name and shape; every parameter must be
    /// covered by exactly one record.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::contract("truncated snapshot file"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != SNAPSHOT_MAGIC {
            return Err(Error::contract("bad snapshot magic, expected \"VCHG\""));
        }
        let version = take(&mut pos, 1)?[0];
        if version != SNAPSHOT_VERSION {
            return Err(Error::contract(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let mut seen = vec![false; self.params.len()];
        while pos < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::contract("snapshot parameter name is not UTF-8"))?
                .to_string();
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let idx = self
                .by_name
                .get(&name)
                .copied()
                .ok_or_else(|| Error::contract(format!("snapshot has unknown parameter {name:?}")))?;
            if self.params[idx].value.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "snapshot shape {:?} for {name:?} does not match model shape {:?}",
                    shape,
                    self.params[idx].value.shape()
                )));
            }
            self.params[idx].value.data_mut().copy_from_slice(&data);
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::contract(format!(
                "snapshot is missing parameter {:?}",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}

/// Mapping from [`ParamId`] to the tape leaf it was bound to for one
/// forward pass.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn of(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// Records every parameter as a tracked leaf on the tape. Each leaf
/// starts with a zero gradient buffer; accumulated parameter gradients
/// live in the [`ParamSet`], not on tapes.
pub fn bind_all(tape: &mut Tape, params: &ParamSet) -> Binding {
    let ids = params
        .params
        .iter()
        .map(|p| {
            let mut v = p.value.clone();
            v.zero_grad();
            tape.leaf(v)
        })
        .collect();
    Binding { ids }
}

/// Copies tape gradients back into the parameter set, accumulating.
pub fn harvest(tape: &Tape, binding: &Binding, params: &mut ParamSet) {
    for (idx, tid) in binding.ids.iter().enumerate() {
        if let Some(g) = tape.grad(*tid) {
            let g = g.to_vec();
            params.params[idx].value.accumulate_grad(&g);
        }
    }
}
