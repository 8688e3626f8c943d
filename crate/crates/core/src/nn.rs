//! Parameterized building blocks: parameter storage and initialization, conv
//! and squeeze-excite units, encoder/decoder stages, SGD with momentum, and
//! the checkpoint file format.

use crate::tape::{Gradients, Tape, ValueId};
use crate::tensor::{Shape4, Tensor4, UpsampleMode};
use crate::{Error, Result};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Initialization policy for a fresh parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in [-sqrt(6/fan_in), sqrt(6/fan_in)).
    HeUniform {
        fan_in: usize,
    },
    Zeros,
}

#[derive(Debug, Clone)]
struct Param {
    value: Tensor4,
    momentum: Tensor4,
}

/// Ordered map of named parameters with their momentum buffers.
///
/// Initialization derives a per-name stream from the store seed, so the values
/// a name gets do not depend on the order names are first requested in.
#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    params: IndexMap<String, Param>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: IndexMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor4> {
        self.params.get(name).map(|p| &p.momentum)
    }

    /// Fetch a parameter, creating it from the store's seed if absent.
    /// An existing parameter with a different shape is an error.
    pub fn get_or_init(&mut self, name: &str, shape: Shape4, init: Init) -> Result<&Tensor4> {
        if let Some(p) = self.params.get(name) {
            if p.value.shape() != shape {
                return Err(Error::ParamShape {
                    name: name.into(),
                    existing: p.value.shape().to_string(),
                    requested: shape.to_string(),
                });
            }
        } else {
            let value = match init {
                Init::Zeros => Tensor4::zeros(shape),
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                    let data = (0..shape.numel())
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor4::from_vec(shape, data)?
                }
            };
            let momentum = Tensor4::zeros(shape);
            self.params.insert(name.into(), Param { value, momentum });
        }
        Ok(&self.params[name].value)
    }

    /// Overwrite a parameter's value, keeping its momentum. Used by tests and
    /// weight surgery; shape must match if the parameter exists.
    pub fn set(&mut self, name: &str, value: Tensor4) -> Result<()> {
        match self.params.get_mut(name) {
            Some(p) => {
                if p.value.shape() != value.shape() {
                    return Err(Error::ParamShape {
                        name: name.into(),
                        existing: p.value.shape().to_string(),
                        requested: value.shape().to_string(),
                    });
                }
                p.value = value;
            }
            None => {
                let momentum = Tensor4::zeros(value.shape());
                self.params.insert(name.into(), Param { value, momentum });
            }
        }
        Ok(())
    }

    fn insert_loaded(&mut self, name: String, value: Tensor4) {
        let momentum = Tensor4::zeros(value.shape());
        self.params.insert(name, Param { value, momentum });
    }
}

// ---------------------------------------------------------------------------
// binding parameters onto a tape
// ---------------------------------------------------------------------------

/// Places store parameters onto a tape as leaves, once per name per forward,
/// so repeated mentions of a name share one tape node (and one gradient).
pub struct Binder<'a> {
    store: &'a mut ParamStore,
    tape: &'a mut Tape,
    bound: IndexMap<String, ValueId>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a mut ParamStore, tape: &'a mut Tape) -> Self {
        Binder {
            store,
            tape,
            bound: IndexMap::new(),
        }
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    /// Tape leaf for a named parameter, initializing it in the store if new.
    pub fn param(&mut self, name: &str, shape: Shape4, init: Init) -> Result<ValueId> {
        if let Some(&id) = self.bound.get(name) {
            let existing = self.tape.shape(id);
            if existing != shape {
                return Err(Error::ParamShape {
                    name: name.into(),
                    existing: existing.to_string(),
                    requested: shape.to_string(),
                });
            }
            return Ok(id);
        }
        let value = self.store.get_or_init(name, shape, init)?.clone();
        let id = self.tape.leaf(value);
        self.bound.insert(name.into(), id);
        Ok(id)
    }

    /// Name -> tape id map for every parameter this binder placed.
    pub fn into_bindings(self) -> IndexMap<String, ValueId> {
        self.bound
    }
}

/// Per-parameter gradients for [`sgd_step`], from one backward pass. Every
/// bound parameter must have been reached by the loss.
pub fn collect_grads(
    bindings: &IndexMap<String, ValueId>,
    grads: &Gradients,
) -> Result<IndexMap<String, Tensor4>> {
    let mut out = IndexMap::with_capacity(bindings.len());
    for (name, &id) in bindings {
        out.insert(name.clone(), grads.expect(id, name)?.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// layer builders
// ---------------------------------------------------------------------------

/// Convolution with bias, no activation. Parameters `{name}.weight` and
/// `{name}.bias`; square kernel, zero padding k/2 (same-size at stride 1).
pub fn conv_layer(
    b: &mut Binder,
    name: &str,
    x: ValueId,
    out_c: usize,
    k: usize,
    stride: usize,
) -> Result<ValueId> {
    let in_c = b.tape().shape(x).c;
    let w = b.param(
        &format!("{name}.weight"),
        Shape4::new(out_c, in_c, k, k),
        Init::HeUniform {
            fan_in: in_c * k * k,
        },
    )?;
    let bias = b.param(
        &format!("{name}.bias"),
        Shape4::new(1, out_c, 1, 1),
        Init::Zeros,
    )?;
    b.tape().conv2d(x, w, bias, stride, k / 2)
}

/// Conv + bias + ReLU.
pub fn conv_block(
    b: &mut Binder,
    name: &str,
    x: ValueId,
    out_c: usize,
    k: usize,
    stride: usize,
) -> Result<ValueId> {
    let y = conv_layer(b, name, x, out_c, k, stride)?;
    Ok(b.tape().relu(y))
}

/// Squeeze-excite: gates = sigmoid(W2 relu(W1 GAP(x))), y = x scaled per channel.
pub fn se_block(b: &mut Binder, name: &str, x: ValueId, reduction: usize) -> Result<ValueId> {
    let c = b.tape().shape(x).c;
    if reduction == 0 || !c.is_multiple_of(reduction) {
        return Err(Error::NotDivisible {
            context: format!("se_block {name} channels"),
            dim: c,
            by: reduction,
        });
    }
    let squeezed = b.tape().global_avg_pool(x);
    let z1 = conv_layer(b, &format!("{name}.fc1"), squeezed, c / reduction, 1, 1)?;
    let a1 = b.tape().relu(z1);
    let z2 = conv_layer(b, &format!("{name}.fc2"), a1, c, 1, 1)?;
    let gates = b.tape().sigmoid(z2);
    b.tape().mul_channel_gate(x, gates)
}

/// Stride-2 conv block: halves even spatial dims.
pub fn down_stage(
    b: &mut Binder,
    name: &str,
    x: ValueId,
    out_c: usize,
    k: usize,
) -> Result<ValueId> {
    conv_block(b, name, x, out_c, k, 2)
}

/// Upsample x2, concatenate any skip features, then a conv block.
pub fn up_stage(
    b: &mut Binder,
    name: &str,
    x: ValueId,
    skips: &[ValueId],
    out_c: usize,
    k: usize,
    mode: UpsampleMode,
) -> Result<ValueId> {
    let up = b.tape().upsample(x, 2, mode)?;
    let merged = if skips.is_empty() {
        up
    } else {
        let mut parts = vec![up];
        parts.extend_from_slice(skips);
        b.tape().concat_channels(&parts)?
    };
    conv_block(b, name, merged, out_c, k, 1)
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// SGD with momentum, coupled L2 weight decay, and step learning-rate decay.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 4.0e-5,
            decay_factor: 0.1,
            decay_every: 50,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidArgument("decay_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Stepped schedule: lr * decay_factor^floor(epoch / decay_every).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// One optimizer step over every parameter in the store.
///
/// v <- momentum*v + g + weight_decay*theta; theta <- theta - lr(epoch)*v.
/// Every parameter must have a gradient in `grads`.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &IndexMap<String, Tensor4>,
    cfg: &SgdConfig,
    epoch: usize,
) -> Result<()> {
    cfg.validate()?;
    let lr = cfg.lr_at(epoch);
    for (name, p) in store.params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient for {name}"),
                expected: p.value.shape().to_string(),
                found: g.shape().to_string(),
            });
        }
        for i in 0..p.value.numel() {
            let v = cfg.momentum * p.momentum.data()[i]
                + g.data()[i]
                + cfg.weight_decay * p.value.data()[i];
            p.momentum.data_mut()[i] = v;
            p.value.data_mut()[i] -= lr * v;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"SGMN";
const FORMAT_VERSION: u32 = 1;
const MOMENTUM_SUFFIX: &str = ".momentum";

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 4],
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

/// Write the store (values and momentum buffers) plus an optional config blob.
///
/// Layout: magic "SGMN", format version u32 LE, manifest byte length u64 LE,
/// UTF-8 JSON manifest, then raw little-endian f64 data in manifest order.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config: Option<&serde_json::Value>,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.params.len() * 2);
    for (name, p) in &store.params {
        let s = p.value.shape();
        tensors.push(TensorRecord {
            name: name.clone(),
            shape: [s.n, s.c, s.h, s.w],
            dtype: "f64".into(),
        });
        tensors.push(TensorRecord {
            name: format!("{name}{MOMENTUM_SUFFIX}"),
            shape: [s.n, s.c, s.h, s.w],
            dtype: "f64".into(),
        });
    }
    let manifest = Manifest {
        seed: store.seed,
        config: config.cloned(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    for p in store.params.values() {
        for t in [&p.value, &p.momentum] {
            for v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Option<serde_json::Value>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {magic:?}, expected \"SGMN\""
        )));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4)
        .map_err(|_| Error::Checkpoint("file too short for version".into()))?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8)
        .map_err(|_| Error::Checkpoint("file too short for manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(l8) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Checkpoint("file too short for manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest is not valid JSON: {e}")))?;

    let mut store = ParamStore::new(manifest.seed);
    for rec in &manifest.tensors {
        if rec.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {} has unsupported dtype {}",
                rec.name, rec.dtype
            )));
        }
        let shape = Shape4::new(rec.shape[0], rec.shape[1], rec.shape[2], rec.shape[3]);
        let mut buf = vec![0u8; shape.numel() * 8];
        f.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!("data truncated while reading tensor {}", rec.name))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor4::from_vec(shape, data)?;
        match rec.name.strip_suffix(MOMENTUM_SUFFIX) {
            Some(base) => {
                let p = store.params.get_mut(base).ok_or_else(|| {
                    Error::Checkpoint(format!("momentum for unknown parameter {base}"))
                })?;
                if p.value.shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "momentum shape mismatch for {base}"
                    )));
                }
                p.momentum = tensor;
            }
            None => store.insert_loaded(rec.name.clone(), tensor),
        }
    }
    let mut rest = [0u8; 1];
    if f.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((store, manifest.config))
}
