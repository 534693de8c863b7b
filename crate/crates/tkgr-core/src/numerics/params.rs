//! Named parameter storage with paired gradients, Adam state, and a
//! versioned binary checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TKGRCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    grad: Tensor,
    adam_m: Tensor,
    adam_v: Tensor,
}

/// All learnable tensors, keyed by stable names.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument {
                op: "register",
                details: format!("parameter `{}` already registered", name),
            });
        }
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: Tensor::zeros(shape.clone()),
                adam_m: Tensor::zeros(shape.clone()),
                adam_v: Tensor::zeros(shape),
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                details: format!(
                    "`{}` is {:?}, got {:?}",
                    name,
                    p.value.shape(),
                    value.shape()
                ),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                details: format!(
                    "`{}` grad is {:?}, got {:?}",
                    name,
                    p.grad.shape(),
                    grad.shape()
                ),
            });
        }
        for (d, &s) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *d += s;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update with bias correction over every parameter; gradients
    /// are zeroed afterwards.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "adam_step",
                details: format!("learning rate {} must be positive", lr),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in self.params.values_mut() {
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                let m = beta1 * p.adam_m.data()[i] + (1.0 - beta1) * g;
                let v = beta2 * p.adam_v.data()[i] + (1.0 - beta2) * g * g;
                p.adam_m.data_mut()[i] = m;
                p.adam_v.data_mut()[i] = v;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                p.value.data_mut()[i] -= update;
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }

    pub fn adam_steps_taken(&self) -> u64 {
        self.step
    }

    // -- checkpoint io -------------------------------------------------------

    /// Serialized form: magic, version, parameter count, then per parameter
    /// name length / name / rank / dims / little-endian f32 payload, and a
    /// trailing FNV-1a checksum of all payload bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut checksum = Fnv1a::new();
        for (name, p) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                let bytes = (v as f32).to_le_bytes();
                checksum.update(&bytes);
                buf.extend_from_slice(&bytes);
            }
        }
        buf.extend_from_slice(&checksum.finish().to_le_bytes());
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&data);
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {})",
                version, CHECKPOINT_VERSION
            )));
        }
        let count = r.u32()? as usize;
        let mut store = ParameterStore::new();
        let mut checksum = Fnv1a::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let bytes = r.take(4)?;
                checksum.update(bytes);
                values.push(f32::from_le_bytes(bytes.try_into().unwrap()) as f64);
            }
            store.register(&name, Tensor::new(shape, values)?)?;
        }
        let stored = r.u64()?;
        if stored != checksum.finish() {
            return Err(Error::Checkpoint(format!(
                "payload checksum mismatch: stored {:#x}, computed {:#x}",
                stored,
                checksum.finish()
            )));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after checksum".into()));
        }
        Ok(store)
    }

    /// Shapes and element counts per parameter, for inspection output.
    pub fn summary(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.shape().to_vec(), p.value.len()))
            .collect()
    }
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }
}
