//! Small transformer building blocks on top of candle, with a named, seeded
//! parameter store and a self-describing checkpoint container.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named trainable tensors, kept in a sorted map so iteration order is stable.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Vars whose name starts with any of the given prefixes.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Checkpoint(format!("parameter `{name}` defined twice")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// Flattened host copy of every parameter, converted to f64.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                Ok((
                    n.clone(),
                    v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
                ))
            })
            .collect()
    }

    pub fn assign(&self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: checkpoint {shape:?}, model {:?}",
                var.dims()
            )));
        }
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }
}

/// Seeded initializer that registers parameters under a dotted prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> Init<'_> {
        let prefix = self.path(name);
        Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn add(&mut self, name: &str, shape: &[usize], values: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        self.add(name, shape, values)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut *self.rng) as f32).collect();
        self.add(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// PyTorch-style default: weights and bias uniform in ±1/sqrt(fan_in).
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: init.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: Some(init.uniform("bias", &[out_dim], bound)?),
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::InvalidArgument("scalar input".into()))?;
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((lead, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("weight", &[dim], 1.0)?,
            beta: init.constant("bias", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last axis built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `log(sum(exp(x)))` over the last axis, max-shifted for stability.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_add(&max)?.squeeze(D::Minus1)?)
}

/// Additive bias for masked attention: exp of this underflows to exactly zero.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut init.pp("q"), dim, dim)?,
            k: Linear::new(&mut init.pp("k"), dim, dim)?,
            v: Linear::new(&mut init.pp("v"), dim, dim)?,
            out: Linear::new(&mut init.pp("out"), dim, dim)?,
            heads,
        })
    }

    /// `x` is `(batch, len, dim)`; `key_bias` is `(batch, len)` of 0 or [`MASK_NEG`].
    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(&bias.reshape((b, 1, 1, l))?)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, d))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer block: attention then a GELU MLP, each with a residual.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(init: &mut Init, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut init.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut init.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut init.pp("norm2"), dim)?,
            fc1: Linear::new(&mut init.pp("fc1"), dim, dim * mlp_ratio)?,
            fc2: Linear::new(&mut init.pp("fc2"), dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, key_bias)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"CTCLIPCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    meta: serde_json::Value,
    tensors: Vec<CkptEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
}

/// Checkpoint contents: free-form metadata plus named f32 arrays.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(meta: serde_json::Value, store: &ParamStore) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in &store.vars {
            let values = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?;
            tensors.insert(name.clone(), (var.dims().to_vec(), values));
        }
        Ok(Self { meta, tensors })
    }

    /// Copy every checkpoint tensor into the store. Names and shapes must match exactly.
    pub fn load_into(&self, store: &ParamStore) -> Result<()> {
        for name in store.names() {
            if !self.tensors.contains_key(name) {
                return Err(Error::Checkpoint(format!("checkpoint lacks `{name}`")));
            }
        }
        for (name, (shape, values)) in &self.tensors {
            store.assign(name, shape, values)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CkptHeader {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, (s, _))| CkptEntry {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, values) in self.tensors.values() {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: CkptHeader = serde_json::from_slice(
            bytes
                .get(20..20 + hlen)
                .ok_or_else(|| Error::Checkpoint("truncated header".into()))?,
        )?;
        let mut offset = 20 + hlen;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload at `{}`", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            tensors.insert(e.name, (e.shape, values));
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seeded() {
        let build = |seed| {
            let mut store = ParamStore::new(DType::F32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut init = Init::new(&mut store, &mut rng);
            Linear::new(&mut init.pp("a"), 3, 2).unwrap();
            store.snapshot().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
        assert!(build(1).contains_key("a.weight"));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1.0, 0.0, 100.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let lse = logsumexp_last(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!((lse[0] - (1f64.exp() + 2f64.exp() + 3f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn linear_handles_leading_dims() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut Init::new(&mut store, &mut rng), 4, 3).unwrap();
        let x = Tensor::ones((2, 5, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 5, 3]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        Block::new(&mut Init::new(&mut store, &mut rng).pp("blk"), 8, 2, 2).unwrap();
        let ck = Checkpoint::from_store(serde_json::json!({"k": 1}), &store).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ctck");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.meta["k"], 1);

        let mut other = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        Block::new(&mut Init::new(&mut other, &mut rng).pp("blk"), 8, 2, 2).unwrap();
        back.load_into(&other).unwrap();
        assert_eq!(other.snapshot().unwrap(), store.snapshot().unwrap());
    }
}
