//! Parameter storage and the handful of layers the encoders need, written
//! directly against candle tensors. Activations are channels-last
//! (`[B, H, W, C]`) so convolutions reduce to plain matmuls; candle's own
//! conv kernels are not used because their weight gradients are wrong for
//! batches larger than one.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp3, DType, Device, Layout, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

pub type TensorMap = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Var> {
        self.buffers.get(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable variables whose names start with `prefix`.
    pub fn trainable(&self, prefix: &str) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Shallow view of every tensor, parameters and buffers alike.
    pub fn tensors(&self) -> TensorMap {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Deep copy of every tensor.
    pub fn snapshot(&self) -> Result<TensorMap> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every stored tensor whose name appears in `values`.
    pub fn restore(&self, values: &TensorMap) -> Result<()> {
        for (k, v) in self.params.iter().chain(&self.buffers) {
            if let Some(t) = values.get(k) {
                v.set(t)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and f32 bytes of everything under `prefix`.
    pub fn digest(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.params.iter().chain(&self.buffers) {
            if !k.starts_with(prefix) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(format!("{:?}", v.dims()).as_bytes());
            let values: Vec<f32> = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for x in values {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Half-width of the Xavier/Glorot uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `len` draws of U[-1, 1] scaled by `xavier_bound(fan_in, fan_out)`.
pub fn xavier_init<R: Rng + ?Sized>(len: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Vec<f32>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Contract("Xavier fan-in and fan-out must be positive".into()));
    }
    let s = xavier_bound(fan_in, fan_out);
    Ok((0..len)
        .map(|_| (rng.random_range(-1.0..=1.0f64) * s) as f32)
        .collect())
}

/// Creates parameters, either freshly initialized from a seeded stream or
/// copied from `source` when it holds a tensor of the same name.
pub struct ParamBuilder<'a> {
    store: ParamStore,
    rng: ChaCha8Rng,
    device: Device,
    source: Option<&'a TensorMap>,
    required_prefix: Option<String>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            source: None,
            required_prefix: None,
        }
    }

    /// Copy any name present in `source`; names under `required_prefix`
    /// must be present.
    pub fn with_source(mut self, source: &'a TensorMap, required_prefix: Option<&str>) -> Self {
        self.source = Some(source);
        self.required_prefix = required_prefix.map(str::to_owned);
        self
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn sourced(&self, name: &str, shape: &[usize]) -> Result<Option<Var>> {
        if let Some(t) = self.source.and_then(|s| s.get(name)) {
            if t.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?} does not match {shape:?}",
                    t.dims()
                )));
            }
            return Ok(Some(Var::from_tensor(&t.to_dtype(DType::F32)?.copy()?)?));
        }
        if self
            .required_prefix
            .as_deref()
            .is_some_and(|p| name.starts_with(p))
        {
            return Err(Error::Checkpoint(format!("{name} missing from source weights")));
        }
        Ok(None)
    }

    fn insert(&mut self, name: &str, var: Var, buffer: bool) -> Result<Var> {
        let map = if buffer { &mut self.store.buffers } else { &mut self.store.params };
        if map.insert(name.to_owned(), var.clone()).is_some() {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        Ok(var)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f32, buffer: bool) -> Result<Var> {
        let var = match self.sourced(name, shape)? {
            Some(v) => v,
            None => Var::from_tensor(&Tensor::full(value, shape, &self.device)?)?,
        };
        self.insert(name, var, buffer)
    }

    fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Var> {
        // Always draw, so the stream position does not depend on `source`.
        let len = shape.iter().product();
        let values = xavier_init(len, fan_in, fan_out, &mut self.rng)?;
        let var = match self.sourced(name, shape)? {
            Some(v) => v,
            None => Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?,
        };
        self.insert(name, var, false)
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// Positions `start, start + stride, ...` (`count` of them) along `dim`,
/// zero-padding the end when the last window runs past it.
fn take_strided(x: &Tensor, dim: usize, start: usize, count: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.narrow(dim, start, count)?);
    }
    let need = count * stride;
    let avail = x.dim(dim)? - start;
    let x = if avail < need { x.pad_with_zeros(dim, 0, need - avail)? } else { x.clone() };
    let mut shape = x.dims().to_vec();
    shape[dim] = count;
    shape.insert(dim + 1, stride);
    Ok(x.narrow(dim, start, need)?.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// 2-D convolution on channels-last activations `[B, H, W, C]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, kh, kw]`, the usual layout for checkpoints.
    weight: Var,
    bias: Option<Var>,
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let kk = kernel * kernel;
        let weight = b.xavier(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kk,
            out_channels * kk,
        )?;
        let bias = if bias {
            Some(b.constant(&format!("{name}.bias"), &[out_channels], 0.0, false)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
        })
    }

    /// Each output row only visits kernel rows that overlap real input rows
    /// (frames are two rows tall, so most of a square kernel sees padding).
    /// Every kernel column is then one matmul over `[B * W', n * C]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Contract(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        let (kh, kw) = self.kernel;
        let (oh, ow) = self.output_hw((h, w));
        let o = self.out_channels;
        let xp = if self.padding > 0 { x.pad_with_zeros(2, self.padding, self.padding)? } else { x.clone() };
        let weight = self.weight.as_tensor();
        let mut rows = Vec::with_capacity(oh);
        for r in 0..oh {
            let top = (r * self.stride) as isize - self.padding as isize;
            let first = top.max(0) as usize;
            let last = ((top + kh as isize).min(h as isize)) as usize;
            let n = last - first;
            let k0 = (first as isize - top) as usize;
            let xr = xp.narrow(1, first, n)?;
            let mut acc: Option<Tensor> = None;
            for j in 0..kw {
                let tap = take_strided(&xr, 2, j, ow, self.stride)?;
                let cols = if n == 1 {
                    tap.reshape((b * ow, c))?
                } else {
                    tap.permute((0, 2, 1, 3))?.reshape((b * ow, n * c))?
                };
                let wj = weight
                    .narrow(2, k0, n)?
                    .narrow(3, j, 1)?
                    .squeeze(3)?
                    .permute((2, 1, 0))?
                    .reshape((n * c, o))?;
                let term = cols.matmul(&wj)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
            rows.push(acc.expect("kernel width >= 1").reshape((b, 1, ow, o))?);
        }
        let y = if rows.len() == 1 { rows.pop().unwrap() } else { Tensor::cat(&rows, 1)? };
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(bias.as_tensor())?),
            None => Ok(y),
        }
    }

    pub fn output_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        let o = |n: usize, k: usize| (n + 2 * self.padding - k) / self.stride + 1;
        (o(h, self.kernel.0), o(w, self.kernel.1))
    }

    /// Multiply-accumulates for one example of spatial size `hw`.
    pub fn macs(&self, hw: (usize, usize)) -> u64 {
        let (oh, ow) = self.output_hw(hw);
        (oh * ow * self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1) as u64
    }
}

fn contiguous_f32<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    match (s, l.contiguous_offsets()) {
        (CpuStorage::F32(v), Some((a, b))) => Ok(&v[a..b]),
        _ => candle_core::bail!("batch norm expects contiguous f32 input"),
    }
}

/// Fused `gamma * (x - mean) * inv_std + beta` over `[N, C]`, with the
/// backward pass written out by hand. With `batch_stats` the mean and
/// variance are functions of `x` and the input gradient accounts for that.
struct BatchNormOp {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1)?;
        let gamma = contiguous_f32(s2, l2)?;
        let beta = contiguous_f32(s3, l3)?;
        let c = gamma.len();
        let out: Vec<f32> = x
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let j = k % c;
                ((v as f64 - self.mean[j]) * self.inv_std[j]) as f32 * gamma[j] + beta[j]
            })
            .collect();
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let xv: Vec<f32> = x.flatten_all()?.to_vec1()?;
        let g: Vec<f32> = grad.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let gam: Vec<f32> = gamma.to_vec1()?;
        let c = gam.len();
        let n = xv.len() / c;
        let xhat = |k: usize| (xv[k] as f64 - self.mean[k % c]) * self.inv_std[k % c];
        let mut sg = vec![0.0f64; c];
        let mut sgx = vec![0.0f64; c];
        for k in 0..xv.len() {
            sg[k % c] += g[k] as f64;
            sgx[k % c] += g[k] as f64 * xhat(k);
        }
        let dx: Vec<f32> = (0..xv.len())
            .map(|k| {
                let j = k % c;
                let scale = gam[j] as f64 * self.inv_std[j];
                let v = if self.batch_stats {
                    g[k] as f64 - sg[j] / n as f64 - xhat(k) * sgx[j] / n as f64
                } else {
                    g[k] as f64
                };
                (scale * v) as f32
            })
            .collect();
        let to = |v: Vec<f64>| Tensor::from_vec(v.into_iter().map(|e| e as f32).collect::<Vec<f32>>(), c, beta.device());
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), x.device())?),
            Some(to(sgx)?),
            Some(to(sg)?),
        ))
    }
}

/// Batch normalization over the last axis of channels-last activations.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: b.constant(&format!("{name}.weight"), &[channels], 1.0, false)?,
            beta: b.constant(&format!("{name}.bias"), &[channels], 0.0, false)?,
            running_mean: b.constant(&format!("{name}.running_mean"), &[channels], 0.0, true)?,
            running_var: b.constant(&format!("{name}.running_var"), &[channels], 1.0, true)?,
            channels,
        })
    }

    /// In training mode batch statistics are used and the running estimates
    /// updated; otherwise the running estimates are used.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.channels;
        if x.dims().last() != Some(&c) {
            return Err(Error::Contract(format!("batch norm over {c} channels got {:?}", x.dims())));
        }
        let flat = x.contiguous()?.reshape((x.elem_count() / c, c))?;
        let n = flat.dim(0)?;
        let (mean, var) = if train {
            let v: Vec<f32> = flat.flatten_all()?.to_vec1()?;
            let mut mean = vec![0.0f64; c];
            for (k, &e) in v.iter().enumerate() {
                mean[k % c] += e as f64;
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0f64; c];
            for (k, &e) in v.iter().enumerate() {
                let d = e as f64 - mean[k % c];
                var[k % c] += d * d;
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let blend = |run: &Var, batch: &[f64], scale: f64| -> Result<()> {
                let old: Vec<f32> = run.as_tensor().to_vec1()?;
                let new: Vec<f32> = old
                    .iter()
                    .zip(batch)
                    .map(|(&o, &b)| ((1.0 - BN_MOMENTUM) * o as f64 + BN_MOMENTUM * b * scale) as f32)
                    .collect();
                run.set(&Tensor::from_vec(new, c, run.device())?)?;
                Ok(())
            };
            blend(&self.running_mean, &mean, 1.0)?;
            blend(&self.running_var, &var, unbiased)?;
            (mean, var)
        } else {
            let m: Vec<f32> = self.running_mean.as_tensor().to_vec1()?;
            let v: Vec<f32> = self.running_var.as_tensor().to_vec1()?;
            (m.into_iter().map(f64::from).collect(), v.into_iter().map(f64::from).collect())
        };
        let op = BatchNormOp {
            mean,
            inv_std: var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
            batch_stats: train,
        };
        let y = flat.apply_op3(self.gamma.as_tensor(), self.beta.as_tensor(), op)?;
        Ok(y.reshape(x.dims())?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        let weight = b.xavier(&format!("{name}.weight"), &[out_features, in_features], in_features, out_features)?;
        let bias = if bias {
            Some(b.constant(&format!("{name}.bias"), &[out_features], 0.0, false)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }
}

/// 3x3 / stride 2 / pad 1 max pooling over `[B, H, W, C]` for non-negative
/// inputs (zero padding is then equivalent to -inf padding).
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    let (oh, ow) = max_pool_output_hw((h, w));
    let xp = x.pad_with_zeros(2, 1, 1)?;
    let mut rows = Vec::with_capacity(oh);
    for r in 0..oh {
        let first = (2 * r).saturating_sub(1);
        let last = (2 * r + 2).min(h);
        let mut m = xp.narrow(1, first, 1)?;
        for i in first + 1..last {
            m = m.maximum(&xp.narrow(1, i, 1)?)?;
        }
        let mut out = take_strided(&m, 2, 0, ow, 2)?;
        for j in 1..3 {
            out = out.maximum(&take_strided(&m, 2, j, ow, 2)?)?;
        }
        rows.push(out);
    }
    Ok(if rows.len() == 1 { rows.pop().unwrap() } else { Tensor::cat(&rows, 1)? })
}

pub fn max_pool_output_hw((h, w): (usize, usize)) -> (usize, usize) {
    ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1)
}

/// Mean over the spatial axes: [B, H, W, C] -> [B, C].
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let flat = x.reshape((b, h * w, c))?;
    Ok((flat.sum(1)? / (h * w) as f64)?)
}
