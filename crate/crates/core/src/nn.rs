//! Transformer building blocks on top of candle: an ordered parameter store
//! with deterministic initialization, pre-norm attention layers, a fused
//! softmax with an explicit backward pass, and differentiable forward
//! kinematics used by the reconstruction loss.

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Module,
    Shape, Tensor, Var,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::body::BodyModel;
use crate::error::{Error, Result};

pub(crate) const DEVICE: Device = Device::Cpu;

#[derive(Debug, Clone)]
struct Param {
    name: String,
    var: Var,
    trainable: bool,
}

/// Name and shape of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Ordered collection of named parameters. Insertion order is the
/// serialization order, which keeps checkpoints and hashes stable.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn push(&mut self, name: String, values: Vec<f64>, shape: &[usize], trainable: bool) -> Tensor {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let t = Tensor::from_vec(values, shape, &DEVICE)
            .and_then(|t| t.to_dtype(self.dtype))
            .expect("parameter allocation");
        let var = Var::from_tensor(&t).expect("parameter allocation");
        let tensor = var.as_tensor().clone();
        self.params.push(Param {
            name,
            var,
            trainable,
        });
        tensor
    }

    pub(crate) fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.push(name.into(), values, shape, true)
    }

    pub(crate) fn constant(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Tensor {
        let n = shape.iter().product();
        self.push(name.into(), vec![value; n], shape, true)
    }

    /// Non-trainable buffer (e.g. normalization statistics).
    pub(crate) fn buffer(
        &mut self,
        name: impl Into<String>,
        values: Vec<f64>,
        shape: &[usize],
    ) -> Tensor {
        self.push(name.into(), values, shape, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.var.as_tensor())
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn trainable_vars(&self, prefix: &str) -> Vec<Var> {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn metas(&self) -> Vec<TensorMeta> {
        self.params
            .iter()
            .map(|p| TensorMeta {
                name: p.name.clone(),
                shape: p.var.dims().to_vec(),
            })
            .collect()
    }

    /// All parameters flattened to f32 in store order.
    pub fn to_f32(&self) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for p in &self.params {
            out.extend(
                p.var
                    .as_tensor()
                    .flatten_all()?
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?,
            );
        }
        Ok(out)
    }

    /// Overwrites every parameter from a blob produced by [`ParamStore::to_f32`].
    pub fn load_f32(&self, metas: &[TensorMeta], blob: &[f32]) -> Result<()> {
        if metas.len() != self.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint holds {} tensors, model expects {}",
                metas.len(),
                self.params.len()
            )));
        }
        let mut offset = 0;
        for (meta, p) in metas.iter().zip(&self.params) {
            if meta.name != p.name || meta.shape != p.var.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    meta.name,
                    meta.shape,
                    p.name,
                    p.var.dims()
                )));
            }
            let n: usize = meta.shape.iter().product();
            let slice = blob.get(offset..offset + n).ok_or(Error::Truncated {
                expected: (offset + n) * 4,
                found: blob.len() * 4,
            })?;
            let t =
                Tensor::from_slice(slice, meta.shape.as_slice(), &DEVICE)?.to_dtype(self.dtype)?;
            p.var.set(&t)?;
            offset += n;
        }
        if offset != blob.len() {
            return Err(Error::DimensionMismatch(format!(
                "parameter blob has {} values, model uses {offset}",
                blob.len()
            )));
        }
        Ok(())
    }

    /// Overwrites one tensor in place, keeping its shape.
    pub(crate) fn set(&self, name: &str, values: &[f32]) -> Result<()> {
        let p = self
            .params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        let t = Tensor::from_slice(values, p.var.dims(), &DEVICE)?.to_dtype(self.dtype)?;
        p.var.set(&t)?;
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every parameter under `prefix`.
    pub fn hash(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            let flat = p.var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// `y = x·Wᵀ + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_std(store, name, input, output, 1.0 / (input as f64).sqrt(), rng)
    }

    pub(crate) fn with_std(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.normal(format!("{name}.weight"), &[output, input], std, rng);
        let bias = store.constant(format!("{name}.bias"), &[output], 0.0);
        Self { weight, bias }
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = dims[dims.len() - 1];
        let rows = x.elem_count() / input;
        let y = add_tiled(
            &x.reshape((rows, input))?.matmul(&self.weight.t()?)?,
            &self.bias,
        )?;
        let mut out = dims;
        *out.last_mut().expect("non-scalar input") = self.weight.dim(0)?;
        y.reshape(out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.constant(format!("{name}.gamma"), &[width], 1.0);
        let beta = store.constant(format!("{name}.beta"), &[width], 0.0);
        Self { gamma, beta }
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let normed = x.contiguous()?.apply_op1(Standardize)?;
        add_tiled(&mul_tiled(&normed, &self.gamma)?, &self.beta)
    }
}

/// `x + b` where `b` is tiled over the trailing elements of `x`.
/// Candle's generic broadcast backward reduces through strided sums, which
/// dominates small-model training time, so these ops reduce row-wise.
pub(crate) fn add_tiled(x: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&b.contiguous()?, Tiled::Add)
}

/// `x ⊙ g` where `g` is tiled over the trailing elements of `x`.
pub(crate) fn mul_tiled(x: &Tensor, g: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&g.contiguous()?, Tiled::Mul)
}

#[derive(Clone, Copy)]
enum Tiled {
    Add,
    Mul,
}

/// Sums `x` (viewed as rows of `width`) down to one row.
struct TileSum;

fn tile_map<T: num_traits::Float>(x: &[T], b: &[T], op: Tiled) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(b.len()) {
        match op {
            Tiled::Add => out.extend(row.iter().zip(b).map(|(a, c)| *a + *c)),
            Tiled::Mul => out.extend(row.iter().zip(b).map(|(a, c)| *a * *c)),
        }
    }
    out
}

fn tile_sum<T: num_traits::Float>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in x.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
    out
}

impl CustomOp2 for Tiled {
    fn name(&self) -> &'static str {
        match self {
            Tiled::Add => "egodiff-add-tiled",
            Tiled::Mul => "egodiff-mul-tiled",
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, k) = (l1.shape().elem_count(), l2.shape().elem_count());
        if k == 0 || n % k != 0 || !l1.dims().ends_with(l2.dims()) {
            candle_core::bail!("tiled op: {:?} does not tile {:?}", l2.dims(), l1.dims());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(tile_map(
                contiguous_slice(a, l1)?,
                contiguous_slice(b, l2)?,
                *self,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(tile_map(
                contiguous_slice(a, l1)?,
                contiguous_slice(b, l2)?,
                *self,
            )),
            _ => candle_core::bail!("tiled op: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let sum = |t: &Tensor| -> candle_core::Result<Tensor> {
            let k = arg2.elem_count();
            t.contiguous()?
                .reshape((t.elem_count() / k, k))?
                .apply_op1_no_bwd(&TileSum)?
                .reshape(arg2.shape())
        };
        match self {
            Tiled::Add => Ok((Some(grad.clone()), Some(sum(grad)?))),
            Tiled::Mul => {
                let dx = mul_tiled(grad, arg2)?;
                let dg = sum(&(grad * arg1)?)?;
                Ok((Some(dx), Some(dg)))
            }
        }
    }
}

impl CustomOp1 for TileSum {
    fn name(&self) -> &'static str {
        "egodiff-tile-sum"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let width = layout.dims().last().copied().unwrap_or(1);
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(tile_sum(contiguous_slice(s, layout)?, width)),
            CpuStorage::F64(s) => CpuStorage::F64(tile_sum(contiguous_slice(s, layout)?, width)),
            other => candle_core::bail!("tile sum: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(width)))
    }
}

const LN_EPS: f64 = 1e-5;

/// `(x − mean) / sqrt(var + eps)` over the last axis, fused.
struct Standardize;
struct StandardizeBackward;

fn standardize_rows<T: num_traits::Float>(src: &[T], width: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    let n = T::from(width).expect("width");
    let eps = T::from(LN_EPS).expect("eps");
    for (s, d) in src.chunks_exact(width).zip(dst.chunks_exact_mut(width)) {
        let mean = s.iter().fold(T::zero(), |a, &b| a + b) / n;
        let var = s
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            / n;
        let inv = T::one() / (var + eps).sqrt();
        for (x, y) in s.iter().zip(d.iter_mut()) {
            *y = (*x - mean) * inv;
        }
    }
    dst
}

/// Given input rows and output gradients, `dx = (dy − mean(dy) − y·mean(dy·y)) / σ`.
fn standardize_grad_rows<T: num_traits::Float>(src: &[T], grad: &[T], width: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    let n = T::from(width).expect("width");
    let eps = T::from(LN_EPS).expect("eps");
    let mut y = vec![T::zero(); width];
    for ((s, g), d) in src
        .chunks_exact(width)
        .zip(grad.chunks_exact(width))
        .zip(dst.chunks_exact_mut(width))
    {
        let mean = s.iter().fold(T::zero(), |a, &b| a + b) / n;
        let var = s
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            / n;
        let inv = T::one() / (var + eps).sqrt();
        let (mut mg, mut mgy) = (T::zero(), T::zero());
        for i in 0..width {
            y[i] = (s[i] - mean) * inv;
            mg = mg + g[i];
            mgy = mgy + g[i] * y[i];
        }
        mg = mg / n;
        mgy = mgy / n;
        for i in 0..width {
            d[i] = (g[i] - mg - y[i] * mgy) * inv;
        }
    }
    dst
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "egodiff-standardize"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let width = layout.dims().last().copied().unwrap_or(1);
        let out = match storage {
            CpuStorage::F32(s) => {
                CpuStorage::F32(standardize_rows(contiguous_slice(s, layout)?, width))
            }
            CpuStorage::F64(s) => {
                CpuStorage::F64(standardize_rows(contiguous_slice(s, layout)?, width))
            }
            other => candle_core::bail!("layer norm: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(
            &grad.contiguous()?,
            &StandardizeBackward,
        )?))
    }
}

impl CustomOp2 for StandardizeBackward {
    fn name(&self) -> &'static str {
        "egodiff-standardize-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let width = l1.dims().last().copied().unwrap_or(1);
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(standardize_grad_rows(
                contiguous_slice(a, l1)?,
                contiguous_slice(b, l2)?,
                width,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(standardize_grad_rows(
                contiguous_slice(a, l1)?,
                contiguous_slice(b, l2)?,
                width,
            )),
            _ => candle_core::bail!("layer norm backward: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }
}

struct Softmax;
struct SoftmaxBackward;

fn contiguous_slice<'a, T>(s: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("softmax expects contiguous input"),
    }
}

fn softmax_rows<T: num_traits::Float>(src: &[T], width: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for (s, d) in src.chunks_exact(width).zip(dst.chunks_exact_mut(width)) {
        let max = s.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (x, y) in s.iter().zip(d.iter_mut()) {
            *y = (*x - max).exp();
            sum = sum + *y;
        }
        for y in d.iter_mut() {
            *y = *y / sum;
        }
    }
    dst
}

fn softmax_grad_rows<T: num_traits::Float>(out: &[T], grad: &[T], width: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); out.len()];
    for ((s, g), d) in out
        .chunks_exact(width)
        .zip(grad.chunks_exact(width))
        .zip(dst.chunks_exact_mut(width))
    {
        let dot = s.iter().zip(g).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
        for i in 0..width {
            d[i] = s[i] * (g[i] - dot);
        }
    }
    dst
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "egodiff-softmax"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let width = layout.dims().last().copied().unwrap_or(1);
        let out = match storage {
            CpuStorage::F32(s) => {
                CpuStorage::F32(softmax_rows(contiguous_slice(s, layout)?, width))
            }
            CpuStorage::F64(s) => {
                CpuStorage::F64(softmax_rows(contiguous_slice(s, layout)?, width))
            }
            other => candle_core::bail!("softmax: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(res.apply_op2_no_bwd(&grad, &SoftmaxBackward)?))
    }
}

impl CustomOp2 for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "egodiff-softmax-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let width = l1.dims().last().copied().unwrap_or(1);
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(softmax_grad_rows(
                contiguous_slice(a, l1)?,
                contiguous_slice(b, l2)?,
                width,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(softmax_grad_rows(
                contiguous_slice(a, l1)?,
                contiguous_slice(b, l2)?,
                width,
            )),
            _ => candle_core::bail!("softmax backward: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over the last axis with a fused forward and backward.
pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            heads > 0 && width.is_multiple_of(heads),
            "width {width} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    fn split(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        let hd = w / self.heads;
        x.reshape((b, l, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * self.heads, l, hd))
    }

    /// `x`: `[B, Lq, W]` queries; `memory`: `[B, Lk, W]` keys/values.
    pub fn forward(&self, x: &Tensor, memory: &Tensor) -> candle_core::Result<Tensor> {
        let (b, lq, w) = x.dims3()?;
        let lk = memory.dim(1)?;
        let hd = w / self.heads;
        let v = self.split(&self.v.forward(memory)?)?;
        let out = if lk == 1 {
            // A single key: the attention weights are identically 1.
            v.broadcast_as((b * self.heads, lq, hd))?.contiguous()?
        } else {
            let q = self.split(&self.q.forward(x)?)?;
            let k = self.split(&self.k.forward(memory)?)?;
            let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
            softmax_last_dim(&scores)?.matmul(&v)?
        };
        let out = out
            .reshape((b, self.heads, lq, hd))?
            .transpose(1, 2)?
            .reshape((b, lq, w))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.silu()?)
    }
}

/// Pre-norm block: self-attention, optional cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_hidden: usize,
        with_cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm_self = LayerNorm::new(store, &format!("{name}.norm_self"), width);
        let self_attn =
            MultiHeadAttention::new(store, &format!("{name}.self_attn"), width, heads, rng);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.norm_cross"), width),
                MultiHeadAttention::new(store, &format!("{name}.cross_attn"), width, heads, rng),
            )
        });
        let norm_ff = LayerNorm::new(store, &format!("{name}.norm_ff"), width);
        let ff = FeedForward::new(store, &format!("{name}.ff"), width, ff_hidden, rng);
        Self {
            norm_self,
            self_attn,
            cross,
            norm_ff,
            ff,
        }
    }

    /// Cross-attention is skipped when `memory` is `None` or has no tokens.
    pub fn forward(&self, x: &Tensor, memory: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let mut x = (x + self.self_attn.forward(&h, &h)?)?;
        if let (Some((norm, attn)), Some(mem)) = (&self.cross, memory) {
            if mem.dim(1)? > 0 {
                let h = norm.forward(&x)?;
                x = (&x + attn.forward(&h, mem)?)?;
            }
        }
        let h = self.norm_ff.forward(&x)?;
        &x + self.ff.forward(&h)?
    }
}

/// Sinusoidal embedding of (possibly fractional) positions, `[len, width]`.
pub fn sinusoidal(positions: &[f64], width: usize, dtype: DType) -> candle_core::Result<Tensor> {
    let half = width / 2;
    let mut values = Vec::with_capacity(positions.len() * width);
    for &p in positions {
        for i in 0..width {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10000f64.ln()) * k / half.max(1) as f64).exp();
            values.push(if i < half {
                (p * freq).sin()
            } else {
                (p * freq).cos()
            });
        }
    }
    Tensor::from_vec(values, (positions.len(), width), &DEVICE)?.to_dtype(dtype)
}

type M3 = [[f64; 3]; 3];

fn skew3(v: [f64; 3]) -> M3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn mul3(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            c[i][k] = a[i][0] * b[0][k] + a[i][1] * b[1][k] + a[i][2] * b[2][k];
        }
    }
    c
}

fn mul3_bt(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            c[i][k] = a[i][0] * b[k][0] + a[i][1] * b[k][1] + a[i][2] * b[k][2];
        }
    }
    c
}

fn mul3_at(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            c[i][k] = a[0][i] * b[0][k] + a[1][i] * b[1][k] + a[2][i] * b[2][k];
        }
    }
    c
}

fn inner3(a: &M3, b: &M3) -> f64 {
    (0..3)
        .map(|i| a[i][0] * b[i][0] + a[i][1] * b[i][1] + a[i][2] * b[i][2])
        .sum()
}

/// `R = I + A·K + B·K²` with `A = sinθ/θ`, `B = (1 − cosθ)/θ²`, and the
/// derivatives `A'/θ`, `B'/θ`; Taylor series below θ = 1e-4.
fn rodrigues_coeffs(aa: [f64; 3]) -> (f64, f64, f64, f64) {
    let t2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
    if t2 < 1e-8 {
        return (
            1.0 - t2 / 6.0,
            0.5 - t2 / 24.0,
            -1.0 / 3.0 + t2 / 30.0,
            -1.0 / 12.0 + t2 / 180.0,
        );
    }
    let t = t2.sqrt();
    let (s, c) = t.sin_cos();
    let half = (0.5 * t).sin();
    let one_minus_cos = 2.0 * half * half;
    (
        s / t,
        one_minus_cos / t2,
        (t * c - s) / (t2 * t),
        (t * s - 2.0 * one_minus_cos) / (t2 * t2),
    )
}

fn rodrigues3(aa: [f64; 3]) -> M3 {
    let (a, b, _, _) = rodrigues_coeffs(aa);
    let k = skew3(aa);
    let k2 = mul3(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Pulls a gradient on `R(aa)` back to `aa`.
fn rodrigues3_grad(aa: [f64; 3], g: &M3) -> [f64; 3] {
    let (a, b, ap, bp) = rodrigues_coeffs(aa);
    let k = skew3(aa);
    let k2 = mul3(&k, &k);
    let (gk, gk2) = (inner3(g, &k), inner3(g, &k2));
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ki = skew3(e);
        let (kik, kki) = (mul3(&ki, &k), mul3(&k, &ki));
        *o = aa[i] * (ap * gk + bp * gk2)
            + a * inner3(g, &ki)
            + b * (inner3(g, &kik) + inner3(g, &kki));
    }
    out
}

/// Fused forward kinematics over a batch of poses with an explicit
/// reverse pass; far cheaper than composing per-joint tensor ops.
#[derive(Clone)]
struct Fk {
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
}

struct FkBackward(Fk);

impl Fk {
    fn new(body: &BodyModel) -> Self {
        Self {
            parents: body.parents().to_vec(),
            offsets: body
                .rest_offsets()
                .iter()
                .map(|o| [o.x, o.y, o.z])
                .collect(),
        }
    }

    fn pose_parts(&self, pose: &[f64]) -> (Vec<[f64; 3]>, Vec<M3>, Vec<M3>, Vec<[f64; 3]>) {
        let j = self.parents.len();
        let mut aa = Vec::with_capacity(j);
        let mut local = Vec::with_capacity(j);
        let mut global: Vec<M3> = Vec::with_capacity(j);
        let mut pos: Vec<[f64; 3]> = Vec::with_capacity(j);
        for joint in 0..j {
            let a = [pose[3 * joint], pose[3 * joint + 1], pose[3 * joint + 2]];
            let r = rodrigues3(a);
            match self.parents[joint] {
                None => {
                    pos.push([pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]);
                    global.push(r);
                }
                Some(p) => {
                    let (g, o) = (&global[p], self.offsets[joint]);
                    let mut x = pos[p];
                    for (r, xr) in x.iter_mut().enumerate() {
                        *xr += g[r][0] * o[0] + g[r][1] * o[1] + g[r][2] * o[2];
                    }
                    pos.push(x);
                    global.push(mul3(g, &r));
                }
            }
            aa.push(a);
            local.push(r);
        }
        (aa, local, global, pos)
    }

    fn forward(&self, poses: &[f64]) -> Vec<f64> {
        let v = 3 * self.parents.len() + 3;
        let mut out = Vec::with_capacity(poses.len() / v * (v - 3));
        for pose in poses.chunks_exact(v) {
            out.extend(self.pose_parts(pose).3.into_iter().flatten());
        }
        out
    }

    fn backward(&self, poses: &[f64], grad: &[f64]) -> Vec<f64> {
        let j = self.parents.len();
        let v = 3 * j + 3;
        let mut out = vec![0.0; poses.len()];
        for ((pose, g), dpose) in poses
            .chunks_exact(v)
            .zip(grad.chunks_exact(3 * j))
            .zip(out.chunks_exact_mut(v))
        {
            let (aa, local, global, _) = self.pose_parts(pose);
            let mut dpos: Vec<[f64; 3]> = g.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let mut dglob = vec![[[0.0; 3]; 3]; j];
            for joint in (0..j).rev() {
                let dr = match self.parents[joint] {
                    None => {
                        dpose[3 * j..].copy_from_slice(&dpos[joint]);
                        dglob[joint]
                    }
                    Some(p) => {
                        let o = self.offsets[joint];
                        let dp = dpos[joint];
                        let back = mul3_bt(&dglob[joint], &local[joint]);
                        for r in 0..3 {
                            dpos[p][r] += dp[r];
                            for c in 0..3 {
                                dglob[p][r][c] += dp[r] * o[c] + back[r][c];
                            }
                        }
                        mul3_at(&global[p], &dglob[joint])
                    }
                };
                dpose[3 * joint..3 * joint + 3].copy_from_slice(&rodrigues3_grad(aa[joint], &dr));
            }
        }
        out
    }
}

fn storage_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    Ok(match storage {
        CpuStorage::F32(s) => contiguous_slice(s, layout)?
            .iter()
            .map(|&x| x as f64)
            .collect(),
        CpuStorage::F64(s) => contiguous_slice(s, layout)?.to_vec(),
        other => candle_core::bail!("forward kinematics: unsupported dtype {:?}", other.dtype()),
    })
}

fn storage_like(template: &CpuStorage, values: Vec<f64>) -> CpuStorage {
    match template {
        CpuStorage::F32(_) => CpuStorage::F32(values.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(values),
    }
}

impl CustomOp1 for Fk {
    fn name(&self) -> &'static str {
        "egodiff-fk"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = layout.dims()[0];
        let out = self.forward(&storage_f64(storage, layout)?);
        Ok((
            storage_like(storage, out),
            Shape::from((n, self.parents.len(), 3)),
        ))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(
            &grad.contiguous()?,
            &FkBackward(self.clone()),
        )?))
    }
}

impl CustomOp2 for FkBackward {
    fn name(&self) -> &'static str {
        "egodiff-fk-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = self
            .0
            .backward(&storage_f64(s1, l1)?, &storage_f64(s2, l2)?);
        Ok((storage_like(s1, out), l1.shape().clone()))
    }
}

/// Differentiable forward kinematics: `[N, V]` poses to `[N, J, 3]` joints.
pub fn forward_kinematics_tensor(pose: &Tensor, body: &BodyModel) -> candle_core::Result<Tensor> {
    let (_, v) = pose.dims2()?;
    let j = body.joint_count();
    if v != 3 * j + 3 {
        candle_core::bail!("pose width {v} does not match body model with {j} joints");
    }
    pose.contiguous()?.apply_op1(Fk::new(body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{forward_kinematics, BodyModel};
    use rand::SeedableRng;

    #[test]
    fn fused_softmax_matches_reference_and_gradient() {
        let x = Tensor::new(&[[0.3f64, -1.2, 2.0, 0.1], [5.0, 5.0, -3.0, 0.0]], &DEVICE).unwrap();
        let s = softmax_last_dim(&x).unwrap().to_vec2::<f64>().unwrap();
        let raw = x.to_vec2::<f64>().unwrap();
        for (row, out) in raw.iter().zip(&s) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (a, b) in row.iter().zip(out) {
                assert!((a.exp() / z - b).abs() < 1e-14);
            }
        }
        // gradient of Σ w·softmax(x) against finite differences
        let w = Tensor::new(&[[1.0f64, 2.0, -1.0, 0.5], [0.0, 3.0, 1.0, -2.0]], &DEVICE).unwrap();
        let var = Var::from_tensor(&x).unwrap();
        let loss = (softmax_last_dim(var.as_tensor()).unwrap() * &w)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let g = grads
            .get(var.as_tensor())
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        let f = |m: &Vec<Vec<f64>>| -> f64 {
            let t = Tensor::new(m.clone(), &DEVICE).unwrap();
            (softmax_last_dim(&t).unwrap() * &w)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        for r in 0..2 {
            for c in 0..4 {
                let mut p = raw.clone();
                let mut m = raw.clone();
                p[r][c] += 1e-6;
                m[r][c] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - g[r][c]).abs() < 1e-8, "{fd} vs {}", g[r][c]);
            }
        }
    }

    #[test]
    fn tiled_ops_match_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Var::from_tensor(&Tensor::from_vec(v, shape, &DEVICE).unwrap()).unwrap()
        };
        let x = rand(&[3, 4, 5]);
        let b = rand(&[4, 5]);
        let w = rand(&[3, 4, 5]);
        let grads = |y: Tensor| {
            let g = (y * w.as_tensor())
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let flat = |t: &Tensor| {
                g.get(t)
                    .unwrap()
                    .flatten_all()
                    .unwrap()
                    .to_vec1::<f64>()
                    .unwrap()
            };
            (flat(x.as_tensor()), flat(b.as_tensor()))
        };
        let pairs = [
            (add_tiled(&x, &b).unwrap(), x.broadcast_add(&b).unwrap()),
            (mul_tiled(&x, &b).unwrap(), x.broadcast_mul(&b).unwrap()),
        ];
        for (fast, reference) in pairs {
            let diff = (&fast - &reference)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(diff < 1e-12);
            let (gx, gb) = grads(fast);
            let (rx, rb) = grads(reference);
            for (a, c) in gx.iter().chain(&gb).zip(rx.iter().chain(&rb)) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = Tensor::from_vec(
            (0..12).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>(),
            (3, 4),
            &DEVICE,
        )
        .unwrap();
        let f = |v: &[f64]| -> f64 {
            let t = Tensor::from_vec(v.to_vec(), (3, 4), &DEVICE).unwrap();
            (t.apply_op1(Standardize).unwrap() * &w)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let var =
            Var::from_tensor(&Tensor::from_vec(raw.clone(), (3, 4), &DEVICE).unwrap()).unwrap();
        let y = var.as_tensor().apply_op1(Standardize).unwrap();
        let rows = y.to_vec2::<f64>().unwrap();
        for r in &rows {
            let m: f64 = r.iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
        let g = (y * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..12 {
            let (mut p, mut m) = (raw.clone(), raw.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn tensor_fk_matches_scalar_fk() {
        let body = BodyModel::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<f64> = (0..3 * 75).map(|_| rng.random_range(-1.5..1.5)).collect();
        let t = Tensor::from_vec(poses.clone(), (3, 75), &DEVICE).unwrap();
        let joints = forward_kinematics_tensor(&t, &body)
            .unwrap()
            .to_vec3::<f64>()
            .unwrap();
        for n in 0..3 {
            let pose: Vec<f32> = poses[n * 75..(n + 1) * 75]
                .iter()
                .map(|&v| v as f32)
                .collect();
            let pose64: Vec<f64> = pose.iter().map(|&v| v as f64).collect();
            let t1 = Tensor::from_vec(pose64, (1, 75), &DEVICE).unwrap();
            let tj = forward_kinematics_tensor(&t1, &body)
                .unwrap()
                .to_vec3::<f64>()
                .unwrap();
            let sj = forward_kinematics(&pose, &body).unwrap();
            for (a, b) in tj[0].iter().zip(&sj) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
            assert_eq!(joints[n].len(), 24);
        }
    }

    #[test]
    fn tensor_fk_gradient_matches_finite_differences() {
        let body = BodyModel::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut poses: Vec<f64> = (0..2 * 75).map(|_| rng.random_range(-1.2..1.2)).collect();
        // One near-zero rotation exercises the series branch.
        poses[6..9].copy_from_slice(&[1e-6, -2e-6, 5e-7]);
        let w: Vec<f64> = (0..2 * 72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt = Tensor::from_vec(w, (2, 24, 3), &DEVICE).unwrap();
        let f = |p: &[f64]| -> f64 {
            let t = Tensor::from_vec(p.to_vec(), (2, 75), &DEVICE).unwrap();
            (forward_kinematics_tensor(&t, &body).unwrap() * &wt)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let var =
            Var::from_tensor(&Tensor::from_vec(poses.clone(), (2, 75), &DEVICE).unwrap()).unwrap();
        let loss = (forward_kinematics_tensor(var.as_tensor(), &body).unwrap() * &wt)
            .unwrap()
            .sum_all()
            .unwrap();
        let g = loss
            .backward()
            .unwrap()
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..poses.len() {
            let (mut p, mut m) = (poses.clone(), poses.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn param_store_roundtrip_and_hash() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32);
        let _ = Linear::new(&mut store, "a", 4, 3, &mut rng);
        let _ = LayerNorm::new(&mut store, "b", 3);
        let blob = store.to_f32().unwrap();
        assert_eq!(blob.len(), store.scalar_count());
        let h = store.hash("").unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut other = ParamStore::new(DType::F32);
        let _ = Linear::new(&mut other, "a", 4, 3, &mut rng2);
        let _ = LayerNorm::new(&mut other, "b", 3);
        assert_ne!(other.hash("").unwrap(), h);
        other.load_f32(&store.metas(), &blob).unwrap();
        assert_eq!(other.hash("").unwrap(), h);
        assert!(other.load_f32(&store.metas(), &blob[1..]).is_err());
    }
}
