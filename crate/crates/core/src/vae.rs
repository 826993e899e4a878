//! Motion VAE: an attention encoder that maps a pose sequence to a diagonal
//! Gaussian over a single latent token, and an attention decoder that turns
//! `f*` zero query tokens plus the latent (as cross-attention memory) back
//! into `f*` poses.

use candle_core::{DType, Module, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;

use crate::body::{pose_dim, BodyModel, PoseSequence};
use crate::error::{invalid, Error, Result};
use crate::nn::{
    self, add_tiled, forward_kinematics_tensor, LayerNorm, Linear, ParamStore, TransformerBlock,
    DEVICE,
};
use crate::seeding::{self, Stream};

/// Parameter-name prefixes; the freeze contract hashes these groups.
pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";
const INITIAL_LOG_VAR: f32 = -4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub frames: usize,
    pub joints: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub fps: f32,
}

impl VaeConfig {
    /// 9 layers, 4 heads, 256-wide latent.
    pub fn full_scale(frames: usize) -> Self {
        Self {
            frames,
            joints: 24,
            latent_dim: 256,
            layers: 9,
            heads: 4,
            ff_dim: 1024,
            fps: 30.0,
        }
    }

    pub fn pose_dim(&self) -> usize {
        pose_dim(self.joints)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.joints == 0 || self.layers == 0 {
            return Err(invalid("frames, joints and layers must be ≥ 1"));
        }
        if self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "latent_dim {} must be divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// A single latent `z` of width `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f32>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Diagonal Gaussian `N(mu, diag(sigma²))` for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f32>, sigma: Vec<f32>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(invalid("mu and sigma widths differ"));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) || mu.iter().any(|m| !m.is_finite()) {
            return Err(invalid("posterior needs finite mu and sigma > 0"));
        }
        Ok(Self { mu, sigma })
    }
}

/// Batched posterior parameters as tensors, `[B, D]` each.
#[derive(Debug, Clone)]
pub struct PosteriorTensors {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl PosteriorTensors {
    pub fn sigma(&self) -> candle_core::Result<Tensor> {
        (&self.log_var * 0.5)?.exp()
    }
}

/// `z = mu + sigma ⊙ rho`.
pub fn reparameterize(post: &GaussianPosterior, rho: &[f32]) -> Result<LatentCode> {
    if rho.len() != post.mu.len() {
        return Err(invalid(format!(
            "rho has width {}, posterior {}",
            rho.len(),
            post.mu.len()
        )));
    }
    Ok(LatentCode(
        post.mu
            .iter()
            .zip(&post.sigma)
            .zip(rho)
            .map(|((m, s), r)| m + s * r)
            .collect(),
    ))
}

pub fn reparameterize_tensor(post: &PosteriorTensors, rho: &Tensor) -> candle_core::Result<Tensor> {
    &post.mu + (post.sigma()? * rho)?
}

#[derive(Debug, Clone)]
struct Encoder {
    input: Linear,
    dist_tokens: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    mu_head: Linear,
    log_var_head: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    latent_proj: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    output: Linear,
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    config: VaeConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    pose_mean: Tensor,
    pose_std: Tensor,
}

impl VaeModel {
    pub fn new(config: VaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(seed, Stream::Init);
        let mut store = ParamStore::new(dtype);
        let (d, v) = (config.latent_dim, config.pose_dim());
        let pose_mean = store.buffer("norm.mean", vec![0.0; v], &[v]);
        let pose_std = store.buffer("norm.std", vec![1.0; v], &[v]);
        let encoder = Encoder {
            input: Linear::new(&mut store, "enc.input", v, d, &mut rng),
            dist_tokens: store.normal("enc.dist_tokens", &[2, d], 0.02, &mut rng),
            blocks: (0..config.layers)
                .map(|i| {
                    TransformerBlock::new(
                        &mut store,
                        &format!("enc.block{i}"),
                        d,
                        config.heads,
                        config.ff_dim,
                        false,
                        &mut rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(&mut store, "enc.norm", d),
            mu_head: Linear::new(&mut store, "enc.mu", d, d, &mut rng),
            log_var_head: Linear::with_std(&mut store, "enc.log_var", d, d, 0.02, &mut rng),
        };
        let decoder = Decoder {
            latent_proj: Linear::new(&mut store, "dec.latent", d, d, &mut rng),
            blocks: (0..config.layers)
                .map(|i| {
                    TransformerBlock::new(
                        &mut store,
                        &format!("dec.block{i}"),
                        d,
                        config.heads,
                        config.ff_dim,
                        true,
                        &mut rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(&mut store, "dec.norm", d),
            output: Linear::with_std(&mut store, "dec.output", d, v, 0.02, &mut rng),
        };
        // A narrow initial posterior (σ ≈ 0.14) keeps sampling noise from
        // swamping the decoder early in training.
        store.set("enc.log_var.bias", &vec![INITIAL_LOG_VAR; d])?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            pose_mean,
            pose_std,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Per-channel normalization applied before encoding and undone after decoding.
    pub fn set_normalization(&self, mean: &[f32], std: &[f32]) -> Result<()> {
        let v = self.config.pose_dim();
        if mean.len() != v || std.len() != v {
            return Err(invalid("normalization statistics have the wrong width"));
        }
        self.store.set("norm.mean", mean)?;
        self.store.set("norm.std", std)
    }

    pub fn normalization(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        Ok((
            self.pose_mean.to_dtype(DType::F32)?.to_vec1()?,
            self.pose_std.to_dtype(DType::F32)?.to_vec1()?,
        ))
    }

    /// `[B, F, V]` raw poses → posterior tensors.
    pub fn encode_tensor(&self, poses: &Tensor) -> Result<PosteriorTensors> {
        let (b, f, v) = poses.dims3()?;
        if f != self.config.frames || v != self.config.pose_dim() {
            return Err(invalid(format!(
                "encoder expects [*, {}, {}] poses, got [{b}, {f}, {v}]",
                self.config.frames,
                self.config.pose_dim()
            )));
        }
        let e = &self.encoder;
        let d = self.config.latent_dim;
        let x = poses
            .broadcast_sub(&self.pose_mean)?
            .broadcast_div(&self.pose_std)?;
        let pe = nn::sinusoidal(&positions(f), d, self.dtype())?;
        let motion = add_tiled(&e.input.forward(&x)?, &pe)?;
        let tokens = e.dist_tokens.unsqueeze(0)?.broadcast_as((b, 2, d))?;
        let mut h = Tensor::cat(&[&tokens, &motion], 1)?;
        for block in &e.blocks {
            h = block.forward(&h, None)?;
        }
        let h = e.norm.forward(&h)?;
        let mu = e.mu_head.forward(&h.narrow(1, 0, 1)?.squeeze(1)?)?;
        let log_var = e.log_var_head.forward(&h.narrow(1, 1, 1)?.squeeze(1)?)?;
        Ok(PosteriorTensors { mu, log_var })
    }

    /// `[B, D]` latents → `[B, f*, V]` raw poses.
    pub fn decode_tensor(&self, z: &Tensor, frames: usize) -> Result<Tensor> {
        if frames == 0 {
            return Err(invalid("decode needs f* ≥ 1"));
        }
        let (b, d) = z.dims2()?;
        if d != self.config.latent_dim {
            return Err(invalid(format!(
                "latent width {d}, model uses {}",
                self.config.latent_dim
            )));
        }
        let dec = &self.decoder;
        let memory = dec.latent_proj.forward(z)?.unsqueeze(1)?;
        let pe = nn::sinusoidal(&positions(frames), d, self.dtype())?;
        let mut h = pe
            .unsqueeze(0)?
            .broadcast_as((b, frames, d))?
            .contiguous()?;
        for block in &dec.blocks {
            h = block.forward(&h, Some(&memory))?;
        }
        let out = dec.output.forward(&dec.norm.forward(&h)?)?;
        Ok(out
            .broadcast_mul(&self.pose_std)?
            .broadcast_add(&self.pose_mean)?)
    }

    /// Posterior of one sequence. Deterministic in (sequence, parameters).
    pub fn encode(&self, seq: &PoseSequence) -> Result<GaussianPosterior> {
        let post = self.encode_tensor(&self.sequence_tensor(std::slice::from_ref(seq))?)?;
        let mu = post.mu.to_dtype(DType::F32)?.squeeze(0)?.to_vec1()?;
        let sigma = post.sigma()?.to_dtype(DType::F32)?.squeeze(0)?.to_vec1()?;
        GaussianPosterior::new(mu, sigma)
    }

    /// Posterior means of many sequences, computed in one batch.
    pub fn encode_means(&self, seqs: &[PoseSequence]) -> Result<Vec<LatentCode>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let mu = self
                .encode_tensor(&self.sequence_tensor(chunk)?)?
                .mu
                .to_dtype(DType::F32)?;
            out.extend(mu.to_vec2::<f32>()?.into_iter().map(LatentCode));
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentCode, frames: usize) -> Result<PoseSequence> {
        let zt = Tensor::from_slice(&z.0, (1, z.dim()), &DEVICE)?.to_dtype(self.dtype())?;
        let poses = self.decode_tensor(&zt, frames)?;
        let data = poses
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        PoseSequence::new(data, self.config.joints, self.config.fps)
    }

    pub fn decode_batch(&self, z: &[LatentCode], frames: usize) -> Result<Vec<PoseSequence>> {
        let mut out = Vec::with_capacity(z.len());
        for chunk in z.chunks(64) {
            let flat: Vec<f32> = chunk.iter().flat_map(|c| c.0.iter().copied()).collect();
            let zt = Tensor::from_vec(flat, (chunk.len(), self.config.latent_dim), &DEVICE)?
                .to_dtype(self.dtype())?;
            let poses = self.decode_tensor(&zt, frames)?.to_dtype(DType::F32)?;
            for row in poses.to_vec3::<f32>()? {
                let data = row.into_iter().flatten().collect();
                out.push(PoseSequence::new(
                    data,
                    self.config.joints,
                    self.config.fps,
                )?);
            }
        }
        Ok(out)
    }

    /// Stacks sequences into a `[B, F, V]` tensor, validating shapes.
    pub fn sequence_tensor(&self, seqs: &[PoseSequence]) -> Result<Tensor> {
        stack_sequences(
            seqs,
            self.config.frames,
            self.config.pose_dim(),
            self.dtype(),
        )
    }
}

pub(crate) fn positions(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

pub(crate) fn stack_sequences(
    seqs: &[PoseSequence],
    frames: usize,
    v: usize,
    dtype: DType,
) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut flat = Vec::with_capacity(seqs.len() * frames * v);
    for s in seqs {
        if s.frames() != frames || s.pose_dim() != v {
            return Err(invalid(format!(
                "sequence is {}×{}, model expects {frames}×{v}",
                s.frames(),
                s.pose_dim()
            )));
        }
        flat.extend_from_slice(s.as_slice());
    }
    Ok(Tensor::from_vec(flat, (seqs.len(), frames, v), &DEVICE)?.to_dtype(dtype)?)
}

/// Weights of the ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboWeights {
    pub kl: f64,
    pub fk: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        Self { kl: 1e-4, fk: 1.0 }
    }
}

/// Scalar loss tensors; call `backward` on `total`.
#[derive(Debug, Clone)]
pub struct ElboTerms {
    pub total: Tensor,
    pub recon_pose: Tensor,
    pub recon_fk: Tensor,
    pub kl: Tensor,
}

impl ElboTerms {
    /// `recon_pose + fk·recon_fk`.
    pub fn reconstruction(&self, w: ElboWeights) -> Result<f64> {
        Ok(scalar(&self.recon_pose)? + w.fk * scalar(&self.recon_fk)?)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// KL(N(mu, σ²) ‖ N(0, I)) summed over latent dims, averaged over the batch.
pub fn kl_divergence(post: &PosteriorTensors) -> candle_core::Result<Tensor> {
    let b = post.mu.dim(0)? as f64;
    let per = ((post.mu.sqr()? + post.log_var.exp()?)? - &post.log_var)?;
    (per - 1.0)?.sum_all()? * (0.5 / b)
}

/// Reconstruction (pose-parameter MSE + `fk`·joint MSE) plus `kl`·KL.
pub fn elbo_loss(
    target: &Tensor,
    recon: &Tensor,
    post: &PosteriorTensors,
    weights: ElboWeights,
    body: &BodyModel,
) -> Result<ElboTerms> {
    if target.dims() != recon.dims() {
        return Err(invalid(format!(
            "shape {:?} vs {:?}",
            target.dims(),
            recon.dims()
        )));
    }
    let v = *target
        .dims()
        .last()
        .ok_or_else(|| invalid("scalar poses"))?;
    let recon_pose = (recon - target)?.sqr()?.mean_all()?;
    let rows = target.elem_count() / v;
    let jt = forward_kinematics_tensor(&target.reshape((rows, v))?, body)?;
    let jr = forward_kinematics_tensor(&recon.reshape((rows, v))?, body)?;
    let recon_fk = (jr - jt)?.sqr()?.mean_all()?;
    let kl = kl_divergence(post)?;
    let total = ((&recon_pose + (&recon_fk * weights.fk)?)? + (&kl * weights.kl)?)?;
    Ok(ElboTerms {
        total,
        recon_pose,
        recon_fk,
        kl,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainConfig {
    pub model: VaeConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: ElboWeights,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeStepLog {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Per-channel mean and standard deviation over all frames; near-constant
/// channels get unit scale.
pub fn pose_statistics(seqs: &[PoseSequence]) -> Result<(Vec<f32>, Vec<f32>)> {
    let v = seqs
        .first()
        .ok_or_else(|| invalid("empty dataset"))?
        .pose_dim();
    let mut sum = vec![0f64; v];
    let mut sq = vec![0f64; v];
    let mut n = 0f64;
    for s in seqs {
        for f in 0..s.frames() {
            for (c, x) in s.frame(f).iter().enumerate() {
                sum[c] += *x as f64;
                sq[c] += (*x as f64).powi(2);
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n - m * m).max(0.0);
            if var.sqrt() < 1e-3 {
                1.0
            } else {
                var.sqrt() as f32
            }
        })
        .collect();
    Ok((mean.into_iter().map(|m| m as f32).collect(), std))
}

/// Trains a VAE from scratch. Fully determined by `cfg.seed`.
pub fn train_vae(
    data: &[PoseSequence],
    cfg: &VaeTrainConfig,
    body: &BodyModel,
) -> Result<(VaeModel, Vec<VaeStepLog>)> {
    train_vae_with_dtype(data, cfg, body, DType::F32)
}

pub fn train_vae_with_dtype(
    data: &[PoseSequence],
    cfg: &VaeTrainConfig,
    body: &BodyModel,
    dtype: DType,
) -> Result<(VaeModel, Vec<VaeStepLog>)> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be ≥ 1"));
    }
    let model = VaeModel::new(cfg.model.clone(), cfg.seed, dtype)?;
    let (mean, std) = pose_statistics(data)?;
    model.set_normalization(&mean, &std)?;
    let all = model.sequence_tensor(data)?;
    let mut opt = AdamW::new(
        model.store.trainable_vars(""),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut batch_rng = seeding::rng(cfg.seed, Stream::Batches);
    let mut noise_rng = seeding::rng(cfg.seed, Stream::Noise);
    let mut order: Vec<u32> = Vec::new();
    let bs = cfg.batch_size.min(data.len());
    let d = cfg.model.latent_dim;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut fresh: Vec<u32> = (0..data.len() as u32).collect();
            fresh.shuffle(&mut batch_rng);
            order.extend(fresh);
        }
        let idx: Vec<u32> = order.drain(..bs).collect();
        let batch = all.index_select(&Tensor::new(idx.as_slice(), &DEVICE)?, 0)?;
        let post = model.encode_tensor(&batch)?;
        let rho = Tensor::from_vec(
            seeding::standard_normal(&mut noise_rng, bs * d),
            (bs, d),
            &DEVICE,
        )?
        .to_dtype(dtype)?;
        let z = reparameterize_tensor(&post, &rho)?;
        let recon = model.decode_tensor(&z, cfg.model.frames)?;
        let terms = elbo_loss(&batch, &recon, &post, cfg.weights, body)?;
        let total = scalar(&terms.total)?;
        if !total.is_finite() {
            return Err(Error::Precondition(format!(
                "VAE loss diverged at step {step}"
            )));
        }
        log.push(VaeStepLog {
            step,
            total,
            reconstruction: terms.reconstruction(cfg.weights)?,
            kl: scalar(&terms.kl)?,
        });
        opt.backward_step(&terms.total)?;
    }
    Ok((model, log))
}
