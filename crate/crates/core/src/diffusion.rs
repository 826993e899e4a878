//! Latent diffusion: linear noise schedule, closed-form forward noising, an
//! attention denoiser that predicts the injected noise, and a deterministic
//! few-step sampler.

use candle_core::{DType, Module, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::conditioning::{
    stack_clouds, subsample_pointcloud, CondFlags, ConditionBundle, SceneEncoder,
    SceneEncoderConfig, ScenePointCloud, SCENE_PREFIX,
};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, LayerNorm, Linear, ParamStore, TransformerBlock, DEVICE};
use crate::seeding::{self, Stream};
use crate::vae::{scalar, LatentCode, VaeModel, ENCODER_PREFIX};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t == 0 {
            return Err(invalid("schedule needs T ≥ 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// 1000 steps, beta 1e-4 → 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("static schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `ᾱ_t` for 1-based `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// `z_t = √ᾱ_t·z0 + √(1 − ᾱ_t)·eps`.
pub fn q_sample(
    z0: &LatentCode,
    t: usize,
    eps: &[f32],
    sched: &NoiseSchedule,
) -> Result<LatentCode> {
    if eps.len() != z0.dim() {
        return Err(invalid(format!(
            "eps width {} vs latent {}",
            eps.len(),
            z0.dim()
        )));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(LatentCode(
        z0.0.iter()
            .zip(eps)
            .map(|(z, e)| (a * *z as f64 + b * *e as f64) as f32)
            .collect(),
    ))
}

/// Batched `q_sample` with a per-row timestep.
pub fn q_sample_tensor(
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let b = z0.dim(0)?;
    if t.len() != b {
        return Err(invalid("one timestep per row required"));
    }
    let mut a = Vec::with_capacity(b);
    let mut s = Vec::with_capacity(b);
    for &ti in t {
        let ab = sched.alpha_bar(ti)?;
        a.push(ab.sqrt());
        s.push((1.0 - ab).sqrt());
    }
    let col = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, (b, 1), &DEVICE)?.to_dtype(z0.dtype())?)
    };
    Ok((z0.broadcast_mul(&col(a)?)? + eps.broadcast_mul(&col(s)?)?)?)
}

/// Anything that predicts the noise in a batch of noised latents.
pub trait EpsPredictor {
    fn latent_dim(&self) -> usize;
    /// All rows share the timestep `t`; `cond` has one bundle per row.
    fn predict_eps(
        &self,
        z_t: &[Vec<f64>],
        t: usize,
        cond: &[ConditionBundle],
    ) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(invalid("denoiser widths and depth must be ≥ 1"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Transformer over the single latent token: timestep embedding added to
/// the projected latent, self-attention, cross-attention against the
/// conditioning tokens, feed-forward.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    input: Linear,
    time_in: Linear,
    time_out: Linear,
    cond_proj: Linear,
    source_emb: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    output: Linear,
}

/// Conditioning tokens for a batch: `[B, K, D]` plus the source type of each of the `K` slots.
#[derive(Debug, Clone)]
pub struct CondTensor {
    pub tokens: Tensor,
    pub sources: Vec<usize>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(seeding::child_seed(seed, 0xd1), Stream::Init);
        let mut store = ParamStore::new(dtype);
        let (d, h) = (config.latent_dim, config.hidden);
        let input = Linear::new(&mut store, "den.input", d, h, &mut rng);
        let time_in = Linear::new(&mut store, "den.time_in", h, h, &mut rng);
        let time_out = Linear::new(&mut store, "den.time_out", h, h, &mut rng);
        let cond_proj = Linear::new(&mut store, "den.cond_proj", d, h, &mut rng);
        let source_emb = store.normal("den.source_emb", &[2, h], 0.02, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &format!("den.block{i}"),
                    h,
                    config.heads,
                    config.ff_dim,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(&mut store, "den.norm", h);
        let output = Linear::with_std(&mut store, "den.output", h, d, 0.02, &mut rng);
        Ok(Self {
            config,
            store,
            input,
            time_in,
            time_out,
            cond_proj,
            source_emb,
            blocks,
            norm,
            output,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `z_t`: `[B, D]`; returns predicted noise `[B, D]`.
    pub fn forward(&self, z_t: &Tensor, t: &[usize], cond: Option<&CondTensor>) -> Result<Tensor> {
        let (b, d) = z_t.dims2()?;
        if d != self.config.latent_dim || t.len() != b {
            return Err(invalid(format!(
                "denoiser input [{b}, {d}] with {} timesteps",
                t.len()
            )));
        }
        let pos: Vec<f64> = t.iter().map(|&x| x as f64).collect();
        let temb = nn::sinusoidal(&pos, self.config.hidden, self.dtype())?;
        let temb = self
            .time_out
            .forward(&self.time_in.forward(&temb)?.silu()?)?;
        let x = (self.input.forward(z_t)? + temb)?.unsqueeze(1)?;
        let memory = match cond {
            Some(c) if !c.sources.is_empty() => {
                let (cb, k, cd) = c.tokens.dims3()?;
                if cb != b || cd != d || k != c.sources.len() {
                    return Err(invalid(format!(
                        "condition tokens [{cb}, {k}, {cd}] for batch {b}"
                    )));
                }
                let idx = Tensor::from_vec(
                    c.sources.iter().map(|&s| s as u32).collect::<Vec<_>>(),
                    k,
                    &DEVICE,
                )?;
                let types = self.source_emb.index_select(&idx, 0)?;
                Some(self.cond_proj.forward(&c.tokens)?.broadcast_add(&types)?)
            }
            _ => None,
        };
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(&h, memory.as_ref())?;
        }
        Ok(self.output.forward(&self.norm.forward(&h)?)?.squeeze(1)?)
    }
}

impl EpsPredictor for Denoiser {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn predict_eps(
        &self,
        z_t: &[Vec<f64>],
        t: usize,
        cond: &[ConditionBundle],
    ) -> Result<Vec<Vec<f64>>> {
        let b = z_t.len();
        if cond.len() != b {
            return Err(invalid("one condition bundle per latent required"));
        }
        let d = self.config.latent_dim;
        let flat: Vec<f64> = z_t.iter().flatten().copied().collect();
        let z = Tensor::from_vec(flat, (b, d), &DEVICE)?.to_dtype(self.dtype())?;
        let cond_t = bundles_to_tensor(cond, d, self.dtype())?;
        let out = self.forward(&z, &vec![t; b], cond_t.as_ref())?;
        Ok(out.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// Packs bundles that share one flag set into a [`CondTensor`].
pub fn bundles_to_tensor(
    cond: &[ConditionBundle],
    d: usize,
    dtype: DType,
) -> Result<Option<CondTensor>> {
    let first = match cond.first() {
        Some(c) if !c.is_empty() => c,
        _ => {
            if cond.iter().any(|c| !c.is_empty()) {
                return Err(invalid("mixed conditioning flags within one batch"));
            }
            return Ok(None);
        }
    };
    let k = first.len();
    let mut flat = Vec::with_capacity(cond.len() * k * d);
    for c in cond {
        if c.flags() != first.flags() || c.width() != Some(d) {
            return Err(invalid(
                "condition bundles in a batch must share flags and width",
            ));
        }
        for tok in c.tokens() {
            flat.extend_from_slice(&tok.0);
        }
    }
    let tokens = Tensor::from_vec(flat, (cond.len(), k, d), &DEVICE)?.to_dtype(dtype)?;
    Ok(Some(CondTensor {
        tokens,
        sources: first.source_types(),
    }))
}

/// Batch mean of `‖eps − ε̂(z_t, t, c)‖²` summed over latent dimensions.
pub fn diffusion_loss(
    model: &Denoiser,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    cond: Option<&CondTensor>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let z_t = q_sample_tensor(z0, t, eps, sched)?;
    let pred = model.forward(&z_t, t, cond)?;
    let b = z0.dim(0)? as f64;
    Ok(((eps - pred)?.sqr()?.sum_all()? / b)?)
}

/// Sampler timesteps: `S` values spaced uniformly from `T` down to 1.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(invalid(format!(
            "inference steps {steps} outside [1, {total}]"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    Ok((0..steps)
        .map(|i| total - ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize)
        .collect())
}

/// Deterministic (η = 0) sampling from a given starting latent. The update
/// runs in f64; the last step returns the clean estimate `ẑ0`.
pub fn ddim_from<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    steps: usize,
    cond: &[ConditionBundle],
    start: Vec<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let ts = ddim_timesteps(sched.steps(), steps)?;
    let mut z = start;
    for (i, &t) in ts.iter().enumerate() {
        let eps = model.predict_eps(&z, t, cond)?;
        let ab = sched.alpha_bar(t)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let next = ts.get(i + 1).map(|&tp| sched.alpha_bar(tp)).transpose()?;
        for (zr, er) in z.iter_mut().zip(&eps) {
            for (zv, ev) in zr.iter_mut().zip(er) {
                let x0 = (*zv - sb * ev) / sa;
                *zv = match next {
                    Some(abp) => abp.sqrt() * x0 + (1.0 - abp).sqrt() * ev,
                    None => x0,
                };
            }
        }
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "sampler produced non-finite values at t = {t}"
            )));
        }
    }
    Ok(z)
}

/// Initial latent `z_T ~ N(0, I)` drawn from `seed`.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f64> {
    seeding::standard_normal_f64(&mut seeding::rng(seed, Stream::Sampling), dim)
}

/// One sample per `(bundle, seed)` pair.
pub fn ddim_sample_batch<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    steps: usize,
    cond: &[ConditionBundle],
    seeds: &[u64],
) -> Result<Vec<LatentCode>> {
    if cond.len() != seeds.len() {
        return Err(invalid("one seed per condition bundle required"));
    }
    let start = seeds
        .iter()
        .map(|&s| initial_noise(s, model.latent_dim()))
        .collect();
    let z = ddim_from(model, sched, steps, cond, start)?;
    Ok(z.into_iter()
        .map(|r| LatentCode(r.into_iter().map(|v| v as f32).collect()))
        .collect())
}

pub fn ddim_sample<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    steps: usize,
    cond: &ConditionBundle,
    seed: u64,
) -> Result<LatentCode> {
    Ok(ddim_sample_batch(model, sched, steps, std::slice::from_ref(cond), &[seed])?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTrainConfig {
    pub model: DenoiserConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub flags: CondFlags,
    /// Steps during which the scene encoder trains jointly with the denoiser
    /// before it is frozen. Ignored without scene conditioning.
    pub scene_warmup_steps: usize,
    pub scene_points: usize,
    /// Learning rate of the scene encoder during warm-up.
    pub scene_lr: f64,
    /// Per-point MLP widths of a fresh scene encoder.
    pub scene_hidden: Vec<usize>,
}

impl DenoiserTrainConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

/// Training inputs. `interactee` and `scenes` are required when the
/// corresponding flag is set and must align with `wearer` by index.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserData<'a> {
    pub wearer: &'a [crate::body::PoseSequence],
    pub interactee: Option<&'a [crate::body::PoseSequence]>,
    pub scenes: Option<&'a [ScenePointCloud]>,
}

/// Parameter hashes of the modules that must not move during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeReport {
    pub vae_encoder_before: String,
    pub vae_encoder_after: String,
    /// Taken once the scene encoder is frozen (after warm-up).
    pub scene_encoder_before: Option<String>,
    pub scene_encoder_after: Option<String>,
}

impl FreezeReport {
    pub fn holds(&self) -> bool {
        self.vae_encoder_before == self.vae_encoder_after
            && self.scene_encoder_before == self.scene_encoder_after
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserStepLog {
    pub step: usize,
    pub loss: f64,
    pub scene_trainable: bool,
}

#[derive(Debug, Clone)]
pub struct DenoiserRun {
    pub denoiser: Denoiser,
    pub scene_encoder: Option<SceneEncoder>,
    pub log: Vec<DenoiserStepLog>,
    pub freeze: FreezeReport,
}

fn to_tensor(rows: &[LatentCode], dtype: DType) -> Result<Tensor> {
    let d = rows
        .first()
        .map(LatentCode::dim)
        .ok_or_else(|| invalid("no latents"))?;
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), d), &DEVICE)?.to_dtype(dtype)?)
}

/// Trains a denoiser on posterior means of the frozen VAE. When scene
/// conditioning is active and no trained `scene_encoder` is given, a fresh
/// encoder trains jointly for `scene_warmup_steps` and is frozen afterwards.
pub fn train_denoiser(
    data: DenoiserData<'_>,
    vae: &VaeModel,
    scene_encoder: Option<SceneEncoder>,
    cfg: &DenoiserTrainConfig,
) -> Result<DenoiserRun> {
    let n = data.wearer.len();
    if n == 0 || cfg.batch_size == 0 {
        return Err(invalid("empty training set or zero batch size"));
    }
    if cfg.model.latent_dim != vae.config().latent_dim {
        return Err(Error::Precondition(format!(
            "denoiser width {} does not match VAE latent width {}",
            cfg.model.latent_dim,
            vae.config().latent_dim
        )));
    }
    let interactee = match (cfg.flags.interactee, data.interactee) {
        (true, Some(p)) if p.len() == n => Some(p),
        (true, _) => {
            return Err(Error::Precondition(
                "interactee conditioning needs one interactee sequence per sample".into(),
            ))
        }
        (false, _) => None,
    };
    let scenes = match (cfg.flags.scene, data.scenes) {
        (true, Some(s)) if s.len() == n => Some(s),
        (true, _) => {
            return Err(Error::Precondition(
                "scene conditioning needs one point cloud per sample".into(),
            ))
        }
        (false, _) => None,
    };
    let sched = cfg.schedule()?;
    let dtype = DType::F32;
    let vae_before = vae.params().hash(ENCODER_PREFIX)?;

    // Frozen encoders run outside the graph: their outputs are constants.
    let z0 = to_tensor(&vae.encode_means(data.wearer)?, dtype)?;
    let int_tokens = interactee
        .map(|p| vae.encode_means(p).and_then(|t| to_tensor(&t, dtype)))
        .transpose()?;

    let d = cfg.model.latent_dim;
    let (scene_enc, warmup) = match (scenes, scene_encoder) {
        (None, _) => (None, 0),
        (Some(_), Some(enc)) => (Some(enc), 0),
        (Some(_), None) => {
            let enc = SceneEncoder::new(
                SceneEncoderConfig {
                    latent_dim: d,
                    hidden: cfg.scene_hidden.clone(),
                },
                cfg.seed,
                dtype,
            )?;
            (Some(enc), cfg.scene_warmup_steps.min(cfg.steps))
        }
    };
    let clouds = scenes
        .map(|s| {
            s.iter()
                .enumerate()
                .map(|(i, c)| {
                    subsample_pointcloud(
                        c,
                        cfg.scene_points,
                        seeding::child_seed(cfg.seed, i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let cloud_tensor = clouds
        .as_ref()
        .map(|c| stack_clouds(&c.iter().collect::<Vec<_>>(), dtype))
        .transpose()?;

    let denoiser = Denoiser::new(cfg.model.clone(), cfg.seed, dtype)?;
    let adam = |vars, lr| {
        AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )
    };
    let mut opt = adam(denoiser.store.trainable_vars(""), cfg.lr)?;
    let mut scene_opt = match (&scene_enc, warmup) {
        (Some(enc), w) if w > 0 => Some(adam(
            enc.params().trainable_vars(SCENE_PREFIX),
            cfg.scene_lr,
        )?),
        _ => None,
    };

    let mut scene_tokens: Option<Tensor> = None;
    let mut scene_before = None;
    let freeze_scene = |enc: &SceneEncoder| -> Result<(Tensor, String)> {
        let tokens = enc.encode_scenes(clouds.as_deref().unwrap_or(&[]))?;
        Ok((to_tensor(&tokens, dtype)?, enc.params().hash(SCENE_PREFIX)?))
    };
    if let (Some(enc), 0) = (&scene_enc, warmup) {
        let (t, h) = freeze_scene(enc)?;
        scene_tokens = Some(t);
        scene_before = Some(h);
    }

    let mut batch_rng = seeding::rng(cfg.seed, Stream::Batches);
    let mut noise_rng = seeding::rng(cfg.seed, Stream::Noise);
    let mut t_rng = seeding::rng(cfg.seed, Stream::Timesteps);
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<u32> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step == warmup && scene_opt.is_some() {
            scene_opt = None;
            let (t, h) = freeze_scene(scene_enc.as_ref().expect("scene encoder"))?;
            scene_tokens = Some(t);
            scene_before = Some(h);
        }
        if order.len() < bs {
            let mut fresh: Vec<u32> = (0..n as u32).collect();
            fresh.shuffle(&mut batch_rng);
            order.extend(fresh);
        }
        let idx: Vec<u32> = order.drain(..bs).collect();
        let idx_t = Tensor::new(idx.as_slice(), &DEVICE)?;
        let zb = z0.index_select(&idx_t, 0)?;
        let t: Vec<usize> = (0..bs)
            .map(|_| t_rng.random_range(1..=sched.steps()))
            .collect();
        let eps = Tensor::from_vec(
            seeding::standard_normal(&mut noise_rng, bs * d),
            (bs, d),
            &DEVICE,
        )?;

        let mut toks = Vec::new();
        let mut sources = Vec::new();
        if let Some(it) = &int_tokens {
            toks.push(it.index_select(&idx_t, 0)?);
            sources.push(crate::conditioning::SOURCE_INTERACTEE);
        }
        if cfg.flags.scene {
            let st = match &scene_tokens {
                Some(frozen) => frozen.index_select(&idx_t, 0)?,
                None => {
                    let pts = cloud_tensor
                        .as_ref()
                        .expect("clouds")
                        .index_select(&idx_t, 0)?;
                    scene_enc
                        .as_ref()
                        .expect("scene encoder")
                        .encode_tensor(&pts)?
                }
            };
            toks.push(st);
            sources.push(crate::conditioning::SOURCE_SCENE);
        }
        let cond = if toks.is_empty() {
            None
        } else {
            Some(CondTensor {
                tokens: Tensor::stack(&toks, 1)?,
                sources,
            })
        };
        let loss = diffusion_loss(&denoiser, &zb, &t, &eps, cond.as_ref(), &sched)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Precondition(format!(
                "denoiser loss diverged at step {step}"
            )));
        }
        log.push(DenoiserStepLog {
            step,
            loss: value,
            scene_trainable: scene_opt.is_some(),
        });
        let grads = loss.backward()?;
        opt.step(&grads)?;
        if let Some(so) = scene_opt.as_mut() {
            so.step(&grads)?;
        }
    }
    if scene_enc.is_some() && scene_before.is_none() {
        // Warm-up covered every step; freeze now.
        scene_before = Some(
            scene_enc
                .as_ref()
                .expect("scene encoder")
                .params()
                .hash(SCENE_PREFIX)?,
        );
    }
    let freeze = FreezeReport {
        vae_encoder_before: vae_before,
        vae_encoder_after: vae.params().hash(ENCODER_PREFIX)?,
        scene_encoder_after: scene_enc
            .as_ref()
            .map(|e| e.params().hash(SCENE_PREFIX))
            .transpose()?,
        scene_encoder_before: scene_before,
    };
    if !freeze.holds() {
        return Err(Error::Precondition(
            "frozen parameters changed during denoiser training".into(),
        ));
    }
    Ok(DenoiserRun {
        denoiser,
        scene_encoder: scene_enc,
        log,
        freeze,
    })
}
