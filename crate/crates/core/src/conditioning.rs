//! Conditioning tokens: the interactee's latent (from the frozen motion
//! encoder) and a point-cloud embedding of the scene, stacked in a fixed
//! order for cross-attention.

use candle_core::{DType, Module, Tensor, D};
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::body::PoseSequence;
use crate::error::{invalid, Result};
use crate::nn::{Linear, ParamStore, DEVICE};
use crate::seeding::{self, Stream};
use crate::vae::{LatentCode, VaeModel};

/// Parameter-name prefix of the scene encoder.
pub const SCENE_PREFIX: &str = "scene.";

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePointCloud {
    points: Vec<[f32; 3]>,
}

impl ScenePointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud is empty"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("point cloud has non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn into_points(self) -> Vec<[f32; 3]> {
        self.points
    }
}

/// Fixed-size resampling: without replacement when there are enough points,
/// otherwise every point once plus uniform draws with replacement.
pub fn subsample_pointcloud(
    cloud: &ScenePointCloud,
    n_target: usize,
    seed: u64,
) -> Result<ScenePointCloud> {
    if n_target == 0 {
        return Err(invalid("n_target must be ≥ 1"));
    }
    let mut rng = seeding::rng(seed, Stream::Subsample);
    let n = cloud.len();
    let mut idx: Vec<usize> = if n >= n_target {
        index::sample(&mut rng, n, n_target).into_vec()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.extend((n..n_target).map(|_| rng.random_range(0..n)));
        all
    };
    idx.shuffle(&mut rng);
    ScenePointCloud::new(idx.into_iter().map(|i| cloud.points[i]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoderConfig {
    pub latent_dim: usize,
    /// Widths of the shared per-point MLP.
    pub hidden: Vec<usize>,
}

impl SceneEncoderConfig {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            hidden: vec![64, 128, 256],
        }
    }
}

/// Per-point MLP with ReLU, max-pool over points, linear projection to `D`.
#[derive(Debug, Clone)]
pub struct SceneEncoder {
    config: SceneEncoderConfig,
    store: ParamStore,
    layers: Vec<Linear>,
    proj: Linear,
}

struct DenseF32 {
    w: Vec<f32>,
    b: Vec<f32>,
    input: usize,
    output: usize,
}

impl DenseF32 {
    fn read(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store
            .get(&format!("{name}.weight"))
            .ok_or_else(|| invalid(format!("missing {name}")))?;
        let b = store
            .get(&format!("{name}.bias"))
            .ok_or_else(|| invalid(format!("missing {name}")))?;
        let (output, input) = w.dims2()?;
        Ok(Self {
            w: w.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
            b: b.to_dtype(DType::F32)?.to_vec1()?,
            input,
            output,
        })
    }

    fn apply(&self, x: &[f32], out: &mut Vec<f32>, relu: bool) {
        out.clear();
        for o in 0..self.output {
            let row = &self.w[o * self.input..(o + 1) * self.input];
            let mut acc = self.b[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(if relu { acc.max(0.0) } else { acc });
        }
    }
}

impl SceneEncoder {
    pub fn new(config: SceneEncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        if config.latent_dim == 0 || config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(invalid("scene encoder widths must be ≥ 1"));
        }
        let mut rng = seeding::rng(seeding::child_seed(seed, 0x5c), Stream::Init);
        let mut store = ParamStore::new(dtype);
        let mut layers = Vec::new();
        let mut input = 3;
        for (i, &w) in config.hidden.iter().enumerate() {
            layers.push(Linear::with_std(
                &mut store,
                &format!("scene.mlp{i}"),
                input,
                w,
                (2.0 / input as f64).sqrt(),
                &mut rng,
            ));
            input = w;
        }
        let proj = Linear::new(&mut store, "scene.proj", input, config.latent_dim, &mut rng);
        Ok(Self {
            config,
            store,
            layers,
            proj,
        })
    }

    pub fn config(&self) -> &SceneEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Differentiable batch path: `[B, N, 3]` → `[B, D]`.
    pub fn encode_tensor(&self, points: &Tensor) -> Result<Tensor> {
        let mut h = points.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.relu()?;
        }
        Ok(self.proj.forward(&h.max(D::Minus2)?)?)
    }

    /// Plain-loop inference. The max-pool is evaluated point by point so the
    /// result is bit-identical under any permutation of the input.
    pub fn encode_scene(&self, cloud: &ScenePointCloud) -> Result<LatentCode> {
        Ok(self.encode_scenes(std::slice::from_ref(cloud))?.remove(0))
    }

    pub fn encode_scenes(&self, clouds: &[ScenePointCloud]) -> Result<Vec<LatentCode>> {
        let dense = (0..self.layers.len())
            .map(|i| DenseF32::read(&self.store, &format!("scene.mlp{i}")))
            .collect::<Result<Vec<_>>>()?;
        let proj = DenseF32::read(&self.store, "scene.proj")?;
        let pooled_width = dense.last().map(|d| d.output).unwrap_or(3);
        let mut out = Vec::with_capacity(clouds.len());
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for cloud in clouds {
            if cloud.is_empty() {
                return Err(invalid("point cloud is empty"));
            }
            let mut pooled = vec![f32::NEG_INFINITY; pooled_width];
            for p in cloud.points() {
                a.clear();
                a.extend_from_slice(p);
                for layer in &dense {
                    layer.apply(&a, &mut b, true);
                    std::mem::swap(&mut a, &mut b);
                }
                for (m, v) in pooled.iter_mut().zip(&a) {
                    *m = m.max(*v);
                }
            }
            let mut token = Vec::new();
            proj.apply(&pooled, &mut token, false);
            out.push(LatentCode(token));
        }
        Ok(out)
    }
}

/// Stacks equally sized clouds into `[B, N, 3]`.
pub fn stack_clouds(clouds: &[&ScenePointCloud], dtype: DType) -> Result<Tensor> {
    let n = clouds.first().ok_or_else(|| invalid("no clouds"))?.len();
    if clouds.iter().any(|c| c.len() != n) {
        return Err(invalid(
            "clouds must be subsampled to a common size before batching",
        ));
    }
    let flat: Vec<f32> = clouds
        .iter()
        .flat_map(|c| c.points().iter().flatten().copied())
        .collect();
    Ok(Tensor::from_vec(flat, (clouds.len(), n, 3), &DEVICE)?.to_dtype(dtype)?)
}

/// The interactee token is the posterior mean of the frozen encoder.
pub fn encode_interactee(interactee: &PoseSequence, vae: &VaeModel) -> Result<LatentCode> {
    Ok(LatentCode(vae.encode(interactee)?.mu))
}

/// Gaussian noise on the axis-angle channels of every frame, emulating an
/// imperfect pose estimate of the interactee. Translation is left untouched.
pub fn perturb_interactee(seq: &PoseSequence, sigma: f64, seed: u64) -> Result<PoseSequence> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid("noise sigma must be finite and ≥ 0"));
    }
    let mut data = seq.as_slice().to_vec();
    if sigma > 0.0 {
        let mut rng = seeding::rng(seed, Stream::Noise);
        let v = seq.pose_dim();
        let rot = 3 * seq.joints();
        for frame in data.chunks_exact_mut(v) {
            let noise = seeding::standard_normal_f64(&mut rng, rot);
            for (x, n) in frame[..rot].iter_mut().zip(noise) {
                *x = (*x as f64 + sigma * n) as f32;
            }
        }
    }
    PoseSequence::new(data, seq.joints(), seq.fps())
}

/// Which conditioning sources are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CondFlags {
    pub interactee: bool,
    pub scene: bool,
}

impl CondFlags {
    pub const NONE: Self = Self {
        interactee: false,
        scene: false,
    };
    pub const INTERACTEE: Self = Self {
        interactee: true,
        scene: false,
    };
    pub const SCENE: Self = Self {
        interactee: false,
        scene: true,
    };
    pub const FULL: Self = Self {
        interactee: true,
        scene: true,
    };

    pub fn count(self) -> usize {
        self.interactee as usize + self.scene as usize
    }

    pub fn label(self) -> &'static str {
        match (self.interactee, self.scene) {
            (false, false) => "unconditional",
            (true, false) => "interactee-only",
            (false, true) => "scene-only",
            (true, true) => "full",
        }
    }
}

/// Source type index used for the learned type embedding.
pub const SOURCE_INTERACTEE: usize = 0;
pub const SOURCE_SCENE: usize = 1;

/// Conditioning tokens in the order `[interactee, scene]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionBundle {
    tokens: Vec<LatentCode>,
    flags: CondFlags,
}

impl ConditionBundle {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[LatentCode] {
        &self.tokens
    }

    pub fn flags(&self) -> CondFlags {
        self.flags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> Option<usize> {
        self.tokens.first().map(LatentCode::dim)
    }

    pub fn source_types(&self) -> Vec<usize> {
        let mut s = Vec::new();
        if self.flags.interactee {
            s.push(SOURCE_INTERACTEE);
        }
        if self.flags.scene {
            s.push(SOURCE_SCENE);
        }
        s
    }
}

pub fn build_condition_bundle(
    interactee: Option<LatentCode>,
    scene: Option<LatentCode>,
) -> Result<ConditionBundle> {
    if let (Some(a), Some(b)) = (&interactee, &scene) {
        if a.dim() != b.dim() {
            return Err(invalid(format!(
                "token widths differ: interactee {}, scene {}",
                a.dim(),
                b.dim()
            )));
        }
    }
    if interactee
        .iter()
        .chain(&scene)
        .any(|t| t.dim() == 0 || t.0.iter().any(|v| !v.is_finite()))
    {
        return Err(invalid("conditioning tokens must be non-empty and finite"));
    }
    let flags = CondFlags {
        interactee: interactee.is_some(),
        scene: scene.is_some(),
    };
    Ok(ConditionBundle {
        tokens: interactee.into_iter().chain(scene).collect(),
        flags,
    })
}
