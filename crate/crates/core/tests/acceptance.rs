//! End-to-end acceptance suite. Each test prints one `criterion N [PASS|FAIL]`
//! line straight to stdout, so the summary is visible without `--nocapture`.
//! The tests take a shared lock so the reported runtimes are not inflated by
//! each other.

use std::io::Write as _;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use egodiff::analysis::{stratify_by_distance, stratify_by_gaze, GazeTest};
use egodiff::body::{
    axis_angle_to_matrix, euler_to_matrix, matrix_to_axis_angle, matrix_to_euler, BodyModel,
    EulerOrder, RotationMatrix,
};
use egodiff::checkpoint::Checkpoint;
use egodiff::conditioning::{CondFlags, ConditionBundle, SceneEncoder};
use egodiff::config::ExperimentConfig;
use egodiff::dataset::{decode_dataset, encode_dataset, read_dataset};
use egodiff::diffusion::{
    ddim_from, diffusion_loss, q_sample, train_denoiser, CondTensor, Denoiser, DenoiserConfig,
    DenoiserData, EpsPredictor, NoiseSchedule,
};
use egodiff::metrics::{
    acceleration_error, compare_sequences, joints_array, mpjpe, orientation_error,
    translation_error, Evaluation,
};
use egodiff::pipeline::{self, ModelPaths, TrainedModels};
use egodiff::seeding::{rng, standard_normal, Stream};
use egodiff::synth::{generate_episodes, Scenario, SynthConfig};
use egodiff::vae::{
    elbo_loss, reparameterize_tensor, train_vae, ElboWeights, LatentCode, VaeConfig, VaeModel,
    VaeTrainConfig, ENCODER_PREFIX,
};
use egodiff::Error;
use ndarray::{Array2, Array3};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stdout(),
        "criterion {n} [{verdict}] {name}: {detail}"
    );
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---------------------------------------------------------------- 1

fn scalar_mpjpe(p: &Array3<f64>, g: &Array3<f64>) -> f64 {
    let (t, j, _) = p.dim();
    let mut s = 0.0;
    for a in 0..t {
        for b in 0..j {
            let mut d = 0.0;
            for c in 0..3 {
                d += (p[[a, b, c]] - g[[a, b, c]]).powi(2);
            }
            s += d.sqrt();
        }
    }
    s / (t * j) as f64 * 1000.0
}

fn scalar_translation(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let t = p.nrows();
    let mut s = 0.0;
    for a in 0..t {
        let mut d = 0.0;
        for c in 0..3 {
            d += (p[[a, c]] - g[[a, c]]).powi(2);
        }
        s += d.sqrt();
    }
    s / t as f64 * 1000.0
}

fn scalar_acceleration(p: &Array3<f64>, g: &Array3<f64>, fps: f64) -> f64 {
    let (t, j, _) = p.dim();
    let mut s = 0.0;
    for a in 1..t - 1 {
        for b in 0..j {
            let mut d = 0.0;
            for c in 0..3 {
                let ap = p[[a + 1, b, c]] - 2.0 * p[[a, b, c]] + p[[a - 1, b, c]];
                let ag = g[[a + 1, b, c]] - 2.0 * g[[a, b, c]] + g[[a - 1, b, c]];
                d += (ap - ag).powi(2);
            }
            s += d.sqrt();
        }
    }
    s / ((t - 2) * j) as f64 * fps * fps * 1000.0
}

fn scalar_orientation(p: &[RotationMatrix], g: &[RotationMatrix]) -> f64 {
    let mut s = 0.0;
    for (a, b) in p.iter().zip(g) {
        let (ra, rb) = (a.rows(), b.rows());
        let mut f = 0.0;
        for i in 0..3 {
            for k in 0..3 {
                // (A·Bᵀ)_{ik} − δ_{ik}
                let mut v: f64 = (0..3).map(|m| ra[i][m] * rb[k][m]).sum();
                if i == k {
                    v -= 1.0;
                }
                f += v * v;
            }
        }
        s += f.sqrt();
    }
    s / p.len() as f64
}

fn random_rotation(r: &mut impl Rng) -> RotationMatrix {
    let axis = loop {
        let v = [
            r.random_range(-1.0..1.0f64),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    let angle = r.random_range(0.0..std::f64::consts::PI - 1e-3);
    axis_angle_to_matrix(axis.map(|a| a * angle)).unwrap()
}

fn max_abs_diff(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    (a.matrix() - b.matrix()).abs().max()
}

#[test]
fn criterion_1_geometry_and_metric_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(11, Stream::Data);
    let mut worst_aa = 0f64;
    let mut worst_euler = 0f64;
    for _ in 0..1000 {
        let angle = r.random_range(0.0..std::f64::consts::PI - 1e-3);
        let dir = loop {
            let v: [f64; 3] = [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 0.1 && n <= 1.0 {
                break v.map(|x| x / n);
            }
        };
        let aa = dir.map(|x| x * angle);
        let back = matrix_to_axis_angle(&axis_angle_to_matrix(aa).unwrap()).unwrap();
        for k in 0..3 {
            worst_aa = worst_aa.max((back[k] - aa[k]).abs());
        }
        let m = random_rotation(&mut r);
        for order in [EulerOrder::Zyx, EulerOrder::Yxz] {
            let e = matrix_to_euler(&m, order);
            worst_euler = worst_euler.max(max_abs_diff(&euler_to_matrix(&e), &m));
        }
    }

    // Worked examples.
    let one = |v: [f64; 3]| Array3::from_shape_fn((1, 1, 3), |(_, _, c)| v[c]);
    let ex_mpjpe = mpjpe(one([0.003, 0.004, 0.0]).view(), one([0.0; 3]).view()).unwrap();
    let rz = RotationMatrix::about_z(std::f64::consts::PI);
    let ex_orient = orientation_error(&[rz], &[RotationMatrix::identity()]).unwrap();
    let off = Array2::from_shape_fn((4, 3), |(_, c)| [0.001, 0.002, 0.002][c]);
    let ex_transl = translation_error(off.view(), Array2::zeros((4, 3)).view()).unwrap();
    let (fps, a) = (30.0, 2.0);
    let quad = Array3::from_shape_fn((10, 1, 3), |(t, _, c)| {
        if c == 0 {
            0.5 * a * (t as f64 / fps).powi(2)
        } else {
            0.0
        }
    });
    let ex_accel = acceleration_error(quad.view(), Array3::zeros((10, 1, 3)).view(), fps).unwrap();
    let worked = [
        (ex_mpjpe, 5.0),
        (ex_orient, 2.0 * 2f64.sqrt()),
        (ex_transl, 3.0),
        (ex_accel, a * 1000.0),
    ];
    let worst_worked = worked.iter().map(|(g, w)| rel(*g, *w)).fold(0.0, f64::max);

    // Vectorized metrics against scalar loops on random inputs.
    let mut worst_oracle = 0f64;
    for _ in 0..20 {
        let (t, j) = (r.random_range(3..12), r.random_range(1..25));
        let mut rand3 = || Array3::from_shape_fn((t, j, 3), |_| r.random_range(-1.0..1.0));
        let (p, g) = (rand3(), rand3());
        let p2 = Array2::from_shape_fn((t, 3), |(a, c)| p[[a, 0, c]]);
        let g2 = Array2::from_shape_fn((t, 3), |(a, c)| g[[a, 0, c]]);
        let rp: Vec<_> = (0..t).map(|_| random_rotation(&mut r)).collect();
        let rg: Vec<_> = (0..t).map(|_| random_rotation(&mut r)).collect();
        for (v, o) in [
            (mpjpe(p.view(), g.view()).unwrap(), scalar_mpjpe(&p, &g)),
            (
                translation_error(p2.view(), g2.view()).unwrap(),
                scalar_translation(&p2, &g2),
            ),
            (
                acceleration_error(p.view(), g.view(), 30.0).unwrap(),
                scalar_acceleration(&p, &g, 30.0),
            ),
            (
                orientation_error(&rp, &rg).unwrap(),
                scalar_orientation(&rp, &rg),
            ),
        ] {
            worst_oracle = worst_oracle.max(rel(v, o));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_aa < 1e-6
        && worst_euler < 1e-6
        && worst_worked < 1e-9
        && worst_oracle < 1e-9
        && elapsed < Duration::from_secs(10);
    report(
        1,
        "geometry suite",
        pass,
        &format!(
            "aa round-trip {worst_aa:.1e}, euler round-trip {worst_euler:.1e}, worked examples rel {worst_worked:.1e}, scalar oracles rel {worst_oracle:.1e}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

/// Knows the planted clean latents and returns the noise consistent with them.
struct Oracle {
    z0: Vec<Vec<f64>>,
    sched: NoiseSchedule,
}

impl EpsPredictor for Oracle {
    fn latent_dim(&self) -> usize {
        self.z0[0].len()
    }

    fn predict_eps(
        &self,
        z_t: &[Vec<f64>],
        t: usize,
        _cond: &[ConditionBundle],
    ) -> egodiff::Result<Vec<Vec<f64>>> {
        let ab = self.sched.alpha_bar(t)?;
        Ok(z_t
            .iter()
            .zip(&self.z0)
            .map(|(z, z0)| {
                z.iter()
                    .zip(z0)
                    .map(|(zv, z0v)| (zv - ab.sqrt() * z0v) / (1.0 - ab).sqrt())
                    .collect()
            })
            .collect())
    }
}

#[test]
fn criterion_2_diffusion_math() {
    let _g = serial();
    let start = Instant::now();
    let mut monotone = true;
    for t in [1, 10, 1000] {
        let s = NoiseSchedule::linear(t, 1e-4, 0.02).unwrap();
        monotone &= s.betas().windows(2).all(|w| w[0] <= w[1]);
        monotone &= s.alpha_bars().windows(2).all(|w| w[0] > w[1]);
        monotone &= s
            .alpha_bars()
            .iter()
            .chain(s.betas())
            .all(|v| *v > 0.0 && *v < 1.0);
    }

    let sched = NoiseSchedule::standard();
    let z0 = LatentCode(vec![1.0, -0.5, 2.0, 0.25]);
    let draws = 10_000;
    let mut r = rng(5, Stream::Noise);
    let mut worst_mean = 0f64;
    let mut worst_var = 0f64;
    for t in [1, 250, 500, 1000] {
        let ab = sched.alpha_bar(t).unwrap();
        let d = z0.dim();
        let mut sum = vec![0f64; d];
        let mut sq = vec![0f64; d];
        for _ in 0..draws {
            let eps = standard_normal(&mut r, d);
            let z = q_sample(&z0, t, &eps, &sched).unwrap();
            for k in 0..d {
                let c = z.0[k] as f64 - ab.sqrt() * z0.0[k] as f64;
                sum[k] += z.0[k] as f64;
                sq[k] += c * c;
            }
        }
        for k in 0..d {
            let mean = sum[k] / draws as f64;
            let target = ab.sqrt() * z0.0[k] as f64;
            // Mean error measured against the marginal's own scale.
            let scale = (target * target + (1.0 - ab)).sqrt();
            worst_mean = worst_mean.max((mean - target).abs() / scale);
            worst_var = worst_var.max(rel(sq[k] / draws as f64, 1.0 - ab));
        }
    }

    let mut worst_inv = 0f64;
    let planted: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..8).map(|k| ((i * 8 + k) as f64 * 0.91).sin() * 1.5).collect())
        .collect();
    let noise: Vec<Vec<f32>> = (0..3).map(|_| standard_normal(&mut r, 8)).collect();
    let oracle = Oracle {
        z0: planted.clone(),
        sched: sched.clone(),
    };
    for steps in [1, 5, 20, sched.steps()] {
        let start_z: Vec<Vec<f64>> = planted
            .iter()
            .zip(&noise)
            .map(|(z, e)| {
                let code = LatentCode(z.iter().map(|v| *v as f32).collect());
                q_sample(&code, sched.steps(), e, &sched)
                    .unwrap()
                    .0
                    .iter()
                    .map(|v| *v as f64)
                    .collect()
            })
            .collect();
        let cond = vec![ConditionBundle::unconditional(); 3];
        let out = ddim_from(&oracle, &sched, steps, &cond, start_z).unwrap();
        for (o, p) in out.iter().zip(&planted) {
            for (a, b) in o.iter().zip(p) {
                // Compare at the f32 resolution the latents are stored in.
                worst_inv = worst_inv.max(((*a as f32) as f64 - (*b as f32) as f64).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = monotone
        && worst_mean < 0.05
        && worst_var < 0.05
        && worst_inv < 1e-5
        && elapsed < Duration::from_secs(60);
    report(
        2,
        "diffusion math suite",
        pass,
        &format!(
            "monotone {monotone}, q_sample mean dev {worst_mean:.3}, var rel dev {worst_var:.3}, DDIM inversion {worst_inv:.1e}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

/// Largest relative error between autograd and central differences over a
/// spread of entries of every trainable tensor.
fn gradient_check(vars: &[Var], loss: &dyn Fn() -> Tensor) -> (f64, usize) {
    let grads = loss().backward().unwrap();
    let h = 1e-5;
    let mut worst = 0f64;
    let mut checked = 0;
    for var in vars {
        let shape = var.dims().to_vec();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; base.len()],
        };
        let stride = (base.len() / 4).max(1);
        for i in (0..base.len()).step_by(stride).take(4) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap())
                    .unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
            let scale = fd.abs().max(g[i].abs());
            // Entries whose gradient vanishes carry no relative information.
            if scale > 1e-7 {
                worst = worst.max((fd - g[i]).abs() / scale);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

#[test]
fn criterion_3_gradient_checks() {
    let _g = serial();
    let start = Instant::now();
    let body = BodyModel::smpl_like();
    let frames = 4;
    let vae = VaeModel::new(
        VaeConfig {
            frames,
            joints: 24,
            latent_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            fps: 30.0,
        },
        2,
        DType::F64,
    )
    .unwrap();
    let eps = generate_episodes(
        Scenario::Conversation,
        &SynthConfig {
            scene_points: 16,
            ..SynthConfig::new(frames, 0.9)
        },
        2,
        9,
    )
    .unwrap();
    let seqs: Vec<_> = eps.iter().map(|e| e.wearer.clone()).collect();
    let poses = vae.sequence_tensor(&seqs).unwrap();
    let rho = Tensor::new(
        &[
            [0.3f64, -1.2, 0.5, 0.0, 0.9, -0.4, 1.1, -0.7],
            [-0.2, 0.8, -1.5, 0.6, 0.1, 0.4, -0.9, 1.3],
        ],
        &Device::Cpu,
    )
    .unwrap();
    let weights = ElboWeights { kl: 0.1, fk: 1.0 };
    let elbo = || {
        let post = vae.encode_tensor(&poses).unwrap();
        let z = reparameterize_tensor(&post, &rho).unwrap();
        let recon = vae.decode_tensor(&z, frames).unwrap();
        elbo_loss(&poses, &recon, &post, weights, &body)
            .unwrap()
            .total
    };
    let (elbo_err, elbo_n) = gradient_check(&vae.params().trainable_vars(""), &elbo);

    let den = Denoiser::new(
        DenoiserConfig {
            latent_dim: 8,
            hidden: 16,
            layers: 1,
            heads: 2,
            ff_dim: 16,
        },
        4,
        DType::F64,
    )
    .unwrap();
    let sched = NoiseSchedule::standard();
    let mut r = rng(6, Stream::Noise);
    let mut normal = |n: usize| {
        let v: Vec<f64> = standard_normal(&mut r, n).iter().map(|x| *x as f64).collect();
        Tensor::from_vec(v, (2, n / 2), &Device::Cpu).unwrap()
    };
    let z0 = normal(16);
    let noise = normal(16);
    let tokens = normal(32).reshape((2, 2, 8)).unwrap();
    let cond = CondTensor {
        tokens,
        sources: vec![0, 1],
    };
    let dl = || diffusion_loss(&den, &z0, &[37, 640], &noise, Some(&cond), &sched).unwrap();
    let (diff_err, diff_n) = gradient_check(&den.params().trainable_vars(""), &dl);

    let elapsed = start.elapsed();
    let pass = elbo_err < 1e-4
        && diff_err < 1e-4
        && elbo_n > 20
        && diff_n > 20
        && elapsed < Duration::from_secs(60);
    report(
        3,
        "gradient checks",
        pass,
        &format!(
            "elbo_loss rel err {elbo_err:.1e} over {elbo_n} entries, diffusion_loss rel err {diff_err:.1e} over {diff_n} entries, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_vae_overfit() {
    let _g = serial();
    let start = Instant::now();
    let body = BodyModel::smpl_like();
    let frames = 30;
    let ep = generate_episodes(
        Scenario::Conversation,
        &SynthConfig {
            scene_points: 16,
            ..SynthConfig::new(frames, 0.9)
        },
        1,
        77,
    )
    .unwrap()
    .remove(0);
    let cfg = VaeTrainConfig {
        model: VaeConfig {
            frames,
            joints: 24,
            latent_dim: 32,
            layers: 2,
            heads: 4,
            ff_dim: 64,
            fps: 30.0,
        },
        steps: 200,
        batch_size: 1,
        lr: 3e-3,
        weight_decay: 0.0,
        // Memorization check: the plain autoencoder objective.
        weights: ElboWeights { kl: 0.0, fk: 1.0 },
        seed: 0,
    };
    let (vae, log) = train_vae(std::slice::from_ref(&ep.wearer), &cfg, &body).unwrap();
    let first = log[0].reconstruction;
    let last = log.last().unwrap().reconstruction;
    let z = vae.encode_means(std::slice::from_ref(&ep.wearer)).unwrap();
    let recon = vae.decode(&z[0], frames).unwrap();
    let err = compare_sequences(&recon, &ep.wearer, &body).unwrap().mpjpe;
    let joints = joints_array(&ep.wearer, &body).unwrap();
    let mean = joints.mean_axis(ndarray::Axis(0)).unwrap();
    let (t, j, _) = joints.dim();
    let mut amp = 0.0;
    for a in 0..t {
        for b in 0..j {
            amp += (0..3)
                .map(|c| (joints[[a, b, c]] - mean[[b, c]]).powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    let amplitude = amp / (t * j) as f64 * 1000.0;
    let elapsed = start.elapsed();
    let pass =
        first / last >= 10.0 && err < 0.1 * amplitude && elapsed < Duration::from_secs(300);
    report(
        4,
        "VAE overfit oracle",
        pass,
        &format!(
            "reconstruction loss {first:.4} -> {last:.5} ({:.1}x), MPJPE {err:.1} mm vs amplitude {amplitude:.1} mm ({:.1}%), {elapsed:.1?}",
            first / last,
            100.0 * err / amplitude
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5 and 8

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides([
        ("frames", "30"),
        ("lookahead", "15"),
        ("lag", "10"),
        ("kappa", "0.9"),
        ("scene_points", "256"),
        ("train_episodes", "200"),
        ("test_episodes", "50"),
        ("latent_dim", "32"),
        ("vae_layers", "2"),
        ("vae_ff_dim", "64"),
        ("vae_steps", "2000"),
        ("vae_batch_size", "32"),
        ("vae_lr", "1e-3"),
        ("weight_decay", "0"),
        ("denoiser_hidden", "64"),
        ("denoiser_layers", "2"),
        ("denoiser_ff_dim", "128"),
        ("denoiser_steps", "6000"),
        ("denoiser_batch_size", "64"),
        ("denoiser_lr", "1e-3"),
        ("scene_hidden", "32,64,128"),
        ("scene_encoder_points", "128"),
        ("scene_warmup_steps", "1000"),
        ("scene_lr", "1e-3"),
        ("future_offset", "10"),
        ("samples", "3"),
    ])
    .unwrap();
    cfg
}

struct SeedRun {
    unconditional: Evaluation,
    interactee: Evaluation,
    full: Evaluation,
    future: Evaluation,
}

/// Wall-clock time spent on the data and VAEs, and on each denoiser variant.
#[derive(Default)]
struct Timings {
    shared: Duration,
    unconditional: Duration,
    interactee: Duration,
    full: Duration,
    future: Duration,
}

struct Experiment {
    runs: Vec<SeedRun>,
    time: Timings,
}

const SEEDS: u64 = 5;

/// One dataset; per seed one VAE shared by four denoisers.
fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut time = Timings::default();
        let start = Instant::now();
        let mut cfg = desk_config();
        let episodes = pipeline::generate_data(&cfg).unwrap();
        time.shared += start.elapsed();
        let mut runs = Vec::new();
        for seed in 0..SEEDS {
            cfg.seed = seed;
            let start = Instant::now();
            let (train, test) = pipeline::split(&cfg, &episodes).unwrap();
            let (vae, _) = pipeline::train_vae_on(&cfg, train).unwrap();
            time.shared += start.elapsed();
            let eval = |flags: CondFlags, offset: usize, spent: &mut Duration| {
                let start = Instant::now();
                let run = pipeline::train_denoiser_on(&cfg, &vae, train, flags, offset).unwrap();
                let models = TrainedModels::new(&cfg, vae.clone(), run, flags, offset).unwrap();
                let e = pipeline::evaluate_on(&cfg, &models, test).unwrap();
                *spent += start.elapsed();
                e
            };
            runs.push(SeedRun {
                unconditional: eval(CondFlags::NONE, 0, &mut time.unconditional),
                interactee: eval(CondFlags::INTERACTEE, 0, &mut time.interactee),
                full: eval(CondFlags::FULL, 0, &mut time.full),
                future: eval(CondFlags::INTERACTEE, cfg.future_offset, &mut time.future),
            });
        }
        Experiment { runs, time }
    })
}

/// One-sided paired t statistic of `worse − better` and whether it clears
/// the 5% critical value.
fn paired_t(worse: &[f64], better: &[f64]) -> (f64, bool) {
    let d: Vec<f64> = worse.iter().zip(better).map(|(w, b)| w - b).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = if var > 0.0 {
        mean / (var / n).sqrt()
    } else if mean > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let critical = StudentsT::new(0.0, 1.0, n - 1.0).unwrap().inverse_cdf(0.95);
    (t, t > critical)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_5_conditioning_efficacy() {
    let _g = serial();
    let exp = experiment();
    let col = |f: fn(&SeedRun) -> &Evaluation| -> Vec<f64> {
        exp.runs.iter().map(|r| f(r).mean_of_k.mpjpe).collect()
    };
    let (none, inter, full) = (
        col(|r| &r.unconditional),
        col(|r| &r.interactee),
        col(|r| &r.full),
    );
    let (t_full, sig_full) = paired_t(&inter, &full);
    let (t_inter, sig_inter) = paired_t(&none, &inter);
    let ordered = mean(&full) < mean(&inter) && mean(&inter) < mean(&none);
    // Charged for the data, the VAEs and the three variants it compares; the
    // future-offset models belong to criterion 8.
    let t = &exp.time;
    let elapsed = t.shared + t.unconditional + t.interactee + t.full;
    let pass = ordered && sig_full && sig_inter && elapsed < Duration::from_secs(30 * 60);
    report(
        5,
        "conditioning efficacy",
        pass,
        &format!(
            "MPJPE over {SEEDS} seeds: unconditional {:.1}, interactee-only {:.1}, full {:.1} mm; paired t (uncond-inter) {t_inter:.2}, (inter-full) {t_full:.2}; per-seed full {full:.1?}, inter {inter:.1?}, uncond {none:.1?}; {:.0?}",
            mean(&none),
            mean(&inter),
            mean(&full),
            elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_future_conditioning() {
    let _g = serial();
    let exp = experiment();
    let present: Vec<f64> = exp
        .runs
        .iter()
        .map(|r| r.interactee.mean_of_k.translation_error)
        .collect();
    let future: Vec<f64> = exp
        .runs
        .iter()
        .map(|r| r.future.mean_of_k.translation_error)
        .collect();
    let t = &exp.time;
    let elapsed = t.shared + t.interactee + t.future;
    let pass = mean(&future) < mean(&present) && elapsed < Duration::from_secs(30 * 60);
    report(
        8,
        "future conditioning",
        pass,
        &format!(
            "translation error over {SEEDS} seeds: present {:.1} mm, future (offset 10) {:.1} mm; per-seed present {present:.1?}, future {future:.1?}; {elapsed:.0?}",
            mean(&present),
            mean(&future)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides([
        ("frames", "8"),
        ("lookahead", "4"),
        ("lag", "2"),
        ("future_offset", "3"),
        ("scene_points", "32"),
        ("scene_encoder_points", "16"),
        ("train_episodes", "6"),
        ("test_episodes", "3"),
        ("latent_dim", "8"),
        ("vae_layers", "1"),
        ("vae_ff_dim", "16"),
        ("vae_steps", "6"),
        ("vae_batch_size", "4"),
        ("denoiser_hidden", "8"),
        ("denoiser_layers", "1"),
        ("denoiser_ff_dim", "16"),
        ("denoiser_steps", "8"),
        ("denoiser_batch_size", "4"),
        ("scene_hidden", "8,8,8"),
        ("scene_warmup_steps", "3"),
        ("diffusion_steps", "50"),
        ("inference_steps", "5"),
        ("samples", "2"),
    ])
    .unwrap();
    cfg
}

#[test]
fn criterion_6_freeze_contract() {
    let _g = serial();
    let cfg = tiny_config();
    let eps = pipeline::generate_data(&cfg).unwrap();
    let (train, _) = pipeline::split(&cfg, &eps).unwrap();
    let (vae, _) = pipeline::train_vae_on(&cfg, train).unwrap();
    let vae_before = vae.params().hash(ENCODER_PREFIX).unwrap();

    // Scene encoder warmed up inside training, then frozen.
    let run = pipeline::train_denoiser_on(&cfg, &vae, train, CondFlags::FULL, 0).unwrap();
    let warmed = run.scene_encoder.as_ref().unwrap().params().hash("").unwrap();
    let warm_ok = run.freeze.holds()
        && run.freeze.scene_encoder_after.as_deref() == Some(warmed.as_str())
        && run.log.iter().filter(|l| l.scene_trainable).count() == cfg.scene_warmup_steps;

    // A supplied encoder is frozen for the whole run.
    let enc = SceneEncoder::new(cfg.scene_encoder(), 31, DType::F32).unwrap();
    let enc_before = enc.params().hash("").unwrap();
    let wearer: Vec<_> = train.iter().map(|e| e.wearer.clone()).collect();
    let inter = pipeline::interactee_windows(train, 0).unwrap();
    let scenes: Vec<_> = train.iter().map(|e| e.scene.clone()).collect();
    let run2 = train_denoiser(
        DenoiserData {
            wearer: &wearer,
            interactee: Some(&inter),
            scenes: Some(&scenes),
        },
        &vae,
        Some(enc),
        &cfg.denoiser_training(CondFlags::FULL),
    )
    .unwrap();
    let enc_after = run2.scene_encoder.as_ref().unwrap().params().hash("").unwrap();
    let vae_after = vae.params().hash(ENCODER_PREFIX).unwrap();
    let pass = warm_ok && run2.freeze.holds() && enc_before == enc_after && vae_before == vae_after;
    report(
        6,
        "freeze contract",
        pass,
        &format!(
            "VAE encoder hash {}..{} , supplied scene encoder {}..{}, warmed scene encoder stable after {} warm-up steps: {warm_ok}",
            &vae_before[..12],
            &vae_after[..12],
            &enc_before[..12],
            &enc_after[..12],
            cfg.scene_warmup_steps
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_stratification() {
    let _g = serial();
    let start = Instant::now();
    let body = BodyModel::smpl_like();
    let cfg = SynthConfig {
        scene_points: 32,
        ..SynthConfig::new(60, 1.0)
    };
    let mut detail = Vec::new();
    let mut pass = true;
    for (scenario, near, mutual) in [
        (Scenario::FaceToFace, true, true),
        (Scenario::FarAverted, false, false),
    ] {
        let eps = generate_episodes(scenario, &cfg, 50, 12).unwrap();
        let present: Vec<_> = eps.iter().map(|e| e.interactee_present()).collect();
        let pairs: Vec<_> = eps.iter().map(|e| &e.wearer).zip(&present).collect();
        let d = stratify_by_distance(&pairs).unwrap();
        let g = stratify_by_gaze(&pairs, 30.0, GazeTest::LineOfSight, &body).unwrap();
        let hit_d = if near { d.near.len() } else { d.far.len() };
        let hit_g = if mutual { g.mutual.len() } else { g.non_mutual.len() };
        pass &= hit_d == eps.len() && hit_g == eps.len();
        detail.push(format!(
            "{scenario}: {hit_d}/{} {} and {hit_g}/{} {}",
            eps.len(),
            if near { "near" } else { "far" },
            eps.len(),
            if mutual { "mutual" } else { "non-mutual" }
        ));
    }
    // Partition check on a mixed set.
    let eps = generate_episodes(Scenario::Mixed, &SynthConfig::new(30, 0.6), 60, 4).unwrap();
    let present: Vec<_> = eps.iter().map(|e| e.interactee_present()).collect();
    let pairs: Vec<_> = eps.iter().map(|e| &e.wearer).zip(&present).collect();
    let d = stratify_by_distance(&pairs).unwrap();
    let mut partitions = true;
    for theta in [30.0, 60.0] {
        let g = stratify_by_gaze(&pairs, theta, GazeTest::LineOfSight, &body).unwrap();
        for groups in [
            vec![&d.near, &d.mid, &d.far],
            vec![&g.mutual, &g.non_mutual],
        ] {
            let mut all: Vec<usize> = groups.into_iter().flatten().copied().collect();
            all.sort_unstable();
            partitions &= all == (0..eps.len()).collect::<Vec<_>>();
        }
    }
    let elapsed = start.elapsed();
    pass &= partitions && elapsed < Duration::from_secs(60);
    report(
        7,
        "stratification harness",
        pass,
        &format!(
            "{}; exact partitions {partitions}; {elapsed:.2?}",
            detail.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn run_pipeline(cfg: &ExperimentConfig, dir: &Path) {
    let data = dir.join("episodes.bin");
    let vae = dir.join("vae.ckpt");
    let den = dir.join("denoiser.ckpt");
    let scene = dir.join("scene.ckpt");
    pipeline::cmd_generate_data(cfg, &data).unwrap();
    pipeline::cmd_train_vae(cfg, &data, &vae).unwrap();
    pipeline::cmd_train_denoiser(cfg, &data, &vae, &den, Some(&scene)).unwrap();
    let paths = ModelPaths {
        vae: &vae,
        denoiser: &den,
        scene_encoder: Some(&scene),
    };
    pipeline::cmd_sample(cfg, paths, &data, &dir.join("samples.bin")).unwrap();
    pipeline::cmd_evaluate(cfg, paths, &data, &dir.join("eval")).unwrap();
    pipeline::cmd_ablate(
        cfg,
        &vae,
        Some(paths),
        &data,
        pipeline::AblationAxis::Distance,
        &dir.join("distance.csv"),
    )
    .unwrap();
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn no_panic<T>(f: impl FnOnce() -> egodiff::Result<T>) -> Option<egodiff::Result<T>> {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).ok()
}

#[test]
fn criterion_9_reproducibility_and_formats() {
    let _g = serial();
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&cfg, a.path());
    run_pipeline(&cfg, b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let identical = ta == tb;
    let files = ta.len();

    let data_bytes = std::fs::read(a.path().join("episodes.bin")).unwrap();
    let episodes = read_dataset(&a.path().join("episodes.bin")).unwrap();
    let data_round = encode_dataset(&episodes).unwrap() == data_bytes;
    let mut ckpt_round = true;
    for name in ["vae.ckpt", "denoiser.ckpt", "scene.ckpt"] {
        let bytes = std::fs::read(a.path().join(name)).unwrap();
        ckpt_round &= Checkpoint::decode(&bytes).unwrap().encode() == bytes;
    }

    // Every truncation of a checkpoint and any flipped byte is a typed error.
    let ckpt = std::fs::read(a.path().join("vae.ckpt")).unwrap();
    let mut typed = 0usize;
    let mut crashes = 0usize;
    let mut silent = 0usize;
    let cuts: Vec<usize> = (0..ckpt.len()).step_by(97).collect();
    for &cut in &cuts {
        match no_panic(|| Checkpoint::decode(&ckpt[..cut])) {
            None => crashes += 1,
            Some(Ok(_)) => silent += 1,
            Some(Err(_)) => typed += 1,
        }
    }
    for pos in (0..ckpt.len()).step_by(53) {
        let mut c = ckpt.clone();
        c[pos] ^= 0x20;
        match no_panic(|| Checkpoint::decode(&c)) {
            None => crashes += 1,
            Some(Ok(_)) => silent += 1,
            Some(Err(_)) => typed += 1,
        }
    }
    // Datasets carry no checksum: header damage and size errors are typed,
    // payload bit flips only need to not crash.
    let header_end = data_bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .unwrap()
        + 11;
    for cut in (0..data_bytes.len()).step_by(211) {
        match no_panic(|| decode_dataset(&data_bytes[..cut])) {
            None => crashes += 1,
            Some(Ok(_)) => silent += 1,
            Some(Err(_)) => typed += 1,
        }
    }
    for pos in 0..header_end {
        let mut c = data_bytes.clone();
        c[pos] = b'#';
        match no_panic(|| decode_dataset(&c)) {
            None => crashes += 1,
            // Overwriting a byte that is already '#' or inside the free-form
            // episode metadata can leave a valid file.
            Some(Ok(back)) => {
                if back.len() != episodes.len() {
                    silent += 1
                }
            }
            Some(Err(_)) => typed += 1,
        }
    }
    for pos in (header_end..data_bytes.len()).step_by(101) {
        let mut c = data_bytes.clone();
        c[pos] ^= 0xff;
        if no_panic(|| decode_dataset(&c)).is_none() {
            crashes += 1;
        }
    }
    let mut specific = true;
    let mut long = data_bytes.clone();
    long.extend_from_slice(&[0; 8]);
    specific &= matches!(decode_dataset(&long), Err(Error::DimensionMismatch(_)));
    specific &= matches!(
        decode_dataset(&data_bytes[..data_bytes.len() - 1]),
        Err(Error::Truncated { .. })
    );
    let mut flipped = ckpt.clone();
    *flipped.last_mut().unwrap() ^= 1;
    specific &= matches!(Checkpoint::decode(&flipped), Err(Error::HashMismatch { .. }));
    specific &= matches!(
        Checkpoint::load(&a.path().join("absent.ckpt")),
        Err(Error::MissingInput { .. })
    );

    let pass = identical && data_round && ckpt_round && crashes == 0 && silent == 0 && specific;
    report(
        9,
        "reproducibility and formats",
        pass,
        &format!(
            "{files} output files byte-identical across runs: {identical}; dataset round-trip {data_round}, checkpoint round-trip {ckpt_round}; {typed} corruptions rejected with typed errors, {silent} accepted silently, {crashes} crashes"
        ),
    );
    assert!(pass);
}
