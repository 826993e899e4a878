//! End-to-end workflows behind the command-line tool: data generation, the
//! two training phases, sampling, evaluation and the ablation tables. The
//! in-memory functions are reusable on their own; the `cmd_*` wrappers add
//! file I/O and write self-describing outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{future_shift, stratify_by_distance, stratify_by_gaze, DistanceStratum, GazeTest};
use crate::body::{BodyModel, PoseSequence};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::conditioning::{perturb_interactee, CondFlags, SceneEncoder};
use crate::config::ExperimentConfig;
use crate::dataset::{read_dataset, write_dataset};
use crate::diffusion::{train_denoiser, Denoiser, DenoiserData, DenoiserRun, NoiseSchedule};
use crate::error::{Error, Result};
use crate::format::{push_f32s, Header};
use crate::metrics::{evaluate_model, generate_hypotheses, EvalItem, Evaluation, MetricsReport, ModelStack};
use crate::seeding::child_seed;
use crate::synth::{generate_episodes, InteractionEpisode};
use crate::vae::{train_vae, VaeModel, VaeStepLog};

const DATA_SALT: u64 = 0xda7a;
const EVAL_SALT: u64 = 0xe7a1;
const NOISE_SALT: u64 = 0x7015e;

pub const SAMPLES_MAGIC: &str = "egodiff-samples";

/// `# key: value` comment lines naming the build and the full config.
pub fn preamble(cfg: &ExperimentConfig) -> String {
    let mut s = format!("# version: {}\n", crate::VERSION);
    for (k, v) in cfg.entries() {
        let _ = writeln!(s, "# config.{k}: {v}");
    }
    s
}

/// `train_episodes + test_episodes` episodes; the first block is the
/// training split.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Vec<InteractionEpisode>> {
    cfg.validate()?;
    let total = cfg.train_episodes + cfg.test_episodes;
    generate_episodes(cfg.scenario, &cfg.synth(), total, child_seed(cfg.seed, DATA_SALT))
}

pub fn split<'a>(
    cfg: &ExperimentConfig,
    episodes: &'a [InteractionEpisode],
) -> Result<(&'a [InteractionEpisode], &'a [InteractionEpisode])> {
    let total = cfg.train_episodes + cfg.test_episodes;
    if episodes.len() != total {
        return Err(Error::Precondition(format!(
            "dataset holds {} episodes but the config expects {} train + {} test",
            episodes.len(),
            cfg.train_episodes,
            cfg.test_episodes
        )));
    }
    if let Some(e) = episodes.first() {
        if e.frames() != cfg.frames {
            return Err(Error::Precondition(format!(
                "dataset windows have {} frames, config says {}",
                e.frames(),
                cfg.frames
            )));
        }
    }
    Ok(episodes.split_at(cfg.train_episodes))
}

/// Interactee windows shifted `offset` frames ahead of the wearer window.
pub fn interactee_windows(episodes: &[InteractionEpisode], offset: usize) -> Result<Vec<PoseSequence>> {
    episodes.iter().map(|e| future_shift(&e.interactee, e.frames(), offset)).collect()
}

/// The VAE learns from both people's present windows.
pub fn train_vae_on(cfg: &ExperimentConfig, train: &[InteractionEpisode]) -> Result<(VaeModel, Vec<VaeStepLog>)> {
    let mut seqs: Vec<PoseSequence> = train.iter().map(|e| e.wearer.clone()).collect();
    seqs.extend(interactee_windows(train, 0)?);
    train_vae(&seqs, &cfg.vae_training(), &BodyModel::smpl_like())
}

pub fn train_denoiser_on(
    cfg: &ExperimentConfig,
    vae: &VaeModel,
    train: &[InteractionEpisode],
    flags: CondFlags,
    offset: usize,
) -> Result<DenoiserRun> {
    let wearer: Vec<PoseSequence> = train.iter().map(|e| e.wearer.clone()).collect();
    let interactee = if flags.interactee { Some(interactee_windows(train, offset)?) } else { None };
    let scenes: Option<Vec<_>> = flags.scene.then(|| train.iter().map(|e| e.scene.clone()).collect());
    let data = DenoiserData { wearer: &wearer, interactee: interactee.as_deref(), scenes: scenes.as_deref() };
    train_denoiser(data, vae, None, &cfg.denoiser_training(flags))
}

/// Frozen models plus the config they were trained under.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub vae: VaeModel,
    pub denoiser: Denoiser,
    pub scene_encoder: Option<SceneEncoder>,
    pub flags: CondFlags,
    /// Interactee offset the denoiser was trained with.
    pub offset: usize,
    pub schedule: NoiseSchedule,
    pub scene_points: usize,
    pub inference_steps: usize,
}

impl TrainedModels {
    pub fn new(cfg: &ExperimentConfig, vae: VaeModel, run: DenoiserRun, flags: CondFlags, offset: usize) -> Result<Self> {
        Ok(Self {
            vae,
            denoiser: run.denoiser,
            scene_encoder: run.scene_encoder,
            flags,
            offset,
            schedule: cfg.denoiser_training(flags).schedule()?,
            scene_points: cfg.scene_encoder_points,
            inference_steps: cfg.inference_steps,
        })
    }

    fn stack(&self) -> ModelStack<'_> {
        ModelStack {
            vae: &self.vae,
            denoiser: &self.denoiser,
            scene_encoder: self.scene_encoder.as_ref(),
            schedule: &self.schedule,
            inference_steps: self.inference_steps,
            flags: self.flags,
            scene_points: self.scene_points,
        }
    }
}

pub fn eval_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.samples as u64).map(|k| child_seed(cfg.seed ^ EVAL_SALT, k)).collect()
}

/// Conditioning interactee windows for evaluation, with the configured
/// observation noise.
fn eval_interactees(cfg: &ExperimentConfig, test: &[InteractionEpisode], offset: usize) -> Result<Vec<PoseSequence>> {
    let clean = interactee_windows(test, offset)?;
    if cfg.interactee_noise == 0.0 {
        return Ok(clean);
    }
    clean
        .iter()
        .enumerate()
        .map(|(i, s)| perturb_interactee(s, cfg.interactee_noise, child_seed(cfg.seed ^ NOISE_SALT, i as u64)))
        .collect()
}

fn with_items<T>(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    test: &[InteractionEpisode],
    f: impl FnOnce(&[EvalItem<'_>]) -> Result<T>,
) -> Result<T> {
    let inter = eval_interactees(cfg, test, models.offset)?;
    let items: Vec<EvalItem<'_>> = test
        .iter()
        .zip(&inter)
        .map(|(e, i)| EvalItem { wearer: &e.wearer, interactee: Some(i), scene: Some(&e.scene) })
        .collect();
    f(&items)
}

pub fn evaluate_on(cfg: &ExperimentConfig, models: &TrainedModels, test: &[InteractionEpisode]) -> Result<Evaluation> {
    let body = BodyModel::smpl_like();
    with_items(cfg, models, test, |items| evaluate_model(&models.stack(), items, &eval_seeds(cfg), &body))
}

pub fn sample_on(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    test: &[InteractionEpisode],
) -> Result<Vec<Vec<PoseSequence>>> {
    with_items(cfg, models, test, |items| generate_hypotheses(&models.stack(), items, &eval_seeds(cfg)))
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub label: String,
    pub count: usize,
    /// `None` for an empty stratum.
    pub mean_of_k: Option<MetricsReport>,
    pub best_of_k: Option<MetricsReport>,
}

fn stratum_row(axis: &str, label: &str, eval: &Evaluation, idx: &[usize]) -> Result<AblationRow> {
    let pick = |f: fn(&crate::metrics::SequenceMetrics) -> MetricsReport| -> Result<Option<MetricsReport>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let rs: Vec<MetricsReport> = idx.iter().map(|&i| f(&eval.per_sequence[i])).collect();
        MetricsReport::mean(&rs).map(Some)
    };
    Ok(AblationRow {
        axis: axis.into(),
        label: label.into(),
        count: idx.len(),
        mean_of_k: pick(|r| r.mean_of_k)?,
        best_of_k: pick(|r| r.best_of_k)?,
    })
}

fn whole_row(axis: &str, label: &str, eval: &Evaluation) -> AblationRow {
    AblationRow {
        axis: axis.into(),
        label: label.into(),
        count: eval.per_sequence.len(),
        mean_of_k: Some(eval.mean_of_k),
        best_of_k: Some(eval.best_of_k),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Distance,
    Gaze30,
    Gaze60,
    Future,
    Conditioning,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(Self::Distance),
            "gaze30" => Ok(Self::Gaze30),
            "gaze60" => Ok(Self::Gaze60),
            "future" => Ok(Self::Future),
            "conditioning" => Ok(Self::Conditioning),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation axis '{s}' (expected distance, gaze30, gaze60, future or conditioning)"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Distance => "distance",
            Self::Gaze30 => "gaze30",
            Self::Gaze60 => "gaze60",
            Self::Future => "future",
            Self::Conditioning => "conditioning",
        }
    }

    /// Whether the axis scores one trained denoiser (rather than training
    /// its own variants from the VAE).
    pub fn needs_denoiser(self) -> bool {
        matches!(self, Self::Distance | Self::Gaze30 | Self::Gaze60)
    }
}

/// Splits the evaluation of `models` on `test` into interaction strata.
pub fn stratified_rows(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    test: &[InteractionEpisode],
    axis: AblationAxis,
) -> Result<Vec<AblationRow>> {
    let eval = evaluate_on(cfg, models, test)?;
    let present = interactee_windows(test, 0)?;
    let pairs: Vec<(&PoseSequence, &PoseSequence)> = test.iter().map(|e| &e.wearer).zip(&present).collect();
    let body = BodyModel::smpl_like();
    let name = axis.name();
    match axis {
        AblationAxis::Distance => {
            let strata = stratify_by_distance(&pairs)?;
            DistanceStratum::ALL
                .iter()
                .map(|&s| stratum_row(name, s.label(), &eval, strata.get(s)))
                .collect()
        }
        AblationAxis::Gaze30 | AblationAxis::Gaze60 => {
            let theta = if axis == AblationAxis::Gaze30 { 30.0 } else { 60.0 };
            let strata = stratify_by_gaze(&pairs, theta, GazeTest::LineOfSight, &body)?;
            Ok(vec![
                stratum_row(name, "mutual", &eval, &strata.mutual)?,
                stratum_row(name, "non-mutual", &eval, &strata.non_mutual)?,
            ])
        }
        _ => Err(Error::InvalidArgument(format!("axis {name} does not stratify a single model"))),
    }
}

/// Label and conditioning of each variant row of the conditioning table.
pub const CONDITIONING_VARIANTS: [(&str, CondFlags); 3] =
    [("w/o Scene", CondFlags::INTERACTEE), ("w/o Int.ee", CondFlags::SCENE), ("full", CondFlags::FULL)];

/// Trains and scores the variants of the `future` or `conditioning` axis.
pub fn variant_rows(
    cfg: &ExperimentConfig,
    vae: &VaeModel,
    train: &[InteractionEpisode],
    test: &[InteractionEpisode],
    axis: AblationAxis,
) -> Result<Vec<AblationRow>> {
    let variants: Vec<(&str, CondFlags, usize)> = match axis {
        AblationAxis::Conditioning => CONDITIONING_VARIANTS.iter().map(|&(l, f)| (l, f, cfg.interactee_offset)).collect(),
        AblationAxis::Future => {
            let flags = if cfg.flags().interactee { cfg.flags() } else { CondFlags::INTERACTEE };
            vec![("present", flags, 0), ("future", flags, cfg.future_offset)]
        }
        _ => return Err(Error::InvalidArgument(format!("axis {} is a stratification", axis.name()))),
    };
    variants
        .into_iter()
        .map(|(label, flags, offset)| {
            let run = train_denoiser_on(cfg, vae, train, flags, offset)?;
            let models = TrainedModels::new(cfg, vae.clone(), run, flags, offset)?;
            Ok(whole_row(axis.name(), label, &evaluate_on(cfg, &models, test)?))
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str = "axis,stratum,count";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let metric = |p: &str| MetricsReport::CSV_HEADER.split(',').map(|h| format!("{p}{h}")).collect::<Vec<_>>().join(",");
    let mut s = format!("{ABLATION_CSV_HEADER},{},{}\n", metric("mean_"), metric("best_"));
    let fields = |r: &Option<MetricsReport>| r.map_or_else(|| "nan,nan,nan,nan".to_string(), |m| m.csv_fields());
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.axis, r.label, r.count, fields(&r.mean_of_k), fields(&r.best_of_k));
    }
    s
}

/// Aligned plain-text rendering of a table given as rows of cells.
pub fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(header.iter().map(|h| h.to_string()).collect());
    s.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect()));
    for r in rows {
        s.push_str(&line(r.clone()));
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let header = ["axis", "stratum", "n", "MPJPE (mm)", "orient.", "transl. (mm)", "accel. (mm/s²)"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![r.axis.clone(), r.label.clone(), r.count.to_string()];
            match r.mean_of_k {
                Some(m) => c.extend([
                    format!("{:.1}", m.mpjpe),
                    format!("{:.3}", m.orientation_error),
                    format!("{:.1}", m.translation_error),
                    format!("{:.1}", m.acceleration_error),
                ]),
                None => c.extend(std::iter::repeat_n("-".to_string(), 4)),
            }
            c
        })
        .collect();
    aligned(&header, &cells)
}

fn evaluation_csv(eval: &Evaluation) -> String {
    let mut s = format!("aggregate,samples,{}\n", MetricsReport::CSV_HEADER);
    let _ = writeln!(s, "mean_of_k,{},{}", eval.samples_per_input, eval.mean_of_k.csv_fields());
    let _ = writeln!(s, "best_of_k,{},{}", eval.samples_per_input, eval.best_of_k.csv_fields());
    s
}

fn evaluation_table(eval: &Evaluation) -> String {
    let row = |name: &str, m: &MetricsReport| {
        vec![
            name.to_string(),
            format!("{:.1}", m.mpjpe),
            format!("{:.3}", m.orientation_error),
            format!("{:.1}", m.translation_error),
            format!("{:.1}", m.acceleration_error),
        ]
    };
    aligned(
        &["aggregate", "MPJPE (mm)", "orient.", "transl. (mm)", "accel. (mm/s²)"],
        &[row("mean of k", &eval.mean_of_k), row("best of k", &eval.best_of_k)],
    )
}

fn write_text(path: &Path, cfg: &ExperimentConfig, body: &str) -> Result<()> {
    std::fs::write(path, preamble(cfg) + body)?;
    Ok(())
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput { path: path.to_path_buf(), hint: format!("{what} not found; {hint}") })
    }
}

fn load_split(cfg: &ExperimentConfig, dataset: &Path) -> Result<Vec<InteractionEpisode>> {
    require(dataset, "dataset", "run `egodiff generate-data` first")?;
    let eps = read_dataset(dataset)?;
    split(cfg, &eps)?;
    Ok(eps)
}

fn load_vae(path: &Path) -> Result<(VaeModel, Checkpoint)> {
    require(path, "VAE checkpoint", "run `egodiff train-vae` first")?;
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_vae()?, ck))
}

/// Paths of one trained model set on disk.
#[derive(Debug, Clone, Copy)]
pub struct ModelPaths<'a> {
    pub vae: &'a Path,
    pub denoiser: &'a Path,
    /// Required when the denoiser uses scene conditioning.
    pub scene_encoder: Option<&'a Path>,
}

/// Loads a model set; conditioning, offset and schedule come from the
/// config embedded in the denoiser checkpoint.
pub fn load_models(paths: ModelPaths<'_>) -> Result<(TrainedModels, ExperimentConfig)> {
    let (vae, _) = load_vae(paths.vae)?;
    require(paths.denoiser, "denoiser checkpoint", "run `egodiff train-denoiser` first")?;
    let dck = Checkpoint::load(paths.denoiser)?;
    let denoiser = dck.to_denoiser()?;
    let trained = dck.config.clone();
    let flags = trained.flags();
    let scene_encoder = if flags.scene {
        let p = paths.scene_encoder.ok_or_else(|| Error::MissingInput {
            path: "<scene encoder>".into(),
            hint: "this denoiser uses scene conditioning; pass --scene-encoder".into(),
        })?;
        require(p, "scene-encoder checkpoint", "train-denoiser writes it next to the denoiser")?;
        Some(Checkpoint::load(p)?.to_scene_encoder()?)
    } else {
        None
    };
    let models = TrainedModels {
        vae,
        denoiser,
        scene_encoder,
        flags,
        offset: trained.interactee_offset,
        schedule: trained.denoiser_training(flags).schedule()?,
        scene_points: trained.scene_encoder_points,
        inference_steps: trained.inference_steps,
    };
    Ok((models, trained))
}

pub fn cmd_generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    let eps = generate_data(cfg)?;
    write_dataset(&eps, out)?;
    Ok(eps.len())
}

fn vae_log_csv(log: &[VaeStepLog]) -> String {
    let mut s = "step,total,reconstruction,kl\n".to_string();
    for l in log {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", l.step, l.total, l.reconstruction, l.kl);
    }
    s
}

/// Trains the VAE on the training split and writes the checkpoint plus a
/// `<out>.log.csv` loss log.
pub fn cmd_train_vae(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<Vec<VaeStepLog>> {
    cfg.validate()?;
    let eps = load_split(cfg, dataset)?;
    let (train, _) = split(cfg, &eps)?;
    let (vae, log) = train_vae_on(cfg, train)?;
    Checkpoint::from_store(ModelKind::Vae, cfg.seed, cfg, vae.params())?.save(out)?;
    write_text(&log_path(out), cfg, &vae_log_csv(&log))?;
    Ok(log)
}

fn log_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    s.into()
}

/// Trains the denoiser under the config's conditioning flags and interactee
/// offset. With scene conditioning, the warmed-up scene encoder is saved to
/// `scene_out`.
pub fn cmd_train_denoiser(
    cfg: &ExperimentConfig,
    dataset: &Path,
    vae_ckpt: &Path,
    out: &Path,
    scene_out: Option<&Path>,
) -> Result<DenoiserRun> {
    cfg.validate()?;
    let flags = cfg.flags();
    if flags.scene && scene_out.is_none() {
        return Err(Error::Precondition("scene conditioning is on; give a path for the scene-encoder checkpoint".into()));
    }
    let eps = load_split(cfg, dataset)?;
    let (train, _) = split(cfg, &eps)?;
    let (vae, vck) = load_vae(vae_ckpt)?;
    if vck.config.vae_model() != cfg.vae_model() {
        return Err(Error::Precondition("the VAE checkpoint was trained with a different VAE architecture".into()));
    }
    let run = train_denoiser_on(cfg, &vae, train, flags, cfg.interactee_offset)?;
    Checkpoint::from_store(ModelKind::Denoiser, cfg.seed, cfg, run.denoiser.params())?.save(out)?;
    if let (Some(enc), Some(path)) = (&run.scene_encoder, scene_out) {
        Checkpoint::from_store(ModelKind::SceneEncoder, cfg.seed, cfg, enc.params())?.save(path)?;
    }
    let mut log = "step,loss,scene_trainable\n".to_string();
    for l in &run.log {
        let _ = writeln!(log, "{},{:.6},{}", l.step, l.loss, l.scene_trainable);
    }
    write_text(&log_path(out), cfg, &log)?;
    Ok(run)
}

/// Generated wearer motion for every test episode: a header with the
/// config snapshot, then `samples × test_episodes` sequences of `F×V` f32.
pub fn encode_samples(cfg: &ExperimentConfig, samples: &[Vec<PoseSequence>]) -> Result<Vec<u8>> {
    let first = samples.first().and_then(|s| s.first()).ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let mut h = Header::default();
    h.push("version", crate::VERSION);
    h.push("hypotheses", samples.len());
    h.push("sequences", samples[0].len());
    h.push("frames", first.frames());
    h.push("joints", first.joints());
    h.push("fps", first.fps());
    h.push("layout", "hypothesis-major");
    for (k, v) in cfg.entries() {
        h.push(&format!("config.{k}"), v);
    }
    let mut out = h.encode(SAMPLES_MAGIC).into_bytes();
    for seq in samples.iter().flatten() {
        push_f32s(&mut out, seq.as_slice());
    }
    Ok(out)
}

pub fn cmd_sample(cfg: &ExperimentConfig, models: ModelPaths<'_>, dataset: &Path, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let (models, _) = load_models(models)?;
    let eps = load_split(cfg, dataset)?;
    let (_, test) = split(cfg, &eps)?;
    let samples = sample_on(cfg, &models, test)?;
    std::fs::write(out, encode_samples(cfg, &samples)?)?;
    Ok(samples.iter().map(Vec::len).sum())
}

/// Writes `metrics.csv`, `metrics.txt` and `per_sequence.csv` into `out_dir`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, models: ModelPaths<'_>, dataset: &Path, out_dir: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    let (models, _) = load_models(models)?;
    let eps = load_split(cfg, dataset)?;
    let (_, test) = split(cfg, &eps)?;
    let eval = evaluate_on(cfg, &models, test)?;
    std::fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("metrics.csv"), cfg, &evaluation_csv(&eval))?;
    write_text(&out_dir.join("metrics.txt"), cfg, &evaluation_table(&eval))?;
    write_text(&out_dir.join("per_sequence.csv"), cfg, &eval.per_sequence_csv())?;
    Ok(eval)
}

/// Writes the ablation CSV to `out` and an aligned table to `<out>.txt`.
/// Stratification axes score the given denoiser; the `future` and
/// `conditioning` axes train their variants from the VAE checkpoint.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    vae_ckpt: &Path,
    denoiser: Option<ModelPaths<'_>>,
    dataset: &Path,
    axis: AblationAxis,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let eps = load_split(cfg, dataset)?;
    let (train, test) = split(cfg, &eps)?;
    let rows = if axis.needs_denoiser() {
        let paths = denoiser.ok_or_else(|| Error::MissingInput {
            path: "<denoiser>".into(),
            hint: format!("the {} axis scores a trained denoiser; pass --denoiser", axis.name()),
        })?;
        let (models, _) = load_models(ModelPaths { vae: vae_ckpt, ..paths })?;
        stratified_rows(cfg, &models, test, axis)?
    } else {
        let (vae, _) = load_vae(vae_ckpt)?;
        variant_rows(cfg, &vae, train, test, axis)?
    };
    write_text(out, cfg, &ablation_csv(&rows))?;
    let mut txt = out.as_os_str().to_owned();
    txt.push(".txt");
    write_text(Path::new(&txt), cfg, &ablation_table(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_table_pads_columns() {
        let t = aligned(&["a", "long header"], &[vec!["wide cell".into(), "1".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].len(), lines[2].len().max(lines[0].len()));
        assert!(lines[1].starts_with("---------"));
    }

    #[test]
    fn ablation_csv_layout() {
        let m = MetricsReport {
            mpjpe: 1.0,
            orientation_error: 2.0,
            translation_error: 3.0,
            acceleration_error: 4.0,
            frame_count: 5,
            joint_count: 24,
        };
        let rows = vec![
            AblationRow { axis: "distance".into(), label: "d<1".into(), count: 2, mean_of_k: Some(m), best_of_k: Some(m) },
            AblationRow { axis: "distance".into(), label: "d>=2".into(), count: 0, mean_of_k: None, best_of_k: None },
        ];
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("axis,stratum,count,mean_mpjpe_mm"));
        assert!(lines[1].starts_with("distance,d<1,2,1.000000,2.000000"));
        assert!(lines[2].ends_with("nan,nan,nan,nan"));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }

    #[test]
    fn axes_parse() {
        for a in ["distance", "gaze30", "gaze60", "future", "conditioning"] {
            assert_eq!(a.parse::<AblationAxis>().unwrap().name(), a);
        }
        assert!("height".parse::<AblationAxis>().is_err());
        assert_eq!(CONDITIONING_VARIANTS.map(|v| v.0), ["w/o Scene", "w/o Int.ee", "full"]);
    }

    #[test]
    fn preamble_embeds_version_and_config() {
        let cfg = ExperimentConfig::default();
        let p = preamble(&cfg);
        assert!(p.starts_with(&format!("# version: {}", crate::VERSION)));
        assert!(p.contains("# config.latent_dim: 256"));
        assert_eq!(p.lines().count(), 1 + ExperimentConfig::keys().len());
    }
}
