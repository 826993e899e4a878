//! Evaluation metrics (joint position, root orientation, root translation,
//! acceleration) and the generate-then-score evaluation loop.

use std::fmt::Write as _;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::body::{axis_angle_to_matrix, sequence_joints, BodyModel, PoseSequence, RotationMatrix};
use crate::conditioning::{
    build_condition_bundle, subsample_pointcloud, CondFlags, SceneEncoder, ScenePointCloud,
};
use crate::diffusion::{ddim_sample_batch, Denoiser, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::seeding;
use crate::vae::{LatentCode, VaeModel};

fn check_same(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(invalid(format!("shape {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean Euclidean joint distance in mm; inputs `T×J×3` in meters.
pub fn mpjpe(pred: ArrayView3<f64>, gt: ArrayView3<f64>) -> Result<f64> {
    check_same(pred.shape(), gt.shape())?;
    if pred.is_empty() {
        return Err(invalid("MPJPE needs at least one joint"));
    }
    let diff = &pred - &gt;
    let dist = diff.mapv(|v| v * v).sum_axis(Axis(2)).mapv(f64::sqrt);
    Ok(dist.mean().expect("non-empty") * 1000.0)
}

/// Mean over frames of `‖A_pred·A_gt⁻¹ − I‖_F`.
pub fn orientation_error(pred: &[RotationMatrix], gt: &[RotationMatrix]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(invalid(format!("{} vs {} rotations", pred.len(), gt.len())));
    }
    let eye = nalgebra::Matrix3::<f64>::identity();
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.compose(&g.inverse()).matrix() - eye).norm())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Mean root distance in mm; inputs `T×3` in meters.
pub fn translation_error(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<f64> {
    check_same(pred.shape(), gt.shape())?;
    if pred.nrows() == 0 || pred.ncols() != 3 {
        return Err(invalid(
            "translation error needs T ≥ 1 rows of 3 coordinates",
        ));
    }
    let diff = &pred - &gt;
    Ok(diff
        .mapv(|v| v * v)
        .sum_axis(Axis(1))
        .mapv(f64::sqrt)
        .mean()
        .expect("non-empty")
        * 1000.0)
}

/// Mean norm of the second-difference error, scaled to mm/s².
pub fn acceleration_error(pred: ArrayView3<f64>, gt: ArrayView3<f64>, fps: f64) -> Result<f64> {
    check_same(pred.shape(), gt.shape())?;
    let t = pred.shape()[0];
    if t < 3 {
        return Err(invalid(format!("acceleration needs T ≥ 3 frames, got {t}")));
    }
    if !(fps > 0.0) {
        return Err(invalid("fps must be positive"));
    }
    let accel = |x: &ArrayView3<f64>| -> Array3<f64> {
        &x.slice(s![2.., .., ..]) - &(&x.slice(s![1..t - 1, .., ..]) * 2.0)
            + x.slice(s![..t - 2, .., ..])
    };
    let d = accel(&pred) - accel(&gt);
    let norms = d.mapv(|v| v * v).sum_axis(Axis(2)).mapv(f64::sqrt);
    Ok(norms.mean().expect("non-empty") * fps * fps * 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// mm
    pub mpjpe: f64,
    pub orientation_error: f64,
    /// mm
    pub translation_error: f64,
    /// mm/s²
    pub acceleration_error: f64,
    pub frame_count: usize,
    pub joint_count: usize,
}

impl MetricsReport {
    /// Equal-weight mean of several reports; counts are summed.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let n = reports.len();
        if n == 0 {
            return Err(invalid("no reports to average"));
        }
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        Ok(MetricsReport {
            mpjpe: avg(|r| r.mpjpe),
            orientation_error: avg(|r| r.orientation_error),
            translation_error: avg(|r| r.translation_error),
            acceleration_error: avg(|r| r.acceleration_error),
            frame_count: reports.iter().map(|r| r.frame_count).sum(),
            joint_count: reports[0].joint_count,
        })
    }

    pub fn to_key_values(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}mpjpe_mm: {:.6}", self.mpjpe);
        let _ = writeln!(
            s,
            "{prefix}orientation_error: {:.6}",
            self.orientation_error
        );
        let _ = writeln!(
            s,
            "{prefix}translation_error_mm: {:.6}",
            self.translation_error
        );
        let _ = writeln!(
            s,
            "{prefix}acceleration_error_mm_s2: {:.6}",
            self.acceleration_error
        );
        let _ = writeln!(s, "{prefix}frame_count: {}", self.frame_count);
        let _ = writeln!(s, "{prefix}joint_count: {}", self.joint_count);
        s
    }

    pub const CSV_HEADER: &'static str =
        "mpjpe_mm,orientation_error,translation_error_mm,acceleration_error_mm_s2";

    pub fn csv_fields(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6}",
            self.mpjpe, self.orientation_error, self.translation_error, self.acceleration_error
        )
    }
}

/// Joint positions of a sequence as `T×J×3`.
pub fn joints_array(seq: &PoseSequence, body: &BodyModel) -> Result<Array3<f64>> {
    let joints = sequence_joints(seq, body)?;
    let (t, j) = (joints.len(), body.joint_count());
    Ok(Array3::from_shape_fn((t, j, 3), |(a, b, c)| {
        joints[a][b][c]
    }))
}

pub fn transl_array(seq: &PoseSequence) -> Array2<f64> {
    Array2::from_shape_fn((seq.frames(), 3), |(t, k)| seq.transl(t)[k])
}

pub fn root_rotations(seq: &PoseSequence) -> Result<Vec<RotationMatrix>> {
    (0..seq.frames())
        .map(|t| axis_angle_to_matrix(seq.global_orient(t)))
        .collect()
}

/// All four metrics of one predicted sequence against ground truth.
pub fn compare_sequences(
    pred: &PoseSequence,
    gt: &PoseSequence,
    body: &BodyModel,
) -> Result<MetricsReport> {
    if pred.frames() != gt.frames() || pred.joints() != gt.joints() {
        return Err(invalid(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.frames(),
            pred.joints(),
            gt.frames(),
            gt.joints()
        )));
    }
    let (jp, jg) = (joints_array(pred, body)?, joints_array(gt, body)?);
    Ok(MetricsReport {
        mpjpe: mpjpe(jp.view(), jg.view())?,
        orientation_error: orientation_error(&root_rotations(pred)?, &root_rotations(gt)?)?,
        translation_error: translation_error(transl_array(pred).view(), transl_array(gt).view())?,
        acceleration_error: acceleration_error(jp.view(), jg.view(), gt.fps() as f64)?,
        frame_count: gt.frames(),
        joint_count: gt.joints(),
    })
}

/// Frozen models used to generate wearer motion.
#[derive(Debug, Clone, Copy)]
pub struct ModelStack<'a> {
    pub vae: &'a VaeModel,
    pub denoiser: &'a Denoiser,
    pub scene_encoder: Option<&'a SceneEncoder>,
    pub schedule: &'a NoiseSchedule,
    pub inference_steps: usize,
    pub flags: CondFlags,
    pub scene_points: usize,
}

/// One evaluation input: ground-truth wearer motion plus whatever
/// conditioning the stack uses.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub wearer: &'a PoseSequence,
    pub interactee: Option<&'a PoseSequence>,
    pub scene: Option<&'a ScenePointCloud>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMetrics {
    pub index: usize,
    pub mean_of_k: MetricsReport,
    pub best_of_k: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub samples_per_input: usize,
    pub mean_of_k: MetricsReport,
    /// Lowest-MPJPE hypothesis per sequence, averaged over sequences.
    pub best_of_k: MetricsReport,
    pub per_sequence: Vec<SequenceMetrics>,
}

impl Evaluation {
    pub fn per_sequence_csv(&self) -> String {
        let mut s = format!(
            "index,{},{}\n",
            prefixed("mean_", MetricsReport::CSV_HEADER),
            prefixed("best_", MetricsReport::CSV_HEADER)
        );
        for r in &self.per_sequence {
            let _ = writeln!(
                s,
                "{},{},{}",
                r.index,
                r.mean_of_k.csv_fields(),
                r.best_of_k.csv_fields()
            );
        }
        s
    }
}

fn prefixed(p: &str, header: &str) -> String {
    header
        .split(',')
        .map(|h| format!("{p}{h}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Condition bundles for a batch of items under `stack.flags`.
pub fn condition_bundles(
    stack: &ModelStack<'_>,
    items: &[EvalItem<'_>],
) -> Result<Vec<crate::conditioning::ConditionBundle>> {
    let inter = if stack.flags.interactee {
        let seqs = items
            .iter()
            .map(|i| {
                i.interactee
                    .cloned()
                    .ok_or_else(|| Error::Precondition("item lacks an interactee sequence".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(stack.vae.encode_means(&seqs)?)
    } else {
        None
    };
    let scene = if stack.flags.scene {
        let enc = stack.scene_encoder.ok_or_else(|| {
            Error::Precondition("scene conditioning needs a trained scene encoder".into())
        })?;
        let clouds = items
            .iter()
            .enumerate()
            .map(|(k, i)| {
                let c = i
                    .scene
                    .ok_or_else(|| Error::Precondition("item lacks a scene".into()))?;
                subsample_pointcloud(c, stack.scene_points, seeding::child_seed(0x5ce, k as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(enc.encode_scenes(&clouds)?)
    } else {
        None
    };
    (0..items.len())
        .map(|k| {
            build_condition_bundle(
                inter.as_ref().map(|v| v[k].clone()),
                scene.as_ref().map(|v| v[k].clone()),
            )
        })
        .collect()
}

/// Decoded hypotheses, `out[k][i]` for seed `k` and item `i`. Hypothesis
/// `k` of item `i` starts from the noise of `child_seed(seeds[k], i)`.
pub fn generate_hypotheses(
    stack: &ModelStack<'_>,
    items: &[EvalItem<'_>],
    seeds: &[u64],
) -> Result<Vec<Vec<PoseSequence>>> {
    if items.is_empty() || seeds.is_empty() {
        return Err(invalid("generation needs at least one item and one seed"));
    }
    let frames = items[0].wearer.frames();
    let bundles = condition_bundles(stack, items)?;
    seeds
        .iter()
        .map(|&s| {
            let item_seeds: Vec<u64> = (0..items.len())
                .map(|i| seeding::child_seed(s, i as u64))
                .collect();
            let z: Vec<LatentCode> = ddim_sample_batch(
                stack.denoiser,
                stack.schedule,
                stack.inference_steps,
                &bundles,
                &item_seeds,
            )?;
            stack.vae.decode_batch(&z, frames)
        })
        .collect()
}

/// Generates `seeds.len()` hypotheses per item (see [`generate_hypotheses`])
/// and scores them against the ground-truth wearer motion.
pub fn evaluate_model(
    stack: &ModelStack<'_>,
    items: &[EvalItem<'_>],
    seeds: &[u64],
    body: &BodyModel,
) -> Result<Evaluation> {
    let generated = generate_hypotheses(stack, items, seeds)?;
    let mut hypotheses: Vec<Vec<MetricsReport>> =
        vec![Vec::with_capacity(seeds.len()); items.len()];
    for decoded in &generated {
        for (i, (pred, item)) in decoded.iter().zip(items).enumerate() {
            hypotheses[i].push(compare_sequences(pred, item.wearer, body)?);
        }
    }
    let per_sequence = hypotheses
        .iter()
        .enumerate()
        .map(|(index, h)| {
            let best = *h
                .iter()
                .min_by(|a, b| a.mpjpe.total_cmp(&b.mpjpe))
                .expect("k ≥ 1");
            Ok(SequenceMetrics {
                index,
                mean_of_k: MetricsReport::mean(h)?,
                best_of_k: best,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        samples_per_input: seeds.len(),
        mean_of_k: MetricsReport::mean(
            &per_sequence.iter().map(|r| r.mean_of_k).collect::<Vec<_>>(),
        )?,
        best_of_k: MetricsReport::mean(
            &per_sequence.iter().map(|r| r.best_of_k).collect::<Vec<_>>(),
        )?,
        per_sequence,
    })
}

/// Scores given predictions (no generation).
pub fn evaluate_predictions(
    preds: &[PoseSequence],
    gts: &[PoseSequence],
    body: &BodyModel,
) -> Result<Vec<MetricsReport>> {
    if preds.len() != gts.len() {
        return Err(invalid("prediction and ground-truth counts differ"));
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| compare_sequences(p, g, body))
        .collect()
}
