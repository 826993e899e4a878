//! Interaction proxies used to slice evaluations: interpersonal distance,
//! mutual gaze, and future-shifted interactee windows.

use crate::body::{
    forward_kinematics_full, joint, matrix_to_euler, BodyModel, EulerOrder, PoseSequence,
    RotationMatrix, Vec3,
};
use crate::error::{invalid, Result};

/// Per-frame Euclidean distance between the two root translations (m).
pub fn root_distance(wearer: &PoseSequence, interactee: &PoseSequence) -> Result<Vec<f64>> {
    if wearer.frames() != interactee.frames() {
        return Err(invalid(format!(
            "sequences differ in length: {} vs {}",
            wearer.frames(),
            interactee.frames()
        )));
    }
    Ok((0..wearer.frames())
        .map(|t| (Vec3::from(wearer.transl(t)) - Vec3::from(interactee.transl(t))).norm())
        .collect())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistanceStratum {
    /// d < 1 m
    Near,
    /// 1 ≤ d < 2 m
    Mid,
    /// d ≥ 2 m
    Far,
}

impl DistanceStratum {
    pub const ALL: [DistanceStratum; 3] = [
        DistanceStratum::Far,
        DistanceStratum::Mid,
        DistanceStratum::Near,
    ];

    pub fn of(distance: f64) -> Self {
        if distance < 1.0 {
            DistanceStratum::Near
        } else if distance < 2.0 {
            DistanceStratum::Mid
        } else {
            DistanceStratum::Far
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DistanceStratum::Near => "d<1",
            DistanceStratum::Mid => "1<=d<2",
            DistanceStratum::Far => "d>=2",
        }
    }
}

/// Index lists of a partition into distance strata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistanceStrata {
    pub near: Vec<usize>,
    pub mid: Vec<usize>,
    pub far: Vec<usize>,
}

impl DistanceStrata {
    pub fn get(&self, s: DistanceStratum) -> &[usize] {
        match s {
            DistanceStratum::Near => &self.near,
            DistanceStratum::Mid => &self.mid,
            DistanceStratum::Far => &self.far,
        }
    }
}

/// Assigns each pair by its median per-frame root distance.
pub fn stratify_by_distance(pairs: &[(&PoseSequence, &PoseSequence)]) -> Result<DistanceStrata> {
    let mut out = DistanceStrata::default();
    for (i, (w, p)) in pairs.iter().enumerate() {
        let d = median(&root_distance(w, p)?).ok_or_else(|| invalid("empty sequence"))?;
        match DistanceStratum::of(d) {
            DistanceStratum::Near => out.near.push(i),
            DistanceStratum::Mid => out.mid.push(i),
            DistanceStratum::Far => out.far.push(i),
        }
    }
    Ok(out)
}

const FORWARD: [f64; 3] = [0.0, 0.0, 1.0];

/// The rotated body-forward axis (+Z).
pub fn gaze_direction(head: &RotationMatrix) -> Vec3 {
    head.rotate(&Vec3::from(FORWARD))
}

/// Same direction obtained through heading/pitch Euler angles (y-up,
/// `Ry·Rx·Rz`); roll about the forward axis does not move it.
pub fn gaze_direction_euler(head: &RotationMatrix) -> Vec3 {
    let e = matrix_to_euler(head, EulerOrder::Yxz);
    let [h, p, _] = e.angles;
    Vec3::new(p.cos() * h.sin(), -p.sin(), p.cos() * h.cos())
}

/// Global head rotation of every frame.
pub fn head_rotations(seq: &PoseSequence, body: &BodyModel) -> Result<Vec<RotationMatrix>> {
    (0..seq.frames())
        .map(|t| Ok(forward_kinematics_full(seq.frame(t), body)?.rotations[joint::HEAD]))
        .collect()
}

/// Angle between two vectors in degrees; `None` if either is zero.
pub fn angle_deg(a: &Vec3, b: &Vec3) -> Option<f64> {
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return None;
    }
    Some(a.cross(b).norm().atan2(a.dot(b)).to_degrees())
}

/// How the two gaze vectors are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GazeTest {
    /// Each agent's gaze against the line of sight to the other.
    #[default]
    LineOfSight,
    /// The wearer's gaze against the reversed interactee gaze.
    GazeVsGaze,
}

/// Boundary slack so that constructions at exactly θ count as mutual.
const ANGLE_SLACK_DEG: f64 = 1e-9;

/// Per-frame mutual-gaze flags. Frames with coincident roots are never
/// mutual under the line-of-sight test.
pub fn mutual_gaze(
    wearer: &PoseSequence,
    interactee: &PoseSequence,
    theta_deg: f64,
    test: GazeTest,
    body: &BodyModel,
) -> Result<Vec<bool>> {
    if !(theta_deg > 0.0 && theta_deg < 180.0) {
        return Err(invalid(format!(
            "gaze threshold must lie in (0°, 180°), got {theta_deg}"
        )));
    }
    if wearer.frames() != interactee.frames() {
        return Err(invalid("sequences differ in length"));
    }
    let hw = head_rotations(wearer, body)?;
    let hi = head_rotations(interactee, body)?;
    Ok((0..wearer.frames())
        .map(|t| {
            let gw = gaze_direction(&hw[t]);
            let gi = gaze_direction(&hi[t]);
            let within = |a: Option<f64>| a.is_some_and(|a| a <= theta_deg + ANGLE_SLACK_DEG);
            match test {
                GazeTest::LineOfSight => {
                    let los = Vec3::from(interactee.transl(t)) - Vec3::from(wearer.transl(t));
                    within(angle_deg(&gw, &los)) && within(angle_deg(&gi, &-los))
                }
                GazeTest::GazeVsGaze => within(angle_deg(&gw, &-gi)),
            }
        })
        .collect())
}

/// A pair is mutual when at least half of its frames are.
pub fn is_mutual_sequence(flags: &[bool]) -> bool {
    !flags.is_empty() && 2 * flags.iter().filter(|&&f| f).count() >= flags.len()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GazeStrata {
    pub mutual: Vec<usize>,
    pub non_mutual: Vec<usize>,
}

pub fn stratify_by_gaze(
    pairs: &[(&PoseSequence, &PoseSequence)],
    theta_deg: f64,
    test: GazeTest,
    body: &BodyModel,
) -> Result<GazeStrata> {
    let mut out = GazeStrata::default();
    for (i, (w, p)) in pairs.iter().enumerate() {
        if is_mutual_sequence(&mutual_gaze(w, p, theta_deg, test, body)?) {
            out.mutual.push(i);
        } else {
            out.non_mutual.push(i);
        }
    }
    Ok(out)
}

/// The interactee window of length `frames` starting `offset` frames into
/// the recording. Offset 0 is the present window.
pub fn future_shift(
    recording: &PoseSequence,
    frames: usize,
    offset: usize,
) -> Result<PoseSequence> {
    if offset + frames > recording.frames() {
        return Err(invalid(format!(
            "offset {offset} + window {frames} exceeds the {}-frame recording",
            recording.frames()
        )));
    }
    recording.window(offset, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{pose_dim, RotationMatrix};
    use std::f64::consts::PI;

    fn standing(frames: usize, at: [f32; 3], yaw: f32) -> PoseSequence {
        let mut frame = vec![0.0f32; pose_dim(24)];
        frame[1] = yaw;
        frame[72..75].copy_from_slice(&at);
        PoseSequence::new(frame.repeat(frames), 24, 30.0).unwrap()
    }

    #[test]
    fn distance_examples() {
        let a = standing(3, [0.0, 0.0, 0.0], 0.0);
        let b = standing(3, [0.6, 0.8, 0.0], 0.0);
        assert_eq!(root_distance(&a, &a).unwrap(), vec![0.0; 3]);
        for d in root_distance(&a, &b).unwrap() {
            assert!((d - 1.0).abs() < 1e-7);
        }
        assert!(root_distance(&a, &standing(4, [0.0; 3], 0.0)).is_err());
    }

    #[test]
    fn distance_boundaries() {
        assert_eq!(DistanceStratum::of(0.5), DistanceStratum::Near);
        assert_eq!(DistanceStratum::of(1.5), DistanceStratum::Mid);
        assert_eq!(DistanceStratum::of(1.0), DistanceStratum::Mid);
        assert_eq!(DistanceStratum::of(2.0), DistanceStratum::Far);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
    }

    #[test]
    fn gaze_examples() {
        assert!(
            (gaze_direction(&RotationMatrix::identity()) - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15
        );
        assert!(
            (gaze_direction(&RotationMatrix::about_y(PI)) - Vec3::new(0.0, 0.0, -1.0)).norm()
                < 1e-9
        );
        let r = RotationMatrix::about_y(0.7)
            .compose(&RotationMatrix::about_x(-0.3))
            .compose(&RotationMatrix::about_z(1.1));
        assert!((gaze_direction(&r) - gaze_direction_euler(&r)).norm() < 1e-12);
    }

    #[test]
    fn mutual_gaze_examples() {
        let body = BodyModel::smpl_like();
        let w = standing(2, [0.0, 0.0, 0.0], 0.0);
        let facing = standing(2, [0.0, 0.0, 2.0], PI as f32);
        let same = standing(2, [0.0, 0.0, 2.0], 0.0);
        assert_eq!(
            mutual_gaze(&w, &facing, 30.0, GazeTest::LineOfSight, &body).unwrap(),
            vec![true; 2]
        );
        assert_eq!(
            mutual_gaze(&w, &same, 30.0, GazeTest::LineOfSight, &body).unwrap(),
            vec![false; 2]
        );
        assert_eq!(
            mutual_gaze(&w, &w, 60.0, GazeTest::LineOfSight, &body).unwrap(),
            vec![false; 2]
        );
        assert!(mutual_gaze(&w, &facing, 0.0, GazeTest::LineOfSight, &body).is_err());
        assert!(mutual_gaze(&w, &facing, 180.0, GazeTest::LineOfSight, &body).is_err());
        assert_eq!(
            mutual_gaze(&w, &facing, 30.0, GazeTest::GazeVsGaze, &body).unwrap(),
            vec![true; 2]
        );
    }

    #[test]
    fn boundary_angle_counts_as_mutual() {
        let body = BodyModel::smpl_like();
        // Interactee straight ahead of the wearer, turned 30° off the line of sight.
        let w = standing(1, [0.0, 0.0, 0.0], 0.0);
        let i = standing(1, [0.0, 0.0, 2.0], (PI - PI / 6.0) as f32);
        let angle = angle_deg(
            &gaze_direction(&head_rotations(&i, &body).unwrap()[0]),
            &Vec3::new(0.0, 0.0, -2.0),
        )
        .unwrap();
        assert!((angle - 30.0).abs() < 1e-5);
        assert_eq!(
            mutual_gaze(&w, &i, angle, GazeTest::LineOfSight, &body).unwrap(),
            vec![true]
        );
    }

    #[test]
    fn sequence_level_gaze_rule() {
        assert!(is_mutual_sequence(&[true, true]));
        assert!(!is_mutual_sequence(&[false, false]));
        assert!(is_mutual_sequence(&[true, false, false, true]));
        assert!(!is_mutual_sequence(&[true, false, false]));
        assert!(!is_mutual_sequence(&[]));
    }

    #[test]
    fn future_shift_examples() {
        let data: Vec<f32> = (0..10 * 75).map(|i| (i / 75) as f32).collect();
        let rec = PoseSequence::new(data, 24, 30.0).unwrap();
        assert_eq!(future_shift(&rec, 6, 0).unwrap(), rec.window(0, 6).unwrap());
        assert_eq!(future_shift(&rec, 6, 3).unwrap().frame(0)[0], 3.0);
        assert!(future_shift(&rec, 6, 5).is_err());
    }
}
