//! Synthetic joint values for the five-joint inchworm.
//!
//! Each primitive is a fixed piecewise-linear keyframe table over its
//! progress in [0, 1]. These are display values, not kinematics.

use serde::{Deserialize, Serialize};

use crate::simulator::{EventKind, SimConfig, SimEvent};

/// Joint sample rate in sim time.
pub const JOINT_RATE_HZ: f64 = 5.0;

pub type Joints = [f64; 5];

const REST: Joints = [0.0, 30.0, 0.0, 30.0, 0.0];
const REACH: Joints = [0.0, 30.0, 0.0, 75.0, -45.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Step,
    Load,
    Drop,
    Retract,
    Stomp,
}

impl Primitive {
    pub fn keyframes(self) -> &'static [(f64, Joints)] {
        match self {
            // swing the free foot over the hip
            Primitive::Step => &[(0.0, [0.0, 20.0, -90.0, 20.0, 0.0]), (1.0, [0.0, 40.0, 90.0, 40.0, 0.0])],
            Primitive::Load => &[(0.0, REST), (0.5, [0.0, 10.0, 0.0, 60.0, -30.0]), (1.0, REST)],
            Primitive::Drop => &[(0.0, REST), (1.0, REACH)],
            Primitive::Retract => &[(0.0, REACH), (1.0, REST)],
            Primitive::Stomp => &[(0.0, REST), (0.5, [0.0, 45.0, 0.0, 45.0, 20.0]), (1.0, REST)],
        }
    }

    pub fn joints(self, progress: f64) -> Joints {
        let kf = self.keyframes();
        let u = progress.clamp(0.0, 1.0);
        let k = kf.windows(2).position(|w| u <= w[1].0).unwrap_or(kf.len() - 2);
        let (u0, a) = kf[k];
        let (u1, b) = kf[k + 1];
        let s = if u1 > u0 { (u - u0) / (u1 - u0) } else { 1.0 };
        std::array::from_fn(|j| a[j] + (b[j] - a[j]) * s)
    }
}

/// One primitive played by one robot over `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub robot: String,
    pub primitive: Primitive,
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<usize>,
}

/// Motions implied by a trace; the arm retract follows every drop.
pub fn motions(trace: &[SimEvent], cfg: &SimConfig) -> Vec<Motion> {
    let mut out = Vec::new();
    for e in trace {
        let prim = match e.kind {
            EventKind::Step => Primitive::Step,
            EventKind::Load => Primitive::Load,
            EventKind::Drop => Primitive::Drop,
            EventKind::Stomp => Primitive::Stomp,
            _ => continue,
        };
        if e.dur <= 0.0 {
            continue;
        }
        let m = Motion { robot: e.robot.clone(), primitive: prim, start: e.t, end: e.end(), placement: e.placement };
        if prim == Primitive::Drop {
            let end = m.end;
            out.push(m);
            out.push(Motion {
                robot: e.robot.clone(),
                primitive: Primitive::Retract,
                start: end,
                end: end + cfg.t_retract,
                placement: e.placement,
            });
        } else {
            out.push(m);
        }
    }
    out.sort_by(|a, b| a.start.total_cmp(&b.start));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub robot: String,
    pub t: f64,
    pub primitive: Primitive,
    pub progress: f64,
    pub joints: Joints,
    pub synthetic: bool,
}

/// Joint state of the motion active at `t`, if any.
pub fn sample(m: &Motion, t: f64) -> Option<JointState> {
    if t < m.start || t >= m.end {
        return None;
    }
    let progress = (t - m.start) / (m.end - m.start);
    Some(JointState {
        robot: m.robot.clone(),
        t,
        primitive: m.primitive,
        progress,
        joints: m.primitive.joints(progress),
        synthetic: true,
    })
}
