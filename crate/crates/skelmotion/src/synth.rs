//! Procedural motion generation: parameterized walkers and idle clips with
//! ground-truth rotations, used to build training and evaluation corpora.
//!
//! Clips are generated in metres, +Y up, advancing along +Z, at 30 fps.
//! Stance feet are placed by analytic two-bone IK so planted feet are exactly
//! stationary and the contact extractor sees crisp stance phases.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fk::fk_global;
use crate::motion::{extract_foot_contacts, MotionSequence};
use crate::rotation::{quat_mul, quat_normalize, Quat, Representation, RotationSeq, QUAT_IDENTITY};
use crate::skeleton::{build_tpose, Skeleton};
use crate::topology::{group, joint, GROUP_COUNT, JOINT_COUNT};

pub const SYNTH_FPS: f64 = 30.0;
/// Clip units are metres: 0.001 units per millimetre.
pub const SYNTH_UNITS_PER_MM: f64 = 0.001;

/// Human-ish bone lengths in metres, mildly randomized per subject.
pub fn sample_skeleton_metric(rng: &mut ChaCha8Rng) -> Skeleton {
    let mut lengths = [0.0; GROUP_COUNT];
    lengths[group::SPINE_HALF] = rng.random_range(0.20..0.25);
    lengths[group::NECK] = rng.random_range(0.10..0.14);
    lengths[group::HEAD] = rng.random_range(0.12..0.16);
    lengths[group::SHOULDER] = rng.random_range(0.16..0.20);
    lengths[group::UPPER_ARM] = rng.random_range(0.26..0.32);
    lengths[group::FOREARM] = rng.random_range(0.24..0.28);
    lengths[group::HIP] = rng.random_range(0.09..0.12);
    lengths[group::THIGH] = rng.random_range(0.40..0.46);
    lengths[group::SHIN] = rng.random_range(0.38..0.44);
    Skeleton::new(lengths).unwrap()
}

fn quat_x(angle: f64) -> Quat {
    crate::rotation::quat_about_axis(0, angle)
}

fn quat_z(angle: f64) -> Quat {
    crate::rotation::quat_about_axis(2, angle)
}

/// Shortest-arc rotation taking unit vector `from` onto unit vector `to`.
fn shortest_arc(from: [f64; 3], to: [f64; 3]) -> Quat {
    let c = crate::rotation::cross(&from, &to);
    let d = crate::rotation::dot(&from, &to);
    quat_normalize(&[1.0 + d, c[0], c[1], c[2]]).unwrap_or(QUAT_IDENTITY)
}

fn quat_conj(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

fn rotate_vec(q: &Quat, v: [f64; 3]) -> [f64; 3] {
    let m = crate::rotation::quat_to_matrix(q).unwrap();
    crate::rotation::mat_vec(&m, &v)
}

/// Two-bone IK in 3D. `lateral` is the body's sideways axis; the knee bends
/// about it, bowing toward the body's forward direction. Returns the global
/// rotations for the knee-level and ankle-level joints, i.e. rotations taking
/// the rest direction (0,-1,0) onto the thigh and shin directions.
fn leg_ik(hip: [f64; 3], ankle: [f64; 3], l1: f64, l2: f64, lateral: [f64; 3]) -> (Quat, Quat) {
    let mut d = [ankle[0] - hip[0], ankle[1] - hip[1], ankle[2] - hip[2]];
    let mut r = crate::rotation::norm(&d);
    let r_min = (l1 - l2).abs() + 1e-6;
    let r_max = l1 + l2 - 1e-6;
    let clamped = r.clamp(r_min, r_max);
    if r < 1e-9 {
        d = [0.0, -1.0, 0.0];
        r = 1.0;
    }
    let dir = [d[0] / r, d[1] / r, d[2] / r];
    let r = clamped;
    // angle at the hip between the hip->ankle line and the thigh
    let cos_delta = ((l1 * l1 + r * r - l2 * l2) / (2.0 * l1 * r)).clamp(-1.0, 1.0);
    let delta = cos_delta.acos();
    // knee axis: the lateral hint projected perpendicular to the hip->ankle
    // line, so the bend angle is exact and the knee bows forward
    let h_dot = lateral[0] * dir[0] + lateral[1] * dir[1] + lateral[2] * dir[2];
    let mut axis = [
        lateral[0] - h_dot * dir[0],
        lateral[1] - h_dot * dir[1],
        lateral[2] - h_dot * dir[2],
    ];
    let axis_n = crate::rotation::norm(&axis);
    if axis_n < 1e-9 {
        axis = [0.0, 0.0, 1.0];
    } else {
        for a in &mut axis {
            *a /= axis_n;
        }
    }
    let half = -delta / 2.0;
    let (s, c) = half.sin_cos();
    let bend = [c, s * axis[0], s * axis[1], s * axis[2]];
    let thigh_dir = rotate_vec(&bend, dir);
    let knee = [
        hip[0] + l1 * thigh_dir[0],
        hip[1] + l1 * thigh_dir[1],
        hip[2] + l1 * thigh_dir[2],
    ];
    let target = [
        hip[0] + r * dir[0],
        hip[1] + r * dir[1],
        hip[2] + r * dir[2],
    ];
    let shin = [target[0] - knee[0], target[1] - knee[1], target[2] - knee[2]];
    let shin_n = crate::rotation::norm(&shin);
    let shin_dir = [shin[0] / shin_n, shin[1] / shin_n, shin[2] / shin_n];
    let rest = [0.0, -1.0, 0.0];
    (shortest_arc(rest, thigh_dir), shortest_arc(rest, shin_dir))
}

/// Smoothstep easing for the swing-phase foot path.
fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

struct GaitParams {
    period: f64,      // frames per full gait cycle
    speed: f64,       // metres per frame along the path
    duty: f64,        // stance fraction of the cycle
    step_height: f64, // swing apex in metres
    bob: f64,
    arm_swing: f64,
    elbow_flex: f64,
    lean: f64,
    /// Walkers follow a circle so clips of any length stay inside a bounded
    /// capture volume.
    radius: f64,
    turn_dir: f64, // +1 or -1
}

impl GaitParams {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            period: rng.random_range(44.0..60.0),
            speed: rng.random_range(0.009..0.014),
            duty: 0.6,
            step_height: rng.random_range(0.04..0.08),
            bob: rng.random_range(0.005..0.012),
            arm_swing: rng.random_range(0.2..0.5),
            elbow_flex: rng.random_range(0.1..0.4),
            lean: rng.random_range(0.02..0.08),
            radius: rng.random_range(0.45..0.8),
            turn_dir: if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 },
        }
    }

    /// Path angle at frame t (radians along the circle).
    fn path_angle(&self, t: f64) -> f64 {
        self.turn_dir * self.speed * t / self.radius
    }

    /// Root position on the circle (without bob) and its facing yaw.
    fn root_on_path(&self, t: f64) -> ([f64; 2], f64) {
        let phi = self.path_angle(t);
        let xz = [self.radius * phi.sin(), self.radius * phi.cos()];
        // body +Z aligns with the path tangent
        let yaw = phi + self.turn_dir * std::f64::consts::FRAC_PI_2;
        (xz, yaw)
    }
}

/// Foot target along the gait cycle. `phase_offset` is 0 for the left foot
/// and 0.5 for the right; `side` is +1 for the left foot.
fn foot_target(t: f64, gait: &GaitParams, phase_offset: f64, side: f64, hip_off: f64) -> [f64; 3] {
    let cycle = t / gait.period - phase_offset;
    let k = cycle.floor();
    let phase = cycle - k; // [0, 1)
    // plant of cycle k: the foot's lateral offset applied at the stance
    // midpoint's path pose
    let plant = |k: f64| -> [f64; 2] {
        let t_mid = (k + phase_offset + gait.duty / 2.0) * gait.period;
        let (root_xz, yaw) = gait.root_on_path(t_mid);
        let (s, c) = yaw.sin_cos();
        // body-space (side * hip_off, 0, 0) rotated by yaw about +Y
        [root_xz[0] + c * side * hip_off, root_xz[1] - s * side * hip_off]
    };
    if phase < gait.duty {
        let p = plant(k);
        [p[0], 0.0, p[1]]
    } else {
        let s = (phase - gait.duty) / (1.0 - gait.duty);
        let a = plant(k);
        let b = plant(k + 1.0);
        let w = smoothstep(s);
        let y = gait.step_height * (std::f64::consts::PI * s).sin().max(0.0);
        [a[0] + w * (b[0] - a[0]), y, a[1] + w * (b[1] - a[1])]
    }
}

fn assemble_clip(
    skeleton: Skeleton,
    rot_values: Array3<f64>,
    root: Array2<f64>,
    source_id: String,
) -> Result<MotionSequence> {
    let rotations = RotationSeq::new(Representation::Quaternion, rot_values)?;
    let tpose = build_tpose(&skeleton)?;
    let positions = fk_global(&tpose, &rotations, &root)?;
    let mut seq = MotionSequence {
        positions,
        rotations: Some(rotations),
        root,
        contacts: Array2::zeros((0, 2)),
        skeleton,
        source_id,
        units_per_mm: SYNTH_UNITS_PER_MM,
        fps: SYNTH_FPS,
    };
    seq.contacts = extract_foot_contacts(&seq)?;
    seq.check_consistency(1e-6)?;
    Ok(seq)
}

fn set_quat(values: &mut Array3<f64>, t: usize, j: usize, q: &Quat) {
    for (k, &v) in q.iter().enumerate() {
        values[[t, j, k]] = v;
    }
}

/// A walking clip with randomized gait and skeleton.
pub fn generate_walker(frames: usize, rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
    let skeleton = sample_skeleton_metric(rng);
    let gait = GaitParams::sample(rng);
    let seed_tag = rng.random_range(0..u32::MAX);

    let l1 = skeleton.lengths[group::THIGH];
    let l2 = skeleton.lengths[group::SHIN];
    let hip_off = skeleton.lengths[group::HIP];
    let pelvis_height = 0.88 * (l1 + l2);

    let mut rot = Array3::zeros((frames, JOINT_COUNT, 4));
    let mut root = Array2::zeros((frames, 3));
    let two_pi = 2.0 * std::f64::consts::PI;

    for t in 0..frames {
        let tf = t as f64;
        let (path_xz, yaw) = gait.root_on_path(tf);
        let root_y = pelvis_height + gait.bob * (2.0 * two_pi * tf / gait.period).sin();
        let root_pos = [path_xz[0], root_y, path_xz[1]];
        for k in 0..3 {
            root[[t, k]] = root_pos[k];
        }

        for j in 0..JOINT_COUNT {
            set_quat(&mut rot, t, j, &QUAT_IDENTITY);
        }
        let q_root = crate::rotation::quat_about_axis(1, yaw);
        set_quat(&mut rot, t, joint::PELVIS, &quat_normalize(&q_root).unwrap());
        // gentle forward lean of the torso
        set_quat(&mut rot, t, joint::SPINE, &quat_x(gait.lean));

        // legs: IK from the hip sockets to the cyclic foot targets
        let lateral = rotate_vec(&q_root, [1.0, 0.0, 0.0]);
        for (hip_joint, knee_joint, foot_joint, side, phase) in [
            (joint::L_HIP, joint::L_KNEE, joint::L_FOOT, 1.0, 0.0),
            (joint::R_HIP, joint::R_KNEE, joint::R_FOOT, -1.0, 0.5),
        ] {
            let hip = [
                root_pos[0] + side * hip_off * lateral[0],
                root_pos[1] + side * hip_off * lateral[1],
                root_pos[2] + side * hip_off * lateral[2],
            ];
            let ankle = foot_target(tf, &gait, phase, side, hip_off);
            let (q_thigh, q_shin) = leg_ik(hip, ankle, l1, l2, lateral);
            // local rotations: hip-level joints stay identity under the
            // root, knees carry the thigh, ankles the shin
            set_quat(&mut rot, t, hip_joint, &QUAT_IDENTITY);
            let local_thigh = quat_normalize(&quat_mul(&quat_conj(&q_root), &q_thigh)).unwrap();
            set_quat(&mut rot, t, knee_joint, &local_thigh);
            let local_shin = quat_normalize(&quat_mul(&quat_conj(&q_thigh), &q_shin)).unwrap();
            set_quat(&mut rot, t, foot_joint, &local_shin);
        }

        // arms hang from the shoulders and swing opposite to the same-side leg
        let swing = gait.arm_swing * (two_pi * tf / gait.period).sin();
        for (elbow_joint, wrist_joint, side, sign) in [
            (joint::L_ELBOW, joint::L_WRIST, -1.0, 1.0),
            (joint::R_ELBOW, joint::R_WRIST, 1.0, -1.0),
        ] {
            let hang = quat_z(side * std::f64::consts::FRAC_PI_2);
            let upper = quat_normalize(&quat_mul(&quat_x(sign * swing), &hang)).unwrap();
            set_quat(&mut rot, t, elbow_joint, &upper);
            set_quat(
                &mut rot,
                t,
                wrist_joint,
                &quat_x(gait.elbow_flex + 0.3 * sign * swing.max(0.0)),
            );
        }
    }
    assemble_clip(skeleton, rot, root, format!("walker_{seed_tag:08x}"))
}

/// A standing clip with gentle breathing sway; both feet stay planted.
pub fn generate_idle(frames: usize, rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
    let skeleton = sample_skeleton_metric(rng);
    let seed_tag = rng.random_range(0..u32::MAX);
    let l1 = skeleton.lengths[group::THIGH];
    let l2 = skeleton.lengths[group::SHIN];
    let hip_off = skeleton.lengths[group::HIP];
    let pelvis_height = 0.94 * (l1 + l2);
    let breath = rng.random_range(0.003..0.008);
    let period = rng.random_range(80.0..140.0);
    let arm_sway = rng.random_range(0.03..0.1);

    let mut rot = Array3::zeros((frames, JOINT_COUNT, 4));
    let mut root = Array2::zeros((frames, 3));
    let two_pi = 2.0 * std::f64::consts::PI;
    for t in 0..frames {
        let tf = t as f64;
        let root_y = pelvis_height + breath * (two_pi * tf / period).sin();
        root[[t, 1]] = root_y;
        for j in 0..JOINT_COUNT {
            set_quat(&mut rot, t, j, &QUAT_IDENTITY);
        }
        set_quat(&mut rot, t, joint::SPINE, &quat_x(0.03 * (two_pi * tf / period).cos()));
        for (hip_joint, knee_joint, foot_joint, side) in [
            (joint::L_HIP, joint::L_KNEE, joint::L_FOOT, 1.0),
            (joint::R_HIP, joint::R_KNEE, joint::R_FOOT, -1.0),
        ] {
            let hip = [side * hip_off, root_y, 0.0];
            let ankle = [side * hip_off, 0.0, 0.0];
            let (q_thigh, q_shin) = leg_ik(hip, ankle, l1, l2, [1.0, 0.0, 0.0]);
            set_quat(&mut rot, t, hip_joint, &QUAT_IDENTITY);
            set_quat(&mut rot, t, knee_joint, &q_thigh);
            let local_shin = quat_normalize(&quat_mul(&quat_conj(&q_thigh), &q_shin)).unwrap();
            set_quat(&mut rot, t, foot_joint, &local_shin);
        }
        let sway = arm_sway * (two_pi * tf / period).sin();
        for (elbow_joint, wrist_joint, side) in
            [(joint::L_ELBOW, joint::L_WRIST, -1.0), (joint::R_ELBOW, joint::R_WRIST, 1.0)]
        {
            let hang = quat_z(side * std::f64::consts::FRAC_PI_2);
            let upper = quat_normalize(&quat_mul(&quat_x(sway), &hang)).unwrap();
            set_quat(&mut rot, t, elbow_joint, &upper);
            set_quat(&mut rot, t, wrist_joint, &quat_x(0.15));
        }
    }
    assemble_clip(skeleton, rot, root, format!("idle_{seed_tag:08x}"))
}

/// A static rest-pose clip for a given character, used by the reference-pose
/// training term.
pub fn tpose_clip(skeleton: &Skeleton, frames: usize, source_id: &str) -> Result<MotionSequence> {
    let rotations = RotationSeq::identity(Representation::Quaternion, frames);
    let root = Array2::zeros((frames, 3));
    let tpose = build_tpose(skeleton)?;
    let positions = fk_global(&tpose, &rotations, &root)?;
    Ok(MotionSequence {
        contacts: Array2::zeros((frames, 2)),
        positions,
        rotations: Some(rotations),
        root,
        skeleton: skeleton.clone(),
        source_id: source_id.to_string(),
        units_per_mm: SYNTH_UNITS_PER_MM,
        fps: SYNTH_FPS,
    })
}

/// A mixed corpus of walkers and idle clips.
pub fn generate_corpus(
    walkers: usize,
    idles: usize,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MotionSequence>> {
    let mut out = Vec::with_capacity(walkers + idles);
    for _ in 0..walkers {
        out.push(generate_walker(frames, rng)?);
    }
    for _ in 0..idles {
        out.push(generate_idle(frames, rng)?);
    }
    Ok(out)
}
