//! Point mass pulled by axial muscles.
//!
//! 2D environments live in the x-z plane (y is always zero) so that a 2D
//! position maps directly onto the 3-component target state `(x, 0, z)`.

mod domain;

pub use domain::{estimate_motion_domain, DomainConfig, MotionDomain};

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct MuscleSpec {
    pub anchor: Vec3,
    /// Maximum active isometric force (N).
    pub f_max: f64,
    /// Optimal fibre length (m).
    pub l_opt: f64,
    /// Maximum passive force (N).
    pub f_pass_max: f64,
    /// Fractional length range over which the force ramps saturate.
    pub flex: f64,
    /// Damping on lengthening velocity (N s/m).
    pub damping: f64,
}

impl MuscleSpec {
    pub fn at(anchor: Vec3) -> Self {
        MuscleSpec {
            anchor,
            f_max: 1.0,
            l_opt: 0.01,
            f_pass_max: 0.1,
            flex: 0.5,
            damping: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_max > 0.0) {
            return Err(Error::config("f_max", "f_max must be positive"));
        }
        if !(self.flex > 0.0 && self.flex < 1.0) {
            return Err(Error::config("flex", "flex must lie in (0, 1)"));
        }
        if !(self.l_opt > 0.0) {
            return Err(Error::config("l_opt", "l_opt must be positive"));
        }
        if !(self.f_pass_max >= 0.0 && self.damping >= 0.0) {
            return Err(Error::config("f_pass_max", "passive force and damping must be >= 0"));
        }
        Ok(())
    }

    /// Length at which both force ramps saturate.
    pub fn saturation_length(&self) -> f64 {
        self.l_opt * (1.0 + self.flex)
    }

    #[inline]
    fn ramp(&self, l: f64) -> f64 {
        ((l - self.l_opt) / (self.l_opt * self.flex)).clamp(0.0, 1.0)
    }
}

/// Muscle tension (N, never negative) at length `l`, lengthening rate
/// `l_dot` and excitation `a`.
///
/// Active and passive forces both rise linearly from zero at `l_opt` to their
/// maxima at `l_opt * (1 + flex)`. Damping acts only while lengthening.
pub fn muscle_force(l: f64, l_dot: f64, a: f64, spec: &MuscleSpec) -> Result<f64> {
    if !(l > 0.0) || !l_dot.is_finite() {
        return Err(Error::Simulation(format!(
            "degenerate muscle: length {l}, rate {l_dot}"
        )));
    }
    let a = a.clamp(0.0, 1.0);
    let ramp = spec.ramp(l);
    let t = a * spec.f_max * ramp + spec.f_pass_max * ramp + spec.damping * l_dot.max(0.0);
    Ok(t.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvKind {
    Circle2d { muscles: usize },
    Cuboid3d,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::Circle2d { muscles: 6 },
        EnvKind::Circle2d { muscles: 14 },
        EnvKind::Circle2d { muscles: 24 },
        EnvKind::Cuboid3d,
    ];

    pub fn dim(self) -> usize {
        match self {
            EnvKind::Circle2d { .. } => 2,
            EnvKind::Cuboid3d => 3,
        }
    }

    pub fn n_muscles(self) -> usize {
        match self {
            EnvKind::Circle2d { muscles } => muscles,
            EnvKind::Cuboid3d => 8,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::Circle2d { muscles } => write!(f, "circle2d-{muscles}"),
            EnvKind::Cuboid3d => write!(f, "cuboid3d-8"),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle2d-6" => Ok(EnvKind::Circle2d { muscles: 6 }),
            "circle2d-14" => Ok(EnvKind::Circle2d { muscles: 14 }),
            "circle2d-24" => Ok(EnvKind::Circle2d { muscles: 24 }),
            "cuboid3d-8" | "cuboid3d" => Ok(EnvKind::Cuboid3d),
            other => Err(Error::config(
                "env",
                format!("unknown environment {other:?}; expected circle2d-6|14|24 or cuboid3d-8"),
            )),
        }
    }
}

impl TryFrom<String> for EnvKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EnvKind> for String {
    fn from(k: EnvKind) -> String {
        k.to_string()
    }
}

/// Mechanical parameters not fixed by the muscle constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    /// Point mass (kg).
    pub mass: f64,
    /// Simulated time per environment step (s).
    pub control_dt: f64,
    /// Integrator substeps per environment step.
    pub substeps: usize,
    pub circle_radius: f64,
    pub cuboid_edge: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            mass: 0.01,
            control_dt: 0.1,
            substeps: 100,
            circle_radius: 0.10,
            cuboid_edge: 0.20,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::config("physics.mass", "mass must be positive"));
        }
        if !(self.control_dt > 0.0) {
            return Err(Error::config("physics.control_dt", "control_dt must be positive"));
        }
        if self.substeps == 0 {
            return Err(Error::config("physics.substeps", "substeps must be positive"));
        }
        if !(self.circle_radius > 0.0 && self.cuboid_edge > 0.0) {
            return Err(Error::config("physics.circle_radius", "geometry sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvGeometry {
    pub kind: EnvKind,
    pub muscles: Vec<MuscleSpec>,
    pub mass: f64,
    pub control_dt: f64,
    pub substeps: usize,
}

impl EnvGeometry {
    pub fn new(kind: EnvKind, physics: &PhysicsConfig) -> Result<Self> {
        physics.validate()?;
        let anchors: Vec<Vec3> = match kind {
            EnvKind::Circle2d { muscles } => {
                if !matches!(muscles, 6 | 14 | 24) {
                    return Err(Error::config("env", "circle2d supports 6, 14 or 24 muscles"));
                }
                let r = physics.circle_radius;
                (0..muscles)
                    .map(|k| {
                        let th = 2.0 * PI * k as f64 / muscles as f64;
                        Vec3::new(r * th.cos(), 0.0, r * th.sin())
                    })
                    .collect()
            }
            EnvKind::Cuboid3d => {
                let h = physics.cuboid_edge / 2.0;
                (0..8)
                    .map(|k| {
                        let s = |bit: usize| if k >> bit & 1 == 1 { h } else { -h };
                        Vec3::new(s(0), s(1), s(2))
                    })
                    .collect()
            }
        };
        let geom = EnvGeometry {
            kind,
            muscles: anchors.into_iter().map(MuscleSpec::at).collect(),
            mass: physics.mass,
            control_dt: physics.control_dt,
            substeps: physics.substeps,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.muscles.len() != self.kind.n_muscles() {
            return Err(Error::config("env", "muscle count does not match environment kind"));
        }
        for m in &self.muscles {
            m.validate()?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn n_muscles(&self) -> usize {
        self.muscles.len()
    }

    /// Centre of the anchor layout.
    pub fn center(&self) -> Vec3 {
        self.muscles.iter().map(|m| m.anchor).sum::<Vec3>() / self.muscles.len() as f64
    }

    /// Copy with every anchor rotated about the y axis (the 2D plane normal).
    pub fn rotated_about_y(&self, angle: f64) -> EnvGeometry {
        let mut g = self.clone();
        for m in &mut g.muscles {
            m.anchor = rotate_y(&m.anchor, angle);
        }
        g
    }

    /// FNV-1a hash over every mechanical constant and anchor.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(self.kind.to_string().as_bytes());
        for v in [self.mass, self.control_dt, self.substeps as f64] {
            h.write(&v.to_le_bytes());
        }
        for m in &self.muscles {
            for v in [
                m.anchor.x,
                m.anchor.y,
                m.anchor.z,
                m.f_max,
                m.l_opt,
                m.f_pass_max,
                m.flex,
                m.damping,
            ] {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

pub fn rotate_y(p: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    Vec3::new(c * p.x + s * p.z, p.y, -s * p.x + c * p.z)
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 = (self.0 ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub excitations: Vec<f64>,
    pub time: f64,
}

impl SimState {
    pub fn at_rest(position: Vec3, n_muscles: usize) -> Self {
        SimState {
            position,
            velocity: Vec3::zeros(),
            excitations: vec![0.0; n_muscles],
            time: 0.0,
        }
    }

    pub fn kinetic_energy(&self, mass: f64) -> f64 {
        0.5 * mass * self.velocity.norm_squared()
    }
}

/// Sum of muscle tensions acting on the point mass.
pub fn net_force(geom: &EnvGeometry, pos: &Vec3, vel: &Vec3, excitations: &[f64]) -> Result<Vec3> {
    let mut f = Vec3::zeros();
    for (m, &a) in geom.muscles.iter().zip(excitations) {
        let r = m.anchor - pos;
        let l = r.norm();
        if !(l > 1e-12) {
            return Err(Error::Simulation(format!(
                "point mass coincides with anchor {:?}",
                m.anchor.as_slice()
            )));
        }
        let u = r / l;
        let l_dot = -u.dot(vel);
        f += u * muscle_force(l, l_dot, a, m)?;
    }
    Ok(f)
}

/// Advances `state` by `control_dt` using `substeps` semi-implicit Euler steps.
pub fn step_physics(
    state: &SimState,
    excitations: &[f64],
    control_dt: f64,
    substeps: usize,
    geom: &EnvGeometry,
) -> Result<SimState> {
    if excitations.len() != geom.n_muscles() {
        return Err(Error::Dimension {
            expected: geom.n_muscles(),
            actual: excitations.len(),
        });
    }
    if !excitations.iter().all(|a| a.is_finite()) {
        return Err(Error::Simulation("non-finite excitation".into()));
    }
    let exc: Vec<f64> = excitations.iter().map(|a| a.clamp(0.0, 1.0)).collect();
    let h = control_dt / substeps as f64;
    let mut pos = state.position;
    let mut vel = state.velocity;
    for _ in 0..substeps {
        let f = net_force(geom, &pos, &vel, &exc)?;
        vel += f * (h / geom.mass);
        pos += vel * h;
    }
    if !(pos.iter().chain(vel.iter()).all(|v| v.is_finite())) {
        return Err(Error::Simulation("non-finite point-mass state".into()));
    }
    Ok(SimState {
        position: pos,
        velocity: vel,
        excitations: exc,
        time: state.time + control_dt,
    })
}

impl EnvGeometry {
    /// One control period with this geometry's own step settings.
    pub fn step(&self, state: &SimState, excitations: &[f64]) -> Result<SimState> {
        step_physics(state, excitations, self.control_dt, self.substeps, self)
    }
}

/// Settles the point mass under constant `excitations`, starting at rest at
/// the layout centre. Returns once speed and per-step displacement are both
/// below `tol`.
pub fn equilibrium(excitations: &[f64], geom: &EnvGeometry, tol: f64) -> Result<Vec3> {
    const MAX_SIM_TIME: f64 = 300.0;
    let mut state = SimState::at_rest(geom.center(), geom.n_muscles());
    let max_steps = (MAX_SIM_TIME / geom.control_dt).ceil() as usize;
    for _ in 0..max_steps {
        let next = geom.step(&state, excitations)?;
        let moved = (next.position - state.position).norm();
        state = next;
        if state.velocity.norm() < tol && moved < tol {
            return Ok(state.position);
        }
    }
    Err(Error::Simulation(format!(
        "no equilibrium within {MAX_SIM_TIME} s (speed {:.3e} m/s)",
        state.velocity.norm()
    )))
}

/// Per-step trajectory dump: `t,px,py,pz,vx,vy,vz,a1..an`.
pub struct TrajectoryWriter<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut out: W, n_muscles: usize) -> Result<Self> {
        let mut header = String::from("t,px,py,pz,vx,vy,vz");
        for k in 1..=n_muscles {
            header.push_str(&format!(",a{k}"));
        }
        writeln!(out, "{header}")?;
        Ok(TrajectoryWriter { out })
    }

    pub fn write(&mut self, s: &SimState) -> Result<()> {
        let mut line = format!("{}", s.time);
        for v in s.position.iter().chain(s.velocity.iter()).chain(&s.excitations) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six() -> EnvGeometry {
        EnvGeometry::new(EnvKind::Circle2d { muscles: 6 }, &PhysicsConfig::default()).unwrap()
    }

    #[test]
    fn force_law_examples() {
        let spec = MuscleSpec::at(Vec3::zeros());
        assert_eq!(muscle_force(0.01, 0.0, 0.0, &spec).unwrap(), 0.0);
        assert_eq!(muscle_force(0.005, 0.0, 1.0, &spec).unwrap(), 0.0);
        assert!((muscle_force(0.015, 0.0, 1.0, &spec).unwrap() - 1.1).abs() < 1e-12);
        assert!((muscle_force(0.1, 0.0, 1.0, &spec).unwrap() - 1.1).abs() < 1e-12);
        assert!((muscle_force(0.1, 0.0, 0.5, &spec).unwrap() - 0.6).abs() < 1e-12);
        assert!((muscle_force(0.1, -3.0, 0.0, &spec).unwrap() - 0.1).abs() < 1e-12);
        assert!((muscle_force(0.1, 2.0, 0.0, &spec).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(muscle_force(0.0, 0.0, 0.5, &spec), Err(Error::Simulation(_))));
    }

    #[test]
    fn anchors() {
        let g = six();
        for m in &g.muscles {
            assert!((m.anchor.norm() - 0.1).abs() < 1e-15);
            assert_eq!(m.anchor.y, 0.0);
        }
        let c = EnvGeometry::new(EnvKind::Cuboid3d, &PhysicsConfig::default()).unwrap();
        assert_eq!(c.n_muscles(), 8);
        for m in &c.muscles {
            assert!(m.anchor.iter().all(|v| v.abs() == 0.1));
        }
        assert!(c.center().norm() < 1e-15);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in EnvKind::ALL {
            assert_eq!(k.to_string().parse::<EnvKind>().unwrap(), k);
        }
        assert!("circle2d-7".parse::<EnvKind>().is_err());
    }

    #[test]
    fn rest_at_center() {
        let g = six();
        let mut s = SimState::at_rest(g.center(), 6);
        for _ in 0..50 {
            s = g.step(&s, &[0.0; 6]).unwrap();
        }
        assert!(s.position.norm() < 1e-15);
        for _ in 0..50 {
            s = g.step(&s, &[0.7; 6]).unwrap();
        }
        assert!(s.position.norm() < 1e-15);
    }

    #[test]
    fn excitation_length_checked() {
        let g = six();
        let s = SimState::at_rest(g.center(), 6);
        assert!(matches!(g.step(&s, &[0.0; 5]), Err(Error::Dimension { .. })));
        assert!(g.step(&s, &[f64::NAN; 6]).is_err());
    }

    #[test]
    fn hash_sensitive_to_constants() {
        let a = six();
        let mut b = six();
        b.muscles[2].damping = 0.2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), six().hash());
    }

    #[test]
    fn trajectory_header() {
        let g = six();
        let mut w = TrajectoryWriter::new(Vec::new(), 6).unwrap();
        w.write(&SimState::at_rest(g.center(), 6)).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,px,py,pz,vx,vy,vz,a1,a2,a3,a4,a5,a6");
        assert_eq!(lines.next().unwrap().split(',').count(), 13);
    }
}
