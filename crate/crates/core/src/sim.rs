//! Closed-loop simulation: KMP reference → HQP → plant, at a fixed period.

use std::io::{Read, Write};
use std::path::Path;

use log::info;
use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hqp::{rmse, ControlStepInput, ControllerGains, HqpController, HqpError, RmseChannel};
use crate::kinematics::{KinematicsError, RobotModel, WholeBodyState, N_BASE};
use crate::kmp::KmpModel;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("controller failed at step {step} (t = {t:.3} s): {source}")]
    Controller {
        step: usize,
        t: f64,
        #[source]
        source: HqpError,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid plant configuration: {0}")]
    InvalidPlant(String),
    #[error("log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("log CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed log: {0}")]
    MalformedLog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlantMode {
    #[default]
    IdealVelocity,
    Impedance,
}

fn default_kp() -> Vec<f64> {
    vec![20.0; 7]
}

fn default_kd() -> Vec<f64> {
    vec![8.0; 7]
}

fn default_tau() -> f64 {
    0.1
}

fn default_inertia() -> Vec<f64> {
    vec![1.0; 7]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    #[serde(default)]
    pub mode: PlantMode,
    /// Joint stiffness diagonal, N·m/rad.
    #[serde(default = "default_kp")]
    pub kp: Vec<f64>,
    /// Joint damping diagonal, N·m·s/rad.
    #[serde(default = "default_kd")]
    pub kd: Vec<f64>,
    /// Time constant of the base velocity lag. Zero means instantaneous.
    #[serde(default = "default_tau")]
    pub base_lag_tau: f64,
    #[serde(default = "default_inertia")]
    pub arm_inertia: Vec<f64>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            mode: PlantMode::default(),
            kp: default_kp(),
            kd: default_kd(),
            base_lag_tau: default_tau(),
            arm_inertia: default_inertia(),
        }
    }
}

impl PlantConfig {
    pub fn impedance() -> Self {
        Self {
            mode: PlantMode::Impedance,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_a: usize) -> Result<(), SimError> {
        for (name, v) in [
            ("kp", &self.kp),
            ("kd", &self.kd),
            ("arm_inertia", &self.arm_inertia),
        ] {
            if v.len() != n_a {
                return Err(SimError::InvalidPlant(format!(
                    "{name} needs {n_a} entries"
                )));
            }
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(SimError::InvalidPlant(format!(
                    "{name} entries must be positive"
                )));
            }
        }
        if !(self.base_lag_tau.is_finite() && self.base_lag_tau >= 0.0) {
            return Err(SimError::InvalidPlant(
                "base_lag_tau must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Joint impedance law `Kd (qdot* - qdot) + Kp (q* - q) + g_a`.
pub fn impedance_torque(
    cfg: &PlantConfig,
    q_a_star: &DVector<f64>,
    qdot_a_star: &DVector<f64>,
    q_a_act: &DVector<f64>,
    qdot_a_act: &DVector<f64>,
    gravity: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(q_a_star.len(), |i, _| {
        cfg.kd[i] * (qdot_a_star[i] - qdot_a_act[i])
            + cfg.kp[i] * (q_a_star[i] - q_a_act[i])
            + gravity[i]
    })
}

/// Plant state integrated one control period at a time.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    model: RobotModel,
    dt: f64,
    q: DVector<f64>,
    qdot: DVector<f64>,
}

impl Plant {
    pub fn new(
        cfg: PlantConfig,
        model: RobotModel,
        q0: DVector<f64>,
        dt: f64,
    ) -> Result<Self, SimError> {
        cfg.validate(model.n_a())?;
        if q0.len() != model.n() {
            return Err(KinematicsError::DimensionMismatch {
                expected: model.n(),
                got: q0.len(),
            }
            .into());
        }
        let n = q0.len();
        Ok(Self {
            cfg,
            model,
            dt,
            q: q0,
            qdot: DVector::zeros(n),
        })
    }

    pub fn state(&self) -> WholeBodyState {
        WholeBodyState {
            q: self.q.clone(),
            qdot: self.qdot.clone(),
        }
    }

    /// Torque the impedance law would command for the given targets.
    pub fn torque(
        &self,
        q_star: &DVector<f64>,
        qdot_star: &DVector<f64>,
    ) -> Result<DVector<f64>, SimError> {
        let n_a = self.model.n_a();
        let g = self.model.gravity_torque(&self.q)?;
        Ok(impedance_torque(
            &self.cfg,
            &q_star.rows(N_BASE, n_a).into_owned(),
            &qdot_star.rows(N_BASE, n_a).into_owned(),
            &self.q.rows(N_BASE, n_a).into_owned(),
            &self.qdot.rows(N_BASE, n_a).into_owned(),
            &g,
        ))
    }

    /// Advance one period towards `(q*, qdot*)`; returns the arm torque applied.
    pub fn step(
        &mut self,
        q_star: &DVector<f64>,
        qdot_star: &DVector<f64>,
    ) -> Result<DVector<f64>, SimError> {
        let tau = self.torque(q_star, qdot_star)?;
        let dt = self.dt;
        match self.cfg.mode {
            PlantMode::IdealVelocity => {
                self.qdot.copy_from(qdot_star);
                self.q += &self.qdot * dt;
            }
            PlantMode::Impedance => {
                let g = self.model.gravity_torque(&self.q)?;
                let alpha = if self.cfg.base_lag_tau > 0.0 {
                    1.0 - (-dt / self.cfg.base_lag_tau).exp()
                } else {
                    1.0
                };
                for i in 0..N_BASE {
                    self.qdot[i] += alpha * (qdot_star[i] - self.qdot[i]);
                }
                for a in 0..self.model.n_a() {
                    // gravity is compensated exactly, the remainder accelerates the joint
                    let acc = (tau[a] - g[a]) / self.cfg.arm_inertia[a];
                    self.qdot[N_BASE + a] += acc * dt;
                }
                self.q += &self.qdot * dt;
            }
        }
        Ok(tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub t: f64,
    pub x_d: Vector3<f64>,
    pub xdot_d: Vector3<f64>,
    pub x_a: Vector3<f64>,
    pub xdot_a: Vector3<f64>,
    pub q_b_d: Vector3<f64>,
    pub q_b_star: Vector3<f64>,
    pub q_b_act: Vector3<f64>,
    pub ee_arm: Vector3<f64>,
    pub level1_residual: f64,
    pub solve_us: f64,
    /// Level 2 fell back to the level-1 optimum on this step.
    pub level2_fallback: bool,
    pub qdot_star: DVector<f64>,
    pub q_star: DVector<f64>,
    pub q_act: DVector<f64>,
    pub qdot_act: DVector<f64>,
    pub tau_a: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub dt: f64,
    records: Vec<SimRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspEvent {
    pub t_grasp: f64,
    pub step: usize,
    pub ee_pos: [f64; 3],
    pub x_d: [f64; 3],
    pub ee_pos_err: f64,
    pub ee_vel: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ConstraintReport {
    pub checked_steps: usize,
    pub violations: usize,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTimeStats {
    pub mean_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseBlocks {
    pub ee_position: [f64; 3],
    pub ee_velocity: [f64; 3],
    pub base_learned_vs_optimal: [f64; 3],
    pub base_optimal_vs_actual: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub steps: usize,
    pub dt: f64,
    pub rmse: RmseBlocks,
    pub grasp_event: Option<GraspEvent>,
    pub solve_time: SolveTimeStats,
    pub constraint_violations: ConstraintReport,
    pub level2_fallbacks: usize,
}

/// Tolerance used when counting constraint violations, in velocity units.
pub const CONSTRAINT_TOL: f64 = 1e-8;

impl SimLog {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: SimRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[SimRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record nearest to `t`, i.e. step `round(t / dt)`.
    pub fn grasp_event(&self, grasp_time: f64) -> Option<GraspEvent> {
        let step = (grasp_time / self.dt).round();
        if !(step >= 0.0) {
            return None;
        }
        let step = step as usize;
        let r = self.records.get(step)?;
        Some(GraspEvent {
            t_grasp: r.t,
            step,
            ee_pos: r.x_a.into(),
            x_d: r.x_d.into(),
            ee_pos_err: (r.x_a - r.x_d).norm(),
            ee_vel: r.xdot_a.into(),
        })
    }

    /// Re-check joint position, velocity and acceleration limits on every
    /// logged `qdot*`, using the previous record's optimal pose and velocity.
    pub fn check_constraints(&self, model: &RobotModel) -> ConstraintReport {
        let mut rep = ConstraintReport::default();
        let n = model.n();
        let dt = self.dt;
        for (k, r) in self.records.iter().enumerate() {
            let (q_prev, qd_prev) = if k == 0 {
                (r.q_act.clone(), DVector::zeros(n))
            } else {
                (
                    self.records[k - 1].q_star.clone(),
                    self.records[k - 1].qdot_star.clone(),
                )
            };
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let v = r.qdot_star[i];
                worst = worst
                    .max(model.qdot_min()[i] - v)
                    .max(v - model.qdot_max()[i])
                    .max(qd_prev[i] + model.qddot_min()[i] * dt - v)
                    .max(v - (qd_prev[i] + model.qddot_max()[i] * dt));
                if i >= N_BASE {
                    let a = i - N_BASE;
                    worst = worst
                        .max((model.q_a_min()[a] - q_prev[i]) / dt - v)
                        .max(v - (model.q_a_max()[a] - q_prev[i]) / dt);
                }
            }
            rep.checked_steps += 1;
            if worst > CONSTRAINT_TOL {
                rep.violations += 1;
            }
            rep.max_violation = rep.max_violation.max(worst);
        }
        rep
    }

    pub fn solve_time_stats(&self) -> SolveTimeStats {
        let mut v: Vec<f64> = self.records.iter().map(|r| r.solve_us).collect();
        if v.is_empty() {
            return SolveTimeStats {
                mean_us: 0.0,
                p99_us: 0.0,
                max_us: 0.0,
            };
        }
        v.sort_by(f64::total_cmp);
        let idx = ((v.len() as f64 * 0.99).ceil() as usize).clamp(1, v.len()) - 1;
        SolveTimeStats {
            mean_us: v.iter().sum::<f64>() / v.len() as f64,
            p99_us: v[idx],
            max_us: v[v.len() - 1],
        }
    }

    pub fn summary(
        &self,
        model: &RobotModel,
        grasp_time: Option<f64>,
    ) -> Result<SimSummary, SimError> {
        let block = |c| {
            rmse(self, c)
                .map(|v| v.into())
                .map_err(|e| SimError::MalformedLog(e.to_string()))
        };
        Ok(SimSummary {
            steps: self.len(),
            dt: self.dt,
            rmse: RmseBlocks {
                ee_position: block(RmseChannel::EePosition)?,
                ee_velocity: block(RmseChannel::EeVelocity)?,
                base_learned_vs_optimal: block(RmseChannel::BaseLearnedVsOptimal)?,
                base_optimal_vs_actual: block(RmseChannel::BaseOptimalVsActual)?,
            },
            grasp_event: grasp_time.and_then(|t| self.grasp_event(t)),
            solve_time: self.solve_time_stats(),
            constraint_violations: self.check_constraints(model),
            level2_fallbacks: self.records.iter().filter(|r| r.level2_fallback).count(),
        })
    }

    fn header(n: usize, n_a: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        for prefix in ["xd", "xdotd", "xa", "xdota", "ee_arm"] {
            for ax in ["x", "y", "z"] {
                h.push(format!("{prefix}_{ax}"));
            }
        }
        for prefix in ["qbd", "qbstar", "qbact"] {
            for ax in ["x", "y", "phi"] {
                h.push(format!("{prefix}_{ax}"));
            }
        }
        h.push("level1_residual".into());
        h.push("solve_us".into());
        h.push("level2_fallback".into());
        for prefix in ["qdot_star", "q_star", "q_act", "qdot_act"] {
            for i in 0..n {
                h.push(format!("{prefix}_{i}"));
            }
        }
        for i in 0..n_a {
            h.push(format!("tau_{i}"));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let (n, n_a) = self
            .records
            .first()
            .map_or((0, 0), |r| (r.qdot_star.len(), r.tau_a.len()));
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::header(n, n_a))?;
        let mut row: Vec<String> = Vec::new();
        for r in &self.records {
            row.clear();
            row.push(r.t.to_string());
            for v in [
                &r.x_d,
                &r.xdot_d,
                &r.x_a,
                &r.xdot_a,
                &r.ee_arm,
                &r.q_b_d,
                &r.q_b_star,
                &r.q_b_act,
            ] {
                row.extend(v.iter().map(|x| x.to_string()));
            }
            row.push(r.level1_residual.to_string());
            row.push(r.solve_us.to_string());
            row.push(u8::from(r.level2_fallback).to_string());
            for v in [&r.qdot_star, &r.q_star, &r.q_act, &r.qdot_act, &r.tau_a] {
                row.extend(v.iter().map(|x| x.to_string()));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), SimError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Parse a log; `dt` is recovered from the first two time stamps.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, SimError> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let n = header
            .iter()
            .filter(|h| h.starts_with("qdot_star_"))
            .count();
        let n_a = header.iter().filter(|h| h.starts_with("tau_")).count();
        if header != Self::header(n, n_a) {
            return Err(SimError::MalformedLog("unexpected column layout".into()));
        }
        let mut log = SimLog::new(0.0);
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| SimError::MalformedLog(format!("row {}: {e}", i + 1)))?;
            if vals.len() != header.len() {
                return Err(SimError::MalformedLog(format!(
                    "row {} has {} fields",
                    i + 1,
                    vals.len()
                )));
            }
            let v3 = |o: usize| Vector3::new(vals[o], vals[o + 1], vals[o + 2]);
            let base = 1 + 8 * 3 + 3;
            let dv = |k: usize, len: usize| {
                DVector::from_column_slice(&vals[base + k * n..base + k * n + len])
            };
            log.push(SimRecord {
                t: vals[0],
                x_d: v3(1),
                xdot_d: v3(4),
                x_a: v3(7),
                xdot_a: v3(10),
                ee_arm: v3(13),
                q_b_d: v3(16),
                q_b_star: v3(19),
                q_b_act: v3(22),
                level1_residual: vals[25],
                solve_us: vals[26],
                level2_fallback: vals[27] != 0.0,
                qdot_star: dv(0, n),
                q_star: dv(1, n),
                q_act: dv(2, n),
                qdot_act: dv(3, n),
                tau_a: dv(4, n_a),
            });
        }
        log.dt = match log.records.as_slice() {
            [a, b, ..] => b.t - a.t,
            _ => 0.001,
        };
        Ok(log)
    }

    pub fn load_csv(path: &Path) -> Result<Self, SimError> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub log: SimLog,
    pub grasp: GraspEvent,
}

/// Joint configuration closest to the reference base pose and centred arm
/// that places the EE exactly on the reference start point.
pub fn initial_configuration(
    model: &RobotModel,
    reference: &KmpModel,
) -> Result<DVector<f64>, SimError> {
    let p = reference.predict_mean(0.0);
    if p.len() < 9 {
        return Err(SimError::InvalidScenario(
            "reference output must have 9 channels".into(),
        ));
    }
    let x0 = Vector3::new(p[0], p[1], p[2]);
    let qb0 = Vector3::new(p[6], p[7], p[8]);
    Ok(model.closest_reaching_configuration(&x0, &qb0)?)
}

pub fn run(
    model: &RobotModel,
    gains: &ControllerGains,
    plant: &PlantConfig,
    reference: &KmpModel,
    duration: f64,
    grasp_time: f64,
) -> Result<SimOutput, SimError> {
    let q0 = initial_configuration(model, reference)?;
    run_from(model, gains, plant, reference, duration, grasp_time, q0)
}

/// Same as [`run`] from an explicit initial configuration at rest.
pub fn run_from(
    model: &RobotModel,
    gains: &ControllerGains,
    plant_cfg: &PlantConfig,
    reference: &KmpModel,
    duration: f64,
    grasp_time: f64,
    q0: DVector<f64>,
) -> Result<SimOutput, SimError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(SimError::InvalidScenario(format!(
            "duration must be positive, got {duration}"
        )));
    }
    if !(grasp_time > 0.0 && grasp_time < duration) {
        return Err(SimError::InvalidScenario(format!(
            "grasp_time {grasp_time} must lie in (0, {duration})"
        )));
    }
    if reference.output_dim() != 9 {
        return Err(SimError::InvalidScenario(
            "reference output must have 9 channels".into(),
        ));
    }
    let dt = gains.dt;
    let steps = (duration / dt).round() as usize;
    let mut ctrl = HqpController::new(model.clone(), gains.clone()).map_err(|source| {
        SimError::Controller {
            step: 0,
            t: 0.0,
            source,
        }
    })?;
    let mut plant = Plant::new(plant_cfg.clone(), model.clone(), q0.clone(), dt)?;
    let n = model.n();
    let mut q_star = q0;
    let mut qdot_star = DVector::zeros(n);
    let mut log = SimLog::new(dt);
    log.records.reserve(steps + 1);

    for k in 0..=steps {
        let t = k as f64 * dt;
        let p = reference.predict_mean(t);
        let state = plant.state();
        let input = ControlStepInput {
            x_d: Vector3::new(p[0], p[1], p[2]),
            xdot_d: Vector3::new(p[3], p[4], p[5]),
            q_b_d: Vector3::new(p[6], p[7], p[8]),
            state,
            q_star_prev: q_star.clone(),
            qdot_star_prev: qdot_star.clone(),
        };
        let out =
            ctrl.step(&input)
                .map_err(|source| SimError::Controller { step: k, t, source })?;
        let ee_arm = model.ee_in_arm_frame(&input.state.q)?;
        let tau = plant.torque(&out.q_star, &out.qdot_star)?;
        log.push(SimRecord {
            t,
            x_d: input.x_d,
            xdot_d: input.xdot_d,
            x_a: out.x_a,
            xdot_a: out.xdot_a,
            q_b_d: input.q_b_d,
            q_b_star: out.q_star.fixed_rows::<3>(0).into_owned(),
            q_b_act: input.state.q.fixed_rows::<3>(0).into_owned(),
            ee_arm,
            level1_residual: out.level1_residual,
            solve_us: out.diagnostics.solve_us_level1 + out.diagnostics.solve_us_level2,
            level2_fallback: out.diagnostics.level2_fallback,
            qdot_star: out.qdot_star.clone(),
            q_star: out.q_star.clone(),
            q_act: input.state.q,
            qdot_act: input.state.qdot,
            tau_a: tau,
        });
        plant.step(&out.q_star, &out.qdot_star)?;
        q_star = out.q_star;
        qdot_star = out.qdot_star;
    }
    let grasp = log
        .grasp_event(grasp_time)
        .ok_or_else(|| SimError::InvalidScenario("grasp step outside the run".into()))?;
    info!(
        "simulated {} steps, grasp error {:.4} m at t = {:.3} s",
        log.len(),
        grasp.ee_pos_err,
        grasp.t_grasp
    );
    Ok(SimOutput { log, grasp })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(n: usize) -> DVector<f64> {
        DVector::zeros(n)
    }

    #[test]
    fn zero_error_gives_gravity_term() {
        let cfg = PlantConfig::impedance();
        let q = DVector::from_vec(vec![0.1, -0.3, 0.2, -1.0, 0.0, 1.2, 0.4]);
        let qd = DVector::from_vec(vec![0.5, 0.0, -0.2, 0.1, 0.0, 0.0, 0.3]);
        let g = DVector::from_vec(vec![0.0, 12.5, -3.0, 4.0, 0.1, 0.7, 0.0]);
        let tau = impedance_torque(&cfg, &q, &qd, &q, &qd, &g);
        assert!((tau - g).amax() < 1e-12);
    }

    #[test]
    fn stiffness_term_units() {
        let cfg = PlantConfig::impedance();
        let mut qs = zeros(7);
        qs[0] = 0.1;
        let g = DVector::from_element(7, 0.25);
        let tau = impedance_torque(&cfg, &qs, &zeros(7), &zeros(7), &zeros(7), &g);
        let mut expected = g.clone();
        expected[0] += 2.0;
        assert!((tau - expected).amax() < 1e-12);
    }

    #[test]
    fn impedance_law_linear() {
        let cfg = PlantConfig::impedance();
        let g = DVector::from_element(7, -1.5);
        let e = DVector::from_vec(vec![0.1, -0.2, 0.05, 0.0, 0.3, -0.1, 0.2]);
        let ed = DVector::from_vec(vec![0.0, 0.1, -0.4, 0.2, 0.0, 0.05, -0.1]);
        let alpha = 2.7;
        let t1 = impedance_torque(&cfg, &e, &ed, &zeros(7), &zeros(7), &g) - &g;
        let t2 = impedance_torque(
            &cfg,
            &(&e * alpha),
            &(&ed * alpha),
            &zeros(7),
            &zeros(7),
            &g,
        ) - &g;
        assert!((t2 - t1 * alpha).amax() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut log = SimLog::new(0.001);
        for k in 0..3 {
            let v = |o: f64| Vector3::new(o, o + 0.1, o / 3.0);
            log.push(SimRecord {
                t: k as f64 * 0.001,
                x_d: v(1.0),
                xdot_d: v(2.0),
                x_a: v(3.0),
                xdot_a: v(4.0),
                q_b_d: v(5.0),
                q_b_star: v(6.0),
                q_b_act: v(7.0),
                ee_arm: v(8.0),
                level1_residual: 1e-17,
                solve_us: 12.5,
                level2_fallback: true,
                qdot_star: DVector::from_element(10, 0.1 * k as f64),
                q_star: DVector::from_element(10, 1.0 / 7.0),
                q_act: DVector::from_element(10, -0.3),
                qdot_act: DVector::from_element(10, 0.0),
                tau_a: DVector::from_element(7, 2.0),
            });
        }
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = SimLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records(), log.records());
    }

    #[test]
    fn plant_converges_from_offset() {
        let model = RobotModel::default();
        let q_star = DVector::zeros(10);
        let mut q0 = q_star.clone();
        q0[3] = 0.2;
        let mut plant = Plant::new(PlantConfig::impedance(), model, q0, 0.001).unwrap();
        let mut errs = Vec::new();
        for _ in 0..5000 {
            plant.step(&q_star, &DVector::zeros(10)).unwrap();
            errs.push(plant.state().q.rows(3, 7).norm());
        }
        assert!(*errs.last().unwrap() < 1e-3);
        // local maxima of the error decrease
        let peaks: Vec<f64> = errs
            .windows(3)
            .filter(|w| w[1] > w[0] && w[1] >= w[2])
            .map(|w| w[1])
            .collect();
        assert!(peaks.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn grasp_event_step_rounding() {
        let mut log = SimLog::new(0.001);
        for k in 0..20 {
            log.push(SimRecord {
                t: k as f64 * 0.001,
                x_d: Vector3::zeros(),
                xdot_d: Vector3::zeros(),
                x_a: Vector3::new(k as f64, 0.0, 0.0),
                xdot_a: Vector3::zeros(),
                q_b_d: Vector3::zeros(),
                q_b_star: Vector3::zeros(),
                q_b_act: Vector3::zeros(),
                ee_arm: Vector3::zeros(),
                level1_residual: 0.0,
                solve_us: 0.0,
                level2_fallback: false,
                qdot_star: zeros(4),
                q_star: zeros(4),
                q_act: zeros(4),
                qdot_act: zeros(4),
                tau_a: zeros(1),
            });
        }
        let g = log.grasp_event(0.0104).unwrap();
        assert_eq!(g.step, 10);
        assert!((g.t_grasp - 0.0104).abs() <= 0.0005);
        assert!(log.grasp_event(1.0).is_none());
    }
}
