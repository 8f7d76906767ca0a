//! Two-level strict-priority controller.
//!
//! Level 1 tracks the end-effector reference through closed-loop inverse
//! kinematics. Level 2 tracks the learned base pose and centres the arm
//! joints, constrained to keep the task-space velocity level 1 achieved.
//! Both levels share one per-variable box built from joint position, velocity
//! and acceleration limits.

use log::debug;
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{KinematicsError, RobotModel, WholeBodyState, N_BASE};
use crate::linalg::wrap_angle;
use crate::qp::{ActiveConstraint, QpError, QpProblem, QpSolution, QpSolver, QpStatus};
use crate::sim::SimLog;

/// Tikhonov weight added to both levels for strict convexity.
pub const LEVEL_RIDGE: f64 = 1e-6;
/// Largest row violation accepted from a level-2 solve.
const ACCEPT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum HqpError {
    #[error(
        "level-1 constraints are inconsistent at joint {joint}: lower {lower} > upper {upper}"
    )]
    Level1Infeasible {
        joint: usize,
        lower: f64,
        upper: f64,
    },
    #[error("level {level} QP failed: {source}")]
    Solver {
        level: usize,
        #[source]
        source: QpError,
    },
    #[error("level {level} QP ended with status {status:?}")]
    SolverStatus { level: usize, status: QpStatus },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("non-finite controller input")]
    NonFiniteInput,
}

/// How the level-1 task velocity is formed from the tracking feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClikForm {
    /// `J qdot = xdot_a + Kv (xdot_d - xdot_a) + Kp (x_d - x_a)`: the feedback
    /// acts as a correction on the current task velocity.
    #[default]
    Incremental,
    /// `J qdot = Kv (xdot_d - xdot_a) + Kp (x_d - x_a)` taken literally as
    /// the commanded task velocity.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub kp: [f64; 3],
    pub kv: [f64; 3],
    pub dt: f64,
    /// Diagonal of the base selection matrix.
    pub h_b: Vec<f64>,
    /// Diagonal of the arm selection matrix.
    pub h_a: Vec<f64>,
    #[serde(default)]
    pub clik_form: ClikForm,
}

impl ControllerGains {
    /// Gains with base/arm selection matrices for a model with `n_a` arm joints.
    pub fn new(kp: [f64; 3], kv: [f64; 3], dt: f64, n_a: usize) -> Self {
        let n = N_BASE + n_a;
        Self {
            kp,
            kv,
            dt,
            h_b: (0..n).map(|i| if i < N_BASE { 1.0 } else { 0.0 }).collect(),
            h_a: (0..n).map(|i| if i < N_BASE { 0.0 } else { 1.0 }).collect(),
            clik_form: ClikForm::default(),
        }
    }

    pub fn for_model(model: &RobotModel) -> Self {
        Self::new([4.0; 3], [1.0; 3], 0.001, model.n_a())
    }

    pub fn validate(&self, n: usize) -> Result<(), HqpError> {
        let bad = |m: String| Err(HqpError::InvalidGains(m));
        if self
            .kp
            .iter()
            .chain(&self.kv)
            .any(|g| !(g.is_finite() && *g > 0.0))
        {
            return bad("Kp and Kv entries must be positive".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.h_b.len() != n || self.h_a.len() != n {
            return bad(format!("selection diagonals must have length {n}"));
        }
        for (i, (b, a)) in self.h_b.iter().zip(&self.h_a).enumerate() {
            let binary = |v: f64| v == 0.0 || v == 1.0;
            if !binary(*b) || !binary(*a) || b + a != 1.0 {
                return bad(format!(
                    "selection entries at {i} must be complementary 0/1"
                ));
            }
        }
        Ok(())
    }
}

/// `Kv (xdot_d - xdot_a) + Kp (x_d - x_a)`.
pub fn clik_target(
    gains: &ControllerGains,
    x_d: &Vector3<f64>,
    xdot_d: &Vector3<f64>,
    x_a: &Vector3<f64>,
    xdot_a: &Vector3<f64>,
) -> Vector3<f64> {
    let kp = Vector3::from(gains.kp);
    let kv = Vector3::from(gains.kv);
    kv.component_mul(&(xdot_d - xdot_a)) + kp.component_mul(&(x_d - x_a))
}

#[derive(Debug, Clone)]
pub struct ControlStepInput {
    pub x_d: Vector3<f64>,
    pub xdot_d: Vector3<f64>,
    pub q_b_d: Vector3<f64>,
    pub state: WholeBodyState,
    pub q_star_prev: DVector<f64>,
    pub qdot_star_prev: DVector<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    pub active_level1: usize,
    pub active_level2: usize,
    pub iterations_level1: usize,
    pub iterations_level2: usize,
    pub solve_us_level1: f64,
    pub solve_us_level2: f64,
    /// Level 2 reported a degenerate failure and the level-1 optimum was kept.
    pub level2_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct ControlStepOutput {
    pub qdot_star: DVector<f64>,
    pub q_star: DVector<f64>,
    /// Level-1 optimum before level 2 ran.
    pub qdot_level1: DVector<f64>,
    /// `|J qdot* - task|` with the final velocity.
    pub level1_residual: f64,
    /// Task velocity level 1 was asked to realise.
    pub task_velocity: Vector3<f64>,
    pub x_a: Vector3<f64>,
    pub xdot_a: Vector3<f64>,
    pub jacobian: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub diagnostics: StepDiagnostics,
}

/// Per-variable box combining position, velocity and acceleration limits.
pub fn velocity_box(
    model: &RobotModel,
    dt: f64,
    q_star_prev: &DVector<f64>,
    qdot_star_prev: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), HqpError> {
    let n = model.n();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        let mut l = model.qdot_min()[i].max(qdot_star_prev[i] + model.qddot_min()[i] * dt);
        let mut h = model.qdot_max()[i].min(qdot_star_prev[i] + model.qddot_max()[i] * dt);
        if i >= N_BASE {
            let a = i - N_BASE;
            l = l.max((model.q_a_min()[a] - q_star_prev[i]) / dt);
            h = h.min((model.q_a_max()[a] - q_star_prev[i]) / dt);
        }
        if l > h {
            return Err(HqpError::Level1Infeasible {
                joint: i,
                lower: l,
                upper: h,
            });
        }
        lo[i] = l;
        hi[i] = h;
    }
    Ok((lo, hi))
}

/// Controller with per-level warm-start caches.
#[derive(Debug, Clone)]
pub struct HqpController {
    model: RobotModel,
    gains: ControllerGains,
    solver: QpSolver,
    warm: [Vec<ActiveConstraint>; 2],
    use_warm_start: bool,
}

impl HqpController {
    pub fn new(model: RobotModel, gains: ControllerGains) -> Result<Self, HqpError> {
        gains.validate(model.n())?;
        Ok(Self {
            model,
            gains,
            solver: QpSolver::default(),
            warm: [Vec::new(), Vec::new()],
            use_warm_start: true,
        })
    }

    pub fn with_warm_start(mut self, enabled: bool) -> Self {
        self.use_warm_start = enabled;
        self
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn gains(&self) -> &ControllerGains {
        &self.gains
    }

    pub fn reset(&mut self) {
        self.warm = [Vec::new(), Vec::new()];
    }

    pub fn step(&mut self, input: &ControlStepInput) -> Result<ControlStepOutput, HqpError> {
        let n = self.model.n();
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(input.x_d.as_slice())
            || !finite(input.xdot_d.as_slice())
            || !finite(input.q_b_d.as_slice())
            || !finite(input.state.q.as_slice())
            || !finite(input.state.qdot.as_slice())
            || !finite(input.q_star_prev.as_slice())
            || !finite(input.qdot_star_prev.as_slice())
        {
            return Err(HqpError::NonFiniteInput);
        }
        for v in [&input.state.qdot, &input.q_star_prev, &input.qdot_star_prev] {
            if v.len() != n {
                return Err(KinematicsError::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                }
                .into());
            }
        }
        let dt = self.gains.dt;
        let frames = self.model.frames(&input.state.q)?;
        let j = self.model.jacobian_from_frames(&frames);
        let x_a = frames.ee;
        let xdot_a = Vector3::from_iterator((&j * &input.state.qdot).iter().copied());

        let feedback = clik_target(&self.gains, &input.x_d, &input.xdot_d, &x_a, &xdot_a);
        let task = match self.gains.clik_form {
            ClikForm::Incremental => xdot_a + feedback,
            ClikForm::Absolute => feedback,
        };
        let task_dyn = DVector::from_column_slice(task.as_slice());
        let (lo, hi) = velocity_box(&self.model, dt, &input.q_star_prev, &input.qdot_star_prev)?;

        // level 1: min |J qdot - task|^2 + ridge |qdot|^2
        let jt = j.transpose();
        let mut h1 = &jt * &j;
        for i in 0..n {
            h1[(i, i)] += LEVEL_RIDGE;
        }
        h1 *= 2.0;
        let g1 = &jt * &task_dyn * -2.0;
        let p1 = QpProblem::new(h1, g1).with_bounds(lo.clone(), hi.clone());
        let s1 = self.solve(0, &p1)?;

        // level 2: base tracking and arm centring with the level-1 task frozen
        let mut r = DVector::zeros(n);
        let q_star = &input.q_star_prev;
        let mid = self.model.q_a_mid();
        for i in 0..n {
            let base_err = if i < N_BASE {
                let d = input.q_b_d[i] - q_star[i];
                if i == 2 {
                    wrap_angle(d)
                } else {
                    d
                }
            } else {
                0.0
            };
            let arm_err = if i >= N_BASE {
                mid[i - N_BASE] - q_star[i]
            } else {
                0.0
            };
            r[i] = self.gains.h_b[i] * base_err + self.gains.h_a[i] * arm_err;
        }
        // objective scaled by 1/dt^2: |S qdot - r/dt|^2, S'S = H_b^2 + H_a^2
        let mut h2 = DMatrix::zeros(n, n);
        for i in 0..n {
            let s2 = self.gains.h_b[i].powi(2) + self.gains.h_a[i].powi(2);
            h2[(i, i)] = 2.0 * (s2 + LEVEL_RIDGE);
        }
        let g2 = &r * (-2.0 / dt);
        let achieved = &j * &s1.x;
        let p2 = QpProblem::new(h2, g2)
            .with_equality(j.clone(), achieved)
            .with_bounds(lo.clone(), hi.clone());
        let (s2, level2_fallback) = self.solve_level2(&p2, &s1)?;

        let qdot_star = s2.x;
        let q_star_new = &input.q_star_prev + &qdot_star * dt;
        let level1_residual = (&j * &qdot_star - &task_dyn).norm();
        Ok(ControlStepOutput {
            level1_residual,
            q_star: q_star_new,
            qdot_level1: s1.x,
            qdot_star,
            task_velocity: task,
            x_a,
            xdot_a,
            jacobian: j,
            lower: lo,
            upper: hi,
            diagnostics: StepDiagnostics {
                active_level1: s1.active_set.len(),
                active_level2: s2.active_set.len(),
                iterations_level1: s1.iterations,
                iterations_level2: s2.iterations,
                solve_us_level1: s1.solve_time_us,
                solve_us_level2: s2.solve_time_us,
                level2_fallback,
            },
        })
    }

    fn solve(&mut self, level: usize, p: &QpProblem) -> Result<QpSolution, HqpError> {
        let warm: &[ActiveConstraint] = if self.use_warm_start {
            &self.warm[level]
        } else {
            &[]
        };
        let s = self
            .solver
            .solve_warm(p, warm)
            .map_err(|source| HqpError::Solver {
                level: level + 1,
                source,
            })?;
        if s.status != QpStatus::Optimal {
            return Err(HqpError::SolverStatus {
                level: level + 1,
                status: s.status,
            });
        }
        self.warm[level] = s.active_set.clone();
        Ok(s)
    }

    /// The level-1 optimum is feasible for level 2 by construction, so a
    /// level-2 failure comes from degeneracy: the equality plus saturated
    /// bounds leave a thin feasible set. Retry cold, and if the result is
    /// still not cleanly feasible keep the level-1 optimum. The flag reports
    /// whether that fallback was taken.
    fn solve_level2(
        &mut self,
        p: &QpProblem,
        s1: &QpSolution,
    ) -> Result<(QpSolution, bool), HqpError> {
        let wrap = |source| HqpError::Solver { level: 2, source };
        let accept =
            |s: &QpSolution| s.status == QpStatus::Optimal && p.max_violation(&s.x) <= ACCEPT_TOL;
        let warm: &[ActiveConstraint] = if self.use_warm_start {
            &self.warm[1]
        } else {
            &[]
        };
        let mut s = self.solver.solve_warm(p, warm).map_err(wrap)?;
        if !accept(&s) && !warm.is_empty() {
            s = self.solver.solve(p).map_err(wrap)?;
        }
        if accept(&s) {
            self.warm[1] = s.active_set.clone();
            return Ok((s, false));
        }
        if p.max_violation(&s1.x) > ACCEPT_TOL {
            return Err(HqpError::SolverStatus {
                level: 2,
                status: s.status,
            });
        }
        debug!(
            "level 2 ended with {:?} at violation {:.1e}, keeping the level-1 optimum",
            s.status,
            p.max_violation(&s.x)
        );
        self.warm[1].clear();
        let fallback = QpSolution {
            x: s1.x.clone(),
            objective: p.objective(&s1.x),
            active_set: Vec::new(),
            ..s
        };
        Ok((fallback, true))
    }
}

/// One cold-started controller step.
pub fn step(
    model: &RobotModel,
    gains: &ControllerGains,
    input: &ControlStepInput,
) -> Result<ControlStepOutput, HqpError> {
    HqpController::new(model.clone(), gains.clone())?
        .with_warm_start(false)
        .step(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseChannel {
    EePosition,
    EeVelocity,
    BaseLearnedVsOptimal,
    BaseOptimalVsActual,
}

impl RmseChannel {
    pub const ALL: [RmseChannel; 4] = [
        RmseChannel::EePosition,
        RmseChannel::EeVelocity,
        RmseChannel::BaseLearnedVsOptimal,
        RmseChannel::BaseOptimalVsActual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RmseChannel::EePosition => "ee_position",
            RmseChannel::EeVelocity => "ee_velocity",
            RmseChannel::BaseLearnedVsOptimal => "base_learned_vs_optimal",
            RmseChannel::BaseOptimalVsActual => "base_optimal_vs_actual",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("log has no records")]
pub struct EmptyLog;

/// Per-axis root-mean-square error over all logged steps. Heading
/// differences are wrapped.
pub fn rmse(log: &SimLog, channel: RmseChannel) -> Result<Vector3<f64>, EmptyLog> {
    let recs = log.records();
    if recs.is_empty() {
        return Err(EmptyLog);
    }
    let mut acc = Vector3::zeros();
    for r in recs {
        let e = match channel {
            RmseChannel::EePosition => r.x_d - r.x_a,
            RmseChannel::EeVelocity => r.xdot_d - r.xdot_a,
            RmseChannel::BaseLearnedVsOptimal => base_diff(&r.q_b_d, &r.q_b_star),
            RmseChannel::BaseOptimalVsActual => base_diff(&r.q_b_star, &r.q_b_act),
        };
        acc += e.component_mul(&e);
    }
    Ok((acc / recs.len() as f64).map(f64::sqrt))
}

fn base_diff(a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let mut d = a - b;
    d.z = wrap_angle(d.z);
    d
}
