//! JSON-configurable wiring of the learning and execution stages.

use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::{align, generate_synthetic, DemoError, DemoGenConfig, DemoSet};
use crate::gmm::{fit_gmm, gmr, Gmm, GmmError, ReferenceTrajectory};
use crate::hqp::{ClikForm, ControllerGains};
use crate::kinematics::RobotModel;
use crate::kmp::{KernelParams, KmpError, KmpModel, ViaPoint};
use crate::sim::{self, PlantConfig, SimError, SimOutput};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("demonstrations: {0}")]
    Demo(#[from] DemoError),
    #[error("gmm: {0}")]
    Gmm(#[from] GmmError),
    #[error("kmp: {0}")]
    Kmp(#[from] KmpError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub demos: PathBuf,
    pub model: PathBuf,
    pub log: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            demos: "demos.csv".into(),
            model: "model.json".into(),
            log: "sim_log.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    pub count: usize,
    pub seed: u64,
    pub generator: DemoGenConfig,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self {
            count: 5,
            seed: 42,
            generator: DemoGenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub n_points: usize,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self { n_points: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSection {
    pub k: usize,
    pub seed: u64,
}

impl Default for GmmSection {
    fn default() -> Self {
        Self { k: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainSection {
    pub kp: [f64; 3],
    pub kv: [f64; 3],
    pub dt: f64,
    pub clik_form: ClikForm,
}

impl Default for GainSection {
    fn default() -> Self {
        Self {
            kp: [4.0; 3],
            kv: [1.0; 3],
            dt: 0.001,
            clik_form: ClikForm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub duration: f64,
    pub grasp_time: f64,
    pub via_points: Vec<ViaPoint>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            duration: 26.0,
            grasp_time: 18.15,
            via_points: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub demos: DemoSection,
    pub align: AlignSection,
    pub gmm: GmmSection,
    pub kmp: KernelParams,
    pub gains: GainSection,
    pub robot: RobotModel,
    pub plant: PlantConfig,
    pub scenario: ScenarioSection,
}

/// Start state for the generalization scenario: wrist and base pose, at rest.
pub const NEW_START_WRIST: [f64; 3] = [-0.0827, 0.5623, 1.007];
pub const NEW_START_BASE: [f64; 3] = [-0.7883, 0.7634, -0.53];

pub fn start_via_point() -> ViaPoint {
    let mut m = DVector::zeros(9);
    m.fixed_rows_mut::<3>(0)
        .copy_from(&Vector3::from(NEW_START_WRIST));
    m.fixed_rows_mut::<3>(6)
        .copy_from(&Vector3::from(NEW_START_BASE));
    ViaPoint::new(0.0, m)
}

/// Via-point pinning the grasp anchor of `gen` (the one at `grasp_time`).
pub fn grasp_via_point(gen: &DemoGenConfig, grasp_time: f64) -> Option<ViaPoint> {
    let a = gen
        .anchors
        .iter()
        .find(|a| (a.t - grasp_time).abs() < 1e-9)?;
    let mut m = DVector::zeros(9);
    m.fixed_rows_mut::<3>(0).copy_from(&a.wrist_pos);
    m.fixed_rows_mut::<3>(3).copy_from(&a.wrist_vel);
    m.fixed_rows_mut::<3>(6).copy_from(&a.pelvis_pose);
    Some(ViaPoint::new(a.t, m))
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Defaults with the new start state and the grasp anchor as via-points.
    pub fn generalization() -> Self {
        let mut cfg = Self::default();
        let mut via = vec![start_via_point()];
        via.extend(grasp_via_point(
            &cfg.demos.generator,
            cfg.scenario.grasp_time,
        ));
        cfg.scenario.via_points = via;
        cfg
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.demos.count == 0 {
            return bad("demos.count must be at least 1".into());
        }
        if self.align.n_points < 2 {
            return bad("align.n_points must be at least 2".into());
        }
        if self.gmm.k == 0 {
            return bad("gmm.k must be at least 1".into());
        }
        self.kmp
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.controller_gains()
            .validate(self.robot.n())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.plant
            .validate(self.robot.n_a())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let s = &self.scenario;
        if !(s.duration.is_finite() && s.duration > 0.0) {
            return bad("scenario.duration must be positive".into());
        }
        if !(s.grasp_time > 0.0 && s.grasp_time < s.duration) {
            return bad("scenario.grasp_time must lie inside the run".into());
        }
        Ok(())
    }

    pub fn controller_gains(&self) -> ControllerGains {
        let mut g = ControllerGains::new(
            self.gains.kp,
            self.gains.kv,
            self.gains.dt,
            self.robot.n_a(),
        );
        g.clik_form = self.gains.clik_form;
        g
    }
}

/// Everything produced by the learning stage.
#[derive(Debug, Clone)]
pub struct Learned {
    pub aligned: DemoSet,
    pub gmm: Gmm,
    pub reference: ReferenceTrajectory,
    pub model: KmpModel,
}

pub fn generate_demos(cfg: &PipelineConfig) -> Result<DemoSet, PipelineError> {
    Ok(generate_synthetic(
        &cfg.demos.generator,
        cfg.demos.count,
        cfg.demos.seed,
    )?)
}

/// Align, fit the mixture, regress on the aligned grid and train the KMP.
pub fn learn(demos: &DemoSet, cfg: &PipelineConfig) -> Result<Learned, PipelineError> {
    let aligned = align(demos, cfg.align.n_points)?;
    let gmm = fit_gmm(&aligned, cfg.gmm.k, cfg.gmm.seed)?;
    let grid: Vec<f64> = aligned.demos()[0].samples().iter().map(|s| s.t).collect();
    let reference = gmr(&gmm, &grid)?;
    let model = KmpModel::train(&reference, cfg.kmp)?;
    info!(
        "learned KMP on {} reference points from {} demos",
        model.len(),
        demos.demos().len()
    );
    Ok(Learned {
        aligned,
        gmm,
        reference,
        model,
    })
}

pub fn adapt(model: &KmpModel, cfg: &PipelineConfig) -> Result<KmpModel, PipelineError> {
    Ok(model.adapt(&cfg.scenario.via_points)?)
}

pub fn simulate(model: &KmpModel, cfg: &PipelineConfig) -> Result<SimOutput, PipelineError> {
    Ok(sim::run(
        &cfg.robot,
        &cfg.controller_gains(),
        &cfg.plant,
        model,
        cfg.scenario.duration,
        cfg.scenario.grasp_time,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.kmp.lambda, 10.0);
        assert_eq!(cfg.gains.kp, [4.0; 3]);
        assert_eq!(cfg.plant.kp, vec![20.0; 7]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(r#"{"gmm": {"k": 3, "bogus": 1}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"extra": {}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(
            PipelineConfig::from_json(r#"{"kmp": {"lambda": 0.0, "bandwidth": 0.1}}"#).is_err()
        );
        assert!(PipelineConfig::from_json(r#"{"scenario": {"grasp_time": 30.0}}"#).is_err());
    }

    #[test]
    fn config_round_trip() {
        let cfg = PipelineConfig::generalization();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.scenario.via_points.len(), 2);
    }
}
