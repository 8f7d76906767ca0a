use nalgebra::{DMatrix, DVector, Vector3};

use locoman::hqp::ControllerGains;
use locoman::kinematics::RobotModel;
use locoman::kmp::{KernelParams, KmpModel};
use locoman::sim::{initial_configuration, run, run_from, PlantConfig, SimOutput};

const DURATION: f64 = 2.0;

fn start_pose() -> DVector<f64> {
    DVector::from_vec(vec![0.2, -0.1, 0.3, 0.0, -0.5, 0.0, -2.0, 0.0, 1.5, 0.8])
}

/// Reference moving the hand along a straight line at `speed` while the
/// base target stays put; `speed = 0` gives a stationary reference.
fn line_reference(
    model: &RobotModel,
    q0: &DVector<f64>,
    speed: Vector3<f64>,
    params: KernelParams,
) -> KmpModel {
    let x0 = model.forward_kinematics(q0).unwrap();
    let inputs: Vec<f64> = (0..=40).map(|i| DURATION * i as f64 / 40.0).collect();
    let means = inputs
        .iter()
        .map(|&s| {
            let x = x0 + speed * s;
            DVector::from_vec(vec![
                x.x, x.y, x.z, speed.x, speed.y, speed.z, q0[0], q0[1], q0[2],
            ])
        })
        .collect();
    let covs = vec![DMatrix::identity(9, 9) * 1e-12; inputs.len()];
    KmpModel::train_points(params, inputs, means, covs).unwrap()
}

fn simulate(plant: PlantConfig, speed: Vector3<f64>) -> (RobotModel, ControllerGains, SimOutput) {
    let model = RobotModel::default();
    let gains = ControllerGains::for_model(&model);
    let reference = line_reference(&model, &start_pose(), speed, KernelParams::default());
    let out = run_from(
        &model,
        &gains,
        &plant,
        &reference,
        DURATION,
        1.2343,
        start_pose(),
    )
    .unwrap();
    (model, gains, out)
}

#[test]
fn ideal_plant_follows_the_jacobian() {
    let (model, gains, out) = simulate(PlantConfig::default(), Vector3::new(0.05, 0.02, -0.01));
    let recs = out.log.records();
    let dt = gains.dt;
    let mut worst: f64 = 0.0;
    for w in recs.windows(2) {
        let j = model.jacobian(&w[0].q_act).unwrap();
        let pred = Vector3::from_iterator((j * &w[0].qdot_star * dt).iter().copied());
        worst = worst.max((w[1].x_a - w[0].x_a - pred).amax());
    }
    // second-order remainder of the step
    assert!(worst < 10.0 * dt * dt, "{worst:e}");
}

#[test]
fn stationary_reference_settles() {
    let model = RobotModel::default();
    let gains = ControllerGains::for_model(&model);
    // narrow kernel and tiny noise so the reference itself is constant
    let params = KernelParams {
        bandwidth: 0.1,
        lambda: 10.0,
    };
    let reference = line_reference(&model, &start_pose(), Vector3::zeros(), params);
    let q0 = initial_configuration(&model, &reference).unwrap();
    let out = run_from(
        &model,
        &gains,
        &PlantConfig::default(),
        &reference,
        DURATION,
        1.0,
        q0,
    )
    .unwrap();
    let settled = out.log.records().iter().filter(|r| r.t >= 1.0);
    let peak = settled.map(|r| r.qdot_star.amax()).fold(0.0, f64::max);
    assert!(peak < 1e-6, "{peak:e}");
}

#[test]
fn log_shape_and_grasp_sampling() {
    for plant in [PlantConfig::default(), PlantConfig::impedance()] {
        let (_, gains, out) = simulate(plant, Vector3::new(0.05, 0.0, 0.0));
        let steps = (DURATION / gains.dt).round() as usize;
        assert_eq!(out.log.len(), steps + 1);
        assert!((out.grasp.t_grasp - 1.2343).abs() <= gains.dt / 2.0);
        for r in out.log.records() {
            let finite = r.x_a.iter().chain(r.xdot_a.iter()).all(|v| v.is_finite())
                && r.qdot_star
                    .iter()
                    .chain(r.q_act.iter())
                    .chain(r.tau_a.iter())
                    .all(|v| v.is_finite());
            assert!(finite, "non-finite entry at t={}", r.t);
        }
    }
}

#[test]
fn logged_velocities_respect_the_limits() {
    let (model, _, out) = simulate(PlantConfig::impedance(), Vector3::new(0.2, -0.1, 0.0));
    let report = out.log.check_constraints(&model);
    assert_eq!(report.violations, 0, "max {:e}", report.max_violation);
}

#[test]
fn log_round_trips_through_csv() {
    let (_, _, out) = simulate(PlantConfig::default(), Vector3::new(0.01, 0.0, 0.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    out.log.save_csv(&path).unwrap();
    let back = locoman::sim::SimLog::load_csv(&path).unwrap();
    assert_eq!(back.records(), out.log.records());
}

#[test]
fn invalid_scenarios_are_rejected() {
    let model = RobotModel::default();
    let gains = ControllerGains::for_model(&model);
    let reference = line_reference(
        &model,
        &start_pose(),
        Vector3::zeros(),
        KernelParams::default(),
    );
    let plant = PlantConfig::default();
    assert!(run(&model, &gains, &plant, &reference, -1.0, 0.5).is_err());
    assert!(run(&model, &gains, &plant, &reference, 1.0, 1.5).is_err());
}
