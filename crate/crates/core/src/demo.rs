//! Demonstration data: samples of wrist position/velocity and pelvis planar
//! pose, CSV ingestion, time alignment, and a synthetic demonstration generator.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{linspace, wrap_angle};

/// Dimension of the learned output vector `[wrist_pos; wrist_vel; pelvis_pose]`.
pub const OUTPUT_DIM: usize = 9;

/// Column layout of demonstration CSV files.
pub const CSV_HEADER: [&str; 11] = [
    "demo_id", "t", "wx", "wy", "wz", "wvx", "wvy", "wvz", "px", "py", "pphi",
];

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed header: expected `{expected}`, found `{found}`")]
    MalformedHeader { expected: String, found: String },
    #[error("row {row}: time does not increase within demo `{demo_id}`")]
    NonMonotonicTime { row: usize, demo_id: String },
    #[error("row {row}, column `{column}`: non-finite value")]
    NonFiniteValue { row: usize, column: String },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("demo `{demo_id}` has {count} samples, at least 2 are required")]
    TooFewSamples { demo_id: String, count: usize },
    #[error("demonstration set is empty")]
    EmptySet,
    #[error("demo `{demo_id}` has non-positive duration")]
    ZeroDuration { demo_id: String },
    #[error("alignment needs at least 2 grid points, got {0}")]
    TooFewGridPoints(usize),
    #[error("anchor {index} at t={t} does not come after the previous anchor (t={previous})")]
    InvalidAnchorTimes { index: usize, t: f64, previous: f64 },
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
}

/// One time-stamped sample of the demonstrated whole-body motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoSample {
    pub t: f64,
    pub wrist_pos: Vector3<f64>,
    pub wrist_vel: Vector3<f64>,
    /// Planar pelvis pose `[x, y, phi]`.
    pub pelvis_pose: Vector3<f64>,
}

impl DemoSample {
    pub fn output(&self) -> DVector<f64> {
        let mut v = DVector::zeros(OUTPUT_DIM);
        v.fixed_rows_mut::<3>(0).copy_from(&self.wrist_pos);
        v.fixed_rows_mut::<3>(3).copy_from(&self.wrist_vel);
        v.fixed_rows_mut::<3>(6).copy_from(&self.pelvis_pose);
        v
    }

    fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.wrist_pos.iter().all(|x| x.is_finite())
            && self.wrist_vel.iter().all(|x| x.is_finite())
            && self.pelvis_pose.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    source_id: String,
    samples: Vec<DemoSample>,
}

impl Demonstration {
    /// Validates ordering and finiteness; pelvis headings are wrapped into `(-pi, pi]`.
    pub fn new(
        source_id: impl Into<String>,
        mut samples: Vec<DemoSample>,
    ) -> Result<Self, DemoError> {
        let source_id = source_id.into();
        if samples.len() < 2 {
            return Err(DemoError::TooFewSamples {
                demo_id: source_id,
                count: samples.len(),
            });
        }
        for (i, s) in samples.iter_mut().enumerate() {
            if !s.is_finite() || s.t < 0.0 {
                return Err(DemoError::NonFiniteValue {
                    row: i + 1,
                    column: "sample".into(),
                });
            }
            s.pelvis_pose.z = wrap_angle(s.pelvis_pose.z);
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(DemoError::NonMonotonicTime {
                row: i + 2,
                demo_id: source_id,
            });
        }
        Ok(Self { source_id, samples })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn samples(&self) -> &[DemoSample] {
        &self.samples
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].t - self.samples[0].t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    demos: Vec<Demonstration>,
    /// Number of grid points once aligned.
    n_resample: Option<usize>,
    /// Common duration after alignment; median demo duration otherwise.
    duration: f64,
}

impl DemoSet {
    pub fn new(demos: Vec<Demonstration>) -> Result<Self, DemoError> {
        if demos.is_empty() {
            return Err(DemoError::EmptySet);
        }
        let duration = median(demos.iter().map(Demonstration::duration).collect());
        Ok(Self {
            demos,
            n_resample: None,
            duration,
        })
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn n_resample(&self) -> Option<usize> {
        self.n_resample
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn is_aligned(&self) -> bool {
        self.n_resample.is_some()
    }

    pub fn total_samples(&self) -> usize {
        self.demos.iter().map(|d| d.samples.len()).sum()
    }

    /// Stacked `(s, xi)` rows of every sample, input first.
    pub fn joint_data(&self) -> Vec<DVector<f64>> {
        self.demos
            .iter()
            .flat_map(|d| d.samples.iter())
            .map(|s| {
                let mut row = DVector::zeros(OUTPUT_DIM + 1);
                row[0] = s.t;
                row.rows_mut(1, OUTPUT_DIM).copy_from(&s.output());
                row
            })
            .collect()
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<DemoSet, DemoError> {
    read_csv(File::open(path)?)
}

/// Parses the demonstration CSV schema. Row numbers in errors count data rows from 1.
pub fn read_csv<R: Read>(reader: R) -> Result<DemoSet, DemoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(DemoError::MalformedHeader {
            expected: CSV_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }

    let mut groups: Vec<(String, Vec<DemoSample>)> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != CSV_HEADER.len() {
            return Err(DemoError::Parse {
                row,
                message: format!(
                    "expected {} fields, found {}",
                    CSV_HEADER.len(),
                    record.len()
                ),
            });
        }
        let mut values = [0.0; 10];
        for (j, v) in values.iter_mut().enumerate() {
            let field = &record[j + 1];
            *v = field.parse::<f64>().map_err(|e| DemoError::Parse {
                row,
                message: format!("column `{}`: {e}", CSV_HEADER[j + 1]),
            })?;
            if !v.is_finite() {
                return Err(DemoError::NonFiniteValue {
                    row,
                    column: CSV_HEADER[j + 1].to_string(),
                });
            }
        }
        let sample = DemoSample {
            t: values[0],
            wrist_pos: Vector3::new(values[1], values[2], values[3]),
            wrist_vel: Vector3::new(values[4], values[5], values[6]),
            pelvis_pose: Vector3::new(values[7], values[8], values[9]),
        };
        let id = &record[0];
        let group = match groups.iter().position(|(g, _)| g == id) {
            Some(k) => &mut groups[k].1,
            None => {
                groups.push((id.to_string(), Vec::new()));
                &mut groups.last_mut().expect("just pushed").1
            }
        };
        if let Some(prev) = group.last() {
            if sample.t <= prev.t {
                return Err(DemoError::NonMonotonicTime {
                    row,
                    demo_id: id.to_string(),
                });
            }
        }
        if sample.t < 0.0 {
            return Err(DemoError::Parse {
                row,
                message: "negative time stamp".into(),
            });
        }
        group.push(sample);
    }

    let demos = groups
        .into_iter()
        .map(|(id, samples)| Demonstration::new(id, samples))
        .collect::<Result<Vec<_>, _>>()?;
    DemoSet::new(demos)
}

pub fn save_csv(set: &DemoSet, path: impl AsRef<Path>) -> Result<(), DemoError> {
    let mut file = File::create(path)?;
    write_csv(set, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(set: &DemoSet, writer: W) -> Result<(), DemoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CSV_HEADER)?;
    for demo in &set.demos {
        for s in &demo.samples {
            let mut rec = Vec::with_capacity(CSV_HEADER.len());
            rec.push(demo.source_id.clone());
            rec.push(s.t.to_string());
            rec.extend(s.wrist_pos.iter().map(f64::to_string));
            rec.extend(s.wrist_vel.iter().map(f64::to_string));
            rec.extend(s.pelvis_pose.iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Rescale every demo to the median duration and resample on a uniform grid.
///
/// Velocities are interpolated as stored channels; the heading is interpolated
/// along the unwrapped sequence and re-wrapped.
pub fn align(set: &DemoSet, n_points: usize) -> Result<DemoSet, DemoError> {
    if set.demos.is_empty() {
        return Err(DemoError::EmptySet);
    }
    if n_points < 2 {
        return Err(DemoError::TooFewGridPoints(n_points));
    }
    for d in &set.demos {
        if d.duration() <= 0.0 {
            return Err(DemoError::ZeroDuration {
                demo_id: d.source_id.clone(),
            });
        }
    }
    let duration = median(set.demos.iter().map(Demonstration::duration).collect());
    let grid = linspace(0.0, duration, n_points);

    let demos = set
        .demos
        .iter()
        .map(|d| {
            let t0 = d.samples[0].t;
            let scale = duration / d.duration();
            let times: Vec<f64> = d
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    if i == d.samples.len() - 1 {
                        duration
                    } else {
                        (s.t - t0) * scale
                    }
                })
                .collect();
            let headings = unwrap_headings(d.samples.iter().map(|s| s.pelvis_pose.z));
            let samples = grid
                .iter()
                .map(|&g| {
                    let (j, w) = bracket(&times, g);
                    let (a, b) = (&d.samples[j], &d.samples[(j + 1).min(d.samples.len() - 1)]);
                    let phi = lerp(headings[j], headings[(j + 1).min(headings.len() - 1)], w);
                    let mut pelvis = lerp3(&a.pelvis_pose, &b.pelvis_pose, w);
                    pelvis.z = wrap_angle(phi);
                    DemoSample {
                        t: g,
                        wrist_pos: lerp3(&a.wrist_pos, &b.wrist_pos, w),
                        wrist_vel: lerp3(&a.wrist_vel, &b.wrist_vel, w),
                        pelvis_pose: pelvis,
                    }
                })
                .collect();
            Demonstration {
                source_id: d.source_id.clone(),
                samples,
            }
        })
        .collect();

    Ok(DemoSet {
        demos,
        n_resample: Some(n_points),
        duration,
    })
}

/// Segment index `j` and weight `w` such that `x = (1-w) t[j] + w t[j+1]`, clamped to the ends.
fn bracket(times: &[f64], x: f64) -> (usize, f64) {
    let n = times.len();
    if x <= times[0] {
        return (0, 0.0);
    }
    if x >= times[n - 1] {
        return (n - 2, 1.0);
    }
    let j = times.partition_point(|&t| t <= x) - 1;
    let w = (x - times[j]) / (times[j + 1] - times[j]);
    (j, w)
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    (1.0 - w) * a + w * b
}

fn lerp3(a: &Vector3<f64>, b: &Vector3<f64>, w: f64) -> Vector3<f64> {
    a * (1.0 - w) + b * w
}

fn unwrap_headings(iter: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for a in iter {
        match out.last() {
            None => out.push(a),
            Some(&prev) => out.push(prev + wrap_angle(a - wrap_angle(prev))),
        }
    }
    out
}

/// A point the synthetic demonstrations pass through exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub t: f64,
    pub wrist_pos: Vector3<f64>,
    pub wrist_vel: Vector3<f64>,
    pub pelvis_pose: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoGenConfig {
    pub anchors: Vec<Anchor>,
    /// Amplitude of the smooth per-demo perturbation, meters (radians on the heading).
    #[serde(default = "default_noise")]
    pub noise_m: f64,
    #[serde(default = "default_sample_hz")]
    pub sample_hz: f64,
}

fn default_noise() -> f64 {
    0.02
}

fn default_sample_hz() -> f64 {
    100.0
}

impl Default for DemoGenConfig {
    /// Bottle pick-and-place: start, approach, grasp at non-zero velocity, place.
    fn default() -> Self {
        let anchor = |t, w: [f64; 3], v: [f64; 3], p: [f64; 3]| Anchor {
            t,
            wrist_pos: Vector3::from(w),
            wrist_vel: Vector3::from(v),
            pelvis_pose: Vector3::from(p),
        };
        Self {
            anchors: vec![
                anchor(0.0, [0.417, 0.062, 1.107], [0.0; 3], [-0.288, 0.263, 0.046]),
                anchor(
                    15.0,
                    [3.10, 0.25, 0.956],
                    [0.24, 0.07, -0.04],
                    [2.411, 0.35, 0.35],
                ),
                anchor(
                    18.15,
                    [3.687, 0.423, 0.812],
                    [0.056, 0.164, 0.072],
                    [2.823, 0.427, 0.885],
                ),
                anchor(26.0, [3.73, 0.97, 0.862], [0.0; 3], [3.0, 0.70, 1.0]),
            ],
            noise_m: default_noise(),
            sample_hz: default_sample_hz(),
        }
    }
}

impl DemoGenConfig {
    pub fn validate(&self) -> Result<(), DemoError> {
        if self.anchors.len() < 2 {
            return Err(DemoError::InvalidConfig(
                "at least 2 anchors are required".into(),
            ));
        }
        if !(self.sample_hz.is_finite() && self.sample_hz > 0.0) {
            return Err(DemoError::InvalidConfig(
                "sample_hz must be positive".into(),
            ));
        }
        if !(self.noise_m.is_finite() && self.noise_m >= 0.0) {
            return Err(DemoError::InvalidConfig(
                "noise_m must be non-negative".into(),
            ));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            let finite = a.t.is_finite()
                && a.wrist_pos
                    .iter()
                    .chain(&a.wrist_vel)
                    .chain(&a.pelvis_pose)
                    .all(|x| x.is_finite());
            if !finite || a.t < 0.0 {
                return Err(DemoError::InvalidConfig(format!(
                    "anchor {i} has invalid values"
                )));
            }
            if i > 0 && a.t <= self.anchors[i - 1].t {
                return Err(DemoError::InvalidAnchorTimes {
                    index: i,
                    t: a.t,
                    previous: self.anchors[i - 1].t,
                });
            }
        }
        Ok(())
    }
}

/// Quintic Hermite segment with zero boundary accelerations.
struct Quintic {
    t0: f64,
    len: f64,
    p0: Vector3<f64>,
    p1: Vector3<f64>,
    v0: Vector3<f64>,
    v1: Vector3<f64>,
}

impl Quintic {
    fn eval(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let u = (t - self.t0) / self.len;
        let (u2, u3) = (u * u, u * u * u);
        let (u4, u5) = (u3 * u, u3 * u2);
        let h00 = 1.0 - 10.0 * u3 + 15.0 * u4 - 6.0 * u5;
        let h01 = 10.0 * u3 - 15.0 * u4 + 6.0 * u5;
        let h10 = u - 6.0 * u3 + 8.0 * u4 - 3.0 * u5;
        let h11 = -4.0 * u3 + 7.0 * u4 - 3.0 * u5;
        let d00 = -30.0 * u2 + 60.0 * u3 - 30.0 * u4;
        let d10 = 1.0 - 18.0 * u2 + 32.0 * u3 - 15.0 * u4;
        let d11 = -12.0 * u2 + 28.0 * u3 - 15.0 * u4;
        let pos = self.p0 * h00 + self.p1 * h01 + (self.v0 * h10 + self.v1 * h11) * self.len;
        let vel = (self.p1 - self.p0) * (-d00 / self.len) + self.v0 * d10 + self.v1 * d11;
        (pos, vel)
    }
}

/// Smooth perturbation vanishing with zero slope at both segment ends.
struct SegmentNoise {
    amp: f64,
    terms: Vec<[(f64, f64, f64); 3]>,
}

impl SegmentNoise {
    fn random(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        let terms = (0..3)
            .map(|_| {
                let mut axis = [(0.0, 0.0, 0.0); 3];
                let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                for (k, slot) in axis.iter_mut().enumerate() {
                    let freq = rng.random_range(0.05..0.25);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    *slot = (weights[k] / total, freq, phase);
                }
                axis
            })
            .collect();
        Self { amp, terms }
    }

    /// Value and time derivative on the segment `[t0, t0 + len]`.
    fn eval(&self, t: f64, t0: f64, len: f64) -> (Vector3<f64>, Vector3<f64>) {
        let arg = PI * (t - t0) / len;
        let window = arg.sin().powi(2);
        let dwindow = (PI / len) * (2.0 * arg).sin();
        let mut val = Vector3::zeros();
        let mut der = Vector3::zeros();
        for (axis, terms) in self.terms.iter().enumerate() {
            let (mut s, mut ds) = (0.0, 0.0);
            for &(w, f, ph) in terms {
                let omega = 2.0 * PI * f;
                s += w * (omega * t + ph).sin();
                ds += w * omega * (omega * t + ph).cos();
            }
            val[axis] = self.amp * window * s;
            der[axis] = self.amp * (dwindow * s + window * ds);
        }
        (val, der)
    }
}

/// Generate `n_demos` synthetic demonstrations through the configured anchors.
///
/// Wrist and pelvis follow piecewise quintic splines; each demo adds its own
/// smooth perturbation that vanishes (with zero slope) at every anchor, and
/// the stored wrist velocity is the analytic derivative of the perturbed path.
pub fn generate_synthetic(
    cfg: &DemoGenConfig,
    n_demos: usize,
    rng_seed: u64,
) -> Result<DemoSet, DemoError> {
    cfg.validate()?;
    if n_demos == 0 {
        return Err(DemoError::EmptySet);
    }
    let anchors = &cfg.anchors;
    let last = anchors.len() - 1;
    let pelvis_tangent = |i: usize| -> Vector3<f64> {
        if i == 0 || i == last {
            Vector3::zeros()
        } else {
            (anchors[i + 1].pelvis_pose - anchors[i - 1].pelvis_pose)
                / (anchors[i + 1].t - anchors[i - 1].t)
        }
    };
    let mut wrist_segments = Vec::with_capacity(last);
    let mut pelvis_segments = Vec::with_capacity(last);
    for i in 0..last {
        let (a, b) = (&anchors[i], &anchors[i + 1]);
        let len = b.t - a.t;
        wrist_segments.push(Quintic {
            t0: a.t,
            len,
            p0: a.wrist_pos,
            p1: b.wrist_pos,
            v0: a.wrist_vel,
            v1: b.wrist_vel,
        });
        pelvis_segments.push(Quintic {
            t0: a.t,
            len,
            p0: a.pelvis_pose,
            p1: b.pelvis_pose,
            v0: pelvis_tangent(i),
            v1: pelvis_tangent(i + 1),
        });
    }

    let t_start = anchors[0].t;
    let span = anchors[last].t - t_start;
    let n_samples = (span * cfg.sample_hz).round() as usize;
    let times: Vec<f64> = (0..=n_samples)
        .map(|k| {
            if k == n_samples {
                anchors[last].t
            } else {
                t_start + k as f64 / cfg.sample_hz
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut demos = Vec::with_capacity(n_demos);
    for m in 0..n_demos {
        let wrist_noise = SegmentNoise::random(&mut rng, cfg.noise_m);
        let pelvis_noise = SegmentNoise::random(&mut rng, cfg.noise_m);
        let samples = times
            .iter()
            .map(|&t| {
                let seg = anchors[1..last]
                    .iter()
                    .take_while(|a| a.t <= t)
                    .count()
                    .min(last - 1);
                let (ws, ps) = (&wrist_segments[seg], &pelvis_segments[seg]);
                let (mut pos, mut vel) = ws.eval(t);
                let (pelvis, _) = ps.eval(t);
                let (np, nv) = wrist_noise.eval(t, ws.t0, ws.len);
                let (pn, _) = pelvis_noise.eval(t, ps.t0, ps.len);
                pos += np;
                vel += nv;
                let mut pelvis = pelvis + pn;
                pelvis.z = wrap_angle(pelvis.z);
                DemoSample {
                    t,
                    wrist_pos: pos,
                    wrist_vel: vel,
                    pelvis_pose: pelvis,
                }
            })
            .collect();
        demos.push(Demonstration::new(format!("demo{}", m + 1), samples)?);
    }
    DemoSet::new(demos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, x: f64) -> DemoSample {
        DemoSample {
            t,
            wrist_pos: Vector3::new(x, 2.0 * x, -x),
            wrist_vel: Vector3::new(1.0, 2.0, -1.0),
            pelvis_pose: Vector3::new(x, 0.0, 0.1 * x),
        }
    }

    fn csv_with_rows(rows: &[(&str, f64)]) -> String {
        let mut s = CSV_HEADER.join(",");
        s.push('\n');
        for (id, t) in rows {
            s.push_str(&format!("{id},{t},0,0,0,0,0,0,0,0,0\n"));
        }
        s
    }

    #[test]
    fn minimal_file_loads_one_demo() {
        let set = read_csv(csv_with_rows(&[("a", 0.0), ("a", 0.01)]).as_bytes()).unwrap();
        assert_eq!(set.demos().len(), 1);
        assert_eq!(set.demos()[0].samples().len(), 2);
    }

    #[test]
    fn decreasing_time_reports_row() {
        let rows: Vec<(&str, f64)> = (0..10)
            .map(|i| ("a", if i == 6 { 0.001 } else { i as f64 * 0.01 }))
            .collect();
        match read_csv(csv_with_rows(&rows).as_bytes()) {
            Err(DemoError::NonMonotonicTime { row, .. }) => assert_eq!(row, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_and_non_finite() {
        let bad = "demo,t,wx\n".to_string();
        assert!(matches!(
            read_csv(bad.as_bytes()),
            Err(DemoError::MalformedHeader { .. })
        ));
        let mut nan = csv_with_rows(&[("a", 0.0)]);
        nan.push_str("a,0.01,NaN,0,0,0,0,0,0,0,0\n");
        match read_csv(nan.as_bytes()) {
            Err(DemoError::NonFiniteValue { row, column }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "wx");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_sample_demo_is_rejected() {
        let err = read_csv(csv_with_rows(&[("a", 0.0), ("b", 0.0), ("b", 1.0)]).as_bytes());
        assert!(matches!(err, Err(DemoError::TooFewSamples { .. })));
    }

    #[test]
    fn full_size_corpus_has_expected_shape() {
        let set = generate_synthetic(&DemoGenConfig::default(), 5, 42).unwrap();
        assert_eq!(set.demos().len(), 5);
        for d in set.demos() {
            assert_eq!(d.samples().len(), 2601);
            assert_eq!(d.samples()[2600].t, 26.0);
        }
        let mut buf = Vec::new();
        write_csv(&set, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.demos().len(), 5);
        assert!(back.demos().iter().all(|d| d.samples().len() == 2601));
    }

    #[test]
    fn align_identity_on_grid() {
        let grid = linspace(0.0, 2.0, 5);
        let samples: Vec<_> = grid.iter().map(|&t| sample(t, t * t)).collect();
        let demo = Demonstration::new("a", samples.clone()).unwrap();
        let set = DemoSet::new(vec![demo]).unwrap();
        let aligned = align(&set, 5).unwrap();
        assert_eq!(aligned.demos()[0].samples(), samples.as_slice());
    }

    #[test]
    fn align_uses_median_duration() {
        let d1 = Demonstration::new("a", vec![sample(0.0, 0.0), sample(25.0, 1.0)]).unwrap();
        let d2 = Demonstration::new("b", vec![sample(1.0, 0.0), sample(28.0, 1.0)]).unwrap();
        let aligned = align(&DemoSet::new(vec![d1, d2]).unwrap(), 200).unwrap();
        assert_eq!(aligned.duration(), 26.0);
        assert_eq!(aligned.n_resample(), Some(200));
        for d in aligned.demos() {
            assert_eq!(d.samples().len(), 200);
            assert_eq!(d.samples()[0].t, 0.0);
            assert_eq!(d.samples()[199].t, 26.0);
            assert_eq!(d.samples()[199].wrist_pos.x, 1.0);
        }
    }

    #[test]
    fn align_errors() {
        let d = Demonstration::new("a", vec![sample(0.0, 0.0), sample(1.0, 1.0)]).unwrap();
        let set = DemoSet::new(vec![d]).unwrap();
        assert!(matches!(
            align(&set, 1),
            Err(DemoError::TooFewGridPoints(1))
        ));
        assert!(matches!(DemoSet::new(vec![]), Err(DemoError::EmptySet)));
    }

    #[test]
    fn heading_interpolates_across_wrap() {
        let mut a = sample(0.0, 0.0);
        let mut b = sample(1.0, 0.0);
        a.pelvis_pose.z = PI - 0.1;
        b.pelvis_pose.z = -PI + 0.1;
        let set = DemoSet::new(vec![Demonstration::new("a", vec![a, b]).unwrap()]).unwrap();
        let aligned = align(&set, 3).unwrap();
        let mid = aligned.demos()[0].samples()[1].pelvis_pose.z;
        assert!((mid.abs() - PI).abs() < 1e-12, "mid heading {mid}");
    }

    #[test]
    fn zero_noise_demos_identical() {
        let cfg = DemoGenConfig {
            noise_m: 0.0,
            ..DemoGenConfig::default()
        };
        let set = generate_synthetic(&cfg, 3, 7).unwrap();
        let first = set.demos()[0].samples();
        for d in &set.demos()[1..] {
            assert_eq!(d.samples(), first);
        }
    }

    #[test]
    fn grasp_anchor_speed() {
        let cfg = DemoGenConfig::default();
        let speed = cfg.anchors[2].wrist_vel.norm();
        assert!((speed - 0.188).abs() < 1e-3, "{speed}");
    }

    #[test]
    fn anchors_hit_exactly_for_any_seed() {
        let cfg = DemoGenConfig::default();
        for seed in [0, 1, 99] {
            let set = generate_synthetic(&cfg, 2, seed).unwrap();
            for d in set.demos() {
                for a in &cfg.anchors {
                    let s = d
                        .samples()
                        .iter()
                        .find(|s| (s.t - a.t).abs() < 1e-9)
                        .expect("anchor time is on the sample grid");
                    assert!((s.wrist_pos - a.wrist_pos).norm() < 1e-9);
                    assert!((s.wrist_vel - a.wrist_vel).norm() < 1e-9);
                    assert!((s.pelvis_pose - a.pelvis_pose).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn wrist_velocity_is_derivative_of_position() {
        let set = generate_synthetic(&DemoGenConfig::default(), 1, 3).unwrap();
        let s = set.demos()[0].samples();
        let dt = s[1].t - s[0].t;
        for k in (1..s.len() - 1).step_by(37) {
            let fd = (s[k + 1].wrist_pos - s[k - 1].wrist_pos) / (2.0 * dt);
            assert!((fd - s[k].wrist_vel).norm() < 1e-3, "k={k}");
        }
    }

    #[test]
    fn non_increasing_anchor_times_rejected() {
        let mut cfg = DemoGenConfig::default();
        cfg.anchors[2].t = 10.0;
        match generate_synthetic(&cfg, 1, 0) {
            Err(DemoError::InvalidAnchorTimes { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
