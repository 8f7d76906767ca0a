#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;

use locoman::qp::QpProblem;

/// Minimum objective over every assignment of each inequality row to
/// inactive / at lower / at upper, keeping only primal-feasible candidates.
/// `H` must be positive definite.
pub fn brute_force_qp(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = p.n();
    let m = p.a_in.nrows();
    let n_eq = p.a_eq.nrows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let total = 3usize.pow(m as u32);
    for code in 0..total {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut c = code;
        let mut skip = false;
        for r in 0..m {
            match c % 3 {
                1 if p.lower[r].is_finite() => {
                    rows.push(r);
                    rhs.push(p.lower[r]);
                }
                2 if p.upper[r].is_finite() => {
                    rows.push(r);
                    rhs.push(p.upper[r]);
                }
                0 => {}
                _ => skip = true,
            }
            c /= 3;
        }
        if skip || rows.len() + n_eq > n {
            continue;
        }
        let k = n_eq + rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut b = DVector::zeros(n + k);
        b.rows_mut(0, n).copy_from(&(-&p.g));
        for j in 0..k {
            let row = if j < n_eq {
                p.a_eq.row(j)
            } else {
                p.a_in.row(rows[j - n_eq])
            };
            for i in 0..n {
                kkt[(i, n + j)] = row[i];
                kkt[(n + j, i)] = row[i];
            }
            b[n + j] = if j < n_eq { p.b_eq[j] } else { rhs[j - n_eq] };
        }
        let Some(sol) = kkt.lu().solve(&b) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        if !x.iter().all(|v| v.is_finite()) || p.max_violation(&x) > 1e-9 {
            continue;
        }
        let f = p.objective(&x);
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((x, f));
        }
    }
    best
}

/// Random strictly convex QP with at most `m` two-sided or one-sided rows,
/// feasible by construction around a random point.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m: usize, with_eq: bool) -> QpProblem {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let mut p = QpProblem::new(h, g);
    if with_eq && n > 1 {
        let ae = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
        let be = &ae * &x0;
        p = p.with_equality(ae, be);
    }
    if m > 0 {
        let ai = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let ax = &ai * &x0;
        let mut lo = DVector::zeros(m);
        let mut hi = DVector::zeros(m);
        for r in 0..m {
            let kind = rng.random_range(0..3);
            lo[r] = if kind == 1 {
                f64::NEG_INFINITY
            } else {
                ax[r] - rng.random_range(0.0..0.5)
            };
            hi[r] = if kind == 2 {
                f64::INFINITY
            } else {
                ax[r] + rng.random_range(0.0..0.5)
            };
        }
        p = p.with_inequality(ai, lo, hi);
    }
    p
}

pub fn v3(v: &DVector<f64>, offset: usize) -> Vector3<f64> {
    Vector3::new(v[offset], v[offset + 1], v[offset + 2])
}
