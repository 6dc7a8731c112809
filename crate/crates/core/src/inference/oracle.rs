//! Dense reference solver for certifying the alternating schedule.
//!
//! Assembles the full quadratic objective over every pixel's albedo and
//! shading plus the global color and solves the normal equations with a dense
//! Cholesky factorization. Cubic in the pixel count; only for small images.

use nalgebra::{DMatrix, DVector};

use super::{ConstraintMode, InferenceProblem};
use crate::error::{arg, Error, Result};
use crate::tensor::PlaneTensor;

/// Largest dense system the oracle agrees to factor.
pub const MAX_ORACLE_VARIABLES: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub albedo_log: PlaneTensor,
    pub shading_log: PlaneTensor,
    pub color_log: [f64; 3],
    pub objective: f64,
}

impl OracleSolution {
    /// Flat vector `[A_0 (3), B_0, A_1 (3), B_1, ..., C (3)]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.albedo_log.len() + self.shading_log.len() + 3);
        for p in 0..self.shading_log.pixels() {
            out.extend_from_slice(self.albedo_log.pixel(p));
            out.push(self.shading_log.data()[p]);
        }
        out.extend_from_slice(&self.color_log);
        out
    }
}

fn solve(h: DMatrix<f64>, g: DVector<f64>) -> Result<DVector<f64>> {
    h.cholesky()
        .map(|ch| ch.solve(&g))
        .ok_or_else(|| Error::Numeric("oracle normal equations are not positive definite".into()))
}

/// Solves the full-image problem directly.
///
/// Soft mode has `4P + 3` unknowns. Hard mode substitutes
/// `A_c = I_c - B - C_c` and solves for the `P + 3` remaining unknowns.
pub fn brute_force_oracle(problem: &InferenceProblem, mode: ConstraintMode) -> Result<OracleSolution> {
    let np = problem.pixels();
    if np == 0 {
        return arg("oracle needs at least one pixel");
    }
    let (h, w) = problem.dims();
    let mut albedo = vec![0.0; 3 * np];
    let mut shading = vec![0.0; np];
    let color;
    match mode {
        ConstraintMode::Soft => {
            let n = 4 * np + 3;
            if n > MAX_ORACLE_VARIABLES {
                return arg(format!("oracle system of {n} variables is too large"));
            }
            let ci = 4 * np;
            let mut hm = DMatrix::<f64>::zeros(n, n);
            let mut g = DVector::<f64>::zeros(n);
            for p in 0..np {
                let wa = 1.0 / problem.var_a.data()[p];
                let wb = 1.0 / problem.var_b.data()[p];
                let wg = 1.0 / problem.var_g.data()[p];
                let mu = problem.mu_a.pixel(p);
                let img = problem.image.pixel(p);
                let bi = 4 * p + 3;
                hm[(bi, bi)] += wb;
                g[bi] += wb * problem.mu_b.data()[p];
                for c in 0..3 {
                    let ai = 4 * p + c;
                    hm[(ai, ai)] += wa;
                    g[ai] += wa * mu[c];
                    // Slack term couples A_c, B and C_c with unit coefficients.
                    let vars = [ai, bi, ci + c];
                    for &r in &vars {
                        for &s in &vars {
                            hm[(r, s)] += wg;
                        }
                        g[r] += wg * img[c];
                    }
                }
            }
            let x = solve(hm, g)?;
            for p in 0..np {
                albedo[3 * p..3 * p + 3].copy_from_slice(&x.as_slice()[4 * p..4 * p + 3]);
                shading[p] = x[4 * p + 3];
            }
            color = [x[ci], x[ci + 1], x[ci + 2]];
        }
        ConstraintMode::Hard => {
            let n = np + 3;
            if n > MAX_ORACLE_VARIABLES {
                return arg(format!("oracle system of {n} variables is too large"));
            }
            let mut hm = DMatrix::<f64>::zeros(n, n);
            let mut g = DVector::<f64>::zeros(n);
            for p in 0..np {
                let wa = 1.0 / problem.var_a.data()[p];
                let wb = 1.0 / problem.var_b.data()[p];
                let mu = problem.mu_a.pixel(p);
                let img = problem.image.pixel(p);
                hm[(p, p)] += wb;
                g[p] += wb * problem.mu_b.data()[p];
                for c in 0..3 {
                    // (I_c - mu_c - B - C_c)^2 / 2varA
                    let vars = [p, np + c];
                    for &r in &vars {
                        for &s in &vars {
                            hm[(r, s)] += wa;
                        }
                        g[r] += wa * (img[c] - mu[c]);
                    }
                }
            }
            let x = solve(hm, g)?;
            color = [x[np], x[np + 1], x[np + 2]];
            for p in 0..np {
                shading[p] = x[p];
                let img = problem.image.pixel(p);
                for c in 0..3 {
                    albedo[3 * p + c] = img[c] - x[p] - color[c];
                }
            }
        }
    }
    if albedo.iter().chain(&shading).chain(&color).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("oracle produced non-finite values".into()));
    }
    let albedo_log = PlaneTensor::from_raw(h, w, 3, albedo);
    let shading_log = PlaneTensor::from_raw(h, w, 1, shading);
    let objective = problem.objective(&albedo_log, &shading_log, &color, mode);
    Ok(OracleSolution { albedo_log, shading_log, color_log: color, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{alternating_minimize, solve_global_color, solve_pixel_soft, AlternatingOptions, PixelProblem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, h: usize, w: usize, var_g: Option<f64>) -> InferenceProblem {
        let mut m = |c: usize, lo: f64, hi: f64| PlaneTensor::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi));
        let mu_a = m(3, -2.0, 0.0);
        let mu_b = m(1, -1.5, 0.0);
        let var_a = m(1, 0.05, 2.0);
        let var_b = m(1, 0.05, 2.0);
        let var_g = match var_g {
            Some(v) => PlaneTensor::filled(h, w, 1, v),
            None => m(1, 0.05, 2.0),
        };
        let image = m(3, -3.0, 0.0);
        InferenceProblem::new(mu_a, mu_b, var_a, var_b, var_g, image).unwrap()
    }

    #[test]
    fn single_pixel_is_a_joint_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prob = random_problem(&mut rng, 1, 1, None);
        let sol = brute_force_oracle(&prob, ConstraintMode::Soft).unwrap();
        let c = solve_global_color(&sol.albedo_log, &sol.shading_log, &prob.image, &prob.var_g).unwrap();
        for k in 0..3 {
            assert!((c[k] - sol.color_log[k]).abs() < 1e-10);
        }
        let (a, b) = solve_pixel_soft(&PixelProblem {
            mu_a: [prob.mu_a.data()[0], prob.mu_a.data()[1], prob.mu_a.data()[2]],
            mu_b: prob.mu_b.data()[0],
            var_a: prob.var_a.data()[0],
            var_b: prob.var_b.data()[0],
            var_g: prob.var_g.data()[0],
            image: [prob.image.data()[0], prob.image.data()[1], prob.image.data()[2]],
            color: sol.color_log,
        })
        .unwrap();
        for k in 0..3 {
            assert!((a[k] - sol.albedo_log.data()[k]).abs() < 1e-10);
        }
        assert!((b - sol.shading_log.data()[0]).abs() < 1e-10);
    }

    /// Plain gradient descent on the soft objective as an independent check.
    fn gradient_descent(prob: &InferenceProblem, iters: usize) -> Vec<f64> {
        let np = prob.pixels();
        let mut x = vec![0.0; 4 * np + 3];
        for p in 0..np {
            x[4 * p..4 * p + 3].copy_from_slice(prob.mu_a.pixel(p));
            x[4 * p + 3] = prob.mu_b.data()[p];
        }
        let lr = 0.01;
        for _ in 0..iters {
            let mut g = vec![0.0; x.len()];
            for p in 0..np {
                let (va, vb, vg) = (prob.var_a.data()[p], prob.var_b.data()[p], prob.var_g.data()[p]);
                g[4 * p + 3] += (x[4 * p + 3] - prob.mu_b.data()[p]) / vb;
                for c in 0..3 {
                    g[4 * p + c] += (x[4 * p + c] - prob.mu_a.pixel(p)[c]) / va;
                    let xi = x[4 * p + c] + x[4 * p + 3] + x[4 * np + c] - prob.image.pixel(p)[c];
                    g[4 * p + c] += xi / vg;
                    g[4 * p + 3] += xi / vg;
                    g[4 * np + c] += xi / vg;
                }
            }
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= lr * gi;
            }
        }
        x
    }

    #[test]
    fn agrees_with_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prob = random_problem(&mut rng, 3, 3, Some(0.8));
        let sol = brute_force_oracle(&prob, ConstraintMode::Soft).unwrap();
        let gd = gradient_descent(&prob, 200_000);
        let diff = sol.flat().iter().zip(&gd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn matches_alternating_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let prob = random_problem(&mut rng, 4, 4, None);
            let sol = brute_force_oracle(&prob, ConstraintMode::Soft).unwrap();
            let alt = alternating_minimize(&prob, &AlternatingOptions::default()).unwrap();
            assert!(sol.objective <= alt.final_objective() + 1e-9);
            assert!(sol.albedo_log.max_abs_diff(&alt.albedo_log) < 1e-6);
            assert!(sol.shading_log.max_abs_diff(&alt.shading_log) < 1e-6);
        }
    }

    #[test]
    fn hard_oracle_is_the_small_slack_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let soft = random_problem(&mut rng, 4, 4, Some(1e-8));
        let hard = brute_force_oracle(&soft, ConstraintMode::Hard).unwrap();
        let lim = brute_force_oracle(&soft, ConstraintMode::Soft).unwrap();
        let diff = hard.flat().iter().zip(lim.flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "diff {diff}");
    }

    #[test]
    fn refuses_oversized_systems() {
        let p = InferenceProblem::new(
            PlaneTensor::zeros(30, 30, 3),
            PlaneTensor::zeros(30, 30, 1),
            PlaneTensor::filled(30, 30, 1, 1.0),
            PlaneTensor::filled(30, 30, 1, 1.0),
            PlaneTensor::filled(30, 30, 1, 1.0),
            PlaneTensor::zeros(30, 30, 3),
        )
        .unwrap();
        assert!(brute_force_oracle(&p, ConstraintMode::Soft).is_err());
    }
}
