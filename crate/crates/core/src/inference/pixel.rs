//! Closed-form per-pixel MAP solves.
//!
//! With the light color fixed, one pixel's problem couples three log-albedo
//! values and one log-shading value through three slack terms. Writing the
//! deviation from the predictions as `e = I - C - mu_A - mu_B`, the optimum is
//! the Gaussian conditional mean
//!
//! ```text
//! a = var_A * z,   b = var_B * sum(z),   z = Sigma^-1 e,
//! Sigma = (var_A + var_G) Id + var_B 11^T
//! ```
//!
//! which stays well conditioned as `var_G -> 0` (the hard projection) and as
//! `var_G -> inf` (predictions untouched), where the 4x4 normal equations do not.

use crate::error::{arg, Result};

/// One pixel of the constrained inference problem, in log domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProblem {
    pub mu_a: [f64; 3],
    pub mu_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub var_g: f64,
    pub image: [f64; 3],
    pub color: [f64; 3],
}

fn check_var(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return arg(format!("{name} must be positive and finite, got {v}"));
    }
    Ok(())
}

impl PixelProblem {
    fn validate(&self, need_g: bool) -> Result<()> {
        check_var("var_a", self.var_a)?;
        check_var("var_b", self.var_b)?;
        if need_g {
            check_var("var_g", self.var_g)?;
        }
        let finite = self.mu_a.iter().chain(&self.image).chain(&self.color).all(|v| v.is_finite());
        if !finite || !self.mu_b.is_finite() {
            return arg("pixel problem has non-finite inputs");
        }
        Ok(())
    }
}

/// Shared kernel; `var_g = 0` gives the equality-constrained projection.
#[inline]
pub(crate) fn conditional_optimum(
    mu_a: &[f64],
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    var_g: f64,
    image: &[f64],
    color: &[f64],
) -> ([f64; 3], f64) {
    let s = var_a + var_g;
    let k = var_b / (s + 3.0 * var_b);
    let e = [
        image[0] - color[0] - mu_a[0] - mu_b,
        image[1] - color[1] - mu_a[1] - mu_b,
        image[2] - color[2] - mu_a[2] - mu_b,
    ];
    let es = k * (e[0] + e[1] + e[2]);
    let z = [(e[0] - es) / s, (e[1] - es) / s, (e[2] - es) / s];
    let a = [mu_a[0] + var_a * z[0], mu_a[1] + var_a * z[1], mu_a[2] + var_a * z[2]];
    let b = mu_b + var_b * (z[0] + z[1] + z[2]);
    (a, b)
}

/// Exact minimizer of the per-pixel objective with Gaussian slack.
pub fn solve_pixel_soft(p: &PixelProblem) -> Result<([f64; 3], f64)> {
    p.validate(true)?;
    Ok(conditional_optimum(&p.mu_a, p.mu_b, p.var_a, p.var_b, p.var_g, &p.image, &p.color))
}

/// Variance-weighted projection onto `A_c + B + C_c = I_c`; `var_g` is ignored.
pub fn solve_pixel_hard(p: &PixelProblem) -> Result<([f64; 3], f64)> {
    p.validate(false)?;
    Ok(conditional_optimum(&p.mu_a, p.mu_b, p.var_a, p.var_b, 0.0, &p.image, &p.color))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector4};

    fn base() -> PixelProblem {
        PixelProblem {
            mu_a: [0.0; 3],
            mu_b: 0.0,
            var_a: 1.0,
            var_b: 1.0,
            var_g: 1.0,
            image: [3.0; 3],
            color: [0.0; 3],
        }
    }

    /// Normal equations of the 4-variable quadratic, solved by Cholesky.
    fn dense(p: &PixelProblem) -> ([f64; 3], f64) {
        let (wa, wb, wg) = (1.0 / p.var_a, 1.0 / p.var_b, 1.0 / p.var_g);
        let mut h = Matrix4::zeros();
        let mut g = Vector4::zeros();
        for c in 0..3 {
            h[(c, c)] += wa + wg;
            h[(c, 3)] += wg;
            h[(3, c)] += wg;
            h[(3, 3)] += wg;
            g[c] += wa * p.mu_a[c] + wg * (p.image[c] - p.color[c]);
            g[3] += wg * (p.image[c] - p.color[c]);
        }
        h[(3, 3)] += wb;
        g[3] += wb * p.mu_b;
        let x = h.cholesky().unwrap().solve(&g);
        ([x[0], x[1], x[2]], x[3])
    }

    #[test]
    fn soft_example() {
        let (a, b) = solve_pixel_soft(&base()).unwrap();
        for v in a {
            assert!((v - 0.6).abs() < 1e-12);
        }
        assert!((b - 1.8).abs() < 1e-12);
        // Stationarity: 2a + b = 3 and 3a + 4b = 9.
        assert!((2.0 * a[0] + b - 3.0).abs() < 1e-12);
        assert!((3.0 * a[0] + 4.0 * b - 9.0).abs() < 1e-12);
    }

    #[test]
    fn feasible_predictions_are_kept() {
        let p = PixelProblem {
            mu_a: [-0.3, -1.1, -0.7],
            mu_b: -0.4,
            image: [-0.9, -1.5, -1.0],
            color: [-0.2, 0.0, 0.1],
            var_a: 0.3,
            var_b: 2.0,
            var_g: 0.05,
        };
        for (a, b) in [solve_pixel_soft(&p).unwrap(), solve_pixel_hard(&p).unwrap()] {
            for c in 0..3 {
                assert!((a[c] - p.mu_a[c]).abs() < 1e-14);
            }
            assert!((b - p.mu_b).abs() < 1e-14);
        }
    }

    #[test]
    fn hard_example_and_limit() {
        let (a, b) = solve_pixel_hard(&base()).unwrap();
        for v in a {
            assert!((v - 0.75).abs() < 1e-12);
        }
        assert!((b - 2.25).abs() < 1e-12);
        let tiny = PixelProblem { var_g: 1e-16, ..base() };
        let (sa, sb) = solve_pixel_soft(&tiny).unwrap();
        assert!((sa[0] - 0.75).abs() < 1e-5 && (sb - 2.25).abs() < 1e-5);
    }

    #[test]
    fn hard_matches_elimination() {
        // Eliminate A_c = I_c - C_c - B and minimize the scalar quadratic in B.
        let p = PixelProblem {
            mu_a: [0.2, -0.5, 0.1],
            mu_b: -0.3,
            var_a: 0.4,
            var_b: 1.7,
            var_g: 1.0,
            image: [0.5, -0.2, 0.9],
            color: [0.1, -0.1, 0.3],
        };
        let num: f64 = (0..3).map(|c| (p.image[c] - p.color[c] - p.mu_a[c]) / p.var_a).sum::<f64>() + p.mu_b / p.var_b;
        let b = num / (3.0 / p.var_a + 1.0 / p.var_b);
        let (ha, hb) = solve_pixel_hard(&p).unwrap();
        assert!((hb - b).abs() < 1e-12);
        for c in 0..3 {
            assert!((ha[c] - (p.image[c] - p.color[c] - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_matches_dense_normal_equations() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..200 {
            let p = PixelProblem {
                mu_a: [next(), next(), next()],
                mu_b: next(),
                var_a: (2.0 * next()).exp(),
                var_b: (2.0 * next()).exp(),
                var_g: (2.0 * next()).exp(),
                image: [next(), next(), next()],
                color: [next(), next(), next()],
            };
            let (a, b) = solve_pixel_soft(&p).unwrap();
            let (da, db) = dense(&p);
            for c in 0..3 {
                assert!((a[c] - da[c]).abs() < 1e-8);
            }
            assert!((b - db).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_non_positive_variance() {
        assert!(solve_pixel_soft(&PixelProblem { var_g: 0.0, ..base() }).is_err());
        assert!(solve_pixel_soft(&PixelProblem { var_a: -1.0, ..base() }).is_err());
        assert!(solve_pixel_hard(&PixelProblem { var_b: 0.0, ..base() }).is_err());
        assert!(solve_pixel_hard(&PixelProblem { var_g: 0.0, ..base() }).is_ok());
    }
}
