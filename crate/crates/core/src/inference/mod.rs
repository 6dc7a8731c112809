//! Constrained MAP inference for the log-domain image formation model
//! `A_c + B + C_c = I_c`.
//!
//! Per pixel the network supplies Gaussian beliefs over log-albedo `A`
//! (3 channels, tied variance) and log gray shading `B`, and a variance for the
//! constraint slack `xi = A + B + C - I`. The global light color `C` has a
//! flat prior. Soft mode minimizes
//!
//! ```text
//! sum_p  sum_c (A_c - muA_c)^2 / 2varA + (B - muB)^2 / 2varB + sum_c xi_c^2 / 2varG
//! ```
//!
//! and hard mode drops the slack term and enforces `xi = 0`.

mod oracle;
mod pixel;

pub use oracle::{brute_force_oracle, OracleSolution, MAX_ORACLE_VARIABLES};
pub use pixel::{solve_pixel_hard, solve_pixel_soft, PixelProblem};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::net::HeadBundle;
use crate::tensor::PlaneTensor;

/// Log-variances are clamped to this magnitude before exponentiation.
pub const LOG_VAR_CLAMP: f64 = 60.0;
pub const DEFAULT_SWEEPS: usize = 50;
/// Relative objective decrease below which sweeping stops.
pub const CONVERGENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConstraintMode {
    /// Gaussian slack with the learned per-pixel variance.
    #[default]
    Soft,
    /// The constraint holds exactly.
    Hard,
}

impl FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" | "soft_learned" | "learned" => Ok(ConstraintMode::Soft),
            "hard" => Ok(ConstraintMode::Hard),
            other => arg(format!("unknown constraint mode '{other}'")),
        }
    }
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintMode::Soft => "soft",
            ConstraintMode::Hard => "hard",
        })
    }
}

/// How each alternating sweep updates the light color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SweepSchedule {
    /// Color step minimizes over `C` with every pixel's `(A, B)` at its
    /// conditional optimum, then exact `B` and `A` steps. Reaches the joint
    /// optimum in one sweep, including the hard limit.
    #[default]
    Exact,
    /// Plain block coordinate descent `C | B | A`, each block with the others
    /// held fixed. Converges linearly; slowly when the slack variance is small.
    Coordinate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlternatingOptions {
    pub mode: ConstraintMode,
    pub sweeps: usize,
    pub schedule: SweepSchedule,
    pub tolerance: f64,
}

impl Default for AlternatingOptions {
    fn default() -> Self {
        Self {
            mode: ConstraintMode::Soft,
            sweeps: DEFAULT_SWEEPS,
            schedule: SweepSchedule::Exact,
            tolerance: CONVERGENCE_TOL,
        }
    }
}

/// A full-image inference problem with explicit variance maps.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceProblem {
    pub mu_a: PlaneTensor,
    pub mu_b: PlaneTensor,
    pub var_a: PlaneTensor,
    pub var_b: PlaneTensor,
    pub var_g: PlaneTensor,
    pub image: PlaneTensor,
}

fn positive_map(name: &str, t: &PlaneTensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return arg(format!("{name} contains a non-positive variance {v}"));
    }
    Ok(())
}

impl InferenceProblem {
    pub fn new(
        mu_a: PlaneTensor,
        mu_b: PlaneTensor,
        var_a: PlaneTensor,
        var_b: PlaneTensor,
        var_g: PlaneTensor,
        image: PlaneTensor,
    ) -> Result<Self> {
        let (h, w) = (mu_a.height(), mu_a.width());
        let ok = mu_a.shape() == (h, w, 3)
            && image.shape() == (h, w, 3)
            && [&mu_b, &var_a, &var_b, &var_g].iter().all(|t| t.shape() == (h, w, 1));
        if !ok {
            return arg("inference maps are not aligned (expected HxWx3 albedo/image and HxWx1 others)");
        }
        positive_map("var_a", &var_a)?;
        positive_map("var_b", &var_b)?;
        positive_map("var_g", &var_g)?;
        Ok(Self { mu_a, mu_b, var_a, var_b, var_g, image })
    }

    /// Builds the problem from predicted heads. With `unit_output_weights` the
    /// albedo and shading variances are 1 (plain Euclidean projection).
    pub fn from_heads(heads: &HeadBundle, image_log: &PlaneTensor, unit_output_weights: bool) -> Result<Self> {
        let var = |u: &PlaneTensor| u.map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).exp());
        let (h, w) = heads.dims();
        let (va, vb) = if unit_output_weights {
            (PlaneTensor::filled(h, w, 1, 1.0), PlaneTensor::filled(h, w, 1, 1.0))
        } else {
            (var(&heads.log_var_albedo), var(&heads.log_var_shading))
        };
        Self::new(
            heads.albedo_mean.clone(),
            heads.shading_mean.clone(),
            va,
            vb,
            var(&heads.log_var_constraint),
            image_log.clone(),
        )
    }

    pub fn pixels(&self) -> usize {
        self.mu_a.pixels()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.mu_a.height(), self.mu_a.width())
    }

    /// The single-pixel problem at pixel `p` for a given light color.
    pub fn pixel_problem(&self, p: usize, color: &[f64; 3]) -> PixelProblem {
        let m = self.mu_a.pixel(p);
        let i = self.image.pixel(p);
        PixelProblem {
            mu_a: [m[0], m[1], m[2]],
            mu_b: self.mu_b.data()[p],
            var_a: self.var_a.data()[p],
            var_b: self.var_b.data()[p],
            var_g: self.var_g.data()[p],
            image: [i[0], i[1], i[2]],
            color: *color,
        }
    }

    /// Objective value at `(A, B, C)`. In hard mode only the output terms count.
    pub fn objective(&self, albedo: &PlaneTensor, shading: &PlaneTensor, color: &[f64; 3], mode: ConstraintMode) -> f64 {
        let mut total = 0.0;
        for p in 0..self.pixels() {
            let a = albedo.pixel(p);
            let m = self.mu_a.pixel(p);
            let i = self.image.pixel(p);
            let b = shading.data()[p];
            let (va, vb, vg) = (self.var_a.data()[p], self.var_b.data()[p], self.var_g.data()[p]);
            let db = b - self.mu_b.data()[p];
            let mut term = db * db / (2.0 * vb);
            for c in 0..3 {
                let da = a[c] - m[c];
                term += da * da / (2.0 * va);
                if mode == ConstraintMode::Soft {
                    let xi = a[c] + b + color[c] - i[c];
                    term += xi * xi / (2.0 * vg);
                }
            }
            total += term;
        }
        total
    }
}

/// Weighted-mean light color: the exact minimizer of the slack term over `C`
/// with albedo and shading held fixed.
pub fn solve_global_color(
    albedo: &PlaneTensor,
    shading: &PlaneTensor,
    image: &PlaneTensor,
    var_g: &PlaneTensor,
) -> Result<[f64; 3]> {
    let (h, w) = (albedo.height(), albedo.width());
    if albedo.shape() != (h, w, 3)
        || image.shape() != (h, w, 3)
        || shading.shape() != (h, w, 1)
        || var_g.shape() != (h, w, 1)
    {
        return arg("color step maps are not aligned");
    }
    positive_map("var_g", var_g)?;
    let mut num = [0.0; 3];
    let mut den = 0.0;
    for p in 0..h * w {
        let wp = 1.0 / var_g.data()[p];
        let (a, i, b) = (albedo.pixel(p), image.pixel(p), shading.data()[p]);
        for c in 0..3 {
            num[c] += wp * (i[c] - a[c] - b);
        }
        den += wp;
    }
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Numeric("degenerate color weights".into()));
    }
    Ok(num.map(|n| n / den))
}

/// Output of constrained inference, in log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    pub albedo_log: PlaneTensor,
    pub shading_log: PlaneTensor,
    pub color_log: [f64; 3],
    /// `A + B + C - I` per pixel and channel.
    pub slack: PlaneTensor,
    /// Objective at initialization followed by its value after every sweep.
    pub objective_trace: Vec<f64>,
    /// Objective after every individual block step.
    pub step_objectives: Vec<f64>,
}

impl DecompositionResult {
    pub fn sweeps(&self) -> usize {
        self.objective_trace.len().saturating_sub(1)
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }

    /// Linear albedo `exp(A)`.
    pub fn albedo_linear(&self) -> PlaneTensor {
        self.albedo_log.map(f64::exp)
    }

    /// Linear gray shading `exp(B)`.
    pub fn shading_linear(&self) -> PlaneTensor {
        self.shading_log.map(f64::exp)
    }

    /// Colored linear shading `exp(B + C)`.
    pub fn shading_color_linear(&self) -> PlaneTensor {
        let (h, w, _) = self.shading_log.shape();
        PlaneTensor::from_fn(h, w, 3, |y, x, c| (self.shading_log.at(y, x, 0) + self.color_log[c]).exp())
    }

    /// Linear reconstruction `exp(A + B + C)`.
    pub fn reconstruction(&self) -> PlaneTensor {
        let (h, w, _) = self.albedo_log.shape();
        PlaneTensor::from_fn(h, w, 3, |y, x, c| {
            (self.albedo_log.at(y, x, c) + self.shading_log.at(y, x, 0) + self.color_log[c]).exp()
        })
    }
}

pub(crate) fn slack_map(albedo: &PlaneTensor, shading: &PlaneTensor, color: &[f64; 3], image: &PlaneTensor) -> PlaneTensor {
    let (h, w, _) = albedo.shape();
    PlaneTensor::from_fn(h, w, 3, |y, x, c| albedo.at(y, x, c) + shading.at(y, x, 0) + color[c] - image.at(y, x, c))
}

/// Wraps pre-computed maps (e.g. raw head predictions) as a result.
pub fn result_from_maps(
    problem: &InferenceProblem,
    albedo: PlaneTensor,
    shading: PlaneTensor,
    color: [f64; 3],
    mode: ConstraintMode,
) -> DecompositionResult {
    let obj = problem.objective(&albedo, &shading, &color, mode);
    DecompositionResult {
        slack: slack_map(&albedo, &shading, &color, &problem.image),
        albedo_log: albedo,
        shading_log: shading,
        color_log: color,
        objective_trace: vec![obj],
        step_objectives: vec![],
    }
}

struct State {
    a: Vec<f64>,
    b: Vec<f64>,
    c: [f64; 3],
}

impl State {
    fn tensors(&self, h: usize, w: usize) -> (PlaneTensor, PlaneTensor) {
        (PlaneTensor::from_raw(h, w, 3, self.a.clone()), PlaneTensor::from_raw(h, w, 1, self.b.clone()))
    }
}

/// Effective slack variance of a pixel: 0 in hard mode.
#[inline]
fn slack_var(problem: &InferenceProblem, p: usize, mode: ConstraintMode) -> f64 {
    match mode {
        ConstraintMode::Soft => problem.var_g.data()[p],
        ConstraintMode::Hard => 0.0,
    }
}

/// Color step with `(A, B)` profiled out.
///
/// Per pixel, minimizing over `(A, B)` leaves `1/2 (d - C)^T M (d - C)` with
/// `d = I - muA - muB` and `M = Sigma^-1 = (Id - k 11^T) / s`. Summing gives a
/// 3x3 system `(alpha Id - kappa 11^T) C = rhs`, inverted by Sherman-Morrison.
fn profiled_color(problem: &InferenceProblem, mode: ConstraintMode) -> [f64; 3] {
    let mut alpha = 0.0;
    let mut kappa = 0.0;
    let mut rhs = [0.0; 3];
    for p in 0..problem.pixels() {
        let s = problem.var_a.data()[p] + slack_var(problem, p, mode);
        let vb = problem.var_b.data()[p];
        let k = vb / (s + 3.0 * vb);
        let m = problem.mu_a.pixel(p);
        let i = problem.image.pixel(p);
        let mb = problem.mu_b.data()[p];
        let d = [i[0] - m[0] - mb, i[1] - m[1] - mb, i[2] - m[2] - mb];
        let dsum = d[0] + d[1] + d[2];
        for c in 0..3 {
            rhs[c] += (d[c] - k * dsum) / s;
        }
        alpha += 1.0 / s;
        kappa += k / s;
    }
    let rsum = rhs[0] + rhs[1] + rhs[2];
    let corr = kappa / (alpha - 3.0 * kappa) * rsum;
    rhs.map(|r| (r + corr) / alpha)
}

/// Elimination form of the color step for hard mode: `A = I - B - C`, so the
/// albedo prior terms are what `C` trades against.
fn hard_color_step(problem: &InferenceProblem, b: &[f64]) -> [f64; 3] {
    let mut num = [0.0; 3];
    let mut den = 0.0;
    for p in 0..problem.pixels() {
        let wp = 1.0 / problem.var_a.data()[p];
        let m = problem.mu_a.pixel(p);
        let i = problem.image.pixel(p);
        for c in 0..3 {
            num[c] += wp * (i[c] - b[p] - m[c]);
        }
        den += wp;
    }
    num.map(|n| n / den)
}

/// Exact B-step with A and C fixed (soft), or with A eliminated (hard).
fn b_step(problem: &InferenceProblem, st: &mut State, mode: ConstraintMode) {
    let c = st.c;
    let a = &st.a;
    st.b.par_iter_mut().enumerate().for_each(|(p, b)| {
        let i = problem.image.pixel(p);
        let (va, vb) = (problem.var_a.data()[p], problem.var_b.data()[p]);
        let mb = problem.mu_b.data()[p];
        *b = match mode {
            ConstraintMode::Soft => {
                let vg = problem.var_g.data()[p];
                let r: f64 = (0..3).map(|ch| i[ch] - c[ch] - a[3 * p + ch]).sum();
                (mb * vg / vb + r) / (vg / vb + 3.0)
            }
            ConstraintMode::Hard => {
                let m = problem.mu_a.pixel(p);
                let r: f64 = (0..3).map(|ch| i[ch] - c[ch] - m[ch]).sum();
                (mb * va / vb + r) / (va / vb + 3.0)
            }
        };
    });
}

/// Exact A-step with B and C fixed.
fn a_step(problem: &InferenceProblem, st: &mut State, mode: ConstraintMode) {
    let c = st.c;
    let b = &st.b;
    st.a.par_chunks_mut(3).enumerate().for_each(|(p, a)| {
        let i = problem.image.pixel(p);
        let m = problem.mu_a.pixel(p);
        let va = problem.var_a.data()[p];
        let vg = slack_var(problem, p, mode);
        for ch in 0..3 {
            let target = i[ch] - b[p] - c[ch];
            a[ch] = (m[ch] * vg + va * target) / (vg + va);
        }
    });
}

/// Sets every pixel's `(A, B)` to its conditional optimum given `C`.
fn pixel_step(problem: &InferenceProblem, st: &mut State, mode: ConstraintMode) {
    let c = st.c;
    st.a.par_chunks_mut(3).zip(st.b.par_iter_mut()).enumerate().for_each(|(p, (a, b))| {
        let (na, nb) = pixel::conditional_optimum(
            problem.mu_a.pixel(p),
            problem.mu_b.data()[p],
            problem.var_a.data()[p],
            problem.var_b.data()[p],
            slack_var(problem, p, mode),
            problem.image.pixel(p),
            &c,
        );
        a.copy_from_slice(&na);
        *b = nb;
    });
}

/// Alternating minimization over light color, shading and albedo.
///
/// Starts from the predictions with white light (`C = 0`) and runs sweeps of
/// color, shading and albedo steps, each an exact block minimization, until
/// `sweeps` is reached or a sweep improves the objective by less than the
/// relative tolerance.
pub fn alternating_minimize(problem: &InferenceProblem, opts: &AlternatingOptions) -> Result<DecompositionResult> {
    if opts.sweeps == 0 {
        return arg("at least one sweep is required");
    }
    let (h, w) = problem.dims();
    let mode = opts.mode;
    let mut st = State { a: problem.mu_a.data().to_vec(), b: problem.mu_b.data().to_vec(), c: [0.0; 3] };
    if mode == ConstraintMode::Hard {
        // Start on the constraint surface so every step is feasible.
        b_step(problem, &mut st, mode);
        a_step(problem, &mut st, mode);
    }
    let eval = |st: &State| {
        let (a, b) = st.tensors(h, w);
        problem.objective(&a, &b, &st.c, mode)
    };
    let mut trace = vec![eval(&st)];
    let mut steps = Vec::with_capacity(opts.sweeps * 3);
    for _ in 0..opts.sweeps {
        match (opts.schedule, mode) {
            (SweepSchedule::Exact, _) => {
                st.c = profiled_color(problem, mode);
                pixel_step(problem, &mut st, mode);
            }
            (SweepSchedule::Coordinate, ConstraintMode::Soft) => {
                let (a, b) = st.tensors(h, w);
                st.c = solve_global_color(&a, &b, &problem.image, &problem.var_g)?;
            }
            (SweepSchedule::Coordinate, ConstraintMode::Hard) => {
                st.c = hard_color_step(problem, &st.b);
                a_step(problem, &mut st, mode);
            }
        }
        steps.push(eval(&st));
        b_step(problem, &mut st, mode);
        if mode == ConstraintMode::Hard {
            a_step(problem, &mut st, mode);
        }
        steps.push(eval(&st));
        a_step(problem, &mut st, mode);
        let obj = eval(&st);
        steps.push(obj);
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if prev - obj <= opts.tolerance * prev.abs().max(1.0) {
            break;
        }
    }
    let (albedo, shading) = st.tensors(h, w);
    if albedo.data().iter().chain(shading.data()).chain(&st.c).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("inference diverged".into()));
    }
    Ok(DecompositionResult {
        slack: slack_map(&albedo, &shading, &st.c, &problem.image),
        albedo_log: albedo,
        shading_log: shading,
        color_log: st.c,
        objective_trace: trace,
        step_objectives: steps,
    })
}

/// [`alternating_minimize`] on network heads with learned variances.
pub fn alternating_decompose(
    heads: &HeadBundle,
    image_log: &PlaneTensor,
    mode: ConstraintMode,
    sweeps: usize,
) -> Result<DecompositionResult> {
    let problem = InferenceProblem::from_heads(heads, image_log, false)?;
    alternating_minimize(&problem, &AlternatingOptions { mode, sweeps, ..Default::default() })
}
