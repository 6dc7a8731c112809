//! Training objectives and their analytic gradients w.r.t. the head maps.
//!
//! Output heads are scored with a heteroscedastic Gaussian negative
//! log-likelihood, the image-formation residual `A + B - I` with a zero-mean
//! Gaussian or Laplace likelihood, and all log-domain predictions are aligned
//! to their targets by a regularized additive shift before scoring.

use std::fmt;
use std::str::FromStr;

use crate::error::{arg, Error, Result};
use crate::net::HeadBundle;
use crate::tensor::PlaneTensor;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const LN_2: f64 = std::f64::consts::LN_2;

/// Shift regularization weight used for scale-invariant training.
pub const DEFAULT_SHIFT_BETA: f64 = 0.5;
/// Squared penalty on the log-variance maps.
pub const DEFAULT_LAMBDA_REG: f64 = 1e-3;

/// Likelihood family of the constraint slack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Family {
    #[default]
    Gaussian,
    Laplace,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "laplace" | "laplacian" => Ok(Family::Laplace),
            other => arg(format!("unknown distribution family '{other}'")),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::Laplace => "laplace",
        })
    }
}

/// A summed negative log-likelihood with gradients.
///
/// `grad_mean` has the shape of the mean map; `grad_log_var` the shape of the
/// (possibly channel-tied) log-variance map.
#[derive(Debug, Clone, PartialEq)]
pub struct NllTerm {
    pub value: f64,
    pub grad_mean: PlaneTensor,
    pub grad_log_var: PlaneTensor,
}

fn check_nll_shapes(mean: &PlaneTensor, log_var: &PlaneTensor, target: &PlaneTensor) -> Result<()> {
    if !mean.same_shape(target) {
        return arg(format!("mean {:?} and target {:?} differ", mean.shape(), target.shape()));
    }
    let tied = log_var.channels() == 1 || log_var.channels() == mean.channels();
    if log_var.height() != mean.height() || log_var.width() != mean.width() || !tied {
        return arg(format!("log-variance {:?} does not broadcast to {:?}", log_var.shape(), mean.shape()));
    }
    Ok(())
}

/// Shared element loop: `per_elem(residual, log_scale) -> (value, d/dresidual, d/dlog_scale)`.
fn nll_loop(
    mean: &PlaneTensor,
    log_var: &PlaneTensor,
    target: &PlaneTensor,
    per_elem: impl Fn(f64, f64) -> (f64, f64, f64),
) -> Result<NllTerm> {
    check_nll_shapes(mean, log_var, target)?;
    let (h, w, c) = mean.shape();
    let vc = log_var.channels();
    let mut value = 0.0;
    let mut gm = Vec::with_capacity(mean.len());
    let mut gu = vec![0.0; log_var.len()];
    for (i, (&m, &t)) in mean.data().iter().zip(target.data()).enumerate() {
        let ui = if vc == 1 { i / c } else { i };
        let (v, dm, du) = per_elem(m - t, log_var.data()[ui]);
        value += v;
        gm.push(dm);
        gu[ui] += du;
    }
    if !value.is_finite() || gm.iter().chain(&gu).any(|g| !g.is_finite()) {
        return Err(Error::Numeric("likelihood overflowed; log-variance out of range".into()));
    }
    Ok(NllTerm {
        value,
        grad_mean: PlaneTensor::from_raw(h, w, c, gm),
        grad_log_var: PlaneTensor::from_raw(h, w, vc, gu),
    })
}

/// `1/2 * sum_k [ (mu_k - y_k)^2 exp(-u_k) + u_k + ln 2pi ]` with `u = ln sigma^2`.
///
/// A single-channel `log_var` is tied across the channels of `mean`.
pub fn gaussian_nll(mean: &PlaneTensor, log_var: &PlaneTensor, target: &PlaneTensor) -> Result<NllTerm> {
    nll_loop(mean, log_var, target, |r, u| {
        let prec = (-u).exp();
        let q = r * r * prec;
        (0.5 * (q + u + LN_2PI), r * prec, 0.5 * (1.0 - q))
    })
}

/// `sum_k [ |mu_k - y_k| exp(-b_k) + b_k + ln 2 ]` with `b = ln scale`.
///
/// The location subgradient at a zero residual is 0.
pub fn laplace_nll(mean: &PlaneTensor, log_scale: &PlaneTensor, target: &PlaneTensor) -> Result<NllTerm> {
    nll_loop(mean, log_scale, target, |r, b| {
        let inv = (-b).exp();
        let a = r.abs() * inv;
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        (a + b + LN_2, sign * inv, 1.0 - a)
    })
}

/// Zero-mean likelihood of the constraint residual; `grad_mean` is the
/// gradient w.r.t. the residual.
pub fn constraint_nll(residual: &PlaneTensor, log_var: &PlaneTensor, family: Family) -> Result<NllTerm> {
    let zero = PlaneTensor::zeros(residual.height(), residual.width(), residual.channels());
    match family {
        Family::Gaussian => gaussian_nll(residual, log_var, &zero),
        Family::Laplace => laplace_nll(residual, log_var, &zero),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftResult {
    pub alpha: f64,
    pub shifted: PlaneTensor,
}

/// Closed-form minimizer of `||alpha + pred - target||^2 + beta * alpha^2`.
pub fn optimal_shift(pred: &PlaneTensor, target: &PlaneTensor, beta: f64) -> Result<ShiftResult> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return arg(format!("shift regularizer must be non-negative, got {beta}"));
    }
    if !pred.same_shape(target) {
        return arg("prediction and target shapes differ");
    }
    let n = pred.len() as f64;
    let alpha = target.data().iter().zip(pred.data()).map(|(t, p)| t - p).sum::<f64>() / (n + beta);
    Ok(ShiftResult { alpha, shifted: pred.map(|v| v + alpha) })
}

/// Chain rule through `shifted = pred + alpha(pred)`: subtracts `sum(g) / (N + beta)`.
fn shift_backward(grad_shifted: &PlaneTensor, beta: f64) -> PlaneTensor {
    let n = grad_shifted.len() as f64;
    let s = grad_shifted.sum() / (n + beta);
    grad_shifted.map(|g| g - s)
}

/// Per-channel regularized shift of the constraint residual toward zero.
fn residual_shift(residual: &PlaneTensor, beta: f64) -> (PlaneTensor, Vec<f64>) {
    let c = residual.channels();
    let n = residual.pixels() as f64;
    let mut sums = vec![0.0; c];
    for (i, v) in residual.data().iter().enumerate() {
        sums[i % c] += v;
    }
    let gamma: Vec<f64> = sums.iter().map(|s| -s / (n + beta)).collect();
    let (h, w, _) = residual.shape();
    let data = residual.data().iter().enumerate().map(|(i, v)| v + gamma[i % c]).collect();
    (PlaneTensor::from_raw(h, w, c, data), gamma)
}

fn residual_shift_backward(grad: &PlaneTensor, beta: f64) -> PlaneTensor {
    let c = grad.channels();
    let n = grad.pixels() as f64;
    let mut sums = vec![0.0; c];
    for (i, v) in grad.data().iter().enumerate() {
        sums[i % c] += v;
    }
    let (h, w, _) = grad.shape();
    let data = grad.data().iter().enumerate().map(|(i, g)| g - sums[i % c] / (n + beta)).collect();
    PlaneTensor::from_raw(h, w, c, data)
}

/// Which objective trains the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LossKind {
    /// Euclidean loss on the mean heads; variance heads receive no gradient.
    L2,
    #[default]
    Distributional,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" | "euclidean" => Ok(LossKind::L2),
            "distributional" | "distr" | "nll" => Ok(LossKind::Distributional),
            other => arg(format!("unknown loss '{other}'")),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::Distributional => "distributional",
        })
    }
}

/// What the constraint likelihood is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConstraintTarget {
    /// Residual of the ground-truth decomposition (true constraint violation).
    #[default]
    Truth,
    /// Residual of the shifted predictions.
    Prediction,
}

impl FromStr for ConstraintTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "truth" | "ground_truth" => Ok(ConstraintTarget::Truth),
            "prediction" | "predicted" => Ok(ConstraintTarget::Prediction),
            other => arg(format!("unknown constraint target '{other}'")),
        }
    }
}

impl fmt::Display for ConstraintTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintTarget::Truth => "truth",
            ConstraintTarget::Prediction => "prediction",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub family: Family,
    pub lambda_reg: f64,
    pub beta: f64,
    pub constraint_target: ConstraintTarget,
    /// Align the residual to zero mean per channel (the light color absent at training).
    pub constraint_shift: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Distributional,
            family: Family::Gaussian,
            lambda_reg: DEFAULT_LAMBDA_REG,
            beta: DEFAULT_SHIFT_BETA,
            constraint_target: ConstraintTarget::Truth,
            constraint_shift: true,
        }
    }
}

/// Log-domain supervision for one image.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub albedo_log: &'a PlaneTensor,
    pub shading_log: &'a PlaneTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub albedo: f64,
    pub shading: f64,
    pub constraint: f64,
    pub regularizer: f64,
    pub alpha_albedo: f64,
    pub alpha_shading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLoss {
    pub value: f64,
    pub grads: HeadBundle,
    pub breakdown: LossBreakdown,
}

/// A + B (broadcast over channels) - I.
fn formation_residual(a: &PlaneTensor, b: &PlaneTensor, image: &PlaneTensor) -> PlaneTensor {
    let (h, w, c) = a.shape();
    let data = a
        .data()
        .iter()
        .zip(image.data())
        .enumerate()
        .map(|(i, (av, iv))| av + b.data()[i / c] - iv)
        .collect();
    PlaneTensor::from_raw(h, w, c, data)
}

fn sum_channels(t: &PlaneTensor) -> PlaneTensor {
    let (h, w, _) = t.shape();
    let data = (0..h * w).map(|p| t.pixel(p).iter().sum()).collect();
    PlaneTensor::from_raw(h, w, 1, data)
}

fn add(a: &PlaneTensor, b: &PlaneTensor) -> PlaneTensor {
    let (h, w, c) = a.shape();
    PlaneTensor::from_raw(h, w, c, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

/// The full per-image training objective and its gradient w.r.t. every head.
pub fn total_training_loss(
    heads: &HeadBundle,
    targets: Targets<'_>,
    image_log: &PlaneTensor,
    cfg: &LossConfig,
) -> Result<TrainingLoss> {
    let (h, w) = heads.dims();
    if targets.albedo_log.shape() != (h, w, 3) || targets.shading_log.shape() != (h, w, 1) {
        return arg("targets do not match head resolution");
    }
    if image_log.shape() != (h, w, 3) {
        return arg("image does not match head resolution");
    }
    if !(cfg.lambda_reg >= 0.0) {
        return arg("regularization weight must be non-negative");
    }
    let sa = optimal_shift(&heads.albedo_mean, targets.albedo_log, cfg.beta)?;
    let sb = optimal_shift(&heads.shading_mean, targets.shading_log, cfg.beta)?;
    let mut bd = LossBreakdown { alpha_albedo: sa.alpha, alpha_shading: sb.alpha, ..Default::default() };
    let mut grads = HeadBundle::zeros(h, w);

    match cfg.kind {
        LossKind::L2 => {
            let sq = |p: &PlaneTensor, t: &PlaneTensor| -> (f64, PlaneTensor) {
                let v = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                let (hh, ww, cc) = p.shape();
                let g = p.data().iter().zip(t.data()).map(|(a, b)| 2.0 * (a - b)).collect();
                (v, PlaneTensor::from_raw(hh, ww, cc, g))
            };
            let (va, ga) = sq(&sa.shifted, targets.albedo_log);
            let (vb, gb) = sq(&sb.shifted, targets.shading_log);
            bd.albedo = va;
            bd.shading = vb;
            grads.albedo_mean = shift_backward(&ga, cfg.beta);
            grads.shading_mean = shift_backward(&gb, cfg.beta);
        }
        LossKind::Distributional => {
            let na = gaussian_nll(&sa.shifted, &heads.log_var_albedo, targets.albedo_log)?;
            let nb = gaussian_nll(&sb.shifted, &heads.log_var_shading, targets.shading_log)?;
            let raw = match cfg.constraint_target {
                ConstraintTarget::Truth => formation_residual(targets.albedo_log, targets.shading_log, image_log),
                ConstraintTarget::Prediction => formation_residual(&sa.shifted, &sb.shifted, image_log),
            };
            let residual = if cfg.constraint_shift { residual_shift(&raw, cfg.beta).0 } else { raw };
            let ng = constraint_nll(&residual, &heads.log_var_constraint, cfg.family)?;

            let mut ga = na.grad_mean;
            let mut gb = nb.grad_mean;
            if cfg.constraint_target == ConstraintTarget::Prediction {
                let gr = if cfg.constraint_shift {
                    residual_shift_backward(&ng.grad_mean, cfg.beta)
                } else {
                    ng.grad_mean.clone()
                };
                ga = add(&ga, &gr);
                gb = add(&gb, &sum_channels(&gr));
            }
            bd.albedo = na.value;
            bd.shading = nb.value;
            bd.constraint = ng.value;
            grads.albedo_mean = shift_backward(&ga, cfg.beta);
            grads.shading_mean = shift_backward(&gb, cfg.beta);

            let lam = cfg.lambda_reg;
            let reg = |u: &PlaneTensor, g: PlaneTensor| -> (f64, PlaneTensor) {
                let v = lam * u.data().iter().map(|x| x * x).sum::<f64>();
                let (hh, ww, cc) = u.shape();
                let gd = g.data().iter().zip(u.data()).map(|(gv, x)| gv + 2.0 * lam * x).collect();
                (v, PlaneTensor::from_raw(hh, ww, cc, gd))
            };
            let (ra, gua) = reg(&heads.log_var_albedo, na.grad_log_var);
            let (rb, gub) = reg(&heads.log_var_shading, nb.grad_log_var);
            let (rg, gug) = reg(&heads.log_var_constraint, ng.grad_log_var);
            bd.regularizer = ra + rb + rg;
            grads.log_var_albedo = gua;
            grads.log_var_shading = gub;
            grads.log_var_constraint = gug;
        }
    }
    let value = bd.albedo + bd.shading + bd.constraint + bd.regularizer;
    if !value.is_finite() {
        return Err(Error::Numeric("training loss is not finite".into()));
    }
    Ok(TrainingLoss { value, grads, breakdown: bd })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> PlaneTensor {
        PlaneTensor::new(1, 1, 1, vec![v]).unwrap()
    }

    fn row(v: &[f64]) -> PlaneTensor {
        PlaneTensor::new(1, v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn gaussian_examples() {
        let half_ln_2pi = 0.918_938_533_204_672_7;
        assert!((gaussian_nll(&s(0.0), &s(0.0), &s(0.0)).unwrap().value - half_ln_2pi).abs() < 1e-12);
        assert!((gaussian_nll(&s(1.0), &s(0.0), &s(0.0)).unwrap().value - (0.5 + half_ln_2pi)).abs() < 1e-12);
        // 0.5 * (4 / e + 1 + ln 2pi), evaluated independently.
        let v = gaussian_nll(&s(0.0), &s(1.0), &s(2.0)).unwrap().value;
        assert!((v - 2.154_697_415_547_557_3).abs() < 1e-9, "{v}");
    }

    #[test]
    fn laplace_examples() {
        assert!((laplace_nll(&s(0.3), &s(0.0), &s(0.3)).unwrap().value - LN_2).abs() < 1e-12);
        assert!((laplace_nll(&s(1.0), &s(0.0), &s(0.0)).unwrap().value - (1.0 + LN_2)).abs() < 1e-12);
        let v = laplace_nll(&s(2.0), &s(LN_2), &s(0.0)).unwrap().value;
        assert!((v - 2.386_294_361_119_890_6).abs() < 1e-12);
        let zero = laplace_nll(&s(0.5), &s(0.0), &s(0.5)).unwrap();
        assert_eq!(zero.grad_mean.data()[0], 0.0);
    }

    #[test]
    fn constraint_examples() {
        let z = constraint_nll(&row(&[0.0, 0.0]), &row(&[0.0, 0.0]), Family::Gaussian).unwrap();
        assert!((z.value - LN_2PI).abs() < 1e-12);
        let g = constraint_nll(&s(1.0), &s(0.0), Family::Gaussian).unwrap();
        assert!((g.value - 0.5 * (1.0 + LN_2PI)).abs() < 1e-12);
        let l = constraint_nll(&s(1.0), &s(0.0), Family::Laplace).unwrap();
        assert!((l.value - (1.0 + LN_2)).abs() < 1e-12);
        assert!("cauchy".parse::<Family>().is_err());
    }

    #[test]
    fn tied_variance_accumulates_over_channels() {
        let mean = PlaneTensor::new(1, 1, 3, vec![1.0, 2.0, 0.0]).unwrap();
        let target = PlaneTensor::zeros(1, 1, 3);
        let t = gaussian_nll(&mean, &s(0.0), &target).unwrap();
        assert!((t.grad_log_var.data()[0] - 0.5 * ((1.0 - 1.0) + (1.0 - 4.0) + 1.0)).abs() < 1e-12);
        assert!(gaussian_nll(&mean, &row(&[0.0, 0.0]), &target).is_err());
        assert!(gaussian_nll(&mean, &s(0.0), &s(0.0)).is_err());
    }

    #[test]
    fn shift_examples() {
        let r = optimal_shift(&row(&[0.4, -1.0]), &row(&[0.4, -1.0]), 0.5).unwrap();
        assert_eq!(r.alpha, 0.0);
        let r = optimal_shift(&row(&[0.0, 0.0]), &row(&[1.0, 1.0]), 0.5).unwrap();
        assert!((r.alpha - 0.8).abs() < 1e-15);
        let r = optimal_shift(&s(0.0), &s(3.0), 0.5).unwrap();
        assert!((r.alpha - 2.0).abs() < 1e-15);
        assert!(optimal_shift(&s(0.0), &s(3.0), -1.0).is_err());
    }

    #[test]
    fn perfect_predictions_cost_half_log_2pi_per_term() {
        let (h, w) = (2, 3);
        let a = PlaneTensor::from_fn(h, w, 3, |y, x, c| -0.1 * (y + x + c) as f64);
        let b = PlaneTensor::from_fn(h, w, 1, |y, x, _| -0.2 * (y * x) as f64);
        let i = PlaneTensor::from_fn(h, w, 3, |y, x, c| a.at(y, x, c) + b.at(y, x, 0));
        let mut heads = HeadBundle::zeros(h, w);
        heads.albedo_mean = a.clone();
        heads.shading_mean = b.clone();
        for target in [ConstraintTarget::Truth, ConstraintTarget::Prediction] {
            let cfg = LossConfig { lambda_reg: 0.0, constraint_target: target, ..Default::default() };
            let l = total_training_loss(&heads, Targets { albedo_log: &a, shading_log: &b }, &i, &cfg).unwrap();
            let expected = (h * w) as f64 * 7.0 * 0.5 * LN_2PI;
            assert!((l.value - expected).abs() < 1e-10);
        }
        let cfg = LossConfig { lambda_reg: 0.5, ..Default::default() };
        let l = total_training_loss(&heads, Targets { albedo_log: &a, shading_log: &b }, &i, &cfg).unwrap();
        assert_eq!(l.breakdown.regularizer, 0.0);
    }

    #[test]
    fn l2_loss_detaches_variance_heads() {
        let mut heads = HeadBundle::zeros(1, 2);
        heads.log_var_albedo = row(&[0.3, -0.2]);
        let a = PlaneTensor::from_fn(1, 2, 3, |_, x, c| (x + c) as f64 * 0.1);
        let b = row(&[0.5, -0.5]);
        let cfg = LossConfig { kind: LossKind::L2, ..Default::default() };
        let i = PlaneTensor::zeros(1, 2, 3);
        let l = total_training_loss(&heads, Targets { albedo_log: &a, shading_log: &b }, &i, &cfg).unwrap();
        assert_eq!(l.grads.log_var_albedo.data(), &[0.0, 0.0]);
        assert_eq!(l.grads.log_var_constraint.data(), &[0.0, 0.0]);
        assert_eq!(l.breakdown.constraint, 0.0);
    }
}
