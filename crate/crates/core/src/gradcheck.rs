//! Central finite-difference certification of every analytic gradient:
//! each layer kind of the network and each training loss.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    constraint_nll, gaussian_nll, laplace_nll, total_training_loss, ConstraintTarget, Family, LossConfig, LossKind,
    Targets,
};
use crate::net::{HeadBundle, LayerKind, LayerSpec, NetState, HEAD_CHANNELS};
use crate::tensor::PlaneTensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Random micro-instances per suite.
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Negates every analytic gradient; the check must then fail.
    pub inject_sign_flip: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: DEFAULT_INSTANCES,
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            inject_sign_flip: false,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a ReLU switched inside the probe interval.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Where the largest error occurred.
    pub worst: String,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        Self { name: name.into(), instances: 0, checked: 0, skipped: 0, max_rel_error: 0.0, worst: String::new() }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || e.is_nan() {
            self.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", at());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.max_rel_error < self.tolerance && s.checked > 0)
    }

    pub fn worst(&self) -> Option<&SuiteResult> {
        self.suites.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>9} {:>8} {:>8} {:>12}  status", "suite", "instances", "checked", "skipped", "max_rel_err")?;
        for s in &self.suites {
            let status = if s.max_rel_error < self.tolerance && s.checked > 0 { "pass" } else { "FAIL" };
            writeln!(
                f,
                "{:<28} {:>9} {:>8} {:>8} {:>12.3e}  {status}",
                s.name, s.instances, s.checked, s.skipped, s.max_rel_error
            )?;
        }
        if let Some(w) = self.worst() {
            writeln!(f, "worst: {} at {}", w.name, w.worst)?;
        }
        Ok(())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> PlaneTensor {
    PlaneTensor::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
}

fn with_element(t: &PlaneTensor, i: usize, delta: f64) -> PlaneTensor {
    let mut d = t.data().to_vec();
    d[i] += delta;
    let (h, w, c) = t.shape();
    PlaneTensor::from_raw(h, w, c, d)
}

fn central(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

/// Probe objective for a network output: `sum r*y + 1/2 sum y^2`.
fn probe(out: &PlaneTensor, r: &PlaneTensor) -> (f64, PlaneTensor) {
    let v = out.data().iter().zip(r.data()).map(|(y, r)| r * y + 0.5 * y * y).sum();
    let (h, w, c) = out.shape();
    let g = out.data().iter().zip(r.data()).map(|(y, r)| r + y).collect();
    (v, PlaneTensor::from_raw(h, w, c, g))
}

/// ReLU on/off pattern of every ReLU layer input.
fn relu_masks(net: &NetState, input: &PlaneTensor) -> Result<Vec<Vec<bool>>> {
    let (_, cache) = net.forward_map(input)?;
    Ok(net
        .layers()
        .iter()
        .zip(cache.layer_inputs())
        .filter(|(l, _)| l.kind == LayerKind::Relu)
        .map(|(_, x)| x.data().iter().map(|&v| v > 0.0).collect())
        .collect())
}

fn randomize_weights(net: &NetState, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    net.weights().iter().map(|w| w.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Compares every weight gradient of `layers` on one random input.
fn check_net(
    suite: &mut SuiteResult,
    rng: &mut ChaCha8Rng,
    layers: Vec<LayerSpec>,
    sizes: std::ops::RangeInclusive<usize>,
    opts: &GradcheckOptions,
) -> Result<()> {
    let (in_h, in_w) = (rng.gen_range(sizes.clone()), rng.gen_range(sizes));
    let shell = NetState::new(layers.clone(), 0)?;
    let weights = randomize_weights(&shell, rng);
    let net = NetState::with_weights(layers.clone(), weights, 0)?;
    let input = random_tensor(rng, in_h, in_w, layers[0].in_channels, -1.0, 1.0);
    let (out, cache) = net.forward_map(&input)?;
    let r = random_tensor(rng, out.height(), out.width(), out.channels(), -1.0, 1.0);
    let (_, g_out) = probe(&out, &r);
    let heads = layers.last().map(|l| l.kind == LayerKind::HeadSplit).unwrap_or(false);
    let grads = if heads {
        net.backward(&cache, &HeadBundle::split(&g_out)?)?
    } else {
        net.backward_map(&cache, &g_out)?
    };
    let base_masks = relu_masks(&net, &input)?;
    let sign = if opts.inject_sign_flip { -1.0 } else { 1.0 };
    suite.instances += 1;
    for (ti, tensor) in net.weights().iter().enumerate() {
        for wi in 0..tensor.len() {
            let perturbed = |d: f64| -> Result<NetState> {
                let mut n = net.clone();
                n.weights_mut()[ti][wi] += d;
                Ok(n)
            };
            let (plus, minus) = (perturbed(opts.step)?, perturbed(-opts.step)?);
            if !base_masks.is_empty()
                && (relu_masks(&plus, &input)? != base_masks || relu_masks(&minus, &input)? != base_masks)
            {
                suite.skipped += 1;
                continue;
            }
            let eval = |n: &NetState| -> Result<f64> {
                let (y, _) = n.forward_map(&input)?;
                Ok(probe(&y, &r).0)
            };
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * opts.step);
            let analytic = sign * grads.tensors[ti][wi];
            let inst = suite.instances - 1;
            suite.record(analytic, numeric, || format!("instance {inst} tensor {ti} index {wi}"));
        }
    }
    Ok(())
}

fn conv_suite(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("conv");
    for _ in 0..opts.instances {
        let k = rng.gen_range(1..=3);
        let layer = LayerSpec::conv(rng.gen_range(1..=3), rng.gen_range(1..=3), k, rng.gen_range(1..=2), rng.gen_range(0..k));
        check_net(&mut s, rng, vec![layer], 3..=6, opts)?;
    }
    Ok(s)
}

fn tconv_suite(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("transposed_conv");
    for _ in 0..opts.instances {
        let k = rng.gen_range(2..=4);
        let layer = LayerSpec::tconv(rng.gen_range(1..=3), rng.gen_range(1..=3), k, rng.gen_range(1..=2), rng.gen_range(0..k / 2 + 1));
        check_net(&mut s, rng, vec![layer], 2..=4, opts)?;
    }
    Ok(s)
}

fn relu_suite(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("relu");
    for _ in 0..opts.instances {
        let (c0, c1, c2) = (rng.gen_range(1..=2), rng.gen_range(2..=3), rng.gen_range(1..=2));
        let layers = vec![LayerSpec::conv(c0, c1, 3, 1, 1), LayerSpec::relu(c1), LayerSpec::conv(c1, c2, 3, rng.gen_range(1..=2), 1)];
        check_net(&mut s, rng, layers, 3..=5, opts)?;
    }
    Ok(s)
}

fn head_suite(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("head_split");
    for _ in 0..opts.instances {
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let layers = vec![LayerSpec::conv(rng.gen_range(1..=3), HEAD_CHANNELS, k, 1, k / 2), LayerSpec::head_split()];
        check_net(&mut s, rng, layers, 2..=4, opts)?;
    }
    Ok(s)
}

/// Checks the gradient of `value(x)` w.r.t. every element of `x`.
fn check_tensor(
    suite: &mut SuiteResult,
    label: &str,
    x: &PlaneTensor,
    analytic: &PlaneTensor,
    value: impl Fn(&PlaneTensor) -> Result<f64>,
    opts: &GradcheckOptions,
) -> Result<()> {
    let sign = if opts.inject_sign_flip { -1.0 } else { 1.0 };
    for i in 0..x.len() {
        let numeric = central(|d| value(&with_element(x, i, d)), opts.step)?;
        let inst = suite.instances;
        suite.record(sign * analytic.data()[i], numeric, || format!("instance {inst} {label}[{i}]"));
    }
    Ok(())
}

/// Targets kept at least `gap` away from the mean so `|r|` is smooth under the probe.
fn separated_target(rng: &mut ChaCha8Rng, mean: &PlaneTensor, gap: f64) -> PlaneTensor {
    let (h, w, c) = mean.shape();
    let data = mean
        .data()
        .iter()
        .map(|m| {
            let d = rng.gen_range(gap..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            m + d
        })
        .collect();
    PlaneTensor::from_raw(h, w, c, data)
}

fn nll_suite(opts: &GradcheckOptions, rng: &mut ChaCha8Rng, family: Family, constraint: bool) -> Result<SuiteResult> {
    let name = match (constraint, family) {
        (false, Family::Gaussian) => "gaussian_nll",
        (false, Family::Laplace) => "laplace_nll",
        (true, Family::Gaussian) => "constraint_nll_gaussian",
        (true, Family::Laplace) => "constraint_nll_laplace",
    };
    let mut s = SuiteResult::new(name);
    for _ in 0..opts.instances {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let c = rng.gen_range(1..=3);
        let vc = if rng.gen_bool(0.5) { 1 } else { c };
        let mean = random_tensor(rng, h, w, c, -2.0, 1.0);
        let log_var = random_tensor(rng, h, w, vc, -1.5, 1.5);
        let target = if constraint { PlaneTensor::zeros(h, w, c) } else { separated_target(rng, &mean, 1e-2) };
        let mean = if constraint && family == Family::Laplace { separated_target(rng, &target, 1e-2) } else { mean };
        let eval = |m: &PlaneTensor, u: &PlaneTensor| -> Result<_> {
            match (constraint, family) {
                (false, Family::Gaussian) => gaussian_nll(m, u, &target),
                (false, Family::Laplace) => laplace_nll(m, u, &target),
                (true, fam) => constraint_nll(m, u, fam),
            }
        };
        let term = eval(&mean, &log_var)?;
        check_tensor(&mut s, "mean", &mean, &term.grad_mean, |m| Ok(eval(m, &log_var)?.value), opts)?;
        check_tensor(&mut s, "log_var", &log_var, &term.grad_log_var, |u| Ok(eval(&mean, u)?.value), opts)?;
        s.instances += 1;
    }
    Ok(s)
}

fn total_suite(opts: &GradcheckOptions, rng: &mut ChaCha8Rng, name: &str, base: LossConfig) -> Result<SuiteResult> {
    let mut s = SuiteResult::new(name);
    for inst in 0..opts.instances {
        let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let mut heads = HeadBundle::zeros(h, w);
        heads.albedo_mean = random_tensor(rng, h, w, 3, -2.0, 0.0);
        heads.shading_mean = random_tensor(rng, h, w, 1, -1.5, 0.0);
        heads.log_var_albedo = random_tensor(rng, h, w, 1, -1.0, 1.0);
        heads.log_var_shading = random_tensor(rng, h, w, 1, -1.0, 1.0);
        heads.log_var_constraint = random_tensor(rng, h, w, 1, -1.0, 1.0);
        let a = random_tensor(rng, h, w, 3, -2.0, 0.0);
        let b = random_tensor(rng, h, w, 1, -1.5, 0.0);
        let image = random_tensor(rng, h, w, 3, -3.0, 0.0);
        let cfg = LossConfig { lambda_reg: rng.gen_range(0.0..0.05), constraint_shift: inst % 2 == 0, ..base };
        let targets = Targets { albedo_log: &a, shading_log: &b };
        let loss = total_training_loss(&heads, targets, &image, &cfg)?;
        let merged = heads.merge()?;
        let analytic = loss.grads.merge()?;
        check_tensor(
            &mut s,
            "heads",
            &merged,
            &analytic,
            |m| Ok(total_training_loss(&HeadBundle::split(m)?, targets, &image, &cfg)?.value),
            opts,
        )?;
        s.instances += 1;
    }
    Ok(s)
}

/// Runs every suite with deterministic seeding.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let distributional = LossConfig::default();
    let suites = vec![
        conv_suite(opts, &mut rng)?,
        tconv_suite(opts, &mut rng)?,
        relu_suite(opts, &mut rng)?,
        head_suite(opts, &mut rng)?,
        nll_suite(opts, &mut rng, Family::Gaussian, false)?,
        nll_suite(opts, &mut rng, Family::Laplace, false)?,
        nll_suite(opts, &mut rng, Family::Gaussian, true)?,
        nll_suite(opts, &mut rng, Family::Laplace, true)?,
        total_suite(opts, &mut rng, "total_loss_l2", LossConfig { kind: LossKind::L2, ..distributional })?,
        total_suite(opts, &mut rng, "total_loss_distributional", distributional)?,
        total_suite(
            opts,
            &mut rng,
            "total_loss_prediction_residual",
            LossConfig { constraint_target: ConstraintTarget::Prediction, ..distributional },
        )?,
        total_suite(opts, &mut rng, "total_loss_laplace", LossConfig { family: Family::Laplace, ..distributional })?,
    ];
    Ok(GradcheckReport { suites, tolerance: opts.tolerance })
}
