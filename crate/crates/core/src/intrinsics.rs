//! End-to-end pipeline: training on synthetic scenes, decomposition with the
//! selected inference mode, and the ablation table.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::inference::{
    alternating_minimize, result_from_maps, AlternatingOptions, ConstraintMode, DecompositionResult, InferenceProblem,
    DEFAULT_SWEEPS,
};
use crate::losses::{
    total_training_loss, ConstraintTarget, Family, LossConfig, LossKind, Targets, DEFAULT_LAMBDA_REG, DEFAULT_SHIFT_BETA,
};
use crate::metrics::{evaluate, LmseParams, MetricReport, MetricTriple};
use crate::net::{AdamConfig, HeadBundle, NetState, WeightGradients};
use crate::synthdata::{Scene, SceneRecord};
use crate::tensor::{to_log, PlaneTensor, DEFAULT_LOG_EPSILON};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_ITERATIONS: usize = 3000;
pub const DEFAULT_BATCH: usize = 4;

/// How head predictions are turned into the final decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum InferenceKind {
    /// Raw head means, white light.
    None,
    /// Exact constraint, output variances as weights (unit weights after L2 training).
    Hard,
    /// Gaussian slack with the learned constraint variance.
    #[default]
    SoftLearned,
}

impl FromStr for InferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(InferenceKind::None),
            "hard" => Ok(InferenceKind::Hard),
            "soft_learned" | "soft" | "learned" => Ok(InferenceKind::SoftLearned),
            other => arg(format!("unknown inference mode '{other}'")),
        }
    }
}

impl fmt::Display for InferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceKind::None => "none",
            InferenceKind::Hard => "hard",
            InferenceKind::SoftLearned => "soft_learned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationConfig {
    pub loss: LossKind,
    pub inference: InferenceKind,
    pub family: Family,
    pub lambda_reg: f64,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Random horizontal and vertical flips of training examples.
    pub augment: bool,
    pub shift_beta: f64,
    pub constraint_target: ConstraintTarget,
    pub constraint_shift: bool,
    pub sweeps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Distributional,
            inference: InferenceKind::SoftLearned,
            family: Family::Gaussian,
            lambda_reg: DEFAULT_LAMBDA_REG,
            lr: DEFAULT_LR,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            batch_size: DEFAULT_BATCH,
            augment: true,
            shift_beta: DEFAULT_SHIFT_BETA,
            constraint_target: ConstraintTarget::Truth,
            constraint_shift: true,
            sweeps: DEFAULT_SWEEPS,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss == LossKind::L2 && self.inference == InferenceKind::SoftLearned {
            return arg("learned-constraint inference needs the distributional loss (L2 training has no variance maps)");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return arg(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lambda_reg >= 0.0) || !(self.shift_beta >= 0.0) {
            return arg("lambda_reg and shift_beta must be non-negative");
        }
        if self.batch_size == 0 {
            return arg("batch size must be at least 1");
        }
        if self.sweeps == 0 {
            return arg("at least one inference sweep is required");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            family: self.family,
            lambda_reg: self.lambda_reg,
            beta: self.shift_beta,
            constraint_target: self.constraint_target,
            constraint_shift: self.constraint_shift,
        }
    }

    /// Row label in the style "distributional + soft_learned".
    pub fn label(&self) -> String {
        format!("{} + {}", self.loss, self.inference)
    }

    /// Two configs with equal keys train identical networks.
    fn training_key(&self) -> impl PartialEq {
        (
            self.loss,
            self.family,
            self.lambda_reg.to_bits(),
            self.lr.to_bits(),
            self.iterations,
            self.seed,
            self.batch_size,
            self.augment,
            self.shift_beta.to_bits(),
            self.constraint_target,
            self.constraint_shift,
        )
    }
}

/// The five ablation rows: L2 and distributional training, each without and
/// with the hard constraint, plus the learned soft constraint.
pub fn table_configs(base: &AblationConfig) -> Vec<AblationConfig> {
    [
        (LossKind::L2, InferenceKind::None),
        (LossKind::L2, InferenceKind::Hard),
        (LossKind::Distributional, InferenceKind::None),
        (LossKind::Distributional, InferenceKind::Hard),
        (LossKind::Distributional, InferenceKind::SoftLearned),
    ]
    .into_iter()
    .map(|(loss, inference)| AblationConfig { loss, inference, ..*base })
    .collect()
}

/// One supervised example: a linear image with log-domain targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: PlaneTensor,
    pub albedo_log: PlaneTensor,
    pub shading_log: PlaneTensor,
}

impl TrainingExample {
    pub fn new(image: PlaneTensor, albedo: &PlaneTensor, shading_gray: &PlaneTensor) -> Result<Self> {
        let (h, w, c) = image.shape();
        if c != 3 || albedo.shape() != (h, w, 3) || shading_gray.shape() != (h, w, 1) {
            return arg("example image, albedo and shading are not aligned");
        }
        let albedo_log = to_log(albedo, DEFAULT_LOG_EPSILON)?.into_planes();
        let shading_log = to_log(shading_gray, DEFAULT_LOG_EPSILON)?.into_planes();
        Ok(Self { image, albedo_log, shading_log })
    }

    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Self::new(scene.image.clone(), &scene.albedo, &scene.shading_gray)
    }

    fn flipped(&self, horizontal: bool, vertical: bool) -> Self {
        let f = |t: &PlaneTensor| {
            let t = if horizontal { t.flip_horizontal() } else { t.clone() };
            if vertical {
                t.flip_vertical()
            } else {
                t
            }
        };
        Self { image: f(&self.image), albedo_log: f(&self.albedo_log), shading_log: f(&self.shading_log) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: NetState,
    pub config: AblationConfig,
    /// Mean per-pixel training loss of every iteration's batch.
    pub loss_history: Vec<f64>,
}

/// Loss and weight gradient of one example, scaled per pixel.
fn example_gradient(net: &NetState, ex: &TrainingExample, cfg: &LossConfig) -> Result<(f64, WeightGradients)> {
    let image_log = to_log(&ex.image, DEFAULT_LOG_EPSILON)?;
    let (heads, cache) = net.forward(&image_log)?;
    let targets = Targets { albedo_log: &ex.albedo_log, shading_log: &ex.shading_log };
    let loss = total_training_loss(&heads, targets, image_log.planes(), cfg)?;
    let mut grads = net.backward(&cache, &loss.grads)?;
    let px = ex.image.pixels() as f64;
    grads.scale(1.0 / px);
    Ok((loss.value / px, grads))
}

/// Mean per-pixel training loss of `net` over a dataset.
pub fn dataset_loss(net: &NetState, data: &[TrainingExample], cfg: &LossConfig) -> Result<f64> {
    if data.is_empty() {
        return arg("empty dataset");
    }
    let losses: Vec<f64> = data
        .par_iter()
        .map(|ex| {
            let image_log = to_log(&ex.image, DEFAULT_LOG_EPSILON)?;
            let (heads, _) = net.forward(&image_log)?;
            let targets = Targets { albedo_log: &ex.albedo_log, shading_log: &ex.shading_log };
            Ok(total_training_loss(&heads, targets, image_log.planes(), cfg)?.value / ex.image.pixels() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains a fresh network with Adam on minibatches drawn with replacement.
pub fn train(data: &[TrainingExample], config: &AblationConfig) -> Result<TrainedModel> {
    train_from(NetState::desk_scale(config.seed), data, config)
}

/// Continues training `net` for `config.iterations` further steps.
pub fn train_from(mut net: NetState, data: &[TrainingExample], config: &AblationConfig) -> Result<TrainedModel> {
    config.validate()?;
    if data.is_empty() {
        return arg("training set is empty");
    }
    let loss_cfg = config.loss_config();
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    // Batch sampling stream; offset by the step count so resumed runs do not replay batches.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(net.step_count()).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let batch: Vec<TrainingExample> = (0..config.batch_size)
            .map(|_| {
                let ex = &data[rng.gen_range(0..data.len())];
                if config.augment {
                    ex.flipped(rng.gen_bool(0.5), rng.gen_bool(0.5))
                } else {
                    ex.clone()
                }
            })
            .collect();
        let results: Vec<(f64, WeightGradients)> =
            batch.par_iter().map(|ex| example_gradient(&net, ex, &loss_cfg)).collect::<Result<_>>()?;
        let mut total = WeightGradients::zeros_like(&net);
        let mut loss = 0.0;
        for (l, g) in &results {
            total.accumulate(g);
            loss += l;
        }
        let n = results.len() as f64;
        total.scale(1.0 / n);
        history.push(loss / n);
        net.adam_step(&total, &adam)?;
    }
    Ok(TrainedModel { net, config: *config, loss_history: history })
}

/// Predicted heads for a linear image.
pub fn predict_heads(net: &NetState, image: &PlaneTensor) -> Result<(HeadBundle, PlaneTensor)> {
    let image_log = to_log(image, DEFAULT_LOG_EPSILON)?;
    let (heads, _) = net.forward(&image_log)?;
    Ok((heads, image_log.into_planes()))
}

/// Constraint log-variance map as a Gaussian log-variance; a Laplace scale `b`
/// has variance `2 b^2`.
fn constraint_log_var(u: &PlaneTensor, family: Family) -> PlaneTensor {
    match family {
        Family::Gaussian => u.clone(),
        Family::Laplace => u.map(|v| std::f64::consts::LN_2 + 2.0 * v),
    }
}

/// Decomposes a linear image with the model's configured inference mode.
pub fn decompose(model: &TrainedModel, image: &PlaneTensor) -> Result<DecompositionResult> {
    decompose_with(model, image, model.config.inference)
}

/// Decomposes a linear image with an explicit inference mode.
pub fn decompose_with(model: &TrainedModel, image: &PlaneTensor, inference: InferenceKind) -> Result<DecompositionResult> {
    let cfg = AblationConfig { inference, ..model.config };
    cfg.validate()?;
    let (mut heads, image_log) = predict_heads(&model.net, image)?;
    heads.log_var_constraint = constraint_log_var(&heads.log_var_constraint, cfg.family);
    let unit = cfg.loss == LossKind::L2;
    let problem = InferenceProblem::from_heads(&heads, &image_log, unit)?;
    match inference {
        InferenceKind::None => Ok(result_from_maps(
            &problem,
            heads.albedo_mean,
            heads.shading_mean,
            [0.0; 3],
            ConstraintMode::Soft,
        )),
        InferenceKind::Hard | InferenceKind::SoftLearned => {
            let mode = if inference == InferenceKind::Hard { ConstraintMode::Hard } else { ConstraintMode::Soft };
            alternating_minimize(&problem, &AlternatingOptions { mode, sweeps: cfg.sweeps, ..Default::default() })
        }
    }
}

/// Mean predicted constraint standard deviation inside and outside a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceStats {
    pub mean_sigma_inside: f64,
    pub mean_sigma_outside: f64,
}

impl ConfidenceStats {
    pub fn ratio(&self) -> f64 {
        self.mean_sigma_inside / self.mean_sigma_outside
    }
}

/// Pools `sigma_G` over all pixels of the given scenes, split by violation mask.
pub fn constraint_confidence(model: &TrainedModel, scenes: &[&Scene]) -> Result<ConfidenceStats> {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for s in scenes {
        let (heads, _) = predict_heads(&model.net, &s.image)?;
        let u = constraint_log_var(&heads.log_var_constraint, model.config.family);
        for (uv, m) in u.data().iter().zip(s.violation_mask.data()) {
            let k = usize::from(*m > 0.5);
            sums[k] += (0.5 * uv).exp();
            counts[k] += 1;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return arg("need pixels both inside and outside the violation masks");
    }
    Ok(ConfidenceStats {
        mean_sigma_inside: sums[1] / counts[1] as f64,
        mean_sigma_outside: sums[0] / counts[0] as f64,
    })
}

/// Albedo and shading metrics of one decomposition against its scene.
pub fn score(result: &DecompositionResult, scene: &Scene, lmse: &LmseParams) -> Result<(MetricTriple, MetricTriple)> {
    let albedo = evaluate(&result.albedo_linear(), &scene.albedo, lmse)?;
    let shading = evaluate(&result.shading_linear(), &scene.shading_gray, lmse)?;
    Ok((albedo, shading))
}

fn average(a: &MetricTriple, b: &MetricTriple) -> MetricTriple {
    MetricTriple { mse: 0.5 * (a.mse + b.mse), lmse: 0.5 * (a.lmse + b.lmse), dssim: 0.5 * (a.dssim + b.dssim) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: Option<AblationConfig>,
    pub albedo: MetricReport,
    pub shading: MetricReport,
    pub average: MetricTriple,
}

impl AblationRow {
    /// Builds a row from per-image albedo and shading metrics.
    pub fn from_per_image(label: impl Into<String>, config: Option<AblationConfig>, per: Vec<(MetricTriple, MetricTriple)>) -> Self {
        let (a, s): (Vec<_>, Vec<_>) = per.into_iter().unzip();
        let albedo = MetricReport::from_per_image(a);
        let shading = MetricReport::from_per_image(s);
        let average = average(&albedo.triple(), &shading.triple());
        Self { label: label.into(), config, albedo, shading, average }
    }

    pub fn columns(&self) -> [f64; 9] {
        let (a, s, v) = (&self.albedo, &self.shading, &self.average);
        [a.mse, s.mse, v.mse, a.lmse, s.lmse, v.lmse, a.dssim, s.dssim, v.dssim]
    }
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "mse_albedo",
    "mse_shading",
    "mse_avg",
    "lmse_albedo",
    "lmse_shading",
    "lmse_avg",
    "dssim_albedo",
    "dssim_shading",
    "dssim_avg",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned text table; values are percentages as in the usual intrinsic-image tables.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<width$} | {:^26} | {:^26} | {:^26}\n",
            "", "MSE (%)", "LMSE (%)", "DSSIM (%)"
        );
        out += &format!(
            "{:<width$} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}\n",
            "config", "albedo", "shading", "avg", "albedo", "shading", "avg", "albedo", "shading", "avg"
        );
        out += &format!("{}\n", "-".repeat(width + 90));
        for r in &self.rows {
            let c = r.columns().map(|v| 100.0 * v);
            out += &format!(
                "{:<width$} | {:>8.4} {:>8.4} {:>8.4} | {:>8.4} {:>8.4} {:>8.4} | {:>8.4} {:>8.4} {:>8.4}\n",
                r.label, c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8]
            );
        }
        out
    }

    /// Comma-separated values with raw (fractional) metric values.
    pub fn to_csv(&self) -> String {
        let mut out = format!("config,{}\n", REPORT_COLUMNS.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.columns().iter().map(|v| format!("{v:.12e}")).collect();
            out += &format!("{},{}\n", r.label, vals.join(","));
        }
        out
    }
}

/// Evaluates `model` with `inference` on every test scene.
pub fn evaluate_model(
    model: &TrainedModel,
    inference: InferenceKind,
    test: &[&SceneRecord],
    lmse: &LmseParams,
) -> Result<Vec<(MetricTriple, MetricTriple)>> {
    test.par_iter()
        .map(|r| {
            let res = decompose_with(model, &r.scene.image, inference)?;
            score(&res, &r.scene, lmse)
        })
        .collect()
}

fn check_disjoint(train: &[&SceneRecord], test: &[&SceneRecord]) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return arg("train and test splits must both be non-empty");
    }
    let ids: HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = test.iter().find(|r| ids.contains(r.id.as_str())) {
        return arg(format!("scene '{}' appears in both train and test splits", r.id));
    }
    Ok(())
}

/// Trains (sharing networks between configs that differ only in inference),
/// decomposes the test split and reports albedo/shading metrics per config.
pub fn run_ablation(
    train_set: &[&SceneRecord],
    test_set: &[&SceneRecord],
    configs: &[AblationConfig],
    lmse: &LmseParams,
) -> Result<(AblationReport, Vec<TrainedModel>)> {
    check_disjoint(train_set, test_set)?;
    for c in configs {
        c.validate()?;
    }
    let examples: Vec<TrainingExample> =
        train_set.iter().map(|r| TrainingExample::from_scene(&r.scene)).collect::<Result<_>>()?;
    let mut models: Vec<TrainedModel> = Vec::new();
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let idx = match models.iter().position(|m| m.config.training_key() == cfg.training_key()) {
            Some(i) => i,
            None => {
                models.push(train(&examples, cfg)?);
                models.len() - 1
            }
        };
        let per = evaluate_model(&models[idx], cfg.inference, test_set, lmse)?;
        rows.push(AblationRow::from_per_image(cfg.label(), Some(*cfg), per));
    }
    Ok((AblationReport { rows }, models))
}
