//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use csr_core::gradcheck::{run_gradcheck, GradcheckOptions};
use csr_core::intrinsics::{
    decompose_with, evaluate_model, predict_heads, run_ablation, table_configs, AblationConfig, AblationReport,
    AblationRow, InferenceKind, TrainedModel, TrainingExample,
};
use csr_core::losses::LossKind;
use csr_core::metrics::{evaluate, LmseParams};
use csr_core::net::NetState;
use csr_core::synthdata::{make_dataset, split_records, SceneRecord, Split};
use csr_core::PlaneTensor;
use serde::Serialize;

use crate::config::{default_loss_log, sidecar_path, RunConfig};
use crate::dataset::{load_dataset, write_dataset};
use crate::io::{heatmap, read_image, write_map};
use crate::{CliError, EvalArgs, GenDataArgs, GradcheckArgs, InferArgs, TrainArgs, TrainOverrides};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let d = &mut cfg.data;
    if let Some(v) = args.out {
        d.dir = v;
    }
    if let Some(v) = args.scenes {
        d.scenes = v;
    }
    if let Some(v) = args.seed {
        d.seed = v;
    }
    if let Some(v) = args.height {
        d.height = v;
    }
    if let Some(v) = args.width {
        d.width = v;
    }
    if let Some(v) = args.specular_fraction {
        d.specular_fraction = v;
    }
    if let Some(v) = args.specular_strength {
        d.specular_strength = v;
    }
    if d.scenes < 2 {
        return Err(CliError::Data(format!("{} scene(s) cannot form a disjoint train/test split", d.scenes)));
    }
    let spec = d.scene_spec();
    spec.validate().map_err(CliError::usage)?;
    let records = make_dataset(d.scenes, d.seed, &spec).map_err(CliError::data)?;
    write_dataset(&d.dir, &records, cfg.io.png && !args.no_png)?;
    let n_train = split_records(&records, Split::Train).len();
    println!(
        "wrote {} scenes ({} train / {} test) to {}",
        records.len(),
        n_train,
        records.len() - n_train,
        d.dir.display()
    );
    Ok(())
}

fn apply_train_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    let t = &mut cfg.train;
    if let Some(v) = &o.loss {
        t.loss = v.clone();
    }
    if let Some(v) = &o.family {
        t.family = v.clone();
    }
    if let Some(v) = o.lambda_reg {
        t.lambda_reg = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.iterations {
        t.iterations = v;
    }
    if let Some(v) = o.train_seed {
        t.seed = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = &o.constraint_target {
        t.constraint_target = v.clone();
    }
}

/// Training configuration for a config whose inference mode may not suit the loss.
fn training_config(cfg: &RunConfig) -> Result<AblationConfig, CliError> {
    let mut a = cfg.ablation_config()?;
    if a.loss == LossKind::L2 && a.inference == InferenceKind::SoftLearned {
        a.inference = InferenceKind::Hard;
    }
    a.validate().map_err(CliError::usage)?;
    Ok(a)
}

fn split_of(records: &[SceneRecord], split: Split) -> Result<Vec<&SceneRecord>, CliError> {
    let out = split_records(records, split);
    if out.is_empty() {
        return Err(CliError::Data(format!("dataset has no {} scenes", split.as_str())));
    }
    Ok(out)
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    apply_train_overrides(&mut cfg, &args.overrides);
    if let Some(v) = args.data {
        cfg.data.dir = v;
    }
    if let Some(v) = args.checkpoint {
        cfg.train.checkpoint = v;
    }
    if let Some(v) = args.loss_log {
        cfg.train.loss_log = Some(v);
    }
    let acfg = training_config(&cfg)?;
    let records = load_dataset(&cfg.data.dir)?;
    let train_set = split_of(&records, Split::Train)?;
    let examples: Vec<TrainingExample> = train_set
        .iter()
        .map(|r| TrainingExample::from_scene(&r.scene))
        .collect::<Result<_, _>>()
        .map_err(CliError::data)?;
    let net = match &args.resume {
        Some(p) => NetState::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => NetState::desk_scale(acfg.seed),
    };
    println!(
        "train: loss={} family={} lr={:e} iterations={} batch={} seed={} scenes={} start_step={}",
        acfg.loss,
        acfg.family,
        acfg.lr,
        acfg.iterations,
        acfg.batch_size,
        acfg.seed,
        examples.len(),
        net.step_count()
    );
    let model = csr_core::intrinsics::train_from(net, &examples, &acfg).map_err(CliError::data)?;
    let ckpt = &cfg.train.checkpoint;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    model.net.save(ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
    let log: String = model.loss_history.iter().map(|v| format!("{v:.17e}\n")).collect();
    let log_path = cfg.train.loss_log.clone().unwrap_or_else(|| default_loss_log(ckpt));
    write_file(&log_path, log)?;
    let sidecar = toml::to_string(&cfg).map_err(CliError::data)?;
    write_file(&sidecar_path(ckpt), sidecar)?;
    if let (Some(first), Some(last)) = (model.loss_history.first(), model.loss_history.last()) {
        println!("loss {first:.6} -> {last:.6}");
    }
    println!("checkpoint {} at step {}", ckpt.display(), model.net.step_count());
    Ok(())
}

/// Loads a checkpoint with the training settings recorded beside it.
fn load_model(path: &Path, fallback: &RunConfig) -> Result<TrainedModel, CliError> {
    let net = NetState::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let side = sidecar_path(path);
    let cfg = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))?;
        let mut c = RunConfig::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))?;
        c.inference = fallback.inference.clone();
        c
    } else {
        fallback.clone()
    };
    let config = training_config(&cfg)?;
    Ok(TrainedModel { net, config, loss_history: Vec::new() })
}

#[derive(Serialize)]
struct Diagnostics {
    mode: String,
    color_log: [f64; 3],
    color: [f64; 3],
    sweeps: usize,
    final_objective: f64,
    objective_trace: Vec<f64>,
}

pub fn infer(args: InferArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.mode {
        cfg.inference.mode = v;
    }
    if let Some(v) = args.sweeps {
        cfg.inference.sweeps = v;
    }
    let mode: InferenceKind = cfg.inference.mode.parse().map_err(CliError::usage)?;
    let ckpt = args.checkpoint.unwrap_or_else(|| cfg.train.checkpoint.clone());
    let model = load_model(&ckpt, &cfg)?;
    AblationConfig { inference: mode, ..model.config }.validate().map_err(CliError::usage)?;
    let image = read_image(&args.input).map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    let f = model.net.downsample_factor();
    let (h, w, c) = image.shape();
    if c != 3 {
        return Err(CliError::Usage(format!("input must have 3 channels, got {c}")));
    }
    if h % f != 0 || w % f != 0 {
        return Err(CliError::Usage(format!("input is {h}x{w}; height and width must be divisible by {f}")));
    }
    let result = decompose_with(&model, &image, mode).map_err(CliError::data)?;
    let (heads, _) = predict_heads(&model.net, &image).map_err(CliError::data)?;

    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let png = cfg.io.png && !args.no_png;
    let put = |stem: &str, raw: &PlaneTensor, preview: PlaneTensor| -> Result<(), CliError> {
        write_map(out, stem, raw, png.then_some(&preview)).map_err(|e| CliError::Data(format!("{stem}: {e}")))
    };
    put("albedo_log", &result.albedo_log, result.albedo_linear())?;
    put("shading_log", &result.shading_log, result.shading_linear())?;
    let shading_color = result.shading_color_linear();
    put("shading_color", &shading_color, shading_color.clone())?;
    let recon = result.reconstruction();
    put("reconstruction", &recon, recon.clone())?;
    let slack_mag = {
        let (h, w, _) = result.slack.shape();
        PlaneTensor::from_fn(h, w, 1, |y, x, _| (0..3).map(|c| result.slack.at(y, x, c).abs()).sum::<f64>() / 3.0)
    };
    put("slack", &result.slack, heatmap(&slack_mag))?;
    for (stem, u) in [
        ("sigma_albedo", &heads.log_var_albedo),
        ("sigma_shading", &heads.log_var_shading),
        ("sigma_constraint", &heads.log_var_constraint),
    ] {
        let sigma = u.map(|v| (0.5 * v).exp());
        put(stem, &sigma, heatmap(&sigma))?;
    }
    let diag = Diagnostics {
        mode: mode.to_string(),
        color_log: result.color_log,
        color: result.color_log.map(f64::exp),
        sweeps: result.sweeps(),
        final_objective: result.final_objective(),
        objective_trace: result.objective_trace.clone(),
    };
    write_file(&out.join("diagnostics.toml"), toml::to_string(&diag).map_err(CliError::data)?)?;
    println!(
        "light color (log) = [{:.6}, {:.6}, {:.6}]  final objective = {:.10e}  sweeps = {}",
        result.color_log[0],
        result.color_log[1],
        result.color_log[2],
        result.final_objective(),
        result.sweeps()
    );
    Ok(())
}

fn report_paths(report: &Path) -> (PathBuf, PathBuf) {
    (report.to_path_buf(), report.with_extension("csv"))
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    apply_train_overrides(&mut cfg, &args.overrides);
    if let Some(v) = args.data {
        cfg.data.dir = v;
    }
    if let Some(v) = args.lmse_window {
        cfg.metrics.lmse_window = Some(v);
    }
    if let Some(v) = args.lmse_stride {
        cfg.metrics.lmse_stride = Some(v);
    }
    if let Some(v) = args.sweeps {
        cfg.inference.sweeps = v;
    }
    if let Some(v) = args.report {
        cfg.metrics.report = Some(v);
    }
    if !args.ablation && !args.truth && args.checkpoints.is_empty() {
        return Err(CliError::Usage("nothing to evaluate: pass --checkpoint, --ablation or --truth".into()));
    }
    let modes: Vec<InferenceKind> =
        args.modes.iter().map(|m| m.parse()).collect::<Result<_, _>>().map_err(CliError::usage)?;
    let lmse: LmseParams = cfg.lmse_params();
    if matches!(lmse.window, Some(w) if w < 2) || lmse.stride == Some(0) {
        return Err(CliError::Usage("lmse window must be >= 2 and stride >= 1".into()));
    }
    // Load models first so a missing checkpoint fails before any work.
    let models: Vec<(String, TrainedModel)> = args
        .checkpoints
        .iter()
        .map(|p| Ok((p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(), load_model(p, &cfg)?)))
        .collect::<Result<_, CliError>>()?;

    let records = load_dataset(&cfg.data.dir)?;
    let train_set = split_of(&records, Split::Train)?;
    let test_set = split_of(&records, Split::Test)?;
    let mut report = AblationReport::default();

    if args.truth {
        let per = test_set
            .iter()
            .map(|r| {
                let s = &r.scene;
                Ok((evaluate(&s.albedo, &s.albedo, &lmse)?, evaluate(&s.shading_gray, &s.shading_gray, &lmse)?))
            })
            .collect::<csr_core::Result<Vec<_>>>()
            .map_err(CliError::data)?;
        report.rows.push(AblationRow::from_per_image("truth", None, per));
    }
    for (name, model) in &models {
        let chosen: Vec<InferenceKind> = if modes.is_empty() {
            let mut m = vec![InferenceKind::None, InferenceKind::Hard];
            if model.config.loss == LossKind::Distributional {
                m.push(InferenceKind::SoftLearned);
            }
            m
        } else {
            modes.clone()
        };
        for mode in chosen {
            let cfg_row = AblationConfig { inference: mode, ..model.config };
            cfg_row.validate().map_err(CliError::usage)?;
            let per = evaluate_model(model, mode, &test_set, &lmse).map_err(CliError::data)?;
            report.rows.push(AblationRow::from_per_image(format!("{name}: {}", cfg_row.label()), Some(cfg_row), per));
        }
    }
    if args.ablation {
        let base = training_config(&cfg)?;
        println!("ablation: lr={:e} iterations={} seed={}", base.lr, base.iterations, base.seed);
        let (ab, _) = run_ablation(&train_set, &test_set, &table_configs(&base), &lmse).map_err(CliError::data)?;
        report.rows.extend(ab.rows);
    }
    print!("{}", report.to_table());
    if let Some(path) = &cfg.metrics.report {
        let (txt, csv) = report_paths(path);
        write_file(&txt, report.to_table())?;
        write_file(&csv, report.to_csv())?;
        println!("report written to {} and {}", txt.display(), csv.display());
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if args.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let opts = GradcheckOptions {
        instances: args.instances,
        seed: args.seed,
        inject_sign_flip: args.inject_sign_flip,
        ..Default::default()
    };
    let report = run_gradcheck(&opts).map_err(CliError::data)?;
    print!("{report}");
    if report.passed() {
        println!("gradcheck passed (tolerance {:e})", report.tolerance);
        Ok(())
    } else {
        let w = report.worst().expect("at least one suite");
        Err(CliError::Usage(format!(
            "gradcheck failed: worst suite {} with relative error {:.3e} at {}",
            w.name, w.max_rel_error, w.worst
        )))
    }
}
