//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --release -p csr-cli --test acceptance`; the ablation criteria
//! train two networks for 5,000 iterations each and dominate the runtime.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use csr_core::gradcheck::{run_gradcheck, GradcheckOptions};
use csr_core::inference::{alternating_minimize, brute_force_oracle, AlternatingOptions, ConstraintMode, InferenceProblem};
use csr_core::intrinsics::{constraint_confidence, run_ablation, table_configs, AblationConfig, AblationReport};
use csr_core::losses::LossKind;
use csr_core::metrics::{dssim, lmse, si_mse, LmseParams};
use csr_core::synthdata::{make_dataset, split_records, SceneSpec, Split};
use csr_core::PlaneTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROBLEMS: u64 = 100;
const ABLATION_ITERATIONS: usize = 5000;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn report(n: usize, v: &Verdict, elapsed: Duration) -> bool {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {n}: {tag} ({:.1}s) {}", elapsed.as_secs_f64(), v.detail);
    v.pass
}

fn tensor(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> PlaneTensor {
    PlaneTensor::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Seeded 4x4 problem: log-range means and image, variances in [0.05, 2].
fn random_problem(seed: u64) -> InferenceProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu_a = tensor(4, 4, 3, &mut rng, -2.0, 0.0);
    let mu_b = tensor(4, 4, 1, &mut rng, -1.5, 0.0);
    let var_a = tensor(4, 4, 1, &mut rng, 0.05, 2.0);
    let var_b = tensor(4, 4, 1, &mut rng, 0.05, 2.0);
    let var_g = tensor(4, 4, 1, &mut rng, 0.05, 2.0);
    let image = tensor(4, 4, 3, &mut rng, -3.0, 0.0);
    InferenceProblem::new(mu_a, mu_b, var_a, var_b, var_g, image).unwrap()
}

fn solve(p: &InferenceProblem, mode: ConstraintMode) -> csr_core::inference::DecompositionResult {
    alternating_minimize(p, &AlternatingOptions { mode, ..Default::default() }).unwrap()
}

fn color_diff(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let r = run_gradcheck(&GradcheckOptions { instances: 20, ..Default::default() }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let required = [
        "conv",
        "transposed_conv",
        "relu",
        "head_split",
        "gaussian_nll",
        "laplace_nll",
        "constraint_nll_gaussian",
        "constraint_nll_laplace",
        "total_loss_distributional",
    ];
    let missing: Vec<_> = required.iter().filter(|n| !r.suites.iter().any(|s| s.name == **n)).collect();
    let worst = r.worst().map(|s| format!("{} {:.2e}", s.name, s.max_rel_error)).unwrap_or_default();
    let all_checked = r.suites.iter().all(|s| s.instances >= 20 && s.checked > 0);
    Verdict::new(
        r.passed() && missing.is_empty() && all_checked && secs < 60.0,
        format!("{} suites, worst {worst}, missing {missing:?}, {secs:.1}s of 60s", r.suites.len()),
    )
}

fn solver() -> Verdict {
    let (mut soft_var, mut soft_obj, mut hard_var, mut feas, mut sweeps) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0);
    for seed in 0..PROBLEMS {
        let p = random_problem(seed);
        let r = solve(&p, ConstraintMode::Soft);
        let o = brute_force_oracle(&p, ConstraintMode::Soft).unwrap();
        soft_var = soft_var
            .max(r.albedo_log.max_abs_diff(&o.albedo_log))
            .max(r.shading_log.max_abs_diff(&o.shading_log))
            .max(color_diff(&r.color_log, &o.color_log));
        soft_obj = soft_obj.max((r.final_objective() - o.objective).abs());
        sweeps = sweeps.max(r.sweeps());

        let r = solve(&p, ConstraintMode::Hard);
        let o = brute_force_oracle(&p, ConstraintMode::Hard).unwrap();
        hard_var = hard_var
            .max(r.albedo_log.max_abs_diff(&o.albedo_log))
            .max(r.shading_log.max_abs_diff(&o.shading_log))
            .max(color_diff(&r.color_log, &o.color_log));
        feas = feas.max(r.slack.data().iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    Verdict::new(
        soft_var < 1e-6 && soft_obj < 1e-9 && hard_var < 1e-8 && feas < 1e-10 && sweeps <= 50,
        format!(
            "soft var {soft_var:.1e} (<1e-6) obj {soft_obj:.1e} (<1e-9); hard var {hard_var:.1e} (<1e-8) \
             |A+B+C-I| {feas:.1e} (<1e-10); max sweeps {sweeps}"
        ),
    )
}

fn limits() -> Verdict {
    let (mut tight, mut loose) = (0.0f64, 0.0f64);
    for seed in 0..PROBLEMS {
        let p = random_problem(seed);
        let hard = solve(&p, ConstraintMode::Hard);
        // sigma_G = 1e-8, i.e. variance 1e-16.
        let q = InferenceProblem { var_g: PlaneTensor::filled(4, 4, 1, 1e-16), ..p.clone() };
        let soft = solve(&q, ConstraintMode::Soft);
        tight = tight
            .max(soft.albedo_log.max_abs_diff(&hard.albedo_log))
            .max(soft.shading_log.max_abs_diff(&hard.shading_log))
            .max(color_diff(&soft.color_log, &hard.color_log));
        // sigma_G = e^10, i.e. variance e^20.
        let q = InferenceProblem { var_g: PlaneTensor::filled(4, 4, 1, 20f64.exp()), ..p.clone() };
        let soft = solve(&q, ConstraintMode::Soft);
        loose = loose.max(soft.albedo_log.max_abs_diff(&p.mu_a)).max(soft.shading_log.max_abs_diff(&p.mu_b));
    }
    Verdict::new(
        tight < 1e-5 && loose < 1e-3,
        format!("sigma_G=1e-8 vs hard {tight:.1e} (<1e-5); sigma_G=e^10 vs heads {loose:.1e} (<1e-3)"),
    )
}

fn steering() -> Verdict {
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for seed in 0..PROBLEMS {
        let p = random_problem(seed);
        let q = InferenceProblem { var_a: PlaneTensor::filled(4, 4, 1, 1e-16), ..p.clone() };
        a = a.max(solve(&q, ConstraintMode::Soft).albedo_log.max_abs_diff(&p.mu_a));
        let q = InferenceProblem { var_b: PlaneTensor::filled(4, 4, 1, 1e-16), ..p.clone() };
        b = b.max(solve(&q, ConstraintMode::Soft).shading_log.max_abs_diff(&p.mu_b));
    }
    Verdict::new(a < 1e-6 && b < 1e-6, format!("sigma_A=1e-8: albedo {a:.1e}; sigma_B=1e-8: shading {b:.1e} (<1e-6)"))
}

fn metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut self_zero = true;
    let mut scale_err = 0.0f64;
    for _ in 0..20 {
        let x = tensor(16, 16, 3, &mut rng, 0.0, 1.0);
        let y = tensor(16, 16, 3, &mut rng, 0.0, 1.0);
        self_zero &= si_mse(&x, &x).unwrap() == 0.0 && lmse(&x, &x, 4, 2).unwrap() == 0.0 && dssim(&x, &x).unwrap() == 0.0;
        let k = rng.gen_range(0.1..10.0);
        scale_err = scale_err.max((si_mse(&x.map(|v| k * v), &y).unwrap() - si_mse(&x, &y).unwrap()).abs());
    }
    let d = dssim(&PlaneTensor::zeros(16, 16, 1), &PlaneTensor::filled(16, 16, 1, 1.0)).unwrap();
    let p = PlaneTensor::new(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let l = lmse(&p, &PlaneTensor::filled(2, 2, 1, 1.0), 2, 2).unwrap();
    Verdict::new(
        self_zero && scale_err < 1e-12 && (d - 0.49995).abs() < 1e-4 && l == 0.75,
        format!("metric(x,x)=0: {self_zero}; scale err {scale_err:.1e} (<1e-12); dssim {d:.5}; lmse {l}"),
    )
}

fn ablation() -> (Verdict, Verdict, Verdict) {
    let start = Instant::now();
    let spec = SceneSpec::default();
    let records = make_dataset(20, 0, &spec).unwrap();
    let train = split_records(&records, Split::Train);
    let test = split_records(&records, Split::Test);
    let base = AblationConfig { iterations: ABLATION_ITERATIONS, ..Default::default() };
    let (rep, models) = run_ablation(&train, &test, &table_configs(&base), &LmseParams::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("{}", rep.to_table());
    let setup = format!(
        "{} train / {} test, {}x{}, specular fraction {}, {} iterations, {secs:.0}s of 1800s",
        train.len(),
        test.len(),
        spec.height,
        spec.width,
        spec.specular_fraction,
        ABLATION_ITERATIONS
    );
    let in_budget = secs < 1800.0 && train.len() == 10 && test.len() == 10;

    let avg = |r: &AblationReport, label: &str| r.row(label).unwrap_or_else(|| panic!("row {label}")).average;
    let soft = avg(&rep, "distributional + soft_learned");
    let none = avg(&rep, "distributional + none");
    let hard = avg(&rep, "distributional + hard");
    let a = soft.mse < none.mse && soft.mse < hard.mse && soft.dssim < none.dssim && soft.dssim < hard.dssim;
    let six_a = Verdict::new(
        a && in_budget,
        format!(
            "(a) avg MSE soft {:.4} / none {:.4} / hard {:.4}; avg DSSIM {:.4} / {:.4} / {:.4}; {setup}",
            soft.mse, none.mse, hard.mse, soft.dssim, none.dssim, hard.dssim
        ),
    );
    let albedo = |label: &str| rep.row(label).unwrap_or_else(|| panic!("row {label}")).albedo.mse;
    let (l2_hard, l2_none) = (albedo("l2 + hard"), albedo("l2 + none"));
    let six_b = Verdict::new(
        l2_hard > l2_none && in_budget,
        format!("(b) albedo MSE l2+hard {l2_hard:.5} vs l2+none {l2_none:.5}"),
    );

    let model = models.iter().find(|m| m.config.loss == LossKind::Distributional).expect("distributional model");
    let scenes: Vec<_> = test.iter().map(|r| &r.scene).collect();
    let c = constraint_confidence(model, &scenes).unwrap();
    let seven = Verdict::new(
        c.ratio() >= 1.5,
        format!(
            "mean sigma_G inside {:.4} / outside {:.4} = {:.3} (>=1.5)",
            c.mean_sigma_inside,
            c.mean_sigma_outside,
            c.ratio()
        ),
    );
    (six_a, six_b, seven)
}

fn run(dir: &Path, args: &[&str]) -> Vec<u8> {
    let o = Command::new(env!("CARGO_BIN_EXE_csr")).args(args).current_dir(dir).output().expect("csr runs");
    assert!(o.status.success(), "csr {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o.stdout
}

/// Every `.csrf`, `.ckpt`, `.txt`, `.csv` and `.toml` file under `dir`, keyed by relative path.
fn raw_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csrf" | "ckpt" | "txt" | "csv" | "toml")) {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

fn pipeline(dir: &Path) -> (Vec<(String, Vec<u8>)>, Vec<u8>) {
    run(dir, &["gen-data", "--scenes", "6", "--seed", "3", "--height", "16", "--width", "16", "--out", "data"]);
    run(dir, &["train", "--data", "data", "--checkpoint", "m/dist.ckpt", "--iterations", "20"]);
    run(dir, &["train", "--data", "data", "--checkpoint", "m/l2.ckpt", "--iterations", "20", "--loss", "l2"]);
    run(dir, &["train", "--data", "data", "--checkpoint", "m/more.ckpt", "--iterations", "5", "--resume", "m/dist.ckpt"]);
    for mode in ["none", "hard", "soft_learned"] {
        let out = format!("infer/{mode}");
        run(dir, &["infer", "--checkpoint", "m/dist.ckpt", "--input", "data/scene_001/image.csrf", "--out", &out, "--mode", mode]);
    }
    run(dir, &[
        "eval", "--data", "data", "--checkpoint", "m/dist.ckpt", "--checkpoint", "m/l2.ckpt", "--truth", "--report", "eval/report.txt",
    ]);
    let gradcheck = run(dir, &["gradcheck", "--instances", "2", "--seed", "9"]);
    (raw_outputs(dir), gradcheck)
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (fa, ga) = pipeline(a.path());
    let (fb, gb) = pipeline(b.path());
    let names_match = fa.iter().map(|f| &f.0).eq(fb.iter().map(|f| &f.0));
    let differing: Vec<_> = fa.iter().zip(&fb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.clone()).collect();
    Verdict::new(
        names_match && differing.is_empty() && ga == gb && !fa.is_empty(),
        format!(
            "{} raw files compared across gen-data/train/infer/eval, gradcheck stdout equal: {}; differing {differing:?}",
            fa.len(),
            ga == gb
        ),
    )
}

fn main() {
    let mut ok = true;
    let timed = |f: fn() -> Verdict| {
        let start = Instant::now();
        let v = f();
        (v, start.elapsed())
    };
    let (v, t) = timed(gradients);
    ok &= report(1, &v, t);
    let (v, t) = timed(solver);
    ok &= report(2, &v, t);
    let (v, t) = timed(limits);
    ok &= report(3, &v, t);
    let (v, t) = timed(steering);
    ok &= report(4, &v, t);
    let (v, t) = timed(metric_identities);
    ok &= report(5, &v, t);
    let start = Instant::now();
    let (six_a, six_b, seven) = ablation();
    let t = start.elapsed();
    let six = Verdict::new(six_a.pass && six_b.pass, format!("{}; {}", six_a.detail, six_b.detail));
    ok &= report(6, &six, t);
    ok &= report(7, &seven, Duration::ZERO);
    let (v, t) = timed(determinism);
    ok &= report(8, &v, t);
    println!("acceptance: {}", if ok { "all criteria passed" } else { "FAILED" });
    if !ok {
        std::process::exit(1);
    }
}
