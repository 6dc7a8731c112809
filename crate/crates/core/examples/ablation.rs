//! Runs the desk-scale ablation table on a synthetic dataset.
//!
//! Usage: `cargo run --release -p csr-core --example ablation -- [iterations] [lr] [seed] [specular_strength]`

use std::time::Instant;

use csr_core::intrinsics::{constraint_confidence, run_ablation, table_configs, AblationConfig};
use csr_core::metrics::LmseParams;
use csr_core::synthdata::{make_dataset, split_records, SceneSpec, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iterations = args.first().map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let lr = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(csr_core::intrinsics::DEFAULT_LR);
    let seed = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut spec = SceneSpec::default();
    if let Some(s) = args.get(3) {
        spec.specular_strength = s.parse()?;
    }

    let records = make_dataset(20, seed, &spec)?;
    let train = split_records(&records, Split::Train);
    let test = split_records(&records, Split::Test);
    let base = AblationConfig { iterations, lr, seed, ..Default::default() };
    let start = Instant::now();
    let (report, models) = run_ablation(&train, &test, &table_configs(&base), &LmseParams::default())?;
    println!("{}", report.to_table());
    let scenes: Vec<_> = test.iter().map(|r| &r.scene).collect();
    for m in &models {
        let h = &m.loss_history;
        let k = h.len().min(100).max(1);
        let head: f64 = h.iter().take(k).sum::<f64>() / k as f64;
        let tail: f64 = h.iter().rev().take(k).sum::<f64>() / k as f64;
        print!("{}: loss {head:.4} -> {tail:.4}", m.config.loss);
        if m.config.loss == csr_core::losses::LossKind::Distributional {
            let c = constraint_confidence(m, &scenes)?;
            print!("  sigma_G in {:.4} out {:.4} ratio {:.3}", c.mean_sigma_inside, c.mean_sigma_outside, c.ratio());
        }
        println!();
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
