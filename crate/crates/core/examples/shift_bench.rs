//! Adapted vs baseline vs no-reversal on shift-2s1t over five seeds.
//!
//! `cargo run --release --example shift_bench -- '<AdaptConfig JSON overrides>'`

use std::time::Instant;

use mmpda::losses::AdaptWeights;
use mmpda::synthdata::{benchmark_domains, generate_domain, Role, SHIFT_2S1T};
use mmpda::trainer::{run_training, AdaptConfig};

fn main() -> mmpda::Result<()> {
    let overrides: serde_json::Value =
        serde_json::from_str(&std::env::args().nth(1).unwrap_or_else(|| "{}".into()))?;
    let mut cfg = serde_json::to_value(AdaptConfig::default())?;
    for (k, v) in overrides.as_object().expect("JSON object") {
        cfg[k] = v.clone();
    }
    let cfg: AdaptConfig = serde_json::from_value(cfg)?;
    let start = Instant::now();
    let (mut full, mut base, mut nogrl) = (0.0, 0.0, 0.0);
    for seed in 0..5u64 {
        let bench = benchmark_domains(SHIFT_2S1T, seed)?;
        let sources = bench.sources.iter().map(generate_domain).collect::<mmpda::Result<Vec<_>>>()?;
        let target = generate_domain(&bench.target)?.with_role(Role::Target)?;
        let cfg = AdaptConfig { seed, ..cfg.clone() };
        let acc = |cfg: &AdaptConfig| -> mmpda::Result<f64> {
            Ok(run_training(&sources, &target, cfg)?.1.final_metrics.unwrap().accuracy)
        };
        let a = acc(&cfg)?;
        let b = acc(&AdaptConfig { weights: AdaptWeights::baseline(), ..cfg.clone() })?;
        let c = acc(&AdaptConfig { grl: false, ..cfg.clone() })?;
        println!("seed {seed}: full {a:.4} baseline {b:.4} no-grl {c:.4}");
        full += a / 5.0;
        base += b / 5.0;
        nogrl += c / 5.0;
    }
    println!("mean: full {full:.4} baseline {base:.4} no-grl {nogrl:.4}  ({:.1?})", start.elapsed());
    Ok(())
}
