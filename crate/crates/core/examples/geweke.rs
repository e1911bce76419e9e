//! Joint-distribution check: forward draws against successive-conditional Gibbs.
//!
//! Usage: `cargo run --example geweke -- [thin] [samples] [blocked|direct] [seed]`

use shdp_core::geweke::{compare, forward_stats, gibbs_stats, GewekeConfig};
use shdp_core::model::SamplerMode;
use shdp_core::RngState;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = GewekeConfig::small();
    cfg.thin = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    cfg.samples = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let mode = match args.get(3).map(String::as_str) {
        Some("direct") => SamplerMode::Direct,
        _ => SamplerMode::Blocked,
    };
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);

    let forward = forward_stats(&cfg, mode, &mut RngState::new(seed)).expect("forward draws");
    let gibbs = gibbs_stats(&cfg, mode, &mut RngState::new(seed + 1000)).expect("gibbs chain");
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;

    println!(
        "{mode:?}, thin {}, {} samples, seed {seed}",
        cfg.thin, cfg.samples
    );
    for (i, (name, ks)) in compare(&forward, &gibbs).into_iter().enumerate() {
        let f: Vec<f64> = forward.iter().map(|s| s.values()[i]).collect();
        let g: Vec<f64> = gibbs.iter().map(|s| s.values()[i]).collect();
        let (mg, var) = (
            mean(&g),
            g.iter().map(|x| (x - mean(&g)).powi(2)).sum::<f64>(),
        );
        let lag1 = g.windows(2).map(|w| (w[0] - mg) * (w[1] - mg)).sum::<f64>() / var;
        println!(
            "  {name:<18} p = {:.3}  mean forward {:.3} gibbs {mg:.3}  lag-1 autocorrelation {lag1:.2}",
            ks.p_value,
            mean(&f)
        );
    }
}
