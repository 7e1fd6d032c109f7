//! Query cost of an attacker that knows the fingerprint construction.

use blacklight::config::{DetectorConfig, Salt};
use blacklight::fingerprint::Dims;
use blacklight::simulator::{guided_evasion_cost, Budget};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DetectorConfig::new(Salt::from_seed(0));
    for budget in [Budget::L2Normalized(0.05), Budget::Linf(16)] {
        for k in [0, cfg.threshold / 2, cfg.threshold] {
            let cost = guided_evasion_cost(&cfg, Dims::CIFAR, k, budget)?;
            println!(
                "{budget:?} K={k:>2}: {} windows per pixel, {} pixels per query, budget lasts {:?} queries",
                cost.windows_per_change, cost.pixels_per_query, cost.queries
            );
        }
    }
    Ok(())
}
