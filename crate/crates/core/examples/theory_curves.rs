//! Flagging probability bounds against a Monte-Carlo estimate.

use blacklight::theory::{
    fpr_and_detection, monte_carlo_q, q_lower_alt, q_upper, BoundParams, DeltaModel,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = BoundParams::new(3053, 0, 50, 25)?;
    println!(
        "{:>5} {:>12} {:>12} {:>12}",
        "D", "lower", "upper", "simulated"
    );
    for d in [0, 500, 1000, 1500, 2000, 2500] {
        let p = base.with_d(d);
        let mc = monte_carlo_q(&p, 5000, d)?;
        println!(
            "{d:>5} {:>12.4e} {:>12.4e} {:>12.4e}",
            q_lower_alt(&p)?.value,
            q_upper(&p)?,
            mc.estimate
        );
    }

    let model = DeltaModel {
        delta_benign: 2500,
        delta_attack: 100,
    };
    let (fp, detect) = fpr_and_detection(&model, &base)?;
    println!(
        "false positive per pair <= {:.3e}, detection per pair >= {:.6}",
        fp.upper, detect.upper
    );
    Ok(())
}
