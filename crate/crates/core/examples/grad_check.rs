//! Central-difference check of the full paired loss on the tiny
//! configuration, in float64 with every random decision fixed.

use switched_contrastive::train::{grad_check, TrainConfig};

fn main() -> switched_contrastive::Result<()> {
    let cfg = TrainConfig::from_file(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.cfg"))?;
    let out = grad_check(&cfg, 1e-5)?;
    let r = &out.report;
    println!("{} entries across {} tensors", r.entries, out.parameters);
    println!(
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        r.max_relative_error, out.worst_param, r.worst.1, r.analytic, r.numeric
    );
    Ok(())
}
