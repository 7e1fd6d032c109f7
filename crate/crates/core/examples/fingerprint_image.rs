//! Fingerprint an image and a slightly perturbed copy, then compare them.
//!
//! Run with `cargo run --example fingerprint_image [image.pgm|image.ppm]`.

use blacklight::config::{DetectorConfig, Salt};
use blacklight::fingerprint::{fingerprint, Dims, QueryImage};
use blacklight::formats;
use blacklight::simulator::gen_benign;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DetectorConfig::new(Salt::from_seed(7));
    let image: QueryImage = match std::env::args().nth(1) {
        Some(path) => formats::decode_netpbm(&std::fs::read(path)?)?,
        None => gen_benign(1, Dims::CIFAR, 1).remove(0).image,
    };

    let fp = fingerprint(&image, &cfg)?;
    println!("{} windows, {} digests kept", fp.source_n(), fp.len());
    for d in fp.digests().iter().take(3) {
        println!("  {}", hex::encode(d.as_bytes()));
    }

    let mut nudged = image.clone();
    for v in nudged.pixels_mut().iter_mut().step_by(97) {
        *v = v.saturating_add(9);
    }
    let other = fingerprint(&nudged, &cfg)?;
    println!(
        "perturbed copy (Linf {}): overlap {} of {}, threshold {}",
        image.linf_distance(&nudged),
        fp.overlap(&other),
        fp.len(),
        cfg.threshold
    );
    println!(
        "encoded fingerprint: {} bytes",
        formats::encode_fingerprint(&fp).len()
    );
    Ok(())
}
