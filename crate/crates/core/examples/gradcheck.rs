//! Forward-mode gradients of every training loss against finite differences on
//! the Cooke triplet.
//!
//! cargo run --example gradcheck -- [step] [grid] [image_size]

use tolopt::gradcheck::{gradcheck, GradCheckConfig};
use tolopt::imaging::{bundled_corpus_dir, load_corpus};
use tolopt::lens::fixtures;
use tolopt::optimize::OptimizeConfig;
use tolopt::psf::RenderSettings;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tolopt::Result<()> {
    let size: usize = arg(3, 32);
    let config = OptimizeConfig {
        grid: arg(2, 4),
        image_size: size,
        render: RenderSettings {
            kernel: 51,
            pitch_um: 5.0,
            pupil_samples: 12,
        },
        ..Default::default()
    };
    let check = GradCheckConfig {
        step: arg(1, 1e-9),
        ..Default::default()
    };
    let images = load_corpus(&bundled_corpus_dir(), size)?.into_iter().map(|(_, i)| i).collect();
    let report = gradcheck(&fixtures::cooke(), &config, images, None, &check, &[])?;
    print!("{}", report.table());
    println!("{}", if report.pass { "all gradients agree" } else { "gradient check FAILED" });
    Ok(())
}
