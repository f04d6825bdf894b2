//! Monte Carlo yield of a lens with its design-point decoder: PSNR/SSIM
//! thresholds reached by a given share of manufactured samples, plus the spread
//! of PSF similarity under the same tolerances.
//!
//! cargo run --example yield_eval -- [lens1|lens2|cooke] [trials] [image_size] [tolerance_scale]

use tolopt::decoder::{DEFAULT_DECODER_KERNEL, DEFAULT_NSR};
use tolopt::evaluate::{monte_carlo_eval, psf_stability, EvalSettings};
use tolopt::imaging::{bundled_corpus_dir, load_corpus};
use tolopt::lens::fixtures;
use tolopt::optimize::design_decoder;
use tolopt::tolerance::ToleranceRange;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tolopt::Result<()> {
    let lens = fixtures::by_name(&arg(1, "cooke".to_string())).expect("unknown fixture");
    let trials: usize = arg(2, 24);
    let settings = EvalSettings {
        image_size: arg(3, 128),
        ..Default::default()
    };
    let ranges = ToleranceRange::default().scaled(arg(4, 1.0));
    let corpus: Vec<_> = load_corpus(&bundled_corpus_dir(), settings.image_size)?
        .into_iter()
        .map(|(_, i)| i)
        .collect();
    let decoder = design_decoder(&lens, settings.grid, settings.render, DEFAULT_DECODER_KERNEL, DEFAULT_NSR)?;

    let report = monte_carlo_eval(&lens, &decoder, &ranges, trials, &corpus, 11, &settings)?;
    println!(
        "{}: {trials} trials, mean PSNR {:.2} dB, mean SSIM {:.4}, spot {:.2} um (design {:.2} um), {} failures",
        lens.name, report.mean_psnr, report.mean_ssim, report.mean_spot, report.design_spot, report.failures
    );
    for t in &report.thresholds {
        println!("  {:3}% reach {:6.2} dB  SSIM {:.4}", t.confidence_pct, t.psnr, t.ssim);
    }
    let h = &report.psnr_histogram;
    let top = h.counts.iter().copied().max().unwrap_or(1).max(1);
    for (lo, c) in h.edges.iter().zip(&h.counts) {
        println!("  {lo:7.2} dB |{}", "#".repeat(c * 40 / top));
    }

    let s = psf_stability(&lens, &ranges, trials, 11, settings.grid, settings.render)?;
    println!("PSF similarity: mean {:.4} std {:.4} range [{:.4}, {:.4}]", s.mean, s.std, s.min, s.max);
    Ok(())
}
