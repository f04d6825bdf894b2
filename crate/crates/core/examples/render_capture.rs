//! Simulate a sensor capture of a corpus image through the spatially varying
//! PSFs of a lens, then restore it with the Wiener-initialised decoder.
//!
//! cargo run --example render_capture -- [lens1|lens2|cooke] [image_size] [noise_sigma] [out_dir]

use std::path::PathBuf;

use tolopt::decoder::{DEFAULT_DECODER_KERNEL, DEFAULT_NSR};
use tolopt::evaluate::{psnr, ssim};
use tolopt::imaging::{add_noise, bundled_corpus_dir, convolve_sv, load_corpus, Kernel, Regions};
use tolopt::lens::fixtures;
use tolopt::optimize::design_decoder;
use tolopt::psf::{assemble_map, MapGeometry, MapPatterns, RenderSettings};
use tolopt::raytrace::LensView;
use tolopt::rng::stream;
use tolopt::tolerance::TolerancePattern;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tolopt::Result<()> {
    let lens = fixtures::by_name(&arg(1, "cooke".to_string())).expect("unknown fixture");
    let size: usize = arg(2, 256);
    let sigma: f64 = arg(3, 0.01);
    let out = PathBuf::from(arg(4, "render_out".to_string()));
    std::fs::create_dir_all(&out).map_err(|e| tolopt::Error::io(&out, e))?;
    let grid = 8;
    let render = RenderSettings {
        pitch_um: 5.0,
        pupil_samples: 32,
        ..Default::default()
    };

    let view = LensView::<f64>::plain(&lens);
    let geometry = MapGeometry::new(&lens, &view, grid, render)?;
    let map = assemble_map(&lens, &view, &geometry, MapPatterns::Single(&TolerancePattern::zero(&lens)))?;
    let kernels: Vec<Kernel> = map
        .gray_kernels()
        .into_iter()
        .map(|t| Kernel {
            k: map.kernel,
            taps: t.unwrap_or_else(|| Kernel::delta(map.kernel).taps),
        })
        .collect();
    let decoder = design_decoder(&lens, grid, render, DEFAULT_DECODER_KERNEL, DEFAULT_NSR)?;
    let regions = Regions::new(size, size, grid)?;

    for (i, (name, truth)) in load_corpus(&bundled_corpus_dir(), size)?.into_iter().enumerate() {
        let capture = add_noise(&convolve_sv(&truth, &kernels, &regions)?, sigma, &mut stream(0, "example", i as u64));
        let restored = decoder.decode(&capture, &regions)?.clipped();
        let stem = name.trim_end_matches(".pgm").trim_end_matches(".png");
        capture.save(&out.join(format!("{stem}_capture.png")))?;
        restored.save(&out.join(format!("{stem}_restored.png")))?;
        println!(
            "{stem:<12} capture {:6.2} dB / {:.4}   restored {:6.2} dB / {:.4}",
            psnr(&capture, &truth)?,
            ssim(&capture, &truth)?,
            psnr(&restored, &truth)?,
            ssim(&restored, &truth)?
        );
    }
    println!("images in {}", out.display());
    Ok(())
}
