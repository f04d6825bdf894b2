//! Render the PSF map of a bundled lens, nominal and under a sampled tolerance
//! pattern, and write the gray tiles as one 16-bit PGM mosaic per pattern.
//!
//! cargo run --example psf_map -- [lens1|lens2|cooke] [grid] [seed] [out_dir]

use std::path::PathBuf;

use tolopt::evaluate::map_similarity;
use tolopt::imaging::SimImage;
use tolopt::lens::fixtures;
use tolopt::psf::{assemble_map, MapGeometry, MapPatterns, PsfMap, RenderSettings};
use tolopt::raytrace::LensView;
use tolopt::rng::stream;
use tolopt::tolerance::{sample_pattern, TolerancePattern, ToleranceRange};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn mosaic(map: &PsfMap<f64>) -> tolopt::Result<SimImage> {
    let (g, k) = (map.grid, map.kernel);
    let side = g * k;
    let mut data = vec![0.0; side * side];
    for (cell, taps) in map.gray_kernels().into_iter().enumerate() {
        let Some(taps) = taps else { continue };
        // each tile at its own peak so the edge cells stay visible
        let peak = taps.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let (r0, c0) = ((cell / g) * k, (cell % g) * k);
        for (i, v) in taps.iter().enumerate() {
            data[(r0 + i / k) * side + c0 + i % k] = v / peak;
        }
    }
    SimImage::new(side, side, data)
}

fn main() -> tolopt::Result<()> {
    let lens = fixtures::by_name(&arg(1, "cooke".to_string())).expect("unknown fixture");
    let grid: usize = arg(2, 4);
    let seed: u64 = arg(3, 1);
    let out = PathBuf::from(arg(4, "psf_map_out".to_string()));
    std::fs::create_dir_all(&out).map_err(|e| tolopt::Error::io(&out, e))?;

    let render = RenderSettings {
        pitch_um: 5.0,
        ..Default::default()
    };
    let view = LensView::<f64>::plain(&lens);
    let geometry = MapGeometry::new(&lens, &view, grid, render)?;
    let nominal = assemble_map(&lens, &view, &geometry, MapPatterns::Single(&TolerancePattern::zero(&lens)))?;
    let pattern = sample_pattern(&mut stream(seed, "example", 0), &ToleranceRange::default(), &lens);
    let perturbed = assemble_map(&lens, &view, &geometry, MapPatterns::Single(&pattern))?;

    for (name, map) in [("nominal", &nominal), ("perturbed", &perturbed)] {
        let path = out.join(format!("{}_{name}.pgm", lens.name));
        std::fs::write(&path, mosaic(map)?.to_pgm16(1.0)).map_err(|e| tolopt::Error::io(&path, e))?;
        println!("{name}: {} of {} cells empty, wrote {}", map.empty_cells(), map.cells.len(), path.display());
    }
    println!("mean PSF similarity to nominal: {:.4}", map_similarity(&nominal, &perturbed));
    Ok(())
}
