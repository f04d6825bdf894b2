//! Load a prescription (a JSON file or a bundled fixture name), validate it,
//! print its data table, then sample a few tolerance patterns and show how each
//! one lands on the surfaces.
//!
//! cargo run --example prescription -- [lens.json|lens1|lens2|cooke] [patterns] [seed]

use std::path::Path;

use tolopt::lens::{fixtures, load_prescription};
use tolopt::rng::stream;
use tolopt::tolerance::{realize_transforms, sample_pattern, ToleranceRange};

fn main() -> tolopt::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("cooke");
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lens = match fixtures::by_name(which) {
        Some(l) => l,
        None => load_prescription(Path::new(which))?,
    };

    let problems = lens.validate();
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("invalid: {p}");
        }
        std::process::exit(1);
    }

    println!("{} (object at {} mm)", lens.name, lens.object_distance);
    println!("  #   radius mm   thick mm   semi-diam   nd       vd");
    for (i, s) in lens.surfaces.iter().enumerate() {
        let glass = if s.material_after.is_air {
            "air".to_string()
        } else {
            format!("{:.5}  {:.2}", s.material_after.nd, s.material_after.vd)
        };
        let stop = if s.is_stop { " stop" } else { "" };
        println!(
            "{i:>3}  {:>10.4}  {:>9.4}  {:>9.3}   {glass}{stop}",
            s.radius(),
            s.thickness,
            s.semi_diameter
        );
    }
    for &wl in &lens.wavelengths {
        println!("  efl at {wl:.2} nm: {:.4} mm", lens.paraxial_efl(wl)?);
    }
    println!("  groups {:?}, fields {:?} deg", lens.element_groups, lens.fields);

    let ranges = ToleranceRange::default();
    let mut rng = stream(seed, "example-prescription", 0);
    for n in 0..count {
        let pattern = sample_pattern(&mut rng, &ranges, &lens);
        println!("pattern {n}");
        for (g, t) in pattern.groups.iter().enumerate() {
            println!(
                "  group {g}: decenter ({:+.4}, {:+.4}) mm, dz {:+.4} mm, tilt ({:+.4}, {:+.4}, {:+.4}) deg",
                t.dx_mm, t.dy_mm, t.dz_mm, t.alpha_deg, t.beta_deg, t.gamma_deg
            );
        }
        for (i, tr) in realize_transforms(&pattern, &lens)?.iter().enumerate() {
            let [tx, ty, tz] = tr.translation;
            println!(
                "  surface {i}: ray offset ({tx:+.4}, {ty:+.4}, {tz:+.4}) mm about surface {}, curvature {:+.3} %",
                tr.pivot_surface,
                tr.curvature_frac * 100.0
            );
        }
    }
    Ok(())
}
