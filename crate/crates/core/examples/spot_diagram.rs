//! Spot diagrams of the bundled prescriptions, nominal and under one sampled
//! tolerance pattern.
//!
//! cargo run --example spot_diagram -- [lens1|lens2|cooke] [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tolopt::lens::fixtures;
use tolopt::raytrace::trace_field;
use tolopt::tolerance::{sample_pattern, TolerancePattern, ToleranceRange};

fn main() -> tolopt::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("lens1");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let lens = fixtures::by_name(name).expect("unknown fixture");
    println!("{}: efl {:.3} mm, max field {:.3} deg", lens.name, lens.paraxial_efl(lens.reference_wavelength())?, lens.max_field());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbed = sample_pattern(&mut rng, &ToleranceRange::default(), &lens);
    for (label, pattern) in [("nominal", TolerancePattern::zero(&lens)), ("perturbed", perturbed)] {
        println!("{label}");
        for &field in &lens.fields {
            let mut row = format!("  field {field:6.3} deg:");
            for &wl in &lens.wavelengths {
                match trace_field(&lens, &pattern, field, wl, 32) {
                    Ok(s) => row += &format!("  {wl:.0} nm rms {:7.2} um ({} dead)", s.rms_um, s.dead),
                    Err(e) => row += &format!("  {wl:.0} nm: {e}"),
                }
            }
            println!("{row}");
        }
    }
    Ok(())
}
