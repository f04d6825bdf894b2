//! Pretrain the bundled Cooke triplet with its decoder, then continue with
//! tolerance-aware optimization, printing the loss per step.
//!
//! cargo run --example train -- [pretrain_iters] [tolerance_iters] [image_size] [pupil] [kernel] [pitch_um]

use std::time::Instant;

use tolopt::imaging::{bundled_corpus_dir, load_corpus};
use tolopt::lens::fixtures;
use tolopt::optimize::{OptimizeConfig, Stage, Trainer};
use tolopt::psf::RenderSettings;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tolopt::Result<()> {
    env_logger::init();
    let pre_iters: usize = arg(1, 20);
    let tol_iters: usize = arg(2, 20);
    let size: usize = arg(3, 64);
    let lens = fixtures::cooke();
    let mut config = OptimizeConfig {
        image_size: size,
        render: RenderSettings {
            pupil_samples: arg(4, 12),
            kernel: arg(5, 51),
            pitch_um: arg(6, 5.0),
        },
        ..Default::default()
    };
    let images: Vec<_> = load_corpus(&bundled_corpus_dir(), size)?.into_iter().map(|(_, i)| i).collect();

    let trainer = Trainer::new(lens.clone(), config.clone(), images.clone())?;
    let mut state = trainer.init_state(None)?;
    let t0 = Instant::now();
    trainer.run(&mut state, pre_iters, |_, r| {
        println!("pretrain {:4} total {:.5e} spot {:.3} image {:.5e}", r.iteration, r.total, r.spot, r.image)
    })?;
    println!("pretrain: {:.2} s/iter", t0.elapsed().as_secs_f64() / pre_iters.max(1) as f64);

    config.stage = Stage::ToleranceAware;
    let trainer = Trainer::new(lens, config, images)?;
    let t0 = Instant::now();
    trainer.run(&mut state, tol_iters, |_, r| {
        println!(
            "tolerance {:4} total {:.5e} spot {:.3} psf {:.4} image {:.5e} empty {}",
            r.iteration, r.total, r.spot, r.psf, r.image, r.empty_cells
        )
    })?;
    println!("tolerance: {:.2} s/iter", t0.elapsed().as_secs_f64() / tol_iters.max(1) as f64);
    for p in state.lens_params.iter() {
        println!("{} = {:.6}", p.name, p.value);
    }
    Ok(())
}
