//! Acceptance run: one PASS/FAIL line per criterion with the measured value,
//! its bound and the wall time.
//!
//! cargo test --test acceptance [-- 1 4 9]     (criterion numbers; default all)
//!
//! Training scale for criteria 6 and 7 can be changed with ACCEPTANCE_PRETRAIN,
//! ACCEPTANCE_ITERS, ACCEPTANCE_SIZE and ACCEPTANCE_TRIALS. Failing criteria are
//! reported, not turned into a failing exit code, unless ACCEPTANCE_STRICT is set.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, Continuous, Normal};

use tolopt::decoder::DecoderParams;
use tolopt::evaluate::{monte_carlo_eval, parse_samples_csv, samples_csv, thresholds, EvalSettings, YieldReport};
use tolopt::gradcheck::{gradcheck, GradCheckConfig};
use tolopt::imaging::{bundled_corpus_dir, load_corpus, SimImage};
use tolopt::lens::{fixtures, LensPrescription};
use tolopt::losses::LossWeights;
use tolopt::math::{Dd, Real};
use tolopt::optimize::{trained_lens, Mode, OptimizeConfig, Stage, TrainState, Trainer};
use tolopt::psf::{assemble_map, psf_similarity, splat, MapGeometry, MapPatterns, Psf, RenderSettings};
use tolopt::raytrace::{
    launch_rays, media_indices, pupil_grid, rms_um, trace_launch, trace_moved_lens, FieldPoint, ImageHit, Launch,
    LensView,
};
use tolopt::rng::stream;
use tolopt::tolerance::{draw, realize_transforms, sample_pattern, TolerancePattern, ToleranceRange};

fn env_or<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn fixtures_all() -> [LensPrescription; 3] {
    [fixtures::lens1(), fixtures::lens2(), fixtures::cooke()]
}

fn corpus(size: usize) -> Vec<SimImage> {
    load_corpus(&bundled_corpus_dir(), size)
        .expect("bundled corpus")
        .into_iter()
        .map(|(_, i)| i)
        .collect()
}

// 1 ------------------------------------------------------------------------

fn transform_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut mismatched = 0usize;
    let mut rays = 0usize;
    for lens in fixtures_all() {
        let view = LensView::<f64>::plain(&lens);
        let launches: Vec<Launch<f64>> = [0.0, lens.max_field()]
            .iter()
            .map(|&f| launch_rays(&lens, &view, FieldPoint::on_y(f), &pupil_grid(4)).unwrap())
            .collect();
        let wls = [lens.wavelengths[0], *lens.wavelengths.last().unwrap()];
        let idx: Vec<Vec<f64>> = wls.iter().map(|&w| media_indices(&lens, w).unwrap()).collect();
        for p in 0..1000u64 {
            let pattern = sample_pattern(&mut stream(2024, "acceptance-equivalence", p), &ToleranceRange::default(), &lens);
            let tr = realize_transforms(&pattern, &lens).unwrap();
            for launch in &launches {
                for (wl, ix) in wls.iter().zip(&idx) {
                    let hits = trace_launch(launch, &view, &tr, ix, *wl);
                    for (k, h) in hits.iter().enumerate() {
                        let m = trace_moved_lens(launch.ray(k, *wl), &view, &tr, ix);
                        rays += 1;
                        if h.alive != m.alive {
                            mismatched += 1;
                        } else if h.alive {
                            worst = worst.max((h.x - m.x).abs()).max((h.y - m.y).abs());
                        }
                    }
                }
            }
        }
    }
    Outcome {
        pass: worst < 1e-10 && mismatched == 0,
        detail: format!(
            "3 fixtures x 1000 patterns, {rays} rays: max |hit difference| {worst:.2e} mm (bound 1e-10), {mismatched} vignetting mismatches"
        ),
    }
}

// 2 ------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let lens = fixtures::cooke();
    let size = 32;
    let config = OptimizeConfig {
        grid: 4,
        image_size: size,
        render: RenderSettings {
            kernel: 51,
            pitch_um: 5.0,
            pupil_samples: 12,
        },
        ..Default::default()
    };
    let check = GradCheckConfig::default();
    let report = gradcheck(&lens, &config, corpus(size), None, &check, &[]).unwrap();
    let worst = |comp: &str| {
        report
            .rows
            .iter()
            .filter(|r| r.component == comp && !r.parameter.starts_with("decoder"))
            .map(|r| r.rel_error)
            .fold(0.0, f64::max)
    };
    let lens_rows = report.rows.iter().filter(|r| !r.parameter.starts_with("decoder")).count();
    // the oracle must also notice a broken derivative
    let params = tolopt::autodiff::lens_parameters(&lens);
    let mut seeds = vec![1.0; params.len()];
    seeds[params.index_of("curvature.2").unwrap()] = 1.001;
    let faulty = gradcheck(&lens, &config, corpus(size), None, &check, &seeds).unwrap();
    Outcome {
        pass: report.pass && !faulty.pass,
        detail: format!(
            "{lens_rows} lens rows + {} decoder rows; worst rel. error spot {:.1e}, psf {:.1e} (bound {:.0e}), image {:.1e}, total {:.1e} (bound {:.0e}); 0.1% fault on curvature.2 {}",
            report.rows.len() - lens_rows,
            worst("spot"),
            worst("psf"),
            check.psf_tolerance,
            worst("image"),
            worst("total"),
            check.tolerance,
            if faulty.pass { "NOT detected" } else { "detected" }
        ),
    }
}

// 3 ------------------------------------------------------------------------

fn sampler_statistics() -> Outcome {
    let r = ToleranceRange::default();
    // clamping at 3 sigma trims the variance slightly; the exact std of the
    // clamped normal is the reference
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let (phi3, tail) = (n01.pdf(3.0), n01.cdf(-3.0));
    let clamped = (1.0 - 6.0 * phi3 - 2.0 * tail + 18.0 * tail).sqrt();
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, max) in [
        ("decenter", r.decenter_mm),
        ("tilt", r.tilt_deg),
        ("thickness", r.thickness_mm),
        ("curvature", r.curvature_frac),
    ] {
        let mut rng = stream(77, name, 0);
        let v: Vec<f64> = (0..100_000).map(|_| draw(&mut rng, max)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let over = v.iter().filter(|x| x.abs() > max).count();
        let rel = std / (max / 3.0) - 1.0;
        pass &= rel.abs() < 0.02 && over == 0;
        parts.push(format!("{name} std/(max/3) - 1 = {rel:+.4}, {over} beyond max"));
    }
    Outcome {
        pass,
        detail: format!(
            "1e5 draws each: {} (bound 2%; clamped-normal expectation {:+.4})",
            parts.join("; "),
            clamped - 1.0
        ),
    }
}

// 4 ------------------------------------------------------------------------

fn psf_normalisation() -> Outcome {
    let mut worst_sum: f64 = 0.0;
    let mut worst_self: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    let mut psfs = 0;
    for lens in fixtures_all() {
        let view = LensView::<f64>::plain(&lens);
        let render = RenderSettings {
            pitch_um: 5.0,
            pupil_samples: 32,
            ..Default::default()
        };
        let geometry = MapGeometry::new(&lens, &view, 4, render).unwrap();
        for p in 0..4u64 {
            let pattern = if p == 0 {
                TolerancePattern::zero(&lens)
            } else {
                sample_pattern(&mut stream(5, "acceptance-psf", p), &ToleranceRange::default(), &lens)
            };
            let map = assemble_map(&lens, &view, &geometry, MapPatterns::Single(&pattern)).unwrap();
            for cell in &map.cells {
                for psf in cell.psfs.iter().filter(|p| !p.empty) {
                    psfs += 1;
                    worst_sum = worst_sum.max((psf.sum() - 1.0).abs());
                    worst_self = worst_self.max((psf_similarity(psf, psf).unwrap() - 1.0).abs());
                }
            }
        }
        // integer-pixel shifts of real traced hits
        let launch = launch_rays(&lens, &view, FieldPoint::on_y(lens.max_field() * 0.5), &pupil_grid(32)).unwrap();
        let wl = lens.reference_wavelength();
        let tr = realize_transforms(&TolerancePattern::zero(&lens), &lens).unwrap();
        let hits = trace_launch(&launch, &view, &tr, &media_indices(&lens, wl).unwrap(), wl);
        let live: Vec<ImageHit<f64>> = hits.into_iter().filter(|h| h.alive).collect();
        let (_, centroid) = rms_um(&live.iter().map(|h| (h.x, h.y)).collect::<Vec<_>>());
        let pitch = 5.0;
        // window wide enough that no shifted hit leaves it
        let reach = live
            .iter()
            .map(|h| (h.x - centroid.0).abs().max((h.y - centroid.1).abs()))
            .fold(0.0, f64::max);
        let k = 2 * ((reach * 1e3 / pitch).ceil() as usize + 5) + 1;
        let mk = |dx: i32, dy: i32| {
            let moved: Vec<ImageHit<f64>> = live
                .iter()
                .map(|h| ImageHit {
                    x: h.x + dx as f64 * pitch * 1e-3,
                    y: h.y + dy as f64 * pitch * 1e-3,
                    alive: true,
                    death: None,
                })
                .collect();
            let (pixels, empty) = splat(&moved, &centroid, k, pitch);
            Psf {
                k,
                pitch_um: pitch,
                field: launch.field,
                wavelength_nm: wl,
                pixels,
                empty,
            }
        };
        let base = mk(0, 0);
        for (dx, dy) in [(1, 0), (0, -2), (3, 1), (-2, -3)] {
            let s = psf_similarity(&base, &mk(dx, dy)).unwrap();
            worst_shift = worst_shift.max((s - 1.0).abs());
        }
    }
    Outcome {
        pass: worst_sum < 1e-9 && worst_self == 0.0 && worst_shift < 1e-9,
        detail: format!(
            "{psfs} PSFs: max |sum - 1| {worst_sum:.1e} (bound 1e-9); max |sim(p,p) - 1| {worst_self:.1e}; integer shifts max |sim - 1| {worst_shift:.1e}"
        ),
    }
}

// 5 ------------------------------------------------------------------------

fn spot_precision() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut spots = 0;
    for lens in fixtures_all() {
        let view = LensView::<f64>::plain(&lens);
        let view_dd = LensView::<Dd>::plain(&lens);
        for p in 0..8u64 {
            let pattern = sample_pattern(&mut stream(8, "acceptance-spot", p), &ToleranceRange::default(), &lens);
            let tr = realize_transforms(&pattern, &lens).unwrap();
            for &field in &lens.fields {
                let launch = launch_rays(&lens, &view, FieldPoint::on_y(field), &pupil_grid(16)).unwrap();
                // identical rays: the f64 aim points, promoted
                let launch_dd = Launch {
                    field: launch.field,
                    object: launch.object,
                    pupil: launch.pupil.clone(),
                    aims: launch.aims.iter().map(|(a, b)| (Dd::cst(*a), Dd::cst(*b))).collect(),
                    chief_aim: (Dd::cst(launch.chief_aim.0), Dd::cst(launch.chief_aim.1)),
                };
                for &wl in &lens.wavelengths {
                    let idx = media_indices(&lens, wl).unwrap();
                    let lo: Vec<(f64, f64)> = trace_launch(&launch, &view, &tr, &idx, wl)
                        .iter()
                        .filter(|h| h.alive)
                        .map(|h| (h.x, h.y))
                        .collect();
                    let hi: Vec<(f64, f64)> = trace_launch(&launch_dd, &view_dd, &tr, &idx, wl)
                        .iter()
                        .filter(|h| h.alive)
                        .map(|h| (h.x.val(), h.y.val()))
                        .collect();
                    if lo.is_empty() || lo.len() != hi.len() {
                        worst = f64::INFINITY;
                        continue;
                    }
                    spots += 1;
                    worst = worst.max((rms_um(&lo).0 - rms_um(&hi).0).abs());
                }
            }
        }
    }
    Outcome {
        pass: worst < 0.01,
        detail: format!("{spots} perturbed spots: max |RMS f64 - RMS double-double| {worst:.2e} um (bound 0.01 um)"),
    }
}

// 6, 7 ---------------------------------------------------------------------

struct Training {
    lens: LensPrescription,
    images: Vec<SimImage>,
    base: OptimizeConfig,
    pretrained: TrainState,
    iters: usize,
    eval: EvalSettings,
    trials: usize,
    reports: Vec<(String, YieldReport)>,
    seconds_per_run: Vec<(String, f64)>,
}

impl Training {
    fn new() -> Self {
        let size = env_or("ACCEPTANCE_SIZE", 64);
        let pre = env_or("ACCEPTANCE_PRETRAIN", 30);
        let iters = env_or("ACCEPTANCE_ITERS", 30);
        let lens = fixtures::cooke();
        let images = corpus(size);
        let base = OptimizeConfig {
            image_size: size,
            seed: 42,
            ..Default::default()
        };
        let t0 = Instant::now();
        let trainer = Trainer::new(lens.clone(), base.clone(), images.clone()).unwrap();
        let mut pretrained = trainer.init_state(None).unwrap();
        trainer.run(&mut pretrained, pre, |_, _| {}).unwrap();
        let eval = EvalSettings {
            image_size: size,
            grid: base.grid,
            render: base.render,
            noise_sigma: base.noise_sigma,
        };
        Self {
            lens,
            images,
            base,
            pretrained,
            iters,
            eval,
            trials: env_or("ACCEPTANCE_TRIALS", 50),
            reports: Vec::new(),
            seconds_per_run: vec![("pretrain".into(), t0.elapsed().as_secs_f64())],
        }
    }

    /// Continue from the shared pretrained state; cached by label.
    fn run(&mut self, label: &str, config: OptimizeConfig) -> YieldReport {
        if let Some((_, r)) = self.reports.iter().find(|(l, _)| l == label) {
            return r.clone();
        }
        let t0 = Instant::now();
        let trainer = Trainer::new(self.lens.clone(), config, self.images.clone()).unwrap();
        let mut state = self.pretrained.clone();
        trainer.run(&mut state, self.iters, |_, _| {}).unwrap();
        let lens = trained_lens(&self.lens, &state).unwrap();
        let r = self.evaluate(&lens, &state.decoder);
        self.seconds_per_run.push((label.into(), t0.elapsed().as_secs_f64()));
        self.reports.push((label.into(), r.clone()));
        r
    }

    fn evaluate(&self, lens: &LensPrescription, decoder: &DecoderParams) -> YieldReport {
        monte_carlo_eval(lens, decoder, &self.base.ranges, self.trials, &self.images, 1234, &self.eval).unwrap()
    }

    fn aware(&self, mode: Mode, n_patterns: usize, weights: LossWeights) -> OptimizeConfig {
        OptimizeConfig {
            stage: Stage::ToleranceAware,
            mode,
            n_patterns,
            weights,
            ..self.base.clone()
        }
    }
}

fn end_to_end(t: &mut Training) -> Outcome {
    // the baseline gets the same number of extra steps, task-only
    let baseline = t.run("pretrain-only", t.base.clone());
    let aware = t.run("both/64/spot+psf", t.aware(Mode::Both, 64, LossWeights::default()));
    let (dp, ds) = (
        aware.mean_psnr - baseline.mean_psnr,
        aware.mean_psf_similarity - baseline.mean_psf_similarity,
    );
    Outcome {
        pass: dp > 0.0 && ds > 0.0,
        detail: format!(
            "{} trials: mean PSNR {:.3} vs {:.3} dB ({dp:+.3}), mean PSF cosine similarity {:.4} vs {:.4} ({ds:+.4}); tolerance-aware vs pretrain-only, {} + {} iterations at {} px",
            t.trials,
            aware.mean_psnr,
            baseline.mean_psnr,
            aware.mean_psf_similarity,
            baseline.mean_psf_similarity,
            env_or("ACCEPTANCE_PRETRAIN", 30),
            t.iters,
            t.eval.image_size
        ),
    }
}

fn ablations(t: &mut Training) -> Outcome {
    let w = LossWeights::default();
    let both = t.run("both/64/spot+psf", t.aware(Mode::Both, 64, w));
    let dec = t.run("decoder-only/64", t.aware(Mode::DecoderOnly, 64, w));
    let opt = t.run("optics-only/64", t.aware(Mode::OpticsOnly, 64, w));
    let spot_only = t.run("both/64/spot", t.aware(Mode::Both, 64, LossWeights { psf: 0.0, ..w }));
    let psf_only = t.run("both/64/psf", t.aware(Mode::Both, 64, LossWeights { spot: 0.0, ..w }));
    let neither = t.run("both/64/none", t.aware(Mode::Both, 64, LossWeights { spot: 0.0, psf: 0.0, ..w }));
    let n4 = t.run("both/4", t.aware(Mode::Both, 4, w));
    let n16 = t.run("both/16", t.aware(Mode::Both, 16, w));
    let p = |r: &YieldReport| r.mean_psnr;
    let modes = p(&both) >= p(&dec) && p(&dec) >= p(&opt);
    let losses = p(&both) >= p(&spot_only).max(p(&psf_only)) && p(&spot_only).min(p(&psf_only)) >= p(&neither);
    let counts = p(&n4) <= p(&n16) && p(&n16) <= p(&both);
    let mark = |b: bool| if b { "ok" } else { "violated" };
    Outcome {
        pass: modes && losses && counts,
        detail: format!(
            "mean PSNR dB. modes: both {:.3} >= decoder-only {:.3} >= optics-only {:.3} {}; losses: spot+psf {:.3} >= spot {:.3} / psf {:.3} >= neither {:.3} {}; patterns: 4 {:.3} <= 16 {:.3} <= 64 {:.3} {}",
            p(&both),
            p(&dec),
            p(&opt),
            mark(modes),
            p(&both),
            p(&spot_only),
            p(&psf_only),
            p(&neither),
            mark(losses),
            p(&n4),
            p(&n16),
            p(&both),
            mark(counts)
        ),
    }
}

// 8 ------------------------------------------------------------------------

/// Smallest sample value whose empirical CDF reaches `1 - pct/100`, found by
/// counting rather than by rank arithmetic.
fn independent_threshold(values: &[f64], pct: u32) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    *v.iter()
        .find(|x| v.iter().filter(|y| y <= x).count() * 100 >= (100 - pct as usize) * n)
        .unwrap_or(&v[n - 1])
}

fn yield_mechanics(reports: &[(String, YieldReport)]) -> Outcome {
    let mut own = Vec::new();
    let reports: Vec<&YieldReport> = if reports.is_empty() {
        let lens = fixtures::cooke();
        let eval = EvalSettings {
            image_size: 32,
            grid: 2,
            render: RenderSettings {
                kernel: 31,
                pitch_um: 5.0,
                pupil_samples: 8,
            },
            noise_sigma: 0.01,
        };
        let dec = DecoderParams::identity(2, 5);
        own.push(monte_carlo_eval(&lens, &dec, &ToleranceRange::default(), 40, &corpus(32), 3, &eval).unwrap());
        own.iter().collect()
    } else {
        reports.iter().map(|(_, r)| r).collect()
    };
    let t0 = Instant::now();
    let mut exact = true;
    let mut ordered = true;
    for r in &reports {
        let dumped = parse_samples_csv(&samples_csv(&r.samples)).unwrap();
        let again = thresholds(&dumped);
        let psnrs: Vec<f64> = dumped.iter().map(|s| s.psnr).collect();
        for (a, b) in again.iter().zip(&r.thresholds) {
            exact &= a == b && a.psnr.to_bits() == independent_threshold(&psnrs, a.confidence_pct).to_bits();
        }
        ordered &= r.thresholds.windows(2).all(|w| w[0].psnr <= w[1].psnr)
            && r.thresholds.iter().map(|t| t.confidence_pct).collect::<Vec<_>>() == [90, 70, 50, 10];
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: exact && ordered && secs < 1.0,
        detail: format!(
            "{} runs: thresholds {} independent recomputation from dumped samples, Y0(90) <= Y0(70) <= Y0(50) <= Y0(10) {}; {secs:.3} s (bound 1 s)",
            reports.len(),
            if exact { "equal" } else { "DIFFER from" },
            if ordered { "holds" } else { "VIOLATED" }
        ),
    }
}

// 9 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_tolopt");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let image = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join("coins.pgm");
    let small = ["--grid", "2", "--kernel", "51", "--pupil", "6"];
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("trace", vec!["trace", "--lens", "cooke", "--perturb", "--seed", "3", "--pupil", "8"].into_iter().map(String::from).collect()),
        ("spot", ["spot", "--lens", "lens2", "--pupil", "8"].map(String::from).to_vec()),
        ("psf", [&["psf", "--lens", "cooke", "--perturb", "--seed", "4"][..], &small].concat().into_iter().map(String::from).collect()),
        ("render", [&["render", "--lens", "cooke", "--size", "32", "--image", image.to_str().unwrap()][..], &small].concat().into_iter().map(String::from).collect()),
        ("sample", ["sample", "--lens", "lens1", "--count", "5", "--seed", "8"].map(String::from).to_vec()),
        ("gradcheck", [&["gradcheck", "--lens", "cooke", "--size", "16"][..], &small].concat().into_iter().map(String::from).collect()),
        ("optimize", [&["optimize", "--lens", "cooke", "--stage", "tolerance-aware", "--patterns", "3", "--iters", "3", "--size", "16", "--checkpoint-every", "1"][..], &small].concat().into_iter().map(String::from).collect()),
        ("evaluate", [&["evaluate", "--lens", "cooke", "--trials", "4", "--size", "32"][..], &small].concat().into_iter().map(String::from).collect()),
    ];
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut replay = |name: &str, args: Vec<String>| {
        let out = d.join(name);
        let ok = Command::new(bin).args(&args).arg("--out").arg(&out).output().unwrap().status.success();
        if !ok {
            failures.push(format!("{name} failed"));
            return;
        }
        let again = d.join(format!("{name}-replay"));
        let st = Command::new(bin)
            .args(["replay", "--manifest"])
            .arg(out.join("manifest.json"))
            .arg("--out")
            .arg(&again)
            .output()
            .unwrap();
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        for a in m["artifacts"].as_array().unwrap() {
            let p = a["path"].as_str().unwrap();
            if p.ends_with(".csv") || p.ends_with(".json") {
                checked += 1;
                if std::fs::read(out.join(p)).ok() != std::fs::read(again.join(p)).ok() {
                    failures.push(format!("{name}/{p}"));
                }
            }
        }
        if !st.status.success() {
            failures.push(format!("{name} replay exit {:?}", st.status.code()));
        }
    };
    for (name, args) in runs {
        replay(name, args);
    }
    let ev = d.join("evaluate");
    replay("yield", vec!["yield".into(), "--samples".into(), ev.join("samples.csv").to_string_lossy().into()]);
    replay("report", vec!["report".into(), "--runs".into(), ev.to_string_lossy().into()]);

    // split/resume
    let common: Vec<&str> = [&["optimize", "--lens", "cooke", "--stage", "tolerance-aware", "--patterns", "3", "--size", "16", "--seed", "5"][..], &small].concat();
    let train = |extra: &[&str], out: &Path| {
        Command::new(bin).args(&common).args(extra).arg("--out").arg(out).output().unwrap().status.success()
    };
    let ck = d.join("part").join("checkpoint.json");
    let ok = train(&["--iters", "4"], &d.join("whole"))
        && train(&["--iters", "1"], &d.join("part"))
        && train(&["--iters", "3", "--resume", ck.to_str().unwrap()], &d.join("rest"));
    let history_equal = ok
        && std::fs::read(d.join("whole").join("loss.csv")).unwrap() == std::fs::read(d.join("rest").join("loss.csv")).unwrap();
    if !history_equal {
        failures.push("split/resume loss history".into());
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "10 subcommands replayed from their manifests, {checked} CSV/JSON artifacts compared byte for byte; 1+3 vs 4 iteration resume {}{}",
            if history_equal { "identical" } else { "DIFFERS" },
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    }
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let limits = [60.0, 120.0, 10.0, 30.0, 60.0, 1800.0, 3600.0, 1.0, f64::INFINITY];
    let names = [
        "transform equivalence",
        "gradient suite",
        "sampler statistics",
        "PSF normalisation and similarity",
        "spot precision",
        "end-to-end direction",
        "ablation directions",
        "yield mechanics",
        "determinism",
    ];
    let mut training: Option<Training> = None;
    let mut failed = 0;
    let mut report = |n: u32, secs: f64, o: Outcome| {
        let limit = limits[n as usize - 1];
        let in_time = secs < limit;
        let pass = o.pass && in_time;
        failed += usize::from(!pass);
        let time = if limit.is_finite() {
            format!("{secs:.1} s (limit {limit:.0} s{})", if in_time { "" } else { ", EXCEEDED" })
        } else {
            format!("{secs:.1} s")
        };
        println!("{} {n}. {}: {} [{time}]", if pass { "PASS" } else { "FAIL" }, names[n as usize - 1], o.detail);
    };
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        (t0.elapsed().as_secs_f64(), o)
    };
    let plain: [(u32, fn() -> Outcome); 5] = [
        (1, transform_equivalence),
        (2, gradient_suite),
        (3, sampler_statistics),
        (4, psf_normalisation),
        (5, spot_precision),
    ];
    for (n, f) in plain {
        if on(n) {
            let (s, o) = timed(&mut || f());
            report(n, s, o);
        }
    }
    if on(6) || on(7) {
        let t0 = Instant::now();
        let mut t = Training::new();
        let setup = t0.elapsed().as_secs_f64();
        if on(6) {
            let (s, o) = timed(&mut || end_to_end(&mut t));
            report(6, s + setup, o);
        }
        if on(7) {
            let (s, o) = timed(&mut || ablations(&mut t));
            report(7, s + setup, o);
        }
        for (label, secs) in &t.seconds_per_run {
            println!("     {label}: {secs:.0} s");
        }
        training = Some(t);
    }
    if on(8) {
        let reports = training.as_ref().map(|t| t.reports.clone()).unwrap_or_default();
        let (s, o) = timed(&mut || yield_mechanics(&reports));
        report(8, s, o);
    }
    if on(9) {
        let (s, o) = timed(&mut || determinism());
        report(9, s, o);
    }
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
