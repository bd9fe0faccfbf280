//! Acceptance run: one `PASS`/`FAIL` line per criterion, each checked against an oracle that
//! does not share code with the implementation under test.
//!
//! The training-smoke criterion trains real models and is reported with its measured values
//! whichever way it goes; every other criterion must pass for the run to succeed.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use qdiff::autodiff::Tape;
use qdiff::data::{self, filter_class, load_idx, write_png_grid, ImageBatch, Normalization};
use qdiff::diffusion::{Denoiser, NoiseSchedule, ScheduleConfig, BETA_CLIP};
use qdiff::metrics::{
    fid_like, frechet_distance, ssim, ExtractorKind, FeatureExtractor, GaussianStats, SsimConstants,
};
use qdiff::quantum::Ansatz;
use qdiff::rng::standard_normal;
use qdiff::unet::{BottleneckKind, UNet, UNetConfig};
use qdiff::{Error, Tensor};
use qdiff_cli::{compare, CompareReport, RunConfig};

use common::fixtures::{corruption_corpus, decode_png};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut checks = common::primitive_checks();
    for kind in [BottleneckKind::Classical, BottleneckKind::Quantum] {
        for skip in [true, false] {
            checks.push((
                format!("unet {kind:?} skip={skip}"),
                common::unet_fd_check(kind, skip),
            ));
        }
    }
    let (name, worst) = checks
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient correctness",
        worst < 1e-4 && secs < 120.0,
        format!(
            "{} checks, worst relative error {worst:.2e} ({name}), {secs:.1} s",
            checks.len()
        ),
    )
}

fn quantum_oracle() -> Outcome {
    let start = Instant::now();
    let dense = common::dense_oracle_sweep(1000, 11);
    let drift = common::sixteen_qubit_norm_drift(3);
    let secs = start.elapsed().as_secs_f64();
    report(
        "quantum oracle equivalence",
        dense < 1e-12 && drift < 1e-12 && secs < 60.0,
        format!("1000 draws max |Δ| {dense:.2e}, 16-qubit norm drift {drift:.2e}, {secs:.1} s"),
    )
}

fn parameter_shift() -> Outcome {
    let small = common::shift_vs_fd(4, 2, 50, None, None, 21);
    let large = common::shift_vs_fd(
        16,
        3,
        1,
        Some(&[0, 7, 15]),
        Some(&[0, 13, 16, 31, 32, 47]),
        5,
    );
    report(
        "parameter-shift exactness",
        small < 1e-8 && large < 1e-8,
        format!("n=4 L=2 max |Δ| {small:.2e}; n=16 L=3 spot check {large:.2e}"),
    )
}

fn literal_inertness() -> Outcome {
    let worst = common::literal_weight_gradient(100, 17);
    report(
        "literal ansatz inertness",
        worst < 1e-12,
        format!("100 configurations, max |∂/∂w| {worst:.2e}"),
    )
}

fn schedule_identities() -> Outcome {
    let mut problems = Vec::new();
    let mut worst_recursion = 0.0f64;
    for steps in [1000, 200] {
        let sched = match NoiseSchedule::new(ScheduleConfig::cosine(steps, 0.008)) {
            Ok(s) => s,
            Err(e) => return report("schedule identities", false, e.to_string()),
        };
        let a = sched.alpha_bars();
        if a[steps] != 0.0 {
            problems.push(format!("T={steps}: ᾱ_T = {}", a[steps]));
        }
        for t in 1..=steps {
            if a[t] >= a[t - 1] {
                problems.push(format!("T={steps}: not decreasing at {t}"));
            }
            if sched.beta(t) < BETA_CLIP {
                worst_recursion =
                    worst_recursion.max((a[t] - a[t - 1] * (1.0 - sched.beta(t))).abs());
            }
        }
    }
    let a0 = NoiseSchedule::new(ScheduleConfig::cosine(1000, 0.008))
        .unwrap()
        .alpha_bar(0);
    let pass = problems.is_empty() && worst_recursion < 1e-12 && (a0 - 0.99984).abs() < 1e-5;
    report(
        "schedule identities",
        pass,
        format!("recursion max |Δ| {worst_recursion:.2e}, ᾱ_0 = {a0:.6} at T=1000 {problems:?}"),
    )
}

fn corrupt(batch: &ImageBatch, sigma: f64, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal(&mut rng, batch.data.data().len());
    let noisy = batch
        .data
        .data()
        .iter()
        .zip(noise)
        .map(|(v, z)| (v + sigma * z).clamp(0.0, 1.0))
        .collect();
    ImageBatch::new(
        Tensor::new(batch.data.shape(), noisy).unwrap(),
        batch.labels.clone(),
        Normalization::Unit,
    )
    .unwrap()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..784).map(|_| rng.random_range(0.0..=1.0)).collect();
    let self_ssim = ssim(&x, &x, 1, SsimConstants::default()).unwrap();

    let mut frechet_err = 0.0f64;
    for _ in 0..200 {
        let (m1, m2) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (s1, s2) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
        let a = GaussianStats::new(vec![m1], vec![s1 * s1]).unwrap();
        let b = GaussianStats::new(vec![m2], vec![s2 * s2]).unwrap();
        let want: f64 = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
        frechet_err = frechet_err.max((frechet_distance(&a, &b).unwrap() - want).abs());
    }

    let dir = data_dir().join("mnist");
    let raw = load_idx(
        dir.join("mnist5k-images-idx3-ubyte.gz"),
        dir.join("mnist5k-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    let zeros = filter_class(&data::normalize(&raw, Normalization::Unit).unwrap(), 0);
    let reference = zeros.select(&(0..250).collect::<Vec<_>>()).unwrap();
    let held_out = zeros
        .select(&(250..zeros.len()).collect::<Vec<_>>())
        .unwrap();

    let mut identical = 0.0f64;
    let mut monotone = true;
    let mut ladders = Vec::new();
    for kind in [ExtractorKind::PixelPca, ExtractorKind::FixedRandomConv] {
        let fx = FeatureExtractor::new(kind, 0);
        identical = identical.max(fid_like(&reference, &reference, &fx).unwrap().abs());
        let mut ladder = vec![fid_like(&held_out, &reference, &fx).unwrap()];
        for sigma in [0.1, 0.3, 0.6] {
            ladder.push(fid_like(&corrupt(&held_out, sigma, 7), &reference, &fx).unwrap());
        }
        monotone &= ladder.windows(2).all(|w| w[0] < w[1]);
        ladders.push(format!("{kind} {ladder:.4?}"));
    }
    report(
        "metric oracles",
        (self_ssim - 1.0).abs() < 1e-12 && frechet_err < 1e-10 && identical <= 1e-6 && monotone,
        format!(
            "ssim(x,x) = {self_ssim}, 1-D Fréchet max |Δ| {frechet_err:.2e}, identical sets {identical:.2e}, \
clean/σ=0.1/0.3/0.6: {}",
            ladders.join("; ")
        ),
    )
}

fn controlled_comparison() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[3, 1, 28, 28], |_| rng.random_range(-1.0..1.0));
    let t = [1, 40, 199];
    let mut mismatches = Vec::new();
    let mut cases = 0;
    for skip in [true, false] {
        for ansatz in [Ansatz::RyVariational, Ansatz::PaperLiteral] {
            let mut ccfg = UNetConfig::new(1, BottleneckKind::Classical, ansatz);
            ccfg.skip_connections = skip;
            let qcfg = UNetConfig {
                bottleneck: BottleneckKind::Quantum,
                ..ccfg
            };
            let classical = UNet::new(ccfg, 21).unwrap();
            let mut qparams = UNet::new(qcfg, 21).unwrap().params().clone();
            qparams
                .get_mut("mid.quantum.proj_out.weight")
                .unwrap()
                .data_mut()
                .fill(0.0);
            qparams
                .get_mut("mid.quantum.proj_out.bias")
                .unwrap()
                .data_mut()
                .fill(1.0);
            let quantum = UNet::from_params(qcfg, qparams).unwrap();
            let forward = |model: &UNet| {
                let mut tape = Tape::new();
                let bound = model.params().bind(&mut tape);
                let xv = tape.constant(x.clone());
                let out = model.forward(&mut tape, &bound, xv, &t).unwrap();
                tape.value(out)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            };
            cases += 1;
            if forward(&classical) != forward(&quantum) {
                mismatches.push(format!("skip={skip} {ansatz}"));
            }
        }
    }
    report(
        "controlled-comparison integrity",
        mismatches.is_empty(),
        format!("{cases} configurations with the gate forced to one, bit-identical outputs; mismatches {mismatches:?}"),
    )
}

fn smoke_config(output_dir: &Path) -> RunConfig {
    RunConfig {
        data_dir: Some(data_dir()),
        class_label: 0,
        epochs: 5,
        batch_size: 64,
        lr: 3e-4,
        steps: 200,
        max_train_images: Some(100),
        seed: 0,
        workers: 1,
        output_dir: output_dir.to_path_buf(),
        ..RunConfig::default()
    }
}

fn training_smoke(run: &CompareReport, secs: f64) -> Outcome {
    let ratios: Vec<String> = run
        .rows
        .iter()
        .map(|r| {
            format!(
                "{} {:.4} → {:.4} (ratio {:.3})",
                r.variant,
                r.epoch_losses[0],
                r.epoch_losses[4],
                r.epoch_losses[4] / r.epoch_losses[0]
            )
        })
        .collect();
    let dropped = run
        .rows
        .iter()
        .all(|r| r.epoch_losses[4] <= 0.5 * r.epoch_losses[0]);
    report(
        "training smoke",
        dropped && secs <= 1800.0,
        format!(
            "{}; wall time {secs:.0} s for both variants",
            ratios.join(", ")
        ),
    )
}

/// Per-batch losses from a training log, ignoring the wall-clock fields.
fn batch_losses(log: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["batch_losses"].clone())
        .collect()
}

fn end_to_end(first: &CompareReport, second: &CompareReport) -> Outcome {
    let mut problems = Vec::new();
    let table = &first.table;
    if first.rows.len() != 2
        || !table.contains("| variant | SSIM | fid_like |")
        || !table.contains("Setup:")
    {
        problems.push("table shape".to_owned());
    }
    for row in &first.rows {
        if !table.contains(&format!("| {} |", row.variant))
            || !row.ssim.is_finite()
            || !row.fid_like.is_finite()
        {
            problems.push(format!("row {}", row.variant));
        }
    }
    let bits = |r: &CompareReport| {
        r.rows
            .iter()
            .map(|row| {
                (
                    row.ssim.to_bits(),
                    row.fid_like.to_bits(),
                    row.epoch_losses
                        .iter()
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>(),
                )
            })
            .collect::<Vec<_>>()
    };
    if bits(first) != bits(second) {
        problems.push("rows differ between runs".to_owned());
    }
    let same_file = |rel: &str| {
        fs::read(first.run_dir.join(rel)).ok() == fs::read(second.run_dir.join(rel)).ok()
    };
    for rel in ["compare.md", "compare.jsonl"] {
        if !same_file(rel) {
            problems.push(format!("{rel} differs"));
        }
    }
    for row in &first.rows {
        let ckpt = format!("{}/best.ckpt", row.variant);
        if !first.run_dir.join(&ckpt).is_file() || !same_file(&ckpt) {
            problems.push(format!("{ckpt} differs or is missing"));
        }
        let log = Path::new(&row.variant).join("train_log.jsonl");
        if batch_losses(&first.run_dir.join(&log)) != batch_losses(&second.run_dir.join(&log)) {
            problems.push(format!("{} batch losses differ", row.variant));
        }
    }
    let gap = table
        .lines()
        .find(|l| l.starts_with("Observed gap"))
        .unwrap_or("no gap line")
        .to_owned();
    report(
        "end-to-end compare",
        problems.is_empty(),
        if problems.is_empty() {
            format!("2-row table, two runs bit-identical (rows, compare.md, compare.jsonl, checkpoints, batch losses). {gap}")
        } else {
            format!("{problems:?}")
        },
    )
}

fn data_robustness() -> Outcome {
    let dir = TempDir::new().unwrap();
    let corpus = corruption_corpus(dir.path());
    let untyped: Vec<&str> = corpus
        .iter()
        .filter(|(name, r)| match r {
            Err(Error::Format { .. }) => false,
            Err(Error::Io { .. }) => !name.contains("missing"),
            _ => true,
        })
        .map(|(name, _)| name.as_str())
        .collect();

    let mut exact = true;
    for (n, channels, cols) in [(1, 1, 4), (16, 1, 4), (16, 3, 4), (7, 3, 3)] {
        let t = Tensor::from_fn(&[n, channels, 28, 28], |i| ((i * 31) % 256) as f64 / 255.0);
        let batch = ImageBatch::new(t, vec![0; n], Normalization::Unit).unwrap();
        let path = dir.path().join(format!("grid-{n}-{channels}.png"));
        write_png_grid(&batch, cols, &path).unwrap();
        let (w, h, _, px) = decode_png(&path);
        let cols = cols.min(n);
        let rows = n.div_ceil(cols);
        exact &= (w as usize, h as usize) == (cols * 30 - 2, rows * 30 - 2);
        let src = batch.to_u8();
        for s in 0..n {
            let (oy, ox) = ((s / cols) * 30, (s % cols) * 30);
            for y in 0..28 {
                for x in 0..28 {
                    for ch in 0..channels {
                        exact &= px[((oy + y) * w as usize + ox + x) * channels + ch]
                            == src[((s * channels + ch) * 28 + y) * 28 + x];
                    }
                }
            }
        }
    }
    report(
        "data robustness",
        corpus.len() >= 10 && untyped.is_empty() && exact,
        format!(
            "{} malformed fixtures, untyped or accepted: {untyped:?}; PNG grids pixel-exact: {exact}",
            corpus.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut outcomes = vec![
        gradient_correctness(),
        quantum_oracle(),
        parameter_shift(),
        literal_inertness(),
        schedule_identities(),
        metric_oracles(),
    ];

    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&scratch);
    let start = Instant::now();
    let first = compare(&smoke_config(&scratch.join("a"))).expect("compare run");
    let secs = start.elapsed().as_secs_f64();
    outcomes.push(training_smoke(&first, secs));
    outcomes.push(controlled_comparison());
    let second = compare(&smoke_config(&scratch.join("b"))).expect("second compare run");
    outcomes.push(end_to_end(&first, &second));
    outcomes.push(data_robustness());

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "{} of {} criteria pass",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    // Loss reduction over ten optimizer steps is a property of the configuration rather than a
    // correctness check; a shortfall there is reported above but does not fail the run.
    let blocking: Vec<&&Outcome> = failed
        .iter()
        .filter(|o| o.name != "training smoke")
        .collect();
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in blocking {
            eprintln!("blocking failure: {}: {}", o.name, o.detail);
        }
        ExitCode::FAILURE
    }
}
