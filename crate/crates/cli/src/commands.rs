//! The four commands. Each returns structured results; `main` only formats them.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use qdiff::checkpoint::{load_batch, save_batch, Checkpoint, CheckpointMeta};
use qdiff::data::{normalize, write_png_grid, ImageBatch, Normalization};
use qdiff::diffusion::{reverse_sample, train_step, Denoiser, NoiseSchedule, Trainer};
use qdiff::metrics::{
    fid_like, set_ssim, ExtractorKind, FeatureExtractor, MetricRecord, EXTRACTOR_NOTE,
    SSIM_REFERENCES,
};
use qdiff::optim::AdamConfig;
use qdiff::rng::{stream, Stream};
use qdiff::unet::{BottleneckKind, UNet, UNetConfig};

use crate::config::{RunConfig, BEST_CHECKPOINT_CRITERION};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("I/O error on {}: {e}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("JSON values always serialise");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Columns for a roughly square grid of `n` tiles.
fn grid_cols(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

fn model_from(
    config: UNetConfig,
    params: qdiff::ParamSet,
    workers: usize,
) -> Result<UNet, CliError> {
    let mut model = UNet::from_params(config, params)?;
    model.workers = workers;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Mean loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
    /// Epoch of the retained checkpoint (0 when nothing was trained).
    pub best_epoch: usize,
    pub training_images: usize,
}

#[derive(Serialize)]
struct EpochRecord<'a> {
    epoch: usize,
    mean_loss: f64,
    wall_time: f64,
    batch_losses: &'a [f64],
    batch_order: Vec<&'a [usize]>,
}

/// Train one model and keep the checkpoint with the lowest epoch-mean loss.
///
/// Writes `config.json`, `train_log.jsonl`, one EMA sample grid per epoch and `best.ckpt`
/// under the run directory. With `epochs = 0` the initial model is saved as the checkpoint.
pub fn train(config: &RunConfig) -> Result<TrainOutcome, CliError> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.resolve_paths()?;
    let run_dir = cfg.run_dir();
    create_dir(&run_dir)?;
    write_json(
        &run_dir.join(CONFIG_FILE),
        &json!({
            "command": "train",
            "run_id": cfg.run_id(),
            "config": cfg,
            "best_checkpoint_criterion": BEST_CHECKPOINT_CRITERION,
            "reproducibility": "bit-reproducible from this config at workers = 1",
        }),
    )?;

    let train_set = normalize(&cfg.load_class()?, Normalization::Signed)?;
    let unet_cfg = cfg.unet_config();
    let mut model = UNet::new(unet_cfg, cfg.seed)?;
    model.workers = cfg.workers;
    let sched = NoiseSchedule::new(cfg.schedule())?;
    let mut trainer = Trainer::new(model, AdamConfig::with_lr(cfg.lr), cfg.ema_beta)?;

    let checkpoint = run_dir.join(BEST_CHECKPOINT);
    let save = |trainer: &Trainer<UNet>, epoch: usize, mean_loss: Option<f64>| {
        Checkpoint {
            meta: CheckpointMeta {
                model: unet_cfg,
                schedule: cfg.schedule(),
                seed: cfg.seed,
                epoch,
                mean_loss,
                ema_decay: cfg.ema_beta,
            },
            params: trainer.model.params().clone(),
            ema: trainer.ema.params().clone(),
        }
        .save(&checkpoint)
    };
    if cfg.epochs == 0 {
        save(&trainer, 0, None)?;
    }

    let log_path = run_dir.join(TRAIN_LOG);
    let mut log = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut batch_rng = stream(cfg.seed, Stream::Batching);
    let mut noise_rng = stream(cfg.seed, Stream::Noise);
    let mut sample_rng = stream(cfg.seed, Stream::Sampling);
    let n = train_set.len();
    let start = Instant::now();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut batch_rng);
        let mut batch_losses = Vec::new();
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.select(chunk)?;
            let loss = train_step(&mut trainer, &batch, &sched, &mut noise_rng)?;
            weighted += loss * chunk.len() as f64;
            batch_losses.push(loss);
        }
        let mean_loss = weighted / n as f64;
        epoch_losses.push(mean_loss);

        if cfg.grid_samples > 0 {
            let ema_model = model_from(unet_cfg, trainer.ema.params().clone(), cfg.workers)?;
            let samples = reverse_sample(&ema_model, &sched, cfg.grid_samples, &mut sample_rng)?;
            let png = run_dir.join(format!("samples_epoch{epoch:03}.png"));
            write_png_grid(&samples, grid_cols(cfg.grid_samples), &png)?;
        }

        if best.is_none_or(|(_, l)| mean_loss < l) {
            best = Some((epoch, mean_loss));
            save(&trainer, epoch, Some(mean_loss))?;
        }

        let record = EpochRecord {
            epoch,
            mean_loss,
            wall_time: start.elapsed().as_secs_f64(),
            batch_losses: &batch_losses,
            batch_order: order.chunks(cfg.batch_size).collect(),
        };
        let line = serde_json::to_string(&record).expect("records serialise");
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?;
        eprintln!(
            "[{}] epoch {epoch}/{}: mean loss {mean_loss:.6} ({:.1} s)",
            cfg.run_id(),
            cfg.epochs,
            record.wall_time
        );
    }

    Ok(TrainOutcome {
        run_dir,
        checkpoint,
        epoch_losses,
        best_epoch: best.map_or(0, |(e, _)| e),
        training_images: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub png: PathBuf,
    pub dump: PathBuf,
    pub samples: ImageBatch,
}

/// Draw `n` samples from the EMA weights of a checkpoint. Writes a PNG grid and a raw f64
/// dump (in `[−1, 1]`) to `out_dir`, or beside the checkpoint.
pub fn sample(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<SampleOutcome, CliError> {
    if n == 0 {
        return Err(CliError::Usage("number of samples must be ≥ 1".into()));
    }
    if workers == 0 {
        return Err(CliError::Usage("workers must be ≥ 1".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = model_from(ck.meta.model, ck.ema, workers)?;
    let sched = NoiseSchedule::new(ck.meta.schedule)?;
    let mut rng = stream(seed, Stream::Sampling);
    let samples = reverse_sample(&model, &sched, n, &mut rng)?;

    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    create_dir(&dir)?;
    let stem = format!("samples-seed{seed}-n{n}");
    let png = dir.join(format!("{stem}.png"));
    let dump = dir.join(format!("{stem}.qdt"));
    write_png_grid(&samples, grid_cols(n), &png)?;
    let variant = match ck.meta.model.bottleneck {
        BottleneckKind::Classical => "classical".to_owned(),
        BottleneckKind::Quantum => format!("quantum-{}", ck.meta.model.circuit.ansatz),
    };
    save_batch(
        &samples,
        json!({
            "variant": variant,
            "seed": seed,
            "checkpoint": checkpoint.display().to_string(),
            "checkpoint_epoch": ck.meta.epoch,
            "model": ck.meta.model,
            "schedule": ck.meta.schedule,
        }),
        &dump,
    )?;
    Ok(SampleOutcome { png, dump, samples })
}

/// `set_ssim` and `fid_like` of a sample dump against every image of the configured class
/// (`max_train_images` is ignored for the reference set).
pub fn evaluate(
    generated: &Path,
    reference_cfg: &RunConfig,
    extractor: ExtractorKind,
    seed: u64,
) -> Result<Vec<MetricRecord>, CliError> {
    let (gen, info) = load_batch(generated)?;
    let mut cfg = reference_cfg.clone();
    cfg.max_train_images = None;
    let reference = cfg.load_class()?;
    evaluate_batches(&gen, &reference, &cfg, info_variant(&info), extractor, seed)
}

fn info_variant(info: &serde_json::Value) -> String {
    info.get("variant")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown")
        .to_owned()
}

fn evaluate_batches(
    generated: &ImageBatch,
    reference: &ImageBatch,
    cfg: &RunConfig,
    variant: String,
    extractor: ExtractorKind,
    seed: u64,
) -> Result<Vec<MetricRecord>, CliError> {
    let fx = FeatureExtractor::new(extractor, seed);
    let record = |metric: &str, value: f64, extractor: Option<ExtractorKind>| MetricRecord {
        metric: metric.into(),
        dataset: cfg.dataset.to_string(),
        class: cfg.class_label,
        model_variant: variant.clone(),
        value,
        seed,
        extractor,
    };
    Ok(vec![
        record("set_ssim", set_ssim(generated, reference, seed)?, None),
        record(
            "fid_like",
            fid_like(generated, reference, &fx)?,
            Some(extractor),
        ),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub variant: String,
    pub ssim: f64,
    pub fid_like: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub run_dir: PathBuf,
    pub rows: Vec<CompareRow>,
    /// Rendered table with its footer.
    pub table: String,
    pub records: Vec<MetricRecord>,
}

/// Train, sample and evaluate the classical and quantum variants of `base` under the same
/// seed and data, and tabulate SSIM and fid_like.
pub fn compare(base: &RunConfig) -> Result<CompareReport, CliError> {
    base.validate()?;
    let mut base = base.clone();
    base.resolve_paths()?;
    let id = base.run_id.clone().unwrap_or_else(|| {
        format!(
            "compare-{}-class{}-seed{}",
            base.dataset, base.class_label, base.seed
        )
    });
    let run_dir = base.output_dir.join(&id);
    create_dir(&run_dir)?;
    write_json(
        &run_dir.join(CONFIG_FILE),
        &json!({
            "command": "compare",
            "run_id": id,
            "config": base,
            "best_checkpoint_criterion": BEST_CHECKPOINT_CRITERION,
        }),
    )?;

    let mut reference_cfg = base.clone();
    reference_cfg.max_train_images = None;
    let reference = reference_cfg.load_class()?;

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut training_images = 0;
    for kind in [BottleneckKind::Classical, BottleneckKind::Quantum] {
        let mut cfg = base.clone();
        cfg.model = kind;
        cfg.output_dir = run_dir.clone();
        cfg.run_id = Some(cfg.variant_name());
        let trained = train(&cfg)?;
        training_images = trained.training_images;
        let drawn = sample(
            &trained.checkpoint,
            cfg.eval_samples,
            cfg.seed,
            None,
            cfg.workers,
        )?;
        let recs = evaluate_batches(
            &drawn.samples,
            &reference,
            &reference_cfg,
            cfg.variant_name(),
            cfg.extractor,
            cfg.seed,
        )?;
        let metric = |name: &str| {
            recs.iter()
                .find(|r| r.metric == name)
                .map(|r| r.value)
                .expect("emitted")
        };
        rows.push(CompareRow {
            variant: cfg.variant_name(),
            ssim: metric("set_ssim"),
            fid_like: metric("fid_like"),
            epoch_losses: trained.epoch_losses,
        });
        records.extend(recs);
    }

    let table = render_table(&base, &rows, training_images, reference.len());
    let table_path = run_dir.join("compare.md");
    fs::write(&table_path, &table).map_err(|e| io_err(&table_path, e))?;
    let jsonl_path = run_dir.join("compare.jsonl");
    let lines: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    fs::write(&jsonl_path, lines).map_err(|e| io_err(&jsonl_path, e))?;
    Ok(CompareReport {
        run_dir,
        rows,
        table,
        records,
    })
}

fn render_table(
    cfg: &RunConfig,
    rows: &[CompareRow],
    training_images: usize,
    reference_images: usize,
) -> String {
    let mut s = String::new();
    s.push_str(
        "Comparison of SSIM and fid_like between classical and quantum diffusion models\n\n",
    );
    s.push_str("| variant | SSIM | fid_like |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.6} | {:.6} |\n",
            r.variant, r.ssim, r.fid_like
        ));
    }
    s.push('\n');
    s.push_str(&format!(
        "Setup: dataset {}, class {}, {} training images, {} epochs, batch {}, lr {}, T = {}, s = {}, \
EMA {}, seed {}, {} EMA samples per variant, reference set {} images.\n",
        cfg.dataset,
        cfg.class_label,
        training_images,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        cfg.steps,
        cfg.offset,
        cfg.ema_beta,
        cfg.seed,
        cfg.eval_samples,
        reference_images,
    ));
    s.push_str(&format!(
        "SSIM: global-statistics SSIM on [0, 1] pixels, each sample against up to {SSIM_REFERENCES} \
seeded reference images, averaged.\n"
    ));
    s.push_str(&format!(
        "fid_like: Fréchet distance with the {} extractor (D = {}). {EXTRACTOR_NOTE}.\n",
        cfg.extractor,
        qdiff::metrics::FEATURE_DIM
    ));
    if let [c, q] = rows {
        let dir = |better: bool| if better { "better" } else { "not better" };
        s.push_str(&format!(
            "Observed gap (quantum vs classical, reported, not asserted): SSIM {:+.6} ({}), fid_like {:+.6} ({}).\n",
            q.ssim - c.ssim,
            dir(q.ssim > c.ssim),
            q.fid_like - c.fid_like,
            dir(q.fid_like < c.fid_like),
        ));
    }
    s
}
