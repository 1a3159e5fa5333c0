use std::fs;
use std::path::{Path, PathBuf};

use super::gradcheck::{run_suite, Suite};
use super::{overlay, Checkpoint, CliError, RunConfig, PALETTE};
use crate::attention::bench::{self, BenchRow, BenchSettings};
use crate::boundary::LabelMap;
use crate::data::{load_ppm, save_pgm, save_ppm, Dataset, Split};
use crate::model::{SampledPoint, Unept};
use crate::numerics::{GradcheckReport, ParamStore, Tensor};
use crate::training::{evaluate, predicted_labels, EvalReport, StepRecord, Trainer};

pub const METRICS_HEADER: &str = "step,total,coarse,refined,boundary,direction,lr,val_miou,val_pix_acc";
pub const SAMPLE_POINTS_HEADER: &str = "head,level,y,x,weight";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ept";
/// Width of the boundary band scored by `eval`.
pub const EVAL_BAND: f64 = 2.0;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// The configured dataset directory, or the scene spec generated in memory.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let data = match &cfg.dataset {
        Some(dir) => Dataset::read(dir)?,
        None => Dataset::generate(&cfg.scene)?,
    };
    if data.spec.classes != cfg.model.classes {
        return Err(CliError::Config(format!("dataset has {} classes, model {}", data.spec.classes, cfg.model.classes)));
    }
    Ok(data)
}

/// Network with parameters restored from `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Unept, ParamStore, Checkpoint), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, mut store) = Unept::init(cfg.model.clone(), cfg.seed)?;
    ckpt.load_params(&mut store)?;
    Ok((model, store, ckpt))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<StepRecord>,
    pub final_eval: Option<EvalReport>,
}

fn csv_row(r: &StepRecord, eval: Option<&EvalReport>) -> String {
    let (miou, pix) = match eval {
        Some(e) => (e.raw.overall.miou.to_string(), e.raw.overall.pix_acc.to_string()),
        None => (String::new(), String::new()),
    };
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step, r.total, r.coarse, r.refined, r.boundary, r.direction, r.lr, miou, pix
    )
}

/// Trains from a fresh initialization or from `resume`, writing
/// `config.txt`, `metrics.csv`, optional numbered checkpoints and the final
/// `checkpoint.ept` into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.txt"), cfg.to_text())?;
    let data = load_dataset(cfg)?;
    let (model, mut store) = Unept::init(cfg.model.clone(), cfg.seed)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.load_params(&mut store)?;
            let state = ckpt.optimizer_state(&store)?;
            Trainer::resume(model, store, state, cfg.train_settings())?
        }
        None => Trainer::new(model, store, cfg.train_settings())?,
    };
    let metrics_path = cfg.out.join("metrics.csv");
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut records = Vec::new();
    let mut final_eval = None;
    while !trainer.is_done() {
        let record = trainer.train_step(&data.train)?;
        let done = record.step + 1;
        let due = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps;
        let eval = if due && !data.val.is_empty() {
            Some(evaluate(trainer.model(), trainer.store(), &data.val, false, EVAL_BAND)?)
        } else {
            None
        };
        csv.push_str(&csv_row(&record, eval.as_ref()));
        csv.push('\n');
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let path = cfg.out.join(format!("checkpoint-{done:06}.ept"));
            Checkpoint::from_training(trainer.store(), trainer.state())?.save(&path)?;
        }
        if eval.is_some() {
            final_eval = eval;
        }
        records.push(record);
    }
    write_file(&metrics_path, &csv)?;
    let checkpoint = cfg.out.join(FINAL_CHECKPOINT);
    Checkpoint::from_training(trainer.store(), trainer.state())?.save(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, metrics: metrics_path, records, final_eval })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, refine: bool) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let (model, store, _) = load_model(cfg, checkpoint)?;
    Ok(evaluate(&model, &store, data.split(split), refine, EVAL_BAND)?)
}

/// Plain-text table of an evaluation report.
pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::from("pipeline,region,miou,pix_acc\n");
    let mut rows = vec![("raw", &report.raw)];
    if let Some(r) = &report.refined {
        rows.push(("refined", r));
    }
    for (name, scores) in rows {
        for (region, m) in [("overall", &scores.overall), ("band", &scores.band)] {
            s.push_str(&format!("{name},{region},{:.6},{:.6}\n", m.miou, m.pix_acc));
        }
    }
    s
}

#[derive(Debug)]
pub struct InferOutcome {
    pub prediction: PathBuf,
    pub overlay: PathBuf,
    pub sample_points: Option<PathBuf>,
    pub points: Vec<SampledPoint>,
}

/// Colour per pyramid scale in the sampled-point image.
const LEVEL_COLORS: [[u8; 3]; 3] = [[255, 48, 48], [48, 255, 48], [64, 128, 255]];

fn points_image(image: &Tensor, query: (usize, usize), points: &[SampledPoint]) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = Tensor::from_fn(image.shape(), |i| 0.4 * image.data()[i]);
    let d = out.data_mut();
    let mut paint = |y: usize, x: usize, rgb: [u8; 3]| {
        for (c, v) in rgb.iter().enumerate() {
            d[c * plane + y * w + x] = *v as f64 / 255.0;
        }
    };
    for p in points {
        let (y, x) = (p.y.round(), p.x.round());
        if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
            paint(y as usize, x as usize, LEVEL_COLORS[p.level % LEVEL_COLORS.len()]);
        }
    }
    paint(query.0, query.1, [255, 255, 255]);
    out
}

/// Writes `prediction.pgm` and `overlay.ppm`; with `viz` also
/// `sample_points.ppm` and `sample_points.csv` for that query pixel.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    refine: bool,
    viz: Option<(usize, usize)>,
) -> Result<InferOutcome, CliError> {
    cfg.validate()?;
    let image = load_ppm(image_path)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(CliError::Contract(format!("image is {h}×{w}; both sides must be multiples of 32")));
    }
    let (model, store, _) = load_model(cfg, checkpoint)?;
    let pred = model.predict(&store, &image)?;
    let labels: LabelMap = predicted_labels(&pred, refine)?;
    create_dir(&cfg.out)?;
    let prediction = cfg.out.join("prediction.pgm");
    save_pgm(&prediction, &labels)?;
    let overlay_path = cfg.out.join("overlay.ppm");
    save_ppm(&overlay_path, &overlay(&image, &labels, &PALETTE)?)?;
    let (sample_points, points) = match viz {
        Some((y, x)) => {
            let points = model.sample_points(&store, &image, y, x)?;
            let path = cfg.out.join("sample_points.ppm");
            save_ppm(&path, &points_image(&image, (y, x), &points))?;
            let mut csv = format!("{SAMPLE_POINTS_HEADER}\n");
            for p in &points {
                csv.push_str(&format!("{},{},{},{},{}\n", p.head, p.level, p.y, p.x, p.weight));
            }
            write_file(&cfg.out.join("sample_points.csv"), csv)?;
            (Some(path), points)
        }
        None => (None, Vec::new()),
    };
    Ok(InferOutcome { prediction, overlay: overlay_path, sample_points, points })
}

/// Runs the requested suites; fails when any group reaches the tolerance.
pub fn cmd_gradcheck(suites: &[Suite], seed: u64, out: &mut dyn std::io::Write) -> Result<Vec<(Suite, GradcheckReport)>, CliError> {
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for &suite in suites {
        let report = run_suite(suite, seed)?;
        for g in &report.groups {
            let verdict = if g.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
            writeln!(out, "{:<10} {:<40} {:>6} {:.3e} {verdict}", suite.name(), g.name, g.scalars, g.max_rel_error)
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            if verdict == "FAIL" {
                failed.push(g.name.clone());
            }
        }
        reports.push((suite, report));
    }
    if !failed.is_empty() {
        return Err(CliError::GradcheckFailed(failed.join(", ")));
    }
    Ok(reports)
}

pub fn cmd_bench_attention(settings: &BenchSettings, sizes: &[usize]) -> Result<Vec<BenchRow>, CliError> {
    if sizes.is_empty() || sizes.windows(2).any(|p| p[0] >= p[1]) {
        return Err(CliError::Usage(format!("sizes {sizes:?} must be non-empty and strictly ascending")));
    }
    Ok(bench::run(settings, sizes)?)
}

/// Generates the configured scenes and writes them, with cached boundary
/// and direction maps, to `cfg.out`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    cfg.validate()?;
    let data = Dataset::generate(&cfg.scene)?;
    data.write(&cfg.out, true)?;
    Ok(data)
}
