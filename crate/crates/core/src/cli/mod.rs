//! The `aftrans` command line: train, eval, sweep-lambda, visualize.

mod config;
mod render;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, PixelRect};
use crate::pipeline::{
    evaluate, infer, load_checkpoint, read_ppm, save_checkpoint, to_channels, write_ppm, EvalMetrics, Model,
    Trainer,
};
use crate::vit::{selection_count, BoxMode, Branch, FusionMode, ModelConfig};

pub use config::{DatasetSource, RunConfig, SyntheticSource};
pub use render::{draw_box, heat_map, overlay};

#[derive(Debug, Parser)]
#[command(name = "aftrans", version, about = "Attention-guided crop-and-zoom vision transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON run config; writes metrics.jsonl and model.aftk.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Accuracy under each decision rule, as JSON on stdout.
    Eval {
        #[arg(short, long)]
        model: PathBuf,
        /// Image folder, or `synthetic[:seed=S,per_class=N]`.
        #[arg(short, long)]
        dataset: String,
        #[arg(long)]
        fusion_mode: Option<FusionMode>,
        #[arg(long)]
        box_mode: Option<BoxMode>,
    },
    /// Evaluate once per selection ratio.
    SweepLambda {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        dataset: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3, 0.4, 0.5])]
        values: Vec<f64>,
        /// Also write the rows as a JSON array here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Heatmap, box overlay and a JSON report for one PPM image.
    Visualize {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        image: PathBuf,
        /// Output prefix; files are `<prefix>_heatmap.ppm`, `_box.ppm`, `_report.json`.
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        fusion_mode: Option<FusionMode>,
        #[arg(long)]
        box_mode: Option<BoxMode>,
        /// Known region `row_min,col_min,row_max,col_max` to score the box against.
        #[arg(long)]
        glyph_box: Option<String>,
    },
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Command output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train { config } => cmd_train(&config, out),
        Command::Eval {
            model,
            dataset,
            fusion_mode,
            box_mode,
        } => cmd_eval(&model, &dataset, fusion_mode, box_mode, out),
        Command::SweepLambda {
            model,
            dataset,
            values,
            json,
        } => cmd_sweep_lambda(&model, &dataset, &values, json.as_deref(), out),
        Command::Visualize {
            model,
            image,
            output,
            fusion_mode,
            box_mode,
            glyph_box,
        } => cmd_visualize(&model, &image, &output, fusion_mode, box_mode, glyph_box.as_deref(), out),
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    epochs: usize,
    checkpoint: &'a Path,
    train: EvalMetrics,
}

pub fn cmd_train(config: &Path, out: &mut dyn Write) -> Result<()> {
    let rc = RunConfig::read(config)?;
    let samples = rc.dataset.load(&rc.model)?;
    let model = Model::<f32>::init(rc.model.clone(), rc.seed)?;
    let mut trainer = Trainer::new(model, rc.train_options(), samples.len())?;

    fs::create_dir_all(&rc.output_dir)?;
    let mut metrics = BufWriter::new(File::create(rc.output_dir.join("metrics.jsonl"))?);
    trainer.fit(&samples, |m| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        Ok(())
    })?;
    let checkpoint = rc.output_dir.join("model.aftk");
    save_checkpoint(&checkpoint, &trainer.model, Some(&trainer.opt))?;
    let summary = TrainSummary {
        epochs: trainer.epoch,
        checkpoint: &checkpoint,
        train: evaluate(&trainer.model, &samples)?,
    };
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

/// Loads a checkpoint and applies proposal overrides to its config.
pub fn load_model(path: &Path, fusion_mode: Option<FusionMode>, box_mode: Option<BoxMode>) -> Result<Model<f32>> {
    let mut model = load_checkpoint::<f32>(path)?.model;
    if let Some(f) = fusion_mode {
        model.cfg.fusion_mode = f;
    }
    if let Some(b) = box_mode {
        model.cfg.box_mode = b;
    }
    model.cfg.validate()?;
    Ok(model)
}

#[derive(Serialize)]
struct EvalReport {
    fusion_mode: FusionMode,
    box_mode: BoxMode,
    lambda: f64,
    #[serde(flatten)]
    metrics: EvalMetrics,
}

pub fn cmd_eval(
    model: &Path,
    dataset: &str,
    fusion_mode: Option<FusionMode>,
    box_mode: Option<BoxMode>,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(model, fusion_mode, box_mode)?;
    let samples = DatasetSource::parse_arg(dataset)?.load(&model.cfg)?;
    let report = EvalReport {
        fusion_mode: model.cfg.fusion_mode,
        box_mode: model.cfg.box_mode,
        lambda: model.cfg.lambda_thresh,
        metrics: evaluate(&model, &samples)?,
    };
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

/// One row of the λ sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub selection_count: usize,
    pub mean_box_area: f64,
    pub acc_global: f64,
    pub acc_local: f64,
    pub acc_sum: f64,
    pub mean_iou: Option<f64>,
}

pub fn sweep_lambda(model: &Model<f32>, samples: &[crate::pipeline::Sample], values: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(bad) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(Error::config("values", format!("{bad} is outside (0, 1]")));
    }
    let n = model.cfg.num_patches(Branch::Global);
    values
        .iter()
        .map(|&lambda| {
            let mut m = model.clone();
            m.cfg.lambda_thresh = lambda;
            let e = evaluate(&m, samples)?;
            Ok(SweepRow {
                lambda,
                selection_count: selection_count(n, lambda),
                mean_box_area: e.mean_box_area,
                acc_global: e.acc_global,
                acc_local: e.acc_local,
                acc_sum: e.acc_sum,
                mean_iou: e.mean_iou,
            })
        })
        .collect()
}

pub fn cmd_sweep_lambda(
    model: &Path,
    dataset: &str,
    values: &[f64],
    json: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config("values", "needs at least one value"));
    }
    if let Some(bad) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(Error::config("values", format!("{bad} is outside (0, 1]")));
    }
    let model = load_model(model, None, None)?;
    let samples = DatasetSource::parse_arg(dataset)?.load(&model.cfg)?;
    let rows = sweep_lambda(&model, &samples, values)?;
    writeln!(
        out,
        "{:>7} {:>5} {:>10} {:>10} {:>10} {:>10} {:>8}",
        "lambda", "m", "mean_area", "acc_global", "acc_local", "acc_sum", "mean_iou"
    )?;
    for r in &rows {
        let iou = r.mean_iou.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            out,
            "{:>7.3} {:>5} {:>10.1} {:>10.4} {:>10.4} {:>10.4} {:>8}",
            r.lambda, r.selection_count, r.mean_box_area, r.acc_global, r.acc_local, r.acc_sum, iou
        )?;
    }
    if let Some(path) = json {
        fs::write(path, serde_json::to_vec_pretty(&rows)?)?;
    }
    Ok(())
}

fn parse_rect(s: &str) -> Result<PixelRect> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Input(format!("glyph box `{s}` is not four whole numbers")))?;
    match v[..] {
        [row_min, col_min, row_max, col_max] if row_min < row_max && col_min < col_max => Ok(PixelRect {
            row_min,
            col_min,
            row_max,
            col_max,
        }),
        _ => Err(Error::Input(format!("glyph box `{s}` needs row_min,col_min,row_max,col_max"))),
    }
}

#[derive(Serialize)]
struct VisualReport {
    image_size: usize,
    fusion_mode: FusionMode,
    box_mode: BoxMode,
    gates: Vec<f64>,
    #[serde(rename = "box")]
    region: PixelRect,
    selected_patches: Vec<usize>,
    component_size: usize,
    predicted: usize,
    global_logits: Vec<f64>,
    local_logits: Vec<f64>,
    glyph_iou: Option<f64>,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_visualize(
    model: &Path,
    image: &Path,
    prefix: &Path,
    fusion_mode: Option<FusionMode>,
    box_mode: Option<BoxMode>,
    glyph_box: Option<&str>,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(model, fusion_mode, box_mode)?;
    let glyph = glyph_box.map(parse_rect).transpose()?;
    let cfg: &ModelConfig = &model.cfg;
    let size = cfg.image_size_global;
    let img = bilinear_resize(&to_channels(read_ppm(image)?, cfg.channels)?, size, size)?;
    let inf = infer(&model, &img)?;

    let side = cfg.tokens_per_side(Branch::Global);
    let heat = heat_map(&inf.class_row, side, cfg.patch_size, cfg.stride, size);
    let rect = inf.region.rect();
    write_ppm(&with_suffix(prefix, "_heatmap.ppm"), &overlay(&img, &heat)?)?;
    write_ppm(&with_suffix(prefix, "_box.ppm"), &draw_box(&img, &rect, 2)?)?;
    let report = VisualReport {
        image_size: size,
        fusion_mode: cfg.fusion_mode,
        box_mode: cfg.box_mode,
        gates: inf.gates.clone(),
        region: rect,
        selected_patches: inf.region.selected_patches.clone(),
        component_size: inf.region.component_size,
        predicted: inf.predicted,
        global_logits: inf.global_logits.clone(),
        local_logits: inf.local_logits.clone(),
        glyph_iou: glyph.map(|g| rect.iou(&g)),
    };
    let report_path = with_suffix(prefix, "_report.json");
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
    writeln!(out, "{}", report_path.display())?;
    Ok(())
}
