use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use openstereo::metrics::{compute_metrics_with, MetricSet};
use openstereo::online_adapt::{configure_ablation, run_sequence, EngineConfig, SequenceReport};
use openstereo::stereo_io::{
    frame_path, gen_rds_sequence, gen_textured_sequence, read_pfm, read_sequence, split_ground_truth,
    write_frame, write_image_pnm, write_pfm, DisparityField, FrameFile, RdsConfig, Regime, StereoFrame, TextureFamily,
    TexturedConfig,
};
use openstereo::{Error, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "openstereo", version, about = "Online self-supervised stereo video matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic stereo sequence with ground truth.
    Generate(GenerateArgs),
    /// Run online adaptation over a sequence directory.
    Run(RunArgs),
    /// Score predicted disparities against ground truth.
    Eval(EvalArgs),
    /// Run all four ablation variants and compare their loss curves.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Rds,
    Textured,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Constant scene disparity in pixels.
    #[arg(long, default_value_t = 4)]
    disparity: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Disparity range recorded for `run` (default: twice the disparity).
    #[arg(long)]
    dmax: Option<usize>,
    /// RDS dot density.
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    /// Textured only: frame at which the rendering regime switches.
    #[arg(long)]
    switch_at: Option<usize>,
    /// Textured only: brightness scale after the switch.
    #[arg(long, default_value_t = 0.6)]
    switch_brightness: f64,
    /// Textured only: texture family after the switch.
    #[arg(long, value_enum, default_value_t = Family::Grain)]
    switch_texture: Family,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Family {
    Blobs,
    Grain,
}

impl From<Family> for TextureFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Blobs => TextureFamily::Blobs,
            Family::Grain => TextureFamily::Grain,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Disparity range D (default: from the manifest).
    #[arg(long)]
    dmax: Option<usize>,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
    ablation: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write predictions every k frames.
    #[arg(long)]
    dump_every: Option<usize>,
    /// Directory for dumps (default: `<seq>/pred`).
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    /// Per-frame loss and metric CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `{frame}_pred.pfm` (or `{frame}_disp.pfm`) files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of `{frame}_disp.pfm` ground truth.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bad-pixel threshold in pixels.
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long)]
    dmax: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Command failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
            Failure::Data(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::NonFinite(m)) => Failure::Numeric(m.clone()),
            Some(Error::InvalidConfig(m)) => Failure::Usage(m.clone()),
            _ => Failure::Data(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

/// Written next to generated frames; `run` reads the disparity range from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: usize,
    pub max_disparity: usize,
    pub generator: Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Rds { config: RdsConfig },
    Textured { config: TexturedConfig, schedule: Vec<Regime> },
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<Option<Manifest>> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(manifest))
}

pub fn execute(cli: Cli, invocation: &str) -> CmdResult<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Run(a) => run(&a, invocation),
        Command::Eval(a) => eval(&a, invocation),
        Command::Ablate(a) => ablate(&a, invocation),
    }
}

fn generate(a: &GenerateArgs) -> CmdResult<()> {
    if a.out.is_dir() && !a.force {
        let mut entries = fs::read_dir(&a.out).map_err(|e| Failure::Data(e.into()))?;
        if entries.next().is_some() {
            return Err(Failure::Usage(format!(
                "{} is not empty; pass --force to write into it",
                a.out.display()
            )));
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let disparity = DisparityField::Constant {
        value: a.disparity as f64,
    };
    let max_disparity = a.dmax.unwrap_or((2 * a.disparity).max(1));
    let (generator, frames): (Generator, Vec<StereoFrame>) = match a.kind {
        Kind::Rds => {
            let config = RdsConfig {
                height: a.height,
                width: a.width,
                disparity,
                density: a.density,
                seed: a.seed,
                fractional: false,
            };
            let frames = gen_rds_sequence(config.clone(), a.frames)?.collect();
            (Generator::Rds { config }, frames)
        }
        Kind::Textured => {
            let config = TexturedConfig {
                height: a.height,
                width: a.width,
                disparity,
                seed: a.seed,
                pan: 0.0,
                fractional: false,
            };
            let schedule = match a.switch_at {
                Some(k) if k < a.frames => {
                    let mut after = Regime::neutral(k, a.frames);
                    after.brightness = a.switch_brightness;
                    after.texture = a.switch_texture.into();
                    vec![Regime::neutral(0, k), after]
                }
                Some(k) => return Err(Failure::Usage(format!("--switch-at {k} is not below --frames {}", a.frames))),
                None => Vec::new(),
            };
            let frames = gen_textured_sequence(config.clone(), a.frames, schedule.clone())?.collect();
            (Generator::Textured { config, schedule }, frames)
        }
    };
    for (i, frame) in frames.iter().enumerate() {
        write_frame(&a.out, i, frame)?;
    }
    let manifest = Manifest {
        frames: a.frames,
        max_disparity,
        generator,
    };
    let json = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
    fs::write(a.out.join(MANIFEST), json + "\n").context("writing manifest")?;
    Ok(())
}

fn resolve_dmax(seq: &Path, flag: Option<usize>) -> CmdResult<usize> {
    if let Some(d) = flag {
        return Ok(d);
    }
    match read_manifest(seq)? {
        Some(m) => Ok(m.max_disparity),
        None => Err(Failure::Usage(format!(
            "--dmax is required when {} has no {MANIFEST}",
            seq.display()
        ))),
    }
}

fn load(seq: &Path) -> CmdResult<Vec<StereoFrame>> {
    Ok(read_sequence(seq).with_context(|| format!("loading sequence {}", seq.display()))?)
}

fn engine_config(frames: &[StereoFrame], dmax: usize, lr: f64, seed: u64, ablation: u8) -> CmdResult<EngineConfig> {
    let first = &frames[0];
    let mut config = EngineConfig::new(first.height(), first.width(), dmax);
    config.learning_rate = lr;
    config.seed = seed;
    config.ablation = configure_ablation(ablation)?;
    config.validate()?;
    Ok(config)
}

/// Log-space grayscale preview of a disparity map over `[0, dmax]`.
pub fn preview(disparity: &Tensor, dmax: usize) -> Tensor {
    let top = (1.0 + dmax as f64).ln();
    let s = disparity.shape();
    Tensor::new(
        &[s[0], s[1], 1],
        disparity.data().iter().map(|d| (1.0 + d.max(0.0)).ln() / top).collect(),
    )
    .expect("same element count")
}

fn pred_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("{frame:06}_pred.pfm"))
}

fn write_curve(report: &SequenceReport, path: &Path, invocation: &str) -> CmdResult<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    report
        .write_csv(std::io::BufWriter::new(file), Some(invocation))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(a: &RunArgs, invocation: &str) -> CmdResult<()> {
    let dmax = resolve_dmax(&a.seq, a.dmax)?;
    let frames = load(&a.seq)?;
    let config = engine_config(&frames, dmax, a.lr, a.seed, a.ablation)?;
    let dump_dir = a.dump_dir.clone().unwrap_or_else(|| a.seq.join("pred"));
    if a.dump_every == Some(0) {
        return Err(Failure::Usage("--dump-every must be >= 1".into()));
    }
    if a.dump_every.is_some() {
        fs::create_dir_all(&dump_dir).with_context(|| format!("creating {}", dump_dir.display()))?;
    }
    let mut dump_error = None;
    let report = run_sequence(frames, config, |r| {
        let Some(k) = a.dump_every else { return };
        if r.index % k != 0 || dump_error.is_some() {
            return;
        }
        let result = write_pfm(r.disparity, pred_path(&dump_dir, r.index))
            .and_then(|_| write_image_pnm(&preview(r.disparity, dmax), dump_dir.join(format!("{:06}_pred.pgm", r.index))));
        if let Err(e) = result {
            dump_error = Some(e);
        }
    })?;
    if let Some(e) = dump_error {
        return Err(e.into());
    }
    if let Some(curve) = &a.curve {
        write_curve(&report, curve, invocation)?;
    }
    if report.rows.last().is_some_and(|r| !r.loss.total.is_finite()) {
        return Err(Failure::Numeric("loss is still non-finite at the last frame".into()));
    }
    Ok(())
}

fn prediction_files(dir: &Path) -> Vec<PathBuf> {
    (0..)
        .map_while(|i| {
            let pred = pred_path(dir, i);
            if pred.is_file() {
                return Some(pred);
            }
            let disp = frame_path(dir, i, FrameFile::Disparity);
            disp.is_file().then_some(disp)
        })
        .collect()
}

fn eval(a: &EvalArgs, invocation: &str) -> CmdResult<()> {
    let preds = prediction_files(&a.pred);
    let gt_count = (0..).take_while(|&i| frame_path(&a.gt, i, FrameFile::Disparity).is_file()).count();
    if preds.is_empty() || preds.len() != gt_count {
        return Err(Failure::Data(anyhow::anyhow!(
            "frame-count mismatch: {} predictions in {}, {} ground-truth maps in {}",
            preds.len(),
            a.pred.display(),
            gt_count,
            a.gt.display()
        )));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (i, pred_file) in preds.iter().enumerate() {
        let gt_file = frame_path(&a.gt, i, FrameFile::Disparity);
        let (gt, valid) = split_ground_truth(&read_pfm(&gt_file)?);
        let pred = read_pfm(pred_file)?;
        let m = compute_metrics_with(&pred, &gt, &valid, a.threshold)
            .with_context(|| format!("scoring {}", pred_file.display()))?;
        rows.push(m);
    }
    let mean = MetricSet::mean(&rows).expect("at least one frame");
    let mut text = format!("# {invocation}\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame"];
    header.extend(MetricSet::COLUMNS);
    let record = |label: String, m: &MetricSet| {
        let mut r = vec![label];
        r.extend(m.values().iter().map(f64::to_string));
        r
    };
    let write = |w: &mut csv::Writer<Vec<u8>>, rec: Vec<String>| w.write_record(rec).context("writing CSV");
    w.write_record(&header).context("writing CSV")?;
    for (i, m) in rows.iter().enumerate() {
        write(&mut w, record(i.to_string(), m))?;
    }
    write(&mut w, record("mean".into(), &mean))?;
    text.push_str(&String::from_utf8(w.into_inner().context("writing CSV")?).expect("CSV is UTF-8"));
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Loss curves of each variant minus the type-1 curve; entry 0 is zero.
pub fn relative_to_baseline(curves: &[Vec<f64>]) -> Vec<Vec<f64>> {
    curves
        .iter()
        .map(|c| c.iter().zip(&curves[0]).map(|(x, b)| x - b).collect())
        .collect()
}

fn thread_pool() -> anyhow::Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("OPENSTEREO_THREADS") {
        let n: usize = v.parse().with_context(|| format!("OPENSTEREO_THREADS={v:?} is not a count"))?;
        builder = builder.num_threads(n.max(1));
    }
    Ok(builder.build()?)
}

fn ablate(a: &AblateArgs, invocation: &str) -> CmdResult<()> {
    let dmax = resolve_dmax(&a.seq, a.dmax)?;
    let frames = load(&a.seq)?;
    let configs = (1..=4u8)
        .map(|k| engine_config(&frames, dmax, a.lr, a.seed, k))
        .collect::<CmdResult<Vec<_>>>()?;
    let pool = thread_pool().map_err(|e| Failure::Usage(format!("{e:#}")))?;
    let curves = pool.install(|| {
        configs
            .into_par_iter()
            .map(|c| run_sequence(frames.clone(), c, |_| {}).map(|r| r.loss_curve()))
            .collect::<openstereo::Result<Vec<_>>>()
    })?;
    let relative = relative_to_baseline(&curves);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "frame", "loss_type1", "loss_type2", "loss_type3", "loss_type4", "rel_type2", "rel_type3", "rel_type4",
    ])
    .context("writing CSV")?;
    for i in 0..frames.len() {
        let mut rec = vec![i.to_string()];
        rec.extend(curves.iter().map(|c| c[i].to_string()));
        rec.extend(relative[1..].iter().map(|c| c[i].to_string()));
        w.write_record(rec).context("writing CSV")?;
    }
    let body = String::from_utf8(w.into_inner().context("writing CSV")?).expect("CSV is UTF-8");
    fs::write(&a.out, format!("# {invocation}\n{body}")).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
