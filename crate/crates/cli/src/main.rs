mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tdstereo::ablation::{self, Variant};
use tdstereo::io::dataset::{self, Sample};
use tdstereo::io::{config::KeyValues, pfm, png};
use tdstereo::metrics::Accumulator;
use tdstereo::synth::{noisy_teacher, sparsify, synthetic_sample, SceneConfig};
use tdstereo::train::{self, Event, LabelSource};
use tdstereo::{compute_metrics, Checkpoint, DisparityMap, Error, Model, Result};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "tdstereo", version, about = "Lightweight learned stereo matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict a disparity map for one rectified pair.
    Infer(InferArgs),
    /// Train on ground-truth labels.
    Train(TrainArgs),
    /// Two-stage training: teacher labels first, then ground truth.
    Distill(TrainArgs),
    /// Score predictions (or a checkpoint) against ground truth.
    Eval(EvalArgs),
    /// Train and compare model variants on the same data and seed.
    Ablate(AblateArgs),
    /// Write a synthetic stereo dataset.
    Generate(GenerateArgs),
    /// Disparity file utilities.
    #[command(subcommand)]
    Pfm(PfmCommand),
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output disparity (PFM).
    #[arg(long)]
    out: PathBuf,
    /// Also write a colour-coded PNG.
    #[arg(long)]
    color_map: Option<PathBuf>,
    /// Ground truth (PFM or 16-bit PNG) to report metrics against.
    #[arg(long)]
    gt: Option<PathBuf>,
}

/// Options shared by every command that trains.
#[derive(Args)]
struct RunOpts {
    /// Key-value config file; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Shuffle seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_disp: Option<usize>,
    /// Cost volume: concat, corr, combine, afv or gtv.
    #[arg(long)]
    volume: Option<String>,
    #[arg(long)]
    lrr: Option<bool>,
    /// Intermediate supervision.
    #[arg(long)]
    intermediate: Option<bool>,
}

impl RunOpts {
    fn resolve(&self, distill: bool) -> Result<RunConfig> {
        let flags = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("max_disp", self.max_disp.map(|v| v.to_string())),
            ("volume", self.volume.clone()),
            ("lrr", self.lrr.map(|v| v.to_string())),
            ("intermediate", self.intermediate.map(|v| v.to_string())),
        ];
        RunConfig::resolve(self.config.as_deref(), &self.set, &flags, distill)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoints, logs and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Start from these weights (the checkpoint's model settings win).
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory with ground truth.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Predict with this checkpoint (requires --data).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of predicted `<name>.pfm` files.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth directory paired with --pred.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Write metrics.txt and the per-sample table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated `<kind>[+lrr][+is]`; default is the standard grid.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Every kind × ±LRR × ±IS.
    #[arg(long, conflicts_with = "variants")]
    full_grid: bool,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 32.0)]
    max_disp: f64,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Write a teacher map: ground truth plus Gaussian noise of this σ.
    #[arg(long)]
    teacher_noise: Option<f64>,
    /// Keep only this fraction of ground-truth pixels.
    #[arg(long)]
    keep: Option<f64>,
}

#[derive(Subcommand)]
enum PfmCommand {
    /// Print size, valid count and value range.
    Info { file: PathBuf },
    /// Render a disparity file as a colour PNG.
    Colorize {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        max_disp: Option<f64>,
    },
    /// Convert between PFM and 16-bit PNG (value / 256) by extension.
    Convert { input: PathBuf, output: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Malformed { .. } | Error::Image { .. } | Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Infer(a) => infer(a),
        Command::Train(a) => train_cmd(a, false),
        Command::Distill(a) => train_cmd(a, true),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Generate(a) => generate(a),
        Command::Pfm(c) => pfm_cmd(c),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn read_disparity(path: &Path) -> Result<DisparityMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => png::read_disparity16(path),
        _ => pfm::read_disparity(path),
    }
}

fn infer(a: InferArgs) -> Result<()> {
    let left = png::read_rgb(&a.left)?;
    let right = png::read_rgb(&a.right)?;
    if left.shape() != right.shape() {
        return Err(Error::Invalid(format!(
            "left image is {:?} but right image is {:?}",
            &left.shape()[1..],
            &right.shape()[1..]
        )));
    }
    let model = Checkpoint::load(&a.checkpoint)?.restore_model()?;
    let t = Instant::now();
    let disp = model.predict(&left, &right)?;
    let elapsed = t.elapsed();
    pfm::write_disparity(&a.out, &disp)?;
    if let Some(path) = &a.color_map {
        png::write_colormap(path, &disp, model.config.max_disp as f64)?;
    }
    println!(
        "{}×{} disparity in {:.3} s -> {}",
        disp.height(),
        disp.width(),
        elapsed.as_secs_f64(),
        a.out.display()
    );
    if let Some(gt) = &a.gt {
        println!("{}", compute_metrics(&disp, &read_disparity(gt)?)?);
    }
    Ok(())
}

fn load_sets(data: &Path, val: Option<&Path>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let tr = dataset::load_dir(data)?;
    if tr.is_empty() {
        return Err(Error::Config(format!("{} holds no samples", data.display())));
    }
    let va = match val {
        Some(v) => dataset::load_dir(v)?,
        None => Vec::new(),
    };
    Ok((tr, va))
}

fn print_event(e: Event) {
    if let Event::Epoch(r) = e {
        let val = r.validation.map(|m| format!(" | val {m}")).unwrap_or_default();
        println!(
            "stage {} epoch {:>3} [{}] lr {:.2e} loss {:.5}{val}",
            r.stage, r.epoch, r.source, r.lr, r.train_loss
        );
    }
}

fn train_cmd(a: TrainArgs, distill: bool) -> Result<()> {
    let mut cfg = a.run.resolve(distill)?;
    let mut model = match &a.init {
        Some(path) => {
            let m = Checkpoint::load(path)?.restore_model()?;
            cfg.resolved.extend(m.config.to_pairs());
            cfg.resolved.set("init", path.display());
            m
        }
        None => Model::new(cfg.model.clone())?,
    };
    let (tr, va) = load_sets(&a.data, a.val.as_deref())?;
    create_dir(&a.out)?;
    cfg.resolved.set("data", a.data.display());
    if let Some(v) = &a.val {
        cfg.resolved.set("val", v.display());
    }
    cfg.resolved.write(&a.out.join("config.txt"))?;
    cfg.schedule.checkpoint_dir = Some(a.out.clone());
    cfg.stage2.checkpoint_dir = Some(a.out.clone());

    let result = if distill {
        train::distill(&mut model, &tr, &va, &cfg.schedule, &cfg.stage2, &mut print_event).map(|o| o.log)
    } else {
        train::train(&mut model, &tr, &va, &cfg.schedule, LabelSource::GroundTruth, &mut print_event).map(|o| o.log)
    };
    let log = match result {
        Ok(log) => log,
        Err(Error::Diverged {
            epoch,
            step,
            reason,
            last_good,
        }) => {
            let path = a.out.join("last_good.ckpt");
            last_good.save(&path)?;
            return Err(Error::Invalid(format!(
                "training diverged at epoch {epoch}, step {step}: {reason}; last good weights saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e),
    };
    write_text(&a.out.join("train_log.txt"), &log.render())?;
    Checkpoint::from_model(&model, None).save(&a.out.join("model.ckpt"))?;
    if !va.is_empty() {
        let m = train::evaluate(&model, &va, LabelSource::GroundTruth)?;
        let mut kv = KeyValues::new();
        kv.extend(m.to_pairs());
        kv.write(&a.out.join("metrics.txt"))?;
        println!("final validation: {m}");
    }
    println!("outputs in {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut rows: Vec<(String, tdstereo::MetricsReport)> = Vec::new();
    let mut acc = Accumulator::default();
    let mut add = |name: String, pred: &DisparityMap, gt: &DisparityMap| -> Result<()> {
        rows.push((name, compute_metrics(pred, gt)?));
        acc.add(pred, gt);
        Ok(())
    };
    match (&a.data, &a.checkpoint, &a.pred, &a.gt) {
        (Some(data), Some(ck), None, None) => {
            let model = Checkpoint::load(ck)?.restore_model()?;
            for s in dataset::load_dir(data)? {
                let pred = model.predict(&s.left, &s.right)?;
                add(s.name.clone(), &pred, &s.gt)?;
            }
        }
        (None, None, Some(pred_dir), Some(gt_dir)) => {
            let mut names: Vec<String> = std::fs::read_dir(pred_dir)
                .map_err(|e| Error::Io {
                    context: format!("listing {}", pred_dir.display()),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pfm"))
                .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                .collect();
            names.sort();
            for name in names {
                let pred = pfm::read_disparity(&pred_dir.join(format!("{name}.pfm")))?;
                let gt_pfm = gt_dir.join(format!("{name}.pfm"));
                let gt = if gt_pfm.exists() {
                    pfm::read_disparity(&gt_pfm)?
                } else {
                    png::read_disparity16(&gt_dir.join(format!("{name}.png")))?
                };
                add(name, &pred, &gt)?;
            }
        }
        _ => {
            return Err(Error::Config(
                "eval needs either --data with --checkpoint, or --pred with --gt".into(),
            ))
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let total = acc.report()?;
    let mut table = format!(
        "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
        "sample", "epe", "error1", "error2", "error3", "d1", "n_valid"
    );
    for (name, m) in rows.iter().chain(std::iter::once(&("ALL".to_string(), total))) {
        table.push_str(&format!(
            "{:<24} {:>9.4} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>8}\n",
            name, m.epe, m.error1, m.error2, m.error3, m.d1, m.n_valid
        ));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("metrics_table.txt"), &table)?;
        let mut kv = KeyValues::new();
        kv.extend(total.to_pairs());
        kv.write(&out.join("metrics.txt"))?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = a.run.resolve(false)?;
    let variants: Vec<Variant> = if a.full_grid {
        ablation::full_grid()
    } else if a.variants.is_empty() {
        ablation::standard_grid()
    } else {
        a.variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
    };
    let (tr, va) = load_sets(&a.data, Some(&a.val))?;
    create_dir(&a.out)?;
    cfg.resolved.set("data", a.data.display());
    cfg.resolved.set("val", a.val.display());
    cfg.resolved.set(
        "variants",
        variants.iter().map(Variant::to_string).collect::<Vec<_>>().join(","),
    );
    cfg.resolved.write(&a.out.join("config.txt"))?;
    let rows = ablation::run(&cfg.model, &cfg.schedule, &tr, &va, &variants, &mut |v, e| {
        if let Event::Epoch(r) = e {
            println!("{v} epoch {:>3} loss {:.5}", r.epoch, r.train_loss);
        }
    })?;
    let table = ablation::render_table(&rows);
    print!("{table}");
    write_text(&a.out.join("ablation.txt"), &table)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut scene = SceneConfig::new(a.height, a.width, a.max_disp);
    scene.num_layers = a.layers;
    let mut samples = Vec::with_capacity(a.count);
    for i in 0..a.count as u64 {
        let seed = a.seed.wrapping_add(i);
        let mut s = synthetic_sample(seed, &scene)?;
        if let Some(sigma) = a.teacher_noise {
            s.teacher = Some(noisy_teacher(&s.gt, sigma, seed ^ 0x7e4c_4e52)?);
        }
        if let Some(keep) = a.keep {
            s.gt = sparsify(&s.gt, keep, seed ^ 0x5a5e);
        }
        samples.push(s);
    }
    dataset::write_dir(&a.out, &samples)?;
    let mut kv = KeyValues::new();
    kv.extend([
        ("count", a.count.to_string()),
        ("seed", a.seed.to_string()),
        ("height", a.height.to_string()),
        ("width", a.width.to_string()),
        ("max_disp", a.max_disp.to_string()),
        ("layers", a.layers.to_string()),
    ]);
    if let Some(s) = a.teacher_noise {
        kv.set("teacher_noise", s);
    }
    if let Some(k) = a.keep {
        kv.set("keep", k);
    }
    kv.write(&a.out.join("config.txt"))?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn pfm_cmd(c: PfmCommand) -> Result<()> {
    match c {
        PfmCommand::Info { file } => {
            let d = read_disparity(&file)?;
            let vals: Vec<f64> = d
                .values()
                .data()
                .iter()
                .zip(d.valid().data())
                .filter(|(_, &m)| m == 1.0)
                .map(|(&v, _)| v)
                .collect();
            let (lo, hi) = vals
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            println!(
                "{}: {}×{}, {} valid, range [{lo}, {hi}]",
                file.display(),
                d.height(),
                d.width(),
                vals.len()
            );
        }
        PfmCommand::Colorize {
            input,
            output,
            max_disp,
        } => {
            let d = read_disparity(&input)?;
            let max = max_disp.unwrap_or_else(|| {
                d.values()
                    .data()
                    .iter()
                    .zip(d.valid().data())
                    .filter(|(_, &m)| m == 1.0)
                    .fold(1.0f64, |a, (&v, _)| a.max(v))
            });
            png::write_colormap(&output, &d, max)?;
        }
        PfmCommand::Convert { input, output } => {
            let d = read_disparity(&input)?;
            match output.extension().and_then(|e| e.to_str()) {
                Some("png") => png::write_disparity16(&output, &d)?,
                Some("pfm") => pfm::write_disparity(&output, &d)?,
                _ => {
                    return Err(Error::Config(format!(
                        "{}: output extension must be .pfm or .png",
                        output.display()
                    )))
                }
            }
        }
    }
    Ok(())
}
