use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevssl::bev::bev_pool;
use bevssl::contrast::AlignMode;
use bevssl::encoder::{self, EncodeOptions, EncoderParams};
use bevssl::gradcheck;
use bevssl::io_kitti::{self, PairingMode, Timing};
use bevssl::synthbench::{self, BenchSpec};
use bevssl::trainer::{self, TrainConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bevssl", version, about = "Self-supervised BEV contrastive pretraining for lidar scans")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List scan pairs selected from a pose file.
    Pairs(PairsArgs),
    /// Encode one scan and dump its BEV grid as CSV.
    Pool(PoolArgs),
    /// Pretrain an encoder on a KITTI-style dataset.
    Pretrain(PretrainArgs),
    /// Compare probe accuracy of a checkpoint against a random init.
    Probe(ProbeArgs),
    /// Check the end-to-end gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic KITTI-style dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    poses: PathBuf,
    /// Per-scan timestamps; without it scans are assumed `--rate` Hz apart.
    #[arg(long)]
    times: Option<PathBuf>,
    /// Camera-to-lidar calibration (`Tr:` line).
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Pair scans at least this many seconds apart.
    #[arg(long, conflicts_with = "dd", required_unless_present = "dd")]
    dt: Option<f64>,
    /// Pair scans at least this many meters apart.
    #[arg(long)]
    dd: Option<f64>,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    scan: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    cell_size: f64,
    #[arg(long, default_value_t = 512)]
    grid: usize,
    #[arg(long)]
    center_input: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    knobs: Knobs,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Knobs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, conflicts_with = "dd")]
    dt: Option<f64>,
    #[arg(long)]
    dd: Option<f64>,
    #[arg(long)]
    cell_size: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
    /// bilinear2d, nearest2d or exact3d.
    #[arg(long)]
    align: Option<AlignMode>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Knobs {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag {
                    cfg.$field = v;
                }
            };
        }
        set!(lr => lr_max);
        set!(weight_decay => weight_decay);
        set!(epochs => epochs);
        set!(batch_size => batch_size);
        set!(cell_size => cell_size);
        set!(grid => grid_size);
        set!(tau => tau);
        set!(n_samples => n_samples);
        set!(align => align_mode);
        set!(seed => seed);
        if let Some(seconds) = self.dt {
            cfg.pairing = PairingMode::ByTime { seconds };
        }
        if let Some(meters) = self.dd {
            cfg.pairing = PairingMode::ByDist { meters };
        }
    }
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    /// Seed of the random-init baseline encoder.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long)]
    center_input: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check only this alignment mode.
    #[arg(long)]
    align: Option<AlignMode>,
    /// Central-difference step.
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    objects: Option<usize>,
    /// Number of scans (poses).
    #[arg(long)]
    poses: Option<usize>,
    /// Points per scan.
    #[arg(long)]
    points: Option<usize>,
}

enum Failure {
    Usage(String),
    Run(String),
}

fn run_err<E: Display>(e: E) -> Failure {
    Failure::Run(e.to_string())
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such directory: {}", path.display())))
    }
}

fn header<W: Write>(w: &mut W, items: &[(&str, String)]) -> io::Result<()> {
    for (k, v) in items {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::Run(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(bytes).map_err(run_err),
    }
}

fn pairs(args: PairsArgs) -> Result<(), Failure> {
    require_file(&args.poses)?;
    for p in args.times.iter().chain(&args.calib) {
        require_file(p)?;
    }
    let timing = match &args.times {
        Some(t) => Timing::File(t.clone()),
        None => Timing::Rate(args.rate),
    };
    let mode = match (args.dt, args.dd) {
        (Some(seconds), _) => PairingMode::ByTime { seconds },
        (None, Some(meters)) => PairingMode::ByDist { meters },
        (None, None) => return Err(Failure::Usage("one of --dt or --dd is required".into())),
    };
    let track = io_kitti::load_poses(&args.poses, args.calib.as_deref(), &timing).map_err(run_err)?;
    let selected = io_kitti::select_pairs(&track, mode).map_err(run_err)?;
    let mut buf = Vec::new();
    let mut items = vec![("poses", args.poses.display().to_string())];
    match mode {
        PairingMode::ByTime { seconds } => items.push(("dt", seconds.to_string())),
        PairingMode::ByDist { meters } => items.push(("dd", meters.to_string())),
    }
    if args.times.is_none() {
        items.push(("rate", args.rate.to_string()));
    }
    header(&mut buf, &items).map_err(run_err)?;
    writeln!(buf, "index_a,index_b,gap").map_err(run_err)?;
    for p in &selected {
        writeln!(buf, "{},{},{}", p.index_a, p.index_b, p.gap).map_err(run_err)?;
    }
    write_output(args.out.as_deref(), &buf)
}

fn pool(args: PoolArgs) -> Result<(), Failure> {
    require_file(&args.scan)?;
    require_file(&args.ckpt)?;
    let cloud = io_kitti::load_scan(&args.scan).map_err(run_err)?;
    let (params, _) = encoder::load_checkpoint(&args.ckpt).map_err(run_err)?;
    let mut tape = bevssl::autodiff::Tape::new();
    let bound = params.bind(&mut tape).map_err(run_err)?;
    let feats = encoder::encode(&cloud, &bound, &mut tape, EncodeOptions { center_input: args.center_input }).map_err(run_err)?;
    let grid = bev_pool(feats, &cloud, args.cell_size, args.grid, &mut tape).map_err(run_err)?;
    let mut buf = Vec::new();
    header(
        &mut buf,
        &[
            ("scan", args.scan.display().to_string()),
            ("cell_size", args.cell_size.to_string()),
            ("grid", args.grid.to_string()),
            ("center_input", args.center_input.to_string()),
            ("dropped", grid.dropped().to_string()),
        ],
    )
    .map_err(run_err)?;
    grid.write_csv(&mut buf).map_err(run_err)?;
    write_output(Some(&args.out), &buf)
}

fn pretrain(args: PretrainArgs) -> Result<(), Failure> {
    require_dir(&args.data)?;
    let mut cfg = match &args.config {
        Some(path) => {
            require_file(path)?;
            let text = fs::read_to_string(path).map_err(run_err)?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(r) = &args.resume {
        require_file(r)?;
    }
    args.knobs.apply(&mut cfg);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let summary = trainer::run_pretrain_dir(&cfg, &args.data, &args.out, args.resume.as_deref()).map_err(run_err)?;
    let last = summary.records.iter().rev().find(|r| r.loss.is_finite());
    println!("pairs={} steps={}", summary.n_pairs, summary.records.len());
    if let (Some(first), Some(last)) = (summary.records.first(), last) {
        println!("first_loss={} last_loss={}", first.loss, last.loss);
    }
    println!("checkpoint={}", summary.final_checkpoint.display());
    println!("metrics={}", summary.metrics.display());
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<(), Failure> {
    require_file(&args.ckpt)?;
    let (params, _) = encoder::load_checkpoint(&args.ckpt).map_err(run_err)?;
    let baseline = EncoderParams::init(args.init_seed, params.hidden(), params.dim()).map_err(run_err)?;
    let spec = BenchSpec::default();
    let options = EncodeOptions { center_input: args.center_input };
    let trained = synthbench::probe_scene(&params, args.scene_seed, &spec, options).map_err(run_err)?;
    let random = synthbench::probe_scene(&baseline, args.scene_seed, &spec, options).map_err(run_err)?;
    println!("# scene_seed={}", args.scene_seed);
    println!("# init_seed={}", args.init_seed);
    println!("pretrained_accuracy={trained:.4}");
    println!("random_init_accuracy={random:.4}");
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<bool, Failure> {
    if !(args.step > 0.0 && args.step.is_finite()) {
        return Err(Failure::Usage(format!("--step must be positive, got {}", args.step)));
    }
    let modes: Vec<AlignMode> = match args.align {
        Some(m) => vec![m],
        None => AlignMode::ALL.to_vec(),
    };
    println!("# seed={}", args.seed);
    println!("# step={:e}", args.step);
    let mut worst = 0.0f64;
    for mode in modes {
        let r = gradcheck::gradient_check(args.seed, mode, args.step).map_err(run_err)?;
        println!("{} params={} loss={:.6} max_rel_error={:e}", mode.name(), r.n_params, r.loss, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!("max_rel_error={worst:e}");
    Ok(worst < gradcheck::TOLERANCE)
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let mut spec = BenchSpec::default();
    if let Some(n) = args.objects {
        spec.n_objects = n;
    }
    if let Some(n) = args.poses {
        spec.traj_len = n;
    }
    if let Some(n) = args.points {
        spec.render.n_points = n;
    }
    let (scene, scans) = synthbench::synth_dataset(args.seed, &spec).map_err(|e| Failure::Usage(e.to_string()))?;
    synthbench::export_sequence(&args.out, &scene, &scans).map_err(run_err)?;
    synthbench::export_labels(&args.out, &scans).map_err(run_err)?;
    println!("scans={} objects={} out={}", scans.len(), scene.objects.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pairs(a) => pairs(a),
        Command::Pool(a) => pool(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => match gradcheck_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check above tolerance {:e}", gradcheck::TOLERANCE);
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
