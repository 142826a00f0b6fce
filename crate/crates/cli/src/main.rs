use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use neuroloc::data::{
    parse_pose_matrix, parse_trajectory_csv, synth_scene, write_trajectory_csv, Checkpoint, Config, Dataset,
    SceneSample,
};
use neuroloc::geometry::{GridSpec, Pose};
use neuroloc::train::{train_with, write_loss_log};
use neuroloc::{evaluate, NeuroLoc};

const TRAIN_FILE: &str = "train.csv";
const TEST_FILE: &str = "test.csv";
const CONFIG_SNAPSHOT: &str = "config.toml";
const CHECKPOINT_DIR: &str = "checkpoint";
const LOSS_LOG: &str = "loss_log.csv";
const METRICS_FILE: &str = "metrics.json";
const SALIENCY_FILE: &str = "saliency.csv";

#[derive(Parser, Debug)]
#[command(
    name = "neuroloc",
    version,
    about = "Train and evaluate the neuroloc camera pose regressor"
)]
struct Cli {
    /// Run configuration (flat TOML); defaults are used for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and write its train/test splits as CSV.
    Generate,
    /// Train on a generated (or freshly synthesized) scene.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metrics file.
    Eval(EvalArgs),
    /// Predict the pose of one sample.
    Infer(SampleArgs),
    /// Write the per-input-dimension saliency map of one sample.
    Saliency(SampleArgs),
    /// Print the grid over a bounding box.
    Gridspec(GridArgs),
    /// Convert a directory of 4x4 pose files into a trajectory CSV.
    ImportPoses(ImportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by `generate`; synthesized from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory written by `generate`; synthesized from the checkpoint config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Record wall-clock runtime in the metrics file.
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trajectory CSV holding the sample.
    #[arg(long, conflicts_with = "features")]
    csv: Option<PathBuf>,
    /// Zero-based row of `--csv` after time sorting.
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// Comma-separated feature values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    features: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    min: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    max: Vec<f64>,
    /// Target number of cells.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ImportArgs {
    /// Directory of `*.pose.txt` files, ordered by file name.
    #[arg(long)]
    dir: PathBuf,
    /// The files store world-to-camera transforms.
    #[arg(long)]
    world_to_camera: bool,
    /// Seconds between consecutive frames.
    #[arg(long, default_value_t = neuroloc::data::FRAME_INTERVAL)]
    interval: f64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<neuroloc::Error> for Failure {
    fn from(e: neuroloc::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(path) if !path.is_file() => {
            return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
        }
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate => generate(&cfg, &cli.out),
        Command::Train(args) => train_cmd(cfg, args, &cli.out),
        Command::Eval(args) => eval_cmd(args, cli.seed, &cli.out),
        Command::Infer(args) => infer_cmd(args),
        Command::Saliency(args) => saliency_cmd(args, &cli.out),
        Command::Gridspec(args) => gridspec_cmd(args),
        Command::ImportPoses(args) => import_cmd(args, &cli.out),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<fs::File, Failure> {
    fs::File::open(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_split(path: &Path, samples: &[SceneSample]) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    write_trajectory_csv(file, samples)?;
    Ok(())
}

fn read_split(path: &Path) -> Result<Vec<SceneSample>, Failure> {
    Ok(parse_trajectory_csv(open(path)?)?)
}

fn generate(cfg: &Config, out: &Path) -> Result<(), Failure> {
    let ds = synth_scene(&cfg.scene());
    create_dir(out)?;
    write_split(&out.join(TRAIN_FILE), &ds.train)?;
    write_split(&out.join(TEST_FILE), &ds.test)?;
    write_file(&out.join(CONFIG_SNAPSHOT), cfg.to_toml_string())?;
    println!(
        "wrote {} train and {} test samples to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn load_dataset(data: Option<&Path>, cfg: &Config) -> Result<Dataset, Failure> {
    match data {
        Some(dir) => {
            let train = read_split(&dir.join(TRAIN_FILE))?;
            let test_path = dir.join(TEST_FILE);
            let test = if test_path.exists() {
                read_split(&test_path)?
            } else {
                Vec::new()
            };
            Ok(Dataset { train, test })
        }
        None => Ok(synth_scene(&cfg.scene())),
    }
}

fn train_cmd(mut cfg: Config, args: &TrainArgs, out: &Path) -> Result<(), Failure> {
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if args.steps.is_some() {
        cfg.steps = args.steps;
    }
    cfg.validate()?;
    let ds = load_dataset(args.data.as_deref(), &cfg)?;
    let start = Instant::now();
    let quiet = args.quiet;
    let outcome = train_with(&cfg, &ds.train, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>5}  loss {:>10.5}  pos {:.4}  rot {:.4}  grid {:.4}",
                r.epoch, r.loss, r.pos_term, r.rot_term, r.grid_term
            );
        }
    })?;
    create_dir(out)?;
    let ck = outcome.model.to_checkpoint(outcome.log.clone());
    ck.save(&out.join(CHECKPOINT_DIR))?;
    let log_path = out.join(LOSS_LOG);
    let file = fs::File::create(&log_path).map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    write_loss_log(file, &outcome.log)?;
    println!(
        "trained {} steps in {:.1}s; checkpoint in {}",
        outcome.steps,
        start.elapsed().as_secs_f64(),
        out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn load_model(dir: &Path) -> Result<NeuroLoc, Failure> {
    Ok(NeuroLoc::from_checkpoint(&Checkpoint::load(dir)?)?)
}

fn eval_cmd(args: &EvalArgs, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let model = load_model(&args.checkpoint)?;
    let mut scene_cfg = model.config.clone();
    if let Some(s) = seed {
        scene_cfg.seed = s;
    }
    let ds = load_dataset(args.data.as_deref(), &scene_cfg)?;
    let mut report = evaluate(&model, &ds)?;
    if args.timing {
        report.runtime_seconds = Some(start.elapsed().as_secs_f64());
    }
    create_dir(out)?;
    write_file(&out.join(METRICS_FILE), report.to_json())?;
    match args.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => print!("{}", report.to_json()),
    }
    Ok(())
}

fn sample_features(args: &SampleArgs) -> Result<Vec<f64>, Failure> {
    match (&args.features, &args.csv) {
        (Some(f), _) => Ok(f.clone()),
        (None, Some(path)) => {
            let rows = read_split(path)?;
            let n = rows.len();
            rows.into_iter()
                .nth(args.row)
                .map(|s| s.features)
                .ok_or_else(|| Failure::Usage(format!("row {} out of range ({n} rows)", args.row)))
        }
        (None, None) => Err(Failure::Usage("one of --features or --csv is required".into())),
    }
}

fn infer_cmd(args: &SampleArgs) -> Result<(), Failure> {
    let model = load_model(&args.checkpoint)?;
    let features = sample_features(args)?;
    let p = model.predict(&[&features])?[0];
    let q = p.orientation;
    let value = serde_json::json!({
        "position": p.position,
        "orientation": [q.w, q.x, q.y, q.z],
        "grid_center": p.grid,
    });
    println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
    Ok(())
}

fn saliency_cmd(args: &SampleArgs, out: &Path) -> Result<(), Failure> {
    let model = load_model(&args.checkpoint)?;
    let features = sample_features(args)?;
    let map = model.saliency(&features)?;
    create_dir(out)?;
    let mut text = String::from("dim,saliency\n");
    for (i, v) in map.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    let path = out.join(SALIENCY_FILE);
    write_file(&path, text)?;
    let top = map
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    println!(
        "wrote {} values to {}; most salient dim {top}",
        map.len(),
        path.display()
    );
    Ok(())
}

fn vec3(v: &[f64], flag: &str) -> Result<[f64; 3], Failure> {
    <[f64; 3]>::try_from(v).map_err(|_| Failure::Usage(format!("--{flag} takes three comma-separated values")))
}

fn gridspec_cmd(args: &GridArgs) -> Result<(), Failure> {
    let spec = GridSpec::build(vec3(&args.min, "min")?, vec3(&args.max, "max")?, args.n)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&spec).expect("grid spec serializes"));
        return Ok(());
    }
    let [cx, cy, cz] = spec.cells;
    println!("cells {cx}x{cy}x{cz}");
    println!(
        "cell_size ({}, {}, {})",
        spec.cell_size[0], spec.cell_size[1], spec.cell_size[2]
    );
    for c in spec.centers() {
        println!("center ({}, {}, {})", c[0], c[1], c[2]);
    }
    Ok(())
}

fn import_cmd(args: &ImportArgs, out: &Path) -> Result<(), Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(&args.dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", args.dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".pose.txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Usage(format!("no *.pose.txt files in {}", args.dir.display())));
    }
    let mut samples = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        let pose: Pose = parse_pose_matrix(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        samples.push(SceneSample {
            features: Vec::new(),
            pose: if args.world_to_camera { pose.inverse() } else { pose },
            grid_center: None,
            timestamp: i as f64 * args.interval,
        });
    }
    create_dir(out)?;
    let path = out.join("poses.csv");
    write_split(&path, &samples)?;
    println!("wrote {} poses to {}", samples.len(), path.display());
    Ok(())
}
