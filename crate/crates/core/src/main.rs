use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sonar_loop::detector::{read_scores_csv, write_loops_csv, write_scores_csv};
use sonar_loop::evaluation::{write_pr_csv, write_pr_svg, LabelConfig};
use sonar_loop::io::{load_dataset, save_dataset, Dataset, Metadata};
use sonar_loop::pipeline::{detect, evaluate, ping_truth, DetectConfig};
use sonar_loop::submap::CropMode;
use sonar_loop::synth::{Scenario, ScenarioName};

#[derive(Parser)]
#[command(name = "sonar-loop", version, about = "Loop detection for multibeam sonar submaps")]
struct Cli {
    /// Worker threads for feature extraction and pair scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic survey dataset.
    Simulate {
        #[arg(long, default_value = "pond")]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build submaps, score every admissible pair and optionally threshold.
    Detect(DetectArgs),
    /// Precision/recall of a scores file against the dataset's truth poses.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any subset of the detection parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Crop half-size, m. Defaults to the dataset's metadata.
    #[arg(long)]
    d: Option<f64>,
    /// Half accumulation window, in pings.
    #[arg(long)]
    n: Option<usize>,
    /// Nearest neighbours per point.
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Loop threshold; without it only scores are written.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    crop: Option<CropMode>,
    /// Points per submap used for scoring; 0 scores every point.
    #[arg(long)]
    cap: Option<usize>,
    /// Minimum index gap between scored pairs (default 2n + 5).
    #[arg(long)]
    exclusion: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write only the flagged pairs to loops.csv.
    #[arg(long)]
    flagged_only: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset the scores were computed from; supplies ping times and truth.
    #[arg(long)]
    dataset: PathBuf,
    /// Defaults to `<out>/scores.csv`.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Labeling distance, m. Defaults to the dataset's metadata.
    #[arg(long)]
    d: Option<f64>,
    /// Pairs this close in index are ignored.
    #[arg(long, default_value_t = 0)]
    exclusion: usize,
    /// Label by horizontal distance instead of 3D distance.
    #[arg(long)]
    distance_2d: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Simulate { scenario, seed, out } => simulate(&scenario, seed, &out),
        Command::Detect(args) => run_detect(&args),
        Command::Evaluate(args) => run_evaluate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn simulate(scenario: &str, seed: u64, out: &Path) -> Result<()> {
    let name: ScenarioName = scenario.parse().context("simulate")?;
    let scenario = Scenario::new(name);
    let survey = scenario.generate(seed).context("simulate")?;
    let legs = scenario.plan.legs + scenario.plan.revisit_legs;
    let crossings = scenario.plan.crossings();
    let mut metadata = Metadata::new(name.as_str(), Some(scenario.d));
    let extra = json!({
        "scenario": name.as_str(),
        "seed": seed,
        "legs": legs,
        "crossings": crossings,
        "pings": survey.pings.len(),
        "dropped_beams": survey.dropped_beams,
        "bumps": survey.terrain.bumps.len(),
    });
    if let Value::Object(map) = extra {
        metadata.extra = map;
    }
    let dataset = Dataset {
        imu: survey.imu,
        dvl: survey.dvl,
        pings: survey.pings,
        truth: Some(survey.truth),
        metadata,
    };
    save_dataset(out, &dataset).with_context(|| format!("simulate: writing {}", out.display()))?;
    println!(
        "{} seed {seed}: {} pings, {legs} legs, {crossings} crossings, {} dropped beams, d = {} m",
        name,
        dataset.pings.len(),
        dataset.metadata.extra["dropped_beams"],
        scenario.d
    );
    Ok(())
}

/// Overlays `patch` onto `base`, refusing keys `base` does not have.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (key, value) in patch {
                let Some(slot) = base.get_mut(&key) else {
                    bail!("unknown config key '{path}{key}'");
                };
                if slot.is_object() {
                    merge(slot, value, &format!("{path}{key}."))?;
                } else {
                    *slot = value;
                }
            }
            Ok(())
        }
        (_, _) => bail!("config '{path}' must be an object"),
    }
}

fn detect_config(args: &DetectArgs, metadata: &Metadata) -> Result<DetectConfig> {
    let mut config = DetectConfig::default();
    if let Some(d) = metadata.d {
        config.d = d;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut value = serde_json::to_value(config)?;
        merge(&mut value, patch, "")?;
        config = serde_json::from_value(value).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(d) = args.d {
        config.d = d;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(m) = args.m {
        config.m = m;
    }
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }
    if args.gamma.is_some() {
        config.gamma = args.gamma;
    }
    if let Some(crop) = args.crop {
        config.crop = crop;
    }
    if let Some(cap) = args.cap {
        config.cap = (cap > 0).then_some(cap);
    }
    if args.exclusion.is_some() {
        config.exclusion = args.exclusion;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn secs(d: Duration) -> String {
    format!("{:.3} s", d.as_secs_f64())
}

fn run_detect(args: &DetectArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset).with_context(|| format!("ingestion: {}", args.dataset.display()))?;
    let config = detect_config(args, &dataset.metadata).context("config")?;
    fs::create_dir_all(&args.out).with_context(|| format!("output: {}", args.out.display()))?;
    let mut echoed = serde_json::to_value(config)?;
    echoed["dataset"] = json!(args.dataset);
    echoed["exclusion"] = json!(config.exclusion());
    serde_json::to_writer_pretty(create(&args.out, "config.json")?, &echoed)?;

    let detection = detect(&dataset, &config)?;
    let t = detection.timings;
    eprintln!("dead reckoning  {}", secs(t.dead_reckoning));
    eprintln!("submaps         {}", secs(t.submaps));
    eprintln!("features        {}", secs(t.features));
    eprintln!("scoring         {}", secs(t.scoring));

    write_scores_csv(create(&args.out, "scores.csv")?, &detection.scores).context("output: scores.csv")?;
    let loops_path = args.out.join("loops.csv");
    match &detection.loops {
        Some(loops) => write_loops_csv(create(&args.out, "loops.csv")?, loops, args.flagged_only).context("output: loops.csv")?,
        None if loops_path.exists() => fs::remove_file(&loops_path).context("output: removing stale loops.csv")?,
        None => {}
    }
    let flagged = detection.loops.as_ref().map(|l| l.iter().filter(|c| c.is_loop).count());
    println!(
        "{} submaps ({} sparse, {} skipped), {} pairs scored{}",
        detection.submaps,
        detection.stats.sparse_submaps,
        detection.skipped,
        detection.scores.len(),
        flagged.map_or_else(String::new, |f| format!(", {f} loops above gamma"))
    );
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset).with_context(|| format!("ingestion: {}", args.dataset.display()))?;
    let Some(truth) = &dataset.truth else {
        bail!("evaluation: {} has no truth poses", args.dataset.display());
    };
    let d = match args.d.or(dataset.metadata.d) {
        Some(d) if d > 0.0 => d,
        Some(d) => bail!("config: d must be positive, got {d}"),
        None => bail!("config: no --d given and the dataset metadata has none"),
    };
    let scores_path = args.scores.clone().unwrap_or_else(|| args.out.join("scores.csv"));
    let scores = read_scores_csv(&scores_path).context("ingestion")?;
    let truth = ping_truth(truth, &dataset.pings).context("evaluation")?;
    let label = LabelConfig {
        d,
        exclusion: args.exclusion,
        planar: args.distance_2d,
    };
    let (curve, summary) = evaluate(&scores, &truth, &label).context("evaluation")?;
    fs::create_dir_all(&args.out).with_context(|| format!("output: {}", args.out.display()))?;
    write_pr_csv(create(&args.out, "pr.csv")?, &curve).context("output: pr.csv")?;
    let mut out = create(&args.out, "summary.json")?;
    serde_json::to_writer(&mut out, &summary)?;
    std::io::Write::write_all(&mut out, b"\n")?;
    let name = scores_path.file_stem().map_or_else(|| "scores".to_string(), |s| s.to_string_lossy().into_owned());
    write_pr_svg(create(&args.out, "pr.svg")?, &[(name.as_str(), &curve)]).context("output: pr.svg")?;
    println!("AP {:.4} over {} pairs ({} positive)", summary.ap, summary.pairs, summary.positives);
    Ok(())
}
