mod flags;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use trackseg_core::ltm::TrackDump;
use trackseg_core::pipeline::{
    export_ply, run_ablation, run_eval, run_track, AblationConfig, Checkpoint, PipelineConfig, Trainer, Variant,
};
use trackseg_core::sim::{SequenceFile, SimConfig};
use trackseg_core::Error;

use flags::{layered, PipelineFlags, SimFlags};

/// Machine-readable failure, printed to stderr as one JSON object.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", json!({ "error": self.kind, "message": self.message }))
    }
}

#[derive(Debug, Parser)]
#[command(name = "trackseg", version, about = "Online 3D instance segmentation by tracking mask fragments")]
struct Cli {
    /// Directory that receives every output file.
    #[arg(long, global = true, env = "TRACKSEG_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic sequences.
    Gen(GenArgs),
    /// Train a model on a directory of sequences.
    Train(TrainArgs),
    /// Track sequences with a trained checkpoint.
    Track(TrackArgs),
    /// Score track dumps against their sequences.
    Eval(EvalArgs),
    /// Train and score every ablation variant on the seeded benchmark.
    Ablate(AblateArgs),
    /// Write a track dump as a coloured point cloud.
    ExportPly(ExportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Number of sequences.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// File and sequence id prefix.
    #[arg(long, default_value = "seq")]
    prefix: String,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of sequence files.
    #[arg(long)]
    data: PathBuf,
    /// Continue from this checkpoint; its config replaces the base defaults.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(required = true)]
    sequences: Vec<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    dumps: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    sequences: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    train_scenes: Option<usize>,
    /// Benchmark seed.
    #[arg(long)]
    bench_seed: Option<u64>,
    /// Comma-separated subset, e.g. `full,no_ltm`.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// JSON ablation config; its fields win over every flag.
    #[arg(long)]
    ablation_config: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    sequence: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", CliError::new("usage", message.trim_end()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let out = cli.out_dir;
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    match cli.command {
        Command::Gen(a) => gen(&out, a),
        Command::Train(a) => train(&out, a),
        Command::Track(a) => track(&out, a),
        Command::Eval(a) => eval(&out, a),
        Command::Ablate(a) => ablate(&out, a),
        Command::ExportPly(a) => export(&out, a),
    }
}

fn pipeline_config(base: &PipelineConfig, f: &PipelineFlags) -> Result<PipelineConfig, CliError> {
    let c: PipelineConfig = layered(base, f, f.config.as_deref())?;
    c.validate()?;
    Ok(c)
}

fn write(path: &Path, text: &str) -> Result<String, CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    Ok(path.display().to_string())
}

fn gen(out: &Path, a: GenArgs) -> Result<serde_json::Value, CliError> {
    let base: SimConfig = layered(&SimConfig::default(), &a.sim, a.sim.config.as_deref())?;
    base.validate()?;
    let mut written = Vec::new();
    for i in 0..a.count {
        let cfg = SimConfig {
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let id = format!("{}-{i:03}", a.prefix);
        let seq = SequenceFile::generate(id.clone(), &cfg)?;
        written.push(write(&out.join(format!("{id}.json")), &seq.to_json()?)?);
    }
    Ok(json!({ "command": "gen", "written": written }))
}

fn load_sequences(paths: &[PathBuf]) -> Result<Vec<SequenceFile>, CliError> {
    paths.iter().map(|p| Ok(SequenceFile::load(p)?)).collect()
}

fn train(out: &Path, a: TrainArgs) -> Result<serde_json::Value, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.data)
        .map_err(|e| CliError::io(&a.data, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::new("invalid_input", format!("no sequence files in {}", a.data.display())));
    }
    let data = load_sequences(&paths)?;
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let base = resumed.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    let config = pipeline_config(&base, &a.pipeline)?;
    let mut trainer = match resumed {
        Some(mut ck) => {
            ck.config = config.clone();
            Trainer::resume(&data, ck)?
        }
        None => Trainer::new(&data, &config)?,
    };
    let mut written = Vec::new();
    let target = config.steps as u64;
    let mut step = trainer.checkpoint().step;
    while step < target {
        if let Err(e) = trainer.step() {
            // keep the last good state next to the error
            trainer.checkpoint().save(out.join("checkpoint.json"))?;
            return Err(e.into());
        }
        step += 1;
        if config.checkpoint_every > 0 && step % config.checkpoint_every as u64 == 0 && step < target {
            let path = out.join(format!("checkpoint-{step:06}.json"));
            trainer.checkpoint().save(&path)?;
            written.push(path.display().to_string());
        }
    }
    let ck = trainer.checkpoint();
    let path = out.join("checkpoint.json");
    ck.save(&path)?;
    written.push(path.display().to_string());
    Ok(json!({
        "command": "train",
        "steps": ck.step,
        "final_loss": ck.losses.last(),
        "written": written,
    }))
}

fn track(out: &Path, a: TrackArgs) -> Result<serde_json::Value, CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let config = pipeline_config(&ck.config, &a.pipeline)?;
    let mut written = Vec::new();
    for seq in load_sequences(&a.sequences)? {
        let (dump, _) = run_track(&seq, &ck.params, &config)?;
        written.push(write(&out.join(format!("{}.tracks.json", seq.sequence_id)), &dump.to_json()?)?);
    }
    Ok(json!({ "command": "track", "written": written }))
}

fn eval(out: &Path, a: EvalArgs) -> Result<serde_json::Value, CliError> {
    let dumps = a.dumps.iter().map(|p| Ok(TrackDump::load(p)?)).collect::<Result<Vec<_>, CliError>>()?;
    let report = run_eval(&dumps, &load_sequences(&a.sequences)?)?;
    let path = out.join("metrics.json");
    report.save(&path)?;
    let m = &report.aggregate;
    Ok(json!({
        "command": "eval",
        "ap": m.ap,
        "ap50": m.ap50,
        "ap25": m.ap25,
        "id_switches": m.id_switches,
        "fragmentation_rate": m.fragmentation_rate,
        "written": [path.display().to_string()],
    }))
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    serde_json::from_value(json!(s.trim())).map_err(|_| CliError::new("usage", format!("unknown variant {s}")))
}

fn ablate(out: &Path, a: AblateArgs) -> Result<serde_json::Value, CliError> {
    let defaults = AblationConfig::default();
    let mut cfg = AblationConfig {
        base: pipeline_config(&defaults.base, &a.pipeline)?,
        scenes: a.scenes.unwrap_or(defaults.scenes),
        train_scenes: a.train_scenes.unwrap_or(defaults.train_scenes),
        seed: a.bench_seed.unwrap_or(defaults.seed),
        ..defaults
    };
    if !a.variants.is_empty() {
        cfg.variants = a.variants.iter().map(|v| parse_variant(v)).collect::<Result<_, _>>()?;
    }
    if let Some(path) = &a.ablation_config {
        cfg = layered(&cfg, &json!({}), Some(path))?;
        cfg.base.validate()?;
    }
    let report = run_ablation(&cfg, |r| {
        eprintln!("{}", json!({ "variant": r.variant, "ap": r.metrics.ap }));
    })?;
    let path = out.join("ablation.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::new("serde", e.to_string()))?;
    write(&path, &text)?;
    Ok(json!({ "command": "ablate", "ap_deltas": report.ap_deltas, "written": [path.display().to_string()] }))
}

fn export(out: &Path, a: ExportArgs) -> Result<serde_json::Value, CliError> {
    let dump = TrackDump::load(&a.dump)?;
    let seq = SequenceFile::load(&a.sequence)?;
    let path = out.join(format!("{}.ply", dump.sequence_id));
    let written = write(&path, &export_ply(&dump, &seq)?)?;
    Ok(json!({ "command": "export-ply", "written": [written] }))
}
