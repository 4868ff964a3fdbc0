mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use serde_json::{json, Map, Value};

use commands::Invalid;
use config::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "cds", version, about = "Train and check complex-valued image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset applied below the config file (e.g. full-protocol).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override any config key: --set optim.lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = config::parse_assignment)]
    set: Vec<(String, Value)>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// synth, cifar10 or cifar100.
    #[arg(long, global = true)]
    data: Option<String>,
    /// Dataset root; defaults to $CDS_DATA_DIR.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    encoding: Option<String>,
    #[arg(long, global = true)]
    subset: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// fp32 or fp64.
    #[arg(long, global = true)]
    precision: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Checkpoints of independently trained replicas (biasvar).
    #[arg(long = "replica", global = true)]
    replica: Vec<PathBuf>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    #[arg(long, global = true)]
    draws: Option<usize>,
    /// Check every layer kind and every network.
    #[arg(long, global = true)]
    all: bool,
    /// Layer kind to check (repeatable), e.g. conv or network:type_i.
    #[arg(long = "layer", global = true)]
    layer: Vec<String>,
    #[arg(long, global = true)]
    seeds: Option<usize>,
    #[arg(long = "in", global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    scale_mag: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    scale_phase: Option<f64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train one model and save checkpoints and metrics.
    Train,
    /// Accuracy of a checkpoint on a split.
    Eval,
    /// Accuracy under random complex rescaling of the inputs.
    Robustness,
    /// Bias and variance of independently trained replicas.
    Biasvar,
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// Encode a PPM image and write it as a tensor file.
    Encode,
    /// Check that the weighted Fréchet mean separates magnitude and phase.
    Wfmcheck,
    /// Train each model of the comparison table and report accuracies.
    ReproduceTable,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Robustness => "robustness",
            Command::Biasvar => "biasvar",
            Command::Gradcheck => "gradcheck",
            Command::Encode => "encode",
            Command::Wfmcheck => "wfmcheck",
            Command::ReproduceTable => "reproduce-table",
        }
    }
}

impl Cli {
    /// Flags that were given, as config keys.
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("out", self.out.as_ref().map(|p| json!(p)));
        put("seed", self.seed.map(|v| json!(v)));
        put("model.name", self.model.as_ref().map(|v| json!(v)));
        put("data.name", self.data.as_ref().map(|v| json!(v)));
        put("data.root", self.data_dir.as_ref().map(|p| json!(p)));
        put("data.encoding", self.encoding.as_ref().map(|v| json!(v)));
        put("data.subset", self.subset.map(|v| json!(v)));
        put("train.steps", self.steps.map(|v| json!(v)));
        put("train.batch_size", self.batch_size.map(|v| json!(v)));
        put("optim.lr", self.lr.map(|v| json!(v)));
        put("precision", self.precision.as_ref().map(|v| json!(v)));
        put("eval.checkpoint", self.checkpoint.as_ref().map(|p| json!(p)));
        put("biasvar.checkpoints", (!self.replica.is_empty()).then(|| json!(self.replica)));
        put("biasvar.replicas", self.replicas.map(|v| json!(v)));
        put("robustness.draws", self.draws.map(|v| json!(v)));
        put("gradcheck.all", self.all.then(|| json!(true)));
        put("gradcheck.layers", (!self.layer.is_empty()).then(|| json!(self.layer)));
        put("gradcheck.seeds", self.seeds.map(|v| json!(v)));
        put("encode.input", self.input.as_ref().map(|p| json!(p)));
        put("encode.scale_mag", self.scale_mag.map(|v| json!(v)));
        put("encode.scale_phase", self.scale_phase.map(|v| json!(v)));
        put("wfmcheck.trials", self.trials.map(|v| json!(v)));
        m
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let command = cli.command.name();
    let mut sources = Vec::new();
    if let Some(p) = &cli.preset {
        sources.push(config::preset(p)?);
    }
    if let Some(p) = &cli.config {
        sources.push(config::read_config_file(p)?);
    }
    sources.push(cli.overrides());
    sources.push(cli.set.iter().cloned().collect());
    let cfg = config::resolve(command, &sources)?;
    log::debug!("effective config: {}", cfg.to_json());

    // Echo the effective config next to the outputs.
    let echo = match cli.command {
        Command::Encode => cfg.out.as_ref().map(|o| {
            let mut s = o.clone().into_os_string();
            s.push(".config.json");
            PathBuf::from(s)
        }),
        _ => Some(commands::out_dir(&cfg)?.join("config.json")),
    };
    let result = match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Robustness => commands::robustness(&cfg),
        Command::Biasvar => commands::biasvar(&cfg),
        Command::Gradcheck => commands::gradcheck_cmd(&cfg),
        Command::Encode => commands::encode_cmd(&cfg),
        Command::Wfmcheck => commands::wfmcheck(&cfg),
        Command::ReproduceTable => commands::reproduce_table(&cfg),
    };
    if let Some(path) = echo.filter(|p| p.parent().is_some_and(|d| d.as_os_str().is_empty() || d.is_dir())) {
        std::fs::write(&path, cfg.to_json() + "\n")?;
    }
    result
}

/// 1 for problems with the invocation or its inputs, 2 for internal faults.
fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<ConfigError>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<cds::CdsError>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
