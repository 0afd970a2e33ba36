use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridspike::annconv::NormMode;
use gridspike::pipeline::{self, Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(
    name = "gridspike",
    version,
    about = "Spiking-network disturbance classification pipeline"
)]
struct Cli {
    /// Pipeline config (JSON). Defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Timesteps for converted-network inference.
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    /// Activation percentile for weight normalization (100 = max).
    #[arg(long, global = true)]
    percentile: Option<f64>,
    /// Reuse stage artifacts already present in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic event dataset.
    Generate {
        /// Also write every raw event as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Score and select signals; write the Monte Carlo curves.
    Select,
    /// Rate-code the selected signals and draw the cross-validation splits.
    Encode {
        /// Also write the spike raster of this classification event as CSV.
        #[arg(long)]
        dump_event: Option<usize>,
    },
    /// Train and test the unsupervised network on every fold.
    TrainUnsup,
    /// Train the ReLU networks.
    TrainSup,
    /// Normalize weights and convert the trained networks to spiking ones.
    Convert,
    /// Classify one event with a trained network.
    Infer {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        event: usize,
        /// Use the unsupervised network instead of the converted one.
        #[arg(long)]
        unsupervised: bool,
    },
    /// Timestep evaluation of the converted networks; writes metrics.json.
    Evaluate,
    /// Operation counts and energy estimates; writes energy.json and sparsity.csv.
    EnergyReport,
    /// Every stage in order.
    RunAll,
    /// Print the effective configuration.
    Config,
}

impl Command {
    /// Stage blamed for failures before any stage runs.
    fn first_stage(&self) -> Stage {
        match self {
            Command::Generate { .. } | Command::RunAll | Command::Config => Stage::Generate,
            Command::Select => Stage::Select,
            Command::Encode { .. } => Stage::Encode,
            Command::TrainUnsup => Stage::TrainUnsup,
            Command::TrainSup => Stage::TrainSup,
            Command::Convert => Stage::Convert,
            Command::Infer { .. } | Command::Evaluate => Stage::Evaluate,
            Command::EnergyReport => Stage::EnergyReport,
        }
    }
}

fn load_config(cli: &Cli) -> gridspike::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.timesteps {
        cfg.supervised.timesteps = t;
        cfg.deep.timesteps = t;
    }
    if let Some(q) = cli.percentile {
        let mode = if q >= 100.0 {
            NormMode::Max
        } else {
            NormMode::Percentile(q)
        };
        cfg.supervised.norm = mode;
        cfg.deep.norm = mode;
    }
    if let Command::Generate { csv: true } = cli.command {
        cfg.write_event_csv = true;
    }
    cfg.validate()?;
    // surfaces a missing generator config before any work
    cfg.dataset_config()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> gridspike::Result<()> {
    let cfg = load_config(cli).map_err(|e| pipeline::in_stage(cli.command.first_stage(), e))?;
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let p = Pipeline::new(cfg, &cli.out, cli.resume)?;
    let stage = match &cli.command {
        Command::RunAll => {
            let m = p.run_all()?;
            println!("unsupervised snn: mean test accuracy {:.4}", m.mean_test);
            if let Some(d) = &m.detection {
                println!("detection: mean test accuracy {:.4}", d.mean_test);
            }
            println!("relu network: mean test accuracy {:.4}", m.supervised_ann.mean_test);
            if let Some(s) = &m.supervised_snn {
                println!("converted snn: mean test accuracy {:.4}", s.mean_test);
            }
            if let Some(d) = &m.deep {
                println!("conv network: {:.4}, converted {:.4}", d.ann.test_acc, d.snn.test_acc);
            }
            println!("wrote {}", p.path(pipeline::METRICS_FILE).display());
            return Ok(());
        }
        Command::Infer {
            fold,
            event,
            unsupervised,
        } => {
            let report = if *unsupervised {
                p.infer_unsupervised(*fold, *event)
            } else {
                p.infer_converted(*fold, *event, cli.timesteps)
            }
            .map_err(|e| pipeline::in_stage(Stage::Evaluate, e))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            return Ok(());
        }
        Command::Generate { .. } => Stage::Generate,
        Command::Select => Stage::Select,
        Command::Encode { .. } => Stage::Encode,
        Command::TrainUnsup => Stage::TrainUnsup,
        Command::TrainSup => Stage::TrainSup,
        Command::Convert => Stage::Convert,
        Command::Evaluate => Stage::Evaluate,
        Command::EnergyReport => Stage::EnergyReport,
        Command::Config => unreachable!(),
    };
    p.run(stage)?;
    if let Command::Encode { dump_event: Some(k) } = cli.command {
        dump_event(&p, k).map_err(|e| pipeline::in_stage(Stage::Encode, e))?;
    }
    println!("{stage}: done, artifacts in {}", cli.out.display());
    Ok(())
}

fn dump_event(p: &Pipeline, k: usize) -> gridspike::Result<()> {
    let train = p
        .spike_trains(false)?
        .get(k)
        .ok_or_else(|| gridspike::Error::InvalidArgument(format!("event {k} is not in the classification set")))?;
    let path = p.path(&format!("spikes_event{k}.csv"));
    std::fs::write(&path, train.to_csv()).map_err(|source| gridspike::Error::Io {
        path: path.clone(),
        source,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // messages already embed their sources
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
