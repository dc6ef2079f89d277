use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use comloc::corpus::BBox;
use comloc::influence::ContextWindow;
use comloc::pipeline::{Pipeline, PipelineConfig, Stage};
use comloc::Error;

/// Community-aware mobility analysis and location prediction over
/// check-in data.
///
/// Every config key can be overridden with an environment variable
/// COMLOC_<SECTION>__<KEY>, e.g. COMLOC_FILTERS__MIN_CHECKINS=50.
#[derive(Debug, Parser)]
#[command(name = "comloc", version)]
struct Cli {
    /// TOML config file; defaults apply to every key it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for all artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus (check-ins, edges, ground truth).
    Synth,
    /// Parse and scope the input corpus, select active users.
    Ingest,
    /// Partition each active user's ego network.
    Communities,
    /// Community and influence entropy per user.
    Diversity,
    /// Movement profiles, distance CDFs and context comparison.
    #[command(visible_alias = "analyze")]
    Influence(ContextArgs),
    /// Fit one model per active user and dump the parameters.
    Train(TrainArgs),
    /// Train and score every configured model; write the report.
    Evaluate,
    /// Run every stage in order.
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ContextKind {
    /// Wednesday lunch against Wednesday dinner.
    LunchDinner,
    /// Two regions given by --a and --b.
    Regions,
}

#[derive(Debug, Args)]
struct ContextArgs {
    /// Pair of contexts to compare; overrides [context] in the config.
    #[arg(long, value_enum)]
    context: Option<ContextKind>,

    /// First region as lat_min,lat_max,lon_min,lon_max.
    #[arg(long, value_parser = parse_bbox, requires = "b")]
    a: Option<BBox>,

    /// Second region as lat_min,lat_max,lon_min,lon_max.
    #[arg(long, value_parser = parse_bbox, requires = "a")]
    b: Option<BBox>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// community | sample-friends | friends | user | user-community | psmm
    #[arg(long)]
    model: Option<String>,

    /// nearest | max-size | max-con | random (community model only)
    #[arg(long)]
    strategy: Option<String>,
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad number in bbox: {e}"))?;
    match v[..] {
        [a, b, c, d] => BBox::new(a, b, c, d).map_err(|e| e.to_string()),
        _ => Err("expected lat_min,lat_max,lon_min,lon_max".into()),
    }
}

fn apply_context(cfg: &mut PipelineConfig, args: &ContextArgs) -> Result<(), Error> {
    match (args.context, args.a, args.b) {
        (Some(ContextKind::LunchDinner), None, None) => {
            cfg.context.a = ContextWindow::lunch();
            cfg.context.b = ContextWindow::dinner();
        }
        (Some(ContextKind::Regions) | None, Some(a), Some(b)) => {
            cfg.context.a = ContextWindow::Spatial {
                name: "region-a".into(),
                bbox: a,
            };
            cfg.context.b = ContextWindow::Spatial {
                name: "region-b".into(),
                bbox: b,
            };
        }
        (Some(ContextKind::Regions), _, _) => {
            return Err(Error::Config {
                key: "--context".into(),
                msg: "regions needs --a and --b".into(),
            })
        }
        (Some(ContextKind::LunchDinner), _, _) => {
            return Err(Error::Config {
                key: "--context".into(),
                msg: "lunch-dinner takes no regions".into(),
            })
        }
        (None, _, _) => {}
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    let stage = match &cli.command {
        Command::Synth => Some(Stage::Synth),
        Command::Ingest => Some(Stage::Ingest),
        Command::Communities => Some(Stage::Communities),
        Command::Diversity => Some(Stage::Diversity),
        Command::Influence(args) => {
            apply_context(&mut cfg, args)?;
            Some(Stage::Influence)
        }
        Command::Train(args) => {
            if let Some(m) = &args.model {
                cfg.train.model = m.clone();
            }
            if let Some(s) = &args.strategy {
                cfg.train.strategy = s.clone();
            }
            Some(Stage::Train)
        }
        Command::Evaluate => Some(Stage::Evaluate),
        Command::All => None,
    };
    let mut pipeline = Pipeline::new(cfg, &cli.out)?;
    match stage {
        Some(s) => {
            for rel in pipeline.run(s)? {
                println!("{}", pipeline.path(&rel).display());
            }
        }
        None => {
            pipeline.run_all()?;
            println!("{}", pipeline.path(comloc::pipeline::REPORT_JSON).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
