use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use uma_cli::pipeline::{sweep, Pipeline, Stage, SweepParam};
use uma_cli::report::table_text;
use uma_cli::{render_report, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "uma", version, about = "Unlearning mapping attack and robustness verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse completed stages recorded in the manifest.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Steps,
    StepSize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and the unlearning split.
    GenData(Common),
    /// Train the original model.
    Train(Common),
    /// Run every configured unlearning method.
    Unlearn(Common),
    /// Run the mapping attack over the ε grid.
    Attack(Common),
    /// Compute metrics and robustness verdicts.
    Verify(Common),
    /// Train the purifier and evaluate unaware and adaptive attacks.
    Defend(Common),
    /// Attack one run across a grid of steps or step sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated grid; step sizes are in units of 1/255.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Render report.csv and report.txt from an artifact directory.
    Report(Common),
    /// Run the full pipeline.
    Run(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let path = common.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed {
        config.master_seed = s;
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    Ok((config, out))
}

fn stage_command(common: &Common, stage: Stage) -> Result<(), CliError> {
    let (config, out) = load(common)?;
    let mut p = Pipeline::open(config, &out, true)?;
    p.run_command(stage, common.resume)?;
    if stage >= Stage::Verify {
        print!("{}", p.report_table());
    }
    eprintln!("{} done in {}", stage.name(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => stage_command(&c, Stage::GenData),
        Command::Train(c) => stage_command(&c, Stage::Train),
        Command::Unlearn(c) => stage_command(&c, Stage::Unlearn),
        Command::Attack(c) => stage_command(&c, Stage::Attack),
        Command::Verify(c) => stage_command(&c, Stage::Verify),
        Command::Defend(c) => {
            let (config, out) = load(&c)?;
            if config.defenses.is_none() {
                return Err(CliError::Config("config has no `defenses` section".into()));
            }
            let mut p = Pipeline::open(config, &out, true)?;
            p.run_command(Stage::Defend, c.resume)?;
            for r in p.defense() {
                println!("{}", serde_json::to_string(r).expect("serializable row"));
            }
            Ok(())
        }
        Command::Sweep { common, param, grid } => {
            let (config, out) = load(&common)?;
            let show = |v: f64| match param {
                Param::Steps => format!("{v}"),
                Param::StepSize => format!("{}/255", v * 255.0),
            };
            let (param, grid) = match param {
                Param::Steps => (SweepParam::Steps, grid),
                Param::StepSize => (SweepParam::StepSize, grid.iter().map(|v| v / 255.0).collect()),
            };
            let rows = sweep(config, &out, param, &grid)?;
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![show(r.value), format!("{:.4}", r.ua_attacked), format!("{:.4}", r.mia_attacked)])
                .collect();
            let header = [param.name(), "UA_atk", "MIA_atk"];
            print!("{}", table_text(&header, &cells));
            Ok(())
        }
        Command::Report(c) => {
            let out = match (&c.out, &c.config) {
                (Some(o), _) => o.clone(),
                (None, Some(_)) => load(&c)?.1,
                (None, None) => return Err(CliError::Config("pass --out or --config".into())),
            };
            let r = render_report(&out)?;
            print!("{}", r.table);
            Ok(())
        }
        Command::Run(c) => {
            let (config, out) = load(&c)?;
            let p = uma_cli::run_experiment(config, &out, c.resume)?;
            print!("{}", p.report_table());
            eprintln!("report sha256 {}", p.report_digest());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
