mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clicktrack_core::refiners::RefinerKind;

use settings::ExperimentName;

pub const BUILD: &str = env!("CLICKTRACK_BUILD");

#[derive(Debug, Parser)]
#[command(name = "clicktrack", version = BUILD, about = "Click-initialized single object tracking")]
pub struct Cli {
    /// JSON file with settings for the subcommand; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic component of the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus to disk.
    GenData(GenDataArgs),
    /// Train a refiner and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Run one experiment and write report.json, CSV tables and plots.
    Eval(EvalArgs),
    /// Refine one click on one image into a box.
    Refine(RefineArgs),
    /// Track a box through a frame sequence.
    Track(TrackArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub heldout: Option<usize>,
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Frames per sequence.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub refiner: Option<RefinerKind>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corpus written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub experiment: Option<ExperimentName>,
    /// Directory holding gcr/, pfr/ and bfr/ checkpoints.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub heldout_scenes: Option<usize>,
    /// Deviation rates, comma separated, starting at 0.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Click draws for the robustness experiment.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Refinement stages at inference.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Category guidance in the robustness experiment.
    #[arg(long)]
    pub guided: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Click as x,y in pixels.
    #[arg(long, value_parser = parse_point)]
    pub point: Option<[f64; 2]>,
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub refiner: Option<RefinerKind>,
    #[arg(long)]
    pub stages: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Frame files, or directories of PNG frames.
    #[arg(long, num_args = 1..)]
    pub frames: Option<Vec<PathBuf>>,
    /// Initial box as x0,y0,x1,y1 on the first frame.
    #[arg(long = "box", value_parser = parse_box)]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CLICKTRACK_MODEL")]
    pub model: Option<PathBuf>,
    #[arg(long, env = "CLICKTRACK_REFINER")]
    pub refiner: Option<RefinerKind>,
    #[arg(long, env = "CLICKTRACK_HOST")]
    pub host: Option<String>,
    #[arg(long, env = "CLICKTRACK_PORT")]
    pub port: Option<u16>,
    /// Corpus directory with the scenes sessions are created from.
    #[arg(long, env = "CLICKTRACK_SCENES")]
    pub scenes: Option<PathBuf>,
}

fn parse_numbers<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; N] = v.try_into().map_err(|_| format!("expected {N} comma separated numbers"))?;
    if arr.iter().any(|x| !x.is_finite()) {
        return Err("numbers must be finite".into());
    }
    Ok(arr)
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    parse_numbers::<2>(s)
}

fn parse_box(s: &str) -> Result<[f64; 4], String> {
    parse_numbers::<4>(s)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
