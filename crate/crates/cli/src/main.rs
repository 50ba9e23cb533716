mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsh_core::Error;

use output::{to_json, Artifacts, ErrorInfo, Summary, SCHEMA_VERSION};

#[derive(Parser, Debug)]
#[command(name = "fsh", version, about = "Analyses of Filippov systems with a sliding Shilnikov orbit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// System definition file (JSON).
    #[arg(long, global = true, conflicts_with_all = ["model", "alpha", "beta"])]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub model: Option<Model>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Directory for summary.json and CSV artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "FSH_JOBS", default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Switching-manifold membership tolerance |h|.
    #[arg(long, global = true)]
    pub h_tol: Option<f64>,
    #[arg(long, global = true)]
    pub rtol: Option<f64>,
    #[arg(long, global = true)]
    pub atol: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Shilnikov,
}

#[derive(Args, Debug, Clone)]
pub struct SectionArgs {
    /// Starting guess for the visible fold q0 (x,y,z).
    #[arg(long, value_parser = parse_point)]
    pub guess: Option<[f64; 3]>,
    /// Section half-width.
    #[arg(long)]
    pub r: Option<f64>,
    /// Points used to sample the landing curve.
    #[arg(long, default_value_t = 401)]
    pub samples: usize,
    /// Grid size of the branch-piece scan.
    #[arg(long, default_value_t = 101)]
    pub resolution: usize,
    /// Time budget per return; 0 picks one from the flight time.
    #[arg(long, default_value_t = 0.0)]
    pub tmax: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepTask {
    Verify,
    Periodic,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Region of the switching manifold at given points.
    Classify {
        #[arg(long, value_parser = parse_point, required = true)]
        at: Vec<[f64; 3]>,
    },
    /// Filippov trajectory from a point.
    Flow {
        #[arg(long, value_parser = parse_point)]
        from: [f64; 3],
        #[arg(long, default_value_t = 20.0)]
        tmax: f64,
        /// Extra dense-output points per step in the CSV.
        #[arg(long, default_value_t = 0)]
        dense: usize,
    },
    /// Certificates for a sliding Shilnikov orbit.
    VerifyShilnikov {
        #[arg(long, value_parser = parse_point)]
        guess: Option<[f64; 3]>,
        #[arg(long)]
        radius: Option<f64>,
    },
    /// First return map on a grid and its branch pieces.
    ReturnMap {
        #[command(flatten)]
        section: SectionArgs,
        #[arg(long, default_value_t = 200)]
        scan: usize,
    },
    /// Itineraries of section points.
    Itinerary {
        #[command(flatten)]
        section: SectionArgs,
        /// Section coordinate; repeatable.
        #[arg(long = "s", allow_negative_numbers = true)]
        s: Vec<f64>,
        /// Number of seeded random section points.
        #[arg(long, default_value_t = 0)]
        random: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// Cylinder intervals of one word or of every word of a depth.
    Cylinder {
        #[command(flatten)]
        section: SectionArgs,
        /// Halves h0,...,hm of the word.
        #[arg(long, value_delimiter = ',', requires = "counts")]
        halves: Vec<u8>,
        /// η-counts n1,...,nm of the word.
        #[arg(long, value_delimiter = ',', requires = "halves")]
        counts: Vec<u32>,
        #[arg(long, conflicts_with_all = ["halves", "counts"])]
        depth: Option<usize>,
    },
    /// Periodic points of the return map.
    Periodic {
        #[command(flatten)]
        section: SectionArgs,
        #[arg(long, default_value_t = 1)]
        period: usize,
    },
    /// Realized word counts and entropy estimates per depth.
    Entropy {
        #[command(flatten)]
        section: SectionArgs,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        /// Grid size of the branch-piece scan.
        #[arg(long)]
        scan: Option<usize>,
    },
    /// verify-shilnikov or periodic over an (alpha, beta) grid.
    Sweep {
        #[arg(long, value_enum, default_value = "verify")]
        task: SweepTask,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        period: usize,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Classify { .. } => "classify",
            Command::Flow { .. } => "flow",
            Command::VerifyShilnikov { .. } => "verify-shilnikov",
            Command::ReturnMap { .. } => "return-map",
            Command::Itinerary { .. } => "itinerary",
            Command::Cylinder { .. } => "cylinder",
            Command::Periodic { .. } => "periodic",
            Command::Entropy { .. } => "entropy",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> =
        s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok([x, y, z]),
        _ => Err(format!("expected three finite numbers x,y,z, got {s:?}")),
    }
}

/// Failure of a run: configuration problems exit with 2, analysis errors with 1.
pub enum Failure {
    Config(Error),
    Analysis(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter { .. } => Failure::Config(e),
            _ => Failure::Analysis(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(Error::Config(e.to_string()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let mut run = commands::Run::default();
    let mut art = Artifacts::default();
    let outcome = commands::setup(&cli.global).and_then(|ctx| {
        run.system = Some(ctx.spec.clone());
        art = Artifacts::new(cli.global.out.as_deref())?;
        commands::dispatch(&ctx, &cli.command, &mut run, &mut art)
    });
    let (status, result, error, code) = match outcome {
        Ok(res) => ("ok", Some(res), None, 0),
        Err(Failure::Config(e)) => ("error", None, Some(e), 2),
        Err(Failure::Analysis(e)) => ("error", None, Some(e), 1),
    };
    if let Some(e) = &error {
        eprintln!("fsh {name}: {e}");
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        command: name,
        system: run.system,
        options: run.options,
        status,
        result,
        error: error.as_ref().map(ErrorInfo::from),
        artifacts: art.names(),
    };
    if let Err(e) = art.summary(&summary) {
        eprintln!("fsh {name}: cannot write summary: {e}");
        return ExitCode::from(2);
    }
    print!("{}", to_json(&summary));
    ExitCode::from(code)
}
