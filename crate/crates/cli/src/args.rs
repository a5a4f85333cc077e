use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "premia",
    version = concat!(env!("CARGO_PKG_VERSION"), " (output schema 1)"),
    about = "Risk-premia estimation, J/IS diagnostics and DRLM confidence sets",
    long_about = "Risk-premia estimation, J/IS diagnostics and DRLM confidence sets.\n\n\
Inputs are CSV panels with a leading \"date\" column. Returns and factors are \
read as percent per period and used as given; no unit conversion is applied. \
Results are printed to stdout as JSON. Exit status: 0 success, 2 input or \
validation error, 3 numerical degeneracy. PREMIA_THREADS caps the worker pool."
)]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    #[serde(skip)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Time-series regressions: betas, residual and factor covariances.
    Firstpass {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the beta significance table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Risk-premia point estimates.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = MethodArg::Fm)]
        method: MethodArg,
        /// Standard errors for the FM estimator.
        #[arg(long, value_enum, default_value_t = SeArg::Plain)]
        se: SeArg,
    },
    /// Misspecification (J) and identification-strength (IS) statistics.
    Jis {
        #[command(flatten)]
        data: DataArgs,
        /// Also write a one-row J,IS CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// DRLM confidence set over a grid of hypothesized premia.
    DrlmCs {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Per-factor ranges "lo:hi:step,..."; defaults to the FM estimate
        /// plus or minus max(5, 10 se) in steps of 0.05.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        #[arg(long)]
        no_power_rule: bool,
        /// Interior points checked per segment by the power rule.
        #[arg(long, default_value_t = 100)]
        segment_samples: usize,
        /// Long-form CSV of every grid point.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Monte Carlo experiments.
    Simulate(SimulateArgs),
    /// J/IS for every k-subset of the factor panel, written as a binary shard.
    ZooScan {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: usize,
        /// 0-based shard "i/n" of the colexicographic rank range.
        #[arg(long, allow_hyphen_values = true, default_value = "0/1")]
        shard: String,
        #[arg(long)]
        out: PathBuf,
        /// Compare this many random subsets against direct regressions.
        #[arg(long)]
        audit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        audit_seed: u64,
        /// Also write the records as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Merge shard files into a summary with an (IS, J) histogram.
    ZooSummarize {
        #[arg(required = true)]
        shards: Vec<PathBuf>,
        #[arg(long, default_value_t = 60)]
        bins: usize,
        /// Histogram CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub returns: PathBuf,
    #[arg(long)]
    pub factors: PathBuf,
    /// Return column used for differencing (implies --zero-beta diff).
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long, value_enum, default_value_t = ZeroBetaArg::Intercept)]
    pub zero_beta: ZeroBetaArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroBetaArg {
    /// Returns are excess returns; the zero-beta rate is zero.
    Zero,
    /// Estimate the zero-beta rate as a cross-sectional intercept.
    Intercept,
    /// Difference all returns against the --reference asset.
    Diff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Fm,
    Cue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeArg {
    Plain,
    Shanken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SizeSurface,
    PowerCurve,
    Contours,
    Theorem2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestArg {
    #[value(name = "fm_t")]
    FmT,
    #[value(name = "shanken_t")]
    ShankenT,
    Drlm,
    #[value(name = "drlm_power")]
    DrlmPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum H0Arg {
    Zero,
    #[value(name = "pseudo_true_fm")]
    PseudoTrueFm,
    #[value(name = "pseudo_true_cue")]
    PseudoTrueCue,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub experiment: Experiment,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Calibrate the population model to these panels instead of the
    /// built-in synthetic design.
    #[arg(long, requires = "factors")]
    pub returns: Option<PathBuf>,
    #[arg(long, requires = "returns")]
    pub factors: Option<PathBuf>,
    /// Assets in the synthetic design.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Factors in the synthetic design.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Baseline factor premium.
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 500)]
    pub t: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = TestArg::Drlm)]
    pub test: TestArg,
    #[arg(long, value_enum, default_value_t = H0Arg::PseudoTrueCue)]
    pub h0: H0Arg,
    /// Comma-separated beta magnitudes (Frobenius norm).
    #[arg(long, allow_hyphen_values = true, default_value = "0.5,1,2,3,5")]
    pub beta_scales: String,
    /// Comma-separated pricing-error magnitudes (Euclidean norm).
    #[arg(long, allow_hyphen_values = true, default_value = "0,0.5,1,2,3")]
    pub e_scales: String,
    /// Beta magnitude for power-curve and theorem2.
    #[arg(long, default_value_t = 2.0)]
    pub beta_scale: f64,
    /// Pricing-error magnitude for power-curve and theorem2.
    #[arg(long, default_value_t = 0.5)]
    pub e_scale: f64,
    /// Comma-separated offsets from the pseudo-true value for power-curve.
    #[arg(long, allow_hyphen_values = true, default_value = "-1,-0.5,-0.25,0,0.25,0.5,1")]
    pub offsets: String,
    /// Long-form CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}
