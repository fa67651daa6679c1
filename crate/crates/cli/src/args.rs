use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const CALIBRATION_HELP: &str = "\
Calibration CSV schema (header required): dn,dg,e,sigma0[,cells,aberrations]
  dn, dg        neutron and gamma dose (Gy)
  e             observed aberration frequency (aberrations/cell)
  sigma0        vertical uncertainty of e; if the column is absent or a cell is
                empty, sqrt(aberrations)/cells is used, which needs cells and
                aberrations on that row
  cells         number of scored cells (optional)
  aberrations   number of aberrations counted (optional)
Lines starting with # are ignored.";

#[derive(Debug, Parser)]
#[command(name = "biodose", version, about = "Calibration curves, model selection and mixed-field dose estimation")]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
pub struct Cli {
    /// Regenerate the bundled walkthrough examples into DIR and exit.
    #[arg(long, value_name = "DIR")]
    pub reference_fixtures: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Fit(FitArgs),
    Select(SelectArgs),
    Dose(DoseArgs),
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineArg {
    Ls,
    Poisson,
    Robust,
    Mixture,
}

/// Fit a calibration curve.
#[derive(Debug, Args, Serialize)]
#[command(after_help = CALIBRATION_HELP.to_owned() + "\n\nResidual CSV columns: dn,dg,e,yfit,weight")]
pub struct FitArgs {
    /// Calibration CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Curve kind, e.g. linear_quadratic_gamma or polynomial:3.
    #[arg(long, required_unless_present = "template")]
    pub kind: Option<String>,
    /// Curve JSON used as the fitting template (structure and starting values).
    #[arg(long, conflicts_with = "kind")]
    pub template: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EngineArg::Robust)]
    pub engine: EngineArg,
    /// Outlier probability for the mixture engine.
    #[arg(long, default_value_t = 0.05)]
    pub phi: f64,
    /// Hold Y0 at the template value.
    #[arg(long)]
    pub fixed_y0: bool,
    /// Least squares: propagate the sigma_x column into the variances.
    #[arg(long)]
    pub horizontal: bool,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-point residuals as CSV.
    #[arg(long)]
    pub residuals: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeRule {
    /// lambda +- 2 sigma from least squares
    K2,
    /// tightest span leaving at most three points outside the swept band
    Arbitrary,
}

/// Rank candidate curve kinds by their reliability.
#[derive(Debug, Args, Serialize)]
#[command(after_help = CALIBRATION_HELP)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated kinds, e.g. linear_neutron,linear_quadratic_gamma,polynomial:3.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub kinds: Vec<String>,
    #[arg(long, value_enum, default_value_t = RangeRule::K2)]
    pub ranges: RangeRule,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Classical,
    Quasi,
    Simplified,
    Full,
    Generalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationArg {
    Adaptive,
    Mc,
}

/// Estimate absorbed doses from observed aberration counts.
#[derive(Debug, Args, Serialize)]
#[command(after_help = "\
Case: w=<cells>,u=<aberrations>[,sigma_yf=<s>] or yf=<frequency> (classical and quasi only).
Prior JSON: {\"kind\": \"gauss_theta\", \"theta_hat\": .., \"sigma\": ..}, gauss_rho {rho_hat, sigma},
  beta, uniform {min, max} or point_mass {theta}; an array of priors for --method generalized.
Parameter prior JSON: array over [Y0, params...] of gamma {k, z}, gaussian {mean, sd}
  or point_mass {value}.
Posterior CSV columns: dose,density (density normalized to unit area).")]
pub struct DoseArgs {
    /// Curve JSON.
    #[arg(long)]
    pub curve: PathBuf,
    #[arg(long)]
    pub case: String,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Prior on the gamma fraction theta.
    #[arg(long, conflicts_with = "theta")]
    pub prior: Option<PathBuf>,
    /// Known gamma fraction (point-mass prior).
    #[arg(long)]
    pub theta: Option<f64>,
    /// Priors on the curve parameters (full and generalized methods).
    #[arg(long)]
    pub param_priors: Option<PathBuf>,
    #[arg(long, env = "BIODOSE_SEED")]
    pub seed: Option<u64>,
    /// D_max,points; D_max may be `auto`.
    #[arg(long, default_value = "auto,2000")]
    pub grid: String,
    /// Monte Carlo samples.
    #[arg(long, default_value_t = biodose::dose::DEFAULT_MC_SAMPLES)]
    pub samples: usize,
    /// Theta integration for the simplified method.
    #[arg(long, value_enum, default_value_t = IntegrationArg::Adaptive)]
    pub integration: IntegrationArg,
    /// Quasi method: include the change-of-variables factor.
    #[arg(long)]
    pub jacobian: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Posterior grids are written to <PREFIX>.<component>.csv.
    #[arg(long, value_name = "PREFIX")]
    pub posterior_csv: Option<PathBuf>,
}

/// Run the cell-irradiation Monte Carlo simulator.
#[derive(Debug, Args, Serialize)]
#[command(after_help = "\
Config JSON: {\"cells\", \"target_yf\", \"repetitions\", \"theta\": <prior>,
  \"curves\": {\"neutron\": <curve>, \"gamma\": <curve>}, \"dose_map\" (optional,
  default {\"kind\": \"linear\", \"slope\": 0.012}), \"seed\" (optional)}.
Per-cell CSV columns: cell,u_n,u_g (last repetition).")]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, env = "BIODOSE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cells_csv: Option<PathBuf>,
}
