//! Bundled walkthrough examples, regenerated with `--reference-fixtures`.

use std::fs;
use std::path::Path;

use biodose::curves::CurveModel;
use biodose::mcsim::{SimConfig, SimCurves};
use biodose::priors::{rho_from_theta, ThetaPrior};

use crate::args::{DoseArgs, IntegrationArg, MethodArg, SimulateArgs};
use crate::commands::{self, CliError};

const WALKTHROUGH: &str = "\
# Walkthrough examples

Every JSON result in this directory was produced by the command shown.

## Classical split of a mixed-field dose

`split_curve.json` is a combined curve with alpha = 0.832, beta = 0.0164,
gamma = 0.0492 and Y0 = 0.0005. For an observed frequency of 1.2 and a gamma
fraction of one half:

    biodose dose --curve split_curve.json --case yf=1.2 --method classical --theta 0.5 --out split_theta_0.5.json

Both doses come out near 1.314 Gy. `split_theta_<t>.json` repeats this for
t = 0.1, ..., 0.9.

## Quasi-Bayesian split with an uninformative prior

    biodose dose --curve split_curve.json --case yf=1.2 --method quasi --prior prior_beta.json \\
        --out quasi_beta.json --posterior-csv quasi_beta

The density peaks agree with the classical split at theta = 0.5.

## Low-dose posterior

`low_dose_curve.json` has alpha = 0.354, beta = 0.0119, gamma = 0.0557 and
Y0 = 0.0005. The case is 33 aberrations in 1000 cells, with a normal prior on
the neutron-to-gamma ratio centred on a gamma fraction of 0.92:

    biodose dose --curve low_dose_curve.json --case w=1000,u=33 --method simplified \\
        --prior low_dose_prior.json --out low_dose_simplified.json --posterior-csv low_dose_simplified

## Simulator

    biodose simulate --config simulate_half.json --out simulate_half.json.out --cells-csv simulate_half_cells.csv
";

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("fixture values serialize");
    text.push('\n');
    fs::write(path, text).map_err(|source| CliError::File { path: path.into(), source })
}

fn dose_args(dir: &Path, curve: &str, case: &str, method: MethodArg, out: &str) -> DoseArgs {
    DoseArgs {
        curve: dir.join(curve),
        case: case.into(),
        method,
        prior: None,
        theta: None,
        param_priors: None,
        seed: None,
        grid: "auto,2000".into(),
        samples: biodose::dose::DEFAULT_MC_SAMPLES,
        integration: IntegrationArg::Adaptive,
        jacobian: false,
        out: Some(dir.join(out)),
        posterior_csv: None,
    }
}

pub fn write(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::File { path: dir.into(), source })?;
    let split = CurveModel::combined_mixed(0.832, 0.0164, 0.0492, 0.0005)?;
    let low = CurveModel::combined_mixed(0.354, 0.0119, 0.0557, 0.0005)?;
    write_json(&dir.join("split_curve.json"), &split)?;
    write_json(&dir.join("low_dose_curve.json"), &low)?;
    write_json(&dir.join("prior_beta.json"), &ThetaPrior::BetaUninformative)?;
    write_json(&dir.join("low_dose_prior.json"), &ThetaPrior::gaussian_rho(rho_from_theta(0.92)?, 0.05)?)?;

    for k in 1..=9 {
        let t = k as f64 / 10.0;
        let mut a = dose_args(dir, "split_curve.json", "yf=1.2", MethodArg::Classical, &format!("split_theta_{t}.json"));
        a.theta = Some(t);
        commands::dose(&a)?;
    }

    let mut a = dose_args(dir, "split_curve.json", "yf=1.2", MethodArg::Quasi, "quasi_beta.json");
    a.prior = Some(dir.join("prior_beta.json"));
    a.posterior_csv = Some(dir.join("quasi_beta"));
    commands::dose(&a)?;

    let mut a = dose_args(dir, "low_dose_curve.json", "w=1000,u=33", MethodArg::Simplified, "low_dose_simplified.json");
    a.prior = Some(dir.join("low_dose_prior.json"));
    a.posterior_csv = Some(dir.join("low_dose_simplified"));
    commands::dose(&a)?;

    let mut cfg = SimConfig::new(1000, 1.2, 500, ThetaPrior::point_mass(0.5)?, SimCurves::from_mixed(&split)?);
    cfg.seed = 1;
    write_json(&dir.join("simulate_half.json"), &cfg)?;
    commands::simulate(&SimulateArgs {
        config: dir.join("simulate_half.json"),
        seed: None,
        out: Some(dir.join("simulate_half.json.out")),
        cells_csv: Some(dir.join("simulate_half_cells.csv")),
    })?;

    let readme = dir.join("WALKTHROUGH.md");
    fs::write(&readme, WALKTHROUGH).map_err(|source| CliError::File { path: readme, source })
}
