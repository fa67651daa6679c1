use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use biodose::curves::{CurveKind, CurveModel};
use biodose::dose::{
    classical_split, full_bayesian, generalized_bayesian, quasi_bayesian, simplified_bayesian, Casework, DosePosterior,
    GridSpec, McSpec, QuasiOptions, ThetaIntegration,
};
use biodose::fitting::{
    fit_least_squares, fit_mixture, fit_poisson_mle, fit_robust_bayesian, uncertainties_cramer_rao, uncertainties_hessian,
    DataPoint, FitOptions, FitResult, Y0Mode,
};
use biodose::io::read_calibration_path;
use biodose::mcsim::{damage_statistics, simulate as run_simulation, SimConfig};
use biodose::priors::{ParamPrior, ThetaPrior};
use biodose::selection::{arbitrary_ranges, evidence};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{DoseArgs, EngineArg, FitArgs, IntegrationArg, MethodArg, RangeRule, SelectArgs, SimulateArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] biodose::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    /// Output was written but the numerics did not succeed.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: Vec<String>,
    pub options: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub timestamp: String,
}

fn manifest(subcommand: &str, inputs: &[&Path], options: &impl Serialize, seed: Option<u64>) -> RunManifest {
    RunManifest {
        subcommand: subcommand.into(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        options: serde_json::to_value(options).unwrap_or(Value::Null),
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        timestamp: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::File { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.into(), source })
}

fn emit(out: Option<&Path>, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text).map_err(|source| CliError::File { path: p.into(), source }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|source| CliError::File { path: "<stdout>".into(), source })
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|source| CliError::File { path: path.into(), source })?;
    Ok(csv::Writer::from_writer(f))
}

/// `name` or `polynomial:N`.
pub fn parse_kind(spec: &str) -> Result<CurveModel> {
    let spec = spec.trim();
    if let Some(n) = spec.strip_prefix("polynomial:") {
        let n: usize = n.parse().map_err(|_| CliError::Usage(format!("bad polynomial degree in `{spec}`")))?;
        if n == 0 {
            return Err(CliError::Usage("polynomial degree must be at least 1".into()));
        }
        return Ok(CurveModel::polynomial(vec![0.0; n])?);
    }
    let kind: CurveKind = serde_json::from_value(Value::String(spec.into())).map_err(|_| {
        let names: Vec<&str> = CurveKind::ALL.iter().map(|k| k.name()).collect();
        CliError::Usage(format!("unknown curve kind `{spec}`; expected one of {}", names.join(", ")))
    })?;
    CurveModel::template(kind).map_err(|_| {
        CliError::Usage(format!("{spec} needs structural information; pass --template <curve.json> or use polynomial:N"))
    })
}

fn sigmas_value(r: biodose::Result<Vec<f64>>) -> Value {
    match r {
        Ok(s) => json!(s),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn run_fit(data: &[DataPoint], template: &CurveModel, args: &FitArgs) -> Result<FitResult> {
    let opts = FitOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        y0: if args.fixed_y0 { Y0Mode::Fixed } else { Y0Mode::Free },
        horizontal: args.horizontal,
    };
    Ok(match args.engine {
        EngineArg::Ls => fit_least_squares(data, template, &opts)?,
        EngineArg::Poisson => {
            if template.kind() != CurveKind::LinearNeutron {
                return Err(CliError::Usage(format!(
                    "the poisson engine fits linear_neutron only, not {}",
                    template.kind()
                )));
            }
            fit_poisson_mle(data)?
        }
        EngineArg::Robust => fit_robust_bayesian(data, template, &opts)?,
        EngineArg::Mixture => fit_mixture(data, template, args.phi, &opts)?,
    })
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let template = match (&args.kind, &args.template) {
        (_, Some(t)) => read_json::<CurveModel>(t)?,
        (Some(k), None) => parse_kind(k)?,
        (None, None) => return Err(CliError::Usage("--kind or --template is required".into())),
    };
    if args.engine == EngineArg::Poisson && template.kind() != CurveKind::LinearNeutron {
        return Err(CliError::Usage(format!("the poisson engine fits linear_neutron only, not {}", template.kind())));
    }
    let data = read_calibration_path(&args.data)?;
    let result = run_fit(&data, &template, args)?;
    let (hessian, cramer_rao) = if result.converged {
        (sigmas_value(uncertainties_hessian(&data, &result)), sigmas_value(uncertainties_cramer_rao(&data, &result)))
    } else {
        (Value::Null, Value::Null)
    };
    let mut inputs = vec![args.data.as_path()];
    if let Some(t) = &args.template {
        inputs.push(t);
    }
    let doc = json!({
        "manifest": manifest("fit", &inputs, args, None),
        "result": result,
        "uncertainties": { "hessian": hessian, "cramer_rao": cramer_rao },
    });
    emit(args.out.as_deref(), &doc)?;
    if let Some(path) = &args.residuals {
        let yfit = result.predictions(&data)?;
        let mut w = csv_writer(path)?;
        w.write_record(["dn", "dg", "e", "yfit", "weight"])?;
        for ((p, y), g) in data.iter().zip(&yfit).zip(&result.weights) {
            w.serialize((p.dn, p.dg, p.e, *y, *g))?;
        }
        w.flush().map_err(|source| CliError::File { path: path.clone(), source })?;
    }
    if !result.converged {
        return Err(CliError::Numerical(format!("fit did not converge after {} iterations", result.iterations)));
    }
    Ok(())
}

pub fn select(args: &SelectArgs) -> Result<()> {
    if args.kinds.is_empty() || args.kinds.iter().any(|k| k.trim().is_empty()) {
        return Err(CliError::Usage("--kinds needs at least one curve kind".into()));
    }
    let templates = args.kinds.iter().map(|k| parse_kind(k)).collect::<Result<Vec<_>>>()?;
    let data = read_calibration_path(&args.data)?;
    let mut rows = Vec::new();
    for (name, t) in args.kinds.iter().zip(&templates) {
        let f = fit_robust_bayesian(&data, t, &FitOptions::default())?;
        if !f.converged {
            return Err(CliError::Numerical(format!("robust fit of {name} did not converge")));
        }
        let (ev, excluded) = match args.ranges {
            RangeRule::K2 => (evidence(&data, &f, None)?, None),
            RangeRule::Arbitrary => {
                let r = arbitrary_ranges(&data, &f)?;
                (evidence(&data, &f, Some(&r.ranges))?, Some(r.excluded))
            }
        };
        rows.push((name.trim().to_string(), ev, excluded));
    }
    rows.sort_by(|a, b| b.1.ln_reliability.total_cmp(&a.1.ln_reliability));
    let ln: Vec<f64> = rows.iter().map(|r| r.1.ln_reliability).collect();
    let ln_w: Vec<Vec<f64>> = ln.iter().map(|a| ln.iter().map(|b| a - b).collect()).collect();
    let w: Vec<Vec<f64>> = ln_w.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
    let ranking: Vec<Value> = rows
        .iter()
        .map(|(name, ev, excluded)| {
            let mut v = json!({
                "kind": name,
                "reliability": ev.reliability,
                "ln_reliability": ev.ln_reliability,
                "ockham": ev.ockham,
                "fit_term": ev.fit_term,
                "ranges": ev.lambda_ranges,
                "sigmas": ev.lambda_sigmas,
                "indices": ev.indices,
                "model": ev.model,
            });
            if let Some(x) = excluded {
                v["excluded"] = json!(x);
            }
            v
        })
        .collect();
    let doc = json!({
        "manifest": manifest("select", &[&args.data], args, None),
        "ranking": ranking,
        "order": rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>(),
        "w_matrix": w,
        "ln_w_matrix": ln_w,
    });
    emit(args.out.as_deref(), &doc)
}

#[derive(Debug)]
enum CaseSpec {
    Counts(Casework),
    Frequency(f64),
}

impl CaseSpec {
    fn y_f(&self) -> f64 {
        match self {
            CaseSpec::Counts(c) => c.y_f(),
            CaseSpec::Frequency(y) => *y,
        }
    }

    fn counts(&self, method: &str) -> Result<&Casework> {
        match self {
            CaseSpec::Counts(c) => Ok(c),
            CaseSpec::Frequency(_) => Err(CliError::Usage(format!("--method {method} needs counts: --case w=<cells>,u=<aberrations>"))),
        }
    }
}

fn parse_case(s: &str) -> Result<CaseSpec> {
    let bad = |m: String| CliError::Usage(format!("--case `{s}`: {m}"));
    let (mut w, mut u, mut yf, mut sig) = (None, None, None, None);
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("`{part}` is not key=value")))?;
        let v = v.trim();
        match k.trim() {
            "w" | "cells" => w = Some(v.parse::<u64>().map_err(|_| bad(format!("bad cell count `{v}`")))?),
            "u" | "aberrations" => u = Some(v.parse::<u64>().map_err(|_| bad(format!("bad aberration count `{v}`")))?),
            "yf" | "y_f" => yf = Some(v.parse::<f64>().map_err(|_| bad(format!("bad frequency `{v}`")))?),
            "sigma_yf" => sig = Some(v.parse::<f64>().map_err(|_| bad(format!("bad sigma_yf `{v}`")))?),
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    match (w, u, yf) {
        (Some(w), Some(u), None) => {
            let c = Casework::new(w, u)?;
            Ok(CaseSpec::Counts(match sig {
                Some(s) => c.with_sigma_yf(s)?,
                None => c,
            }))
        }
        (None, None, Some(y)) if y.is_finite() && y >= 0.0 => Ok(CaseSpec::Frequency(y)),
        (None, None, Some(_)) => Err(bad("frequency must be finite and >= 0".into())),
        _ => Err(bad("give either w and u, or yf".into())),
    }
}

fn parse_grid(s: &str) -> Result<GridSpec> {
    let bad = || CliError::Usage(format!("--grid `{s}`: expected D_max,points with D_max a number or `auto`"));
    let (d, n) = s.split_once(',').ok_or_else(bad)?;
    let points = n.trim().parse::<usize>().map_err(|_| bad())?;
    let d_max = match d.trim() {
        "auto" => None,
        v => Some(v.parse::<f64>().map_err(|_| bad())?),
    };
    Ok(GridSpec { d_max, points })
}

fn component_json(name: &str, p: &DosePosterior) -> Value {
    json!({
        "name": name,
        "peak": p.peak,
        "sigma": p.sigma,
        "normalization": p.normalization,
        "mean": p.mean(),
        "peak_at_boundary": p.peak_at_boundary,
        "mode_count": p.mode_count(),
    })
}

fn write_posterior_csv(prefix: &Path, name: &str, p: &DosePosterior) -> Result<()> {
    let mut path = prefix.as_os_str().to_owned();
    path.push(format!(".{name}.csv"));
    let path = PathBuf::from(path);
    let mut w = csv_writer(&path)?;
    w.write_record(["dose", "density"])?;
    for (d, v) in p.dose.iter().zip(p.normalized_density()) {
        w.serialize((d, v))?;
    }
    w.flush().map_err(|source| CliError::File { path, source })
}

pub fn dose(args: &DoseArgs) -> Result<()> {
    let curve: CurveModel = read_json(&args.curve)?;
    let case = parse_case(&args.case)?;
    let grid = parse_grid(&args.grid)?;
    let seed = args.seed.unwrap_or(0);
    let method_name = serde_json::to_value(args.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let param_priors: Vec<ParamPrior> = match &args.param_priors {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let mut inputs = vec![args.curve.as_path()];
    inputs.extend(args.prior.as_deref());
    inputs.extend(args.param_priors.as_deref());
    let single_prior = || -> Result<ThetaPrior> {
        match (&args.theta, &args.prior) {
            (Some(t), None) => Ok(ThetaPrior::point_mass(*t)?),
            (None, Some(p)) => Ok(read_json(p)?),
            _ => Err(CliError::Usage(format!("--method {method_name} needs --theta or --prior"))),
        }
    };
    let uses_mc = matches!(args.method, MethodArg::Full | MethodArg::Generalized)
        || (args.method == MethodArg::Simplified && args.integration == IntegrationArg::Mc);
    let mc = McSpec { samples: args.samples, seed };

    let mut components: Vec<(String, DosePosterior)> = Vec::new();
    let mut extra = json!({});
    match args.method {
        MethodArg::Classical => {
            let theta = match (args.theta, &args.prior) {
                (Some(t), None) => t,
                (None, Some(p)) => read_json::<ThetaPrior>(p)?.mean(),
                _ => return Err(CliError::Usage("--method classical needs --theta or --prior".into())),
            };
            let s = classical_split(&curve, case.y_f(), theta)?;
            extra = json!({ "theta": theta, "y_f": case.y_f(), "split": { "dg": s.dg, "dn": s.dn } });
        }
        MethodArg::Quasi => {
            let p = quasi_bayesian(&curve, case.y_f(), &single_prior()?, &grid, &QuasiOptions { jacobian: args.jacobian })?;
            components.push(("gamma".into(), p.gamma));
            components.push(("neutron".into(), p.neutron));
        }
        MethodArg::Simplified => {
            let integration = match args.integration {
                IntegrationArg::Adaptive => ThetaIntegration::default(),
                IntegrationArg::Mc => ThetaIntegration::MonteCarlo { samples: args.samples, seed },
            };
            let p = simplified_bayesian(&curve, case.counts("simplified")?, &single_prior()?, &grid, &integration)?;
            components.push(("gamma".into(), p.gamma));
            components.push(("neutron".into(), p.neutron));
        }
        MethodArg::Full => {
            let p = full_bayesian(&curve, &param_priors, case.counts("full")?, &single_prior()?, &grid, &mc)?;
            components.push(("gamma".into(), p.gamma));
            components.push(("neutron".into(), p.neutron));
        }
        MethodArg::Generalized => {
            if args.theta.is_some() {
                return Err(CliError::Usage("--method generalized takes a JSON array of priors via --prior".into()));
            }
            let path = args.prior.as_ref().ok_or_else(|| CliError::Usage("--method generalized needs --prior".into()))?;
            let priors: Vec<ThetaPrior> = read_json(path)?;
            let g = generalized_bayesian(&curve, &param_priors, case.counts("generalized")?, &priors, &grid, &mc)?;
            let names: Vec<String> = if g.components.len() == 2 {
                vec!["neutron".into(), "gamma".into()]
            } else {
                (0..g.components.len()).map(|i| format!("r{i}")).collect()
            };
            extra = json!({ "rejection_rate": g.rejection_rate, "heavy_rejection": g.heavy_rejection });
            components.extend(names.into_iter().zip(g.components));
        }
    }
    let mut doc = json!({
        "manifest": manifest("dose", &inputs, args, uses_mc.then_some(seed)),
        "method": method_name,
        "components": components.iter().map(|(n, p)| component_json(n, p)).collect::<Vec<_>>(),
    });
    if let (Value::Object(d), Value::Object(e)) = (&mut doc, extra) {
        d.extend(e);
    }
    emit(args.out.as_deref(), &doc)?;
    if let Some(prefix) = &args.posterior_csv {
        for (n, p) in &components {
            write_posterior_csv(prefix, n, p)?;
        }
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg: SimConfig = read_json(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let result = run_simulation(&cfg)?;
    let stats = damage_statistics(&result).ok();
    let doc = json!({
        "manifest": manifest("simulate", &[&args.config], args, Some(cfg.seed)),
        "result": result,
        "damage_statistics": stats,
    });
    emit(args.out.as_deref(), &doc)?;
    if let Some(path) = &args.cells_csv {
        let mut w = csv_writer(path)?;
        w.write_record(["cell", "u_n", "u_g"])?;
        for (i, c) in result.damage_table.iter().enumerate() {
            w.write_record([i.to_string(), c.u_n.to_string(), c.u_g.to_string()])?;
        }
        w.flush().map_err(|source| CliError::File { path: path.clone(), source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_by_name_and_degree() {
        assert_eq!(parse_kind("linear_neutron").unwrap().kind(), CurveKind::LinearNeutron);
        assert_eq!(parse_kind(" linear_quadratic_gamma ").unwrap().kind(), CurveKind::LinearQuadraticGamma);
        assert_eq!(parse_kind("polynomial:3").unwrap().params().len(), 3);
        assert!(matches!(parse_kind("polynomial:0"), Err(CliError::Usage(_))));
        assert!(matches!(parse_kind("polynomial:x"), Err(CliError::Usage(_))));
        match parse_kind("cubic") {
            Err(CliError::Usage(m)) => assert!(m.contains("linear_neutron"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn case_forms() {
        match parse_case("w=1000,u=33").unwrap() {
            CaseSpec::Counts(c) => assert!((c.y_f() - 0.033).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        match parse_case("yf=1.2").unwrap() {
            CaseSpec::Frequency(y) => assert_eq!(y, 1.2),
            other => panic!("{other:?}"),
        }
        assert!(parse_case("w=1000,u=33,sigma_yf=0.01").is_ok());
        for bad in ["w=1000", "yf=-1", "yf=1,w=10,u=1", "q=3", "w=ten,u=1", "yf"] {
            assert!(matches!(parse_case(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn grid_forms() {
        let g = parse_grid("auto,2000").unwrap();
        assert_eq!((g.d_max, g.points), (None, 2000));
        let g = parse_grid("8, 500").unwrap();
        assert_eq!((g.d_max, g.points), (Some(8.0), 500));
        for bad in ["auto", "x,10", "5,ten"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 2);
    }
}
