use biodose::curves::{CurveKind, CurveModel};
use biodose::dose::{classical_split, simplified_bayesian, Casework, GridSpec, ThetaIntegration};
use biodose::fitting::{fit_least_squares, fit_poisson_mle, fit_robust_bayesian, DataPoint, FitOptions, FitResult};
use biodose::io::read_calibration;
use biodose::mcsim::{damage_statistics, simulate, SimConfig, SimCurves};
use biodose::priors::ThetaPrior;
use biodose::selection::{arbitrary_ranges, compare, evidence};

const QUADRATIC_CSV: &str = "\
dn,dg,e,sigma0
0,0.0,0.0012,0.01
0,0.5,0.0263,0.01
0,1.0,0.0703,0.01
0,1.5,0.1442,0.01
0,2.0,0.2361,0.01
0,2.5,0.3555,0.01
0,3.0,0.5004,0.01
0,3.5,0.6678,0.01
0,4.0,0.8613,0.01
0,4.5,1.0782,0.01
0,5.0,1.3197,0.01
";

#[test]
fn csv_to_selection() {
    let data = read_calibration(QUADRATIC_CSV.as_bytes()).unwrap();
    let opts = FitOptions::default();
    let lq = fit_robust_bayesian(&data, &CurveModel::template(CurveKind::LinearQuadraticGamma).unwrap(), &opts).unwrap();
    let lin = fit_robust_bayesian(&data, &CurveModel::template(CurveKind::LinearNeutron).unwrap(), &opts).unwrap();
    let a = evidence(&data, &lq, None).unwrap();
    let b = evidence(&data, &lin, None).unwrap();
    let w = compare(&a, &b).unwrap();
    assert!(w > 1.0, "{w}");
    assert!((compare(&b, &a).unwrap() * w - 1.0).abs() < 1e-12);
    let ranges = arbitrary_ranges(&data, &lq).unwrap();
    let e = evidence(&data, &lq, Some(&ranges.ranges)).unwrap();
    assert!(e.reliability > 0.0);
}

#[test]
fn fit_result_round_trips_through_json() {
    let data = read_calibration(QUADRATIC_CSV.as_bytes()).unwrap();
    let fit = fit_least_squares(&data, &CurveModel::template(CurveKind::LinearQuadraticGamma).unwrap(), &FitOptions::default())
        .unwrap();
    let s = serde_json::to_string(&fit).unwrap();
    let back: FitResult = serde_json::from_str(&s).unwrap();
    assert_eq!(back.model, fit.model);
    assert_eq!(back.sigmas, fit.sigmas);
    assert_eq!(serde_json::to_string(&back).unwrap(), s);
}

#[test]
fn counts_to_poisson_fit() {
    let csv = "dn,dg,e,cells,aberrations\n0.5,0,0.2,1000,200\n1,0,0.39,1000,390\n2,0,0.81,500,405\n";
    let data = read_calibration(csv.as_bytes()).unwrap();
    let fit = fit_poisson_mle(&data).unwrap();
    let alpha = fit.model.params()[0];
    assert!((alpha - 995.0 / 2500.0).abs() < 1e-12);
    assert!(data.iter().all(|p: &DataPoint| p.sigma0 > 0.0));
}

#[test]
fn calibration_to_dose_estimate() {
    let curve = CurveModel::combined_mixed(0.354, 0.0119, 0.0557, 0.0005).unwrap();
    let case = Casework::new(1000, 33).unwrap();
    let json = r#"{"kind":"gauss_rho","rho_hat":0.08695652173913043,"sigma":0.05}"#;
    let prior: ThetaPrior = serde_json::from_str(json).unwrap();
    let p = simplified_bayesian(&curve, &case, &prior, &GridSpec::default(), &ThetaIntegration::default()).unwrap();
    assert!(p.gamma.peak > p.neutron.peak);
    let c = classical_split(&curve, case.y_f(), prior.mean()).unwrap();
    assert!((p.gamma.peak - c.dg).abs() < 0.2 * c.dg);
}

#[test]
fn simulator_matches_dose_split() {
    let curve = CurveModel::combined_mixed(0.832, 0.0164, 0.0492, 0.0005).unwrap();
    let mut cfg = SimConfig::new(1000, 1.2, 200, ThetaPrior::point_mass(0.7).unwrap(), SimCurves::from_mixed(&curve).unwrap());
    cfg.seed = 2;
    let r = simulate(&cfg).unwrap();
    let c = classical_split(&curve, 1.2, 0.7).unwrap();
    assert!((r.mean_dg - c.dg).abs() < 0.1 * c.dg, "{} {}", r.mean_dg, c.dg);
    assert!((r.mean_dn - c.dn).abs() < 0.15 * c.dn, "{} {}", r.mean_dn, c.dn);
    let s = damage_statistics(&r).unwrap();
    assert_eq!(s.cells, 1000);
    let text = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<biodose::mcsim::SimResult>(&text).unwrap(), r);
}
