use cavwave::acoustics::{assemble_t_and_w, eigenvalue_shift, PatchSnapshot, PatchState};
use cavwave::coupling::{picard_iterate, piston_pipeline, IterateLedger, PISTON_C_MAX};
use cavwave::geometry::{poincare_certificate, BasisKind, ModalField, SpectralBasis};
use cavwave::magnus::{convergence_certificate, magnus_terms, matrix_exponential, TimeDependentGenerator};
use cavwave::membrane::ModalSeries;
use cavwave::oracle::{compare, fdtd_coupled_oracle, linear_propagator, FdtdSetup, Norm, OracleConfig, Series};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{ScenarioConfig, SideName};
use crate::output::{complex_table, mode_label, series_channels, OutDir};
use crate::scenario::Scenario;
use crate::CliError;

// the caller fills in the output directory
impl From<std::io::Error> for CliError {
    fn from(source: std::io::Error) -> Self {
        CliError::Io {
            path: Default::default(),
            source,
        }
    }
}

/// Leading cavity modes kept by the eigenvalue diagnostic.
const EIGS_MAX: usize = 64;
const POINCARE_SAMPLES: usize = 1000;
const VALIDATE_NODES: usize = 100;

/// Summary line of one subcommand and whether every check passed.
pub struct Outcome {
    pub summary: String,
    pub pass: bool,
}

fn ratio_list(r: &[(usize, f64)]) -> Value {
    r.iter().map(|(k, v)| json!({ "iterate": k, "ratio": v })).collect()
}

fn ledger_json(cfg: &ScenarioConfig, sc: &Scenario, led: &IterateLedger) -> Value {
    let (ur, pr) = (led.u_ratios(), led.p_ratios());
    let worst = ur.iter().chain(&pr).map(|r| r.1).fold(0.0, f64::max);
    json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "coupling_strength": cfg.strength(),
        "eps": sc.coupling.eps,
        "warning": sc.coupling.warning(),
        "iterations": led.p.len() - 1,
        "u_corrections": led.u_corrections,
        "p_corrections": led.p_corrections,
        "u_ratios": ratio_list(&ur),
        "p_ratios": ratio_list(&pr),
        "max_ratio": worst,
    })
}

fn probe_channels(basis: &SpectralBasis, p: &ModalSeries, probes: &[Vec<f64>]) -> Vec<Vec<num_complex::Complex64>> {
    let vals = basis.values_on(probes);
    (0..probes.len())
        .map(|k| {
            (0..p.grid.len())
                .map(|j| (0..basis.len()).map(|n| p.modes[n][j] * vals[(k, n)]).sum())
                .collect()
        })
        .collect()
}

fn probe_label(x: &[f64]) -> String {
    let c: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
    format!("p({})", c.join(","))
}

pub fn simulate(cfg: &ScenarioConfig, sc: &Scenario, out: &mut OutDir) -> Result<Outcome, CliError> {
    let led = picard_iterate(&sc.coupling, &sc.source, &sc.sys, &sc.grid, cfg.numerics.picard_iterations)?;
    let times = sc.grid.times();
    let stride = cfg.numerics.output_stride;
    let p = led.last_p();

    let labels: Vec<String> = (0..sc.sys.cavity.len()).map(|n| mode_label("p", &sc.sys.cavity, n)).collect();
    let (h, rows) = complex_table(&times, &labels, &series_channels(p), stride);
    out.csv("pressure_modes.csv", &h, rows.into_iter())?;

    let mut labels = Vec::new();
    let mut chans = Vec::new();
    for (i, (pb, u)) in sc.sys.patches.iter().zip(led.last_u()).enumerate() {
        for n in 0..pb.len() {
            labels.push(mode_label(&format!("u{i}"), pb, n));
            chans.push(u.modes[n].as_slice());
        }
    }
    let (h, rows) = complex_table(&times, &labels, &chans, stride);
    out.csv("membrane_modes.csv", &h, rows.into_iter())?;

    let probes = probe_channels(&sc.sys.cavity, p, &cfg.probes);
    let labels: Vec<String> = cfg.probes.iter().map(|x| probe_label(x)).collect();
    let chans: Vec<&[num_complex::Complex64]> = probes.iter().map(|c| c.as_slice()).collect();
    let (h, rows) = complex_table(&times, &labels, &chans, stride);
    out.csv("probes.csv", &h, rows.into_iter())?;

    let ledger = ledger_json(cfg, sc, &led);
    out.json("ledger.json", &ledger)?;
    Ok(Outcome {
        summary: format!(
            "simulate: {} steps, {} cavity modes, max correction ratio {:.3e}",
            sc.grid.steps,
            sc.sys.cavity.len(),
            ledger["max_ratio"].as_f64().unwrap_or(0.0)
        ),
        pass: true,
    })
}

/// Largest |u| of a modal state over the patch quadrature grid.
fn patch_peak(pb: &SpectralBasis, coeffs: &[f64]) -> f64 {
    pb.grid().iter().map(|(y, _)| pb.reconstruct(coeffs, y).abs()).fold(0.0, f64::max)
}

pub fn eigs(cfg: &ScenarioConfig, sc: &Scenario, out: &mut OutDir) -> Result<Outcome, CliError> {
    // membrane response to the external pressure alone, frozen where it peaks
    let led = picard_iterate(&sc.coupling, &sc.source, &sc.sys, &sc.grid, 2)?;
    let u1 = &led.u[1];
    let j = (0..sc.grid.len())
        .max_by(|&a, &b| {
            let amp = |j: usize| u1.iter().flat_map(|s| s.modes.iter().map(move |m| m[j].re.abs())).sum::<f64>();
            amp(a).total_cmp(&amp(b))
        })
        .unwrap_or(0);
    let snaps = u1
        .iter()
        .map(|s| PatchSnapshot::from_series(s, j))
        .collect::<cavwave::Result<Vec<_>>>()?;
    let peak = sc
        .sys
        .patches
        .iter()
        .zip(&snaps)
        .map(|(pb, s)| patch_peak(pb, &s.u))
        .fold(0.0, f64::max);
    let eps = sc.coupling.eps;
    let scale = if peak > 0.0 { eps / peak } else { 0.0 };
    let snaps: Vec<PatchSnapshot> = snaps.iter().map(|s| s.scaled(scale)).collect();
    let states: Vec<PatchState> = sc
        .sys
        .patches
        .iter()
        .zip(&snaps)
        .enumerate()
        .map(|(patch, (basis, snap))| PatchState { patch, basis, snap })
        .collect();
    let ops = assemble_t_and_w(&sc.sys.geom, &sc.sys.cavity, &sc.sys.medium, &states)?;

    let k = sc.sys.cavity.len().min(EIGS_MAX);
    let lam: Vec<f64> = sc.sys.cavity.eigenvalues()[..k].to_vec();
    let v = ops.v.view((0, 0), (k, k)).into_owned();
    let dense: Vec<f64> = (DMatrix::from_diagonal(&DVector::from_vec(lam.clone())) - &v)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .collect();
    let mut pass = true;
    let mut rows = Vec::new();
    for n in 0..k {
        let idx = &sc.sys.cavity.modes()[n].index;
        match (eigenvalue_shift(n, &lam, &v, 1), eigenvalue_shift(n, &lam, &v, 2)) {
            (Ok(s1), Ok(s2)) => {
                let approx = lam[n] + s2;
                let exact = dense
                    .iter()
                    .copied()
                    .min_by(|a, b| (a - approx).abs().total_cmp(&(b - approx).abs()))
                    .unwrap_or(f64::NAN);
                let r2 = (exact - approx).abs();
                pass &= r2 <= cfg.tolerances.eigs * lam[n].abs().max(1.0);
                rows.push(json!({
                    "index": idx, "lambda": lam[n], "shift1": s1, "shift2": s2,
                    "dense": exact, "residual1": (exact - lam[n] - s1).abs(), "residual2": r2,
                    "degenerate": false,
                }));
            }
            _ => rows.push(json!({ "index": idx, "lambda": lam[n], "degenerate": true })),
        }
    }
    let membrane: Vec<Value> = sc
        .sys
        .patches
        .iter()
        .enumerate()
        .flat_map(|(i, pb)| {
            let op = sc.sys.membrane;
            pb.modes()
                .iter()
                .map(move |m| json!({ "patch": i, "index": m.index, "gamma": m.eigenvalue, "stiffness": op.stiffness(m.eigenvalue) }))
                .collect::<Vec<_>>()
        })
        .collect();
    let report = json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "command": "eigs",
        "eps": eps,
        "snapshot_time": sc.grid.t(j),
        "v_norm": ops.v_norm(),
        "t_norm": ops.t_norm(),
        "tolerance": cfg.tolerances.eigs,
        "cavity": rows,
        "membrane": membrane,
        "pass": pass,
    });
    out.json("eigs.json", &report)?;
    Ok(Outcome {
        summary: format!("eigs: {k} cavity modes, |V| = {:.3e}, {}", ops.v_norm(), verdict(pass)),
        pass,
    })
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.len(), |i, j| rows[i][j])
}

pub fn magnus_check(cfg: &ScenarioConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let m = cfg.magnus.clone().unwrap_or_default();
    let (a0, a1) = (matrix(&m.a0), matrix(&m.a1));
    let dim = a0.nrows();
    let gen = TimeDependentGenerator::new(dim, move |t| &a0 + &a1 * t);
    let cert = convergence_certificate(&gen, m.tau, m.t)?;
    let terms = magnus_terms(&gen, m.tau, m.t, 3)?;
    let cols = (0..dim)
        .map(|k| linear_propagator(&gen, m.tau, m.t, &DVector::from_fn(dim, |i, _| if i == k { 1.0 } else { 0.0 })))
        .collect::<cavwave::Result<Vec<_>>>()?;
    let exact = DMatrix::from_columns(&cols);
    let errors = (1..=3)
        .map(|o| Ok((matrix_exponential(&terms.truncated(o))? - &exact).amax()))
        .collect::<cavwave::Result<Vec<f64>>>()?;
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let within = cfg.tolerances.magnus.is_none_or(|tol| errors[2] <= tol);
    let pass = cert.ok && monotone && within;
    let report = json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "command": "magnus-check",
        "tau": m.tau,
        "t": m.t,
        "certificate": cert.value,
        "certificate_ok": cert.ok,
        "term_norms": terms.terms.iter().map(|g| g.norm()).collect::<Vec<_>>(),
        "errors_by_order": errors,
        "monotone": monotone,
        "tolerance": cfg.tolerances.magnus,
        "pass": pass,
    });
    out.json("magnus_check.json", &report)?;
    Ok(Outcome {
        summary: format!(
            "magnus-check: certificate {:.4} (< pi: {}), order-3 error {:.3e}, {}",
            cert.value,
            cert.ok,
            errors[2],
            verdict(pass)
        ),
        pass,
    })
}

pub fn piston(cfg: &ScenarioConfig, sc: &Scenario, out: &mut OutDir) -> Result<Outcome, CliError> {
    let led = picard_iterate(&sc.coupling, &sc.source, &sc.sys, &sc.grid, cfg.numerics.picard_iterations)?;
    let eps = sc.coupling.eps;
    // keep only the first eigenmode of each patch, real part, peak |u| = eps
    let u: Vec<ModalSeries> = sc
        .sys
        .patches
        .iter()
        .zip(led.last_u())
        .map(|(pb, s)| {
            let phi = patch_peak(pb, &(0..pb.len()).map(|n| if n == 0 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
            let amax = s.modes[0].iter().map(|v| v.re.abs()).fold(0.0, f64::max);
            let k = if amax * phi > 0.0 { eps / (amax * phi) } else { 0.0 };
            let mut m = ModalSeries::zeros(sc.grid, pb.len());
            m.modes[0] = s.modes[0].iter().map(|v| num_complex::Complex64::new(v.re * k, 0.0)).collect();
            m
        })
        .collect();
    let rep = piston_pipeline(&sc.sys, &u, eps, &sc.grid)?;
    let bound = rep.c_piston * eps * rep.p_full.norm();
    let consistent = rep.deviation <= bound;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checked = 0;
    let mut failures = 0;
    for pb in sc.sys.patches.iter().filter(|pb| pb.kind() == BasisKind::PatchDirichlet) {
        for _ in 0..POINCARE_SAMPLES {
            let c: Vec<f64> = (0..pb.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cert = poincare_certificate(pb, &ModalField::new(c), eps, rep.c_piston)?;
            checked += 1;
            failures += usize::from(!cert.holds());
        }
    }
    let flag_ok = rep.leading_order == (rep.c_piston <= PISTON_C_MAX);
    let within_gap = rep.ratio <= rep.bound * (1.0 + 1e-12);
    let pass = consistent && flag_ok && within_gap && failures == 0;
    let report = json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "command": "piston",
        "eps": eps,
        "ratio": rep.ratio,
        "bound": rep.bound,
        "c_piston": rep.c_piston,
        "c_piston_max": PISTON_C_MAX,
        "leading_order": rep.leading_order,
        "leading_order_consistent": flag_ok,
        "ratio_within_bound": within_gap,
        "deviation": rep.deviation,
        "deviation_bound": bound,
        "deviation_within_bound": consistent,
        "poincare_samples": checked,
        "poincare_failures": failures,
        "seed": cfg.seed,
        "pass": pass,
    });
    out.json("piston.json", &report)?;
    Ok(Outcome {
        summary: format!(
            "piston: C_piston {:.3}, leading order {}, deviation {:.3e} <= {:.3e}: {}, {}",
            rep.c_piston,
            rep.leading_order,
            rep.deviation,
            bound,
            consistent,
            verdict(pass)
        ),
        pass,
    })
}

pub fn validate(cfg: &ScenarioConfig, sc: &Scenario, out: &mut OutDir) -> Result<Outcome, CliError> {
    let setup_err = |m: &str| CliError::Setup(format!("validate: {m}"));
    if cfg.geometry.lengths.len() != 1 {
        return Err(setup_err("the finite-difference oracle needs a 1D cavity"));
    }
    let side = |s: SideName| cfg.geometry.patches.iter().position(|p| p.side == s);
    let (Some(il), Some(ir)) = (side(SideName::Low), side(SideName::High)) else {
        return Err(setup_err("needs a piston at each end"));
    };
    if cfg.geometry.patches.len() != 2 {
        return Err(setup_err("needs exactly two pistons"));
    }
    let gamma = |i: usize| sc.sys.patches[i].eigenvalues()[0];
    let led = picard_iterate(&sc.coupling, &sc.source, &sc.sys, &sc.grid, cfg.numerics.picard_iterations)?;

    let length = cfg.geometry.lengths[0];
    let (oc, m) = OracleConfig::dividing(sc.grid.h, cfg.validate.dx, sc.sys.medium.c, cfg.validate.cfl)?;
    let mut source = sc.source.clone();
    source.mask = vec![sc.source.mask[il], sc.source.mask[ir]];
    let setup = FdtdSetup {
        length,
        medium: sc.sys.medium,
        coupling: sc.coupling,
        source,
        stiffness: [sc.sys.membrane.stiffness(gamma(il)), sc.sys.membrane.stiffness(gamma(ir))],
        lapse: sc.sys.lapse.clone(),
        drive_off: None,
    };
    let every = cfg.numerics.output_stride;
    let fd = fdtd_coupled_oracle(&setup, &oc, sc.grid.steps * m, every * m)?;

    // about a hundred evenly spaced nodes, end points included
    let n = fd.x.len() - 1;
    let nodes: Vec<usize> = (0..=VALIDATE_NODES).map(|k| (k * n) / VALIDATE_NODES).collect();
    let pts: Vec<Vec<f64>> = nodes.iter().map(|&i| vec![fd.x[i]]).collect();
    let thin = |s: Series| Series {
        times: s.times.iter().step_by(every).copied().collect(),
        channels: s.channels.iter().map(|c| c.iter().step_by(every).copied().collect()).collect(),
    };
    let modal = thin(Series::from_modal(&sc.sys.cavity, led.last_p(), &pts));
    let reference = Series {
        times: fd.times.clone(),
        channels: nodes.iter().map(|&i| fd.p.iter().map(|row| row[i]).collect()).collect(),
    };
    let p_rel = compare(&modal, &reference, Norm::L2)?.rel;
    let mut u_rel: f64 = 0.0;
    for (end, &i) in [il, ir].iter().enumerate() {
        let a = thin(Series {
            times: sc.grid.times(),
            channels: vec![led.last_u()[i].modes[0].iter().map(|v| v.re).collect()],
        });
        let b = Series {
            times: fd.times.clone(),
            channels: vec![fd.u[end].clone()],
        };
        u_rel = u_rel.max(compare(&a, &b, Norm::L2)?.rel);
    }
    let g = cfg.strength();
    let tol = cfg.tolerances.validate.unwrap_or((10.0 * g * g).max(1e-3));
    let pass = p_rel <= tol && u_rel <= tol;
    let report = json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "command": "validate",
        "coupling_strength": g,
        "picard_iterations": cfg.numerics.picard_iterations,
        "pressure_rel_l2": p_rel,
        "piston_rel_l2": u_rel,
        "tolerance": tol,
        "fdtd": { "dx": oc.dx, "dt": oc.dt, "steps": sc.grid.steps * m, "nodes": fd.x.len() },
        "pass": pass,
    });
    out.json("validate.json", &report)?;
    Ok(Outcome {
        summary: format!(
            "validate: pressure rel L2 {p_rel:.3e}, piston rel L2 {u_rel:.3e} (tolerance {tol:.1e}), {}",
            verdict(pass)
        ),
        pass,
    })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}
