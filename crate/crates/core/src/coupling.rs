//! Pressure/membrane coupling: the Picard decoupling iteration, the harmonic
//! resonance integral, curvature corrections and the piston approximation.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::acoustics::{
    boundary_source, solve_pressure, AcousticMedium, BoundaryCoupling, BoundaryVibration,
    PatchMotion,
};
use crate::duhamel::{Signal, TimeGrid};
use crate::error::{invalid, Error, Result};
use crate::geometry::{build_cavity_basis, build_patch_basis, CavityGeometry, SpectralBasis};
use crate::membrane::{
    solve_membrane, solve_modal, MembraneOperator, ModalSeries, PatchSource, QMode, TimeLapse,
};

/// Relative width of the band around `omega^2 = c^2 lambda` handled by the limit branch.
pub const RESONANCE_BAND: f64 = 1e-8;

/// Densities, thickness and perturbation strength of a coupled run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingConfig {
    pub rho0: f64,
    pub rho_m: f64,
    pub thickness: f64,
    pub eps: f64,
}

impl CouplingConfig {
    pub fn new(rho0: f64, rho_m: f64, thickness: f64, eps: f64) -> Result<Self> {
        for (name, v) in [("rho0", rho0), ("rho_m", rho_m), ("thickness", thickness), ("eps", eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        let cfg = CouplingConfig {
            rho0,
            rho_m,
            thickness,
            eps,
        };
        if cfg.strength() >= 1.0 {
            return invalid(format!(
                "coupling strength rho0/rho_m = {} must be below 1",
                cfg.strength()
            ));
        }
        Ok(cfg)
    }

    /// Areal membrane density `rho_m d`.
    pub fn sigma_m(&self) -> f64 {
        self.rho_m * self.thickness
    }

    pub fn sigma_0(&self) -> f64 {
        self.rho0 * self.thickness
    }

    /// `g = rho0 / rho_m`
    pub fn strength(&self) -> f64 {
        self.rho0 / self.rho_m
    }

    /// Set when `g^2` and `eps` are more than a factor 10 apart.
    pub fn warning(&self) -> Option<String> {
        let g2 = self.strength().powi(2);
        let r = g2 / self.eps;
        if !(0.1..=10.0).contains(&r) {
            Some(format!("g^2 = {g2:e} and eps = {:e} differ by more than a factor 10", self.eps))
        } else {
            None
        }
    }
}

/// External pressure `p0 exp(i omega t)` acting on the masked patches.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicSource {
    pub p0: Complex64,
    pub omega: f64,
    pub mask: Vec<bool>,
}

impl HarmonicSource {
    pub fn new(p0: Complex64, omega: f64, mask: Vec<bool>) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return invalid(format!("source frequency must be positive, got {omega}"));
        }
        Ok(HarmonicSource { p0, omega, mask })
    }
}

/// Everything a coupled solve needs besides the source.
#[derive(Debug, Clone)]
pub struct CoupledSystem {
    pub geom: CavityGeometry,
    pub cavity: SpectralBasis,
    pub patches: Vec<SpectralBasis>,
    pub coupling: BoundaryCoupling,
    pub medium: AcousticMedium,
    pub membrane: MembraneOperator,
    pub lapse: TimeLapse,
    pub qmode: QMode,
}

impl CoupledSystem {
    pub fn new(
        geom: CavityGeometry,
        cavity_modes: usize,
        patch_modes: usize,
        medium: AcousticMedium,
        membrane: MembraneOperator,
        lapse: TimeLapse,
    ) -> Result<Self> {
        let cavity = build_cavity_basis(&geom, cavity_modes)?;
        let patches = geom
            .patches()
            .iter()
            .map(|p| build_patch_basis(p, patch_modes))
            .collect::<Result<Vec<_>>>()?;
        for pb in &patches {
            membrane.validate(pb)?;
        }
        let coupling = BoundaryCoupling::new(&geom, &cavity, &patches)?;
        Ok(CoupledSystem {
            geom,
            cavity,
            patches,
            coupling,
            medium,
            membrane,
            lapse,
            qmode: QMode::default(),
        })
    }

    fn solve_membranes(
        &self,
        cfg: &CouplingConfig,
        src: &HarmonicSource,
        p: &ModalSeries,
        grid: &TimeGrid,
    ) -> Result<Vec<ModalSeries>> {
        let sig = cfg.sigma_m();
        let ps = p.signals();
        let drive = Signal::harmonic(src.p0 / sig, src.omega);
        self.patches
            .iter()
            .enumerate()
            .map(|(i, pb)| {
                let c = &self.coupling.modal[i];
                let driven = src.mask.get(i).copied().unwrap_or(false);
                let modes = (0..pb.len())
                    .map(|k| {
                        let mut terms: Vec<(Complex64, &Signal)> = Vec::new();
                        if driven {
                            terms.push((Complex64::new(pb.integral(k), 0.0), &drive));
                        }
                        for (n, s) in ps.iter().enumerate() {
                            if c[(n, k)] != 0.0 && !s.is_zero() {
                                terms.push((Complex64::new(-c[(n, k)] / sig, 0.0), s));
                            }
                        }
                        Signal::combine(&terms)
                    })
                    .collect();
                solve_membrane(
                    pb,
                    &self.membrane,
                    &self.lapse,
                    &PatchSource { modes },
                    grid,
                    self.qmode,
                )
            })
            .collect()
    }

    fn solve_pressure_for(&self, u: &[ModalSeries], grid: &TimeGrid) -> Result<ModalSeries> {
        solve_pressure(
            &self.coupling,
            &BoundaryVibration::from_series(u),
            &self.cavity,
            &self.medium,
            grid,
        )
    }
}

/// All iterates of a Picard run, `u[k][i]` on patch `i` and `p[k]`, with
/// the correction norms `|x^(k+1) - x^(k)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateLedger {
    pub u: Vec<Vec<ModalSeries>>,
    pub p: Vec<ModalSeries>,
    pub u_corrections: Vec<f64>,
    pub p_corrections: Vec<f64>,
}

impl IterateLedger {
    /// Ratios of consecutive nonzero corrections. The iteration repeats
    /// pairwise, so exact zeros are skipped.
    pub fn ratios(corr: &[f64]) -> Vec<(usize, f64)> {
        let nz: Vec<(usize, f64)> = corr.iter().copied().enumerate().filter(|(_, c)| *c > 0.0).collect();
        nz.windows(2).map(|w| (w[1].0, w[1].1 / w[0].1)).collect()
    }

    pub fn u_ratios(&self) -> Vec<(usize, f64)> {
        Self::ratios(&self.u_corrections)
    }

    pub fn p_ratios(&self) -> Vec<(usize, f64)> {
        Self::ratios(&self.p_corrections)
    }

    pub fn last_u(&self) -> &[ModalSeries] {
        self.u.last().expect("ledger always holds iterate 0")
    }

    pub fn last_p(&self) -> &ModalSeries {
        self.p.last().expect("ledger always holds iterate 0")
    }
}

fn patch_norm(u: &[ModalSeries], v: &[ModalSeries]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a.sub(b).norm().powi(2)).sum::<f64>().sqrt()
}

/// Jacobi-type decoupling: `u^(k+1)` from the membrane solve driven by
/// `(p_ex - p^(k)) / sigma_m`, `p^(k+1)` from the pressure solve driven by
/// `u^(k)`. Starts from zero, so `p^(1) = 0` and `u^(1) = u^(2)`.
pub fn picard_iterate(
    cfg: &CouplingConfig,
    src: &HarmonicSource,
    sys: &CoupledSystem,
    grid: &TimeGrid,
    k_max: usize,
) -> Result<IterateLedger> {
    if k_max < 2 {
        return invalid(format!("k_max must be at least 2, got {k_max}"));
    }
    if src.mask.len() != sys.patches.len() {
        return invalid("source mask must list every patch");
    }
    let zero_u: Vec<ModalSeries> =
        sys.patches.iter().map(|pb| ModalSeries::zeros(*grid, pb.len())).collect();
    let mut ledger = IterateLedger {
        u: vec![zero_u],
        p: vec![ModalSeries::zeros(*grid, sys.cavity.len())],
        u_corrections: Vec::new(),
        p_corrections: Vec::new(),
    };
    for k in 0..k_max {
        let (u_next, p_next) = rayon::join(
            || sys.solve_membranes(cfg, src, &ledger.p[k], grid),
            || sys.solve_pressure_for(&ledger.u[k], grid),
        );
        let (u_next, p_next) = (u_next?, p_next?);
        ledger.u_corrections.push(patch_norm(&u_next, &ledger.u[k]));
        ledger.p_corrections.push(p_next.sub(&ledger.p[k]).norm());
        ledger.u.push(u_next);
        ledger.p.push(p_next);
    }
    for (iterate, ratio) in ledger.u_ratios().into_iter().chain(ledger.p_ratios()) {
        if ratio >= 1.0 {
            return Err(Error::ContractionViolation { iterate, ratio });
        }
    }
    Ok(ledger)
}

/// `int_0^t exp(i omega tau) sin((t - tau) k) / k dtau` with `k^2 = c^2 lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicIntegral {
    pub value: Complex64,
    /// `R(t) = cos(k t) + i omega sin(k t) / k`
    pub resonance: Complex64,
    /// Set when the limit branch was used.
    pub limit: bool,
}

fn resonance_function(omega: f64, k: f64, t: f64) -> Complex64 {
    let s = if k == 0.0 { t } else { (k * t).sin() / k };
    Complex64::new((k * t).cos(), omega * s)
}

fn near_resonance(omega: f64, k2: f64) -> bool {
    (omega * omega - k2).abs() <= RESONANCE_BAND * omega * omega
}

/// Closed form `(exp(i omega t) - R(t)) / (c^2 lambda - omega^2)`; inside
/// the resonance band the analytic limit is used instead.
pub fn harmonic_integral(omega: f64, lambda: f64, t: f64, c: f64) -> Result<HarmonicIntegral> {
    if !(lambda >= 0.0) || !(t >= 0.0) || !(c > 0.0) || !omega.is_finite() {
        return invalid("harmonic integral needs lambda >= 0, t >= 0, c > 0");
    }
    let k2 = c * c * lambda;
    let k = k2.sqrt();
    let r = resonance_function(omega, k, t);
    if omega == 0.0 && k2 == 0.0 {
        return Ok(HarmonicIntegral {
            value: Complex64::new(0.5 * t * t, 0.0),
            resonance: r,
            limit: true,
        });
    }
    if near_resonance(omega, k2) {
        let e = Complex64::new(0.0, omega * t).exp();
        let i = Complex64::i();
        let value = -i * t * e / (2.0 * omega) + i * (omega * t).sin() / (2.0 * omega * omega);
        return Ok(HarmonicIntegral {
            value,
            resonance: r,
            limit: true,
        });
    }
    let e = Complex64::new(0.0, omega * t).exp();
    Ok(HarmonicIntegral {
        value: (e - r) / (k2 - omega * omega),
        resonance: r,
        limit: false,
    })
}

/// Same as [`harmonic_integral`] but refuses the resonance band.
pub fn harmonic_integral_strict(omega: f64, lambda: f64, t: f64, c: f64) -> Result<HarmonicIntegral> {
    let k2 = c * c * lambda;
    if near_resonance(omega, k2) {
        return Err(Error::ResonanceSingularity {
            omega2: omega * omega,
            w2: k2,
        });
    }
    harmonic_integral(omega, lambda, t, c)
}

/// Mean of cavity mode `n` over the cross-section orthogonal to `axis` at
/// coordinate `x`. Only modes constant across the section survive.
pub fn cross_section_mean(cavity: &SpectralBasis, axis: usize, n: usize, x: f64) -> f64 {
    let idx = &cavity.modes()[n].index;
    let mut v = 1.0;
    for d in 0..cavity.dim() {
        if d == axis {
            v *= cavity.axis_factor(d, idx[d], x).0;
        } else if idx[d] != 0 {
            return 0.0;
        } else {
            v *= cavity.axis_factor(d, 0, 0.0).0;
        }
    }
    v
}

/// Cross-section mean pressure of a modal series at the given axial
/// coordinates, `out[j][s]`.
pub fn mean_pressure(cavity: &SpectralBasis, axis: usize, p: &ModalSeries, xs: &[f64]) -> Vec<Vec<Complex64>> {
    let w: Vec<Vec<f64>> = xs
        .iter()
        .map(|&x| (0..cavity.len()).map(|n| cross_section_mean(cavity, axis, n, x)).collect())
        .collect();
    (0..p.grid.len())
        .map(|j| {
            w.iter()
                .map(|wx| wx.iter().zip(&p.modes).map(|(a, m)| m[j] * *a).sum())
                .collect()
        })
        .collect()
}

/// Cross-section mean pressure for a harmonic piston `u_mean exp(i omega t)`
/// on `patch`, in closed form:
/// `<p> = -rho0 c^2 omega^2 u_mean sum_n chi_n(x) m_n (exp(i omega t) - R_n) / (c^2 lambda_n - omega^2)`,
/// with `m_n` the integral of mode `n` over the patch. Returns `out[j][s]`.
#[allow(clippy::too_many_arguments)]
pub fn closed_form_mean_pressure(
    geom: &CavityGeometry,
    cavity: &SpectralBasis,
    coupling: &BoundaryCoupling,
    patch: usize,
    medium: &AcousticMedium,
    u_mean: Complex64,
    omega: f64,
    times: &[f64],
    xs: &[f64],
) -> Result<Vec<Vec<Complex64>>> {
    let Some(p) = geom.patches().get(patch) else {
        return invalid(format!("patch index {patch} out of range"));
    };
    let m = &coupling.piston[patch];
    let lam = cavity.eigenvalues();
    let pref = -medium.rho0 * medium.c * medium.c * omega * omega * u_mean;
    let chi: Vec<Vec<f64>> = xs
        .iter()
        .map(|&x| (0..cavity.len()).map(|n| cross_section_mean(cavity, p.axis, n, x) * m[n]).collect())
        .collect();
    times
        .par_iter()
        .map(|&t| {
            let ints: Vec<Complex64> = lam
                .iter()
                .map(|&l| harmonic_integral_strict(omega, l, t, medium.c).map(|h| h.value))
                .collect::<Result<_>>()?;
            Ok(chi
                .iter()
                .map(|cx| cx.iter().zip(&ints).map(|(a, b)| b * *a).sum::<Complex64>() * pref)
                .collect())
        })
        .collect()
}

/// Half the patch Laplacian applied spectrally, `H_k = -gamma_k u_k / 2`.
pub fn mean_curvature(basis: &SpectralBasis, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != basis.len() {
        return invalid("coefficient vector does not match the basis");
    }
    Ok(u.iter().zip(basis.modes()).map(|(c, m)| -0.5 * m.eigenvalue * c).collect())
}

/// Background curvature from the Rayleigh quotient, `H[u] ~ -gamma_bar u`.
pub fn background_curvature(basis: &SpectralBasis, u: &[f64]) -> Result<f64> {
    let h = mean_curvature(basis, u)?;
    let n2: f64 = u.iter().map(|c| c * c).sum();
    if !(n2 > 0.0) {
        return Err(Error::DegenerateInput("u has zero norm".into()));
    }
    Ok(-h.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / n2)
}

/// Iterates of the local curvature perturbation scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct LcpoResult {
    pub gamma_bar: f64,
    /// `|dH| / (gamma_bar |u|)` for the shape that fixed `gamma_bar`.
    pub curvature_ratio: f64,
    /// `iterates[l]`, `l = 0..=l_max`.
    pub iterates: Vec<ModalSeries>,
    /// `|u^(l+1) - u^(l)|`
    pub corrections: Vec<f64>,
}

impl LcpoResult {
    /// Last correction relative to the uniform-curvature solution.
    pub fn next_correction_ratio(&self) -> f64 {
        let base = self.iterates[0].norm();
        match self.corrections.last() {
            Some(c) if base > 0.0 => c / base,
            _ => 0.0,
        }
    }
}

/// Solve with the uniform stiffness `p(2 gamma_bar)` and iterate the
/// curvature correction `V_curv = 2 c_m^2 dH - 8 gamma_bar c_H^2 d^2 dH`,
/// `dH = H[u] + gamma_bar u`, fed back as a source.
#[allow(clippy::too_many_arguments)]
pub fn lcpo_iteration(
    basis: &SpectralBasis,
    op: &MembraneOperator,
    shape: &[f64],
    lapse: &TimeLapse,
    src: &PatchSource,
    grid: &TimeGrid,
    qmode: QMode,
    l_max: usize,
) -> Result<LcpoResult> {
    op.validate(basis)?;
    let gamma_bar = background_curvature(basis, shape)?;
    let h = mean_curvature(basis, shape)?;
    let dh: f64 = h.iter().zip(shape).map(|(a, b)| (a + gamma_bar * b).powi(2)).sum::<f64>().sqrt();
    let un: f64 = shape.iter().map(|c| c * c).sum::<f64>().sqrt();
    let curvature_ratio = dh / (gamma_bar * un);
    if !(curvature_ratio < 1.0) {
        return Err(Error::AssumptionViolation(format!(
            "curvature deviation ratio {curvature_ratio} is not below 1"
        )));
    }
    let pbar = op.stiffness(2.0 * gamma_bar);
    let stiff = vec![pbar; basis.len()];
    let lin = 2.0 * op.c_m2 - 8.0 * gamma_bar * op.c_h2 * op.thickness * op.thickness;
    let kappa: Vec<f64> = basis
        .modes()
        .iter()
        .map(|m| lin * (gamma_bar - 0.5 * m.eigenvalue))
        .collect();
    let mut iterates = vec![solve_modal(&stiff, lapse, src, grid, qmode)?];
    let mut corrections = Vec::new();
    for _ in 0..l_max {
        let prev = iterates.last().unwrap();
        let prev_sig = prev.signals();
        let modes = src
            .modes
            .iter()
            .zip(&prev_sig)
            .zip(&kappa)
            .map(|((s, u), &k)| {
                Signal::combine(&[(Complex64::new(1.0, 0.0), s), (Complex64::new(k, 0.0), u)])
            })
            .collect();
        let next = solve_modal(&stiff, lapse, &PatchSource { modes }, grid, qmode)?;
        corrections.push(next.sub(prev).norm());
        iterates.push(next);
    }
    Ok(LcpoResult {
        gamma_bar,
        curvature_ratio,
        iterates,
        corrections,
    })
}

/// Outcome of replacing every patch vibration by its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PistonReport {
    /// `means[i][j] = <u_i>(t_j)`
    pub means: Vec<Vec<Complex64>>,
    /// Space-time `|u - <u>| / |u|`, maximised over patches.
    pub ratio: f64,
    /// Space-time spectral-gap bound on `ratio`, maximised over patches.
    pub bound: f64,
    pub c_piston: f64,
    pub leading_order: bool,
    pub p_full: ModalSeries,
    pub p_piston: ModalSeries,
    /// `|p_piston - p_full|`
    pub deviation: f64,
}

/// Piston constants up to this size count as order one.
pub const PISTON_C_MAX: f64 = 10.0;

/// Piston approximation of the pressure driven by `u`.
pub fn piston_pipeline(
    sys: &CoupledSystem,
    u: &[ModalSeries],
    eps: f64,
    grid: &TimeGrid,
) -> Result<PistonReport> {
    if u.len() != sys.patches.len() {
        return invalid("one membrane series per patch is required");
    }
    if !(eps > 0.0) {
        return invalid("eps must be positive");
    }
    let mut means = Vec::new();
    let mut ratio: f64 = 0.0;
    let mut bound: f64 = 0.0;
    let mut total = 0.0;
    for (pb, s) in sys.patches.iter().zip(u) {
        let w = pb.mean_weights();
        let g1 = pb.modes()[0].eigenvalue;
        let area = pb.measure();
        let mut n2 = 0.0;
        let mut dev2 = 0.0;
        let mut grad2 = 0.0;
        let mut mean = Vec::with_capacity(grid.len());
        for j in 0..grid.len() {
            let m: Complex64 = s.modes.iter().zip(&w).map(|(c, w)| c[j] * *w).sum();
            let nj: f64 = s.modes.iter().map(|c| c[j].norm_sqr()).sum();
            n2 += nj;
            dev2 += (nj - area * m.norm_sqr()).max(0.0);
            grad2 += s
                .modes
                .iter()
                .zip(pb.modes())
                .map(|(c, md)| md.eigenvalue * c[j].norm_sqr())
                .sum::<f64>();
            mean.push(m);
        }
        total += n2;
        if n2 > 0.0 {
            ratio = ratio.max((dev2 / n2).sqrt());
            bound = bound.max((grad2 / g1 / n2).sqrt());
        }
        means.push(mean);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateInput("membrane displacement is identically zero".into()));
    }
    let c_piston = ratio / eps;
    let piston = BoundaryVibration {
        patches: means
            .iter()
            .map(|m| PatchMotion::Piston(Signal::from_samples(m.clone())))
            .collect(),
    };
    let p_full = sys.solve_pressure_for(u, grid)?;
    let b = boundary_source(&sys.coupling, &piston, grid)?;
    let p_piston =
        crate::acoustics::solve_pressure_from_source(&sys.cavity, &sys.medium, &b, grid)?;
    let deviation = p_piston.sub(&p_full).norm();
    Ok(PistonReport {
        means,
        ratio,
        bound,
        c_piston,
        leading_order: c_piston <= PISTON_C_MAX,
        p_full,
        p_piston,
        deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PatchGeometry, Side};
    use crate::quad::integrate_scalar;
    use proptest::prelude::*;

    fn piston_1d(g: f64) -> (CouplingConfig, CoupledSystem) {
        let geom = CavityGeometry::new(
            vec![1.0],
            vec![PatchGeometry::point(Side::Low, 1.0), PatchGeometry::point(Side::High, 1.0)],
        )
        .unwrap();
        let medium = AcousticMedium::new(1.0, g).unwrap();
        let op = MembraneOperator {
            c_m2: 10.0,
            c_h2: 0.0,
            thickness: 1.0,
        };
        let sys = CoupledSystem::new(geom, 16, 1, medium, op, TimeLapse::exponential(0.5)).unwrap();
        (CouplingConfig::new(g, 1.0, 1.0, g * g).unwrap(), sys)
    }

    fn drive() -> HarmonicSource {
        HarmonicSource::new(Complex64::new(0.0, -1.0), 2.0, vec![true, false]).unwrap()
    }

    #[test]
    fn config_checks() {
        let c = CouplingConfig::new(1e-3, 1.0, 0.1, 1e-6).unwrap();
        assert!((c.sigma_m() - 0.1).abs() < 1e-15);
        assert!((c.sigma_0() - 1e-4).abs() < 1e-18);
        assert!(c.warning().is_none());
        assert!(CouplingConfig::new(1e-3, 1.0, 0.1, 1e-3).unwrap().warning().is_some());
        assert!(CouplingConfig::new(1.0, 0.5, 0.1, 1e-3).is_err());
        assert!(CouplingConfig::new(1e-3, -1.0, 0.1, 1e-3).is_err());
        assert!(HarmonicSource::new(Complex64::new(1.0, 0.0), 0.0, vec![]).is_err());
    }

    #[test]
    fn picard_structure() {
        let (cfg, sys) = piston_1d(1e-3);
        let grid = TimeGrid::covering(6.0, 2e-3).unwrap();
        let led = picard_iterate(&cfg, &drive(), &sys, &grid, 5).unwrap();
        assert_eq!(led.p[1].max_abs(), 0.0);
        assert_eq!(led.u[1], led.u[2]);
        assert_eq!(led.p[2], led.p[3]);
        for (_, r) in led.u_ratios().into_iter().chain(led.p_ratios()) {
            assert!(r <= 10.0 * cfg.strength(), "ratio {r}");
        }
        let rel = led.p[4].sub(&led.p[3]).norm() / led.p[3].norm();
        assert!(rel < 10.0 * cfg.strength() && rel > 0.0);

        let silent = HarmonicSource::new(Complex64::new(0.0, 0.0), 2.0, vec![true, false]).unwrap();
        let z = picard_iterate(&cfg, &silent, &sys, &grid, 3).unwrap();
        assert!(z.p.iter().all(|p| p.max_abs() == 0.0));
        assert!(z.u.iter().flatten().all(|u| u.max_abs() == 0.0));
        assert!(picard_iterate(&cfg, &drive(), &sys, &grid, 1).is_err());
    }

    #[test]
    fn second_pressure_iterate_is_linear_in_amplitude() {
        let (cfg, sys) = piston_1d(1e-2);
        let grid = TimeGrid::covering(3.0, 2e-3).unwrap();
        let a = picard_iterate(&cfg, &drive(), &sys, &grid, 2).unwrap();
        let mut d2 = drive();
        d2.p0 *= 2.0;
        let b = picard_iterate(&cfg, &d2, &sys, &grid, 2).unwrap();
        for (x, y) in a.p[2].modes.iter().flatten().zip(b.p[2].modes.iter().flatten()) {
            assert_eq!(*x * 2.0, *y);
        }
    }

    #[test]
    fn harmonic_integral_cases() {
        assert_eq!(harmonic_integral(1.3, 2.0, 0.0, 1.0).unwrap().value, Complex64::new(0.0, 0.0));
        // omega -> 0
        let (l, c, t) = (2.0, 1.5, 0.8);
        let k2: f64 = c * c * l;
        let lim = (1.0 - (t * k2.sqrt()).cos()) / k2;
        let v = harmonic_integral(0.0, l, t, c).unwrap().value;
        assert!((v - lim).norm() < 1e-15);
        let v = harmonic_integral(1e-7, l, t, c).unwrap().value;
        assert!((v - lim).norm() < 1e-6);
        // lambda = 0
        let v0 = harmonic_integral(2.0, 0.0, 1.1, 1.0).unwrap().value;
        let q = |f: &dyn Fn(f64) -> f64| integrate_scalar(f, 0.0, 1.1, 1e-14).unwrap();
        let re = q(&|s| (2.0 * s).cos() * (1.1 - s));
        let im = q(&|s| (2.0 * s).sin() * (1.1 - s));
        assert!((v0 - Complex64::new(re, im)).norm() < 1e-12);
        // exact resonance and its neighbourhood agree
        let at = harmonic_integral(2.0, 4.0, 3.0, 1.0).unwrap();
        assert!(at.limit);
        let near = harmonic_integral(2.0, 4.0 * (1.0 + 1e-6), 3.0, 1.0).unwrap();
        assert!(!near.limit);
        assert!((at.value - near.value).norm() < 1e-5);
        assert!(matches!(
            harmonic_integral_strict(2.0, 4.0, 3.0, 1.0),
            Err(Error::ResonanceSingularity { .. })
        ));
        assert_eq!(harmonic_integral(0.0, 0.0, 2.0, 1.0).unwrap().value.re, 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn harmonic_integral_matches_quadrature(w in 0.1f64..8.0, lam in 0.0f64..40.0, t in 0.0f64..4.0) {
            let c = 1.0;
            let k = (c * c * lam).sqrt();
            prop_assume!(!near_resonance(w, k * k));
            let h = harmonic_integral(w, lam, t, c).unwrap().value;
            let kern = |s: f64| if k == 0.0 { t - s } else { ((t - s) * k).sin() / k };
            let re = integrate_scalar(|s| (w * s).cos() * kern(s), 0.0, t, 1e-13).unwrap();
            let im = integrate_scalar(|s| (w * s).sin() * kern(s), 0.0, t, 1e-13).unwrap();
            prop_assert!((h - Complex64::new(re, im)).norm() <= 1e-10);
        }
    }

    #[test]
    fn closed_form_matches_modal_pressure() {
        let p = PatchGeometry {
            axis: 0,
            side: Side::Low,
            lo: vec![0.1],
            hi: vec![0.6],
            piston_gamma: None,
        };
        let geom = CavityGeometry::new(vec![1.0, 0.7], vec![p]).unwrap();
        let cav = build_cavity_basis(&geom, 6).unwrap();
        let pb = build_patch_basis(&geom.patches()[0], 2).unwrap();
        let cp = BoundaryCoupling::new(&geom, &cav, &[pb]).unwrap();
        let med = AcousticMedium::new(1.0, 1.2).unwrap();
        let grid = TimeGrid::covering(4.0, 0.2 / (20.0 * std::f64::consts::PI)).unwrap();
        let (w, um) = (1.7, Complex64::new(0.02, 0.01));
        let motion = BoundaryVibration {
            patches: vec![PatchMotion::Piston(Signal::harmonic(um, w))],
        };
        let pm = solve_pressure(&cp, &motion, &cav, &med, &grid).unwrap();
        let xs = [0.0, 0.3, 0.8];
        let modal = mean_pressure(&cav, 0, &pm, &xs);
        let closed =
            closed_form_mean_pressure(&geom, &cav, &cp, 0, &med, um, w, &grid.times(), &xs).unwrap();
        let num: f64 = modal.iter().flatten().zip(closed.iter().flatten()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = closed.iter().flatten().map(|b| b.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-6, "{}", (num / den).sqrt());
        let zero = closed_form_mean_pressure(&geom, &cav, &cp, 0, &med, Complex64::new(0.0, 0.0), w, &[1.0], &xs)
            .unwrap();
        assert!(zero.iter().flatten().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn curvature_operator() {
        let p = PatchGeometry {
            axis: 1,
            side: Side::Low,
            lo: vec![0.0],
            hi: vec![1.0],
            piston_gamma: None,
        };
        let b = build_patch_basis(&p, 4).unwrap();
        let h = mean_curvature(&b, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((h[0] + pi2 / 2.0).abs() < 1e-12);
        let u = [0.3, -0.2, 0.0, 0.1];
        let v = [0.0, 1.0, 0.5, 0.0];
        let s: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a + b).collect();
        let hs = mean_curvature(&b, &s).unwrap();
        let hu = mean_curvature(&b, &u).unwrap();
        let hv = mean_curvature(&b, &v).unwrap();
        for k in 0..4 {
            assert!((hs[k] - 2.0 * hu[k] - hv[k]).abs() < 1e-12);
        }
        assert!((background_curvature(&b, &[0.0, 1.0, 0.0, 0.0]).unwrap() - 2.0 * pi2).abs() < 1e-9);
    }

    fn lcpo_setup() -> (SpectralBasis, MembraneOperator, TimeGrid) {
        let p = PatchGeometry {
            axis: 1,
            side: Side::Low,
            lo: vec![0.0],
            hi: vec![1.0],
            piston_gamma: None,
        };
        let b = build_patch_basis(&p, 3).unwrap();
        let op = MembraneOperator {
            c_m2: 1.0,
            c_h2: 1e-4,
            thickness: 1.0,
        };
        (b, op, TimeGrid::covering(5.0, 2e-3).unwrap())
    }

    #[test]
    fn lcpo_exact_for_eigenmode() {
        let (b, op, grid) = lcpo_setup();
        let src = PatchSource {
            modes: vec![Signal::harmonic(Complex64::new(1.0, 0.0), 1.3), Signal::zero(), Signal::zero()],
        };
        let lapse = TimeLapse::exponential(0.3);
        let r = lcpo_iteration(&b, &op, &[1.0, 0.0, 0.0], &lapse, &src, &grid, QMode::default(), 2).unwrap();
        assert!(r.curvature_ratio < 1e-15);
        let full = solve_membrane(&b, &op, &lapse, &src, &grid, QMode::default()).unwrap();
        assert!(r.iterates[1].sub(&full).norm() < 1e-12 * full.norm());
        assert!(r.corrections.iter().all(|c| *c < 1e-12 * full.norm()));
        assert!(matches!(
            lcpo_iteration(&b, &op, &[1.0, 0.0, 0.3], &lapse, &src, &grid, QMode::default(), 1),
            Err(Error::AssumptionViolation(_))
        ));
    }

    #[test]
    fn lcpo_first_iterate_error_is_second_order() {
        let (b, op, grid) = lcpo_setup();
        let lapse = TimeLapse::exponential(0.3);
        let errs: Vec<f64> = [0.02, 0.01]
            .iter()
            .map(|&e| {
                let shape = [1.0, e, 0.0];
                let src = PatchSource {
                    modes: vec![
                        Signal::harmonic(Complex64::new(e, 0.0), 1.3),
                        Signal::harmonic(Complex64::new(e * e, 0.0), 1.3),
                        Signal::zero(),
                    ],
                };
                let r = lcpo_iteration(&b, &op, &shape, &lapse, &src, &grid, QMode::default(), 1).unwrap();
                let full = solve_membrane(&b, &op, &lapse, &src, &grid, QMode::default()).unwrap();
                assert!(r.next_correction_ratio() < 10.0 * e, "{}", r.next_correction_ratio());
                r.iterates[1].sub(&full).norm()
            })
            .collect();
        let slope = (errs[0] / errs[1]).log2();
        assert!(slope > 1.8, "slope {slope}");
    }

    #[test]
    fn point_pistons_are_exact() {
        let (cfg, sys) = piston_1d(1e-3);
        let grid = TimeGrid::covering(3.0, 2e-3).unwrap();
        let led = picard_iterate(&cfg, &drive(), &sys, &grid, 2).unwrap();
        let rep = piston_pipeline(&sys, led.last_u(), 1e-3, &grid).unwrap();
        assert_eq!(rep.ratio, 0.0);
        assert!(rep.leading_order);
        assert!(rep.deviation <= 1e-14 * rep.p_full.norm());
        let zero: Vec<ModalSeries> = sys.patches.iter().map(|p| ModalSeries::zeros(grid, p.len())).collect();
        assert!(matches!(
            piston_pipeline(&sys, &zero, 1e-3, &grid),
            Err(Error::DegenerateInput(_))
        ));
    }
}
