//! Brute-force reference solvers: direct adaptive integration of the modal
//! ODEs and of linear systems, a coupled 1D finite-difference time-domain
//! solver, and error reports between sampled results.
//!
//! Nothing here calls the Duhamel, Magnus or Picard machinery.

use nalgebra::allocator::Allocator;
use nalgebra::{DVector, DefaultAllocator, Dim, OVector, Vector5};
use num_complex::Complex64;
use ode_solvers::dop_shared::{IntegrationError, OutputType};
use ode_solvers::{Dop853, System};

use crate::acoustics::AcousticMedium;
use crate::coupling::{CouplingConfig, HarmonicSource};
use crate::duhamel::{Signal, TimeGrid};
use crate::error::{invalid, Error, Result};
use crate::geometry::SpectralBasis;
use crate::magnus::TimeDependentGenerator;
use crate::membrane::{Damping, MembraneOperator, ModalSeries, PatchSource, TimeLapse};

/// Tolerance of the adaptive stepper.
pub const ODE_TOL: f64 = 1e-10;

const MAX_STEPS: u32 = 50_000_000;
const MAX_RESTARTS: usize = 10_000;

/// Friction coefficient `Sigma'/Sigma = -2 D'/D` of the damped equation.
pub fn friction(lapse: &TimeLapse, t: f64) -> f64 {
    match lapse.damping() {
        Damping::None => 0.0,
        Damping::Exponential(a) => 2.0 * a,
        Damping::Rational(a) => 2.0 * a / (1.0 + a * t),
        Damping::Custom { d, t_scale } => {
            let h = 1e-5 * t_scale;
            let lo = (t - h).max(0.0);
            let hi = lo + 2.0 * h;
            -2.0 * (d(hi) - d(lo)) / (2.0 * h * d(lo + h))
        }
    }
}

#[derive(Clone)]
struct ModeOde<'a> {
    p: f64,
    lapse: &'a TimeLapse,
    src: &'a Signal,
    grid: &'a TimeGrid,
}

// ode_solvers 0.6.2 ships the DOP853 tableau with c12 = 0 instead of 1, so
// stage 12 sees the wrong time. Time is carried as the last state component
// instead, which the (correct) row sums integrate exactly.
impl System<f64, Vector5<f64>> for ModeOde<'_> {
    fn system(&self, _: f64, y: &Vector5<f64>, dy: &mut Vector5<f64>) {
        let t = y[4];
        let f = self.src.eval(self.grid, t.min(self.grid.t_end()));
        let b = friction(self.lapse, t);
        dy[0] = y[1];
        dy[1] = f.re - b * y[1] - self.p * y[0];
        dy[2] = y[3];
        dy[3] = f.im - b * y[3] - self.p * y[2];
        dy[4] = 1.0;
    }
}

/// Integrate from `x0` to `x1`, returning the stepper's output points. With
/// `dx` the output is dense on `x0 + k dx`, otherwise one point per accepted
/// step. The stepper's stiffness heuristic misfires on slowly varying linear
/// systems; that error is cleared by restarting from the last output point.
fn integrate<D, F>(
    f: &F,
    x0: f64,
    x1: f64,
    y0: OVector<f64, D>,
    tol: f64,
    dx: Option<f64>,
) -> Result<Vec<(f64, OVector<f64, D>)>>
where
    D: Dim,
    F: System<f64, OVector<f64, D>> + Clone,
    OVector<f64, D>: std::ops::Mul<f64, Output = OVector<f64, D>>,
    DefaultAllocator: Allocator<D>,
{
    let mut out: Vec<(f64, OVector<f64, D>)> = vec![(x0, y0)];
    for _ in 0..MAX_RESTARTS {
        let (x, y) = out.last().cloned().unwrap();
        if x1 - x <= 1e-12 * x1.abs().max(1.0) {
            return Ok(out);
        }
        let mut st = Dop853::from_param(
            f.clone(),
            x,
            x1,
            dx.unwrap_or(x1 - x),
            y,
            tol,
            tol,
            0.9,
            0.0,
            0.333,
            6.0,
            x1 - x,
            0.0,
            MAX_STEPS,
            1000,
            if dx.is_some() { OutputType::Dense } else { OutputType::Sparse },
        );
        let res = st.integrate();
        let before = out.len();
        for (xv, yv) in st.x_out().iter().zip(st.y_out()).skip(1) {
            if yv.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFailure(format!("stepper state is not finite at {xv}")));
            }
            out.push((*xv, yv.clone()));
        }
        match res {
            Ok(_) => return Ok(out),
            Err(IntegrationError::StiffnessDetected { .. }) if out.len() > before => {}
            Err(e) => return Err(Error::NumericFailure(format!("stepper: {e}"))),
        }
    }
    Err(Error::NumericFailure(format!("stepper restarted too often before {x1}")))
}

/// One mode of `u'' + (Sigma'/Sigma) u' + p u = f` from `(u, u')(0) = y0`.
pub fn ode_mode(
    p: f64,
    lapse: &TimeLapse,
    src: &Signal,
    grid: &TimeGrid,
    y0: [Complex64; 2],
) -> Result<Vec<Complex64>> {
    let sys = ModeOde { p, lapse, src, grid };
    let init = Vector5::new(y0[0].re, y0[1].re, y0[0].im, y0[1].im, 0.0);
    let pts = integrate(&sys, 0.0, grid.t_end(), init, ODE_TOL, Some(grid.h))?;
    let mut out = vec![None; grid.len()];
    for (x, y) in &pts {
        let j = (x / grid.h).round();
        if j >= 0.0 && (x - j * grid.h).abs() <= 1e-6 * grid.h && (j as usize) < grid.len() {
            out[j as usize] = Some(Complex64::new(y[0], y[2]));
        }
    }
    out.into_iter()
        .map(|v| v.ok_or_else(|| Error::NumericFailure("stepper output missed a grid node".into())))
        .collect()
}

/// Direct integration of every membrane mode with zero initial data.
pub fn ode_membrane_oracle(
    op: &MembraneOperator,
    lapse: &TimeLapse,
    src: &PatchSource,
    basis: &SpectralBasis,
    grid: &TimeGrid,
) -> Result<ModalSeries> {
    if src.modes.len() != basis.len() {
        return invalid("source and basis sizes differ");
    }
    let zero = [Complex64::new(0.0, 0.0); 2];
    let modes = basis
        .eigenvalues()
        .iter()
        .zip(&src.modes)
        .map(|(&g, s)| {
            if s.is_zero() {
                Ok(vec![Complex64::new(0.0, 0.0); grid.len()])
            } else {
                ode_mode(op.stiffness(g), lapse, s, grid, zero)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModalSeries { grid: *grid, modes })
}

#[derive(Clone)]
struct LinearOde<'a, 'b> {
    gen: &'a TimeDependentGenerator<'b>,
}

impl System<f64, DVector<f64>> for LinearOde<'_, '_> {
    fn system(&self, _: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let n = y.len() - 1;
        match self.gen.eval(y[n]) {
            Ok(a) => {
                dy.rows_mut(0, n).copy_from(&(a * y.rows(0, n)));
                dy[n] = 1.0;
            }
            Err(_) => dy.fill(f64::NAN),
        }
    }
}

/// `y(t)` for `y' = A(s) y` on `[tau, t]` from `y(tau) = y0`.
pub fn linear_propagator(
    gen: &TimeDependentGenerator,
    tau: f64,
    t: f64,
    y0: &DVector<f64>,
) -> Result<DVector<f64>> {
    if y0.len() != gen.dim() || !(t >= tau) {
        return invalid("propagator needs a matching initial vector and tau <= t");
    }
    if t == tau {
        return Ok(y0.clone());
    }
    let init = y0.clone().insert_row(y0.len(), tau);
    let pts = integrate(&LinearOde { gen }, tau, t, init, 1e-13, None)?;
    Ok(pts.last().map_or_else(|| y0.clone(), |(_, y)| y.rows(0, y0.len()).into_owned()))
}

/// Steps of the finite-difference solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub dt: f64,
    pub dx: f64,
    /// Upper bound on `c dt / dx`, at most 0.5.
    pub cfl: f64,
}

impl OracleConfig {
    pub fn new(dt: f64, dx: f64, cfl: f64) -> Result<Self> {
        if !(dt > 0.0 && dx > 0.0) || !(cfl > 0.0 && cfl <= 0.5) {
            return invalid("oracle needs dt > 0, dx > 0 and 0 < cfl <= 0.5");
        }
        Ok(OracleConfig { dt, dx, cfl })
    }

    /// Largest step dividing `h` evenly that satisfies the CFL bound.
    pub fn dividing(h: f64, dx: f64, c: f64, cfl: f64) -> Result<(Self, usize)> {
        let m = (h * c / (cfl * dx)).ceil().max(1.0) as usize;
        Ok((Self::new(h / m as f64, dx, cfl)?, m))
    }
}

/// A 1D cavity `[0, L]` closed by two pistons.
#[derive(Debug, Clone)]
pub struct FdtdSetup {
    pub length: f64,
    pub medium: AcousticMedium,
    pub coupling: CouplingConfig,
    /// Mask entries are `[left, right]`.
    pub source: HarmonicSource,
    /// Piston stiffness `p(gamma)` at each end.
    pub stiffness: [f64; 2],
    pub lapse: TimeLapse,
    /// External pressure vanishes from this time on.
    pub drive_off: Option<f64>,
}

/// Sampled FDTD output; `p[j][i]` at `times[j]`, node `x[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdtdResult {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    /// Inward displacement of the left and right piston.
    pub u: [Vec<f64>; 2],
    /// Fluid plus piston energy per unit area.
    pub energy: Vec<f64>,
}

/// Leapfrog solution of `p_tt = c^2 p_xx` with the piston accelerations
/// entering as the end fluxes `p_x(0) = -rho0 u_L''` and
/// `p_x(L) = rho0 u_R''`. Each piston obeys
/// `sigma_m (u'' + (Sigma'/Sigma) u' + P u) = p_ex - p(end)`.
/// Every `stride`-th step is recorded, starting with `t = 0`.
pub fn fdtd_coupled_oracle(
    setup: &FdtdSetup,
    oc: &OracleConfig,
    steps: usize,
    stride: usize,
) -> Result<FdtdResult> {
    let c = setup.medium.c;
    let rho0 = setup.medium.rho0;
    if c * oc.dt / oc.dx > oc.cfl * (1.0 + 1e-12) {
        return invalid(format!(
            "CFL number {} exceeds {}",
            c * oc.dt / oc.dx,
            oc.cfl
        ));
    }
    if setup.source.mask.len() != 2 || stride == 0 || !(setup.length > 0.0) {
        return invalid("FDTD needs a two-entry mask, a positive stride and length");
    }
    let nx = (setup.length / oc.dx).round() as usize;
    if nx < 4 || ((nx as f64) * oc.dx - setup.length).abs() > 1e-9 * setup.length {
        return invalid("dx must divide the cavity length into at least 4 cells");
    }
    let dt = oc.dt;
    let dx = oc.dx;
    let r2 = (c * dt / dx).powi(2);
    let sig = setup.coupling.sigma_m();
    let drive = |t: f64, side: usize| -> f64 {
        if !setup.source.mask[side] || setup.drive_off.is_some_and(|t0| t >= t0) {
            return 0.0;
        }
        (setup.source.p0 * Complex64::new(0.0, setup.source.omega * t).exp()).re
    };
    let ends = [0, nx];

    let mut p_prev = vec![0.0; nx + 1];
    let mut p = vec![0.0; nx + 1];
    let mut p_next = vec![0.0; nx + 1];
    let mut u_prev = [0.0; 2];
    let mut u = [0.0; 2];
    let mut v = vec![0.0; nx + 1];
    let mut dp_old = vec![0.0; nx + 1];

    let mut res = FdtdResult {
        times: Vec::new(),
        x: (0..=nx).map(|i| i as f64 * dx).collect(),
        p: Vec::new(),
        u: [Vec::new(), Vec::new()],
        energy: Vec::new(),
    };

    for n in 0..=steps {
        let t = n as f64 * dt;
        let beta = friction(&setup.lapse, t);
        // pistons
        let mut u_next = [0.0; 2];
        let mut acc = [0.0; 2];
        for s in 0..2 {
            let f = (drive(t, s) - p[ends[s]]) / sig - setup.stiffness[s] * u[s];
            if n == 0 {
                u_next[s] = u[s] + 0.5 * dt * dt * f;
                acc[s] = f;
            } else {
                u_next[s] = (2.0 * u[s] - (1.0 - 0.5 * beta * dt) * u_prev[s] + dt * dt * f)
                    / (1.0 + 0.5 * beta * dt);
                acc[s] = (u_next[s] - 2.0 * u[s] + u_prev[s]) / (dt * dt);
            }
        }
        // spatial derivative with the flux conditions
        let mut dp = vec![0.0; nx + 1];
        dp[0] = -rho0 * acc[0];
        dp[nx] = rho0 * acc[1];
        for i in 1..nx {
            dp[i] = (p[i + 1] - p[i - 1]) / (2.0 * dx);
        }
        if n > 0 {
            for i in 0..=nx {
                v[i] -= dt / rho0 * 0.5 * (dp_old[i] + dp[i]);
            }
        }
        dp_old = dp;

        if n % stride == 0 {
            let mut e = 0.0;
            for i in 0..=nx {
                let w = if i == 0 || i == nx { 0.5 } else { 1.0 };
                e += w * dx * (p[i] * p[i] / (2.0 * rho0 * c * c) + 0.5 * rho0 * v[i] * v[i]);
            }
            for s in 0..2 {
                let ud = if n == 0 { 0.0 } else { (u_next[s] - u_prev[s]) / (2.0 * dt) };
                e += sig * 0.5 * (ud * ud + setup.stiffness[s] * u[s] * u[s]);
            }
            res.times.push(t);
            res.p.push(p.clone());
            res.u[0].push(u[0]);
            res.u[1].push(u[1]);
            res.energy.push(e);
        }
        if n == steps {
            break;
        }

        // ghost nodes p[-1] = p[1] + 2 dx rho0 u_L'', p[nx+1] = p[nx-1] + 2 dx rho0 u_R''
        let gl = p[1] + 2.0 * dx * rho0 * acc[0];
        let gr = p[nx - 1] + 2.0 * dx * rho0 * acc[1];
        for i in 0..=nx {
            let left = if i == 0 { gl } else { p[i - 1] };
            let right = if i == nx { gr } else { p[i + 1] };
            let lap = left - 2.0 * p[i] + right;
            p_next[i] = if n == 0 {
                p[i] + 0.5 * r2 * lap
            } else {
                2.0 * p[i] - p_prev[i] + r2 * lap
            };
        }
        std::mem::swap(&mut p_prev, &mut p);
        std::mem::swap(&mut p, &mut p_next);
        u_prev = u;
        u = u_next;
    }
    if res.p.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("FDTD solution is not finite".into()));
    }
    Ok(res)
}

/// Real samples `channels[k][j]` at `times[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub times: Vec<f64>,
    pub channels: Vec<Vec<f64>>,
}

impl Series {
    /// Real part of a modal series reconstructed at `points`.
    pub fn from_modal(basis: &SpectralBasis, s: &ModalSeries, points: &[Vec<f64>]) -> Self {
        let vals: Vec<Vec<f64>> = points
            .iter()
            .map(|x| (0..basis.len()).map(|n| basis.eval(n, x)).collect())
            .collect();
        let channels = vals
            .iter()
            .map(|w| {
                (0..s.grid.len())
                    .map(|j| w.iter().zip(&s.modes).map(|(a, m)| a * m[j].re).sum())
                    .collect()
            })
            .collect();
        Series {
            times: s.grid.times(),
            channels,
        }
    }

    fn interp(&self, k: usize, t: f64) -> Option<f64> {
        let ts = &self.times;
        let n = ts.len();
        let span = ts[n - 1] - ts[0];
        let tol = 1e-9 * span.max(1.0);
        if t < ts[0] - tol || t > ts[n - 1] + tol {
            return None;
        }
        if n == 1 {
            return Some(self.channels[k][0]);
        }
        let i = ts.partition_point(|&x| x <= t).clamp(1, n - 1);
        let (t0, t1) = (ts[i - 1], ts[i]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        Some(self.channels[k][i - 1] * (1.0 - w) + self.channels[k][i] * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L2,
    Linf,
}

/// Absolute and relative error, overall and per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub abs: f64,
    pub rel: f64,
    pub per_channel: Vec<(f64, f64)>,
}

/// Error of `a` against the reference `b`, with `b` interpolated linearly
/// onto the times of `a` that fall inside its range.
pub fn compare(a: &Series, b: &Series, norm: Norm) -> Result<ErrorReport> {
    if a.channels.len() != b.channels.len() {
        return invalid("series have different channel counts");
    }
    if a.times.is_empty() || b.times.is_empty() {
        return invalid("empty series");
    }
    let mut per = Vec::with_capacity(a.channels.len());
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let mut any = false;
    for k in 0..a.channels.len() {
        let (mut nk, mut dk) = (0.0f64, 0.0f64);
        for (j, &t) in a.times.iter().enumerate() {
            let Some(r) = b.interp(k, t) else { continue };
            any = true;
            let d = a.channels[k][j] - r;
            match norm {
                Norm::L2 => {
                    nk += d * d;
                    dk += r * r;
                }
                Norm::Linf => {
                    nk = nk.max(d.abs());
                    dk = dk.max(r.abs());
                }
            }
        }
        match norm {
            Norm::L2 => {
                num += nk;
                den += dk;
                per.push((nk.sqrt(), if dk > 0.0 { (nk / dk).sqrt() } else { nk.sqrt() }));
            }
            Norm::Linf => {
                num = num.max(nk);
                den = den.max(dk);
                per.push((nk, if dk > 0.0 { nk / dk } else { nk }));
            }
        }
    }
    if !any {
        return invalid("time ranges do not overlap");
    }
    let (abs, rel) = match norm {
        Norm::L2 => (num.sqrt(), if den > 0.0 { (num / den).sqrt() } else { num.sqrt() }),
        Norm::Linf => (num, if den > 0.0 { num / den } else { num }),
    };
    Ok(ErrorReport {
        abs,
        rel,
        per_channel: per,
    })
}
