//! Damped membrane-plate patches: time-lapse damping, effective mass and the
//! modal Duhamel solution.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::duhamel::{
    cell_times, cell_values, general_convolution, oscillator_response, stationary_convolution,
    Signal, TimeGrid,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::SpectralBasis;
use crate::magnus::oscillator_cs;
use crate::quad::{gauss_legendre, integrate_scalar};

/// Damping function `D(t)` with `D(0) = 1`.
#[derive(Clone)]
pub enum Damping {
    None,
    /// `D = exp(-alpha t)`
    Exponential(f64),
    /// `D = 1 / (1 + alpha t)`
    Rational(f64),
    /// Tabulated by a closure; derivatives by finite differences at the
    /// scale `t_scale`.
    Custom {
        d: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        t_scale: f64,
    },
}

impl std::fmt::Debug for Damping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Damping::None => write!(f, "None"),
            Damping::Exponential(a) => write!(f, "Exponential({a})"),
            Damping::Rational(a) => write!(f, "Rational({a})"),
            Damping::Custom { t_scale, .. } => write!(f, "Custom {{ t_scale: {t_scale} }}"),
        }
    }
}

/// The pair `(D, Sigma = 1/D^2)` with the derivatives of `log sqrt(Sigma)`.
#[derive(Debug, Clone)]
pub struct TimeLapse {
    damping: Damping,
}

/// Validate a damping function on a grid and wrap it.
pub fn time_lapse_from_damping(damping: Damping, t_grid: &[f64]) -> Result<TimeLapse> {
    match &damping {
        Damping::Exponential(a) | Damping::Rational(a) if !(a.is_finite() && *a >= 0.0) => {
            return invalid(format!("damping rate must be non-negative, got {a}"));
        }
        Damping::Custom { t_scale, .. } if !(*t_scale > 0.0) => {
            return invalid("custom damping needs t_scale > 0");
        }
        _ => {}
    }
    let lapse = TimeLapse { damping };
    if (lapse.d(0.0) - 1.0).abs() > 1e-12 {
        return invalid(format!("damping must satisfy D(0) = 1, got {}", lapse.d(0.0)));
    }
    for &t in t_grid {
        let d = lapse.d(t);
        if !(d > 0.0 && d.is_finite()) {
            return invalid(format!("damping D({t}) = {d} is not positive"));
        }
    }
    Ok(lapse)
}

impl TimeLapse {
    pub fn none() -> Self {
        TimeLapse {
            damping: Damping::None,
        }
    }

    pub fn exponential(alpha: f64) -> Self {
        TimeLapse {
            damping: Damping::Exponential(alpha),
        }
    }

    pub fn damping(&self) -> &Damping {
        &self.damping
    }

    pub fn d(&self, t: f64) -> f64 {
        match &self.damping {
            Damping::None => 1.0,
            Damping::Exponential(a) => (-a * t).exp(),
            Damping::Rational(a) => 1.0 / (1.0 + a * t),
            Damping::Custom { d, .. } => d(t),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        let d = self.d(t);
        1.0 / (d * d)
    }

    pub fn sqrt_sigma(&self, t: f64) -> f64 {
        1.0 / self.d(t)
    }

    /// `d/dt log sqrt(Sigma)`, the damping rate.
    pub fn l1(&self, t: f64) -> f64 {
        match &self.damping {
            Damping::None => 0.0,
            Damping::Exponential(a) => *a,
            Damping::Rational(a) => a / (1.0 + a * t),
            Damping::Custom { d, t_scale } => {
                let h = 1e-6 * t_scale;
                -((d(t + h)).ln() - (d(t - h)).ln()) / (2.0 * h)
            }
        }
    }

    /// `d^2/dt^2 log sqrt(Sigma)`.
    pub fn l2(&self, t: f64) -> f64 {
        match &self.damping {
            Damping::None | Damping::Exponential(_) => 0.0,
            Damping::Rational(a) => -(a / (1.0 + a * t)).powi(2),
            Damping::Custom { d, t_scale } => {
                // a second difference at 1e-6 would lose ~4 digits to round-off
                let h = 1e-4 * t_scale;
                -((d(t + h)).ln() - 2.0 * (d(t)).ln() + (d(t - h)).ln()) / (h * h)
            }
        }
    }

    /// Damping rate when it is constant in time.
    pub fn constant_rate(&self) -> Option<f64> {
        match &self.damping {
            Damping::None => Some(0.0),
            Damping::Exponential(a) => Some(*a),
            _ => None,
        }
    }
}

/// Mass term left after the substitution `u = w / sqrt(Sigma)`; the modal
/// frequency squared becomes `p(gamma) - q`.
pub fn effective_mass(lapse: &TimeLapse, t: f64) -> f64 {
    let l1 = lapse.l1(t);
    lapse.l2(t) + l1 * l1
}

/// `int_0^1 q(delta zeta) d zeta` by 16-point Gauss-Legendre.
pub fn averaged_mass(lapse: &TimeLapse, delta: f64) -> f64 {
    if let Some(a) = lapse.constant_rate() {
        return a * a;
    }
    let (x, w) = gauss_legendre(16, 0.0, 1.0);
    x.iter()
        .zip(&w)
        .map(|(z, w)| w * effective_mass(lapse, delta * z))
        .sum()
}

/// Membrane-plate operator `p(x) = c_m^2 x - c_H^2 d^2 x^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MembraneOperator {
    pub c_m2: f64,
    pub c_h2: f64,
    pub thickness: f64,
}

impl MembraneOperator {
    pub fn stiffness(&self, gamma: f64) -> f64 {
        self.c_m2 * gamma - self.c_h2 * self.thickness * self.thickness * gamma * gamma
    }

    /// Requires `c_m^2 > c_H^2 d^2 gamma_max` over the basis.
    pub fn validate(&self, basis: &SpectralBasis) -> Result<()> {
        if !(self.c_m2 > 0.0) || !(self.c_h2 >= 0.0) || !(self.thickness > 0.0) {
            return invalid("membrane needs c_m2 > 0, c_h2 >= 0 and thickness > 0");
        }
        let gmax = basis.eigenvalues().into_iter().fold(0.0, f64::max);
        if !(self.c_m2 > self.c_h2 * self.thickness * self.thickness * gmax) {
            return invalid(format!(
                "bending term dominates: c_m2 = {} <= c_h2 d^2 gamma_max = {}",
                self.c_m2,
                self.c_h2 * self.thickness * self.thickness * gmax
            ));
        }
        Ok(())
    }
}

/// How the effective mass enters the kernel of non-exponential lapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QMode {
    /// `q` averaged over the lag, `qbar(t - tau)`.
    #[default]
    ZetaAverage,
    /// `q(tau)` at the source time.
    Pointwise,
}

/// Time series of modal coefficients, `modes[k][j]` at `t_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSeries {
    pub grid: TimeGrid,
    pub modes: Vec<Vec<Complex64>>,
}

impl ModalSeries {
    pub fn zeros(grid: TimeGrid, n: usize) -> Self {
        ModalSeries {
            grid,
            modes: vec![vec![Complex64::new(0.0, 0.0); grid.len()]; n],
        }
    }

    pub fn signals(&self) -> Vec<Signal> {
        self.modes.iter().map(|m| Signal::from_samples(m.clone())).collect()
    }

    /// Discrete L2 norm over modes and time.
    pub fn norm(&self) -> f64 {
        (self.modes.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.h).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.modes.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &ModalSeries) -> ModalSeries {
        ModalSeries {
            grid: self.grid,
            modes: self
                .modes
                .iter()
                .zip(&other.modes)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }
}

/// Modal source on a patch, one signal per basis mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSource {
    pub modes: Vec<Signal>,
}

/// Damped membrane response with zero initial data.
///
/// Each mode solves `u'' + 2 L1 u' + p(gamma_k) u = Psi_k`, written as
/// `u(t) = Sigma(t)^{-1/2} int K(t - tau) Sigma(tau)^{1/2} Psi(tau) dtau`
/// with `K` the sine kernel at frequency squared `p(gamma_k) - qbar`.
pub fn solve_membrane(
    basis: &SpectralBasis,
    op: &MembraneOperator,
    lapse: &TimeLapse,
    src: &PatchSource,
    grid: &TimeGrid,
    qmode: QMode,
) -> Result<ModalSeries> {
    op.validate(basis)?;
    if src.modes.len() != basis.len() {
        return invalid(format!(
            "source has {} modes, basis has {}",
            src.modes.len(),
            basis.len()
        ));
    }
    let p: Vec<f64> = basis.eigenvalues().iter().map(|&g| op.stiffness(g)).collect();
    solve_modal(&p, lapse, src, grid, qmode)
}

/// Same as [`solve_membrane`] with the modal stiffness `p_k` given directly.
pub fn solve_modal(
    p: &[f64],
    lapse: &TimeLapse,
    src: &PatchSource,
    grid: &TimeGrid,
    qmode: QMode,
) -> Result<ModalSeries> {
    if src.modes.len() != p.len() {
        return invalid("one stiffness per source mode is required");
    }
    let fmax = p
        .iter()
        .map(|v| v.abs().sqrt())
        .chain(src.modes.iter().map(|s| s.max_omega()))
        .fold(0.0, f64::max);
    grid.check_resolution(fmax)?;

    let taus = cell_times(grid);
    let modes: Result<Vec<Vec<Complex64>>> = src
        .modes
        .par_iter()
        .zip(p.par_iter())
        .map(|(s, &pk)| {
            if s.is_zero() {
                return Ok(vec![Complex64::new(0.0, 0.0); grid.len()]);
            }
            let mut cells = cell_values(s, grid)?;
            if let Some(a) = lapse.constant_rate() {
                return Ok(oscillator_response(grid, a, pk, &cells));
            }
            for (c, t) in cells.iter_mut().zip(&taus) {
                for g in 0..4 {
                    c[g] *= lapse.sqrt_sigma(t[g]);
                }
            }
            let mut out = match qmode {
                QMode::ZetaAverage => stationary_convolution(
                    grid,
                    |d| oscillator_cs(pk - averaged_mass(lapse, d), d).1,
                    &cells,
                )?,
                QMode::Pointwise => general_convolution(
                    grid,
                    |t, tau| oscillator_cs(pk - effective_mass(lapse, tau), t - tau).1,
                    &cells,
                )?,
            };
            for (j, v) in out.iter_mut().enumerate() {
                *v /= lapse.sqrt_sigma(grid.t(j));
            }
            Ok(out)
        })
        .collect();
    let modes = modes?;
    if modes.iter().flatten().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::NumericFailure("membrane solution is not finite".into()));
    }
    Ok(ModalSeries { grid: *grid, modes })
}

/// Solve `D' = -alpha f1(t) f2(D) + g(t)`, `D(0) = 1`, on a grid.
///
/// The homogeneous part is inverted from `int_1^D dx/f2(x) = -alpha int_0^t f1`.
/// A nonzero `g` adds `D_h(t) int_0^t g / D_h`, exact for `f2(x) = x`.
pub fn damping_ode_solve<F1, F2, G>(
    f1: F1,
    f2: F2,
    g: G,
    alpha: f64,
    t_grid: &[f64],
) -> Result<Vec<f64>>
where
    F1: Fn(f64) -> f64,
    F2: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if !(alpha >= 0.0) {
        return invalid("alpha must be non-negative");
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.first().is_some_and(|&t| t < 0.0) {
        return invalid("time grid must be non-negative and ascending");
    }
    let tol = 1e-13;
    let phi = |d: f64| integrate_scalar(|x| 1.0 / f2(x), 1.0, d, tol);
    // homogeneous solution at an arbitrary time, warm-started from `guess`
    let hom = |t: f64, guess: f64| -> Result<f64> {
        let target = -alpha * integrate_scalar(&f1, 0.0, t, tol)?;
        let mut hi = 1.0;
        let mut lo = guess.min(1.0);
        while phi(lo)? > target {
            hi = lo;
            lo *= 0.5;
            if lo < 1e-300 {
                return Err(Error::NumericFailure(format!(
                    "cannot invert int dx/f2 at t = {t} (target {target})"
                )));
            }
        }
        let mut d = lo;
        for _ in 0..200 {
            let r = phi(d)? - target;
            if r.abs() <= 1e-14 * (1.0 + target.abs()) {
                break;
            }
            if r < 0.0 {
                lo = d;
            } else {
                hi = d;
            }
            let newton = d - r * f2(d);
            d = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < 1e-16 * hi {
                break;
            }
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::NumericFailure(format!("damping inversion failed at t = {t}")));
        }
        Ok(d)
    };
    let mut out = Vec::with_capacity(t_grid.len());
    let mut acc = 0.0;
    let mut t_prev = 0.0;
    let mut d_prev = 1.0;
    for &t in t_grid {
        let dh = hom(t, d_prev)?;
        if t > t_prev {
            let guess = dh;
            acc += crate::quad::integrate(|s| Ok(g(s) / hom(s, guess)?), t_prev, t, tol)?;
        }
        t_prev = t;
        d_prev = dh;
        out.push(dh * (1.0 + acc));
    }
    Ok(out)
}
