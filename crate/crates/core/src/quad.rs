//! Quadrature rules: Gauss-Legendre tables and an adaptive Gauss-Kronrod
//! integrator for scalar and matrix valued integrands.

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Gauss-Legendre nodes and weights mapped to `[a, b]`, nodes ascending.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let pairs: Vec<(f64, f64)> = match n {
        0 => Vec::new(),
        1 => vec![(0.0, 2.0)],
        _ => {
            let rule = GaussLegendre::new(n).expect("n >= 2");
            let mut p = rule.as_node_weight_pairs().to_vec();
            p.sort_by(|x, y| x.0.total_cmp(&y.0));
            p
        }
    };
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    pairs
        .into_iter()
        .map(|(x, w)| (mid + half * x, half * w))
        .unzip()
}

/// Values an adaptive rule can accumulate.
pub trait Integrand: Clone {
    fn zeroed(&self) -> Self;
    fn axpy(&mut self, a: f64, x: &Self);
    fn max_abs(&self) -> f64;
}

impl Integrand for f64 {
    fn zeroed(&self) -> Self {
        0.0
    }
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }
    fn max_abs(&self) -> f64 {
        self.abs()
    }
}

impl Integrand for DMatrix<f64> {
    fn zeroed(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += x * a;
    }
    fn max_abs(&self) -> f64 {
        self.amax()
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// 7-point Gauss weights at XGK[1], XGK[3], XGK[5], XGK[7]
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: usize = 48;

fn gk15<T, F>(f: &mut F, a: f64, b: f64) -> Result<(T, f64)>
where
    T: Integrand,
    F: FnMut(f64) -> Result<T>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kron = fc.zeroed();
    let mut gauss = fc.zeroed();
    kron.axpy(WGK[7], &fc);
    gauss.axpy(WG[3], &fc);
    for i in 0..7 {
        let f1 = f(c - h * XGK[i])?;
        let f2 = f(c + h * XGK[i])?;
        kron.axpy(WGK[i], &f1);
        kron.axpy(WGK[i], &f2);
        if i % 2 == 1 {
            gauss.axpy(WG[i / 2], &f1);
            gauss.axpy(WG[i / 2], &f2);
        }
    }
    let mut diff = kron.clone();
    diff.axpy(-1.0, &gauss);
    let err = h.abs() * diff.max_abs();
    let mut out = kron.zeroed();
    out.axpy(h, &kron);
    Ok((out, err))
}

fn adapt<T, F>(f: &mut F, a: f64, b: f64, tol: f64, depth: usize) -> Result<T>
where
    T: Integrand,
    F: FnMut(f64) -> Result<T>,
{
    let (val, err) = gk15(f, a, b)?;
    if !err.is_finite() || !val.max_abs().is_finite() {
        return Err(Error::NumericFailure(format!(
            "non-finite integrand on [{a}, {b}]"
        )));
    }
    // the floor keeps subdivision from chasing round-off on large values
    let floor = 64.0 * f64::EPSILON * val.max_abs();
    if err <= tol.max(floor) {
        return Ok(val);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::NumericFailure(format!(
            "adaptive quadrature did not converge on [{a}, {b}]: error estimate {err:e} > {tol:e}"
        )));
    }
    let m = 0.5 * (a + b);
    let mut left = adapt(f, a, m, 0.5 * tol, depth + 1)?;
    let right = adapt(f, m, b, 0.5 * tol, depth + 1)?;
    left.axpy(1.0, &right);
    Ok(left)
}

/// Adaptive Gauss-Kronrod 7-15 integration of a fallible integrand with an
/// absolute error target `tol`.
pub fn integrate<T, F>(mut f: F, a: f64, b: f64, tol: f64) -> Result<T>
where
    T: Integrand,
    F: FnMut(f64) -> Result<T>,
{
    if a == b {
        let probe = f(a)?;
        return Ok(probe.zeroed());
    }
    adapt(&mut f, a, b, tol, 0)
}

/// Scalar convenience wrapper around [`integrate`].
pub fn integrate_scalar<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    integrate(|x| Ok(f(x)), a, b, tol)
}
