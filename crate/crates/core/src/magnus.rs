//! Magnus expansion up to third order, matrix exponentials and the scalar
//! sine/cosine propagator kernels.

use nalgebra::{DMatrix, Matrix2};
use num_rational::Ratio;

use crate::error::{invalid, Error, Result};
use crate::quad;

/// Bernoulli number `B_k` with the `x/(e^x - 1)` convention (`B_1 = -1/2`).
pub fn bernoulli(k: usize) -> Result<Ratio<i128>> {
    if k > 20 {
        return Err(Error::Unsupported(format!(
            "Bernoulli numbers beyond B_20 are not tabulated (asked for B_{k})"
        )));
    }
    let mut b: Vec<Ratio<i128>> = vec![Ratio::from_integer(1)];
    for m in 1..=k {
        // sum_{j=0}^{m} C(m+1, j) B_j = 0
        let mut s = Ratio::from_integer(0);
        let mut binom: i128 = 1;
        for (j, bj) in b.iter().enumerate() {
            s += *bj * binom;
            binom = binom * (m as i128 + 1 - j as i128) / (j as i128 + 1);
        }
        b.push(-s / (m as i128 + 1));
    }
    Ok(b[k])
}

/// `t -> A(t)` over a fixed truncated basis.
pub struct TimeDependentGenerator<'a> {
    dim: usize,
    f: Box<dyn Fn(f64) -> DMatrix<f64> + Send + Sync + 'a>,
}

impl<'a> TimeDependentGenerator<'a> {
    pub fn new(dim: usize, f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'a) -> Self {
        TimeDependentGenerator {
            dim,
            f: Box::new(f),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        let a = (self.f)(t);
        if a.nrows() != self.dim || a.ncols() != self.dim {
            return invalid(format!(
                "generator returned a {}x{} matrix, expected {}x{}",
                a.nrows(),
                a.ncols(),
                self.dim,
                self.dim
            ));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(format!("non-finite generator entry at t = {t}")));
        }
        Ok(a)
    }
}

/// Graded Magnus terms for the interval `(tau, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnusGenerator {
    pub terms: Vec<DMatrix<f64>>,
    pub tau: f64,
    pub t: f64,
}

impl MagnusGenerator {
    /// Sum of the first `order` terms.
    pub fn truncated(&self, order: usize) -> DMatrix<f64> {
        let n = self.terms[0].nrows();
        self.terms
            .iter()
            .take(order)
            .fold(DMatrix::zeros(n, n), |acc, g| acc + g)
    }

    pub fn sum(&self) -> DMatrix<f64> {
        self.truncated(self.terms.len())
    }
}

/// Absolute tolerance for the nested integrals.
pub const MAGNUS_TOL: f64 = 1e-11;

fn comm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

fn cumulative(gen: &TimeDependentGenerator, tau: f64, s: f64) -> Result<DMatrix<f64>> {
    quad::integrate(|x| gen.eval(x), tau, s, MAGNUS_TOL)
}

/// First `order` (1..=3) Magnus terms of `gen` over `[tau, t]`.
///
/// The innermost integral is linear in the innermost generator, so it is
/// replaced by the running integral `J(s) = int_tau^s A`.
pub fn magnus_terms(
    gen: &TimeDependentGenerator,
    tau: f64,
    t: f64,
    order: usize,
) -> Result<MagnusGenerator> {
    if !(1..=3).contains(&order) {
        return Err(Error::Unsupported(format!("Magnus order {order} (supported: 1..=3)")));
    }
    if !(tau <= t) {
        return invalid(format!("interval [{tau}, {t}] is reversed"));
    }
    let mut terms = vec![cumulative(gen, tau, t)?];
    if order >= 2 {
        let g2: DMatrix<f64> = quad::integrate(
            |t1| {
                let a1 = gen.eval(t1)?;
                Ok(comm(&a1, &cumulative(gen, tau, t1)?))
            },
            tau,
            t,
            MAGNUS_TOL,
        )?;
        terms.push(g2 * 0.5);
    }
    if order >= 3 {
        let g3: DMatrix<f64> = quad::integrate(
            |t1| {
                let a1 = gen.eval(t1)?;
                quad::integrate(
                    |t2| {
                        let a2 = gen.eval(t2)?;
                        let j = cumulative(gen, tau, t2)?;
                        Ok(comm(&a1, &comm(&a2, &j)) + comm(&j, &comm(&a2, &a1)))
                    },
                    tau,
                    t1,
                    MAGNUS_TOL,
                )
            },
            tau,
            t,
            MAGNUS_TOL,
        )?;
        terms.push(g3 / 6.0);
    }
    Ok(MagnusGenerator { terms, tau, t })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceCertificate {
    pub value: f64,
    pub ok: bool,
}

/// `int_tau^t |A|_F` and whether it stays below pi.
pub fn convergence_certificate(
    gen: &TimeDependentGenerator,
    tau: f64,
    t: f64,
) -> Result<ConvergenceCertificate> {
    if !(tau <= t) {
        return invalid(format!("interval [{tau}, {t}] is reversed"));
    }
    let value = quad::integrate(|s| Ok(gen.eval(s)?.norm()), tau, t, MAGNUS_TOL)?;
    Ok(ConvergenceCertificate {
        value,
        ok: value < std::f64::consts::PI,
    })
}

const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371_920_351_148_152;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Scaling-and-squaring Pade(13) exponential.
pub fn matrix_exponential(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return invalid("matrix exponential needs a square matrix");
    }
    if m.iter().any(|v| !v.is_finite()) {
        return invalid("matrix has non-finite entries");
    }
    let nrm = norm1(m);
    let s = if nrm > THETA13 {
        (nrm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = m / 2f64.powi(s);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &id * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &id * b[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or_else(|| Error::NumericFailure("singular Pade denominator".into()))?;
    for _ in 0..s {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("matrix exponential overflowed".into()));
    }
    Ok(r)
}

/// `(C, S)` with `C = cos(dt w)`, `S = sin(dt w)/w` for `w^2 = w2`, continued
/// through `w2 = 0` and into the hyperbolic branch for `w2 < 0`.
pub(crate) fn oscillator_cs(w2: f64, dt: f64) -> (f64, f64) {
    let x = w2 * dt * dt;
    if x.abs() < 1e-3 {
        // Taylor series in x up to x^4
        let c = 1.0 - x / 2.0 * (1.0 - x / 12.0 * (1.0 - x / 30.0 * (1.0 - x / 56.0)));
        let s = dt * (1.0 - x / 6.0 * (1.0 - x / 20.0 * (1.0 - x / 42.0 * (1.0 - x / 72.0))));
        (c, s)
    } else if w2 > 0.0 {
        let w = w2.sqrt();
        ((w * dt).cos(), (w * dt).sin() / w)
    } else {
        let k = (-w2).sqrt();
        ((k * dt).cosh(), (k * dt).sinh() / k)
    }
}

fn check_kernel_args(lambda: f64, dt: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return invalid(format!(
            "kernel needs lambda >= 0 (got {lambda}); use the hyperbolic kernels for negative values"
        ));
    }
    if !(dt >= 0.0) {
        return invalid(format!("kernel needs dt >= 0 (got {dt})"));
    }
    Ok(())
}

/// `sin(dt sqrt(lambda)) / sqrt(lambda)`, equal to `dt` at `lambda = 0`.
pub fn sine_kernel(lambda: f64, dt: f64) -> Result<f64> {
    check_kernel_args(lambda, dt)?;
    Ok(oscillator_cs(lambda, dt).1)
}

/// `cos(dt sqrt(lambda))`.
pub fn cosine_kernel(lambda: f64, dt: f64) -> Result<f64> {
    check_kernel_args(lambda, dt)?;
    Ok(oscillator_cs(lambda, dt).0)
}

/// `sinh(dt sqrt(kappa)) / sqrt(kappa)` for the over-damped branch.
pub fn sinh_kernel(kappa: f64, dt: f64) -> Result<f64> {
    check_kernel_args(kappa, dt)?;
    Ok(oscillator_cs(-kappa, dt).1)
}

/// `cosh(dt sqrt(kappa))`.
pub fn cosh_kernel(kappa: f64, dt: f64) -> Result<f64> {
    check_kernel_args(kappa, dt)?;
    Ok(oscillator_cs(-kappa, dt).0)
}

/// Exact propagators of `(w, w')` for `w'' = -lambda w` over `dt`.
pub fn block_wave_exponential(lambdas: &[f64], dt: f64) -> Vec<Matrix2<f64>> {
    lambdas
        .iter()
        .map(|&l| {
            let (c, s) = oscillator_cs(l, dt);
            Matrix2::new(c, s, -l * s, c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn bernoulli_values() {
        assert_eq!(bernoulli(0).unwrap(), Ratio::from_integer(1));
        assert_eq!(bernoulli(1).unwrap(), Ratio::new(-1, 2));
        assert_eq!(bernoulli(2).unwrap(), Ratio::new(1, 6));
        assert_eq!(bernoulli(3).unwrap(), Ratio::from_integer(0));
        assert_eq!(bernoulli(4).unwrap(), Ratio::new(-1, 30));
        assert_eq!(bernoulli(12).unwrap(), Ratio::new(-691, 2730));
        assert_eq!(bernoulli(20).unwrap(), Ratio::new(-174_611, 330));
        assert!(matches!(bernoulli(21), Err(Error::Unsupported(_))));
    }

    #[test]
    fn bernoulli_matches_generating_function() {
        // x/(e^x - 1) at x = 0.3 from the series against the closed form
        let x: f64 = 0.3;
        let mut s = 0.0;
        let mut fact = 1.0;
        for k in 0..=20 {
            if k > 0 {
                fact *= k as f64;
            }
            let b = bernoulli(k).unwrap();
            s += (*b.numer() as f64 / *b.denom() as f64) * x.powi(k as i32) / fact;
        }
        assert!((s - x / x.exp_m1()).abs() < 1e-15);
    }

    fn airy() -> TimeDependentGenerator<'static> {
        TimeDependentGenerator::new(2, |t| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, t, 0.0]))
    }

    #[test]
    fn second_term_for_airy_generator() {
        for &t in &[0.5, 1.0, 1.7] {
            let g = magnus_terms(&airy(), 0.0, t, 2).unwrap();
            let t3 = t * t * t / 12.0;
            let expect = DMatrix::from_row_slice(2, 2, &[-t3, 0.0, 0.0, t3]);
            assert!((&g.terms[1] - expect).amax() < 1e-10);
            assert!((g.terms[0][(1, 0)] - t * t / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn commuting_generators_have_no_higher_terms() {
        let gen = TimeDependentGenerator::new(3, |t| DMatrix::identity(3, 3) * (1.0 + t.sin()));
        let g = magnus_terms(&gen, 0.2, 1.5, 3).unwrap();
        assert!(g.terms[1].amax() < 1e-12);
        assert!(g.terms[2].amax() < 1e-12);
        let a = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.1]);
        let ac = a.clone();
        let gen = TimeDependentGenerator::new(2, move |_| ac.clone());
        let g = magnus_terms(&gen, 0.0, 0.8, 3).unwrap();
        assert!((&g.terms[0] - &a * 0.8).amax() < 1e-13);
        assert!(g.terms[1].amax() < 1e-12 && g.terms[2].amax() < 1e-12);
    }

    #[test]
    fn certificate_thresholds() {
        let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.8]);
        let gen = TimeDependentGenerator::new(2, move |_| a.clone());
        assert!(convergence_certificate(&gen, 0.0, 3.0).unwrap().ok);
        assert!(!convergence_certificate(&gen, 0.0, 3.2).unwrap().ok);
        let c = convergence_certificate(&airy(), 0.0, 1.0).unwrap();
        // int_0^1 sqrt(1 + t^2) dt
        let exact = (2f64.sqrt() + 1f64.asinh()) / 2.0;
        assert!((c.value - exact).abs() < 1e-12);
        assert!(c.ok);
    }

    #[test]
    fn exponential_special_cases() {
        let z = matrix_exponential(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(z, DMatrix::identity(3, 3));
        let d = matrix_exponential(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            1.0, 2.0,
        ])))
        .unwrap();
        assert!((d[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((d[(1, 1)] - 2f64.exp()).abs() < 1e-13);
        let r = matrix_exponential(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap();
        let (c, s) = (1f64.cos(), 1f64.sin());
        let rot = DMatrix::from_row_slice(2, 2, &[c, s, -s, c]);
        assert!((r - rot).amax() < 1e-15);
        assert!(matrix_exponential(&DMatrix::from_element(2, 2, 1e6)).is_err());
    }

    #[test]
    fn exponential_against_nalgebra_large_norm() {
        let m = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0) * 3.0;
        let mine = matrix_exponential(&m).unwrap();
        let theirs = m.clone().exp();
        assert!((&mine - &theirs).norm() / theirs.norm() < 1e-12);
    }

    #[test]
    fn kernels() {
        assert_eq!(sine_kernel(0.0, 0.7).unwrap(), 0.7);
        assert!((sine_kernel(1.0, PI / 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(sine_kernel(4.0, PI).unwrap().abs() < 1e-15);
        assert!((cosine_kernel(4.0, PI).unwrap() - 1.0).abs() < 1e-15);
        assert!((sine_kernel(1e-14, 2.0).unwrap() - 2.0).abs() < 1e-7 * 2.0);
        assert!(sine_kernel(-1.0, 1.0).is_err());
        assert!(sine_kernel(1.0, -1.0).is_err());
        assert!((sinh_kernel(4.0, 1.0).unwrap() - 2f64.sinh() / 2.0).abs() < 1e-14);
        assert!((cosh_kernel(4.0, 1.0).unwrap() - 2f64.cosh()).abs() < 1e-14);
    }

    #[test]
    fn taylor_branch_is_continuous() {
        for &w2 in &[1e-3 * 0.999, 1e-3 * 1.001, -1e-3 * 0.999, -1e-3 * 1.001] {
            let (c, s) = oscillator_cs(w2, 1.0);
            let (ce, se) = if w2 > 0.0 {
                (w2.sqrt().cos(), w2.sqrt().sin() / w2.sqrt())
            } else {
                ((-w2).sqrt().cosh(), (-w2).sqrt().sinh() / (-w2).sqrt())
            };
            assert!((c - ce).abs() < 1e-15 && (s - se).abs() < 1e-15);
        }
    }

    #[test]
    fn wave_blocks() {
        let b = block_wave_exponential(&[0.0, 1.0], 2.0 * PI);
        assert_eq!(b[0], Matrix2::new(1.0, 2.0 * PI, 0.0, 1.0));
        assert!((b[1] - Matrix2::identity()).amax() < 1e-14);
    }

    proptest! {
        #[test]
        fn wave_block_group_property(l in 0.0f64..50.0, t1 in 0.0f64..3.0, t2 in 0.0f64..3.0) {
            let a = block_wave_exponential(&[l], t1)[0];
            let b = block_wave_exponential(&[l], t2)[0];
            let c = block_wave_exponential(&[l], t1 + t2)[0];
            prop_assert!((a * b - c).amax() < 1e-10 * (1.0 + l));
        }

        #[test]
        fn wave_block_matches_exponential(l in 0.0f64..30.0, t in 0.0f64..2.0) {
            let b = block_wave_exponential(&[l], t)[0];
            let m = DMatrix::from_row_slice(2, 2, &[0.0, t, -l * t, 0.0]);
            let e = matrix_exponential(&m).unwrap();
            for i in 0..2 { for j in 0..2 {
                prop_assert!((b[(i, j)] - e[(i, j)]).abs() < 1e-10 * (1.0 + l));
            }}
        }
    }
}
