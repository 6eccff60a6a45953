//! Duhamel convolutions on a uniform time grid.
//!
//! Every solution here has the form `y(t_i) = int_0^{t_i} K(t_i, tau) f(tau) dtau`
//! with zero initial data. Each grid cell is integrated with a 4-point
//! Gauss-Legendre rule; sampled sources are interpolated to the Gauss points
//! with local cubics, harmonic sources are evaluated exactly.

use num_complex::Complex64;

use crate::error::{invalid, Result};
use crate::magnus::oscillator_cs;
use crate::quad::gauss_legendre;

/// Largest admissible `(max angular frequency) * h`.
pub const STEP_RULE: f64 = 0.2;

/// `t_j = j h` for `j = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub h: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Grid on `[0, t_end]` whose step does not exceed `max_h`.
    pub fn covering(t_end: f64, max_h: f64) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) || !(max_h > 0.0) {
            return invalid(format!("bad time grid: t_end = {t_end}, dt = {max_h}"));
        }
        let steps = (t_end / max_h - 1e-9).ceil().max(3.0) as usize;
        Ok(TimeGrid {
            h: t_end / steps as f64,
            steps,
        })
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t(&self, j: usize) -> f64 {
        j as f64 * self.h
    }

    pub fn t_end(&self) -> f64 {
        self.t(self.steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.t(j)).collect()
    }

    /// Fails when `max_freq * h` exceeds [`STEP_RULE`].
    pub fn check_resolution(&self, max_freq: f64) -> Result<()> {
        if max_freq * self.h > STEP_RULE {
            return invalid(format!(
                "time step {} too coarse for angular frequency {max_freq:.4e} (need freq*dt <= {STEP_RULE})",
                self.h
            ));
        }
        Ok(())
    }
}

/// `amp * exp(i omega t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub amp: Complex64,
    pub omega: f64,
}

/// A complex time signal: optional grid samples plus exact harmonics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Signal {
    pub sampled: Option<Vec<Complex64>>,
    pub harmonics: Vec<Harmonic>,
}

fn lagrange4(x: f64) -> [f64; 4] {
    [
        -(x - 1.0) * (x - 2.0) * (x - 3.0) / 6.0,
        x * (x - 2.0) * (x - 3.0) / 2.0,
        -x * (x - 1.0) * (x - 3.0) / 2.0,
        x * (x - 1.0) * (x - 2.0) / 6.0,
    ]
}

impl Signal {
    pub fn zero() -> Self {
        Signal::default()
    }

    pub fn from_samples(v: Vec<Complex64>) -> Self {
        Signal {
            sampled: Some(v),
            harmonics: Vec::new(),
        }
    }

    pub fn harmonic(amp: Complex64, omega: f64) -> Self {
        Signal {
            sampled: None,
            harmonics: vec![Harmonic { amp, omega }],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.harmonics.iter().all(|h| h.amp == Complex64::new(0.0, 0.0))
            && self
                .sampled
                .as_ref()
                .is_none_or(|s| s.iter().all(|v| *v == Complex64::new(0.0, 0.0)))
    }

    pub fn max_omega(&self) -> f64 {
        self.harmonics.iter().map(|h| h.omega.abs()).fold(0.0, f64::max)
    }

    /// `sum_i c_i s_i`, merging harmonics that share a frequency.
    pub fn combine(terms: &[(Complex64, &Signal)]) -> Signal {
        let mut out = Signal::zero();
        for (c, s) in terms {
            if let Some(v) = &s.sampled {
                let acc = out
                    .sampled
                    .get_or_insert_with(|| vec![Complex64::new(0.0, 0.0); v.len()]);
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += c * x;
                }
            }
            for h in &s.harmonics {
                match out.harmonics.iter_mut().find(|g| g.omega == h.omega) {
                    Some(g) => g.amp += c * h.amp,
                    None => out.harmonics.push(Harmonic {
                        amp: c * h.amp,
                        omega: h.omega,
                    }),
                }
            }
        }
        out
    }

    pub fn scaled(&self, c: Complex64) -> Signal {
        Signal::combine(&[(c, self)])
    }

    fn check_len(&self, grid: &TimeGrid) -> Result<()> {
        if let Some(v) = &self.sampled {
            if v.len() != grid.len() {
                return invalid(format!(
                    "signal has {} samples, grid has {} points",
                    v.len(),
                    grid.len()
                ));
            }
        }
        Ok(())
    }

    fn interp(v: &[Complex64], h: f64, t: f64) -> Complex64 {
        let n = v.len();
        let s = t / h;
        if n < 4 {
            let j = (s.floor().max(0.0) as usize).min(n.saturating_sub(2));
            if n == 1 {
                return v[0];
            }
            let x = s - j as f64;
            return v[j] * (1.0 - x) + v[j + 1] * x;
        }
        let cell = (s.floor().max(0.0) as usize).min(n - 2);
        let start = cell.saturating_sub(1).min(n - 4);
        let l = lagrange4(s - start as f64);
        (0..4).map(|k| v[start + k] * l[k]).sum()
    }

    /// Value at an arbitrary time; sampled parts use the local cubic.
    pub fn eval(&self, grid: &TimeGrid, t: f64) -> Complex64 {
        let mut v: Complex64 = self
            .harmonics
            .iter()
            .map(|h| h.amp * Complex64::new(0.0, h.omega * t).exp())
            .sum();
        if let Some(s) = &self.sampled {
            v += Self::interp(s, grid.h, t);
        }
        v
    }

    /// Values on the grid.
    pub fn samples(&self, grid: &TimeGrid) -> Vec<Complex64> {
        (0..grid.len())
            .map(|j| {
                let t = grid.t(j);
                let mut v: Complex64 = self
                    .harmonics
                    .iter()
                    .map(|h| h.amp * Complex64::new(0.0, h.omega * t).exp())
                    .sum();
                if let Some(s) = &self.sampled {
                    v += s[j];
                }
                v
            })
            .collect()
    }

    /// Second time derivative: centred differences for samples (second-order
    /// one-sided stencils at the ends), `-omega^2` for harmonics.
    pub fn second_derivative(&self, grid: &TimeGrid) -> Result<Signal> {
        self.check_len(grid)?;
        let sampled = match &self.sampled {
            None => None,
            Some(u) => {
                let n = u.len();
                if n < 4 {
                    return invalid("second derivative needs at least 4 samples");
                }
                let h2 = grid.h * grid.h;
                let mut d = vec![Complex64::new(0.0, 0.0); n];
                for j in 1..n - 1 {
                    d[j] = (u[j + 1] - u[j] * 2.0 + u[j - 1]) / h2;
                }
                d[0] = (u[0] * 2.0 - u[1] * 5.0 + u[2] * 4.0 - u[3]) / h2;
                d[n - 1] = (u[n - 1] * 2.0 - u[n - 2] * 5.0 + u[n - 3] * 4.0 - u[n - 4]) / h2;
                Some(d)
            }
        };
        Ok(Signal {
            sampled,
            harmonics: self
                .harmonics
                .iter()
                .map(|h| Harmonic {
                    amp: h.amp * (-h.omega * h.omega),
                    omega: h.omega,
                })
                .collect(),
        })
    }

    /// First time derivative, same stencil conventions.
    pub fn first_derivative(&self, grid: &TimeGrid) -> Result<Signal> {
        self.check_len(grid)?;
        let sampled = match &self.sampled {
            None => None,
            Some(u) => {
                let n = u.len();
                if n < 3 {
                    return invalid("first derivative needs at least 3 samples");
                }
                let mut d = vec![Complex64::new(0.0, 0.0); n];
                for j in 1..n - 1 {
                    d[j] = (u[j + 1] - u[j - 1]) / (2.0 * grid.h);
                }
                d[0] = (u[1] * 4.0 - u[0] * 3.0 - u[2]) / (2.0 * grid.h);
                d[n - 1] = (u[n - 1] * 3.0 - u[n - 2] * 4.0 + u[n - 3]) / (2.0 * grid.h);
                Some(d)
            }
        };
        Ok(Signal {
            sampled,
            harmonics: self
                .harmonics
                .iter()
                .map(|h| Harmonic {
                    amp: h.amp * Complex64::new(0.0, h.omega),
                    omega: h.omega,
                })
                .collect(),
        })
    }
}

/// Gauss points of one cell in units of `h`, weights summing to 1.
#[derive(Debug, Clone, Copy)]
pub struct CellRule {
    pub x: [f64; 4],
    pub w: [f64; 4],
}

impl CellRule {
    pub fn new() -> Self {
        let (x, w) = gauss_legendre(4, 0.0, 1.0);
        CellRule {
            x: [x[0], x[1], x[2], x[3]],
            w: [w[0], w[1], w[2], w[3]],
        }
    }
}

impl Default for CellRule {
    fn default() -> Self {
        Self::new()
    }
}

/// Source values at the Gauss points of every cell.
pub type Cells = Vec<[Complex64; 4]>;

/// Gauss-point values of a signal for each of the `steps` cells.
pub fn cell_values(signal: &Signal, grid: &TimeGrid) -> Result<Cells> {
    signal.check_len(grid)?;
    let rule = CellRule::new();
    Ok((0..grid.steps)
        .map(|j| {
            let mut c = [Complex64::new(0.0, 0.0); 4];
            for g in 0..4 {
                c[g] = signal.eval(grid, grid.t(j) + grid.h * rule.x[g]);
            }
            c
        })
        .collect())
}

/// Gauss-point times of every cell.
pub fn cell_times(grid: &TimeGrid) -> Vec<[f64; 4]> {
    let rule = CellRule::new();
    (0..grid.steps)
        .map(|j| {
            let mut c = [0.0; 4];
            for g in 0..4 {
                c[g] = grid.t(j) + grid.h * rule.x[g];
            }
            c
        })
        .collect()
}

/// Response of `y'' + 2 alpha y' + p y = f` with zero initial data, via the
/// exact two-step propagator of the homogeneous equation. The result equals
/// the Gauss-cell sum with kernel `exp(-alpha d) sin(d w)/w`, `w^2 = p - alpha^2`.
pub fn oscillator_response(grid: &TimeGrid, alpha: f64, p: f64, cells: &Cells) -> Vec<Complex64> {
    let rule = CellRule::new();
    let h = grid.h;
    let w2 = p - alpha * alpha;
    let (c, s) = oscillator_cs(w2, h);
    let e = (-alpha * h).exp();
    let m = [
        [e * (c + alpha * s), e * s],
        [-e * p * s, e * (c - alpha * s)],
    ];
    let mut tail = [(0.0, 0.0); 4];
    for g in 0..4 {
        let d = h * (1.0 - rule.x[g]);
        let (cd, sd) = oscillator_cs(w2, d);
        let ed = (-alpha * d).exp();
        tail[g] = (h * rule.w[g] * ed * sd, h * rule.w[g] * ed * (cd - alpha * sd));
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut out = vec![zero; grid.len()];
    let (mut y, mut dy) = (zero, zero);
    for (j, cell) in cells.iter().enumerate() {
        let ny = y * m[0][0] + dy * m[0][1];
        let ndy = y * m[1][0] + dy * m[1][1];
        y = ny;
        dy = ndy;
        for g in 0..4 {
            y += cell[g] * tail[g].0;
            dy += cell[g] * tail[g].1;
        }
        out[j + 1] = y;
    }
    out
}

/// Gauss-cell sum `y_i = sum_{j<i} sum_g h w_g K(t_i - tau_jg) f_jg` for a
/// kernel depending on the lag only. Direct O(N^2) summation.
pub fn stationary_convolution<K>(grid: &TimeGrid, kernel: K, cells: &Cells) -> Result<Vec<Complex64>>
where
    K: Fn(f64) -> f64,
{
    let rule = CellRule::new();
    let h = grid.h;
    let n = grid.steps;
    let mut tab = vec![[0.0; 4]; n + 1];
    for (m, row) in tab.iter_mut().enumerate().skip(1) {
        for g in 0..4 {
            let k = kernel(m as f64 * h - h * rule.x[g]);
            if !k.is_finite() {
                return Err(crate::Error::NumericFailure(format!(
                    "non-finite kernel value at lag {}",
                    m as f64 * h - h * rule.x[g]
                )));
            }
            row[g] = h * rule.w[g] * k;
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); grid.len()];
    for (i, o) in out.iter_mut().enumerate().skip(1) {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, cell) in cells.iter().enumerate().take(i) {
            let k = &tab[i - j];
            acc += cell[0] * k[0] + cell[1] * k[1] + cell[2] * k[2] + cell[3] * k[3];
        }
        *o = acc;
    }
    Ok(out)
}

/// Gauss-cell sum for a general kernel `K(t, tau)`.
pub fn general_convolution<K>(grid: &TimeGrid, kernel: K, cells: &Cells) -> Result<Vec<Complex64>>
where
    K: Fn(f64, f64) -> f64,
{
    let rule = CellRule::new();
    let h = grid.h;
    let mut out = vec![Complex64::new(0.0, 0.0); grid.len()];
    for (i, o) in out.iter_mut().enumerate().skip(1) {
        let t = grid.t(i);
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, cell) in cells.iter().enumerate().take(i) {
            for g in 0..4 {
                let tau = grid.t(j) + h * rule.x[g];
                let k = kernel(t, tau);
                if !k.is_finite() {
                    return Err(crate::Error::NumericFailure(format!(
                        "non-finite kernel value at t = {t}, tau = {tau}"
                    )));
                }
                acc += cell[g] * (h * rule.w[g] * k);
            }
        }
        *o = acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn grid_covering() {
        let g = TimeGrid::covering(1.0, 0.3).unwrap();
        assert_eq!(g.steps, 4);
        assert!((g.t_end() - 1.0).abs() < 1e-15);
        assert!(g.check_resolution(0.2 / 0.25 + 1e-9).is_err());
        assert!(g.check_resolution(0.7).is_ok());
        assert!(TimeGrid::covering(-1.0, 0.1).is_err());
    }

    #[test]
    fn cubic_interpolation_is_exact_for_cubics() {
        let g = TimeGrid { h: 0.1, steps: 10 };
        let f = |t: f64| 1.0 - 2.0 * t + 3.0 * t * t - 0.5 * t.powi(3);
        let s = Signal::from_samples(g.times().iter().map(|&t| c(f(t))).collect());
        for &t in &[0.0, 0.013, 0.55, 0.97, 1.0] {
            assert!((s.eval(&g, t).re - f(t)).abs() < 1e-13);
        }
    }

    #[test]
    fn second_derivative_of_quadratic() {
        let g = TimeGrid { h: 0.05, steps: 20 };
        let s = Signal::from_samples(g.times().iter().map(|&t| c(3.0 * t * t - t)).collect());
        let d = s.second_derivative(&g).unwrap().sampled.unwrap();
        assert!(d.iter().all(|v| (v.re - 6.0).abs() < 1e-9));
        let d1 = s.first_derivative(&g).unwrap().sampled.unwrap();
        for (j, v) in d1.iter().enumerate() {
            assert!((v.re - (6.0 * g.t(j) - 1.0)).abs() < 1e-10);
        }
        let hs = Signal::harmonic(c(2.0), 3.0).second_derivative(&g).unwrap();
        assert_eq!(hs.harmonics[0].amp, c(-18.0));
    }

    #[test]
    fn combine_merges_harmonics() {
        let a = Signal::harmonic(c(1.0), 2.0);
        let b = Signal::harmonic(c(3.0), 2.0);
        let s = Signal::combine(&[(c(2.0), &a), (c(-1.0), &b)]);
        assert_eq!(s.harmonics.len(), 1);
        assert_eq!(s.harmonics[0].amp, c(-1.0));
    }

    #[test]
    fn oscillator_matches_direct_sum() {
        let g = TimeGrid { h: 0.01, steps: 700 };
        let src = Signal::combine(&[
            (c(1.0), &Signal::harmonic(Complex64::new(0.5, -0.2), 1.3)),
            (
                c(1.0),
                &Signal::from_samples(g.times().iter().map(|&t| c((-t).exp())).collect()),
            ),
        ]);
        let cells = cell_values(&src, &g).unwrap();
        for &(alpha, p) in &[(0.0, 9.0), (0.7, 9.0), (2.0, 1.0), (0.0, 0.0)] {
            let fast = oscillator_response(&g, alpha, p, &cells);
            let w2: f64 = p - alpha * alpha;
            let direct = stationary_convolution(
                &g,
                |d| (-alpha * d).exp() * oscillator_cs(w2, d).1,
                &cells,
            )
            .unwrap();
            let scale = direct.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for (a, b) in fast.iter().zip(&direct) {
                assert!((a - b).norm() < 1e-12 * scale, "alpha {alpha} p {p}");
            }
        }
    }

    #[test]
    fn oscillator_solves_the_ode() {
        // y'' + 4 y = 1 -> y = (1 - cos 2t)/4
        let g = TimeGrid { h: 0.02, steps: 500 };
        let cells = cell_values(&Signal::harmonic(c(1.0), 0.0), &g).unwrap();
        let y = oscillator_response(&g, 0.0, 4.0, &cells);
        for (j, v) in y.iter().enumerate() {
            let t = g.t(j);
            assert!((v.re - (1.0 - (2.0 * t).cos()) / 4.0).abs() < 1e-13);
        }
    }

    #[test]
    fn general_matches_stationary() {
        let g = TimeGrid { h: 0.05, steps: 60 };
        let cells = cell_values(&Signal::harmonic(c(1.0), 0.4), &g).unwrap();
        let a = stationary_convolution(&g, |d| d.sin(), &cells).unwrap();
        let b = general_convolution(&g, |t, s| (t - s).sin(), &cells).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-13);
        }
    }

    #[test]
    fn rejects_mismatched_samples() {
        let g = TimeGrid { h: 0.1, steps: 10 };
        assert!(cell_values(&Signal::from_samples(vec![c(1.0); 5]), &g).is_err());
    }

    proptest! {
        #[test]
        fn convolution_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, w in 0.1f64..3.0) {
            let g = TimeGrid { h: 0.02, steps: 100 };
            let f1 = Signal::harmonic(c(1.0), w);
            let f2 = Signal::from_samples(g.times().iter().map(|&t| c(t.cos())).collect());
            let mix = Signal::combine(&[(c(a), &f1), (c(b), &f2)]);
            let y = oscillator_response(&g, 0.3, 5.0, &cell_values(&mix, &g).unwrap());
            let y1 = oscillator_response(&g, 0.3, 5.0, &cell_values(&f1, &g).unwrap());
            let y2 = oscillator_response(&g, 0.3, 5.0, &cell_values(&f2, &g).unwrap());
            for i in 0..y.len() {
                prop_assert!((y[i] - (y1[i] * a + y2[i] * b)).norm() < 1e-12);
            }
        }
    }
}
