//! Cavity pressure: modal Duhamel solution driven by boundary accelerations,
//! plus the metric perturbation of a vibrating patch and the operators
//! V, T, W it induces on the cavity basis.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::duhamel::{cell_values, oscillator_response, Signal, TimeGrid};
use crate::error::{invalid, Error, Result};
use crate::geometry::{nodes_for_index, CavityGeometry, PatchGeometry, Side, SpectralBasis};
use crate::membrane::ModalSeries;
use crate::quad::gauss_legendre;

/// Sound speed `c` and rest density `rho0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcousticMedium {
    pub c: f64,
    pub rho0: f64,
}

impl AcousticMedium {
    pub fn new(c: f64, rho0: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) || !(rho0 > 0.0 && rho0.is_finite()) {
            return invalid(format!("medium needs c > 0 and rho0 > 0 (got c = {c}, rho0 = {rho0})"));
        }
        Ok(AcousticMedium { c, rho0 })
    }
}

fn max_index(basis: &SpectralBasis, axis: usize) -> usize {
    basis.modes().iter().map(|m| m.index[axis]).max().unwrap_or(0)
}

/// Tensor rule over a patch rectangle, sized for products of cavity modes
/// and `extra` extra oscillations per tangent axis.
fn face_rule(
    geom: &CavityGeometry,
    cavity: &SpectralBasis,
    patch: &PatchGeometry,
    extra: &[usize],
) -> Vec<(Vec<f64>, f64)> {
    let tang = patch.tangent_axes(geom.dim());
    let mut pts: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
    for (k, &d) in tang.iter().enumerate() {
        let n = nodes_for_index(max_index(cavity, d) + extra.get(k).copied().unwrap_or(0));
        let (x, w) = gauss_legendre(n, patch.lo[k], patch.hi[k]);
        let mut next = Vec::with_capacity(pts.len() * n);
        for (y, wy) in &pts {
            for (xi, wi) in x.iter().zip(&w) {
                let mut z = y.clone();
                z.push(*xi);
                next.push((z, wy * wi));
            }
        }
        pts = next;
    }
    pts
}

/// Boundary traces of the cavity basis on each patch.
///
/// `modal[i][(n, k)] = int_{Gamma_i} Psi_n phi_k` and
/// `piston[i][n] = int_{Gamma_i} Psi_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCoupling {
    pub modal: Vec<DMatrix<f64>>,
    pub piston: Vec<Vec<f64>>,
}

impl BoundaryCoupling {
    pub fn new(
        geom: &CavityGeometry,
        cavity: &SpectralBasis,
        patch_bases: &[SpectralBasis],
    ) -> Result<Self> {
        if patch_bases.len() != geom.patches().len() {
            return invalid("one patch basis per patch is required");
        }
        let mut modal = Vec::new();
        let mut piston = Vec::new();
        for (i, (p, pb)) in geom.patches().iter().zip(patch_bases).enumerate() {
            let extra: Vec<usize> = (0..pb.dim()).map(|d| max_index(pb, d)).collect();
            let pts = face_rule(geom, cavity, p, &extra);
            let mut c = DMatrix::zeros(cavity.len(), pb.len());
            let mut m = vec![0.0; cavity.len()];
            for (y, w) in &pts {
                let x = geom.patch_point(i, y, 0.0);
                let psi: Vec<f64> = (0..cavity.len()).map(|n| cavity.eval(n, &x)).collect();
                let phi: Vec<f64> = (0..pb.len()).map(|k| pb.eval(k, y)).collect();
                for n in 0..cavity.len() {
                    m[n] += w * psi[n];
                    for k in 0..pb.len() {
                        c[(n, k)] += w * psi[n] * phi[k];
                    }
                }
            }
            modal.push(c);
            piston.push(m);
        }
        Ok(BoundaryCoupling { modal, piston })
    }
}

/// Inward normal displacement of one patch.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchMotion {
    /// Coefficients over the patch Dirichlet basis.
    Modal(Vec<Signal>),
    /// Rigid piston with the given mean displacement.
    Piston(Signal),
    Still,
}

/// Displacement of every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryVibration {
    pub patches: Vec<PatchMotion>,
}

impl BoundaryVibration {
    pub fn from_series(series: &[ModalSeries]) -> Self {
        BoundaryVibration {
            patches: series.iter().map(|s| PatchMotion::Modal(s.signals())).collect(),
        }
    }
}

/// Modal boundary source `b_n = sum_i int_{Gamma_i} Psi_n d^2u_i/dt^2`.
pub fn boundary_source(
    coupling: &BoundaryCoupling,
    motion: &BoundaryVibration,
    grid: &TimeGrid,
) -> Result<Vec<Signal>> {
    if motion.patches.len() != coupling.modal.len() {
        return invalid("motion must list every patch");
    }
    let ncav = coupling.piston.first().map_or(0, |p| p.len());
    let mut accel: Vec<(usize, Option<usize>, Signal)> = Vec::new();
    for (i, m) in motion.patches.iter().enumerate() {
        match m {
            PatchMotion::Still => {}
            PatchMotion::Piston(s) => accel.push((i, None, s.second_derivative(grid)?)),
            PatchMotion::Modal(v) => {
                if v.len() != coupling.modal[i].ncols() {
                    return invalid(format!("patch {i}: wrong number of modal signals"));
                }
                for (k, s) in v.iter().enumerate() {
                    if !s.is_zero() {
                        accel.push((i, Some(k), s.second_derivative(grid)?));
                    }
                }
            }
        }
    }
    Ok((0..ncav)
        .into_par_iter()
        .map(|n| {
            let terms: Vec<(Complex64, &Signal)> = accel
                .iter()
                .map(|(i, k, s)| {
                    let w = match k {
                        Some(k) => coupling.modal[*i][(n, *k)],
                        None => coupling.piston[*i][n],
                    };
                    (Complex64::new(w, 0.0), s)
                })
                .collect();
            Signal::combine(&terms)
        })
        .collect())
}

/// Pressure with zero initial data:
/// `p_n'' + c^2 lambda_n p_n = rho0 c^2 b_n`.
pub fn solve_pressure_from_source(
    cavity: &SpectralBasis,
    medium: &AcousticMedium,
    source: &[Signal],
    grid: &TimeGrid,
) -> Result<ModalSeries> {
    if source.len() != cavity.len() {
        return invalid("one source signal per cavity mode is required");
    }
    let lam = cavity.eigenvalues();
    let c2 = medium.c * medium.c;
    let fmax = lam
        .iter()
        .map(|l| medium.c * l.sqrt())
        .chain(source.iter().map(|s| s.max_omega()))
        .fold(0.0, f64::max);
    grid.check_resolution(fmax)?;
    let scale = medium.rho0 * c2;
    let modes: Result<Vec<Vec<Complex64>>> = source
        .par_iter()
        .zip(lam.par_iter())
        .map(|(b, &l)| {
            if b.is_zero() {
                return Ok(vec![Complex64::new(0.0, 0.0); grid.len()]);
            }
            let cells = cell_values(b, grid)?;
            let mut y = oscillator_response(grid, 0.0, c2 * l, &cells);
            for v in y.iter_mut() {
                *v *= scale;
            }
            Ok(y)
        })
        .collect();
    let modes = modes?;
    if modes.iter().flatten().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::NumericFailure("pressure solution is not finite".into()));
    }
    Ok(ModalSeries { grid: *grid, modes })
}

/// Cavity pressure driven by the boundary vibration.
pub fn solve_pressure(
    coupling: &BoundaryCoupling,
    motion: &BoundaryVibration,
    cavity: &SpectralBasis,
    medium: &AcousticMedium,
    grid: &TimeGrid,
) -> Result<ModalSeries> {
    let b = boundary_source(coupling, motion, grid)?;
    solve_pressure_from_source(cavity, medium, &b, grid)
}

/// Real coefficients of `u`, `du/dt` and `d^2u/dt^2` on one patch at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSnapshot {
    pub u: Vec<f64>,
    pub du: Vec<f64>,
    pub ddu: Vec<f64>,
}

impl PatchSnapshot {
    pub fn still(u: Vec<f64>) -> Self {
        let n = u.len();
        PatchSnapshot {
            u,
            du: vec![0.0; n],
            ddu: vec![0.0; n],
        }
    }

    /// Physical (real-part) snapshot at grid index `j`, derivatives by finite differences.
    pub fn from_series(series: &ModalSeries, j: usize) -> Result<Self> {
        let g = series.grid;
        let mut out = PatchSnapshot {
            u: Vec::new(),
            du: Vec::new(),
            ddu: Vec::new(),
        };
        for m in &series.modes {
            let s = Signal::from_samples(m.clone());
            out.u.push(m[j].re);
            out.du.push(s.first_derivative(&g)?.sampled.unwrap()[j].re);
            out.ddu.push(s.second_derivative(&g)?.sampled.unwrap()[j].re);
        }
        Ok(out)
    }

    pub fn scaled(&self, e: f64) -> Self {
        let f = |v: &Vec<f64>| v.iter().map(|x| x * e).collect();
        PatchSnapshot {
            u: f(&self.u),
            du: f(&self.du),
            ddu: f(&self.ddu),
        }
    }
}

/// One patch together with its basis and current state.
#[derive(Debug, Clone, Copy)]
pub struct PatchState<'a> {
    pub patch: usize,
    pub basis: &'a SpectralBasis,
    pub snap: &'a PatchSnapshot,
}

fn patch_field(basis: &SpectralBasis, c: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let mut v = 0.0;
    let mut g = vec![0.0; basis.dim()];
    for (k, ck) in c.iter().enumerate() {
        if *ck == 0.0 {
            continue;
        }
        v += ck * basis.eval(k, y);
        for (gd, d) in g.iter_mut().zip(basis.grad(k, y)) {
            *gd += ck * d;
        }
    }
    (v, g)
}

/// Local fields of a patch at depth `xi`: `W = (1 - xi/a) u` and friends.
struct Local {
    om: f64,
    a: f64,
    u: f64,
    gu: Vec<f64>,
    du: f64,
    gdu: Vec<f64>,
    ddu: f64,
}

impl Local {
    fn new(st: &PatchState, a: f64, y: &[f64], xi: f64) -> Self {
        let (u, gu) = patch_field(st.basis, &st.snap.u, y);
        let (du, gdu) = patch_field(st.basis, &st.snap.du, y);
        let (ddu, _) = patch_field(st.basis, &st.snap.ddu, y);
        Local {
            om: 1.0 - xi / a,
            a,
            u,
            gu,
            du,
            gdu,
            ddu,
        }
    }

    /// Spatial gradient of `W` in local `(xi, y)` coordinates.
    fn grad_w(&self) -> Vec<f64> {
        let mut g = vec![-self.u / self.a];
        g.extend(self.gu.iter().map(|v| self.om * v));
        g
    }

    /// `d W / dt`
    fn w_t(&self) -> f64 {
        self.om * self.du
    }
}

/// Metric perturbation of the cavity induced by the patch vibrations.
///
/// For each patch the fibre map moves the point at depth `xi` by
/// `W = (1 - xi/a) u` along the inward normal; the spatial perturbation is
/// `dg = grad W grad W^T`. The time row carries `dG_tt = W_t^2`,
/// `dG_t,xi = W_t dW/dxi` and `dG_t,y = -W_t dW/dy`. Contributions of
/// different patches are summed.
pub struct MetricPerturbation<'a> {
    geom: &'a CavityGeometry,
    states: Vec<PatchState<'a>>,
}

fn local_frame(geom: &CavityGeometry, p: &PatchGeometry, x: &[f64]) -> Option<(f64, Vec<f64>, f64)> {
    let a = geom.edge_lengths()[p.axis];
    let (xi, sign) = match p.side {
        Side::Low => (x[p.axis], 1.0),
        Side::High => (a - x[p.axis], -1.0),
    };
    let tang = p.tangent_axes(geom.dim());
    let y: Vec<f64> = tang.iter().map(|&d| x[d]).collect();
    let inside = y
        .iter()
        .enumerate()
        .all(|(k, v)| *v >= p.lo[k] && *v <= p.hi[k]);
    if inside {
        Some((xi, y, sign))
    } else {
        None
    }
}

/// Build the metric perturbation, checking `|u| <= 3 eps` on every patch grid.
pub fn assemble_metric_perturbation<'a>(
    geom: &'a CavityGeometry,
    states: &[PatchState<'a>],
    eps: f64,
) -> Result<MetricPerturbation<'a>> {
    for st in states {
        if st.patch >= geom.patches().len() {
            return invalid(format!("patch index {} out of range", st.patch));
        }
        for (y, _) in st.basis.grid() {
            let (u, _) = patch_field(st.basis, &st.snap.u, &y);
            if u.abs() > 3.0 * eps {
                return Err(Error::EnvelopeViolation(format!(
                    "patch {}: |u| = {:e} exceeds 3 eps = {:e}",
                    st.patch,
                    u.abs(),
                    3.0 * eps
                )));
            }
        }
    }
    Ok(MetricPerturbation {
        geom,
        states: states.to_vec(),
    })
}

impl MetricPerturbation<'_> {
    /// Space-time perturbation `dG` at cavity point `x`, index 0 is time.
    pub fn delta_big_g(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.geom.dim();
        let mut g = DMatrix::zeros(n + 1, n + 1);
        for st in &self.states {
            let p = &self.geom.patches()[st.patch];
            let Some((xi, y, sign)) = local_frame(self.geom, p, x) else {
                continue;
            };
            let loc = Local::new(st, self.geom.edge_lengths()[p.axis], &y, xi);
            let gw = loc.grad_w();
            // local (xi, y...) -> cavity axes
            let mut cart = vec![0.0; n];
            cart[p.axis] = sign * gw[0];
            for (k, &d) in p.tangent_axes(n).iter().enumerate() {
                cart[d] = gw[k + 1];
            }
            let wt = loc.w_t();
            g[(0, 0)] += wt * wt;
            for d in 0..n {
                let tsign = if d == p.axis { 1.0 } else { -1.0 };
                g[(0, d + 1)] += tsign * wt * cart[d];
                g[(d + 1, 0)] += tsign * wt * cart[d];
                for e in 0..n {
                    g[(d + 1, e + 1)] += cart[d] * cart[e];
                }
            }
        }
        g
    }

    /// Spatial block `dg`.
    pub fn delta_g(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.geom.dim();
        self.delta_big_g(x).view((1, 1), (n, n)).into_owned()
    }
}

/// Galerkin matrices of the perturbation operators at one instant.
///
/// `w[0..3]` act on `p`, `dp/dt`, `d^2p/dt^2`; `w[0] = v + t[0]`,
/// `w[1] = t[1]`, `w[2] = t[2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationOperators {
    pub v: DMatrix<f64>,
    pub t: [DMatrix<f64>; 3],
    pub w: [DMatrix<f64>; 3],
}

impl PerturbationOperators {
    pub fn v_norm(&self) -> f64 {
        self.v.norm()
    }

    pub fn t_norm(&self) -> f64 {
        self.t.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Cavity modes and local gradients on the slab under one patch.
struct Slab {
    w: Vec<f64>,
    psi: DMatrix<f64>,
    grad: Vec<DMatrix<f64>>,
    loc: Vec<Local>,
    face_w: Vec<f64>,
    face_psi: DMatrix<f64>,
    face_grad: Vec<DMatrix<f64>>,
    face_loc: Vec<Local>,
}

fn slab(geom: &CavityGeometry, cavity: &SpectralBasis, st: &PatchState) -> Slab {
    let p = &geom.patches()[st.patch];
    let n = geom.dim();
    let a = geom.edge_lengths()[p.axis];
    let sign = match p.side {
        Side::Low => 1.0,
        Side::High => -1.0,
    };
    let tang = p.tangent_axes(n);
    let extra: Vec<usize> = (0..st.basis.dim()).map(|d| 2 * max_index(st.basis, d)).collect();
    let face = face_rule(geom, cavity, p, &extra);
    let (xs, xw) = gauss_legendre(nodes_for_index(max_index(cavity, p.axis)) + 4, 0.0, a);
    let m = cavity.len();
    let eval = |pts: &[(Vec<f64>, f64, f64)]| {
        let mut psi = DMatrix::zeros(pts.len(), m);
        let mut grad = vec![DMatrix::zeros(pts.len(), m); n];
        for (r, (y, xi, _)) in pts.iter().enumerate() {
            let x = geom.patch_point(st.patch, y, *xi);
            for k in 0..m {
                psi[(r, k)] = cavity.eval(k, &x);
                let g = cavity.grad(k, &x);
                grad[0][(r, k)] = sign * g[p.axis];
                for (j, &d) in tang.iter().enumerate() {
                    grad[j + 1][(r, k)] = g[d];
                }
            }
        }
        (psi, grad)
    };
    let mut pts = Vec::with_capacity(face.len() * xs.len());
    for (y, wy) in &face {
        for (xi, wx) in xs.iter().zip(&xw) {
            pts.push((y.clone(), *xi, wy * wx));
        }
    }
    let (psi, grad) = eval(&pts);
    let loc = pts.iter().map(|(y, xi, _)| Local::new(st, a, y, *xi)).collect();
    let fpts: Vec<(Vec<f64>, f64, f64)> = face.iter().map(|(y, w)| (y.clone(), 0.0, *w)).collect();
    let (face_psi, face_grad) = eval(&fpts);
    let face_loc = fpts.iter().map(|(y, xi, _)| Local::new(st, a, y, *xi)).collect();
    Slab {
        w: pts.iter().map(|p| p.2).collect(),
        psi,
        grad,
        loc,
        face_w: fpts.iter().map(|p| p.2).collect(),
        face_psi,
        face_grad,
        face_loc,
    }
}

/// `sum_r f_r A[r, m] B[r, n]`
fn weighted(a: &DMatrix<f64>, f: &[f64], b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut fb = b.clone();
    for (r, v) in f.iter().enumerate() {
        fb.row_mut(r).scale_mut(*v);
    }
    a.transpose() * fb
}

/// `sum_d f_d(r) G_d[r, m]`
fn directional(grad: &[DMatrix<f64>], f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(grad[0].nrows(), grad[0].ncols());
    for (d, g) in grad.iter().enumerate() {
        for r in 0..g.nrows() {
            let s = f(r, d);
            if s != 0.0 {
                for k in 0..g.ncols() {
                    out[(r, k)] += s * g[(r, k)];
                }
            }
        }
    }
    out
}

/// `-1/2 int f (grad Psi_m . grad Psi_n - lambda_n Psi_m Psi_n)`
fn trace_block(s: &Slab, f: &[f64], lam: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(s.psi.ncols(), s.psi.ncols());
    for g in &s.grad {
        out += weighted(g, f, g);
    }
    let mut mass = weighted(&s.psi, f, &s.psi);
    for (n, l) in lam.iter().enumerate() {
        mass.column_mut(n).scale_mut(*l);
    }
    (out - mass) * -0.5
}

fn check_states(geom: &CavityGeometry, states: &[PatchState]) -> Result<()> {
    for st in states {
        if st.patch >= geom.patches().len() {
            return invalid(format!("patch index {} out of range", st.patch));
        }
        let n = st.basis.len();
        if st.snap.u.len() != n || st.snap.du.len() != n || st.snap.ddu.len() != n {
            return invalid(format!("patch {}: snapshot length does not match its basis", st.patch));
        }
    }
    Ok(())
}

fn v_block(s: &Slab, lam: &[f64]) -> DMatrix<f64> {
    let t: Vec<f64> = s
        .loc
        .iter()
        .map(|l| l.grad_w().iter().map(|g| g * g).sum())
        .collect();
    let wt: Vec<f64> = s.w.iter().zip(&t).map(|(w, t)| w * t).collect();
    let mut v = trace_block(s, &wt, lam);
    let gw: Vec<Vec<f64>> = s.loc.iter().map(|l| l.grad_w()).collect();
    let a = directional(&s.grad, |r, d| gw[r][d]);
    v += weighted(&a, &s.w, &a);
    // face term: -int Psi_m (u/a) grad u . grad_y Psi_n
    let fa = directional(&s.face_grad, |r, d| {
        if d == 0 {
            0.0
        } else {
            s.face_loc[r].gu[d - 1]
        }
    });
    let fw: Vec<f64> = s
        .face_w
        .iter()
        .zip(&s.face_loc)
        .map(|(w, l)| w * l.u / l.a)
        .collect();
    v -= weighted(&s.face_psi, &fw, &fa);
    v
}

/// Galerkin matrix `<Psi_m | V | Psi_n>` of the spatial perturbation operator.
pub fn assemble_v(
    geom: &CavityGeometry,
    cavity: &SpectralBasis,
    states: &[PatchState],
) -> Result<DMatrix<f64>> {
    check_states(geom, states)?;
    let lam = cavity.eigenvalues();
    let mut v = DMatrix::zeros(cavity.len(), cavity.len());
    for st in states {
        v += v_block(&slab(geom, cavity, st), &lam);
    }
    ensure_finite(&v)?;
    Ok(v)
}

fn ensure_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("operator matrix has non-finite entries".into()));
    }
    Ok(())
}

/// V together with the time-derivative operators T and their sum W.
pub fn assemble_t_and_w(
    geom: &CavityGeometry,
    cavity: &SpectralBasis,
    medium: &AcousticMedium,
    states: &[PatchState],
) -> Result<PerturbationOperators> {
    check_states(geom, states)?;
    let lam = cavity.eigenvalues();
    let m = cavity.len();
    let c2 = medium.c * medium.c;
    let c4 = c2 * c2;
    let mut v = DMatrix::zeros(m, m);
    let mut t0 = DMatrix::zeros(m, m);
    let mut t1 = DMatrix::zeros(m, m);
    let mut t2 = DMatrix::zeros(m, m);
    for st in states {
        let s = slab(geom, cavity, st);
        v += v_block(&s, &lam);
        let om2 = |l: &Local| l.om * l.om;
        // tau = -dG_tt / c^2
        let tau: Vec<f64> = s.w.iter().zip(&s.loc).map(|(w, l)| -w * om2(l) * l.du * l.du / c2).collect();
        t0 += trace_block(&s, &tau, &lam);
        // B = -dG_t. / c^2 in local coordinates
        let b = |l: &Local, d: usize| -> f64 {
            if d == 0 {
                l.om * l.u * l.du / (l.a * c2)
            } else {
                om2(l) * l.du * l.gu[d - 1] / c2
            }
        };
        let bdot = |l: &Local, d: usize| -> f64 {
            if d == 0 {
                l.om * (l.du * l.du + l.u * l.ddu) / (l.a * c2)
            } else {
                om2(l) * (l.ddu * l.gu[d - 1] + l.du * l.gdu[d - 1]) / c2
            }
        };
        let bd = directional(&s.grad, |r, d| bdot(&s.loc[r], d));
        t0 -= weighted(&s.psi, &s.w, &bd);

        let dtg: Vec<f64> = s
            .w
            .iter()
            .zip(&s.loc)
            .map(|(w, l)| {
                let dtau = -2.0 * om2(l) * l.du * l.ddu / c2;
                let dt = 2.0 * l.u * l.du / (l.a * l.a)
                    + 2.0 * om2(l) * l.gu.iter().zip(&l.gdu).map(|(a, b)| a * b).sum::<f64>();
                w * (dtau + dt)
            })
            .collect();
        t1 -= weighted(&s.psi, &dtg, &s.psi) / (2.0 * c2);
        let adot: Vec<f64> =
            s.w.iter().zip(&s.loc).map(|(w, l)| w * 2.0 * om2(l) * l.du * l.ddu / c4).collect();
        t1 -= weighted(&s.psi, &adot, &s.psi);
        let bg = directional(&s.grad, |r, d| b(&s.loc[r], d));
        t1 -= weighted(&s.psi, &s.w, &bg);
        t1 += weighted(&bg, &s.w, &s.psi);
        // outward normal on the patch face is -xi
        let nb: Vec<f64> = s
            .face_w
            .iter()
            .zip(&s.face_loc)
            .map(|(w, l)| -w * b(l, 0))
            .collect();
        t1 -= weighted(&s.face_psi, &nb, &s.face_psi);

        let a: Vec<f64> = s.w.iter().zip(&s.loc).map(|(w, l)| w * om2(l) * l.du * l.du / c4).collect();
        t2 -= weighted(&s.psi, &a, &s.psi);
    }
    let w0 = &v + &t0;
    let ops = PerturbationOperators {
        w: [w0, t1.clone(), t2.clone()],
        t: [t0, t1, t2],
        v,
    };
    for mtx in ops.t.iter().chain(ops.w.iter()) {
        ensure_finite(mtx)?;
    }
    Ok(ops)
}

/// `V` for an arbitrary smooth spatial perturbation given pointwise as
/// `(dg, grad tr dg)`, integrated over the whole box:
/// `V_mn = int Psi_m 1/2 grad T . grad Psi_n + grad Psi_m . dg grad Psi_n - oint Psi_m n.dg grad Psi_n`.
pub fn assemble_v_from_metric<F>(
    geom: &CavityGeometry,
    cavity: &SpectralBasis,
    field: F,
) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> (DMatrix<f64>, Vec<f64>),
{
    let n = geom.dim();
    let m = cavity.len();
    let mut v = DMatrix::zeros(m, m);
    for (x, w) in cavity.grid() {
        let (dg, gt) = field(&x);
        let psi: Vec<f64> = (0..m).map(|k| cavity.eval(k, &x)).collect();
        let grads: Vec<Vec<f64>> = (0..m).map(|k| cavity.grad(k, &x)).collect();
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for d in 0..n {
                    s += 0.5 * psi[a] * gt[d] * grads[b][d];
                    for e in 0..n {
                        s += grads[a][d] * dg[(d, e)] * grads[b][e];
                    }
                }
                v[(a, b)] += w * s;
            }
        }
    }
    // boundary faces of the box
    let rules = cavity.rules();
    for d in 0..n {
        for (val, nsign) in [(0.0, -1.0), (geom.edge_lengths()[d], 1.0)] {
            let mut pts: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
            for (e, r) in rules.iter().enumerate() {
                let mut next = Vec::new();
                for (y, wy) in &pts {
                    if e == d {
                        let mut z = y.clone();
                        z.push(val);
                        next.push((z, *wy));
                    } else {
                        for (xn, wn) in r.nodes.iter().zip(&r.weights) {
                            let mut z = y.clone();
                            z.push(*xn);
                            next.push((z, wy * wn));
                        }
                    }
                }
                pts = next;
            }
            for (x, w) in pts {
                let (dg, _) = field(&x);
                for a in 0..m {
                    let pa = cavity.eval(a, &x);
                    for b in 0..m {
                        let gb = cavity.grad(b, &x);
                        let flux: f64 = (0..n).map(|e| nsign * dg[(d, e)] * gb[e]).sum();
                        v[(a, b)] -= w * pa * flux;
                    }
                }
            }
        }
    }
    ensure_finite(&v)?;
    Ok(v)
}

fn gap_check(n: usize, lambdas: &[f64]) -> Result<()> {
    let gap = lambdas
        .iter()
        .enumerate()
        .filter(|(m, _)| *m != n)
        .map(|(_, l)| (l - lambdas[n]).abs())
        .fold(f64::INFINITY, f64::min);
    if gap <= 1e-9 {
        return Err(Error::DegenerateEigenvalue { mode: n, gap });
    }
    Ok(())
}

/// Shift of `lambda_n` under `-Delta - V`: `-V_nn` at first order, minus
/// `sum_m V_mn V_nm / (lambda_m - lambda_n)` at second order.
pub fn eigenvalue_shift(n: usize, lambdas: &[f64], v: &DMatrix<f64>, order: usize) -> Result<f64> {
    if n >= lambdas.len() || v.nrows() != lambdas.len() || v.ncols() != lambdas.len() {
        return invalid("mode index or matrix size does not match the spectrum");
    }
    if !(1..=2).contains(&order) {
        return Err(Error::Unsupported(format!("eigenvalue shift of order {order}")));
    }
    gap_check(n, lambdas)?;
    let mut s = -v[(n, n)];
    if order == 2 {
        for m in 0..lambdas.len() {
            if m != n {
                s -= v[(m, n)] * v[(n, m)] / (lambdas[m] - lambdas[n]);
            }
        }
    }
    Ok(s)
}

/// First-order mixing coefficients `V_mn / (lambda_m - lambda_n)`, zero at `m = n`.
pub fn eigenfunction_correction(n: usize, lambdas: &[f64], v: &DMatrix<f64>) -> Result<Vec<f64>> {
    if n >= lambdas.len() || v.nrows() != lambdas.len() || v.ncols() != lambdas.len() {
        return invalid("mode index or matrix size does not match the spectrum");
    }
    gap_check(n, lambdas)?;
    Ok((0..lambdas.len())
        .map(|m| {
            if m == n {
                0.0
            } else {
                v[(m, n)] / (lambdas[m] - lambdas[n])
            }
        })
        .collect())
}

/// `(sin(d w) - d w cos(d w)) / w^3`, continued to `d^3/3` at `w = 0`.
pub fn correction_kernel(w: f64, d: f64) -> f64 {
    let x = w * d;
    if x.abs() < 1e-2 {
        let x2 = x * x;
        d * d * d * (1.0 / 3.0 - x2 / 30.0 + x2 * x2 / 840.0 - x2 * x2 * x2 / 45360.0)
    } else {
        (x.sin() - x * x.cos()) / (w * w * w)
    }
}

/// Relative size of the first-order kernel correction.
///
/// `p_corr_n(t) = rho0 c^4 / 2 int K(c sqrt(lambda_n), t - tau) sum_m Wbar_nm(tau, t) b_m(tau) dtau`
/// where `Wbar` is the time average of `W0` over `[tau, t]`. Everything is
/// evaluated on the sample instants `times` (trapezoid rule), at which
/// `w0[i]`, `b[m][i]` and `p_lead[n][i]` are given.
pub fn kernel_correction_ratio(
    cavity: &SpectralBasis,
    medium: &AcousticMedium,
    times: &[f64],
    w0: &[DMatrix<f64>],
    b: &[Vec<Complex64>],
    p_lead: &[Vec<Complex64>],
) -> Result<f64> {
    let nt = times.len();
    let m = cavity.len();
    if w0.len() != nt || b.len() != m || p_lead.len() != m {
        return invalid("kernel correction inputs have inconsistent sizes");
    }
    if nt < 2 {
        return invalid("kernel correction needs at least two sample times");
    }
    let lam = cavity.eigenvalues();
    // cumulative trapezoid of W0
    let mut cum = vec![DMatrix::zeros(m, m); nt];
    for i in 1..nt {
        let dt = times[i] - times[i - 1];
        cum[i] = &cum[i - 1] + (&w0[i] + &w0[i - 1]) * (0.5 * dt);
    }
    let pref = 0.5 * medium.rho0 * medium.c.powi(4);
    let corr: Vec<Vec<Complex64>> = (0..m)
        .into_par_iter()
        .map(|n| {
            let w = medium.c * lam[n].sqrt();
            (0..nt)
                .map(|i| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for j in 0..=i {
                        let wt = if i == 0 {
                            0.0
                        } else if j == 0 {
                            0.5 * (times[1] - times[0])
                        } else if j == i {
                            0.5 * (times[i] - times[i - 1])
                        } else {
                            0.5 * (times[j + 1] - times[j - 1])
                        };
                        if wt == 0.0 {
                            continue;
                        }
                        let d = times[i] - times[j];
                        let k = correction_kernel(w, d);
                        let mut s = Complex64::new(0.0, 0.0);
                        for mm in 0..m {
                            let wbar = if d > 0.0 {
                                (cum[i][(n, mm)] - cum[j][(n, mm)]) / d
                            } else {
                                w0[i][(n, mm)]
                            };
                            s += b[mm][j] * wbar;
                        }
                        acc += s * (wt * k);
                    }
                    acc * pref
                })
                .collect()
        })
        .collect();
    let norm = |f: &[Vec<Complex64>]| f.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let lead = norm(p_lead);
    if lead == 0.0 {
        return Ok(0.0);
    }
    Ok(norm(&corr) / lead)
}

/// Assemble `W0` from the patch series at every `stride`-th instant and
/// evaluate [`kernel_correction_ratio`] against the leading pressure.
#[allow(clippy::too_many_arguments)]
pub fn kernel_correction_diagnostic(
    geom: &CavityGeometry,
    cavity: &SpectralBasis,
    patch_bases: &[SpectralBasis],
    series: &[ModalSeries],
    medium: &AcousticMedium,
    coupling: &BoundaryCoupling,
    grid: &TimeGrid,
    stride: usize,
) -> Result<f64> {
    if series.len() != patch_bases.len() || stride == 0 {
        return invalid("one series per patch and a positive stride are required");
    }
    let motion = BoundaryVibration::from_series(series);
    let b = boundary_source(coupling, &motion, grid)?;
    let p = solve_pressure_from_source(cavity, medium, &b, grid)?;
    let idx: Vec<usize> = (0..grid.len()).step_by(stride).collect();
    let times: Vec<f64> = idx.iter().map(|&j| grid.t(j)).collect();
    let bs: Vec<Vec<Complex64>> = b
        .iter()
        .map(|s| {
            let v = s.samples(grid);
            idx.iter().map(|&j| v[j]).collect()
        })
        .collect();
    let ps: Vec<Vec<Complex64>> = p
        .modes
        .iter()
        .map(|v| idx.iter().map(|&j| v[j]).collect())
        .collect();
    let w0: Result<Vec<DMatrix<f64>>> = idx
        .par_iter()
        .map(|&j| {
            let snaps: Vec<PatchSnapshot> = series
                .iter()
                .map(|s| PatchSnapshot::from_series(s, j))
                .collect::<Result<_>>()?;
            let states: Vec<PatchState> = snaps
                .iter()
                .zip(patch_bases)
                .enumerate()
                .map(|(i, (snap, basis))| PatchState {
                    patch: i,
                    basis,
                    snap,
                })
                .collect();
            Ok(assemble_t_and_w(geom, cavity, medium, &states)?.w[0].clone())
        })
        .collect();
    kernel_correction_ratio(cavity, medium, &times, &w0?, &bs, &ps)
}
