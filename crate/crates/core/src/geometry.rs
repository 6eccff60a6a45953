//! Box cavities, rectangular boundary patches and their analytic spectral bases.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::quad::gauss_legendre;

/// Which face of the box a patch sits on along its normal axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Low,
    High,
}

/// A rectangle on one face of the box.
///
/// `lo`/`hi` hold the extents along the face's tangent axes, in increasing
/// axis order and in cavity coordinates. On a 1D cavity the face is a point,
/// both vectors are empty and `piston_gamma` supplies the stiffness
/// eigenvalue of the single rigid mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGeometry {
    pub axis: usize,
    pub side: Side,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub piston_gamma: Option<f64>,
}

impl PatchGeometry {
    /// Patch covering a whole face of a box with the given edge lengths.
    pub fn full_face(edge_lengths: &[f64], axis: usize, side: Side) -> Self {
        let tang: Vec<usize> = (0..edge_lengths.len()).filter(|&d| d != axis).collect();
        PatchGeometry {
            axis,
            side,
            lo: vec![0.0; tang.len()],
            hi: tang.iter().map(|&d| edge_lengths[d]).collect(),
            piston_gamma: None,
        }
    }

    /// Point patch at one end of a 1D cavity.
    pub fn point(side: Side, piston_gamma: f64) -> Self {
        PatchGeometry {
            axis: 0,
            side,
            lo: Vec::new(),
            hi: Vec::new(),
            piston_gamma: Some(piston_gamma),
        }
    }

    /// Sign of the outward normal along `axis`.
    pub fn normal_sign(&self) -> f64 {
        match self.side {
            Side::Low => -1.0,
            Side::High => 1.0,
        }
    }

    pub fn tangent_axes(&self, dim: usize) -> Vec<usize> {
        (0..dim).filter(|&d| d != self.axis).collect()
    }

    pub fn extents(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn area(&self) -> f64 {
        self.extents().iter().product()
    }
}

/// Axis-aligned box `[0,a_1] x ... x [0,a_n]` with boundary patches.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityGeometry {
    edge_lengths: Vec<f64>,
    patches: Vec<PatchGeometry>,
}

impl CavityGeometry {
    pub fn new(edge_lengths: Vec<f64>, patches: Vec<PatchGeometry>) -> Result<Self> {
        let n = edge_lengths.len();
        if !(1..=3).contains(&n) {
            return invalid(format!("cavity dimension must be 1, 2 or 3, got {n}"));
        }
        if edge_lengths.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return invalid("edge lengths must be positive and finite");
        }
        for (i, p) in patches.iter().enumerate() {
            if p.axis >= n {
                return invalid(format!("patch {i}: axis {} out of range", p.axis));
            }
            if p.lo.len() != n - 1 || p.hi.len() != n - 1 {
                return invalid(format!("patch {i}: expected {} tangent extents", n - 1));
            }
            for (k, &d) in p.tangent_axes(n).iter().enumerate() {
                let (lo, hi) = (p.lo[k], p.hi[k]);
                if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi > edge_lengths[d] {
                    return invalid(format!("patch {i}: extent outside the host face"));
                }
                if hi <= lo {
                    return invalid(format!("patch {i}: zero patch extent along axis {d}"));
                }
            }
            if n == 1 {
                match p.piston_gamma {
                    Some(g) if g.is_finite() && g > 0.0 => {}
                    _ => return invalid(format!("patch {i}: point patches need piston_gamma > 0")),
                }
            }
        }
        for i in 0..patches.len() {
            for j in i + 1..patches.len() {
                let (p, q) = (&patches[i], &patches[j]);
                if p.axis != q.axis || p.side != q.side {
                    continue;
                }
                let overlap = (0..n - 1).all(|k| p.lo[k].max(q.lo[k]) < p.hi[k].min(q.hi[k]));
                if overlap {
                    return invalid(format!("patches {i} and {j} overlap"));
                }
            }
        }
        Ok(CavityGeometry {
            edge_lengths,
            patches,
        })
    }

    pub fn dim(&self) -> usize {
        self.edge_lengths.len()
    }

    pub fn edge_lengths(&self) -> &[f64] {
        &self.edge_lengths
    }

    pub fn patches(&self) -> &[PatchGeometry] {
        &self.patches
    }

    pub fn volume(&self) -> f64 {
        self.edge_lengths.iter().product()
    }

    /// Cavity coordinates of a point given in patch (tangent) coordinates
    /// and at normal depth `xi` measured into the cavity.
    pub fn patch_point(&self, patch: usize, y: &[f64], xi: f64) -> Vec<f64> {
        let p = &self.patches[patch];
        let a = self.edge_lengths[p.axis];
        let mut x = Vec::with_capacity(self.dim());
        let mut k = 0;
        for d in 0..self.dim() {
            if d == p.axis {
                x.push(match p.side {
                    Side::Low => xi,
                    Side::High => a - xi,
                });
            } else {
                x.push(y[k]);
                k += 1;
            }
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    CavityNeumann,
    PatchDirichlet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub eigenvalue: f64,
    pub index: Vec<usize>,
}

/// Tensor-product Gauss-Legendre rule along one axis, physical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Orthonormal Laplacian eigenbasis on a box (Neumann) or on a patch
/// rectangle (Dirichlet), with the quadrature grid used for inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    kind: BasisKind,
    origin: Vec<f64>,
    lengths: Vec<f64>,
    modes: Vec<Mode>,
    rules: Vec<AxisRule>,
}

/// Coefficient vector over some basis, optionally stamped with a time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalField {
    pub coeffs: Vec<f64>,
    pub time: Option<f64>,
}

impl ModalField {
    pub fn new(coeffs: Vec<f64>) -> Self {
        ModalField { coeffs, time: None }
    }
}

/// Gauss-Legendre points per axis for modes up to index `m`. Trig products
/// need noticeably more than the polynomial count 2m+1.
pub fn nodes_for_index(m: usize) -> usize {
    (2 * m + 1).max((4.5 * m as f64).ceil() as usize + 16)
}

fn sorted_modes(ranges: &[std::ops::Range<usize>], lengths: &[f64]) -> Vec<Mode> {
    let mut idx: Vec<Vec<usize>> = vec![Vec::new()];
    for r in ranges {
        let mut next = Vec::with_capacity(idx.len() * r.len());
        for base in &idx {
            for k in r.clone() {
                let mut v = base.clone();
                v.push(k);
                next.push(v);
            }
        }
        idx = next;
    }
    let mut modes: Vec<Mode> = idx
        .into_iter()
        .map(|index| {
            let s: f64 = index
                .iter()
                .zip(lengths)
                .map(|(&k, &a)| (k as f64 / a).powi(2))
                .sum();
            Mode {
                eigenvalue: PI * PI * s,
                index,
            }
        })
        .collect();
    modes.sort_by(|a, b| {
        a.eigenvalue
            .total_cmp(&b.eigenvalue)
            .then_with(|| a.index.cmp(&b.index))
    });
    modes
}

fn rules_for(origin: &[f64], lengths: &[f64], max_index: usize) -> Vec<AxisRule> {
    let n = nodes_for_index(max_index);
    origin
        .iter()
        .zip(lengths)
        .map(|(&o, &l)| {
            let (nodes, weights) = gauss_legendre(n, o, o + l);
            AxisRule { nodes, weights }
        })
        .collect()
}

/// Neumann cosine modes of the cavity, `modes_per_axis` indices per axis
/// starting at 0.
pub fn build_cavity_basis(geom: &CavityGeometry, modes_per_axis: usize) -> Result<SpectralBasis> {
    if modes_per_axis == 0 {
        return invalid("modes_per_axis must be positive");
    }
    let lengths = geom.edge_lengths.clone();
    let ranges: Vec<_> = lengths.iter().map(|_| 0..modes_per_axis).collect();
    let origin = vec![0.0; lengths.len()];
    Ok(SpectralBasis {
        kind: BasisKind::CavityNeumann,
        modes: sorted_modes(&ranges, &lengths),
        rules: rules_for(&origin, &lengths, modes_per_axis - 1),
        origin,
        lengths,
    })
}

/// Dirichlet sine modes on a patch rectangle, indices `1..=modes_per_axis`.
/// Point patches get a single rigid mode with eigenvalue `piston_gamma`.
pub fn build_patch_basis(patch: &PatchGeometry, modes_per_axis: usize) -> Result<SpectralBasis> {
    if modes_per_axis == 0 {
        return invalid("modes_per_axis must be positive");
    }
    let lengths = patch.extents();
    if lengths.iter().any(|l| !(*l > 0.0)) {
        return invalid("zero patch extent");
    }
    if lengths.is_empty() {
        let g = match patch.piston_gamma {
            Some(g) if g > 0.0 => g,
            _ => return invalid("point patch needs piston_gamma > 0"),
        };
        return Ok(SpectralBasis {
            kind: BasisKind::PatchDirichlet,
            origin: Vec::new(),
            lengths,
            modes: vec![Mode {
                eigenvalue: g,
                index: Vec::new(),
            }],
            rules: Vec::new(),
        });
    }
    let ranges: Vec<_> = lengths.iter().map(|_| 1..modes_per_axis + 1).collect();
    Ok(SpectralBasis {
        kind: BasisKind::PatchDirichlet,
        modes: sorted_modes(&ranges, &lengths),
        rules: rules_for(&patch.lo, &lengths, modes_per_axis),
        origin: patch.lo.clone(),
        lengths,
    })
}

impl SpectralBasis {
    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.eigenvalue).collect()
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn rules(&self) -> &[AxisRule] {
        &self.rules
    }

    /// Lebesgue measure of the domain (1 for a point patch).
    pub fn measure(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Value and derivative of the 1D factor with index `k` along `axis`.
    pub fn axis_factor(&self, axis: usize, k: usize, x: f64) -> (f64, f64) {
        let l = self.lengths[axis];
        let y = x - self.origin[axis];
        let w = k as f64 * PI / l;
        match self.kind {
            BasisKind::CavityNeumann => {
                if k == 0 {
                    ((1.0 / l).sqrt(), 0.0)
                } else {
                    let n = (2.0 / l).sqrt();
                    (n * (w * y).cos(), -n * w * (w * y).sin())
                }
            }
            BasisKind::PatchDirichlet => {
                let n = (2.0 / l).sqrt();
                (n * (w * y).sin(), n * w * (w * y).cos())
            }
        }
    }

    pub fn eval(&self, mode: usize, x: &[f64]) -> f64 {
        let idx = &self.modes[mode].index;
        (0..self.dim())
            .map(|d| self.axis_factor(d, idx[d], x[d]).0)
            .product()
    }

    pub fn grad(&self, mode: usize, x: &[f64]) -> Vec<f64> {
        let idx = &self.modes[mode].index;
        let f: Vec<(f64, f64)> = (0..self.dim())
            .map(|d| self.axis_factor(d, idx[d], x[d]))
            .collect();
        (0..self.dim())
            .map(|d| {
                f.iter()
                    .enumerate()
                    .map(|(e, &(v, dv))| if e == d { dv } else { v })
                    .product()
            })
            .collect()
    }

    /// Exact integral of a mode over the domain.
    pub fn integral(&self, mode: usize) -> f64 {
        let idx = &self.modes[mode].index;
        (0..self.dim())
            .map(|d| {
                let l = self.lengths[d];
                let k = idx[d];
                match self.kind {
                    BasisKind::CavityNeumann => {
                        if k == 0 {
                            l.sqrt()
                        } else {
                            0.0
                        }
                    }
                    BasisKind::PatchDirichlet => {
                        if k % 2 == 1 {
                            (2.0 / l).sqrt() * 2.0 * l / (k as f64 * PI)
                        } else {
                            0.0
                        }
                    }
                }
            })
            .product()
    }

    /// Weights `w_k` such that the domain mean of `sum c_k phi_k` is `sum w_k c_k`.
    pub fn mean_weights(&self) -> Vec<f64> {
        let m = self.measure();
        (0..self.len()).map(|k| self.integral(k) / m).collect()
    }

    pub fn grid_len(&self) -> usize {
        self.rules.iter().map(|r| r.nodes.len()).product()
    }

    /// Tensor grid points and weights, last axis varying fastest.
    pub fn grid(&self) -> Vec<(Vec<f64>, f64)> {
        let mut pts: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
        for r in &self.rules {
            let mut next = Vec::with_capacity(pts.len() * r.nodes.len());
            for (x, w) in &pts {
                for (xn, wn) in r.nodes.iter().zip(&r.weights) {
                    let mut y = x.clone();
                    y.push(*xn);
                    next.push((y, w * wn));
                }
            }
            pts = next;
        }
        pts
    }

    /// Mode values on the grid as an `(points x modes)` matrix.
    pub fn values_on(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(points.len(), self.len(), |p, k| self.eval(k, &points[p]))
    }

    /// Quadrature Gram matrix of the basis.
    pub fn gram(&self) -> DMatrix<f64> {
        let g = self.grid();
        let pts: Vec<Vec<f64>> = g.iter().map(|p| p.0.clone()).collect();
        let v = self.values_on(&pts);
        let mut wv = v.clone();
        for (p, (_, w)) in g.iter().enumerate() {
            wv.row_mut(p).scale_mut(*w);
        }
        v.transpose() * wv
    }

    /// Evaluate `sum c_k phi_k(x)`.
    pub fn reconstruct(&self, coeffs: &[f64], x: &[f64]) -> f64 {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c * self.eval(k, x))
            .sum()
    }
}

/// Quadrature projection of gridded samples onto the basis.
pub fn project(samples: &[f64], basis: &SpectralBasis) -> Result<ModalField> {
    if samples.len() != basis.grid_len() {
        return invalid(format!(
            "sample count {} does not match the basis grid ({} points)",
            samples.len(),
            basis.grid_len()
        ));
    }
    let g = basis.grid();
    let coeffs = (0..basis.len())
        .map(|k| {
            g.iter()
                .zip(samples)
                .map(|((x, w), s)| w * s * basis.eval(k, x))
                .sum()
        })
        .collect();
    Ok(ModalField::new(coeffs))
}

/// Mean of a modal field over its domain, from the exact mode integrals.
pub fn geometric_mean(basis: &SpectralBasis, u: &ModalField) -> f64 {
    basis
        .mean_weights()
        .iter()
        .zip(&u.coeffs)
        .map(|(w, c)| w * c)
        .sum()
}

/// Mean of gridded samples by quadrature.
pub fn sample_mean(basis: &SpectralBasis, samples: &[f64]) -> Result<f64> {
    if samples.len() != basis.grid_len() {
        return invalid("sample count does not match the basis grid");
    }
    let s: f64 = basis
        .grid()
        .iter()
        .zip(samples)
        .map(|((_, w), s)| w * s)
        .sum();
    Ok(s / basis.measure())
}

/// Relative deviation from the mean and its spectral-gap upper bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincareCertificate {
    pub lhs: f64,
    pub rhs: f64,
    pub leading_order: bool,
}

impl PoincareCertificate {
    pub fn holds(&self) -> bool {
        // lhs is a ratio in [0, 1]; the absolute slack absorbs round-off at rhs = 0
        self.lhs <= self.rhs * (1.0 + 1e-12) + 1e-12
    }
}

fn dirichlet_gap(basis: &SpectralBasis) -> Result<f64> {
    if basis.kind != BasisKind::PatchDirichlet {
        return invalid("Poincare certificate needs a patch Dirichlet basis");
    }
    Ok(basis.modes[0].eigenvalue)
}

/// `lhs = |u - <u>| / |u|`, `rhs = |grad u| / (sqrt(gamma_1) |u|)`; the
/// flag is set when `rhs < c_piston * epsilon`.
pub fn poincare_certificate(
    basis: &SpectralBasis,
    u: &ModalField,
    epsilon: f64,
    c_piston: f64,
) -> Result<PoincareCertificate> {
    let g1 = dirichlet_gap(basis)?;
    let norm2: f64 = u.coeffs.iter().map(|c| c * c).sum();
    if !(norm2 > 0.0) {
        return Err(Error::DegenerateInput("u has zero norm".into()));
    }
    let mean = geometric_mean(basis, u);
    let dev2 = (norm2 - basis.measure() * mean * mean).max(0.0);
    let grad2: f64 = u
        .coeffs
        .iter()
        .zip(&basis.modes)
        .map(|(c, m)| m.eigenvalue * c * c)
        .sum();
    let lhs = (dev2 / norm2).sqrt();
    let rhs = (grad2 / g1 / norm2).sqrt();
    Ok(PoincareCertificate {
        lhs,
        rhs,
        leading_order: rhs < c_piston * epsilon,
    })
}

/// Same certificate for an arbitrary function given by value and gradient,
/// evaluated by quadrature on the patch grid.
pub fn poincare_certificate_fn<F>(
    basis: &SpectralBasis,
    f: F,
    epsilon: f64,
    c_piston: f64,
) -> Result<PoincareCertificate>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let g1 = dirichlet_gap(basis)?;
    let grid = basis.grid();
    let vals: Vec<(f64, Vec<f64>)> = grid.iter().map(|(x, _)| f(x)).collect();
    let norm2: f64 = grid.iter().zip(&vals).map(|((_, w), v)| w * v.0 * v.0).sum();
    if !(norm2 > 0.0) {
        return Err(Error::DegenerateInput("u has zero norm".into()));
    }
    let mean: f64 =
        grid.iter().zip(&vals).map(|((_, w), v)| w * v.0).sum::<f64>() / basis.measure();
    let dev2: f64 = grid
        .iter()
        .zip(&vals)
        .map(|((_, w), v)| w * (v.0 - mean).powi(2))
        .sum();
    let grad2: f64 = grid
        .iter()
        .zip(&vals)
        .map(|((_, w), v)| w * v.1.iter().map(|g| g * g).sum::<f64>())
        .sum();
    let lhs = (dev2 / norm2).sqrt();
    let rhs = (grad2 / g1 / norm2).sqrt();
    Ok(PoincareCertificate {
        lhs,
        rhs,
        leading_order: rhs < c_piston * epsilon,
    })
}
