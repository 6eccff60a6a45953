//! Turns a validated config into solver objects.

use cavwave::acoustics::AcousticMedium;
use cavwave::coupling::{CoupledSystem, CouplingConfig, HarmonicSource};
use cavwave::duhamel::TimeGrid;
use cavwave::geometry::{CavityGeometry, PatchGeometry, Side};
use cavwave::membrane::{time_lapse_from_damping, Damping, MembraneOperator, QMode, TimeLapse};
use num_complex::Complex64;

use crate::config::{DampingModel, MassModel, ScenarioConfig, SideName};

pub struct Scenario {
    pub sys: CoupledSystem,
    pub coupling: CouplingConfig,
    pub source: HarmonicSource,
    pub grid: TimeGrid,
}

fn geometry(cfg: &ScenarioConfig) -> cavwave::Result<CavityGeometry> {
    let patches = cfg
        .geometry
        .patches
        .iter()
        .map(|p| PatchGeometry {
            axis: p.axis,
            side: match p.side {
                SideName::Low => Side::Low,
                SideName::High => Side::High,
            },
            lo: p.lo.clone(),
            hi: p.hi.clone(),
            piston_gamma: p.piston_gamma,
        })
        .collect();
    CavityGeometry::new(cfg.geometry.lengths.clone(), patches)
}

fn damping(cfg: &ScenarioConfig) -> Damping {
    match cfg.damping.model {
        DampingModel::None => Damping::None,
        DampingModel::Exponential => Damping::Exponential(cfg.damping.alpha),
        DampingModel::Rational => Damping::Rational(cfg.damping.alpha),
    }
}

/// Step `h = step_fraction / w_max` over the fastest cavity and membrane modes.
fn time_grid(cfg: &ScenarioConfig, sys: &CoupledSystem) -> cavwave::Result<TimeGrid> {
    let lam = sys.cavity.eigenvalues().into_iter().fold(0.0, f64::max);
    let mut w_max = sys.medium.c * lam.sqrt();
    for pb in &sys.patches {
        for g in pb.eigenvalues() {
            w_max = w_max.max(sys.membrane.stiffness(g).max(0.0).sqrt());
        }
    }
    w_max = w_max.max(cfg.source.omega);
    let h = if w_max > 0.0 { cfg.numerics.step_fraction / w_max } else { cfg.numerics.t_end / 1000.0 };
    TimeGrid::covering(cfg.numerics.t_end, h)
}

impl Scenario {
    pub fn build(cfg: &ScenarioConfig) -> cavwave::Result<Self> {
        let geom = geometry(cfg)?;
        let medium = AcousticMedium::new(cfg.medium.c, cfg.medium.rho0)?;
        let membrane = MembraneOperator {
            c_m2: cfg.membrane.c_m2,
            c_h2: cfg.membrane.c_h2,
            thickness: cfg.membrane.thickness,
        };
        let g = cfg.strength();
        let coupling = CouplingConfig::new(
            cfg.medium.rho0,
            cfg.membrane.rho_m,
            cfg.membrane.thickness,
            cfg.numerics.eps.unwrap_or(g * g),
        )?;
        let source = HarmonicSource::new(
            Complex64::new(cfg.source.amplitude[0], cfg.source.amplitude[1]),
            cfg.source.omega,
            cfg.source.patches.clone(),
        )?;
        // the lapse is tabulated on the grid for the rational model, which
        // needs the grid first; it depends only on the modal frequencies
        let sys = CoupledSystem::new(
            geom,
            cfg.numerics.cavity_modes,
            cfg.numerics.patch_modes,
            medium,
            membrane,
            TimeLapse::none(),
        )?;
        let grid = time_grid(cfg, &sys)?;
        let lapse = match damping(cfg) {
            Damping::None => TimeLapse::none(),
            Damping::Exponential(a) => TimeLapse::exponential(a),
            d => time_lapse_from_damping(d, &grid.times())?,
        };
        let qmode = match cfg.damping.mass {
            MassModel::LagAverage => QMode::ZetaAverage,
            MassModel::Pointwise => QMode::Pointwise,
        };
        Ok(Scenario {
            sys: CoupledSystem { lapse, qmode, ..sys },
            coupling,
            source,
            grid,
        })
    }
}
