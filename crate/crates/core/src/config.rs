//! Run configuration: TOML schema, defaults, validation and conversion to
//! solver inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell_solvers::InflowProfile;
use crate::error::{Error, Result};
use crate::geometry::{build_cell_grid, rasterize_micro_domain, CellGeometry, MicroDomainSpec, Rect, WallProfile};
use crate::homog_solver::{InitialIterate, PicardOptions};
use crate::layer_solvers::{Advection, OutletLayerOptions};
use crate::reactions::{validate_reactions, ReactionSystem};
use crate::verify::{ApproximationConfig, SweepConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroConfig {
    pub n_periods: usize,
    pub cells_per_period: usize,
    pub cells_across: usize,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            n_periods: 8,
            cells_per_period: 8,
            cells_across: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub ell: f64,
    pub height_plus: f64,
    pub height_minus: f64,
    /// Resolution of the stand-alone cell and layer solves.
    pub cell_n1: usize,
    pub cell_n2: usize,
    /// Obstacle-free margin at both cell edges, in cells.
    pub edge_margin_cells: usize,
    /// Samples of h± on [0, 1]; empty means flat.
    pub h_plus: Vec<f64>,
    pub h_minus: Vec<f64>,
    /// Rectangles [ξ₁ lo, ξ₁ hi, ξ₂ lo, ξ₂ hi].
    pub obstacles: Vec<[f64; 4]>,
    pub micro: MicroConfig,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            ell: 1.0,
            height_plus: 0.5,
            height_minus: 0.5,
            cell_n1: 64,
            cell_n2: 64,
            edge_margin_cells: 2,
            h_plus: Vec::new(),
            h_minus: Vec::new(),
            obstacles: Vec::new(),
            micro: MicroConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum InflowConfig {
    Constant { value: f64 },
    Cosine { base: f64, amp: f64 },
    Tabulated { samples: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub inflow: InflowConfig,
    pub d_plus: Vec<f64>,
    pub d_minus: Vec<f64>,
    pub d_frac: Vec<f64>,
    pub amp_bulk: Vec<f64>,
    pub coupling: Vec<Vec<f64>>,
    pub amp_source: Vec<f64>,
    pub ups_a: Vec<f64>,
    pub ups_b: Vec<f64>,
    pub phi_p: Vec<f64>,
    pub phi_r: Vec<f64>,
    pub psi_s: Vec<f64>,
    pub q_amp: Vec<f64>,
    pub delay: f64,
    pub x_a: f64,
    pub x_b: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    pub omega_amp: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        let b = ReactionSystem::<f64>::benchmark();
        Self {
            inflow: InflowConfig::Constant { value: 1.0 },
            d_plus: b.d_plus,
            d_minus: b.d_minus,
            d_frac: b.d_frac,
            amp_bulk: b.amp_bulk,
            coupling: b.coupling,
            amp_source: b.amp_source,
            ups_a: b.ups_a,
            ups_b: b.ups_b,
            phi_p: b.phi_p,
            phi_r: b.phi_r,
            psi_s: b.psi_s,
            q_amp: b.q_amp,
            delay: b.delay,
            x_a: b.x_a,
            x_b: b.x_b,
            y_lo: b.y_lo,
            y_hi: b.y_hi,
            omega_amp: b.omega_amp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvectionConfig {
    Centered,
    Upwind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub t_end: f64,
    /// Micro time step; omitted means the largest stable step.
    pub dt: Option<f64>,
    /// Interface nodes of the homogenized grid.
    pub homog_cells: usize,
    /// Picard window T₀; omitted means T/4.
    pub picard_window: Option<f64>,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Amplitude of a bump added to the starting iterate of every window.
    pub picard_bump: Option<f64>,
    /// Periods of the outlet layer strip; omitted means automatic.
    pub outlet_periods: Option<usize>,
    pub advection: AdvectionConfig,
    /// Height of the wall corrector strips; omitted means automatic.
    pub wall_strip_height: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            t_end: 0.5,
            dt: None,
            homog_cells: 128,
            picard_window: None,
            picard_tol: 1e-8,
            picard_max_iter: 50,
            picard_bump: None,
            outlet_periods: None,
            advection: AdvectionConfig::Centered,
            wall_strip_height: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub n_list: Vec<usize>,
    pub sample_stride: usize,
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub gamma: f64,
    pub wall_terms: bool,
    pub n1_term: bool,
    pub outlet_terms: bool,
    pub lambda: bool,
    /// Values of N checked against a 2× refined micro grid.
    pub adequacy_n: Vec<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let a = ApproximationConfig::<f64>::default();
        Self {
            n_list: vec![8, 16, 32],
            sample_stride: 10,
            theta0: a.theta0,
            theta1: a.theta1,
            theta2: a.theta2,
            gamma: a.gamma,
            wall_terms: a.wall_terms,
            n1_term: a.n1_term,
            outlet_terms: a.outlet_terms,
            lambda: a.lambda,
            adequacy_n: vec![8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    /// Field dumps every this many steps.
    pub snapshot_stride: usize,
    pub dump_fields: bool,
    pub dump_masks: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            snapshot_stride: 10,
            dump_fields: false,
            dump_masks: false,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub physics: PhysicsConfig,
    pub solver: SolverConfig,
    pub verify: VerifyConfig,
    pub output: OutputConfig,
}

fn profile(s: &[f64]) -> WallProfile<f64> {
    if s.is_empty() {
        WallProfile::Flat
    } else {
        WallProfile::Tabulated(s.to_vec())
    }
}

impl RunConfig {
    /// Parses without validating.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config("toml", e.to_string()))
    }

    /// Effective configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Cell geometry at the stand-alone cell resolution.
    pub fn cell_geometry(&self) -> CellGeometry<f64> {
        let g = &self.geometry;
        CellGeometry {
            h_plus: profile(&g.h_plus),
            h_minus: profile(&g.h_minus),
            obstacles: g.obstacles.iter().map(|r| Rect::new(r[0], r[1], r[2], r[3])).collect(),
            n1: g.cell_n1,
            n2: g.cell_n2,
            theta2_cells: g.edge_margin_cells,
        }
    }

    pub fn micro_spec(&self) -> MicroDomainSpec<f64> {
        let g = &self.geometry;
        MicroDomainSpec::new(g.ell, g.height_plus, g.height_minus, g.micro.n_periods, g.micro.cells_per_period, g.micro.cells_across)
    }

    pub fn inflow(&self) -> InflowProfile<f64> {
        match &self.physics.inflow {
            InflowConfig::Constant { value } => InflowProfile::Constant(*value),
            InflowConfig::Cosine { base, amp } => InflowProfile::Cosine { base: *base, amp: *amp },
            InflowConfig::Tabulated { samples } => InflowProfile::Tabulated(samples.clone()),
        }
    }

    pub fn reaction_system(&self) -> ReactionSystem<f64> {
        let p = &self.physics;
        let g = &self.geometry;
        ReactionSystem {
            d_plus: p.d_plus.clone(),
            d_minus: p.d_minus.clone(),
            d_frac: p.d_frac.clone(),
            amp_bulk: p.amp_bulk.clone(),
            coupling: p.coupling.clone(),
            amp_source: p.amp_source.clone(),
            ups_a: p.ups_a.clone(),
            ups_b: p.ups_b.clone(),
            phi_p: p.phi_p.clone(),
            phi_r: p.phi_r.clone(),
            psi_s: p.psi_s.clone(),
            q_amp: p.q_amp.clone(),
            delay: p.delay,
            x_a: p.x_a,
            x_b: p.x_b,
            y_lo: p.y_lo,
            y_hi: p.y_hi,
            height_plus: g.height_plus,
            height_minus: g.height_minus,
            ell: g.ell,
            omega_amp: p.omega_amp,
        }
    }

    pub fn picard_options(&self, serial: bool) -> PicardOptions<f64> {
        let s = &self.solver;
        let mut o = PicardOptions::for_final_time(s.t_end);
        if let Some(w) = s.picard_window {
            o.window = w;
        }
        o.tol = s.picard_tol;
        o.max_iter = s.picard_max_iter;
        o.initial = s.picard_bump.map_or(InitialIterate::Hold, InitialIterate::Bump);
        o.snapshot_stride = self.output.snapshot_stride;
        o.serial = serial;
        o
    }

    pub fn outlet_options(&self) -> OutletLayerOptions {
        OutletLayerOptions {
            periods: self.solver.outlet_periods,
            advection: match self.solver.advection {
                AdvectionConfig::Centered => Advection::Centered,
                AdvectionConfig::Upwind => Advection::Upwind,
            },
        }
    }

    pub fn approximation(&self) -> ApproximationConfig<f64> {
        let v = &self.verify;
        ApproximationConfig {
            theta0: v.theta0,
            theta1: v.theta1,
            theta2: v.theta2,
            gamma: v.gamma,
            wall_terms: v.wall_terms,
            n1_term: v.n1_term,
            outlet_terms: v.outlet_terms,
            lambda: v.lambda,
        }
    }

    pub fn sweep_config(&self, serial: bool) -> SweepConfig<f64> {
        let m = &self.geometry.micro;
        SweepConfig {
            geom: self.cell_geometry(),
            v0: self.inflow(),
            t_end: self.solver.t_end,
            cells_per_period: m.cells_per_period,
            cells_across: m.cells_across,
            n_list: self.verify.n_list.clone(),
            sample_stride: self.verify.sample_stride,
            dt: self.solver.dt,
            homog_cells: self.solver.homog_cells,
            picard: self.picard_options(serial),
            approx: self.approximation(),
            outlet: self.outlet_options(),
            adequacy: self.verify.adequacy_n.clone(),
            serial,
        }
    }

    /// Every violated constraint, each naming its key or assumption.
    pub fn validate(&self) -> Vec<Error> {
        let mut errs = Vec::new();
        let g = &self.geometry;
        if !(g.ell > 0.0 && g.height_plus > 0.0 && g.height_minus > 0.0) {
            errs.push(Error::config("geometry", "ell and layer heights must be positive"));
        }
        if g.cell_n1 < 4 || g.cell_n2 < 2 {
            errs.push(Error::config("geometry.cell_n1", "cell resolution too coarse"));
        }
        for (i, r) in g.obstacles.iter().enumerate() {
            if !(r[0] < r[1] && r[2] < r[3]) {
                errs.push(Error::config(format!("geometry.obstacles[{i}]"), "empty rectangle"));
            }
        }
        let geom = self.cell_geometry();
        if errs.is_empty() {
            if let Err(e) = build_cell_grid(&geom) {
                errs.push(e);
            }
            let spec = self.micro_spec();
            if let Err(e) = rasterize_micro_domain(&spec, &geom) {
                errs.push(Error::config("geometry.micro", e.to_string()));
            }
        }
        if let Err(e) = self.inflow().validate() {
            errs.push(e);
        }
        let s = &self.solver;
        if !(s.t_end > 0.0) {
            errs.push(Error::config("solver.t_end", "final time must be positive"));
        } else if let Err(e) = validate_reactions(&self.reaction_system(), s.t_end) {
            errs.push(e);
        }
        if s.dt.is_some_and(|dt| !(dt > 0.0)) {
            errs.push(Error::config("solver.dt", "time step must be positive"));
        }
        if s.homog_cells < 4 {
            errs.push(Error::config("solver.homog_cells", "need at least 4 interface cells"));
        }
        if s.picard_window.is_some_and(|w| !(w > 0.0 && w <= s.t_end)) {
            errs.push(Error::config("solver.picard_window", "window must lie in (0, T]"));
        }
        if !(s.picard_tol > 0.0) || s.picard_max_iter == 0 {
            errs.push(Error::config("solver.picard_tol", "tolerance and iteration limit must be positive"));
        }
        if s.outlet_periods.is_some_and(|p| !(2..=crate::layer_solvers::MAX_OUTLET_PERIODS).contains(&p)) {
            errs.push(Error::config("solver.outlet_periods", "outlet strip needs between 2 and 64 periods"));
        }
        if s.wall_strip_height.is_some_and(|h| !(h > 0.0)) {
            errs.push(Error::config("solver.wall_strip_height", "strip height must be positive"));
        }
        let v = &self.verify;
        if v.n_list.is_empty() || v.n_list.windows(2).any(|w| w[0] >= w[1]) || v.n_list[0] < 2 {
            errs.push(Error::config("verify.n_list", "N list must be ascending with entries of at least 2"));
        }
        if v.sample_stride == 0 {
            errs.push(Error::config("verify.sample_stride", "stride must be positive"));
        }
        if v.adequacy_n.iter().any(|n| !v.n_list.contains(n)) {
            errs.push(Error::config("verify.adequacy_n", "adequacy checks must use values from n_list"));
        }
        if let (Some(&n0), true) = (v.n_list.first(), n0_positive(&v.n_list)) {
            let margin = g.obstacles.iter().fold(0.5f64, |m, r| m.min(r[0]).min(1.0 - r[1]));
            let p = &self.physics;
            if let Err(e) = self.approximation().validate(g.ell / n0 as f64, g.ell - p.x_b, margin, g.height_plus.min(g.height_minus)) {
                errs.push(e);
            }
        }
        if self.output.snapshot_stride == 0 {
            errs.push(Error::config("output.snapshot_stride", "stride must be positive"));
        }
        errs
    }
}

fn n0_positive(n: &[usize]) -> bool {
    n.first().is_some_and(|v| *v > 0)
}

/// Reads, parses and validates a configuration file.
pub fn load_config(path: &Path) -> std::result::Result<RunConfig, Vec<Error>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![Error::config("path", format!("{}: {e}", path.display()))])?;
    let cfg = RunConfig::from_toml_str(&text).map_err(|e| vec![e])?;
    let errs = cfg.validate();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.validate().is_empty(), "{:?}", c.validate());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.solver.dt = Some(0.001);
        c.physics.inflow = InflowConfig::Cosine { base: 1.0, amp: 0.25 };
        c.geometry.obstacles.push([0.25, 0.75, -0.25, 0.25]);
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml_str("[solver]\nt_end = 1.0\nbogus = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn zero_delay_cites_a3() {
        let c = RunConfig::from_toml_str("[physics]\ndelay = 0.0\n").unwrap();
        let errs = c.validate();
        assert!(errs.iter().any(|e| matches!(e, Error::Assumption { assumption: "A3", .. })), "{errs:?}");
    }

    #[test]
    fn negative_inflow_cites_a2() {
        let c = RunConfig::from_toml_str("[physics.inflow]\nkind = \"tabulated\"\nsamples = [1.0, -0.5, 1.0]\n").unwrap();
        let errs = c.validate();
        assert!(errs.iter().any(|e| matches!(e, Error::Assumption { assumption: "A2", .. })), "{errs:?}");
    }
}
