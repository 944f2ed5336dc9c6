//! Scenario files: a TOML tree describing one run.
//!
//! Every field has an explicit default, so serializing a loaded scenario gives
//! the fully resolved parameter set.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, DecayMode, DEFAULT_PROBES, SPREAD_TOLERANCE};
use crate::boundary::{BoundaryDatum, TimeModulation};
use crate::kernel::{bounded_params, CoagBounds, CoagKernel, FragBounds, CoagModel, FragKernel, KernelTable};
use crate::operators::Model;
use crate::profile::{PowerExp, Profile};
use crate::solver::{Scheme, SnapshotPolicy, SolverConfig};
use crate::state::{Grid, GridKind, StateMeasure};
use crate::{io, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoagSpec {
    Constant { value: f64 },
    Additive { scale: f64 },
    Multiplicative { scale: f64 },
    BoundForm { k0: f64, alpha: f64, beta: f64 },
    LowerForm { k1: f64, alpha: f64, beta: f64 },
    Table { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoagulationSpec {
    #[serde(flatten)]
    pub kernel: CoagSpec,
    /// Index `j` of the truncated kernel `K_j`; absent means the full kernel.
    #[serde(default)]
    pub truncation: Option<u32>,
    /// Use `K_j` in the boundary sink as well.
    #[serde(default)]
    pub truncated_sink: bool,
    /// Overrides the family's own bound constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<CoagBoundsSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoagBoundsSpec {
    pub k0: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragBoundsSpec {
    pub f0: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerExpSpec {
    pub amplitude: f64,
    #[serde(default)]
    pub power: f64,
    #[serde(default)]
    pub decay: f64,
}

impl From<PowerExpSpec> for PowerExp {
    fn from(p: PowerExpSpec) -> Self {
        PowerExp { amplitude: p.amplitude, power: p.power, decay: p.decay }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FragmentationSpec {
    #[serde(flatten)]
    pub kernel: FragSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<FragBoundsSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FragSpec {
    Zero,
    Constant { value: f64 },
    Power { f0: f64, gamma: f64 },
    Multiplicative { scale: f64 },
    Table { path: PathBuf },
    /// `F = K Q(x) Q(y) / Q(x+y)` for the profile `Q`.
    DetailedBalance { profile: PowerExpSpec },
}

impl Default for FragSpec {
    fn default() -> Self {
        FragSpec::Zero
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModulationSpec {
    Constant,
    Decaying { c: f64 },
    /// `(t, factor)` pairs, inline or from a CSV file.
    Sampled {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        points: Option<Vec<[f64; 2]>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
}

impl Default for ModulationSpec {
    fn default() -> Self {
        ModulationSpec::Constant
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub power: f64,
    #[serde(default)]
    pub decay: f64,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default)]
    pub modulation: ModulationSpec,
}

fn default_cutoff() -> f64 {
    50.0
}

impl Default for BoundarySpec {
    fn default() -> Self {
        Self { amplitude: 0.0, power: 0.0, decay: 0.0, cutoff: default_cutoff(), modulation: ModulationSpec::Constant }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSpec {
    /// `A x^{-p} e^{-q x}` restricted to `(lower, upper]`.
    Density {
        amplitude: f64,
        #[serde(default)]
        power: f64,
        #[serde(default)]
        decay: f64,
        #[serde(default)]
        lower: f64,
        #[serde(default = "one")]
        upper: f64,
    },
    /// `[x, count]` pairs; each count lands in the cell containing `x`, `x = 1` is the atom.
    Atoms { atoms: Vec<[f64; 2]> },
    Csv { path: PathBuf },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKindSpec {
    Uniform,
    Geometric,
    Lattice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub kind: GridKindSpec,
    pub n: usize,
    /// Geometric only: either the ratio or the smallest cell's right edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smallest: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    Euler,
    Heun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_scheme")]
    pub scheme: SchemeSpec,
    pub t_final: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_safety")]
    pub safety: f64,
    /// Snapshot spacing in time, used when neither stride nor times are given.
    #[serde(default = "default_interval")]
    pub snapshot_interval: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
    /// Explicit snapshot times; ignored when `snapshot_stride` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_times: Option<Vec<f64>>,
    #[serde(default = "default_quad_n")]
    pub quad_n: usize,
    #[serde(default = "yes")]
    pub track_residual: bool,
    /// Let the atom at 1 coagulate with the interior.
    #[serde(default)]
    pub atom_sink: bool,
}

fn default_scheme() -> SchemeSpec {
    SchemeSpec::Heun
}
fn default_dt_max() -> f64 {
    1e-2
}
fn default_safety() -> f64 {
    0.9
}
fn default_interval() -> f64 {
    0.1
}
fn default_quad_n() -> usize {
    4
}
fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayModeSpec {
    Exponential,
    Power,
}

impl From<DecayModeSpec> for DecayMode {
    fn from(m: DecayModeSpec) -> Self {
        match m {
            DecayModeSpec::Exponential => DecayMode::Exponential,
            DecayModeSpec::Power => DecayMode::Power,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayFitSpec {
    #[serde(default)]
    pub moment: f64,
    pub window: [f64; 2],
    #[serde(default = "default_mode")]
    pub mode: DecayModeSpec,
}

fn default_mode() -> DecayModeSpec {
    DecayModeSpec::Exponential
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default)]
    pub entropy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_fit: Option<DecayFitSpec>,
    #[serde(default)]
    pub residual_battery: bool,
    #[serde(default = "default_probes")]
    pub probes: Vec<f64>,
    #[serde(default = "default_spread")]
    pub spread_tolerance: f64,
    #[serde(default = "default_samples")]
    pub bound_samples: usize,
}

fn default_probes() -> Vec<f64> {
    DEFAULT_PROBES.to_vec()
}
fn default_spread() -> f64 {
    SPREAD_TOLERANCE
}
fn default_samples() -> usize {
    20_000
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            entropy: false,
            decay_fit: None,
            residual_battery: false,
            probes: default_probes(),
            spread_tolerance: default_spread(),
            bound_samples: default_samples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_oracle_tol")]
    pub tolerance: f64,
    /// Initial step for the discrete reference integration.
    #[serde(default = "default_oracle_dt")]
    pub dt: f64,
}

fn default_checkpoints() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}
fn default_oracle_tol() -> f64 {
    1e-3
}
fn default_oracle_dt() -> f64 {
    1e-2
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self { checkpoints: default_checkpoints(), tolerance: default_oracle_tol(), dt: default_oracle_dt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub coagulation: CoagulationSpec,
    #[serde(default)]
    pub fragmentation: FragmentationSpec,
    #[serde(default)]
    pub boundary: BoundarySpec,
    pub initial: InitialSpec,
    pub grid: GridSpec,
    pub solver: SolverSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
}

fn default_name() -> String {
    "unnamed".to_string()
}

/// Everything needed to run a scenario.
#[derive(Debug)]
pub struct Built {
    pub model: Model,
    pub grid: Arc<Grid>,
    pub initial: StateMeasure,
    pub solver: SolverConfig,
    /// Detailed-balance profile at the pivots, when entropy analysis is on.
    pub equilibrium: Option<analysis::EquilibriumProfile>,
}

impl Scenario {
    /// Parses TOML; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut s: Scenario = toml::from_str(text)?;
        s.resolve_paths(base);
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let CoagSpec::Table { path } = &mut self.coagulation.kernel {
            fix(path);
        }
        if let FragSpec::Table { path } = &mut self.fragmentation.kernel {
            fix(path);
        }
        if let ModulationSpec::Sampled { path: Some(path), .. } = &mut self.boundary.modulation {
            fix(path);
        }
        if let InitialSpec::Csv { path } = &mut self.initial {
            fix(path);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn coag_kernel(&self) -> Result<CoagKernel> {
        let k = match &self.coagulation.kernel {
            CoagSpec::Constant { value } => CoagKernel::constant(*value),
            CoagSpec::Additive { scale } => CoagKernel::additive(*scale),
            CoagSpec::Multiplicative { scale } => CoagKernel::multiplicative(*scale),
            CoagSpec::BoundForm { k0, alpha, beta } => CoagKernel::bound_form(*k0, *alpha, *beta),
            CoagSpec::LowerForm { k1, alpha, beta } => CoagKernel::lower_form(*k1, *alpha, *beta),
            CoagSpec::Table { path } => CoagKernel::tabulated(read_table(path)?),
        };
        match self.coagulation.bounds {
            Some(b) => k.with_bounds(CoagBounds { k0: b.k0, alpha: b.alpha, beta: b.beta, k1: b.k1 }),
            None => Ok(k),
        }
    }

    pub fn coag_model(&self) -> Result<CoagModel> {
        let k = self.coag_kernel()?;
        Ok(match self.coagulation.truncation {
            Some(j) => CoagModel::Truncated(k.truncate(j)?),
            None => CoagModel::Full(k),
        })
    }

    pub fn frag_kernel(&self, coag: &CoagKernel) -> Result<FragKernel> {
        let f = match &self.fragmentation.kernel {
            FragSpec::Zero => FragKernel::zero(),
            FragSpec::Constant { value } => FragKernel::constant(*value),
            FragSpec::Power { f0, gamma } => FragKernel::power(*f0, *gamma),
            FragSpec::Multiplicative { scale } => FragKernel::multiplicative(*scale),
            FragSpec::Table { path } => FragKernel::tabulated(read_table(path)?),
            FragSpec::DetailedBalance { profile } => {
                FragKernel::detailed_balance(coag, Profile::PowerExp((*profile).into()))?
            }
        };
        match self.fragmentation.bounds {
            Some(b) => f.with_bounds(FragBounds { f0: b.f0, gamma: b.gamma }),
            None => Ok(f),
        }
    }

    pub fn boundary_datum(&self) -> Result<BoundaryDatum> {
        let b = &self.boundary;
        let modulation = match &b.modulation {
            ModulationSpec::Constant => TimeModulation::Constant,
            ModulationSpec::Decaying { c } => TimeModulation::Decaying { c: *c },
            ModulationSpec::Sampled { points: Some(p), path: None } => {
                TimeModulation::sampled(p.iter().map(|&[t, v]| (t, v)).collect())?
            }
            ModulationSpec::Sampled { points: None, path: Some(path) } => TimeModulation::from_csv(open(path)?)?,
            ModulationSpec::Sampled { .. } => {
                return Err(Error::Config("sampled modulation needs exactly one of `points` or `path`".into()))
            }
        };
        let spatial = PowerExp { amplitude: b.amplitude, power: b.power, decay: b.decay };
        BoundaryDatum::new(spatial, modulation)?.with_cutoff(b.cutoff)
    }

    pub fn build_grid(&self) -> Result<Arc<Grid>> {
        let g = &self.grid;
        let grid = match (g.kind, g.ratio, g.smallest) {
            (GridKindSpec::Uniform, None, None) => Grid::new(g.n, GridKind::Uniform)?,
            (GridKindSpec::Lattice, None, None) => Grid::new(g.n, GridKind::Lattice)?,
            (GridKindSpec::Geometric, Some(ratio), None) => Grid::new(g.n, GridKind::Geometric { ratio })?,
            (GridKindSpec::Geometric, None, Some(smallest)) => Grid::geometric_from_smallest(g.n, smallest)?,
            (GridKindSpec::Geometric, _, _) => {
                return Err(Error::Config("geometric grid needs exactly one of `ratio` or `smallest`".into()))
            }
            (kind, _, _) => return Err(Error::Config(format!("{kind:?} grid takes no `ratio` or `smallest`"))),
        };
        Ok(Arc::new(grid))
    }

    pub fn build_initial(&self, grid: Arc<Grid>) -> Result<StateMeasure> {
        match &self.initial {
            InitialSpec::Density { amplitude, power, decay, lower, upper } => {
                if !(*lower >= 0.0 && lower < upper && *upper <= 1.0) {
                    return Err(Error::Config(format!("initial support ({lower}, {upper}] must lie in (0, 1]")));
                }
                let q = PowerExp { amplitude: *amplitude, power: *power, decay: *decay };
                let (lo, hi) = (*lower, *upper);
                StateMeasure::from_density(move |x| if x > lo && x <= hi { q.eval(x) } else { 0.0 }, grid)
            }
            InitialSpec::Atoms { atoms } => {
                let mut s = StateMeasure::zeros(grid.clone());
                for &[x, count] in atoms {
                    if !(count >= 0.0 && count.is_finite()) {
                        return Err(Error::Config(format!("atom count must be nonnegative, got {count}")));
                    }
                    if x == 1.0 {
                        s.set_atom(s.atom() + count);
                        continue;
                    }
                    let i = grid
                        .cell_of(x)
                        .ok_or_else(|| Error::Config(format!("atom position {x} outside (0, 1]")))?;
                    s.cells_mut()[i] += count;
                }
                Ok(s)
            }
            InitialSpec::Csv { path } => io::read_state_csv(open(path)?, grid),
        }
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let s = &self.solver;
        let snapshots = match (s.snapshot_stride, &s.snapshot_times) {
            (Some(k), _) => SnapshotPolicy::Stride(k),
            (None, Some(ts)) => SnapshotPolicy::Times(ts.clone()),
            (None, None) => SnapshotPolicy::Interval(s.snapshot_interval),
        };
        let cfg = SolverConfig {
            scheme: match s.scheme {
                SchemeSpec::Euler => Scheme::Euler,
                SchemeSpec::Heun => Scheme::Heun,
            },
            t_final: s.t_final,
            dt_max: s.dt_max,
            safety: s.safety,
            snapshots,
            quad_n: s.quad_n,
            track_residual: s.track_residual,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_model(&self) -> Result<Model> {
        let coag = self.coag_model()?;
        let frag = self.frag_kernel(coag.base())?;
        let boundary = self.boundary_datum()?;
        Ok(Model::new(coag, frag, boundary)
            .with_atom_sink(self.solver.atom_sink)
            .with_truncated_sink(self.coagulation.truncated_sink))
    }

    /// Detailed-balance profile over the grid pivots.
    pub fn equilibrium(&self, model: &Model, grid: &Grid) -> Result<analysis::EquilibriumProfile> {
        analysis::equilibrium_profile(model.coag.base(), &model.frag, &model.boundary, grid, &self.analysis.probes)
    }

    /// Builds and cross-validates every component.
    pub fn build(&self) -> Result<Built> {
        let model = self.build_model()?;
        let grid = self.build_grid()?;
        let solver = self.solver_config()?;
        let initial = self.build_initial(grid.clone())?;
        self.cross_validate(&model, &solver)?;
        let equilibrium = if self.analysis.entropy {
            let eq = self.equilibrium(&model, &grid)?;
            if !(eq.spread <= self.analysis.spread_tolerance) {
                return Err(Error::InvalidScenario(format!(
                    "entropy analysis needs a detailed-balance scenario; probe spread {:.3e} exceeds {:.1e}",
                    eq.spread, self.analysis.spread_tolerance
                )));
            }
            Some(eq)
        } else {
            None
        };
        Ok(Built { model, grid, initial, solver, equilibrium })
    }

    fn cross_validate(&self, model: &Model, solver: &SolverConfig) -> Result<()> {
        if !model.boundary.is_zero() {
            if let Some(b) = model.coag.bounds() {
                model.boundary.require_moment(b.beta)?;
            }
            if let Some(fb) = model.frag.bounds() {
                model.boundary.require_moment(fb.gamma)?;
            }
        }
        if model.coag.bounds().is_some() {
            let beta = model.coag.bounds().map_or(0.0, |b| b.beta);
            bounded_params(&model.coag, beta)?;
        }
        if let Some(fit) = &self.analysis.decay_fit {
            let [a, b] = fit.window;
            if !(a >= 0.0 && a < b && b <= solver.t_final) {
                return Err(Error::Config(format!("decay-fit window [{a}, {b}] must lie inside [0, {}]", solver.t_final)));
            }
        }
        if self.analysis.probes.is_empty() || self.analysis.probes.iter().any(|&y| !(y > 1.0)) {
            return Err(Error::Config("equilibrium probes must all exceed 1".into()));
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

fn read_table(path: &Path) -> Result<KernelTable> {
    KernelTable::from_csv(open(path)?)
}
