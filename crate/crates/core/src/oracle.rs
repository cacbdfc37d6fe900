//! Physics routing oracle: synthetic runoff and a local-inertial channel
//! router that produces discharge, depth and storage for every reach.
//!
//! Channels are rectangular (`storage = rivlen * width * depth`). Each
//! external step is split into fixed sub-steps; every sub-step applies
//! continuity with the current fluxes, then the local-inertial momentum
//! update with friction taken at the new time level,
//!
//! ```text
//! Q' = Q + g A dt s - g dt n^2 Q'|Q'| / (h^(4/3) A)
//! ```
//!
//! solved in closed form as the positive root of a quadratic. Its steady
//! state is Manning's `Q = A h^(2/3) s^(1/2) / n`.
//!
//! and finally caps `Q <= S / dt`, which keeps storage nonnegative and is
//! exactly the Courant condition `velocity * dt <= rivlen` for a
//! rectangular channel. Fluxes are exchanged Jacobi-style, so the water a
//! reach releases in a sub-step is exactly what its receiver gains and the
//! global mass balance closes to rounding.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{RiverGraph, StaticFeatureTable};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Routed state variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Discharge,
    Depth,
    Storage,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::Discharge, Variable::Depth, Variable::Storage];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::Discharge => "discharge",
            Variable::Depth => "depth",
            Variable::Storage => "storage",
        }
    }
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Lateral runoff per reach and step, m³/s. Shape `n_reaches x n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSeries {
    pub runoff: Array2<f64>,
    /// Seconds per step.
    pub dt: f64,
}

impl ForcingSeries {
    pub fn new(runoff: Array2<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("dt = {dt} must be positive")));
        }
        for ((reach, step), &v) in runoff.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput {
                    what: "runoff",
                    reach,
                    step,
                });
            }
            if v < 0.0 {
                return Err(Error::invalid(format!(
                    "negative runoff {v} at reach {reach}, step {step}"
                )));
            }
        }
        Ok(Self { runoff, dt })
    }

    pub fn n_reaches(&self) -> usize {
        self.runoff.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.runoff.ncols()
    }

    /// Steps `range` as a new series.
    pub fn slice_steps(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            runoff: self.runoff.slice(ndarray::s![.., range]).to_owned(),
            dt: self.dt,
        }
    }
}

/// Routed discharge (m³/s), depth (m) and storage (m³), each
/// `n_reaches x n_steps`. Discharge is the mean outflow over the step;
/// depth and storage are end-of-step values.
#[derive(Debug, Clone, PartialEq)]
pub struct HydroSeries {
    pub discharge: Array2<f64>,
    pub depth: Array2<f64>,
    pub storage: Array2<f64>,
}

impl HydroSeries {
    pub fn zeros(n_reaches: usize, n_steps: usize) -> Self {
        Self {
            discharge: Array2::zeros((n_reaches, n_steps)),
            depth: Array2::zeros((n_reaches, n_steps)),
            storage: Array2::zeros((n_reaches, n_steps)),
        }
    }

    pub fn n_reaches(&self) -> usize {
        self.discharge.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.discharge.ncols()
    }

    pub fn get(&self, var: Variable) -> &Array2<f64> {
        match var {
            Variable::Discharge => &self.discharge,
            Variable::Depth => &self.depth,
            Variable::Storage => &self.storage,
        }
    }

    pub fn get_mut(&mut self, var: Variable) -> &mut Array2<f64> {
        match var {
            Variable::Discharge => &mut self.discharge,
            Variable::Depth => &mut self.depth,
            Variable::Storage => &mut self.storage,
        }
    }

    pub fn slice_steps(&self, range: std::ops::Range<usize>) -> Self {
        let cut = |a: &Array2<f64>| a.slice(ndarray::s![.., range.clone()]).to_owned();
        Self {
            discharge: cut(&self.discharge),
            depth: cut(&self.depth),
            storage: cut(&self.storage),
        }
    }
}

/// Instantaneous channel state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HydroState {
    pub storage: Vec<f64>,
    pub discharge: Vec<f64>,
}

impl HydroState {
    pub fn dry(n_reaches: usize) -> Self {
        Self {
            storage: vec![0.0; n_reaches],
            discharge: vec![0.0; n_reaches],
        }
    }
}

/// Perturbation knobs of the router.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OraclePhysics {
    /// m/s².
    pub gravity: f64,
    /// Multiplier on every reach's Manning coefficient.
    pub manning_scale: f64,
    /// Multiplier on the runoff forcing.
    pub runoff_bias: f64,
}

impl Default for OraclePhysics {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            manning_scale: 1.0,
            runoff_bias: 1.0,
        }
    }
}

impl OraclePhysics {
    fn validate(&self) -> Result<()> {
        if !(self.manning_scale > 0.0) || !(self.runoff_bias > 0.0) || !(self.gravity > 0.0) {
            return Err(Error::invalid(format!(
                "physics knobs must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RoutingScheme {
    LocalInertial,
    /// `Q = S / k` with `k = rivlen / velocity`; debugging fallback whose
    /// steady state is the upstream-accumulated inflow.
    LinearReservoir { velocity: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteConfig {
    pub substeps: usize,
    pub scheme: RoutingScheme,
    /// Depth floor (m) inside the friction denominator.
    pub depth_floor: f64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            substeps: 24,
            scheme: RoutingScheme::LocalInertial,
            depth_floor: 1e-6,
        }
    }
}

/// A reach/step where the Courant cap clipped the flux of a wet channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CflWarning {
    pub reach: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub series: HydroSeries,
    pub final_state: HydroState,
    pub warnings: Vec<CflWarning>,
}

/// Routes `forcing` through the network with the default configuration.
pub fn route(
    g: &RiverGraph,
    feats: &StaticFeatureTable,
    forcing: &ForcingSeries,
    physics: &OraclePhysics,
    init: Option<&HydroState>,
) -> Result<Routed> {
    route_with(g, feats, forcing, physics, init, &RouteConfig::default())
}

pub fn route_with(
    g: &RiverGraph,
    feats: &StaticFeatureTable,
    forcing: &ForcingSeries,
    physics: &OraclePhysics,
    init: Option<&HydroState>,
    cfg: &RouteConfig,
) -> Result<Routed> {
    let n = g.n_reaches();
    if forcing.n_reaches() != n {
        return Err(Error::mismatch("forcing reaches", n, forcing.n_reaches()));
    }
    if feats.n_reaches() != n {
        return Err(Error::mismatch("static feature reaches", n, feats.n_reaches()));
    }
    if !(forcing.dt > 0.0) {
        return Err(Error::invalid(format!("dt = {} must be positive", forcing.dt)));
    }
    if cfg.substeps == 0 {
        return Err(Error::invalid("substeps must be at least 1"));
    }
    physics.validate()?;
    for ((reach, step), &v) in forcing.runoff.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput {
                what: "runoff",
                reach,
                step,
            });
        }
    }
    let mut state = match init {
        Some(s) => {
            if s.storage.len() != n || s.discharge.len() != n {
                return Err(Error::mismatch("initial state reaches", n, s.storage.len()));
            }
            for (reach, (&st, &q)) in s.storage.iter().zip(&s.discharge).enumerate() {
                if !st.is_finite() || !q.is_finite() {
                    return Err(Error::NonFiniteInput {
                        what: "initial state",
                        reach,
                        step: 0,
                    });
                }
            }
            s.clone()
        }
        None => HydroState::dry(n),
    };

    let n_steps = forcing.n_steps();
    let dts = forcing.dt / cfg.substeps as f64;
    let area: Vec<f64> = (0..n).map(|i| feats.rivlen[i] * feats.width[i]).collect();
    let rough2: Vec<f64> = feats
        .manning_n
        .iter()
        .map(|nm| (physics.manning_scale * nm).powi(2))
        .collect();

    let mut out = HydroSeries::zeros(n, n_steps);
    let mut warnings = Vec::new();
    let mut inflow = vec![0.0; n];
    let mut q_sum = vec![0.0; n];

    for step in 0..n_steps {
        q_sum.iter_mut().for_each(|v| *v = 0.0);
        let mut warned_step = vec![false; n];
        for _ in 0..cfg.substeps {
            // continuity
            inflow.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                if let Some(d) = g.downstream(i) {
                    inflow[d] += state.discharge[i];
                }
            }
            for i in 0..n {
                q_sum[i] += state.discharge[i];
                let lateral = physics.runoff_bias * forcing.runoff[[i, step]];
                let s = state.storage[i] + dts * (inflow[i] + lateral - state.discharge[i]);
                state.storage[i] = s.max(0.0);
            }
            // momentum
            for i in 0..n {
                let s = state.storage[i];
                let h = s / area[i];
                let q_old = state.discharge[i];
                let q_new = match cfg.scheme {
                    RoutingScheme::LocalInertial => {
                        let w = feats.width[i];
                        let a = w * h;
                        let hf = h.max(cfg.depth_floor);
                        let af = w * hf;
                        let drive = q_old + physics.gravity * a * dts * feats.slope[i];
                        let fric = physics.gravity * dts * rough2[i] / (hf.powf(4.0 / 3.0) * af);
                        // Root of q + fric * q^2 = drive.
                        2.0 * drive / (1.0 + (1.0 + 4.0 * fric * drive).sqrt())
                    }
                    RoutingScheme::LinearReservoir { velocity } => {
                        s * velocity / feats.rivlen[i]
                    }
                };
                let cap = s / dts;
                let q_new = if q_new > cap {
                    if h > cfg.depth_floor && !warned_step[i] {
                        warned_step[i] = true;
                        warnings.push(CflWarning { reach: i, step });
                    }
                    cap
                } else {
                    q_new.max(0.0)
                };
                state.discharge[i] = q_new;
            }
        }
        for i in 0..n {
            out.discharge[[i, step]] = q_sum[i] / cfg.substeps as f64;
            out.storage[[i, step]] = state.storage[i];
            out.depth[[i, step]] = state.storage[i] / area[i];
        }
    }

    Ok(Routed {
        series: out,
        final_state: state,
        warnings,
    })
}

/// Routes with `obs_physics` to emulate observations that disagree with
/// the physics used for pretraining targets.
pub fn make_observations(
    truth_physics: &OraclePhysics,
    obs_physics: &OraclePhysics,
    g: &RiverGraph,
    feats: &StaticFeatureTable,
    forcing: &ForcingSeries,
    init: Option<&HydroState>,
) -> Result<Routed> {
    if truth_physics == obs_physics {
        log::warn!("observation physics equals truth physics; observations are unperturbed");
    }
    route(g, feats, forcing, obs_physics, init)
}

/// Per-step global water balance of a routed series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassBalance {
    /// `total storage change - dt * (lateral inflow - outlet discharge)`, m³.
    pub residual: f64,
    /// `dt * total lateral inflow`, m³.
    pub inflow_volume: f64,
}

impl MassBalance {
    pub fn relative(&self) -> f64 {
        self.residual.abs() / self.inflow_volume
    }
}

pub fn mass_balance(
    g: &RiverGraph,
    forcing: &ForcingSeries,
    physics: &OraclePhysics,
    init: Option<&HydroState>,
    series: &HydroSeries,
) -> Vec<MassBalance> {
    let n = g.n_reaches();
    let outlets = g.outlets();
    let mut prev: f64 = init.map(|s| s.storage.iter().sum()).unwrap_or(0.0);
    (0..series.n_steps())
        .map(|t| {
            let total: f64 = (0..n).map(|i| series.storage[[i, t]]).sum();
            let lateral: f64 =
                (0..n).map(|i| physics.runoff_bias * forcing.runoff[[i, t]]).sum();
            let out: f64 = outlets.iter().map(|&o| series.discharge[[o, t]]).sum();
            let mb = MassBalance {
                residual: (total - prev) - forcing.dt * (lateral - out),
                inflow_volume: forcing.dt * lateral,
            };
            prev = total;
            mb
        })
        .collect()
}

/// Climate regime of the synthetic runoff generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Humid,
    Arid,
    Seasonal,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "humid" => Ok(Regime::Humid),
            "arid" => Ok(Regime::Arid),
            "seasonal" => Ok(Regime::Seasonal),
            other => Err(Error::invalid(format!("unknown regime {other:?}"))),
        }
    }
}

struct RegimeParams {
    /// Mean runoff depth, mm/day.
    mean_mm_day: f64,
    seasonal_amp: f64,
    storm_sigma: f64,
    /// Fraction of the mean rate subtracted before clipping at zero.
    threshold: f64,
}

impl Regime {
    fn params(self) -> RegimeParams {
        match self {
            Regime::Humid => RegimeParams {
                mean_mm_day: 2.0,
                seasonal_amp: 0.3,
                storm_sigma: 0.8,
                threshold: 0.0,
            },
            Regime::Seasonal => RegimeParams {
                mean_mm_day: 1.5,
                seasonal_amp: 0.85,
                storm_sigma: 0.7,
                threshold: 0.0,
            },
            Regime::Arid => RegimeParams {
                mean_mm_day: 0.6,
                seasonal_amp: 0.5,
                storm_sigma: 1.2,
                threshold: 0.7,
            },
        }
    }
}

/// Lag-1 correlation of the storm processes.
const STORM_PERSISTENCE: f64 = 0.75;
/// Correlation of a reach's storm innovation with its receiver's.
const STORM_TREE_COUPLING: f64 = 0.7;
/// Share of storm variance from the basin-wide process.
const STORM_GLOBAL_WEIGHT: f64 = 0.5;

/// Synthetic lateral runoff: a yearly sinusoid modulated by lognormal storm
/// pulses. Storms mix a basin-wide AR(1) process with per-reach AR(1)
/// processes whose innovations are correlated along the drainage tree.
pub fn synthesize_runoff(
    g: &RiverGraph,
    feats: &StaticFeatureTable,
    n_steps: usize,
    seed: u64,
    regime: Regime,
) -> Result<ForcingSeries> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let n = g.n_reaches();
    if feats.n_reaches() != n {
        return Err(Error::mismatch("static feature reaches", n, feats.n_reaches()));
    }
    let p = regime.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let rho = STORM_PERSISTENCE;
    let innov = (1.0 - rho * rho).sqrt();
    let c = STORM_TREE_COUPLING;
    let own = (1.0 - c * c).sqrt();
    let wg = STORM_GLOBAL_WEIGHT;
    let wl = (1.0 - wg * wg).sqrt();
    let rate_to_flux = 1e-3 / SECONDS_PER_DAY;

    let mut global: f64 = rng.sample(StandardNormal);
    let mut local: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut shock = vec![0.0; n];
    let mut runoff = Array2::zeros((n, n_steps));
    let outlet_first: Vec<usize> = g.topo_order().iter().rev().copied().collect();
    for t in 0..n_steps {
        let season =
            1.0 + p.seasonal_amp * (std::f64::consts::TAU * t as f64 / 365.0 + phase).sin();
        global = rho * global + innov * rng.sample::<f64, _>(StandardNormal);
        for &r in &outlet_first {
            let parent = g.downstream(r).map(|d| shock[d]).unwrap_or(0.0);
            let fresh = if g.downstream(r).is_some() {
                c * parent + own * rng.sample::<f64, _>(StandardNormal)
            } else {
                rng.sample::<f64, _>(StandardNormal)
            };
            shock[r] = fresh;
        }
        for r in 0..n {
            local[r] = rho * local[r] + innov * shock[r];
            let x = wg * global + wl * local[r];
            let storm = (p.storm_sigma * x - 0.5 * p.storm_sigma * p.storm_sigma).exp();
            let rate = (season * storm - p.threshold).max(0.0) * p.mean_mm_day;
            runoff[[r, t]] = rate * rate_to_flux * feats.ctarea[r];
        }
    }
    ForcingSeries::new(runoff, SECONDS_PER_DAY)
}
