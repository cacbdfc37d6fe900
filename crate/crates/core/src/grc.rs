//! The GraphRiverCast operator.
//!
//! Every step of a lag + forecast window is processed in turn:
//!
//! ```text
//! x_t = concat(s, [y_{t-1}], r_t)           step_input
//! f_t = x_t + MLP(x_t)                      fuse
//! h_t = GCN^L(f_t W_in^T + b_in)            gcn_stack
//! z_t = z_{t-1} + u * (c - z_{t-1})         gru_step
//! y_t = z_t W_out^T + b_out                 readout (forecast steps only)
//! ```
//!
//! Weights are stored `(out, in)`. Several windows can be stacked along the
//! row axis (window-major) with a block-diagonal adjacency; the results are
//! identical to running the windows one by one.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CsrMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{adjacency_normalized, RiverGraph, N_STATIC};
use crate::oracle::{ForcingSeries, HydroSeries, Variable};
use crate::pipeline::{Dynamic, NormStats, NormalizedData};

/// Routed state channels predicted per reach.
pub const N_STATE: usize = 3;
/// Forcing channels per reach and step.
pub const N_FORCING: usize = 1;

/// Operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Runoff history only.
    ColdStart,
    /// Runoff plus recent routed states; forecasts roll out autoregressively.
    HotStart,
}

impl Mode {
    pub fn default_lag(self) -> usize {
        match self {
            Mode::ColdStart => 20,
            Mode::HotStart => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::ColdStart => "coldstart",
            Mode::HotStart => "hotstart",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coldstart" | "cold" => Ok(Mode::ColdStart),
            "hotstart" | "hot" => Ok(Mode::HotStart),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (expected coldstart or hotstart)"
            ))),
        }
    }
}

/// Enabled encoding components; `Components::NONE` is the MLP baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Components {
    pub stat: bool,
    pub temp: bool,
    pub topo: bool,
}

impl Components {
    pub const FULL: Components = Components {
        stat: true,
        temp: true,
        topo: true,
    };
    pub const NONE: Components = Components {
        stat: false,
        temp: false,
        topo: false,
    };

    /// All eight subsets, ordered by the bit pattern `stat | temp<<1 | topo<<2`.
    pub fn all() -> [Components; 8] {
        std::array::from_fn(|bits| Components::from_bits(bits as u8))
    }

    pub fn from_bits(bits: u8) -> Self {
        Self {
            stat: bits & 1 != 0,
            temp: bits & 2 != 0,
            topo: bits & 4 != 0,
        }
    }

    pub fn bits(self) -> u8 {
        self.stat as u8 | (self.temp as u8) << 1 | (self.topo as u8) << 2
    }

    pub fn count(self) -> u32 {
        self.bits().count_ones()
    }

    /// True when every component of `self` is also in `other`.
    pub fn is_subset_of(self, other: Components) -> bool {
        self.bits() & !other.bits() == 0
    }

    /// `stat+temp+topo`, ..., `mlp` for the empty set.
    pub fn key(self) -> String {
        let names: Vec<&str> = [("stat", self.stat), ("temp", self.temp), ("topo", self.topo)]
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if names.is_empty() {
            "mlp".to_string()
        } else {
            names.join("+")
        }
    }

    pub fn parse_key(key: &str) -> Result<Self> {
        if key == "mlp" {
            return Ok(Components::NONE);
        }
        let mut c = Components::NONE;
        for part in key.split('+') {
            match part {
                "stat" => c.stat = true,
                "temp" => c.temp = true,
                "topo" => c.topo = true,
                other => return Err(Error::invalid(format!("unknown component {other:?}"))),
            }
        }
        Ok(c)
    }
}

impl std::fmt::Display for Components {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.key())
    }
}

/// Architecture and mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrcConfig {
    pub mode: Mode,
    pub h_lag: usize,
    pub f_horizon: usize,
    pub d_static: usize,
    pub d_fusion: usize,
    pub d_hidden: usize,
    pub n_gcn_layers: usize,
    pub ablate_stat: bool,
    pub ablate_temp: bool,
    pub ablate_topo: bool,
}

impl GrcConfig {
    /// Default dimensions for `mode`.
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            h_lag: mode.default_lag(),
            f_horizon: 7,
            d_static: N_STATIC,
            d_fusion: 128,
            d_hidden: 64,
            n_gcn_layers: 2,
            ablate_stat: false,
            ablate_temp: false,
            ablate_topo: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h_lag", self.h_lag),
            ("f_horizon", self.f_horizon),
            ("d_fusion", self.d_fusion),
            ("d_hidden", self.d_hidden),
            ("n_gcn_layers", self.n_gcn_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Width of `x_t`: statics, state channels in HotStart, forcing.
    pub fn input_width(&self) -> usize {
        let states = match self.mode {
            Mode::ColdStart => 0,
            Mode::HotStart => N_STATE,
        };
        self.d_static + states + N_FORCING
    }

    pub fn window_len(&self) -> usize {
        self.h_lag + self.f_horizon
    }

    pub fn components(&self) -> Components {
        Components {
            stat: !self.ablate_stat,
            temp: !self.ablate_temp,
            topo: !self.ablate_topo,
        }
    }

    pub fn with_components(mut self, c: Components) -> Self {
        self.ablate_stat = !c.stat;
        self.ablate_temp = !c.temp;
        self.ablate_topo = !c.topo;
        self
    }

    /// Layer names in parameter order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["fusion".to_string(), "input_proj".to_string()];
        names.extend((0..self.n_gcn_layers).map(|l| format!("gcn.{l}")));
        names.push("gru".to_string());
        names.push("readout".to_string());
        names
    }

    /// `(layer, tensor, rows, cols)` for every parameter tensor, in storage
    /// order.
    pub fn layout(&self) -> Vec<(String, &'static str, usize, usize)> {
        let (x, df, d) = (self.input_width(), self.d_fusion, self.d_hidden);
        let mut out = vec![
            ("fusion".to_string(), "w1", df, x),
            ("fusion".to_string(), "b1", 1, df),
            ("fusion".to_string(), "w2", x, df),
            ("fusion".to_string(), "b2", 1, x),
            ("input_proj".to_string(), "w", d, x),
            ("input_proj".to_string(), "b", 1, d),
        ];
        for l in 0..self.n_gcn_layers {
            out.push((format!("gcn.{l}"), "w", d, d));
            out.push((format!("gcn.{l}"), "b", 1, d));
        }
        for (w, b) in [("w_u", "b_u"), ("w_r", "b_r"), ("w_z", "b_z")] {
            out.push(("gru".to_string(), w, d, 2 * d));
            out.push(("gru".to_string(), b, 1, d));
        }
        out.push(("readout".to_string(), "w", N_STATE, d));
        out.push(("readout".to_string(), "b", 1, N_STATE));
        out
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub layer: String,
    pub name: String,
    pub value: Array2<f64>,
}

impl ParamTensor {
    /// Biases are excluded from weight decay.
    pub fn is_bias(&self) -> bool {
        self.name.starts_with('b')
    }
}

/// All learnable tensors, in [`GrcConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GrcParams {
    pub tensors: Vec<ParamTensor>,
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases and `b_u = -1`.
pub fn init_params(cfg: &GrcConfig, seed: u64) -> Result<GrcParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = cfg
        .layout()
        .into_iter()
        .map(|(layer, name, r, c)| {
            let value = if name.starts_with('b') {
                let fill = if name == "b_u" { -1.0 } else { 0.0 };
                Array2::from_elem((r, c), fill)
            } else {
                let bound = 1.0 / (c as f64).sqrt();
                Array2::from_shape_fn((r, c), |_| rng.gen_range(-bound..bound))
            };
            ParamTensor {
                layer,
                name: name.to_string(),
                value,
            }
        })
        .collect();
    Ok(GrcParams { tensors })
}

impl GrcParams {
    /// Every tensor zero, biases included.
    pub fn zeros(cfg: &GrcConfig) -> Self {
        Self {
            tensors: cfg
                .layout()
                .into_iter()
                .map(|(layer, name, r, c)| ParamTensor {
                    layer,
                    name: name.to_string(),
                    value: Array2::zeros((r, c)),
                })
                .collect(),
        }
    }

    pub fn index_of(&self, layer: &str, name: &str) -> Option<usize> {
        self.tensors
            .iter()
            .position(|t| t.layer == layer && t.name == name)
    }

    pub fn get(&self, layer: &str, name: &str) -> Option<&Array2<f64>> {
        self.index_of(layer, name).map(|i| &self.tensors[i].value)
    }

    pub fn get_mut(&mut self, layer: &str, name: &str) -> Option<&mut Array2<f64>> {
        self.index_of(layer, name)
            .map(move |i| &mut self.tensors[i].value)
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for t in &self.tensors {
            if !seen.contains(&t.layer) {
                seen.push(t.layer.clone());
            }
        }
        seen
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// `Σ w²` over non-bias tensors.
    pub fn weight_sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|t| !t.is_bias())
            .map(|t| t.value.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Checks names and shapes against `cfg`.
    pub fn check_layout(&self, cfg: &GrcConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::mismatch(
                "parameter tensor count",
                layout.len(),
                self.tensors.len(),
            ));
        }
        for ((layer, name, r, c), t) in layout.iter().zip(&self.tensors) {
            if &t.layer != layer || t.name != *name || t.value.dim() != (*r, *c) {
                return Err(Error::mismatch(
                    "parameter tensor",
                    format!("{layer}.{name} {r}x{c}"),
                    format!(
                        "{}.{} {}x{}",
                        t.layer,
                        t.name,
                        t.value.nrows(),
                        t.value.ncols()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Little-endian f64 values of every tensor in storage order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.n_scalars());
        for t in &self.tensors {
            for v in t.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(cfg: &GrcConfig, bytes: &[u8]) -> Result<Self> {
        let mut params = Self::zeros(cfg);
        let expected = 8 * params.n_scalars();
        if bytes.len() != expected {
            return Err(Error::mismatch("params.bin size in bytes", expected, bytes.len()));
        }
        let mut chunks = bytes.chunks_exact(8);
        for t in &mut params.tensors {
            for v in t.value.iter_mut() {
                let c = chunks.next().expect("size checked");
                *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        Ok(params)
    }
}

/// A linear map `x W^T + b` bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct Linear<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> Linear<'t> {
    pub fn apply(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul_t(&self.w)?.add_row(&self.b)
    }
}

/// Parameters recorded on a tape, grouped by role.
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    pub fusion_in: Linear<'t>,
    pub fusion_out: Linear<'t>,
    pub input_proj: Linear<'t>,
    pub gcn: Vec<Linear<'t>>,
    pub gru_u: Linear<'t>,
    pub gru_r: Linear<'t>,
    pub gru_z: Linear<'t>,
    pub readout: Linear<'t>,
}

/// Records `params` on `tape`. Tensor `k` becomes parameter slot `k` when
/// `trainable(k)` holds and a constant otherwise.
pub fn bind<'t>(
    tape: &'t Tape,
    cfg: &GrcConfig,
    params: &GrcParams,
    trainable: impl Fn(usize) -> bool,
) -> Result<BoundParams<'t>> {
    params.check_layout(cfg)?;
    let vars: Vec<Var<'t>> = params
        .tensors
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if trainable(k) {
                tape.param(k, t.value.clone())
            } else {
                tape.constant(t.value.clone())
            }
        })
        .collect();
    let lin = |k: usize| Linear {
        w: vars[k],
        b: vars[k + 1],
    };
    let l = cfg.n_gcn_layers;
    let gru = 6 + 2 * l;
    Ok(BoundParams {
        fusion_in: lin(0),
        fusion_out: lin(2),
        input_proj: lin(4),
        gcn: (0..l).map(|i| lin(6 + 2 * i)).collect(),
        gru_u: lin(gru),
        gru_r: lin(gru + 2),
        gru_z: lin(gru + 4),
        readout: lin(gru + 6),
    })
}

/// Repeats the static block for every step: `s_i^(t) = s_i`.
pub fn broadcast_static(s: &Array2<f64>, n_steps: usize) -> Vec<Array2<f64>> {
    vec![s.clone(); n_steps]
}

/// `concat(s, y_prev, r)` in HotStart, `concat(s, r)` in ColdStart. With
/// `ablate_stat` the static columns are zeroed.
pub fn step_input<'t>(
    cfg: &GrcConfig,
    s: Var<'t>,
    r: Var<'t>,
    y_prev: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let s = if cfg.ablate_stat { s.scale(0.0).detach() } else { s };
    match (cfg.mode, y_prev) {
        (Mode::ColdStart, None) => Var::concat(&[s, r], 1),
        (Mode::HotStart, Some(y)) => Var::concat(&[s, y, r], 1),
        (Mode::ColdStart, Some(_)) => Err(Error::invalid(
            "ColdStart takes no state input; y_prev must be absent",
        )),
        (Mode::HotStart, None) => Err(Error::invalid("HotStart requires the previous state")),
    }
}

/// `x + MLP(x)` with `MLP = linear -> GELU -> linear`.
pub fn fuse<'t>(p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    let hidden = p.fusion_in.apply(x)?.gelu();
    x.add(&p.fusion_out.apply(&hidden)?)
}

/// Residual layers `H + GELU(D^-1 (A + I) H W^T + b)`. `adj = None` is the
/// self-only aggregation used when topology is ablated.
pub fn gcn_stack<'t>(
    p: &BoundParams<'t>,
    h: &Var<'t>,
    adj: Option<&Arc<CsrMatrix>>,
) -> Result<Var<'t>> {
    let mut h = *h;
    for layer in &p.gcn {
        let agg = match adj {
            Some(a) => h.row_normalize_apply(a)?,
            None => h,
        };
        let upd = layer.apply(&agg)?.gelu();
        h = h.add(&upd)?;
    }
    Ok(h)
}

/// Temporal residual update. With `ablate_temp` the recurrence is replaced
/// by the stateless `tanh(W_z concat(h, 0) + b_z)`.
pub fn gru_step<'t>(
    p: &BoundParams<'t>,
    h: &Var<'t>,
    z_prev: &Var<'t>,
    ablate_temp: bool,
) -> Result<Var<'t>> {
    if ablate_temp {
        let zeros = z_prev.scale(0.0).detach();
        let hz = Var::concat(&[*h, zeros], 1)?;
        return Ok(p.gru_z.apply(&hz)?.tanh());
    }
    let hz = Var::concat(&[*h, *z_prev], 1)?;
    let gate_u = p.gru_u.apply(&hz)?.sigmoid();
    let gate_r = p.gru_r.apply(&hz)?.sigmoid();
    let reset = gate_r.hadamard(z_prev)?;
    let cand = p
        .gru_z
        .apply(&Var::concat(&[*h, reset], 1)?)?
        .tanh();
    let delta = gate_u.hadamard(&cand.sub(z_prev)?)?;
    z_prev.add(&delta)
}

/// Normalized inputs for a stack of `n_windows` windows over the same
/// graph, rows window-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub n_windows: usize,
    /// `B·N x d_static`.
    pub statics: Array2<f64>,
    /// One `B·N x 1` block per step of the window (`h_lag + f_horizon`).
    pub runoff: Vec<Array2<f64>>,
    /// One `B·N x 3` block per lag step; HotStart only.
    pub states: Option<Vec<Array2<f64>>>,
}

impl BatchInput {
    pub fn n_rows(&self) -> usize {
        self.statics.nrows()
    }

    /// Stacks the windows anchored at `t0s`: runoff over
    /// `t0 - h_lag .. t0 + f_horizon`, states over the lag steps.
    pub fn from_windows(cfg: &GrcConfig, data: &NormalizedData, t0s: &[usize]) -> Result<Self> {
        let (n, h, f) = (data.n_reaches(), cfg.h_lag, cfg.f_horizon);
        for &t0 in t0s {
            if t0 < h || t0 + f > data.n_steps() {
                return Err(Error::invalid(format!(
                    "window at step {t0} needs steps {}..{} of {}",
                    t0 as i64 - h as i64,
                    t0 + f,
                    data.n_steps()
                )));
            }
        }
        let b = t0s.len();
        let mut statics = Array2::zeros((b * n, data.statics.ncols()));
        for w in 0..b {
            statics
                .slice_mut(ndarray::s![w * n..(w + 1) * n, ..])
                .assign(&data.statics);
        }
        let runoff = (0..h + f)
            .map(|j| {
                Array2::from_shape_fn((b * n, 1), |(row, _)| {
                    data.runoff[[row % n, t0s[row / n] - h + j]]
                })
            })
            .collect();
        let states = match cfg.mode {
            Mode::ColdStart => None,
            Mode::HotStart => Some(
                (0..h)
                    .map(|j| {
                        Array2::from_shape_fn((b * n, N_STATE), |(row, k)| {
                            data.states[k][[row % n, t0s[row / n] - h + j]]
                        })
                    })
                    .collect(),
            ),
        };
        Ok(Self {
            n_windows: b,
            statics,
            runoff,
            states,
        })
    }
}

/// Normalized truth for each forecast step of the windows at `t0s`, as
/// `B·N x 3` blocks.
pub fn window_targets(cfg: &GrcConfig, data: &NormalizedData, t0s: &[usize]) -> Vec<Array2<f64>> {
    let n = data.n_reaches();
    (0..cfg.f_horizon)
        .map(|k| {
            Array2::from_shape_fn((t0s.len() * n, N_STATE), |(row, v)| {
                data.states[v][[row % n, t0s[row / n] + k]]
            })
        })
        .collect()
}

/// Graph aggregation for a batch, or `None` under `ablate_topo`.
pub fn batch_adjacency(cfg: &GrcConfig, g: &RiverGraph, n_windows: usize) -> Option<Arc<CsrMatrix>> {
    if cfg.ablate_topo {
        return None;
    }
    let a = adjacency_normalized(g);
    Some(Arc::new(if n_windows == 1 {
        a
    } else {
        a.block_diagonal(n_windows)
    }))
}

/// Unrolls the window and returns one `B·N x 3` normalized prediction per
/// forecast step.
pub fn unroll<'t>(
    tape: &'t Tape,
    cfg: &GrcConfig,
    p: &BoundParams<'t>,
    adj: Option<&Arc<CsrMatrix>>,
    input: &BatchInput,
) -> Result<Vec<Var<'t>>> {
    let (h, f) = (cfg.h_lag, cfg.f_horizon);
    let rows = input.n_rows();
    if input.runoff.len() != h + f {
        return Err(Error::mismatch("runoff window steps", h + f, input.runoff.len()));
    }
    if input.statics.ncols() != cfg.d_static {
        return Err(Error::mismatch(
            "static feature columns",
            cfg.d_static,
            input.statics.ncols(),
        ));
    }
    if let Some(a) = adj {
        if a.n_rows() != rows {
            return Err(Error::mismatch("adjacency rows", rows, a.n_rows()));
        }
    }
    match (cfg.mode, &input.states) {
        (Mode::ColdStart, Some(_)) => {
            return Err(Error::invalid("ColdStart forward accepts no states window"))
        }
        (Mode::HotStart, None) => {
            return Err(Error::invalid("HotStart forward requires a states window"))
        }
        (Mode::HotStart, Some(st)) if st.len() != h => {
            return Err(Error::mismatch("states window steps", h, st.len()))
        }
        _ => {}
    }

    let statics = tape.constant(input.statics.clone());
    let mut z = tape.constant(Array2::zeros((rows, cfg.d_hidden)));
    let mut preds: Vec<Var<'t>> = Vec::with_capacity(f);
    for t in 0..h + f {
        let r = tape.constant(input.runoff[t].clone());
        let y_prev = match (&input.states, t) {
            (None, _) => None,
            (Some(_), 0) => Some(tape.constant(Array2::zeros((rows, N_STATE)))),
            (Some(st), t) if t <= h => Some(tape.constant(st[t - 1].clone())),
            (Some(_), _) => Some(*preds.last().expect("a forecast precedes this step")),
        };
        let x = step_input(cfg, statics, r, y_prev)?;
        let fused = fuse(p, &x)?;
        let hid = gcn_stack(p, &p.input_proj.apply(&fused)?, adj)?;
        z = gru_step(p, &hid, &z, cfg.ablate_temp)?;
        if !z.all_finite() {
            return Err(Error::NonFiniteLatent { step: t });
        }
        if t >= h {
            preds.push(p.readout.apply(&z)?);
        }
    }
    Ok(preds)
}

/// Forecast of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `N x f x 3`, in normalized units.
    pub normalized: Array3<f64>,
    /// `N x f x 3`, in physical units.
    pub physical: Array3<f64>,
}

/// Runs one window from physical inputs: `forcing` covers `h_lag +
/// f_horizon` steps, `states` (HotStart only) the `h_lag` lag steps.
pub fn forward(
    cfg: &GrcConfig,
    params: &GrcParams,
    g: &RiverGraph,
    statics_norm: &Array2<f64>,
    forcing: &ForcingSeries,
    states: Option<&HydroSeries>,
    norm: &NormStats,
) -> Result<Prediction> {
    cfg.validate()?;
    let n = g.n_reaches();
    if forcing.n_reaches() != n || statics_norm.nrows() != n {
        return Err(Error::mismatch(
            "window reaches",
            n,
            format!("forcing {} / statics {}", forcing.n_reaches(), statics_norm.nrows()),
        ));
    }
    if forcing.n_steps() != cfg.window_len() {
        return Err(Error::mismatch("forcing window steps", cfg.window_len(), forcing.n_steps()));
    }
    let runoff = norm.normalize_series(Dynamic::Runoff, &forcing.runoff);
    let runoff = (0..cfg.window_len())
        .map(|t| runoff.column(t).to_owned().insert_axis(ndarray::Axis(1)))
        .collect();
    let states = match (cfg.mode, states) {
        (Mode::ColdStart, Some(_)) => {
            return Err(Error::invalid("ColdStart forward accepts no states window"))
        }
        (Mode::HotStart, None) => {
            return Err(Error::invalid("HotStart forward requires a states window"))
        }
        (Mode::ColdStart, None) => None,
        (Mode::HotStart, Some(st)) => {
            if st.n_steps() != cfg.h_lag || st.n_reaches() != n {
                return Err(Error::mismatch(
                    "states window",
                    format!("{n} x {}", cfg.h_lag),
                    format!("{} x {}", st.n_reaches(), st.n_steps()),
                ));
            }
            let normed = Variable::ALL.map(|v| norm.normalize_series(v.into(), st.get(v)));
            Some(
                (0..cfg.h_lag)
                    .map(|t| Array2::from_shape_fn((n, N_STATE), |(i, k)| normed[k][[i, t]]))
                    .collect(),
            )
        }
    };
    let input = BatchInput {
        n_windows: 1,
        statics: statics_norm.clone(),
        runoff,
        states,
    };
    let normalized = predict(cfg, params, g, &input)?;
    let mut physical = normalized.clone();
    for ((i, _, k), v) in physical.indexed_iter_mut() {
        *v = norm.denormalize(Variable::ALL[k].into(), i, *v);
    }
    Ok(Prediction {
        normalized,
        physical,
    })
}

/// Inference on a batch: `B·N x f x 3` normalized predictions.
pub fn predict(
    cfg: &GrcConfig,
    params: &GrcParams,
    g: &RiverGraph,
    input: &BatchInput,
) -> Result<Array3<f64>> {
    let tape = Tape::new();
    let p = bind(&tape, cfg, params, |_| false)?;
    let adj = batch_adjacency(cfg, g, input.n_windows);
    let preds = unroll(&tape, cfg, &p, adj.as_ref(), input)?;
    let rows = input.n_rows();
    let mut out = Array3::zeros((rows, cfg.f_horizon, N_STATE));
    for (k, v) in preds.iter().enumerate() {
        out.slice_mut(ndarray::s![.., k, ..]).assign(&*v.value());
    }
    Ok(out)
}

/// `params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub cfg: GrcConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Path or hash of the `norm.json` the model was trained against.
    pub norm_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: String,
    pub name: String,
    pub shape: [usize; 2],
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Parameters plus the configuration needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: GrcConfig,
    pub params: GrcParams,
    pub seed: u64,
    pub norm_ref: Option<String>,
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            cfg: self.cfg.clone(),
            seed: self.seed,
            tensors: self
                .params
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    layer: t.layer.clone(),
                    name: t.name.clone(),
                    shape: [t.value.nrows(), t.value.ncols()],
                })
                .collect(),
            norm_ref: self.norm_ref.clone(),
        }
    }

    /// Writes `params.bin` and `params.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| crate::pipeline::io_context(dir, e))?;
        let bin = dir.join("params.bin");
        fs::write(&bin, self.params.to_bytes()).map_err(|e| crate::pipeline::io_context(&bin, e))?;
        let json = dir.join("params.json");
        fs::write(&json, serde_json::to_string_pretty(&self.manifest())?)
            .map_err(|e| crate::pipeline::io_context(&json, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let json = dir.join("params.json");
        let text = fs::read_to_string(&json).map_err(|e| crate::pipeline::io_context(&json, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::mismatch(
                "checkpoint format_version",
                CHECKPOINT_FORMAT_VERSION,
                manifest.format_version,
            ));
        }
        manifest.cfg.validate()?;
        let bin = dir.join("params.bin");
        let bytes = fs::read(&bin).map_err(|e| crate::pipeline::io_context(&bin, e))?;
        let params = GrcParams::from_bytes(&manifest.cfg, &bytes)?;
        let listed: Vec<TensorEntry> = params
            .tensors
            .iter()
            .map(|t| TensorEntry {
                layer: t.layer.clone(),
                name: t.name.clone(),
                shape: [t.value.nrows(), t.value.ncols()],
            })
            .collect();
        if listed != manifest.tensors {
            return Err(Error::mismatch(
                "params.json tensor list",
                format!("{} tensors from cfg", listed.len()),
                format!("{} listed", manifest.tensors.len()),
            ));
        }
        Ok(Self {
            cfg: manifest.cfg,
            params,
            seed: manifest.seed,
            norm_ref: manifest.norm_ref,
        })
    }
}

/// Names of layers present in `cfg`, for validating freeze sets.
pub fn layer_set(cfg: &GrcConfig) -> BTreeSet<String> {
    cfg.layer_names().into_iter().collect()
}
