//! Directed river networks and their static channel attributes.
//!
//! Reaches are dense 0-based ids. An edge `(j, i)` means reach `j` drains
//! into reach `i`; every reach has at most one downstream neighbour, so a
//! network is a forest whose roots are outlets.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::CsrMatrix;
use crate::error::{Error, Result};

pub const N_FLDHGT: usize = 10;

/// Static feature names in model column order.
pub const STATIC_FEATURE_NAMES: [&str; 20] = [
    "ctarea",
    "elevtn",
    "grdarea",
    "nxtdst",
    "rivlen",
    "rivwth_gwdlr",
    "uparea",
    "width",
    "fldhgt_1",
    "fldhgt_2",
    "fldhgt_3",
    "fldhgt_4",
    "fldhgt_5",
    "fldhgt_6",
    "fldhgt_7",
    "fldhgt_8",
    "fldhgt_9",
    "fldhgt_10",
    "slope",
    "manning_n",
];

pub const N_STATIC: usize = STATIC_FEATURE_NAMES.len();

#[derive(Debug, Clone, PartialEq)]
pub struct RiverGraph {
    n_reaches: usize,
    edges: Vec<(usize, usize)>,
    downstream: Vec<Option<usize>>,
    upstream: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
}

impl RiverGraph {
    /// Validates and indexes an edge list.
    ///
    /// Fails on out-of-range ids, self loops, a reach with two downstream
    /// neighbours, or a cycle.
    pub fn new(n_reaches: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n_reaches == 0 {
            return Err(Error::invalid("a river graph needs at least one reach"));
        }
        let mut downstream = vec![None; n_reaches];
        let mut upstream = vec![Vec::new(); n_reaches];
        for &(j, i) in &edges {
            if j >= n_reaches || i >= n_reaches {
                return Err(Error::invalid(format!(
                    "edge ({j}, {i}) out of range for {n_reaches} reaches"
                )));
            }
            if j == i {
                return Err(Error::invalid(format!("self loop at reach {j}")));
            }
            if let Some(prev) = downstream[j] {
                return Err(Error::invalid(format!(
                    "reach {j} drains into both {prev} and {i}"
                )));
            }
            downstream[j] = Some(i);
            upstream[i].push(j);
        }
        for ups in &mut upstream {
            ups.sort_unstable();
        }

        // Kahn's algorithm, smallest id first among ready reaches.
        let mut indeg: Vec<usize> = upstream.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n_reaches).filter(|&r| indeg[r] == 0).collect();
        let mut topo_order = Vec::with_capacity(n_reaches);
        while let Some(r) = ready.pop_first() {
            topo_order.push(r);
            if let Some(d) = downstream[r] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.insert(d);
                }
            }
        }
        if topo_order.len() != n_reaches {
            return Err(Error::invalid("river graph contains a cycle"));
        }

        Ok(Self {
            n_reaches,
            edges,
            downstream,
            upstream,
            topo_order,
        })
    }

    pub fn n_reaches(&self) -> usize {
        self.n_reaches
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn downstream(&self, reach: usize) -> Option<usize> {
        self.downstream[reach]
    }

    pub fn upstream(&self, reach: usize) -> &[usize] {
        &self.upstream[reach]
    }

    /// Upstream-first ordering.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// `|N(i)| + 1` for each reach.
    pub fn degree(&self) -> Vec<usize> {
        self.upstream.iter().map(|u| u.len() + 1).collect()
    }

    pub fn outlets(&self) -> Vec<usize> {
        (0..self.n_reaches)
            .filter(|&r| self.downstream[r].is_none())
            .collect()
    }

    pub fn headwaters(&self) -> Vec<usize> {
        (0..self.n_reaches)
            .filter(|&r| self.upstream[r].is_empty())
            .collect()
    }

    /// Topological level of each reach: 0 for headwaters, otherwise one more
    /// than the deepest upstream neighbour.
    pub fn levels(&self) -> Vec<usize> {
        let mut level = vec![0; self.n_reaches];
        for &r in &self.topo_order {
            level[r] = self.upstream[r]
                .iter()
                .map(|&u| level[u] + 1)
                .max()
                .unwrap_or(0);
        }
        level
    }

    /// True when every edge goes from earlier to later in `order`.
    pub fn is_topological(&self, order: &[usize]) -> bool {
        if order.len() != self.n_reaches {
            return false;
        }
        let mut pos = vec![usize::MAX; self.n_reaches];
        for (k, &r) in order.iter().enumerate() {
            if r >= self.n_reaches || pos[r] != usize::MAX {
                return false;
            }
            pos[r] = k;
        }
        self.edges.iter().all(|&(j, i)| pos[j] < pos[i])
    }
}

/// `D^-1 (A + I)` with `A[i][j] = 1` for every edge `j -> i`.
pub fn adjacency_normalized(g: &RiverGraph) -> CsrMatrix {
    let rows: Vec<Vec<(usize, f64)>> = (0..g.n_reaches())
        .map(|i| {
            let w = 1.0 / (g.upstream(i).len() + 1) as f64;
            let mut row = vec![(i, w)];
            row.extend(g.upstream(i).iter().map(|&j| (j, w)));
            row
        })
        .collect();
    CsrMatrix::from_rows(g.n_reaches(), &rows).expect("ids are in range")
}

/// Self-loop-only aggregation (identity), used when topology is ablated.
pub fn adjacency_identity(n: usize) -> CsrMatrix {
    let rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
    CsrMatrix::from_rows(n, &rows).expect("ids are in range")
}

pub fn adjacency_arc(g: &RiverGraph) -> Arc<CsrMatrix> {
    Arc::new(adjacency_normalized(g))
}

/// Per-reach geomorphic attributes (areas m², lengths m, elevations m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticFeatureTable {
    pub ctarea: Vec<f64>,
    pub elevtn: Vec<f64>,
    pub grdarea: Vec<f64>,
    pub nxtdst: Vec<f64>,
    pub rivlen: Vec<f64>,
    pub rivwth_gwdlr: Vec<f64>,
    pub uparea: Vec<f64>,
    pub width: Vec<f64>,
    pub fldhgt: Vec<[f64; N_FLDHGT]>,
    pub slope: Vec<f64>,
    pub manning_n: Vec<f64>,
}

impl StaticFeatureTable {
    pub fn n_reaches(&self) -> usize {
        self.ctarea.len()
    }

    /// Row `reach` in [`STATIC_FEATURE_NAMES`] order.
    pub fn row(&self, reach: usize) -> [f64; N_STATIC] {
        let mut out = [0.0; N_STATIC];
        out[0] = self.ctarea[reach];
        out[1] = self.elevtn[reach];
        out[2] = self.grdarea[reach];
        out[3] = self.nxtdst[reach];
        out[4] = self.rivlen[reach];
        out[5] = self.rivwth_gwdlr[reach];
        out[6] = self.uparea[reach];
        out[7] = self.width[reach];
        out[8..8 + N_FLDHGT].copy_from_slice(&self.fldhgt[reach]);
        out[18] = self.slope[reach];
        out[19] = self.manning_n[reach];
        out
    }

    /// `n_reaches x N_STATIC` matrix in column order.
    pub fn to_matrix(&self) -> ndarray::Array2<f64> {
        let n = self.n_reaches();
        let mut m = ndarray::Array2::zeros((n, N_STATIC));
        for r in 0..n {
            m.row_mut(r).assign(&ndarray::ArrayView1::from(&self.row(r)));
        }
        m
    }

    /// Checks the attribute invariants against `g`.
    pub fn validate(&self, g: &RiverGraph) -> Result<()> {
        let n = g.n_reaches();
        let lens = [
            ("ctarea", self.ctarea.len()),
            ("elevtn", self.elevtn.len()),
            ("grdarea", self.grdarea.len()),
            ("nxtdst", self.nxtdst.len()),
            ("rivlen", self.rivlen.len()),
            ("rivwth_gwdlr", self.rivwth_gwdlr.len()),
            ("uparea", self.uparea.len()),
            ("width", self.width.len()),
            ("fldhgt", self.fldhgt.len()),
            ("slope", self.slope.len()),
            ("manning_n", self.manning_n.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::mismatch(format!("length of {name}"), n, len));
            }
        }
        for r in 0..n {
            let positive = [
                ("ctarea", self.ctarea[r]),
                ("grdarea", self.grdarea[r]),
                ("nxtdst", self.nxtdst[r]),
                ("rivlen", self.rivlen[r]),
                ("rivwth_gwdlr", self.rivwth_gwdlr[r]),
                ("uparea", self.uparea[r]),
                ("width", self.width[r]),
                ("slope", self.slope[r]),
            ];
            for (name, v) in positive {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("{name}[{r}] = {v} must be positive")));
                }
            }
            if !(0.01..=0.2).contains(&self.manning_n[r]) {
                return Err(Error::invalid(format!(
                    "manning_n[{r}] = {} outside [0.01, 0.2]",
                    self.manning_n[r]
                )));
            }
            if self.fldhgt[r].windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::invalid(format!("fldhgt[{r}] is not monotone")));
            }
        }
        for &(j, i) in g.edges() {
            if self.uparea[i] < self.uparea[j] {
                return Err(Error::invalid(format!(
                    "uparea decreases downstream along edge ({j}, {i})"
                )));
            }
        }
        Ok(())
    }
}

/// Hydraulic-geometry knobs for the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Median reach length, m.
    pub rivlen_median: f64,
    /// Median local catchment area, m².
    pub ctarea_median: f64,
    /// `width = width_coef * uparea^width_exp`.
    pub width_coef: f64,
    pub width_exp: f64,
    /// `bankfull depth = depth_coef * uparea^depth_exp` (drives fldhgt).
    pub depth_coef: f64,
    pub depth_exp: f64,
    /// Sigma of the multiplicative lognormal noise on width and depth.
    pub geometry_noise: f64,
    /// `slope = slope_coef * uparea^slope_exp`, floored at `slope_min`.
    pub slope_coef: f64,
    pub slope_exp: f64,
    pub slope_min: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            rivlen_median: 20_000.0,
            ctarea_median: 4.0e8,
            width_coef: 1.0e-3,
            width_exp: 0.5,
            depth_coef: 0.005,
            depth_exp: 0.3,
            geometry_noise: 0.15,
            slope_coef: 0.5,
            slope_exp: -0.3,
            slope_min: 2.0e-5,
        }
    }
}

/// Random outlet-rooted tree grown upstream with synthesized attributes.
pub fn generate_network(
    n_reaches: usize,
    branching_prob: f64,
    seed: u64,
) -> Result<(RiverGraph, StaticFeatureTable)> {
    generate_network_with(n_reaches, branching_prob, seed, &GeneratorConfig::default())
}

pub fn generate_network_with(
    n_reaches: usize,
    branching_prob: f64,
    seed: u64,
    cfg: &GeneratorConfig,
) -> Result<(RiverGraph, StaticFeatureTable)> {
    if n_reaches == 0 {
        return Err(Error::invalid("n_reaches must be at least 1"));
    }
    if !(0.0..=1.0).contains(&branching_prob) {
        return Err(Error::invalid(format!(
            "branching_prob {branching_prob} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Growth: each new reach attaches upstream of either a random existing
    // reach (a confluence, probability `branching_prob`) or a random
    // headwater tip (channel extension).
    let mut edges = Vec::with_capacity(n_reaches.saturating_sub(1));
    let mut tips: Vec<usize> = vec![0];
    let mut n_up = vec![0usize; n_reaches];
    for new in 1..n_reaches {
        let target = if rng.gen_bool(branching_prob) {
            rng.gen_range(0..new)
        } else {
            tips[rng.gen_range(0..tips.len())]
        };
        if let Some(pos) = tips.iter().position(|&t| t == target) {
            tips.swap_remove(pos);
        }
        tips.push(new);
        n_up[target] += 1;
        edges.push((new, target));
    }
    let g = RiverGraph::new(n_reaches, edges)?;

    let ln = |median: f64, sigma: f64| LogNormal::new(median.ln(), sigma).expect("valid sigma");
    let rivlen_d = ln(cfg.rivlen_median, 0.35);
    let ctarea_d = ln(cfg.ctarea_median, 0.5);
    let noise_d = ln(1.0, cfg.geometry_noise);

    let rivlen: Vec<f64> = (0..n_reaches).map(|_| rivlen_d.sample(&mut rng)).collect();
    let ctarea: Vec<f64> = (0..n_reaches).map(|_| ctarea_d.sample(&mut rng)).collect();
    let grdarea: Vec<f64> = ctarea
        .iter()
        .map(|a| a * rng.gen_range(0.9..1.1))
        .collect();
    let nxtdst: Vec<f64> = rivlen
        .iter()
        .map(|l| l * rng.gen_range(0.8..1.0))
        .collect();

    let mut uparea = ctarea.clone();
    for &r in g.topo_order() {
        if let Some(d) = g.downstream(r) {
            uparea[d] += uparea[r];
        }
    }

    let width: Vec<f64> = uparea
        .iter()
        .map(|a| cfg.width_coef * a.powf(cfg.width_exp) * noise_d.sample(&mut rng))
        .collect();
    let rivwth_gwdlr: Vec<f64> = width
        .iter()
        .map(|w| w * noise_d.sample(&mut rng))
        .collect();
    let bankfull: Vec<f64> = uparea
        .iter()
        .map(|a| cfg.depth_coef * a.powf(cfg.depth_exp) * noise_d.sample(&mut rng))
        .collect();
    let fldhgt: Vec<[f64; N_FLDHGT]> = bankfull
        .iter()
        .map(|d| {
            let mut acc = 0.0;
            let mut row = [0.0; N_FLDHGT];
            for h in &mut row {
                acc += d * rng.gen_range(0.05..0.4);
                *h = acc;
            }
            row
        })
        .collect();
    let slope: Vec<f64> = uparea
        .iter()
        .map(|a| {
            (cfg.slope_coef * a.powf(cfg.slope_exp) * noise_d.sample(&mut rng)).max(cfg.slope_min)
        })
        .collect();
    let manning_n: Vec<f64> = (0..n_reaches)
        .map(|_| rng.gen_range(0.025..0.06))
        .collect();

    // Outlet elevation at sea-ish level; each upstream reach sits above its
    // receiver by the receiver's channel drop.
    let mut elevtn = vec![0.0; n_reaches];
    for &r in g.topo_order().iter().rev() {
        elevtn[r] = match g.downstream(r) {
            None => rng.gen_range(1.0..50.0),
            Some(d) => elevtn[d] + slope[d] * rivlen[d],
        };
    }

    let feats = StaticFeatureTable {
        ctarea,
        elevtn,
        grdarea,
        nxtdst,
        rivlen,
        rivwth_gwdlr,
        uparea,
        width,
        fldhgt,
        slope,
        manning_n,
    };
    feats.validate(&g)?;
    Ok((g, feats))
}

/// Coarse reach id → fine reach ids, upstream-most first.
pub type CoarseToFine = Vec<Vec<usize>>;

/// Splits every reach into `k` serial sub-reaches.
///
/// Coarse reach `i` becomes fine reaches `i*k .. i*k + k`, ordered upstream
/// to downstream. A coarse edge `j -> i` becomes an edge from `j`'s last
/// sub-reach to `i`'s first.
pub fn refine_network(
    g: &RiverGraph,
    feats: &StaticFeatureTable,
    k: usize,
) -> Result<(RiverGraph, StaticFeatureTable, CoarseToFine)> {
    if k < 2 {
        return Err(Error::invalid(format!("subdivisions k = {k} must be >= 2")));
    }
    feats.validate(g)?;
    let n = g.n_reaches();
    let fine_id = |coarse: usize, m: usize| coarse * k + m;

    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        for m in 0..k - 1 {
            edges.push((fine_id(i, m), fine_id(i, m + 1)));
        }
    }
    for &(j, i) in g.edges() {
        edges.push((fine_id(j, k - 1), fine_id(i, 0)));
    }
    let fine = RiverGraph::new(n * k, edges)?;

    let kf = k as f64;
    let nf = n * k;
    let mut out = StaticFeatureTable {
        ctarea: vec![0.0; nf],
        elevtn: vec![0.0; nf],
        grdarea: vec![0.0; nf],
        nxtdst: vec![0.0; nf],
        rivlen: vec![0.0; nf],
        rivwth_gwdlr: vec![0.0; nf],
        uparea: vec![0.0; nf],
        width: vec![0.0; nf],
        fldhgt: vec![[0.0; N_FLDHGT]; nf],
        slope: vec![0.0; nf],
        manning_n: vec![0.0; nf],
    };
    for i in 0..n {
        let outlet = feats.elevtn[i];
        let inlet = g
            .upstream(i)
            .iter()
            .map(|&j| feats.elevtn[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let inlet = if inlet > outlet {
            inlet
        } else {
            outlet + feats.slope[i] * feats.rivlen[i]
        };
        for m in 0..k {
            let f = fine_id(i, m);
            out.ctarea[f] = feats.ctarea[i] / kf;
            out.grdarea[f] = feats.grdarea[i] / kf;
            out.nxtdst[f] = feats.nxtdst[i] / kf;
            out.rivlen[f] = feats.rivlen[i] / kf;
            out.elevtn[f] = outlet + (inlet - outlet) * (k - 1 - m) as f64 / kf;
            out.fldhgt[f] = feats.fldhgt[i];
            out.slope[f] = feats.slope[i];
            out.manning_n[f] = feats.manning_n[i];
        }
    }
    for &r in fine.topo_order() {
        out.uparea[r] += out.ctarea[r];
        if let Some(d) = fine.downstream(r) {
            out.uparea[d] += out.uparea[r];
        }
    }
    for i in 0..n {
        for m in 0..k {
            let f = fine_id(i, m);
            let scale = (out.uparea[f] / feats.uparea[i]).sqrt();
            out.width[f] = feats.width[i] * scale;
            out.rivwth_gwdlr[f] = feats.rivwth_gwdlr[i] * scale;
        }
    }
    let map = (0..n)
        .map(|i| (0..k).map(|m| fine_id(i, m)).collect())
        .collect();
    Ok((fine, out, map))
}

/// Supervised/unsupervised partition of gauge reaches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaugeSet {
    pub ratio_permille: u32,
    pub supervised: Vec<usize>,
    pub unsupervised: Vec<usize>,
}

/// `ceil(ratio * n)` that is not fooled by `0.7 * 10 = 7.000000000000001`.
pub(crate) fn ceil_fraction(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// `n` distinct reaches drawn uniformly with a seeded RNG, sorted.
pub fn sample_gauges(g: &RiverGraph, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > g.n_reaches() {
        return Err(Error::invalid(format!(
            "cannot place {n} gauges on a {}-reach graph",
            g.n_reaches()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_7567);
    let mut picked = rand::seq::index::sample(&mut rng, g.n_reaches(), n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Nested gauge subsets from one seeded shuffle of the candidates.
pub fn split_gauges(
    g: &RiverGraph,
    candidates: &[usize],
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<GaugeSet>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate gauge reaches"));
    }
    if let Some(&bad) = candidates.iter().find(|&&c| c >= g.n_reaches()) {
        return Err(Error::invalid(format!("gauge reach {bad} not in graph")));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::invalid(format!("ratio {r} outside (0, 1]")));
    }
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("ratios must be sorted ascending"));
    }
    let mut pool: Vec<usize> = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    Ok(ratios
        .iter()
        .map(|&ratio| {
            let take = ceil_fraction(ratio, pool.len()).min(pool.len());
            let mut supervised = pool[..take].to_vec();
            let mut unsupervised = pool[take..].to_vec();
            supervised.sort_unstable();
            unsupervised.sort_unstable();
            GaugeSet {
                ratio_permille: (ratio * 1000.0).round() as u32,
                supervised,
                unsupervised,
            }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    n_reaches: usize,
    edges: Vec<[usize; 2]>,
    #[serde(rename = "static")]
    static_features: StaticColumns,
}

#[derive(Debug, Serialize, Deserialize)]
struct StaticColumns {
    ctarea: Vec<f64>,
    elevtn: Vec<f64>,
    grdarea: Vec<f64>,
    nxtdst: Vec<f64>,
    rivlen: Vec<f64>,
    rivwth_gwdlr: Vec<f64>,
    uparea: Vec<f64>,
    width: Vec<f64>,
    fldhgt: Vec<[f64; N_FLDHGT]>,
    slope: Vec<f64>,
    manning_n: Vec<f64>,
}

pub fn graph_to_json(g: &RiverGraph, feats: &StaticFeatureTable) -> Result<String> {
    let file = GraphFile {
        n_reaches: g.n_reaches(),
        edges: g.edges().iter().map(|&(j, i)| [j, i]).collect(),
        static_features: StaticColumns {
            ctarea: feats.ctarea.clone(),
            elevtn: feats.elevtn.clone(),
            grdarea: feats.grdarea.clone(),
            nxtdst: feats.nxtdst.clone(),
            rivlen: feats.rivlen.clone(),
            rivwth_gwdlr: feats.rivwth_gwdlr.clone(),
            uparea: feats.uparea.clone(),
            width: feats.width.clone(),
            fldhgt: feats.fldhgt.clone(),
            slope: feats.slope.clone(),
            manning_n: feats.manning_n.clone(),
        },
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn graph_from_json(text: &str) -> Result<(RiverGraph, StaticFeatureTable)> {
    let file: GraphFile = serde_json::from_str(text)?;
    let g = RiverGraph::new(
        file.n_reaches,
        file.edges.iter().map(|e| (e[0], e[1])).collect(),
    )?;
    let s = file.static_features;
    let feats = StaticFeatureTable {
        ctarea: s.ctarea,
        elevtn: s.elevtn,
        grdarea: s.grdarea,
        nxtdst: s.nxtdst,
        rivlen: s.rivlen,
        rivwth_gwdlr: s.rivwth_gwdlr,
        uparea: s.uparea,
        width: s.width,
        fldhgt: s.fldhgt,
        slope: s.slope,
        manning_n: s.manning_n,
    };
    feats.validate(&g)?;
    Ok((g, feats))
}

pub fn write_graph(path: &Path, g: &RiverGraph, feats: &StaticFeatureTable) -> Result<()> {
    std::fs::write(path, graph_to_json(g, feats)?)?;
    Ok(())
}

pub fn read_graph(path: &Path) -> Result<(RiverGraph, StaticFeatureTable)> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    graph_from_json(&text)
}

pub fn write_coarse_to_fine(path: &Path, map: &CoarseToFine) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(map)?)?;
    Ok(())
}
