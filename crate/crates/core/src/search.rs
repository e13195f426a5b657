//! Differentiable placement and compactness search.
//!
//! Each candidate location carries three decisions, each driven by a trainable
//! threshold: whether to insert a block (kernel norm against `t_insert`), which
//! channel ratio to use and which spatial stride to use (EMA'd affinity
//! distances against `t_channel` / `t_spatial`). Forward passes use hard
//! indicators; backward passes differentiate their sigmoid relaxations.

use serde::{Deserialize, Serialize};

use crate::cost::flops_nl_variant;
use crate::nl::{NlConfig, NlVariant};
use crate::supernet::NetworkSpec;
use crate::tensor::{gemm, prefix_channels, Graph, MatRef, NodeId, Tensor, TensorError};
use crate::{Error, Result};

// ----------------------------------------------------------------------
// Candidates and configuration
// ----------------------------------------------------------------------

/// Channel ratios in increasing order and spatial strides in decreasing
/// order. The last entry of each list is the densest choice and serves as the
/// reference the others are compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub ratios: Vec<f64>,
    pub strides: Vec<usize>,
}

impl Default for CandidateSet {
    fn default() -> Self {
        CandidateSet {
            ratios: vec![0.125, 0.25],
            strides: vec![2, 1],
        }
    }
}

impl CandidateSet {
    pub fn new(ratios: Vec<f64>, strides: Vec<usize>) -> Result<Self> {
        let set = CandidateSet { ratios, strides };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.strides.is_empty() {
            return Err(Error::Config("candidate lists must be non-empty".into()));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config(format!(
                "ratios {:?} outside (0, 1]",
                self.ratios
            )));
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "ratios {:?} must be strictly increasing so channel prefixes nest",
                self.ratios
            )));
        }
        if self.strides.windows(2).any(|w| w[0] <= w[1]) || *self.strides.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "strides {:?} must be strictly decreasing and end at 1",
                self.strides
            )));
        }
        Ok(())
    }

    /// Kept channel counts for a `c`-channel site, one per ratio.
    pub fn channel_counts(&self, c: usize) -> Result<Vec<usize>> {
        Ok(self
            .ratios
            .iter()
            .map(|&r| prefix_channels(r, c))
            .collect::<std::result::Result<_, _>>()?)
    }

    /// Added multiply-adds of each `(ratio, stride)` LightNL block at a site.
    pub fn cost_table(&self, h: usize, w: usize, c: usize) -> Result<Vec<Vec<u64>>> {
        self.ratios
            .iter()
            .map(|&r| {
                self.strides
                    .iter()
                    .map(|&s| {
                        Ok(flops_nl_variant(
                            NlVariant::LightNl,
                            (h, w, c),
                            &NlConfig::new(r, s),
                        )?)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn config(&self, ratio_idx: usize, stride_idx: usize) -> NlConfig {
        NlConfig::new(self.ratios[ratio_idx], self.strides[stride_idx])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub candidates: CandidateSet,
    /// Sigmoid temperature of every relaxation.
    pub tau: f64,
    pub ema_momentum: f64,
    /// Weight of the log-cost term.
    pub lambda: f64,
    /// Threshold step size relative to the weight step size.
    pub threshold_lr_mult: f64,
    /// Update EMA registers with the current batch before selecting.
    pub ema_before_select: bool,
    /// Standard deviation of the initial depthwise kernels at search sites.
    pub wd_init_std: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            candidates: CandidateSet::default(),
            tau: 1.0,
            ema_momentum: 0.99,
            lambda: 0.0,
            threshold_lr_mult: 10.0,
            ema_before_select: true,
            wd_init_std: 0.05,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.candidates.validate()?;
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(format!(
                "EMA momentum must lie in (0, 1), got {}",
                self.ema_momentum
            )));
        }
        if !(self.wd_init_std > 0.0) || !self.wd_init_std.is_finite() {
            // a zero kernel sits exactly at the gate threshold and never moves
            return Err(Error::Config(format!(
                "wd_init_std must be positive, got {}",
                self.wd_init_std
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// EMA registers
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub value: Option<f64>,
}

impl Ema {
    /// First call initializes the register; later calls blend with momentum `mu`.
    pub fn update(&mut self, v: f64, mu: f64) -> f64 {
        let next = match self.value {
            None => v,
            Some(r) => mu * r + (1.0 - mu) * v,
        };
        self.value = Some(next);
        next
    }
}

/// Values of a register list; `None` if any register was never updated.
pub fn ema_values(regs: &[Ema]) -> Option<Vec<f64>> {
    regs.iter().map(|r| r.value).collect()
}

// ----------------------------------------------------------------------
// Indicators
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Hard indicator forward, relaxed derivative backward.
    Hard,
    /// Relaxed value forward and backward.
    Relaxed,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Insertion gate on a depthwise kernel. Returns `(gated_wd, gate)` where the
/// gate is `1(‖wd‖² > t)` in hard mode and `σ((‖wd‖² − t)/τ)` otherwise; both
/// differentiate the sigmoid.
pub fn gate_insert(
    g: &mut Graph,
    wd: NodeId,
    t_insert: NodeId,
    tau: f64,
    mode: GateMode,
) -> Result<(NodeId, NodeId)> {
    let norm = g.sum_squares(wd);
    let gate = insert_indicator(g, norm, t_insert, tau, mode)?;
    let gated = g.mul_scalar(wd, gate)?;
    Ok((gated, gate))
}

/// Gate value from a precomputed squared kernel norm node.
pub fn insert_indicator(
    g: &mut Graph,
    norm_sq: NodeId,
    t: NodeId,
    tau: f64,
    mode: GateMode,
) -> Result<NodeId> {
    let (n, tv) = (g.value(norm_sq).item(), g.value(t).item());
    let s = sigmoid((n - tv) / tau);
    let ds = s * (1.0 - s) / tau;
    let value = match mode {
        GateMode::Hard => f64::from(u8::from(n > tv)),
        GateMode::Relaxed => s,
    };
    Ok(g.surrogate(&[norm_sq, t], vec![value], vec![ds, -ds])?)
}

/// Smallest index whose distance is below `t`; the last candidate is chosen
/// when none passes (or `t <= 0`).
pub fn select_ratio(distances: &[f64], t: f64) -> usize {
    let n = distances.len();
    if t <= 0.0 {
        return n - 1;
    }
    distances[..n - 1]
        .iter()
        .position(|&d| d < t)
        .unwrap_or(n - 1)
}

/// One-hot encoding of [`select_ratio`].
pub fn hard_chain(distances: &[f64], t: f64) -> Vec<f64> {
    let mut v = vec![0.0; distances.len()];
    v[select_ratio(distances, t)] = 1.0;
    v
}

/// Relaxed chain weights and their derivatives in `t`.
///
/// With `s_i = σ((t − d_i)/τ)`, candidate `i < n` gets `s_i · Π_{j<i}(1 − s_j)`
/// and the last candidate gets the remaining mass `Π_{j<n}(1 − s_j)`.
pub fn relaxed_chain(distances: &[f64], t: f64, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let n = distances.len();
    let mut p = vec![0.0; n];
    let mut dp = vec![0.0; n];
    // running product of (1 - s_j) and its derivative
    let (mut rest, mut drest) = (1.0, 0.0);
    for i in 0..n - 1 {
        let s = sigmoid((t - distances[i]) / tau);
        let ds = s * (1.0 - s) / tau;
        p[i] = s * rest;
        dp[i] = ds * rest + s * drest;
        let next = rest * (1.0 - s);
        drest = drest * (1.0 - s) - rest * ds;
        rest = next;
    }
    p[n - 1] = rest;
    dp[n - 1] = drest;
    (p, dp)
}

/// `[n]` weight vector over chain candidates driven by the scalar threshold node.
pub fn chain_weights(
    g: &mut Graph,
    t: NodeId,
    distances: &[f64],
    tau: f64,
    mode: GateMode,
) -> Result<NodeId> {
    let tv = g.value(t).item();
    let (relaxed, jac) = relaxed_chain(distances, tv, tau);
    let value = match mode {
        GateMode::Hard => hard_chain(distances, tv),
        GateMode::Relaxed => relaxed,
    };
    Ok(g.surrogate(&[t], value, jac)?)
}

// ----------------------------------------------------------------------
// Affinities and distances
// ----------------------------------------------------------------------

/// Candidate affinities `x_{c,i} x_{sc,i}ᵀ` for every ratio, built
/// incrementally from the nested channel prefixes so the whole list costs the
/// same multiply-adds as the densest one. Output shapes are `(N, P, P_s)`.
pub fn affinity_with_reuse(
    g: &mut Graph,
    x: NodeId,
    ratios: &[f64],
    stride: usize,
) -> Result<Vec<NodeId>> {
    if ratios.is_empty() || ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "ratios {ratios:?} do not form nested prefixes"
        )));
    }
    let [n, h, w, c] = *g.shape(x) else {
        return Err(
            TensorError::Invalid(format!("expected (N,H,W,C), got {:?}", g.shape(x))).into(),
        );
    };
    let p = h * w;
    let flat = g.reshape(x, &[n, p, c])?;
    let sub = if stride == 1 {
        flat
    } else {
        let s = g.spatial_subsample(x, stride)?;
        let ps = g.shape(s)[1] * g.shape(s)[2];
        g.reshape(s, &[n, ps, c])?
    };
    let mut out: Vec<NodeId> = Vec::with_capacity(ratios.len());
    let mut prev = 0;
    for &r in ratios {
        let k = prefix_channels(r, c)?;
        if k == prev {
            // same prefix as the previous ratio: nothing new to add
            out.push(*out.last().expect("k > 0 implies a previous entry"));
            continue;
        }
        let a = g.slice_last(flat, prev, k)?;
        let b = g.slice_last(sub, prev, k)?;
        let part = g.bmm(a, b, false, true)?;
        let acc = match out.last() {
            Some(&last) => g.add(last, part)?,
            None => part,
        };
        out.push(acc);
        prev = k;
    }
    Ok(out)
}

/// Squared Frobenius distance divided by the number of entries.
pub fn affinity_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op: "affinity_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.numel() as f64)
}

/// Per-candidate distances of one batch, averaged over samples.
///
/// Channel candidates compare `x_{r_i} x_{r_i}ᵀ` with the densest ratio's
/// affinity over all positions. Spatial candidates compare the densest
/// affinity read through stride `s` (each attended position replaced by the
/// kept position at the top-left of its `s x s` cell) with the densest
/// affinity itself.
pub fn candidate_distances(x: &Tensor, cset: &CandidateSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, h, w, c] = *x.shape() else {
        return Err(
            TensorError::Invalid(format!("expected (N,H,W,C), got {:?}", x.shape())).into(),
        );
    };
    let p = h * w;
    let counts = cset.channel_counts(c)?;
    let nr = counts.len();
    let mut dc = vec![0.0; nr];
    let mut ds = vec![0.0; cset.strides.len()];
    let mut affs = vec![vec![0.0; p * p]; nr];
    let anchors: Vec<Vec<usize>> = cset
        .strides
        .iter()
        .map(|&s| {
            (0..p)
                .map(|j| {
                    let (r, col) = (j / w, j % w);
                    (r / s * s) * w + col / s * s
                })
                .collect()
        })
        .collect();
    for b in 0..n {
        let sample = &x.data()[b * p * c..(b + 1) * p * c];
        let mut acc = vec![0.0; p * p];
        let mut prev = 0;
        for (i, &k) in counts.iter().enumerate() {
            if k > prev {
                let part = MatRef {
                    data: &sample[prev..],
                    rows: p,
                    cols: k - prev,
                    row_stride: c as isize,
                    col_stride: 1,
                };
                gemm(part, part.t(), 1.0, &mut acc);
                prev = k;
            }
            affs[i].copy_from_slice(&acc);
        }
        let gt = &affs[nr - 1];
        for i in 0..nr - 1 {
            dc[i] += sq_dist(&affs[i], gt) / (p * p) as f64;
        }
        for (si, anchor) in anchors.iter().enumerate() {
            let mut s = 0.0;
            for row in 0..p {
                let r = &gt[row * p..(row + 1) * p];
                for (j, &a) in anchor.iter().enumerate() {
                    let d = r[a] - r[j];
                    s += d * d;
                }
            }
            ds[si] += s / (p * p) as f64;
        }
    }
    dc.iter_mut()
        .chain(ds.iter_mut())
        .for_each(|v| *v /= n as f64);
    Ok((dc, ds))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Affinity of the ratio picked by the channel chain, gated at the affinity
/// level: `Σ_i 1(r_i) A_i`. The registers are updated with this batch's
/// distances before selection.
pub fn gated_affinity(
    g: &mut Graph,
    x: NodeId,
    t_channel: NodeId,
    registers: &mut [Ema],
    cfg: &SearchConfig,
) -> Result<NodeId> {
    let cset = &cfg.candidates;
    if registers.len() != cset.ratios.len() {
        return Err(Error::Config(format!(
            "{} registers for {} ratios",
            registers.len(),
            cset.ratios.len()
        )));
    }
    let (dc, _) = candidate_distances(g.value(x), cset)?;
    for (r, &d) in registers.iter_mut().zip(&dc) {
        r.update(d, cfg.ema_momentum);
    }
    let ema = ema_values(registers).expect("just updated");
    let affs = affinity_with_reuse(g, x, &cset.ratios, 1)?;
    let weights = chain_weights(g, t_channel, &ema, cfg.tau, GateMode::Hard)?;
    Ok(g.weighted_sum(weights, &affs)?)
}

// ----------------------------------------------------------------------
// Derived architecture
// ----------------------------------------------------------------------

pub const ARCH_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchLocation {
    pub site: String,
    pub insert: bool,
    pub channel_ratio: Option<f64>,
    pub spatial_stride: Option<usize>,
}

impl ArchLocation {
    pub fn config(&self) -> Option<NlConfig> {
        match (self.insert, self.channel_ratio, self.spatial_stride) {
            (true, Some(r), Some(s)) => Some(NlConfig::new(r, s)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchMeta {
    pub seed: u64,
    pub lambda: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescription {
    pub schema: u32,
    pub locations: Vec<ArchLocation>,
    pub backbone: NetworkSpec,
    pub meta: ArchMeta,
}

impl ArchDescription {
    /// No blocks inserted anywhere.
    pub fn plain(backbone: &NetworkSpec) -> Self {
        let locations = backbone
            .site_names()
            .into_iter()
            .map(|site| ArchLocation {
                site,
                insert: false,
                channel_ratio: None,
                spatial_stride: None,
            })
            .collect();
        ArchDescription {
            schema: ARCH_SCHEMA,
            locations,
            backbone: backbone.clone(),
            meta: ArchMeta::default(),
        }
    }

    /// A block at every site with the default per-site compactness.
    pub fn manual(backbone: &NetworkSpec) -> Result<Self> {
        let shapes = backbone.site_shapes()?;
        let mut arch = Self::plain(backbone);
        for (loc, (_, h, _, _)) in arch.locations.iter_mut().zip(shapes) {
            let cfg = NlConfig::for_site(h);
            loc.insert = true;
            loc.channel_ratio = Some(cfg.channel_ratio);
            loc.spatial_stride = Some(cfg.spatial_stride);
        }
        Ok(arch)
    }

    pub fn inserts(&self) -> usize {
        self.locations.iter().filter(|l| l.insert).count()
    }

    /// Block config of every backbone block, `None` where nothing is inserted.
    pub fn site_configs(&self) -> Vec<Option<NlConfig>> {
        (0..self.backbone.blocks.len())
            .map(|k| {
                let name = NetworkSpec::site_name(k);
                self.locations
                    .iter()
                    .find(|l| l.site == name)
                    .and_then(ArchLocation::config)
            })
            .collect()
    }

    /// Per-sample multiply-adds of the realized network.
    pub fn madds(&self) -> Result<u64> {
        self.validate()?;
        Ok(self.backbone.flops_report(&self.site_configs())?.total)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != ARCH_SCHEMA {
            return Err(Error::Schema(format!(
                "unsupported schema {}, expected {ARCH_SCHEMA}",
                self.schema
            )));
        }
        let sites = self.backbone.site_names();
        let names: Vec<&str> = self.locations.iter().map(|l| l.site.as_str()).collect();
        if names != sites.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Schema(format!(
                "locations {names:?} do not match backbone sites {sites:?}"
            )));
        }
        for l in &self.locations {
            match (l.insert, l.channel_ratio, l.spatial_stride) {
                (true, Some(r), Some(s)) if r > 0.0 && r <= 1.0 && s >= 1 => {}
                (false, None, None) => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "location {} has an inconsistent configuration",
                        l.site
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let arch: ArchDescription =
            serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }
}

/// Everything the derivation reads for one location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationSnapshot {
    pub site: String,
    pub wd_norm_sq: f64,
    pub t_insert: f64,
    pub t_channel: f64,
    pub t_spatial: f64,
    pub ema_channel: Vec<Ema>,
    pub ema_spatial: Vec<Ema>,
}

/// Discrete architecture from kernel norms, thresholds and EMA registers.
pub fn derive_architecture(
    snapshots: &[LocationSnapshot],
    cset: &CandidateSet,
    backbone: &NetworkSpec,
    meta: ArchMeta,
) -> Result<ArchDescription> {
    cset.validate()?;
    let mut arch = ArchDescription::plain(backbone);
    if snapshots.len() != arch.locations.len() {
        return Err(Error::Schema(format!(
            "{} snapshots for {} sites",
            snapshots.len(),
            arch.locations.len()
        )));
    }
    for (loc, snap) in arch.locations.iter_mut().zip(snapshots) {
        if loc.site != snap.site {
            return Err(Error::Schema(format!(
                "snapshot {} at site {}",
                snap.site, loc.site
            )));
        }
        let uninit = || Error::UninitializedEma(snap.site.clone());
        let dc = ema_values(&snap.ema_channel).ok_or_else(uninit)?;
        let ds = ema_values(&snap.ema_spatial).ok_or_else(uninit)?;
        if dc.len() != cset.ratios.len() || ds.len() != cset.strides.len() {
            return Err(Error::Config(format!(
                "register count mismatch at {}",
                snap.site
            )));
        }
        if snap.wd_norm_sq > snap.t_insert {
            loc.insert = true;
            loc.channel_ratio = Some(cset.ratios[select_ratio(&dc, snap.t_channel)]);
            loc.spatial_stride = Some(cset.strides[select_ratio(&ds, snap.t_spatial)]);
        }
    }
    arch.meta = meta;
    Ok(arch)
}
