//! Inverted-residual backbone with optional LightNL sites.
//!
//! Block layout: expand 1x1 (skipped at expansion 1) → BN → relu6 →
//! depthwise 3x3 (stride) → BN → relu6 → project 1x1 → BN → site → residual
//! (stride 1 and matching channels only). A site is empty, a fixed LightNL
//! block, or a search block that gates every candidate configuration.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::{
    flops_conv1x1, flops_conv2d, flops_dwconv, flops_matmul, flops_nl_variant, FlopsReport,
    LocationCost,
};
use crate::nl::{depthwise_wrapper, lightnl_block, nl_compact, NlConfig, NlVariant};
use crate::search::{
    candidate_distances, chain_weights, derive_architecture, ema_values, insert_indicator,
    ArchDescription, ArchMeta, Ema, GateMode, LocationSnapshot, SearchConfig,
};
use crate::tensor::{conv_out_dim, BatchStats, BnMode, Graph, NodeId, Tensor, TensorError};
use crate::{write_atomic, Error, Result};

// ----------------------------------------------------------------------
// Specs
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expansion: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub lightnl_site: bool,
}

impl BlockSpec {
    pub fn new(expansion: usize, c_in: usize, c_out: usize, stride: usize) -> Self {
        BlockSpec {
            expansion,
            c_in,
            c_out,
            stride,
            lightnl_site: true,
        }
    }

    pub fn hidden(&self) -> usize {
        self.c_in * self.expansion
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: InputShape,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
}

/// Spatial dims around one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

fn toy_blocks(
    channels: &[usize],
    strides: &[usize],
    expansions: &[usize],
    stem: usize,
) -> Vec<BlockSpec> {
    let mut c_in = stem;
    channels
        .iter()
        .zip(strides)
        .zip(expansions)
        .map(|((&c, &s), &t)| {
            let b = BlockSpec::new(t, c_in, c, s);
            c_in = c;
            b
        })
        .collect()
}

impl NetworkSpec {
    /// Five blocks with output channels 8-16-24-32-64 on 32x32 inputs.
    pub fn toy() -> Self {
        NetworkSpec {
            name: "toy".into(),
            input: InputShape { h: 32, w: 32, c: 1 },
            stem: StemSpec {
                c_out: 8,
                kernel: 3,
                stride: 2,
            },
            blocks: toy_blocks(&[8, 16, 24, 32, 64], &[1, 2, 1, 2, 1], &[1, 6, 6, 6, 6], 8),
            classes: 10,
        }
    }

    /// The toy layout on 28x28 digits.
    pub fn mnist() -> Self {
        NetworkSpec {
            name: "mnist".into(),
            input: InputShape { h: 28, w: 28, c: 1 },
            ..Self::toy()
        }
    }

    /// Narrow, stride-1 body on 32x32 inputs: no position's receptive field
    /// spans opposite image corners.
    pub fn longrange() -> Self {
        NetworkSpec {
            name: "longrange".into(),
            input: InputShape { h: 32, w: 32, c: 1 },
            stem: StemSpec {
                c_out: 8,
                kernel: 3,
                stride: 2,
            },
            blocks: toy_blocks(&[8, 16, 16, 16, 32], &[1; 5], &[1, 2, 2, 2, 2], 8),
            classes: 2,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "mnist" => Some(Self::mnist()),
            "longrange" => Some(Self::longrange()),
            _ => None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: NetworkSpec =
            serde_json::from_str(s).map_err(|e| Error::Schema(format!("network spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network {}: {m}", self.name)));
        let InputShape { h, w, c } = self.input;
        if h == 0 || w == 0 || c == 0 || self.classes == 0 {
            return bad("input dims and class count must be positive".into());
        }
        if self.stem.kernel % 2 == 0 || self.stem.stride == 0 || self.stem.c_out == 0 {
            return bad("stem needs an odd kernel, positive stride and channels".into());
        }
        if self.blocks.is_empty() {
            return bad("no blocks".into());
        }
        let mut c_prev = self.stem.c_out;
        for (k, b) in self.blocks.iter().enumerate() {
            if b.c_in != c_prev {
                return bad(format!(
                    "block{} expects {} channels, previous layer gives {c_prev}",
                    k + 1,
                    b.c_in
                ));
            }
            if b.expansion == 0 || b.stride == 0 || b.c_out == 0 {
                return bad(format!(
                    "block{} has a zero expansion, stride or width",
                    k + 1
                ));
            }
            c_prev = b.c_out;
        }
        Ok(())
    }

    pub fn stem_out(&self) -> (usize, usize) {
        (
            conv_out_dim(self.input.h, self.stem.kernel, self.stem.stride),
            conv_out_dim(self.input.w, self.stem.kernel, self.stem.stride),
        )
    }

    pub fn block_dims(&self) -> Vec<BlockDims> {
        let (mut h, mut w) = self.stem_out();
        self.blocks
            .iter()
            .map(|b| {
                let d = BlockDims {
                    h_in: h,
                    w_in: w,
                    h_out: conv_out_dim(h, 3, b.stride),
                    w_out: conv_out_dim(w, 3, b.stride),
                };
                (h, w) = (d.h_out, d.w_out);
                d
            })
            .collect()
    }

    pub fn site_name(k: usize) -> String {
        format!("block{}", k + 1)
    }

    /// Names of the blocks that carry a site, in order.
    pub fn site_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.lightnl_site)
            .map(|(k, _)| Self::site_name(k))
            .collect()
    }

    /// `(site, h, w, c)` of every site's feature map.
    pub fn site_shapes(&self) -> Result<Vec<(String, usize, usize, usize)>> {
        self.validate()?;
        Ok(self
            .blocks
            .iter()
            .zip(self.block_dims())
            .enumerate()
            .filter(|(_, (b, _))| b.lightnl_site)
            .map(|(k, (b, d))| (Self::site_name(k), d.h_out, d.w_out, b.c_out))
            .collect())
    }

    /// Trainable parameters of the plain network (BN scale and shift included).
    pub fn param_count(&self) -> usize {
        let s = &self.stem;
        let mut n = s.kernel * s.kernel * self.input.c * s.c_out + 2 * s.c_out;
        for b in &self.blocks {
            let hid = b.hidden();
            if b.expansion != 1 {
                n += b.c_in * hid + 2 * hid;
            }
            n += 9 * hid + 2 * hid;
            n += hid * b.c_out + 2 * b.c_out;
        }
        let c_last = self.blocks.last().map_or(s.c_out, |b| b.c_out);
        n + c_last * self.classes + self.classes
    }

    /// Per-sample multiply-adds with a LightNL block of the given config at each
    /// block (`None` = no block).
    pub fn flops_report(&self, sites: &[Option<NlConfig>]) -> Result<FlopsReport> {
        self.validate()?;
        if sites.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "{} site configs for {} blocks",
                sites.len(),
                self.blocks.len()
            )));
        }
        let mut r = FlopsReport::default();
        let (sh, sw) = self.stem_out();
        r.push(
            "stem",
            "conv2d",
            flops_conv2d(sh, sw, self.input.c, self.stem.c_out, self.stem.kernel),
        );
        for (k, ((b, d), site)) in self
            .blocks
            .iter()
            .zip(self.block_dims())
            .zip(sites)
            .enumerate()
        {
            let name = Self::site_name(k);
            let hid = b.hidden();
            if b.expansion != 1 {
                r.push(&name, "expand", flops_conv1x1(d.h_in, d.w_in, b.c_in, hid));
            }
            r.push(&name, "depthwise", flops_dwconv(d.h_out, d.w_out, hid, 3));
            r.push(
                &name,
                "project",
                flops_conv1x1(d.h_out, d.w_out, hid, b.c_out),
            );
            if let Some(cfg) = site {
                r.push(
                    &name,
                    "lightnl",
                    flops_nl_variant(NlVariant::LightNl, (d.h_out, d.w_out, b.c_out), cfg)?,
                );
            }
        }
        let c_last = self.blocks.last().expect("validated").c_out;
        r.push("head", "linear", flops_matmul(1, c_last, self.classes));
        Ok(r)
    }

    /// Multiply-adds without any LightNL block.
    pub fn backbone_flops(&self) -> Result<u64> {
        Ok(self.flops_report(&vec![None; self.blocks.len()])?.total)
    }
}

// ----------------------------------------------------------------------
// Parameter store and checkpoints
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Network weights, trained at the base learning rate.
    Weight,
    /// Architecture thresholds.
    Threshold,
    /// Non-trainable state (batch-norm running statistics, search registers).
    Buffer,
}

impl ParamKind {
    fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Threshold => 1,
            ParamKind::Buffer => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [ParamKind::Weight, ParamKind::Threshold, ParamKind::Buffer]
            .into_iter()
            .find(|k| k.code() == c)
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named tensors in sorted order; iteration order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LNLCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) {
        self.map.insert(name.into(), Param { kind, value });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.map.get(name).map(|p| p.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self, kind: ParamKind) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, p)| p.kind == kind)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total element count of one kind.
    pub fn numel(&self, kind: ParamKind) -> usize {
        self.map
            .values()
            .filter(|p| p.kind == kind)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("checkpoint", e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.map.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (name, p) in &self.map {
            w.write_all(&(name.len() as u32).to_le_bytes())
                .map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&[p.kind.code()]).map_err(io)?;
            p.value.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |m: String| Error::Tensor(TensorError::Format(m));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| fmt(format!("checkpoint header: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt(format!("bad checkpoint magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32buf)
                .map_err(|e| fmt(format!("checkpoint: {e}")))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::default();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(fmt(format!("implausible name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| fmt(format!("checkpoint name: {e}")))?;
            let name = String::from_utf8(name).map_err(|e| fmt(format!("checkpoint name: {e}")))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)
                .map_err(|e| fmt(format!("checkpoint kind: {e}")))?;
            let kind = ParamKind::from_code(kind[0])
                .ok_or_else(|| fmt(format!("unknown kind {}", kind[0])))?;
            let value = Tensor::read_from(r)?;
            store.insert(name, kind, value);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

// ----------------------------------------------------------------------
// Network
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum SiteMode {
    Plain,
    LightNl(NlConfig),
    Search,
}

/// Search registers of one site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SiteSearch {
    pub ema_channel: Vec<Ema>,
    pub ema_spatial: Vec<Ema>,
    /// Whether the chain thresholds have been initialized from data.
    pub ready: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, gradients, register updates.
    Train,
    /// Running statistics, constants only.
    Eval,
}

/// State changes produced by a forward pass, applied by [`Network::commit`].
#[derive(Clone, Debug, Default)]
pub struct Pending {
    bn: Vec<(String, BatchStats)>,
    search: Vec<(String, SiteSearch)>,
    thresholds: Vec<(String, f64)>,
}

pub struct Forward {
    pub logits: NodeId,
    /// Leaf nodes of the trainable parameters used, by name.
    pub params: BTreeMap<String, NodeId>,
    /// Relaxed cost terms of every search site.
    pub cost_terms: Vec<LocationCost>,
    /// Hard insertion gate of every search site.
    pub gates: Vec<(String, f64)>,
    pub pending: Pending,
}

pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub sites: Vec<SiteMode>,
    pub params: ParamStore,
    pub search_cfg: Option<SearchConfig>,
    pub search: BTreeMap<String, SiteSearch>,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn add_bn(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(
        format!("{prefix}.gamma"),
        ParamKind::Weight,
        Tensor::full(&[c], 1.0),
    );
    store.insert(
        format!("{prefix}.beta"),
        ParamKind::Weight,
        Tensor::zeros(&[c]),
    );
    store.insert(
        format!("{prefix}.mean"),
        ParamKind::Buffer,
        Tensor::zeros(&[c]),
    );
    store.insert(
        format!("{prefix}.var"),
        ParamKind::Buffer,
        Tensor::full(&[c], 1.0),
    );
}

pub fn wd_name(site: &str) -> String {
    format!("{site}.lightnl.wd")
}

fn threshold_name(site: &str, which: &str) -> String {
    format!("{site}.t_{which}")
}

impl Network {
    /// Builds a network and initializes its weights from `seed`. Backbone
    /// weights depend only on `spec` and `seed`, so networks differing only in
    /// their sites share them. Site kernels are drawn from `N(0, wd_std²)`;
    /// `wd_std = 0` gives zero kernels (blocks start as the identity).
    pub fn new(
        spec: NetworkSpec,
        sites: Vec<SiteMode>,
        search_cfg: Option<SearchConfig>,
        wd_std: f64,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if sites.len() != spec.blocks.len() {
            return Err(Error::Config(format!(
                "{} site modes for {} blocks",
                sites.len(),
                spec.blocks.len()
            )));
        }
        for (k, (b, s)) in spec.blocks.iter().zip(&sites).enumerate() {
            if *s != SiteMode::Plain && !b.lightnl_site {
                return Err(Error::Config(format!("block{} has no site", k + 1)));
            }
        }
        let has_search = sites.contains(&SiteMode::Search);
        if has_search {
            search_cfg
                .as_ref()
                .ok_or_else(|| Error::Config("search sites need a search config".into()))?
                .validate()?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let s = &spec.stem;
        let fan = s.kernel * s.kernel * spec.input.c;
        store.insert(
            "stem.w",
            ParamKind::Weight,
            he_normal(&mut rng, &[s.kernel, s.kernel, spec.input.c, s.c_out], fan),
        );
        add_bn(&mut store, "stem.bn", s.c_out);
        for (k, b) in spec.blocks.iter().enumerate() {
            let p = NetworkSpec::site_name(k);
            let hid = b.hidden();
            if b.expansion != 1 {
                store.insert(
                    format!("{p}.expand.w"),
                    ParamKind::Weight,
                    he_normal(&mut rng, &[b.c_in, hid], b.c_in),
                );
                add_bn(&mut store, &format!("{p}.expand.bn"), hid);
            }
            store.insert(
                format!("{p}.dw.w"),
                ParamKind::Weight,
                he_normal(&mut rng, &[3, 3, hid], 9),
            );
            add_bn(&mut store, &format!("{p}.dw.bn"), hid);
            store.insert(
                format!("{p}.project.w"),
                ParamKind::Weight,
                he_normal(&mut rng, &[hid, b.c_out], hid),
            );
            add_bn(&mut store, &format!("{p}.project.bn"), b.c_out);
        }
        let c_last = spec.blocks.last().expect("validated").c_out;
        store.insert(
            "head.w",
            ParamKind::Weight,
            he_normal(&mut rng, &[c_last, spec.classes], c_last),
        );
        store.insert("head.b", ParamKind::Weight, Tensor::zeros(&[spec.classes]));

        // site parameters come from their own stream
        let mut site_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_17e5_u64);
        let wd_dist = (wd_std > 0.0).then(|| Normal::new(0.0, wd_std).expect("positive std"));
        let mut search = BTreeMap::new();
        let mut norms = Vec::new();
        for (k, (b, mode)) in spec.blocks.iter().zip(&sites).enumerate() {
            if *mode == SiteMode::Plain {
                continue;
            }
            let site = NetworkSpec::site_name(k);
            let wd = match &wd_dist {
                Some(d) => Tensor::from_fn(&[3, 3, b.c_out], |_| d.sample(&mut site_rng)),
                None => Tensor::zeros(&[3, 3, b.c_out]),
            };
            norms.push(wd.sum_squares());
            store.insert(wd_name(&site), ParamKind::Weight, wd);
            if *mode == SiteMode::Search {
                let cfg = search_cfg.as_ref().expect("checked above");
                cfg.candidates.channel_counts(b.c_out)?;
                for which in ["channel", "spatial"] {
                    store.insert(
                        threshold_name(&site, which),
                        ParamKind::Threshold,
                        Tensor::scalar(0.0),
                    );
                }
                search.insert(
                    site,
                    SiteSearch {
                        ema_channel: vec![Ema::default(); cfg.candidates.ratios.len()],
                        ema_spatial: vec![Ema::default(); cfg.candidates.strides.len()],
                        ready: false,
                    },
                );
            }
        }
        if has_search {
            let t0 = 0.5 * norms.iter().sum::<f64>() / norms.len() as f64;
            for site in search.keys() {
                store.insert(
                    threshold_name(site, "insert"),
                    ParamKind::Threshold,
                    Tensor::scalar(t0),
                );
            }
        }
        Ok(Network {
            spec,
            sites,
            params: store,
            search_cfg: if has_search { search_cfg } else { None },
            search,
        })
    }

    pub fn plain(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let n = spec.blocks.len();
        Self::new(spec, vec![SiteMode::Plain; n], None, 0.0, seed)
    }

    /// Every site in search mode.
    pub fn supernet(spec: NetworkSpec, cfg: SearchConfig, wd_std: f64, seed: u64) -> Result<Self> {
        let sites = spec
            .blocks
            .iter()
            .map(|b| {
                if b.lightnl_site {
                    SiteMode::Search
                } else {
                    SiteMode::Plain
                }
            })
            .collect();
        Self::new(spec, sites, Some(cfg), wd_std, seed)
    }

    fn arch_sites(arch: &ArchDescription) -> Result<Vec<SiteMode>> {
        arch.validate()?;
        Ok(arch
            .site_configs()
            .into_iter()
            .map(|c| c.map_or(SiteMode::Plain, SiteMode::LightNl))
            .collect())
    }

    /// Fixed network for an architecture with freshly initialized weights.
    pub fn realize(arch: &ArchDescription, wd_std: f64, seed: u64) -> Result<Self> {
        let sites = Self::arch_sites(arch)?;
        Self::new(arch.backbone.clone(), sites, None, wd_std, seed)
    }

    /// Fixed network for an architecture, copying every weight and running
    /// statistic it needs from `source` (typically a trained supernet).
    pub fn realize_with_weights(arch: &ArchDescription, source: &ParamStore) -> Result<Self> {
        let mut net = Self::realize(arch, 0.0, 0)?;
        for name in net
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .collect::<Vec<_>>()
        {
            let v = source.get(&name)?.clone();
            let dst = net.params.get_mut(&name)?;
            if dst.shape() != v.shape() {
                return Err(Error::Schema(format!(
                    "{name}: shape {:?} vs {:?}",
                    dst.shape(),
                    v.shape()
                )));
            }
            *dst = v;
        }
        Ok(net)
    }

    pub fn site_configs(&self) -> Vec<Option<NlConfig>> {
        self.sites
            .iter()
            .map(|s| match s {
                SiteMode::LightNl(c) => Some(*c),
                _ => None,
            })
            .collect()
    }

    /// Per-sample multiply-adds of the fixed network (search sites count as empty).
    pub fn flops_report(&self) -> Result<FlopsReport> {
        self.spec.flops_report(&self.site_configs())
    }

    /// Replaces parameter values with those in `store`; names, kinds and shapes must match.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        let mut incoming = store.clone();
        self.import_search_state(&mut incoming)?;
        if incoming.len() != self.params.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} tensors, network has {}",
                incoming.len(),
                self.params.len()
            )));
        }
        for (name, p) in incoming.iter() {
            let dst = self.params.get(name)?;
            if dst.shape() != p.value.shape() || self.params.kind(name) != Some(p.kind) {
                return Err(Error::Schema(format!(
                    "checkpoint entry {name} does not match the network"
                )));
            }
        }
        self.params = incoming;
        Ok(())
    }

    /// Parameters plus search registers, as stored in checkpoints.
    pub fn export_params(&self) -> ParamStore {
        let mut store = self.params.clone();
        for (site, s) in &self.search {
            let enc = |regs: &[Ema]| {
                Tensor::new(
                    vec![regs.len()],
                    regs.iter().map(|r| r.value.unwrap_or(f64::NAN)).collect(),
                )
                .expect("non-empty")
            };
            store.insert(
                format!("{site}.search.ema_channel"),
                ParamKind::Buffer,
                enc(&s.ema_channel),
            );
            store.insert(
                format!("{site}.search.ema_spatial"),
                ParamKind::Buffer,
                enc(&s.ema_spatial),
            );
            store.insert(
                format!("{site}.search.ready"),
                ParamKind::Buffer,
                Tensor::scalar(f64::from(u8::from(s.ready))),
            );
        }
        store
    }

    fn import_search_state(&mut self, store: &mut ParamStore) -> Result<()> {
        for (site, s) in self.search.iter_mut() {
            let mut take = |suffix: &str| -> Result<Tensor> {
                let name = format!("{site}.search.{suffix}");
                let t = store.get(&name)?.clone();
                store.map.remove(&name);
                Ok(t)
            };
            let dec = |t: Tensor| -> Vec<Ema> {
                t.data()
                    .iter()
                    .map(|&v| Ema {
                        value: (!v.is_nan()).then_some(v),
                    })
                    .collect()
            };
            let ch = dec(take("ema_channel")?);
            let sp = dec(take("ema_spatial")?);
            let ready = take("ready")?.item() != 0.0;
            if ch.len() != s.ema_channel.len() || sp.len() != s.ema_spatial.len() {
                return Err(Error::Schema(format!(
                    "search registers of {site} do not match"
                )));
            }
            *s = SiteSearch {
                ema_channel: ch,
                ema_spatial: sp,
                ready,
            };
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.export_params().save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_params(&ParamStore::load(path)?)
    }

    /// Applies batch-norm statistics, register updates and threshold
    /// initializations recorded by a training forward pass.
    pub fn commit(&mut self, pending: Pending) -> Result<()> {
        for (prefix, stats) in pending.bn {
            for (suffix, batch) in [("mean", &stats.mean), ("var", &stats.var)] {
                let run = self.params.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, b) in run.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
        for (name, v) in pending.thresholds {
            *self.params.get_mut(&name)? = Tensor::scalar(v);
        }
        for (site, s) in pending.search {
            self.search.insert(site, s);
        }
        Ok(())
    }

    /// Replaces every batch-norm running mean and variance by the plain
    /// average of the batch statistics over `batches`, computed in train mode.
    /// The momentum average lags far behind on short runs, and the cubic
    /// non-local term makes activations drift quickly, so evaluation uses
    /// these re-estimated statistics instead.
    pub fn recalibrate_bn(&mut self, batches: impl IntoIterator<Item = Tensor>) -> Result<()> {
        let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut count = 0usize;
        for x in batches {
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, x, Phase::Train)?;
            for (prefix, stats) in fwd.pending.bn {
                let entry = sums
                    .entry(prefix)
                    .or_insert_with(|| (vec![0.0; stats.mean.len()], vec![0.0; stats.var.len()]));
                entry
                    .0
                    .iter_mut()
                    .zip(&stats.mean)
                    .for_each(|(s, v)| *s += v);
                entry
                    .1
                    .iter_mut()
                    .zip(&stats.var)
                    .for_each(|(s, v)| *s += v);
            }
            count += 1;
        }
        if count == 0 {
            return Ok(());
        }
        for (prefix, (mean, var)) in sums {
            for (suffix, sum) in [("mean", mean), ("var", var)] {
                let run = self.params.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, s) in run.data_mut().iter_mut().zip(sum) {
                    *r = s / count as f64;
                }
            }
        }
        Ok(())
    }

    /// Builds the forward graph for a batch `(N, H, W, C)`.
    pub fn forward(&self, g: &mut Graph, x: Tensor, phase: Phase) -> Result<Forward> {
        let InputShape { h, w, c } = self.spec.input;
        if x.rank() != 4 || x.shape()[1..] != [h, w, c] {
            return Err(Error::Config(format!(
                "input batch {:?} does not match network input {h}x{w}x{c}",
                x.shape()
            )));
        }
        let mut cx = Ctx {
            net: self,
            g,
            phase,
            leaves: BTreeMap::new(),
            pending: Pending::default(),
            cost_terms: Vec::new(),
            gates: Vec::new(),
        };
        let x = cx.g.constant(x);
        let stem_w = cx.leaf("stem.w")?;
        let mut hcur = cx.g.conv2d(x, stem_w, self.spec.stem.stride)?;
        hcur = cx.bn("stem.bn", hcur)?;
        hcur = cx.g.relu6(hcur);
        for k in 0..self.spec.blocks.len() {
            hcur = cx.block(k, hcur)?;
        }
        let pooled = cx.g.global_avg_pool(hcur)?;
        let (hw, hb) = (cx.leaf("head.w")?, cx.leaf("head.b")?);
        let logits = cx.g.linear(pooled, hw, hb)?;
        Ok(Forward {
            logits,
            params: cx.leaves,
            cost_terms: cx.cost_terms,
            gates: cx.gates,
            pending: cx.pending,
        })
    }

    /// Inputs of the architecture derivation for every site (search mode only).
    pub fn snapshots(&self) -> Result<Vec<LocationSnapshot>> {
        self.spec
            .site_names()
            .into_iter()
            .map(|site| {
                let s = self
                    .search
                    .get(&site)
                    .ok_or_else(|| Error::Config(format!("site {site} is not in search mode")))?;
                let t = |which| -> Result<f64> {
                    Ok(self.params.get(&threshold_name(&site, which))?.item())
                };
                Ok(LocationSnapshot {
                    wd_norm_sq: self.params.get(&wd_name(&site))?.sum_squares(),
                    t_insert: t("insert")?,
                    t_channel: t("channel")?,
                    t_spatial: t("spatial")?,
                    ema_channel: s.ema_channel.clone(),
                    ema_spatial: s.ema_spatial.clone(),
                    site,
                })
            })
            .collect()
    }

    pub fn derive(&self, meta: ArchMeta) -> Result<ArchDescription> {
        let cfg = self
            .search_cfg
            .as_ref()
            .ok_or_else(|| Error::Config("network has no search sites".into()))?;
        derive_architecture(&self.snapshots()?, &cfg.candidates, &self.spec, meta)
    }
}

struct Ctx<'a> {
    net: &'a Network,
    g: &'a mut Graph,
    phase: Phase,
    leaves: BTreeMap<String, NodeId>,
    pending: Pending,
    cost_terms: Vec<LocationCost>,
    gates: Vec<(String, f64)>,
}

impl Ctx<'_> {
    fn leaf_with(&mut self, name: &str, value: Option<f64>) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let t = match value {
            Some(v) => Tensor::scalar(v),
            None => self.net.params.get(name)?.clone(),
        };
        let id = match self.phase {
            Phase::Train => self.g.param(t),
            Phase::Eval => self.g.constant(t),
        };
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    fn leaf(&mut self, name: &str) -> Result<NodeId> {
        self.leaf_with(name, None)
    }

    fn bn(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.leaf(&format!("{prefix}.gamma"))?;
        let beta = self.leaf(&format!("{prefix}.beta"))?;
        match self.phase {
            Phase::Train => {
                let (y, stats) = self.g.batch_norm(x, gamma, beta, BnMode::Train)?;
                self.pending
                    .bn
                    .push((prefix.to_string(), stats.expect("train mode")));
                Ok(y)
            }
            Phase::Eval => {
                let p = &self.net.params;
                let (mean, var) = (
                    p.get(&format!("{prefix}.mean"))?,
                    p.get(&format!("{prefix}.var"))?,
                );
                let (y, _) = self.g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )?;
                Ok(y)
            }
        }
    }

    fn block(&mut self, k: usize, x: NodeId) -> Result<NodeId> {
        let b = &self.net.spec.blocks[k];
        let p = NetworkSpec::site_name(k);
        let mut h = x;
        if b.expansion != 1 {
            let w = self.leaf(&format!("{p}.expand.w"))?;
            h = self.g.conv1x1(h, w, None)?;
            h = self.bn(&format!("{p}.expand.bn"), h)?;
            h = self.g.relu6(h);
        }
        let w = self.leaf(&format!("{p}.dw.w"))?;
        h = self.g.depthwise_conv(h, w, b.stride)?;
        h = self.bn(&format!("{p}.dw.bn"), h)?;
        h = self.g.relu6(h);
        let w = self.leaf(&format!("{p}.project.w"))?;
        h = self.g.conv1x1(h, w, None)?;
        h = self.bn(&format!("{p}.project.bn"), h)?;
        h = match &self.net.sites[k] {
            SiteMode::Plain => h,
            SiteMode::LightNl(cfg) => {
                let wd = self.leaf(&wd_name(&p))?;
                lightnl_block(self.g, h, wd, cfg)?
            }
            SiteMode::Search => self.search_site(&p, h)?,
        };
        if b.has_residual() {
            h = self.g.add(h, x)?;
        }
        Ok(h)
    }

    fn search_site(&mut self, site: &str, x: NodeId) -> Result<NodeId> {
        let cfg = self
            .net
            .search_cfg
            .as_ref()
            .expect("search sites imply a config");
        let cset = &cfg.candidates;
        let mut state = self.net.search[site].clone();
        let train = self.phase == Phase::Train;
        let needs_batch = train || !state.ready || ema_values(&state.ema_channel).is_none();
        let batch = if needs_batch {
            Some(candidate_distances(self.g.value(x), cset)?)
        } else {
            None
        };

        let blend = |regs: &mut [Ema], d: &[f64]| {
            for (r, &v) in regs.iter_mut().zip(d) {
                r.update(v, cfg.ema_momentum);
            }
        };
        let current = |regs: &[Ema], d: Option<&Vec<f64>>| -> Vec<f64> {
            ema_values(regs).unwrap_or_else(|| d.expect("batch distances").clone())
        };
        let (dc, ds) = if train && cfg.ema_before_select {
            let (bc, bs) = batch.as_ref().expect("train");
            blend(&mut state.ema_channel, bc);
            blend(&mut state.ema_spatial, bs);
            (
                current(&state.ema_channel, None),
                current(&state.ema_spatial, None),
            )
        } else {
            let sel = (
                current(&state.ema_channel, batch.as_ref().map(|b| &b.0)),
                current(&state.ema_spatial, batch.as_ref().map(|b| &b.1)),
            );
            if train {
                let (bc, bs) = batch.as_ref().expect("train");
                blend(&mut state.ema_channel, bc);
                blend(&mut state.ema_spatial, bs);
            }
            sel
        };

        let (tc_name, ts_name) = (
            threshold_name(site, "channel"),
            threshold_name(site, "spatial"),
        );
        let (t_c, t_s) = if state.ready {
            (self.leaf(&tc_name)?, self.leaf(&ts_name)?)
        } else {
            let (vc, vs) = (midpoint(&dc), midpoint(&ds));
            if train {
                state.ready = true;
                self.pending.thresholds.push((tc_name.clone(), vc));
                self.pending.thresholds.push((ts_name.clone(), vs));
            }
            (
                self.leaf_with(&tc_name, Some(vc))?,
                self.leaf_with(&ts_name, Some(vs))?,
            )
        };
        if train {
            self.pending.search.push((site.to_string(), state));
        }

        let w_c = chain_weights(self.g, t_c, &dc, cfg.tau, GateMode::Hard)?;
        let w_s = chain_weights(self.g, t_s, &ds, cfg.tau, GateMode::Hard)?;
        let mut per_stride = Vec::with_capacity(cset.strides.len());
        for j in 0..cset.strides.len() {
            let cands = (0..cset.ratios.len())
                .map(|i| nl_compact(self.g, x, &cset.config(i, j)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            per_stride.push(self.g.weighted_sum(w_c, &cands)?);
        }
        let y = self.g.weighted_sum(w_s, &per_stride)?;

        let wd = self.leaf(&wd_name(site))?;
        let t_i = self.leaf(&threshold_name(site, "insert"))?;
        let norm = self.g.sum_squares(wd);
        let gate = insert_indicator(self.g, norm, t_i, cfg.tau, GateMode::Hard)?;
        self.gates
            .push((site.to_string(), self.g.value(gate).item()));
        let gated = self.g.mul_scalar(wd, gate)?;
        let z = depthwise_wrapper(self.g, x, y, gated)?;

        let [_, h, w, c] = *self.g.shape(x) else {
            unreachable!("feature map")
        };
        let insert = insert_indicator(self.g, norm, t_i, cfg.tau, GateMode::Relaxed)?;
        let channel = chain_weights(self.g, t_c, &dc, cfg.tau, GateMode::Relaxed)?;
        let spatial = chain_weights(self.g, t_s, &ds, cfg.tau, GateMode::Relaxed)?;
        self.cost_terms.push(LocationCost {
            insert,
            channel,
            spatial,
            costs: cset.cost_table(h, w, c)?,
        });
        Ok(z)
    }
}

/// Middle of the range spanned by `d`.
fn midpoint(d: &[f64]) -> f64 {
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (lo + hi)
}
