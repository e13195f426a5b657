//! Non-local operators and their residual wrappers.
//!
//! Every operator computes `y = (1/C(x)) · L · Mᵀ · R` per sample, where the
//! three matrices are position-by-channel views of (possibly transformed and
//! downsampled) features. The compact form uses
//! `L = x_c` (all positions, channel prefix), `M = x_sc` (strided positions,
//! channel prefix) and `R = x_s` (strided positions, all channels).

use serde::{Deserialize, Serialize};

use crate::tensor::{prefix_channels, Graph, NodeId, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the number of attended (downsampled) positions.
    #[default]
    PositionCount,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlConfig {
    pub channel_ratio: f64,
    pub spatial_stride: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for NlConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl NlConfig {
    pub fn new(channel_ratio: f64, spatial_stride: usize) -> Self {
        NlConfig {
            channel_ratio,
            spatial_stride,
            normalization: Normalization::PositionCount,
        }
    }

    /// No downsampling at all.
    pub fn identity() -> Self {
        Self::new(1.0, 1)
    }

    /// Default compactness for a site of spatial size `h`: a quarter of the
    /// channels, and stride 2 on maps larger than 14x14.
    pub fn for_site(h: usize) -> Self {
        Self::new(0.25, if h > 14 { 2 } else { 1 })
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = n;
        self
    }

    /// Checks the config against a feature map of `channels` channels and
    /// returns the number of kept channels.
    pub fn reduced_channels(&self, channels: usize) -> Result<usize> {
        if self.spatial_stride == 0 {
            return Err(TensorError::Invalid("spatial stride must be >= 1".into()));
        }
        prefix_channels(self.channel_ratio, channels)
    }

    pub fn reduced_positions(&self, h: usize, w: usize) -> usize {
        h.div_ceil(self.spatial_stride) * w.div_ceil(self.spatial_stride)
    }
}

// ----------------------------------------------------------------------
// Association order
// ----------------------------------------------------------------------

/// Dimensions of the chain `(P x C_r) · (P_s x C_r)ᵀ · (P_s x C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainDims {
    pub p: usize,
    pub ps: usize,
    pub cr: usize,
    pub c: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssocOrder {
    /// `(L Mᵀ) R`: materializes the `P x P_s` affinity.
    LeftFirst,
    /// `L (Mᵀ R)`: materializes a `C_r x C` summary.
    RightFirst,
}

impl AssocOrder {
    pub fn cost(self, d: ChainDims) -> u64 {
        let (p, ps, cr, c) = (d.p as u64, d.ps as u64, d.cr as u64, d.c as u64);
        match self {
            AssocOrder::LeftFirst => p * ps * cr + p * ps * c,
            AssocOrder::RightFirst => ps * cr * c + p * cr * c,
        }
    }
}

/// Cheaper evaluation order for the chain; ties go to right-first.
pub fn choose_assoc_order(d: ChainDims) -> AssocOrder {
    if AssocOrder::LeftFirst.cost(d) < AssocOrder::RightFirst.cost(d) {
        AssocOrder::LeftFirst
    } else {
        AssocOrder::RightFirst
    }
}

/// Per-sample `L · Mᵀ · R`, optionally divided by the row count of `M`.
/// Inputs are `(N, P, C_r)`, `(N, P_s, C_r)`, `(N, P_s, C)`.
pub fn affinity_chain(
    g: &mut Graph,
    left: NodeId,
    mid: NodeId,
    right: NodeId,
    order: AssocOrder,
    normalization: Normalization,
) -> Result<NodeId> {
    let y = match order {
        AssocOrder::LeftFirst => {
            let a = g.bmm(left, mid, false, true)?;
            g.bmm(a, right, false, false)?
        }
        AssocOrder::RightFirst => {
            let b = g.bmm(mid, right, true, false)?;
            g.bmm(left, b, false, false)?
        }
    };
    let ps = g.shape(mid)[1];
    Ok(match normalization {
        Normalization::PositionCount => g.scale(y, 1.0 / ps as f64),
        Normalization::None => y,
    })
}

// ----------------------------------------------------------------------
// Compact features
// ----------------------------------------------------------------------

/// `(N, P, C_r)`, `(N, P_s, C_r)` and `(N, P_s, C)` views of a feature map.
#[derive(Clone, Copy, Debug)]
pub struct CompactFeatures {
    pub x_c: NodeId,
    pub x_sc: NodeId,
    pub x_s: NodeId,
    pub dims: ChainDims,
}

fn nhwc(g: &Graph, x: NodeId) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(x) {
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(TensorError::Invalid(format!(
            "expected an (N,H,W,C) feature map, got {s:?}"
        ))),
    }
}

pub fn extract_compact(g: &mut Graph, x: NodeId, cfg: &NlConfig) -> Result<CompactFeatures> {
    let (n, h, w, c) = nhwc(g, x)?;
    let cr = cfg.reduced_channels(c)?;
    let s = cfg.spatial_stride;
    let (p, ps) = (h * w, cfg.reduced_positions(h, w));

    let flat = g.reshape(x, &[n, p, c])?;
    let x_c = if cr == c {
        flat
    } else {
        g.slice_last(flat, 0, cr)?
    };
    let x_s = if s == 1 {
        flat
    } else {
        let sub = g.spatial_subsample(x, s)?;
        g.reshape(sub, &[n, ps, c])?
    };
    let x_sc = if cr == c {
        x_s
    } else {
        g.slice_last(x_s, 0, cr)?
    };
    Ok(CompactFeatures {
        x_c,
        x_sc,
        x_s,
        dims: ChainDims { p, ps, cr, c },
    })
}

// ----------------------------------------------------------------------
// Operators
// ----------------------------------------------------------------------

/// Compact non-local operation, evaluated in the cheaper association order.
pub fn nl_compact(g: &mut Graph, x: NodeId, cfg: &NlConfig) -> Result<NodeId> {
    nl_compact_with_order(g, x, cfg, None)
}

/// [`nl_compact`] with an optional forced association order.
pub fn nl_compact_with_order(
    g: &mut Graph,
    x: NodeId,
    cfg: &NlConfig,
    order: Option<AssocOrder>,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let f = extract_compact(g, x, cfg)?;
    let order = order.unwrap_or_else(|| choose_assoc_order(f.dims));
    let y = affinity_chain(g, f.x_c, f.x_sc, f.x_s, order, cfg.normalization)?;
    g.reshape(y, &shape)
}

/// `(1/C) x xᵀ x`.
pub fn nl_transformless(g: &mut Graph, x: NodeId, normalization: Normalization) -> Result<NodeId> {
    nl_compact(
        g,
        x,
        &NlConfig::identity().with_normalization(normalization),
    )
}

fn full_chain(
    g: &mut Graph,
    shape: &[usize],
    left: NodeId,
    mid: NodeId,
    right: NodeId,
    order: Option<AssocOrder>,
    normalization: Normalization,
) -> Result<NodeId> {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let p = h * w;
    let l = g.reshape(left, &[n, p, c])?;
    let m = if mid == left {
        l
    } else {
        g.reshape(mid, &[n, p, c])?
    };
    let r = if right == left {
        l
    } else if right == mid {
        m
    } else {
        g.reshape(right, &[n, p, c])?
    };
    let order = order.unwrap_or_else(|| choose_assoc_order(ChainDims { p, ps: p, cr: c, c }));
    let y = affinity_chain(g, l, m, r, order, normalization)?;
    g.reshape(y, shape)
}

/// `(1/C) g(x) g(x)ᵀ g(x)` with a single shared 1x1 transform.
pub fn nl_shared(
    g: &mut Graph,
    x: NodeId,
    g_w: NodeId,
    normalization: Normalization,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    nhwc(g, x)?;
    square_on(g, "nl_shared", g_w, shape[3])?;
    let gx = g.conv1x1(x, g_w, None)?;
    full_chain(g, &shape, gx, gx, gx, None, normalization)
}

/// Parameters of the full non-local block: two 1x1 transforms and the output map.
#[derive(Clone, Copy, Debug)]
pub struct FullNlParams {
    pub theta: NodeId,
    pub g: NodeId,
    pub wz: NodeId,
}

/// `z = W_z · (1/C) θ(x) θ(x)ᵀ g(x) + x`.
pub fn nl_full(
    g: &mut Graph,
    x: NodeId,
    p: &FullNlParams,
    normalization: Normalization,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    nhwc(g, x)?;
    for w in [p.theta, p.g, p.wz] {
        square_on(g, "nl_full", w, shape[3])?;
    }
    let th = g.conv1x1(x, p.theta, None)?;
    let gx = g.conv1x1(x, p.g, None)?;
    let y = full_chain(g, &shape, th, th, gx, None, normalization)?;
    let wy = g.conv1x1(y, p.wz, None)?;
    g.add(wy, x)
}

/// `z = DepthwiseConv3x3(nl_compact(x), wd) + x`.
pub fn lightnl_block(g: &mut Graph, x: NodeId, wd: NodeId, cfg: &NlConfig) -> Result<NodeId> {
    let y = nl_compact(g, x, cfg)?;
    depthwise_wrapper(g, x, y, wd)
}

/// `z = DepthwiseConv3x3(y, wd) + x`.
pub fn depthwise_wrapper(g: &mut Graph, x: NodeId, y: NodeId, wd: NodeId) -> Result<NodeId> {
    let dy = g.depthwise_conv3x3(y, wd)?;
    g.add(dy, x)
}

fn square_on(g: &Graph, op: &'static str, w: NodeId, c: usize) -> Result<()> {
    if g.shape(w) != [c, c] {
        return Err(TensorError::Shape {
            op,
            lhs: g.shape(w).to_vec(),
            rhs: vec![c, c],
        });
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Variant catalogue
// ----------------------------------------------------------------------

/// Rungs of the simplification ladder, from the original block to LightNL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlVariant {
    /// Separate θ, φ, g transforms; the affinity is materialized (left-first),
    /// as a softmax over it would force.
    Original,
    /// Shared θ for both affinity factors, separate g, 1x1 output map.
    Full,
    /// One shared transform, 1x1 output map.
    Shared,
    /// No transforms, 1x1 output map.
    TransformLess,
    /// Compact features, 1x1 output map.
    Compact,
    /// Compact features, depthwise 3x3 output map.
    #[serde(rename = "lightnl")]
    LightNl,
}

impl NlVariant {
    pub const ALL: [NlVariant; 6] = [
        NlVariant::Original,
        NlVariant::Full,
        NlVariant::Shared,
        NlVariant::TransformLess,
        NlVariant::Compact,
        NlVariant::LightNl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NlVariant::Original => "original",
            NlVariant::Full => "full",
            NlVariant::Shared => "shared",
            NlVariant::TransformLess => "transform_less",
            NlVariant::Compact => "compact",
            NlVariant::LightNl => "lightnl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Number of `C x C` transforms applied to the input.
    pub fn input_transforms(self) -> usize {
        match self {
            NlVariant::Original => 3,
            NlVariant::Full => 2,
            NlVariant::Shared => 1,
            _ => 0,
        }
    }

    /// Whether the variant uses the downsampling in its config.
    pub fn is_compact(self) -> bool {
        matches!(self, NlVariant::Compact | NlVariant::LightNl)
    }
}

/// Weights for [`apply_variant`]. Transforms are `(C, C)`, `wd` is `(3, 3, C)`.
#[derive(Clone, Debug, Default)]
pub struct VariantParams {
    pub transforms: Vec<NodeId>,
    pub wz: Option<NodeId>,
    pub wd: Option<NodeId>,
}

/// Evaluates any ladder variant including its residual wrapper.
pub fn apply_variant(
    g: &mut Graph,
    variant: NlVariant,
    x: NodeId,
    params: &VariantParams,
    cfg: &NlConfig,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let (_, _, _, c) = nhwc(g, x)?;
    if params.transforms.len() != variant.input_transforms() {
        return Err(TensorError::Invalid(format!(
            "{} needs {} transforms, got {}",
            variant.name(),
            variant.input_transforms(),
            params.transforms.len()
        )));
    }
    let mut t = Vec::with_capacity(3);
    for &w in &params.transforms {
        square_on(g, "apply_variant", w, c)?;
        t.push(g.conv1x1(x, w, None)?);
    }
    let norm = cfg.normalization;
    let y = match variant {
        NlVariant::Original => full_chain(
            g,
            &shape,
            t[0],
            t[1],
            t[2],
            Some(AssocOrder::LeftFirst),
            norm,
        )?,
        NlVariant::Full => full_chain(g, &shape, t[0], t[0], t[1], None, norm)?,
        NlVariant::Shared => full_chain(g, &shape, t[0], t[0], t[0], None, norm)?,
        NlVariant::TransformLess => nl_transformless(g, x, norm)?,
        NlVariant::Compact | NlVariant::LightNl => nl_compact(g, x, cfg)?,
    };
    if variant == NlVariant::LightNl {
        let wd = params
            .wd
            .ok_or_else(|| TensorError::Invalid("lightnl needs a depthwise kernel".into()))?;
        depthwise_wrapper(g, x, y, wd)
    } else {
        let wz = params.wz.ok_or_else(|| {
            TensorError::Invalid(format!("{} needs an output map", variant.name()))
        })?;
        square_on(g, "apply_variant", wz, c)?;
        let wy = g.conv1x1(y, wz, None)?;
        g.add(wy, x)
    }
}
