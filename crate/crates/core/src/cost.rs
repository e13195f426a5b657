//! Multiply-add accounting. One multiply-add counts as one FLOP; normalization
//! divisions and residual additions are not counted.

use serde::{Deserialize, Serialize};

use crate::nl::{choose_assoc_order, AssocOrder, ChainDims, NlConfig, NlVariant};
use crate::tensor::{Graph, NodeId, Result, Tensor, TensorError};

pub fn flops_matmul(n: usize, m: usize, k: usize) -> u64 {
    (n * m * k) as u64
}

pub fn flops_conv1x1(h: usize, w: usize, c_in: usize, c_out: usize) -> u64 {
    (h * w * c_in * c_out) as u64
}

pub fn flops_dwconv3x3(h: usize, w: usize, c: usize) -> u64 {
    flops_dwconv(h, w, c, 3)
}

/// Depthwise `k x k` convolution producing an `h_out x w_out x c` map.
pub fn flops_dwconv(h_out: usize, w_out: usize, c: usize, k: usize) -> u64 {
    (h_out * w_out * c * k * k) as u64
}

/// Dense `k x k` convolution producing an `h_out x w_out x c_out` map.
pub fn flops_conv2d(h_out: usize, w_out: usize, c_in: usize, c_out: usize, k: usize) -> u64 {
    (k * k * h_out * w_out * c_in * c_out) as u64
}

/// Per-sample chain dimensions of a variant at an `h x w x c` site.
pub fn chain_dims(
    variant: NlVariant,
    h: usize,
    w: usize,
    c: usize,
    cfg: &NlConfig,
) -> Result<ChainDims> {
    if variant.is_compact() {
        Ok(ChainDims {
            p: h * w,
            ps: cfg.reduced_positions(h, w),
            cr: cfg.reduced_channels(c)?,
            c,
        })
    } else {
        Ok(ChainDims {
            p: h * w,
            ps: h * w,
            cr: c,
            c,
        })
    }
}

/// Multiply-adds of the compact affinity chain alone, in its cheaper order.
pub fn flops_nl_chain(h: usize, w: usize, c: usize, cfg: &NlConfig) -> Result<u64> {
    let d = chain_dims(NlVariant::Compact, h, w, c, cfg)?;
    Ok(choose_assoc_order(d).cost(d))
}

/// Multiply-adds of one variant including its input transforms and wrapper.
pub fn flops_nl_variant(
    variant: NlVariant,
    shape: (usize, usize, usize),
    cfg: &NlConfig,
) -> Result<u64> {
    let (h, w, c) = shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(TensorError::Invalid(format!(
            "non-positive site shape {shape:?}"
        )));
    }
    let d = chain_dims(variant, h, w, c, cfg)?;
    let order = match variant {
        NlVariant::Original => AssocOrder::LeftFirst,
        _ => choose_assoc_order(d),
    };
    let transforms = variant.input_transforms() as u64 * flops_conv1x1(h, w, c, c);
    let wrapper = match variant {
        NlVariant::LightNl => flops_dwconv3x3(h, w, c),
        _ => flops_conv1x1(h, w, c, c),
    };
    Ok(transforms + order.cost(d) + wrapper)
}

// ----------------------------------------------------------------------
// Reports
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub site: String,
    pub op: String,
    pub madds: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub entries: Vec<FlopsEntry>,
    pub total: u64,
}

impl FlopsReport {
    pub fn push(&mut self, site: impl Into<String>, op: impl Into<String>, madds: u64) {
        self.entries.push(FlopsEntry {
            site: site.into(),
            op: op.into(),
            madds,
        });
        self.total += madds;
    }

    /// Sum over entries whose site starts with `prefix`.
    pub fn site_total(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.site.starts_with(prefix))
            .map(|e| e.madds)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("site,op,madds\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.site, e.op, e.madds));
        }
        s.push_str(&format!("total,,{}\n", self.total));
        s
    }
}

/// Feature dimensions of the candidate sites of a backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub name: String,
    pub sites: Vec<SiteShape>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteShape {
    pub site: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

const MOBILENETV2_224: &str = include_str!("../data/mobilenetv2_224.json");

impl ShapeSpec {
    /// Block outputs of MobileNetV2 (width 1.0) at 224x224 input.
    pub fn mobilenetv2_224() -> Self {
        Self::from_json(MOBILENETV2_224).expect("bundled shape file is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ShapeSpec =
            serde_json::from_str(s).map_err(|e| TensorError::Format(format!("shape spec: {e}")))?;
        if spec.sites.is_empty() {
            return Err(TensorError::Format("shape spec has no sites".into()));
        }
        if let Some(bad) = spec.sites.iter().find(|s| s.h == 0 || s.w == 0 || s.c == 0) {
            return Err(TensorError::Format(format!(
                "site {} has a zero dimension",
                bad.site
            )));
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LadderRow {
    pub variant: NlVariant,
    pub delta_madds: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LadderReport {
    pub shapes: String,
    pub rows: Vec<LadderRow>,
    /// Original block cost over LightNL cost.
    pub ratio: f64,
    pub strictly_decreasing: bool,
}

impl LadderReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,delta_madds\n");
        for r in &self.rows {
            s.push_str(&format!("{},{}\n", r.variant.name(), r.delta_madds));
        }
        s.push_str(&format!("ratio,{}\n", self.ratio));
        s
    }
}

/// Added cost of each variant when inserted at every site, with the default
/// compactness per site (a quarter of the channels, stride 2 above 14x14).
pub fn table1_ladder(shapes: &ShapeSpec) -> Result<LadderReport> {
    let mut rows = Vec::new();
    for variant in NlVariant::ALL {
        let mut delta = 0;
        for s in &shapes.sites {
            delta += flops_nl_variant(variant, (s.h, s.w, s.c), &NlConfig::for_site(s.h))?;
        }
        rows.push(LadderRow {
            variant,
            delta_madds: delta,
        });
    }
    let strictly_decreasing = rows.windows(2).all(|w| w[0].delta_madds > w[1].delta_madds);
    let ratio = rows[0].delta_madds as f64 / rows[rows.len() - 1].delta_madds as f64;
    Ok(LadderReport {
        shapes: shapes.name.clone(),
        rows,
        ratio,
        strictly_decreasing,
    })
}

// ----------------------------------------------------------------------
// Differentiable expected cost
// ----------------------------------------------------------------------

/// Relaxed decision weights of one candidate location.
#[derive(Clone, Debug)]
pub struct LocationCost {
    /// Scalar probability that a block is inserted.
    pub insert: NodeId,
    /// `[n]` weights over channel candidates.
    pub channel: NodeId,
    /// `[m]` weights over spatial candidates.
    pub spatial: NodeId,
    /// `n x m` added multiply-adds of each (channel, spatial) choice.
    pub costs: Vec<Vec<u64>>,
}

/// `backbone + Σ_loc insert · Σ_ij channel_i · spatial_j · costs_ij`.
pub fn expected_cost(g: &mut Graph, backbone: u64, locations: &[LocationCost]) -> Result<NodeId> {
    let mut total = g.constant(Tensor::scalar(backbone as f64));
    for loc in locations {
        let n = loc.costs.len();
        let m = loc.costs.first().map_or(0, Vec::len);
        if n == 0 || m == 0 || loc.costs.iter().any(|r| r.len() != m) {
            return Err(TensorError::Invalid("ragged or empty cost table".into()));
        }
        if g.shape(loc.channel) != [n] || g.shape(loc.spatial) != [m] {
            return Err(TensorError::Shape {
                op: "expected_cost",
                lhs: vec![g.shape(loc.channel)[0], g.shape(loc.spatial)[0]],
                rhs: vec![n, m],
            });
        }
        let table = Tensor::new(
            vec![n, m],
            loc.costs.iter().flatten().map(|&c| c as f64).collect(),
        )?;
        let table = g.constant(table);
        let pc = g.reshape(loc.channel, &[1, n])?;
        let row = g.matmul(pc, table)?;
        let ps = g.reshape(loc.spatial, &[1, m])?;
        let weighted = g.mul(row, ps)?;
        let site = g.sum(weighted);
        let gated = g.mul_scalar(site, loc.insert)?;
        total = g.add(total, gated)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_counts() {
        assert_eq!(flops_matmul(16, 8, 16), 2048);
        assert_eq!(flops_matmul(1, 1, 1), 1);
        assert_eq!(flops_dwconv3x3(4, 4, 8), 1152);
        assert_eq!(flops_conv1x1(4, 4, 8, 8), 1024);
        for c_out in 1..40 {
            let cheaper = flops_dwconv3x3(4, 4, 8) < flops_conv1x1(4, 4, 8, c_out);
            assert_eq!(cheaper, c_out > 9);
        }
    }

    #[test]
    fn transformless_chain_example() {
        // chain alone is min(4096, 2048); the variant adds its 1x1 output map
        let cfg = NlConfig::identity();
        let total = flops_nl_variant(NlVariant::TransformLess, (4, 4, 8), &cfg).unwrap();
        assert_eq!(total - flops_conv1x1(4, 4, 8, 8), 2048);
    }

    #[test]
    fn lightnl_is_compact_chain_plus_depthwise() {
        let cfg = NlConfig::new(0.25, 2);
        let light = flops_nl_variant(NlVariant::LightNl, (8, 8, 16), &cfg).unwrap();
        assert_eq!(
            light,
            flops_nl_chain(8, 8, 16, &cfg).unwrap() + flops_dwconv3x3(8, 8, 16)
        );
    }

    #[test]
    fn bundled_shapes_load() {
        let s = ShapeSpec::mobilenetv2_224();
        assert_eq!(s.sites.len(), 17);
        assert_eq!((s.sites[0].h, s.sites[0].c), (112, 16));
        assert_eq!((s.sites[16].h, s.sites[16].c), (7, 320));
    }

    #[test]
    fn report_csv_has_total() {
        let mut r = FlopsReport::default();
        r.push("stem", "conv2d", 10);
        r.push("block1", "conv1x1", 5);
        assert_eq!(r.total, 15);
        assert!(r.to_csv().ends_with("total,,15\n"));
    }
}
