//! Verification suites: finite-difference gradient checks over every op and
//! numerical equivalences between the non-local formulations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::{expected_cost, flops_nl_variant, LocationCost};
use crate::nl::{
    apply_variant, lightnl_block, nl_compact, nl_compact_with_order, nl_full, nl_shared,
    nl_transformless, AssocOrder, FullNlParams, NlConfig, NlVariant, Normalization, VariantParams,
};
use crate::search::{affinity_with_reuse, chain_weights, gate_insert, insert_indicator, GateMode};
use crate::tensor::gradcheck::{grad_check, GradCheckReport, DEFAULT_TOLERANCE};
use crate::tensor::{prefix_channels, BnMode, Graph, NodeId, Tensor, TensorError};
use crate::Result;

type TResult<T> = crate::tensor::Result<T>;
type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> TResult<NodeId>>;

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform samples kept at least `margin` away from every kink.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64]) -> Tensor {
    const MARGIN: f64 = 1e-3;
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > MARGIN) {
            break v;
        }
    })
}

fn lift<T>(r: Result<T>) -> TResult<T> {
    r.map_err(|e| match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    })
}

// ----------------------------------------------------------------------
// Gradient suite
// ----------------------------------------------------------------------

struct GradCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[NodeId]) -> TResult<NodeId> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng_for(seed, 1);
    let rng = &mut r;
    let fmap = |rng: &mut ChaCha8Rng, c: usize| uniform(rng, &[2, 5, 4, c], -1.0, 1.0);
    let mut cases = vec![
        case(
            "matmul",
            vec![
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[4, 5], -1.0, 1.0),
            ],
            |g, p| g.matmul(p[0], p[1]),
        ),
        case(
            "bmm",
            vec![
                uniform(rng, &[2, 4, 3], -1.0, 1.0),
                uniform(rng, &[2, 5, 4], -1.0, 1.0),
            ],
            |g, p| g.bmm(p[0], p[1], true, true),
        ),
        case(
            "reshape",
            vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)],
            |g, p| g.reshape(p[0], &[4, 6]),
        ),
        case(
            "transpose_2d",
            vec![uniform(rng, &[3, 5], -1.0, 1.0)],
            |g, p| g.transpose_2d(p[0]),
        ),
        case(
            "add",
            vec![
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[3, 4], -1.0, 1.0),
            ],
            |g, p| g.add(p[0], p[1]),
        ),
        case(
            "sub",
            vec![
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[3, 4], -1.0, 1.0),
            ],
            |g, p| g.sub(p[0], p[1]),
        ),
        case(
            "mul",
            vec![
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[3, 4], -1.0, 1.0),
            ],
            |g, p| g.mul(p[0], p[1]),
        ),
        case("scale", vec![uniform(rng, &[3, 4], -1.0, 1.0)], |g, p| {
            Ok(g.scale(p[0], -1.7))
        }),
        case(
            "mul_scalar",
            vec![
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[], -1.0, 1.0),
            ],
            |g, p| g.mul_scalar(p[0], p[1]),
        ),
        case(
            "relu6",
            vec![away_from(rng, &[4, 6], -2.0, 8.0, &[0.0, 6.0])],
            |g, p| Ok(g.relu6(p[0])),
        ),
        case("sigmoid", vec![uniform(rng, &[3, 4], -3.0, 3.0)], |g, p| {
            Ok(g.sigmoid(p[0]))
        }),
        case("ln", vec![uniform(rng, &[3, 4], 0.5, 3.0)], |g, p| {
            g.ln(p[0])
        }),
        case("sum", vec![uniform(rng, &[3, 4], -1.0, 1.0)], |g, p| {
            Ok(g.sum(p[0]))
        }),
        case(
            "sum_squares",
            vec![uniform(rng, &[3, 4], -1.0, 1.0)],
            |g, p| Ok(g.sum_squares(p[0])),
        ),
        case(
            "slice_last",
            vec![uniform(rng, &[2, 3, 6], -1.0, 1.0)],
            |g, p| g.slice_last(p[0], 1, 4),
        ),
        case("slice_channels_prefix", vec![fmap(rng, 8)], |g, p| {
            g.slice_channels_prefix(p[0], 0.25)
        }),
        case("spatial_subsample", vec![fmap(rng, 3)], |g, p| {
            g.spatial_subsample(p[0], 2)
        }),
        case(
            "conv1x1",
            vec![
                fmap(rng, 3),
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[4], -1.0, 1.0),
            ],
            |g, p| g.conv1x1(p[0], p[1], Some(p[2])),
        ),
        case(
            "linear",
            vec![
                uniform(rng, &[3, 5], -1.0, 1.0),
                uniform(rng, &[5, 2], -1.0, 1.0),
                uniform(rng, &[2], -1.0, 1.0),
            ],
            |g, p| g.linear(p[0], p[1], p[2]),
        ),
        case(
            "depthwise_conv3x3",
            vec![fmap(rng, 3), uniform(rng, &[3, 3, 3], -1.0, 1.0)],
            |g, p| g.depthwise_conv3x3(p[0], p[1]),
        ),
        case(
            "depthwise_conv_stride2",
            vec![fmap(rng, 3), uniform(rng, &[3, 3, 3], -1.0, 1.0)],
            |g, p| g.depthwise_conv(p[0], p[1], 2),
        ),
        case(
            "conv2d_stride2",
            vec![fmap(rng, 2), uniform(rng, &[3, 3, 2, 3], -1.0, 1.0)],
            |g, p| g.conv2d(p[0], p[1], 2),
        ),
        case(
            "batch_norm_train",
            vec![
                fmap(rng, 3),
                uniform(rng, &[3], 0.5, 1.5),
                uniform(rng, &[3], -0.5, 0.5),
            ],
            |g, p| Ok(g.batch_norm(p[0], p[1], p[2], BnMode::Train)?.0),
        ),
        case(
            "batch_norm_eval",
            vec![
                fmap(rng, 3),
                uniform(rng, &[3], 0.5, 1.5),
                uniform(rng, &[3], -0.5, 0.5),
            ],
            |g, p| {
                let (mean, var) = ([0.1, -0.2, 0.05], [0.8, 1.3, 0.4]);
                let mode = BnMode::Eval {
                    mean: &mean,
                    var: &var,
                };
                Ok(g.batch_norm(p[0], p[1], p[2], mode)?.0)
            },
        ),
        case("global_avg_pool", vec![fmap(rng, 3)], |g, p| {
            g.global_avg_pool(p[0])
        }),
        case(
            "softmax_cross_entropy",
            vec![uniform(rng, &[4, 5], -2.0, 2.0)],
            |g, p| g.softmax_cross_entropy(p[0], &[0, 3, 4, 1]),
        ),
        case(
            "weighted_sum",
            vec![
                uniform(rng, &[3], -1.0, 1.0),
                uniform(rng, &[2, 3], -1.0, 1.0),
                uniform(rng, &[2, 3], -1.0, 1.0),
                uniform(rng, &[2, 3], -1.0, 1.0),
            ],
            |g, p| g.weighted_sum(p[0], &p[1..4]),
        ),
    ];

    for (name, order) in [
        ("nl_compact_left_first", AssocOrder::LeftFirst),
        ("nl_compact_right_first", AssocOrder::RightFirst),
    ] {
        cases.push(case(name, vec![fmap(rng, 8)], move |g, p| {
            nl_compact_with_order(g, p[0], &NlConfig::new(0.5, 2), Some(order))
        }));
    }
    cases.push(case("nl_transformless", vec![fmap(rng, 4)], |g, p| {
        nl_transformless(g, p[0], Normalization::PositionCount)
    }));
    cases.push(case(
        "nl_shared",
        vec![fmap(rng, 4), uniform(rng, &[4, 4], -0.5, 0.5)],
        |g, p| nl_shared(g, p[0], p[1], Normalization::PositionCount),
    ));
    cases.push(case(
        "nl_full",
        vec![
            fmap(rng, 4),
            uniform(rng, &[4, 4], -0.5, 0.5),
            uniform(rng, &[4, 4], -0.5, 0.5),
            uniform(rng, &[4, 4], -0.5, 0.5),
        ],
        |g, p| {
            let params = FullNlParams {
                theta: p[1],
                g: p[2],
                wz: p[3],
            };
            nl_full(g, p[0], &params, Normalization::PositionCount)
        },
    ));
    cases.push(case(
        "lightnl_block",
        vec![fmap(rng, 8), uniform(rng, &[3, 3, 8], -0.5, 0.5)],
        |g, p| lightnl_block(g, p[0], p[1], &NlConfig::new(0.25, 2)),
    ));
    cases.push(case(
        "gate_insert_relaxed",
        vec![
            uniform(rng, &[3, 3, 2], -0.5, 0.5),
            uniform(rng, &[], 0.5, 1.5),
        ],
        |g, p| lift(gate_insert(g, p[0], p[1], 0.7, GateMode::Relaxed)).map(|(gated, _)| gated),
    ));
    cases.push(case(
        "insert_indicator_relaxed",
        vec![uniform(rng, &[], 0.0, 2.0), uniform(rng, &[], 0.0, 2.0)],
        |g, p| lift(insert_indicator(g, p[0], p[1], 0.5, GateMode::Relaxed)),
    ));
    cases.push(case(
        "chain_weights_relaxed",
        vec![uniform(rng, &[], 0.0, 1.0)],
        |g, p| {
            lift(chain_weights(
                g,
                p[0],
                &[0.2, 0.5, 0.9, 0.0],
                0.3,
                GateMode::Relaxed,
            ))
        },
    ));
    cases.push(case(
        "expected_cost",
        vec![
            uniform(rng, &[], 0.0, 1.0),
            uniform(rng, &[2], 0.0, 1.0),
            uniform(rng, &[3], 0.0, 1.0),
            uniform(rng, &[], 0.0, 1.0),
            uniform(rng, &[2], 0.0, 1.0),
            uniform(rng, &[3], 0.0, 1.0),
        ],
        |g, p| {
            let costs = vec![vec![100, 250, 900], vec![180, 500, 1700]];
            let locs = [
                LocationCost {
                    insert: p[0],
                    channel: p[1],
                    spatial: p[2],
                    costs: costs.clone(),
                },
                LocationCost {
                    insert: p[3],
                    channel: p[4],
                    spatial: p[5],
                    costs,
                },
            ];
            let cc = expected_cost(g, 5000, &locs)?;
            // scale to order one so the relative error is meaningful
            Ok(g.scale(cc, 1e-3))
        },
    ));
    cases.push(case(
        "expected_cost_from_thresholds",
        vec![
            uniform(rng, &[3, 3, 2], -0.5, 0.5),
            uniform(rng, &[], 0.5, 1.5),
            uniform(rng, &[], 0.1, 0.6),
            uniform(rng, &[], 0.1, 0.6),
        ],
        |g, p| {
            let (_, insert) = lift(gate_insert(g, p[0], p[1], 1.0, GateMode::Relaxed))?;
            let channel = lift(chain_weights(g, p[2], &[0.3, 0.0], 1.0, GateMode::Relaxed))?;
            let spatial = lift(chain_weights(g, p[3], &[0.4, 0.0], 1.0, GateMode::Relaxed))?;
            let loc = LocationCost {
                insert,
                channel,
                spatial,
                costs: vec![vec![300, 1000], vec![500, 1800]],
            };
            let cc = expected_cost(g, 4000, &[loc])?;
            g.ln(cc)
        },
    ));
    cases
}

/// Adds `out · f` where `f` has value 0 but a bogus unit derivative with
/// respect to `sum(out)`. The forward value is unchanged; the backward is not.
fn inject_fault(g: &mut Graph, out: NodeId) -> TResult<NodeId> {
    let s = g.sum(out);
    let f = g.surrogate(&[s], vec![0.0], vec![1.0])?;
    let f = g.reshape(f, &[])?;
    let extra = g.mul_scalar(out, f)?;
    g.add(out, extra)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuite {
    pub tolerance: f64,
    pub entries: Vec<GradCheckReport>,
}

impl GradSuite {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradCheckReport::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(GradCheckReport::max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Names of the registered gradient cases, in suite order.
pub fn grad_case_names() -> Vec<&'static str> {
    grad_cases(0).iter().map(|c| c.name).collect()
}

/// Runs every gradient case. `fault` names a case whose backward pass is
/// deliberately corrupted, to show that the suite catches wrong gradients.
pub fn grad_suite(seed: u64, tolerance: f64, fault: Option<&str>) -> Result<GradSuite> {
    let cases = grad_cases(seed);
    if let Some(f) = fault {
        if !cases.iter().any(|c| c.name == f) {
            return Err(crate::Error::Config(format!(
                "no gradient case named {f:?}"
            )));
        }
    }
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        let faulty = fault == Some(c.name);
        let build = &c.build;
        let report = grad_check(c.name, &c.inputs, tolerance, |g, p| {
            let out = build(g, p)?;
            if faulty {
                inject_fault(g, out)
            } else {
                Ok(out)
            }
        })?;
        entries.push(report);
    }
    Ok(GradSuite { tolerance, entries })
}

pub fn default_grad_suite() -> Result<GradSuite> {
    grad_suite(0, DEFAULT_TOLERANCE, None)
}

// ----------------------------------------------------------------------
// Equivalence suites
// ----------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EquivSuite {
    pub name: String,
    pub trials: usize,
    /// Largest relative deviation observed.
    pub max_deviation: f64,
    pub tolerance: f64,
    /// Trials that exceeded the tolerance or broke a counting invariant.
    pub failures: usize,
}

impl EquivSuite {
    fn new(name: &str, tolerance: f64) -> Self {
        EquivSuite {
            name: name.into(),
            trials: 0,
            max_deviation: 0.0,
            tolerance,
            failures: 0,
        }
    }

    fn record(&mut self, deviation: f64) {
        self.trials += 1;
        self.max_deviation = self.max_deviation.max(deviation);
        if !(deviation <= self.tolerance) {
            self.failures += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivReport {
    pub seed: u64,
    pub suites: Vec<EquivSuite>,
}

impl EquivReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(EquivSuite::passed)
    }
}

pub const ASSOC_TOLERANCE: f64 = 1e-10;
pub const REDUCTION_TOLERANCE: f64 = 1e-12;
pub const REUSE_TOLERANCE: f64 = 1e-10;

const RATIOS: [f64; 5] = [0.125, 0.25, 0.5, 0.75, 1.0];

fn random_map(rng: &mut ChaCha8Rng, max_hw: usize, c: usize) -> Tensor {
    let n = rng.random_range(1..=2);
    let h = rng.random_range(1..=max_hw);
    let w = rng.random_range(1..=max_hw);
    uniform(rng, &[n, h, w, c], -1.0, 1.0)
}

/// Left-first and right-first evaluation of the compact chain on random
/// maps with `H, W <= 8` and `C <= 16`.
pub fn associativity_suite(seed: u64, trials: usize) -> Result<EquivSuite> {
    let mut rng = rng_for(seed, 2);
    let mut suite = EquivSuite::new("associativity", ASSOC_TOLERANCE);
    for _ in 0..trials {
        let c = rng.random_range(1..=16);
        let x = random_map(&mut rng, 8, c);
        let ratio = loop {
            let r = RATIOS[rng.random_range(0..RATIOS.len())];
            if prefix_channels(r, c).is_ok() {
                break r;
            }
        };
        let norm = if rng.random_bool(0.5) {
            Normalization::PositionCount
        } else {
            Normalization::None
        };
        let cfg = NlConfig::new(ratio, rng.random_range(1..=3)).with_normalization(norm);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let left = nl_compact_with_order(&mut g, xn, &cfg, Some(AssocOrder::LeftFirst))?;
        let right = nl_compact_with_order(&mut g, xn, &cfg, Some(AssocOrder::RightFirst))?;
        suite.record(g.value(left).rel_diff(g.value(right)));
    }
    Ok(suite)
}

/// The transform-heavy forms collapse onto the transform-less one:
/// `nl_full` with identity transforms is it plus the input, `nl_shared` with
/// the identity and `nl_compact` without downsampling are it exactly.
pub fn reduction_suites(seed: u64, trials: usize) -> Result<Vec<EquivSuite>> {
    let mut rng = rng_for(seed, 3);
    let mut full = EquivSuite::new("reduction_full", REDUCTION_TOLERANCE);
    let mut shared = EquivSuite::new("reduction_shared", REDUCTION_TOLERANCE);
    let mut compact = EquivSuite::new("reduction_compact", REDUCTION_TOLERANCE);
    for _ in 0..trials {
        let c = rng.random_range(1..=16);
        let x = random_map(&mut rng, 8, c);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let eye = g.constant(Tensor::eye(c));
        let norm = Normalization::PositionCount;
        let base = nl_transformless(&mut g, xn, norm)?;
        let base_res = g.add(base, xn)?;

        let p = FullNlParams {
            theta: eye,
            g: eye,
            wz: eye,
        };
        let f = nl_full(&mut g, xn, &p, norm)?;
        full.record(g.value(f).rel_diff(g.value(base_res)));
        let s = nl_shared(&mut g, xn, eye, norm)?;
        shared.record(g.value(s).rel_diff(g.value(base)));
        let k = nl_compact(&mut g, xn, &NlConfig::identity())?;
        compact.record(g.value(k).rel_diff(g.value(base)));
    }
    Ok(vec![full, shared, compact])
}

/// Incremental affinities against direct products, plus the multiply-add
/// count of the whole nested list against the densest affinity alone.
pub fn reuse_suite(seed: u64, trials: usize) -> Result<EquivSuite> {
    let mut rng = rng_for(seed, 4);
    let mut suite = EquivSuite::new("reuse", REUSE_TOLERANCE);
    for _ in 0..trials {
        let c = rng.random_range(8..=16);
        let x = random_map(&mut rng, 8, c);
        let stride = rng.random_range(1..=2);
        let mut ratios: Vec<f64> = RATIOS
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.6))
            .collect();
        if ratios.is_empty() {
            ratios.push(1.0);
        }

        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let reuse = affinity_with_reuse(&mut g, xn, &ratios, stride)?;
        let reuse_madds = g.madds();

        let mut deviation: f64 = 0.0;
        let mut dense_madds = 0;
        for (i, &r) in ratios.iter().enumerate() {
            let mut d = Graph::new();
            let xd = d.constant(x.clone());
            let cfg = NlConfig::new(r, stride);
            let f = crate::nl::extract_compact(&mut d, xd, &cfg)?;
            let a = d.bmm(f.x_c, f.x_sc, false, true)?;
            deviation = deviation.max(g.value(reuse[i]).rel_diff(d.value(a)));
            dense_madds = d.madds();
        }
        suite.record(deviation);
        if reuse_madds != dense_madds {
            suite.failures += 1;
        }
    }
    Ok(suite)
}

/// Associativity (100 trials), the three reductions (20 each) and reuse (100).
pub fn nl_equiv(seed: u64) -> Result<EquivReport> {
    let mut suites = vec![associativity_suite(seed, 100)?];
    suites.extend(reduction_suites(seed, 20)?);
    suites.push(reuse_suite(seed, 100)?);
    Ok(EquivReport { seed, suites })
}

// ----------------------------------------------------------------------
// Analytic cost against the instrumented counter
// ----------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FlopsCheck {
    pub variant: NlVariant,
    pub shape: (usize, usize, usize),
    pub channel_ratio: f64,
    pub spatial_stride: usize,
    pub analytic: u64,
    pub counted: u64,
}

/// Evaluates every variant on `trials` random single-sample shapes and
/// records the analytic multiply-adds next to the graph's own count.
pub fn flops_counter_checks(seed: u64, trials: usize) -> Result<Vec<FlopsCheck>> {
    let mut rng = rng_for(seed, 5);
    let mut out = Vec::new();
    for _ in 0..trials {
        let (h, w, c) = (
            rng.random_range(1..=12),
            rng.random_range(1..=12),
            rng.random_range(8..=24),
        );
        let cfg = NlConfig::new(
            RATIOS[rng.random_range(0..RATIOS.len())],
            rng.random_range(1..=3),
        );
        let x = uniform(&mut rng, &[1, h, w, c], -1.0, 1.0);
        for variant in NlVariant::ALL {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let params = VariantParams {
                transforms: (0..variant.input_transforms())
                    .map(|_| g.constant(Tensor::eye(c)))
                    .collect(),
                wz: Some(g.constant(Tensor::eye(c))),
                wd: Some(g.constant(Tensor::full(&[3, 3, c], 0.1))),
            };
            apply_variant(&mut g, variant, xn, &params, &cfg)?;
            out.push(FlopsCheck {
                variant,
                shape: (h, w, c),
                channel_ratio: cfg.channel_ratio,
                spatial_stride: cfg.spatial_stride,
                analytic: flops_nl_variant(variant, (h, w, c), &cfg)?,
                counted: g.madds(),
            });
        }
    }
    Ok(out)
}
