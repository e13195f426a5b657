//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
//!
//! `LIGHTNL_CRITERIA=1,2,7` restricts the run to a subset. MNIST is read from
//! `LIGHTNL_MNIST_DIR` or `data/mnist` at the workspace root (see
//! `scripts/fetch_mnist.sh`); criterion 9 fails when it is missing.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use lightnl::cost::{table1_ladder, ShapeSpec};
use lightnl::data::{gen_longrange, load_mnist_split, mnist_dir, Dataset};
use lightnl::nl::NlVariant;
use lightnl::search::{
    derive_architecture, hard_chain, select_ratio, ArchDescription, ArchMeta, CandidateSet, Ema,
    LocationSnapshot,
};
use lightnl::supernet::{Network, NetworkSpec};
use lightnl::train::{evaluate, search, train, TrainConfig};
use lightnl::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2024;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c1_associativity() -> Result<Outcome> {
    let t = Instant::now();
    let s = verify::associativity_suite(SEED, 100)?;
    let el = t.elapsed();
    Ok(outcome(
        s.passed() && s.trials == 100 && el < Duration::from_secs(10),
        format!(
            "{} trials, max rel dev {:.2e}, {:.2} s",
            s.trials,
            s.max_deviation,
            secs(el)
        ),
    ))
}

fn c2_reductions() -> Result<Outcome> {
    let suites = verify::reduction_suites(SEED, 20)?;
    let ok = suites.len() == 3
        && suites
            .iter()
            .all(|s| s.passed() && s.trials == 20 && s.tolerance <= 1e-12);
    let detail = suites
        .iter()
        .map(|s| format!("{} {:.1e}", s.name, s.max_deviation))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(outcome(ok, detail))
}

fn c3_ladder() -> Result<Outcome> {
    // Published deltas of the same ladder, in MAdds.
    const PUBLISHED: [f64; 6] = [6.2e9, 119e6, 93e6, 66e6, 38e6, 15e6];
    let t = Instant::now();
    let report = table1_ladder(&ShapeSpec::mobilenetv2_224())?;
    let el = t.elapsed();
    let order: Vec<NlVariant> = report.rows.iter().map(|r| r.variant).collect();
    let published_ratio = PUBLISHED[0] / PUBLISHED[5];
    let ok = order == NlVariant::ALL
        && report.strictly_decreasing
        && (250.0..=700.0).contains(&report.ratio)
        && el < Duration::from_secs(1);
    let ladder = report
        .rows
        .iter()
        .map(|r| format!("{:.1}M", r.delta_madds as f64 / 1e6))
        .collect::<Vec<_>>()
        .join(" > ");
    Ok(outcome(
        ok,
        format!(
            "{ladder}, ratio {:.0} (published {published_ratio:.0}), {:.3} s",
            report.ratio,
            secs(el)
        ),
    ))
}

fn c4_flops_counter() -> Result<Outcome> {
    let checks = verify::flops_counter_checks(SEED, 20)?;
    let bad = checks.iter().filter(|c| c.analytic != c.counted).count();
    let every_variant = NlVariant::ALL
        .iter()
        .all(|v| checks.iter().filter(|c| c.variant == *v).count() == 20);
    Ok(outcome(
        bad == 0 && every_variant,
        format!("{} checks, {bad} mismatches", checks.len()),
    ))
}

fn c5_gradients() -> Result<Outcome> {
    let t = Instant::now();
    let suite = verify::default_grad_suite()?;
    let el = t.elapsed();
    let has = |n: &str| suite.entries.iter().any(|e| e.name == n);
    let ok = suite.passed()
        && suite.tolerance <= 1e-4
        && has("lightnl_block")
        && has("expected_cost")
        && el < Duration::from_secs(120);
    Ok(outcome(
        ok,
        format!(
            "{} cases, max rel err {:.2e}, {:.1} s",
            suite.entries.len(),
            suite.max_rel_error(),
            secs(el)
        ),
    ))
}

fn c6_reuse() -> Result<Outcome> {
    let s = verify::reuse_suite(SEED, 100)?;
    Ok(outcome(
        s.passed() && s.trials == 100,
        format!(
            "{} trials, max rel dev {:.2e}, {} failures",
            s.trials, s.max_deviation, s.failures
        ),
    ))
}

fn random_distances(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn random_snapshots(
    rng: &mut impl Rng,
    spec: &NetworkSpec,
    cset: &CandidateSet,
) -> Vec<LocationSnapshot> {
    let regs = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<Ema> {
        (0..n)
            .map(|_| Ema {
                value: Some(rng.random_range(0.0..1.0)),
            })
            .collect()
    };
    spec.site_names()
        .into_iter()
        .map(|site| LocationSnapshot {
            site,
            wd_norm_sq: rng.random_range(0.0..2.0),
            t_insert: rng.random_range(0.0..2.0),
            t_channel: rng.random_range(-0.5..1.0),
            t_spatial: rng.random_range(-0.5..1.0),
            ema_channel: regs(rng, cset.ratios.len()),
            ema_spatial: regs(rng, cset.strides.len()),
        })
        .collect()
}

fn c7_gates() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut violations = Vec::new();
    let trials = 2000;
    for _ in 0..trials {
        let n = rng.random_range(1..=6);
        let d = random_distances(&mut rng, n);
        let t = rng.random_range(-0.5..1.0);
        let one_hot = hard_chain(&d, t);
        if one_hot.iter().filter(|&&v| v == 1.0).count() != 1
            || one_hot.iter().any(|&v| v != 0.0 && v != 1.0)
        {
            violations.push(format!("chain {d:?} t={t}"));
        }
        // Every earlier candidate fails; the chosen one passes unless it is the last.
        let i = select_ratio(&d, t);
        let earlier_fail = d[..i].iter().all(|&x| !(x < t));
        if i >= n || !earlier_fail || (i + 1 < n && !(d[i] < t)) {
            violations.push(format!("select {d:?} t={t} -> {i}"));
        }
        let t_neg = -rng.random_range(0.0..1.0);
        if select_ratio(&d, t_neg) != n - 1 {
            violations.push(format!("t={t_neg} did not force the densest of {d:?}"));
        }
    }

    let spec = NetworkSpec::toy();
    let cset = CandidateSet::default();
    for _ in 0..200 {
        let snaps = random_snapshots(&mut rng, &spec, &cset);
        let meta = ArchMeta {
            seed: 1,
            lambda: 0.5,
            steps: 10,
        };
        let a = derive_architecture(&snaps, &cset, &spec, meta.clone())?;
        let b = derive_architecture(&snaps.clone(), &cset, &spec, meta.clone())?;
        if a != b {
            violations.push("derive differs on identical inputs".into());
        }
        for (loc, s) in a.locations.iter().zip(&snaps) {
            if loc.insert != (s.wd_norm_sq > s.t_insert) {
                violations.push(format!("insert at {} ignores norm vs threshold", loc.site));
            }
        }
        // Forcing every threshold non-positive yields the densest candidates.
        let forced: Vec<LocationSnapshot> = snaps
            .iter()
            .map(|s| LocationSnapshot {
                wd_norm_sq: s.t_insert + 1.0,
                t_channel: 0.0,
                t_spatial: -1.0,
                ..s.clone()
            })
            .collect();
        let dense = derive_architecture(&forced, &cset, &spec, meta)?;
        let densest_ratio = cset.ratios[cset.ratios.len() - 1];
        let densest_stride = cset.strides[cset.strides.len() - 1];
        if dense.locations.iter().any(|l| {
            l.channel_ratio != Some(densest_ratio) || l.spatial_stride != Some(densest_stride)
        }) {
            violations.push("non-positive thresholds did not select the densest candidate".into());
        }
    }
    // A trained supernet derives exactly what its snapshots dictate.
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let out = search(
        NetworkSpec::longrange(),
        &gen_longrange(5, 128, LONGRANGE_SIZE)?,
        None,
        &cfg,
    )?;
    let direct = derive_architecture(
        &out.supernet.snapshots()?,
        &cset,
        &NetworkSpec::longrange(),
        out.arch.meta.clone(),
    )?;
    if out.supernet.derive(out.arch.meta.clone())? != direct || out.arch != direct {
        violations
            .push("supernet derive disagrees with derive_architecture on its snapshots".into());
    }
    let detail = match violations.first() {
        None => format!("{trials} chain trials, 200 derive trials"),
        Some(v) => format!("{} violations, first: {v}", violations.len()),
    };
    Ok(outcome(violations.is_empty(), detail))
}

const SEARCH_SAMPLES: usize = 2000;
const LONGRANGE_SIZE: usize = 32;

fn c8_search() -> Result<Outcome> {
    let t = Instant::now();
    let lambdas = [0.0, 0.1, 10.0];
    let mut rows = Vec::new();
    let (mut some_inserts, mut no_inserts, mut monotone) = (0, 0, 0);
    for seed in 1..=3u64 {
        let data = gen_longrange(seed, SEARCH_SAMPLES, LONGRANGE_SIZE)?;
        let mut madds = Vec::new();
        for &lambda in &lambdas {
            let mut cfg = TrainConfig {
                seed,
                epochs: 1,
                ..Default::default()
            };
            cfg.search.lambda = lambda;
            let out = search(NetworkSpec::longrange(), &data, None, &cfg)?;
            let inserts = out.arch.inserts();
            let cost = out.arch.madds()?;
            if lambda == 0.0 && inserts >= 1 {
                some_inserts += 1;
            }
            if lambda == 10.0 && inserts == 0 {
                no_inserts += 1;
            }
            madds.push(cost);
            rows.push(format!("s{seed} l{lambda}: {inserts} ins {cost}"));
        }
        if madds.windows(2).all(|w| w[0] >= w[1]) {
            monotone += 1;
        }
    }
    let el = t.elapsed();
    let ok =
        some_inserts >= 2 && no_inserts >= 2 && monotone == 3 && el <= Duration::from_secs(600);
    Ok(outcome(
        ok,
        format!(
            "lambda=0 inserts in {some_inserts}/3, lambda=10 empty in {no_inserts}/3, monotone {monotone}/3, {:.0} s [{}]",
            secs(el),
            rows.join("; ")
        ),
    ))
}

fn top1(arch: &ArchDescription, train_set: &Dataset, test_set: &Dataset, seed: u64) -> Result<f64> {
    let mut net = Network::realize(arch, 0.0, seed)?;
    let cfg = TrainConfig {
        seed,
        epochs: 3,
        ..Default::default()
    };
    train(&mut net, train_set, None, &cfg)?;
    Ok(evaluate(&net, test_set, 256)?.top1)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn c9_accuracy() -> Result<Outcome> {
    let t = Instant::now();
    let dir = mnist_dir(&workspace_root());
    let mnist_train = load_mnist_split(&dir, "train").context("MNIST training split")?;
    let mnist_test = load_mnist_split(&dir, "test").context("MNIST test split")?;
    let spec = NetworkSpec::mnist();
    let (mut plain, mut manual) = (Vec::new(), Vec::new());
    for seed in 1..=3 {
        plain.push(top1(
            &ArchDescription::plain(&spec),
            &mnist_train,
            &mnist_test,
            seed,
        )?);
        manual.push(top1(
            &ArchDescription::manual(&spec)?,
            &mnist_train,
            &mnist_test,
            seed,
        )?);
    }
    let spec = NetworkSpec::longrange();
    let (mut lr_plain, mut lr_light) = (Vec::new(), Vec::new());
    for seed in 1..=3 {
        let tr = gen_longrange(seed, 2000, LONGRANGE_SIZE)?;
        let te = gen_longrange(seed ^ 0x7e57_5eed, 1000, LONGRANGE_SIZE)?;
        lr_plain.push(top1(&ArchDescription::plain(&spec), &tr, &te, seed)?);
        lr_light.push(top1(&ArchDescription::manual(&spec)?, &tr, &te, seed)?);
    }
    let detail = format!(
        "mnist plain {plain:?} manual {manual:?}; longrange plain {lr_plain:?} lightnl {lr_light:?}; {:.0} s",
        secs(t.elapsed())
    );
    let plain_min = plain.iter().copied().fold(f64::INFINITY, f64::min);
    let (pm, mm) = (median(&mut plain), median(&mut manual));
    let (lp, ll) = (median(&mut lr_plain), median(&mut lr_light));
    let ok = plain_min >= 0.97 && mm >= pm - 0.003 && ll >= lp + 0.02;
    Ok(outcome(ok, detail))
}

fn run_cli(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_lightnl"))
        .args(args)
        .output()?;
    ensure!(
        out.status.success(),
        "lightnl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    Ok(())
}

fn c10_determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 1, "data": {"longrange_train": 256, "longrange_test": 128}}"#,
    )?;
    let cfg = cfg.to_str().context("utf-8 path")?;
    let mut compared = 0;
    let mut differing = Vec::new();
    for (cmd, extra, files) in [
        (
            "search",
            vec![],
            vec!["arch.json", "history.csv", "cost_trajectory.csv"],
        ),
        (
            "train",
            vec!["--arch", "manual"],
            vec!["arch.json", "metrics.csv"],
        ),
    ] {
        let runs: Vec<PathBuf> = (0..2)
            .map(|i| dir.path().join(format!("{cmd}{i}")))
            .collect();
        for out in &runs {
            let mut args = vec![cmd, "--data", "longrange", "--seed", "7", "--config", cfg];
            args.extend(&extra);
            args.extend(["--out", out.to_str().context("utf-8 path")?]);
            run_cli(&args)?;
        }
        for f in files {
            let a = std::fs::read(runs[0].join(f))?;
            let b = std::fs::read(runs[1].join(f))?;
            compared += 1;
            if a != b {
                differing.push(format!("{cmd}/{f}"));
            }
        }
    }
    Ok(outcome(
        differing.is_empty(),
        format!("{compared} files compared, differing: {differing:?}"),
    ))
}

type Criterion = (u32, &'static str, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 10] = [
    (1, "associativity", c1_associativity),
    (2, "reduction chain", c2_reductions),
    (3, "cost ladder", c3_ladder),
    (4, "cost model exactness", c4_flops_counter),
    (5, "gradient suite", c5_gradients),
    (6, "affinity reuse", c6_reuse),
    (7, "gates and selection", c7_gates),
    (8, "search sanity", c8_search),
    (9, "accuracy sanity", c9_accuracy),
    (10, "determinism", c10_determinism),
];

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("LIGHTNL_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e:#}")));
        if !o.passed {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {name:<22} {} ({:.1} s) {}",
            if o.passed { "PASS" } else { "FAIL" },
            secs(t.elapsed()),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
