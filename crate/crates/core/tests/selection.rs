use lightnl::search::{
    derive_architecture, hard_chain, relaxed_chain, select_ratio, ArchMeta, CandidateSet, Ema,
    LocationSnapshot,
};
use lightnl::supernet::NetworkSpec;
use proptest::prelude::*;

fn distances() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, 1..7)
}

proptest! {
    #[test]
    fn exactly_one_indicator_fires(d in distances(), t in -1.0..1.5f64) {
        let v = hard_chain(&d, t);
        prop_assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
        prop_assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn selection_is_the_first_passing_candidate(d in distances(), t in 0.001..1.5f64) {
        let i = select_ratio(&d, t);
        let expected = d[..d.len() - 1].iter().position(|&x| x < t).unwrap_or(d.len() - 1);
        prop_assert_eq!(i, expected);
    }

    #[test]
    fn non_positive_threshold_selects_the_densest(d in distances(), t in -2.0..=0.0f64) {
        prop_assert_eq!(select_ratio(&d, t), d.len() - 1);
    }

    #[test]
    fn relaxed_chain_is_a_distribution(d in distances(), t in -1.0..1.5f64, tau in 0.01..2.0f64) {
        let (p, dp) = relaxed_chain(&d, t, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(dp.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn relaxed_chain_sharpens_towards_the_hard_choice(d in distances(), t in 0.0..1.0f64) {
        // keep every distance well away from the threshold
        prop_assume!(d.iter().all(|&x| (x - t).abs() > 0.05));
        let (p, _) = relaxed_chain(&d, t, 1e-4);
        let hard = hard_chain(&d, t);
        for (a, b) in p.iter().zip(&hard) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn derive_reads_only_norms_thresholds_and_registers(
        norms in prop::collection::vec(0.0..2.0f64, 5),
        thresholds in prop::collection::vec(-0.5..1.0f64, 15),
        regs in prop::collection::vec(0.0..1.0f64, 25),
    ) {
        let spec = NetworkSpec::toy();
        let cset = CandidateSet::default();
        let ema = |v: &[f64]| v.iter().map(|&x| Ema { value: Some(x) }).collect::<Vec<_>>();
        let (nr, ns) = (cset.ratios.len(), cset.strides.len());
        let snaps: Vec<LocationSnapshot> = spec
            .site_names()
            .into_iter()
            .enumerate()
            .map(|(k, site)| LocationSnapshot {
                site,
                wd_norm_sq: norms[k],
                t_insert: thresholds[3 * k].abs(),
                t_channel: thresholds[3 * k + 1],
                t_spatial: thresholds[3 * k + 2],
                ema_channel: ema(&regs[5 * k..5 * k + nr]),
                ema_spatial: ema(&regs[5 * k + nr..5 * k + nr + ns]),
            })
            .collect();
        let a = derive_architecture(&snaps, &cset, &spec, ArchMeta::default()).unwrap();
        let b = derive_architecture(&snaps, &cset, &spec, ArchMeta::default()).unwrap();
        prop_assert_eq!(&a, &b);
        for (loc, s) in a.locations.iter().zip(&snaps) {
            prop_assert_eq!(loc.insert, s.wd_norm_sq > s.t_insert);
            if loc.insert {
                let dc: Vec<f64> = s.ema_channel.iter().map(|e| e.value.unwrap()).collect();
                prop_assert_eq!(loc.channel_ratio, Some(cset.ratios[select_ratio(&dc, s.t_channel)]));
            }
        }
    }
}

#[test]
fn ema_blends_with_momentum() {
    let mut e = Ema::default();
    assert_eq!(e.update(2.0, 0.9), 2.0);
    approx::assert_relative_eq!(e.update(1.0, 0.9), 1.9, max_relative = 1e-15);
}

#[test]
fn derive_rejects_uninitialized_registers() {
    let spec = NetworkSpec::toy();
    let cset = CandidateSet::default();
    let snaps: Vec<LocationSnapshot> = spec
        .site_names()
        .into_iter()
        .map(|site| LocationSnapshot {
            site,
            wd_norm_sq: 1.0,
            t_insert: 0.5,
            t_channel: 0.1,
            t_spatial: 0.1,
            ema_channel: vec![Ema::default(); cset.ratios.len()],
            ema_spatial: vec![Ema::default(); cset.strides.len()],
        })
        .collect();
    assert!(derive_architecture(&snaps, &cset, &spec, ArchMeta::default()).is_err());
}
