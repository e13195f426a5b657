use lightnl::data::{gen_longrange, Dataset};
use lightnl::search::ArchDescription;
use lightnl::supernet::{Network, NetworkSpec, ParamKind, ParamStore};
use lightnl::train::{evaluate, train, TrainConfig};

fn small_set(count: usize) -> Dataset {
    gen_longrange(11, count, 32).unwrap()
}

fn manual_net(seed: u64) -> Network {
    let arch = ArchDescription::manual(&NetworkSpec::longrange()).unwrap();
    Network::realize(&arch, 0.05, seed).unwrap()
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = small_set(64);
    let mut net = manual_net(3);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..Default::default()
    };
    train(&mut net, &data, None, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    net.save(&path).unwrap();
    assert_eq!(ParamStore::load(&path).unwrap(), net.export_params());

    let mut fresh = manual_net(99);
    fresh.load(&path).unwrap();
    assert_eq!(
        evaluate(&fresh, &data, 32).unwrap(),
        evaluate(&net, &data, 32).unwrap()
    );
}

#[test]
fn training_is_deterministic() {
    let data = small_set(64);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    };
    let (mut a, mut b) = (manual_net(5), manual_net(5));
    let ha = train(&mut a, &data, Some(&data), &cfg).unwrap();
    let hb = train(&mut b, &data, Some(&data), &cfg).unwrap();
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert_eq!(a.export_params(), b.export_params());
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let data = small_set(32);
    let mut net = manual_net(2);
    let before = net.export_params();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        lr: 0.0,
        ..Default::default()
    };
    train(&mut net, &data, None, &cfg).unwrap();
    let after = net.export_params();
    for (name, p) in before.iter() {
        if p.kind == ParamKind::Weight {
            assert_eq!(after.get(name).unwrap(), &p.value, "{name} moved");
        }
    }
}

#[test]
fn overfits_a_handful_of_examples() {
    let data = small_set(8);
    let mut net = Network::plain(NetworkSpec::longrange(), 4).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        ..Default::default()
    };
    train(&mut net, &data, None, &cfg).unwrap();
    assert_eq!(evaluate(&net, &data, 8).unwrap().top1, 1.0);
}

#[test]
fn evaluation_is_repeatable() {
    let data = small_set(48);
    let net = manual_net(8);
    let a = evaluate(&net, &data, 16).unwrap();
    assert_eq!(a, evaluate(&net, &data, 16).unwrap());
    // batch size only changes the grouping in eval mode
    let b = evaluate(&net, &data, 48).unwrap();
    assert_eq!(a.top1, b.top1);
    assert!((a.loss - b.loss).abs() < 1e-12);
}
