use std::collections::BTreeMap;

use ssdg_core::checkpoint::{load_checkpoint, read_header, save_checkpoint};
use ssdg_core::config::TrainConfig;
use ssdg_core::data::{leave_one_out, make_synthetic_registry, split_labeled_unlabeled, SyntheticDomainSpec};
use ssdg_core::image::Image;
use ssdg_core::model::NetState;
use ssdg_core::trainer::{evaluate_domains, inference_net, predict, train_loop};

fn cfg() -> TrainConfig {
    TrainConfig {
        iterations: 6,
        widths: vec![2, 4],
        eval_every: 3,
        unseen_domain: 3,
        tau: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn train_save_load_evaluate() {
    let spec = SyntheticDomainSpec { image_size: 16, ..SyntheticDomainSpec::default() };
    let registry = make_synthetic_registry(&spec, 3, 8).unwrap();
    let cfg = cfg();
    let loo = leave_one_out(&registry, cfg.unseen_domain).unwrap();
    let split = split_labeled_unlabeled(&loo.train, cfg.labeled_fraction, cfg.split_seed).unwrap();

    let outcome = train_loop(&split, &[&loo.test], &cfg).unwrap();
    assert_eq!(outcome.history.len(), 6);
    let evaluated: Vec<usize> = outcome
        .history
        .iter()
        .filter(|r| r.unseen_dice.is_some())
        .map(|r| r.step.iteration)
        .collect();
    assert_eq!(evaluated, vec![3, 6]);
    assert!(outcome.history.iter().all(|r| r.step.total.is_finite()));

    let teacher = &outcome.pair.teacher;
    assert_eq!(teacher.state(), &NetState::Converted { n_domains: 2 });
    let stripped = inference_net(teacher).unwrap();
    assert_eq!(stripped.state(), &NetState::Stripped);
    assert!(stripped.learnable_param_count() < teacher.learnable_param_count());

    let dir = tempfile::tempdir().unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("note".to_string(), serde_json::json!("pipeline"));
    let extras = vec![("extra.a".to_string(), vec![1.0, -2.5, 3.25])];
    let full_path = dir.path().join("nested/teacher.ckpt");
    let stripped_path = dir.path().join("inference.ckpt");
    save_checkpoint(&full_path, teacher, &meta, &extras).unwrap();
    save_checkpoint(&stripped_path, &stripped, &meta, &[]).unwrap();

    let header = read_header(&full_path).unwrap();
    assert_eq!(header.metadata["note"], "pipeline");

    let full = load_checkpoint(&full_path, Some(2)).unwrap();
    assert_eq!(full.extras, extras);
    assert!(load_checkpoint(&full_path, Some(3)).is_err());
    let loaded_stripped = load_checkpoint(&stripped_path, None).unwrap();

    let images: Vec<&Image> = loo.test.samples.iter().map(|s| &s.image).collect();
    let reference = predict(&stripped, &images, 4).unwrap();
    assert_eq!(predict(&inference_net(&full.net).unwrap(), &images, 4).unwrap(), reference);
    assert_eq!(predict(&loaded_stripped.net, &images, 4).unwrap(), reference);
    // batch composition does not matter at inference
    assert_eq!(predict(&loaded_stripped.net, &images, 1).unwrap(), reference);

    let a = evaluate_domains(&stripped, &[&loo.test], registry.n_classes(), 4).unwrap();
    let b = evaluate_domains(&loaded_stripped.net, &[&loo.test], registry.n_classes(), 8).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let spec = SyntheticDomainSpec { image_size: 16, ..SyntheticDomainSpec::default() };
    let registry = make_synthetic_registry(&spec, 3, 4).unwrap();
    let mut cfg = cfg();
    cfg.iterations = 1;
    cfg.eval_every = 0;
    let loo = leave_one_out(&registry, 3).unwrap();
    let split = split_labeled_unlabeled(&loo.train, 0.5, 0).unwrap();
    let outcome = train_loop(&split, &[], &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&path, &outcome.pair.student, &BTreeMap::new(), &[]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [4, 12, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(load_checkpoint(&path, None).is_err(), "cut at {cut}");
    }
}
