use std::collections::BTreeSet;

use cfzs::counterfactual::{train_baseline, train_counterfactual, ClassifierTraining};
use cfzs::data::{synthesize_pool, AuditedTrainingSet, ZeroShotTaskSpec};
use cfzs::generator::{generate, train_generator, GeneratorNet};
use cfzs::harness::{
    self, prepare_dataset, train_variant, ExperimentConfig, ModelVariant, TaskSource, TrainedModel,
};
use cfzs::rng::substream;
use cfzs::Error;

fn quick(variant: ModelVariant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model_variant: variant,
        seeds: vec![3],
        ..Default::default()
    };
    cfg.generator.training.epochs = 5;
    cfg.classifier.epochs = 3;
    cfg.graph.training.epochs = 50;
    cfg
}

#[test]
fn no_unseen_feature_is_read_while_training() {
    // the pool still holds unseen samples; only the label set marks them
    let spec = ZeroShotTaskSpec {
        seed: 3,
        ..Default::default()
    };
    let mut pool = synthesize_pool(&spec).unwrap();
    pool.unseen_ids = BTreeSet::from([8, 9]);
    assert!(pool
        .train
        .iter()
        .any(|f| pool.unseen_ids.contains(&f.class_id)));
    for variant in [ModelVariant::Baseline, ModelVariant::Cf, ModelVariant::Cfg] {
        let audited = AuditedTrainingSet::new(&pool);
        train_variant(&quick(variant), &audited, 3).unwrap();
        assert!(!audited.reads().is_empty());
        assert_eq!(audited.leaked_reads(), Vec::<usize>::new(), "{variant:?}");
    }
}

#[test]
fn training_loss_falls_over_ten_epochs() {
    for seed in 1..=5 {
        let mut cfg = ExperimentConfig::default();
        cfg.classifier.epochs = 10;
        let ds = prepare_dataset(&cfg, seed).unwrap();
        let v = train_variant(&cfg, &ds, seed).unwrap();
        let total = v.classifier_curve.total();
        assert_eq!(total.len(), 10);
        assert!(total.iter().all(|x| x.is_finite()));
        assert!(total[9] < total[0], "seed {seed}: {total:?}");
        let g = &v.generator_curve;
        assert!(g[g.len() - 1] < g[0], "seed {seed}: generator {g:?}");
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

#[test]
fn frozen_counterfactual_matches_plain_classifier_without_unseen_classes() {
    let spec = ZeroShotTaskSpec::default();
    let pool = synthesize_pool(&spec).unwrap();
    assert!(pool.unseen_ids.is_empty());
    let (x, y) = pool.test_matrix().unwrap();

    let mut rng = substream(spec.seed, "generator");
    let mut gen = GeneratorNet::new(spec.embedding_dim, 8, 128, spec.feature_dim, &mut rng);
    train_generator(&mut gen, &pool, &Default::default(), &mut rng).unwrap();
    let all: Vec<usize> = (0..pool.n_classes()).collect();
    let fakes = generate(&gen, &pool.embeddings, &all, 100, &mut rng).unwrap();

    let settings = ClassifierTraining {
        freeze_a: true,
        ..Default::default()
    };
    let mut rng = substream(spec.seed, "training");
    let (cf, _) = train_counterfactual(&pool, &fakes, &settings, &mut rng).unwrap();
    assert_eq!(cf.params.a(), 0.0);
    let (plain, _) = train_baseline(&pool, &fakes, &settings, &mut rng).unwrap();
    let acc_cf = accuracy(&cf.predict(&x).unwrap().classes, &y);
    let acc_plain = accuracy(&plain.predict(&x).unwrap().classes, &y);
    assert!(
        (acc_cf - acc_plain).abs() <= 0.02,
        "cf {acc_cf} vs plain {acc_plain}"
    );
}

#[test]
fn identical_configs_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(ModelVariant::Cfg);
    cfg.seeds = vec![1, 2];
    let mut bytes = Vec::new();
    for k in 0..2 {
        cfg.output_dir = dir.path().join(format!("out{k}"));
        let r = harness::run(&cfg).unwrap();
        assert_eq!(r.seeds.len(), 2);
        assert!(r.artifacts.per_class_csv.exists());
        assert!(r.artifacts.bundle_json.exists());
        assert!(r.artifacts.adjacency_csv.as_ref().unwrap().exists());
        bytes.push(std::fs::read(&r.artifacts.metrics_csv).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes.pop().unwrap()).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_id,seed,model_variant,n_unseen,miou_overall,miou_seen,miou_unseen,hiou,bias_gap"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn result_round_trips_and_compares_with_itself() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(ModelVariant::Cf);
    cfg.output_dir = dir.path().to_path_buf();
    let r = harness::run(&cfg).unwrap();
    let loaded = harness::RunResult::load(r.artifacts.result_json.parent().unwrap()).unwrap();
    assert_eq!(loaded, r);
    let c = harness::compare(&r, &loaded).unwrap();
    assert!(c.metrics.iter().all(|m| m.delta == 0.0));

    let mut other = quick(ModelVariant::Baseline);
    other.output_dir = dir.path().to_path_buf();
    other.task = TaskSource::Synthetic(ZeroShotTaskSpec {
        cluster_spread: 2.0,
        ..Default::default()
    });
    let r2 = harness::run(&other).unwrap();
    assert!(matches!(harness::compare(&r, &r2), Err(Error::Invalid(_))));
}

#[test]
fn embedding_file_task() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.txt");
    let names = ["cat", "cow", "horse", "bicycle", "motorbike", "bus"];
    let vectors = [
        [1.0, 0.1, 0.0, 0.2],
        [0.9, 0.3, 0.1, 0.0],
        [0.8, 0.4, 0.0, 0.1],
        [0.0, 0.1, 1.0, 0.3],
        [0.1, 0.0, 0.9, 0.5],
        [0.0, 0.2, 0.4, 1.0],
    ];
    let text: String = names
        .iter()
        .zip(&vectors)
        .map(|(n, v)| {
            let nums: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("{n} {}\n", nums.join(" "))
        })
        .collect();
    std::fs::write(&path, text).unwrap();
    let mut cfg = quick(ModelVariant::Cfg);
    cfg.output_dir = dir.path().join("out");
    cfg.task = TaskSource::EmbeddingFile {
        path: path.clone(),
        unseen_names: vec!["motorbike".into()],
        features: ZeroShotTaskSpec {
            samples_per_class: 30,
            test_samples_per_class: 20,
            ..Default::default()
        },
    };
    let ds = prepare_dataset(&cfg, 3).unwrap();
    assert_eq!(ds.unseen_ids, BTreeSet::from([4]));
    assert_eq!(ds.class_names()[4], "motorbike");
    let r = harness::run(&cfg).unwrap();
    assert_eq!(r.unseen_ids, vec![4]);
    assert!(r.seeds[0].metrics.hiou.is_some());
    let (graph, names) = harness::adjacency_for(&cfg).unwrap();
    assert_eq!(names.len(), 6);
    assert!(graph.edges().contains(&(3, 4)));

    cfg.task = TaskSource::EmbeddingFile {
        path,
        unseen_names: vec!["unicorn".into()],
        features: Default::default(),
    };
    assert!(matches!(prepare_dataset(&cfg, 3), Err(Error::Invalid(_))));
}

#[test]
fn trained_bundle_serializes() {
    let cfg = quick(ModelVariant::Cf);
    let ds = prepare_dataset(&cfg, 3).unwrap();
    let v = train_variant(&cfg, &ds, 3).unwrap();
    let text = serde_json::to_string(&v.model).unwrap();
    let back: TrainedModel = serde_json::from_str(&text).unwrap();
    let (x, _) = ds.test_matrix().unwrap();
    assert_eq!(back.predict(&x).unwrap(), v.model.predict(&x).unwrap());
}
