use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use uad_core::autoencoder::{build_flow_matrix, train_autoencoder, AeTrainConfig};
use uad_core::eval::{feature_rows, pools_for, FeatureSet};
use uad_core::features::extract_stat_features;
use uad_core::meta::{episode_gradient, sample_episode, LabelSpace, MetaParams};
use uad_core::synthetic::{generate_task_family, SyntheticSpec};
use uad_core::{rng, AutoencoderSpec, BackboneSpec, EpisodeConfig, Flow};

fn family() -> (Vec<Flow>, Vec<String>, Vec<String>) {
    let fam = generate_task_family(&SyntheticSpec {
        n_classes: 9,
        flows_per_class: 60,
        class_separation: 1.5,
        ..SyntheticSpec::default()
    })
    .expect("valid spec");
    let flows = fam.flows.iter().map(|f| f.flow.clone()).collect();
    let labels = fam.flows.iter().map(|f| f.label.clone()).collect();
    (flows, labels, fam.train_classes)
}

fn features(c: &mut Criterion) {
    let (flows, _, _) = family();
    c.bench_function("stat features, 540 flows", |b| {
        b.iter(|| {
            for f in &flows {
                black_box(extract_stat_features(black_box(f)));
            }
        })
    });
}

fn meta_gradient(c: &mut Criterion) {
    let (flows, labels, train) = family();
    let rows = feature_rows(&flows, FeatureSet::Set2, None).expect("set2 rows");
    let pools = pools_for(&rows, &labels, &train).expect("pools");
    let cfg = EpisodeConfig::default();
    let classes = pools.class_ids();
    let space = LabelSpace::for_classes(&classes, cfg.k);
    let spec = BackboneSpec::with_hidden(rows[0].len(), cfg.hidden.clone(), cfg.k);
    let meta = MetaParams::init(&spec, cfg.alpha_init, &mut rng::stream(0, "bench", 0));
    let tasks = sample_episode(&pools, &classes, &space, &cfg, &mut rng::stream(0, "bench", 1)).expect("episode");
    c.bench_function("exact meta-gradient, K=5 M=N=5", |b| {
        b.iter(|| episode_gradient(black_box(&meta), &spec, &tasks, &cfg).expect("gradient"))
    });
}

fn autoencoder_epoch(c: &mut Criterion) {
    let (flows, _, _) = family();
    let spec = AutoencoderSpec {
        encoder: vec![32, 16],
        decoder: vec![16, 32],
        ..AutoencoderSpec::default()
    };
    let data: Vec<_> = flows.iter().take(100).map(|f| build_flow_matrix(f, spec.b)).collect();
    let cfg = AeTrainConfig {
        epochs: 1,
        ..AeTrainConfig::default()
    };
    let mut g = c.benchmark_group("autoencoder");
    g.sample_size(10);
    g.bench_function("one epoch, 100 flows, B=20", |b| {
        b.iter_batched(
            || data.clone(),
            |d| train_autoencoder(&d, &spec, &cfg).expect("training"),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, features, meta_gradient, autoencoder_epoch);
criterion_main!(benches);
