//! End-to-end protocol benchmarks on a small configuration: one client
//! update against a fresh backbone, and server synthesis plus training.

use criterion::{Criterion, criterion_group, criterion_main};

use fedbip::client::client_update;
use fedbip::config::{ModelDims, RunConfig};
use fedbip::pipeline::{build_environment, pretrain_backbone};
use fedbip::server::server_update;

fn small_cfg() -> RunConfig {
    RunConfig {
        seed: 11,
        classes: 3,
        domains: 2,
        rare_domain: Some(1),
        train_per_cell: 4,
        test_per_cell: 2,
        pretrain_per_cell: 4,
        shots_per_class: 2,
        clients_per_domain: 1,
        dims: ModelDims {
            image_size: 16,
            latent_h: 4,
            latent_w: 4,
            latent_c: 2,
            d_w: 8,
            d_cond: 6,
            hidden: 6,
            t_max: 50,
            n_s: 2,
            n_v: 2,
            ..ModelDims::default()
        },
        ae_epochs: 2,
        denoiser_epochs: 2,
        n_step: 3,
        sample_steps: 8,
        classifier_epochs: 3,
        multiplier: 1,
        fedavg_rounds: 2,
        ..RunConfig::default()
    }
}

fn bench_protocol(c: &mut Criterion) {
    let cfg = small_cfg();
    let env = build_environment(&cfg).expect("environment");
    let (model, _) = pretrain_backbone(&env, &cfg).expect("pretrain");
    let client = &env.partition.clients[0];

    c.bench_function("client_update_small", |b| {
        b.iter(|| client_update(&model, client, &cfg).expect("client update"))
    });

    let uploads: Vec<_> = env
        .partition
        .clients
        .iter()
        .map(|cl| client_update(&model, cl, &cfg).expect("client update").0)
        .collect();
    let refs: Vec<_> = uploads.iter().collect();
    c.bench_function("server_update_small", |b| {
        b.iter(|| server_update(&model, &refs, &cfg).expect("server update"))
    });
}

criterion_group!(benches, bench_protocol);
criterion_main!(benches);
