//! Temporary calibration probe; not part of the suite.

use fedbip::config::{AblationToggles, ModelDims, RunConfig};
use fedbip::pipeline::{build_environment, pretrain_backbone, run_fedbip};

fn accept_cfg(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        classes: 3,
        domains: 2,
        rare_domain: Some(1),
        train_per_cell: 6,
        test_per_cell: 20,
        pretrain_per_cell: 48,
        shots_per_class: 5,
        clients_per_domain: 1,
        dims: ModelDims {
            image_size: 16,
            latent_h: 4,
            latent_w: 4,
            latent_c: 2,
            d_w: 12,
            d_cond: 10,
            hidden: 12,
            t_max: 50,
            n_s: 2,
            n_v: 2,
            ..ModelDims::default()
        },
        ae_epochs: 20,
        denoiser_epochs: 200,
        n_step: 80,
        sample_steps: 32,
        classifier_epochs: 150,
        classifier_batch: 8,
        multiplier: 3,
        fedavg_rounds: 100,
        fedavg_local_epochs: 5,
        ..RunConfig::default()
    }
}

fn toggles(i: bool, s: bool, v: bool, p: bool) -> AblationToggles {
    AblationToggles {
        use_instance: i,
        use_concept_s: s,
        use_concept_v: v,
        use_perturbation: p,
    }
}

#[test]
#[ignore]
fn probe() {
    for seed in [101u64, 102] {
        let base = accept_cfg(seed);
        let env = build_environment(&base).unwrap();
        let (model, _) = pretrain_backbone(&env, &base).unwrap();

        let variants: Vec<(&str, RunConfig)> = vec![
            (
                "full-nopert",
                RunConfig { ablation: toggles(true, true, true, false), ..base.clone() },
            ),
            ("full-sig02", RunConfig { sigma_eta_rel: 0.02, ..base.clone() }),
            (
                "full-sig02-lr05",
                RunConfig { sigma_eta_rel: 0.02, concept_lr: 0.05, ..base.clone() },
            ),
            (
                "nopert-lr05-n40",
                RunConfig {
                    n_step: 40,
                    concept_lr: 0.05,
                    ablation: toggles(true, true, true, false),
                    ..base.clone()
                },
            ),
        ];
        for (name, cfg) in variants {
            let res = run_fedbip(&cfg, name, 0, Some(model.clone())).unwrap().result;
            println!(
                "seed {seed} {name:12}: macro {:.3}, per-domain {:?}",
                res.accuracy.macro_avg,
                res.accuracy
                    .per_domain
                    .iter()
                    .map(|a| (a * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            );
        }
    }
}
