//! Experiment configuration.
//!
//! Configs are flat JSON objects with dotted keys ("client.n_step": 50).
//! Unknown keys are hard errors so ablation presets cannot silently drift.

use serde_json::{Map, Value};
use std::path::Path;

use crate::error::{Error, Result};

/// Toy model dimensions shared by encoder, denoiser and conditioner.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub image_size: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub latent_c: usize,
    /// Token embedding width of the conditioner.
    pub d_w: usize,
    /// Conditioning vector width fed to the denoiser.
    pub d_cond: usize,
    pub n_s: usize,
    pub n_v: usize,
    /// Denoiser hidden channels.
    pub hidden: usize,
    /// Diffusion timesteps T.
    pub t_max: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            image_size: 32,
            latent_h: 8,
            latent_w: 8,
            latent_c: 4,
            d_w: 16,
            d_cond: 16,
            n_s: 2,
            n_v: 2,
            hidden: 16,
            t_max: 100,
        }
    }
}

/// Ablation toggles mirroring the component matrix of the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationToggles {
    /// Upload noised interpolated latents (false: z(T) ~ N(0, I)).
    pub use_instance: bool,
    /// Learn the domain concept S (false: fixed domain vocabulary token).
    pub use_concept_s: bool,
    /// Learn per-class concepts V (false: fixed class vocabulary tokens).
    pub use_concept_v: bool,
    /// Perturb S on the server before each generation pass.
    pub use_perturbation: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            use_instance: true,
            use_concept_s: true,
            use_concept_v: true,
            use_perturbation: true,
        }
    }
}

/// Full experiment description. Everything a run needs, plus the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // Benchmark generation.
    pub classes: usize,
    pub domains: usize,
    /// Domain withheld from LDM pretraining (None: pretrain on all).
    pub rare_domain: Option<usize>,
    /// Images per (domain, class) cell in the federated benchmark,
    /// split into train shots and held-out test.
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    /// Images per (domain, class) cell in the pretraining corpus.
    pub pretrain_per_cell: usize,

    // Partitioning.
    pub partition_mode: PartitionMode,
    pub dirichlet_beta: f64,
    pub shots_per_class: usize,
    pub clients_per_domain: usize,
    /// Client count for dirichlet mode.
    pub num_clients: usize,

    pub dims: ModelDims,

    // Pretraining.
    pub ae_epochs: usize,
    pub denoiser_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    /// Conditioning augmentation: relative noise applied to slot
    /// embeddings on half of the denoiser-stage examples, so concept
    /// vectors near the vocabulary tokens stay on-manifold at sampling.
    pub cond_aug: f64,

    // Client update.
    pub n_step: usize,
    pub concept_lr: f64,
    pub client_batch: usize,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    pub prototype_mode: bool,

    // Server update.
    pub multiplier: usize,
    /// sigma_eta as a fraction of RMS(S).
    pub sigma_eta_rel: f64,
    pub sample_steps: usize,

    // Classifier.
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub classifier_momentum: f64,
    pub classifier_batch: usize,

    // Baselines.
    pub fedavg_rounds: usize,
    pub fedavg_local_epochs: usize,

    pub ablation: AblationToggles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Domain,
    Dirichlet,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            classes: 3,
            domains: 3,
            rare_domain: Some(2),
            train_per_cell: 16,
            test_per_cell: 16,
            pretrain_per_cell: 64,
            partition_mode: PartitionMode::Domain,
            dirichlet_beta: 0.5,
            shots_per_class: 16,
            clients_per_domain: 1,
            num_clients: 5,
            dims: ModelDims::default(),
            ae_epochs: 20,
            denoiser_epochs: 30,
            pretrain_lr: 2e-3,
            pretrain_batch: 16,
            cond_aug: 0.15,
            n_step: 50,
            concept_lr: 0.1,
            client_batch: 8,
            gamma_mean: 0.5,
            gamma_std: 0.1,
            prototype_mode: false,
            multiplier: 2,
            sigma_eta_rel: 0.1,
            sample_steps: 50,
            classifier_epochs: 30,
            classifier_lr: 0.02,
            classifier_momentum: 0.9,
            classifier_batch: 16,
            fedavg_rounds: 20,
            fedavg_local_epochs: 1,
            ablation: AblationToggles::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let positive = [
            ("classes", self.classes),
            ("domains", self.domains),
            ("train_per_cell", self.train_per_cell),
            ("test_per_cell", self.test_per_cell),
            ("shots_per_class", self.shots_per_class),
            ("clients_per_domain", self.clients_per_domain),
            ("num_clients", self.num_clients),
            ("multiplier", self.multiplier),
            ("sample_steps", self.sample_steps),
            ("model.d_w", d.d_w),
            ("model.n_s", d.n_s),
            ("model.n_v", d.n_v),
            ("model.t_max", d.t_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 3 || self.domains < 2 {
            return Err(Error::Config("benchmark needs C >= 3 and D >= 2".into()));
        }
        if self.dirichlet_beta <= 0.0 {
            return Err(Error::Config("dirichlet beta must be > 0".into()));
        }
        if self.gamma_std <= 0.0 {
            return Err(Error::Config("gamma std must be > 0".into()));
        }
        if self.sigma_eta_rel < 0.0 {
            return Err(Error::Config("sigma_eta must be >= 0".into()));
        }
        if self.cond_aug < 0.0 {
            return Err(Error::Config("cond_aug must be >= 0".into()));
        }
        if let Some(r) = self.rare_domain {
            if r >= self.domains {
                return Err(Error::Config(format!("rare_domain {r} out of range")));
            }
        }
        if self.train_per_cell < self.shots_per_class {
            return Err(Error::Config("train_per_cell must cover shots_per_class".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let map = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        Self::from_flat_map(map)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Applies dotted-key overrides onto the defaults. Unknown keys are
    /// collected and reported together.
    pub fn from_flat_map(map: &Map<String, Value>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut unknown = Vec::new();
        for (key, value) in map {
            if !cfg.apply_key(key, value)? {
                unknown.push(key.clone());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_key(&mut self, key: &str, value: &Value) -> Result<bool> {
        fn as_usize(key: &str, v: &Value) -> Result<usize> {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer")))
        }
        fn as_u64(key: &str, v: &Value) -> Result<u64> {
            v.as_u64().ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer")))
        }
        fn as_f64(key: &str, v: &Value) -> Result<f64> {
            v.as_f64().ok_or_else(|| Error::Config(format!("{key} must be a number")))
        }
        fn as_bool(key: &str, v: &Value) -> Result<bool> {
            v.as_bool().ok_or_else(|| Error::Config(format!("{key} must be a boolean")))
        }
        match key {
            "seed" => self.seed = as_u64(key, value)?,
            "benchmark.classes" => self.classes = as_usize(key, value)?,
            "benchmark.domains" => self.domains = as_usize(key, value)?,
            "benchmark.rare_domain" => {
                self.rare_domain =
                    if value.is_null() { None } else { Some(as_usize(key, value)?) }
            }
            "benchmark.train_per_cell" => self.train_per_cell = as_usize(key, value)?,
            "benchmark.test_per_cell" => self.test_per_cell = as_usize(key, value)?,
            "benchmark.pretrain_per_cell" => self.pretrain_per_cell = as_usize(key, value)?,
            "benchmark.image_size" => self.dims.image_size = as_usize(key, value)?,
            "partition.mode" => {
                self.partition_mode = match value.as_str() {
                    Some("domain") => PartitionMode::Domain,
                    Some("dirichlet") => PartitionMode::Dirichlet,
                    _ => return Err(Error::Config("partition.mode must be domain|dirichlet".into())),
                }
            }
            "partition.beta" => self.dirichlet_beta = as_f64(key, value)?,
            "partition.shots_per_class" => self.shots_per_class = as_usize(key, value)?,
            "partition.clients_per_domain" => self.clients_per_domain = as_usize(key, value)?,
            "partition.num_clients" => self.num_clients = as_usize(key, value)?,
            "model.latent_h" => self.dims.latent_h = as_usize(key, value)?,
            "model.latent_w" => self.dims.latent_w = as_usize(key, value)?,
            "model.latent_c" => self.dims.latent_c = as_usize(key, value)?,
            "model.d_w" => self.dims.d_w = as_usize(key, value)?,
            "model.d_cond" => self.dims.d_cond = as_usize(key, value)?,
            "model.n_s" => self.dims.n_s = as_usize(key, value)?,
            "model.n_v" => self.dims.n_v = as_usize(key, value)?,
            "model.hidden" => self.dims.hidden = as_usize(key, value)?,
            "model.t_max" => self.dims.t_max = as_usize(key, value)?,
            "pretrain.ae_epochs" => self.ae_epochs = as_usize(key, value)?,
            "pretrain.denoiser_epochs" => self.denoiser_epochs = as_usize(key, value)?,
            "pretrain.lr" => self.pretrain_lr = as_f64(key, value)?,
            "pretrain.batch" => self.pretrain_batch = as_usize(key, value)?,
            "pretrain.cond_aug" => self.cond_aug = as_f64(key, value)?,
            "client.n_step" => self.n_step = as_usize(key, value)?,
            "client.lr" => self.concept_lr = as_f64(key, value)?,
            "client.batch" => self.client_batch = as_usize(key, value)?,
            "client.gamma_mean" => self.gamma_mean = as_f64(key, value)?,
            "client.gamma_std" => self.gamma_std = as_f64(key, value)?,
            "client.prototype_mode" => self.prototype_mode = as_bool(key, value)?,
            "server.multiplier" => self.multiplier = as_usize(key, value)?,
            "server.sigma_eta_rel" => self.sigma_eta_rel = as_f64(key, value)?,
            "server.sample_steps" => self.sample_steps = as_usize(key, value)?,
            "classifier.epochs" => self.classifier_epochs = as_usize(key, value)?,
            "classifier.lr" => self.classifier_lr = as_f64(key, value)?,
            "classifier.momentum" => self.classifier_momentum = as_f64(key, value)?,
            "classifier.batch" => self.classifier_batch = as_usize(key, value)?,
            "fedavg.rounds" => self.fedavg_rounds = as_usize(key, value)?,
            "fedavg.local_epochs" => self.fedavg_local_epochs = as_usize(key, value)?,
            "ablation.use_instance" => self.ablation.use_instance = as_bool(key, value)?,
            "ablation.use_concept_s" => self.ablation.use_concept_s = as_bool(key, value)?,
            "ablation.use_concept_v" => self.ablation.use_concept_v = as_bool(key, value)?,
            "ablation.use_perturbation" => self.ablation.use_perturbation = as_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Serializes back to the flat dotted-key form (the config echo
    /// embedded in every result file).
    pub fn to_flat_map(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.into());
        put("benchmark.classes", self.classes.into());
        put("benchmark.domains", self.domains.into());
        put(
            "benchmark.rare_domain",
            self.rare_domain.map(Value::from).unwrap_or(Value::Null),
        );
        put("benchmark.train_per_cell", self.train_per_cell.into());
        put("benchmark.test_per_cell", self.test_per_cell.into());
        put("benchmark.pretrain_per_cell", self.pretrain_per_cell.into());
        put("benchmark.image_size", self.dims.image_size.into());
        put(
            "partition.mode",
            match self.partition_mode {
                PartitionMode::Domain => "domain".into(),
                PartitionMode::Dirichlet => "dirichlet".into(),
            },
        );
        put("partition.beta", self.dirichlet_beta.into());
        put("partition.shots_per_class", self.shots_per_class.into());
        put("partition.clients_per_domain", self.clients_per_domain.into());
        put("partition.num_clients", self.num_clients.into());
        put("model.latent_h", self.dims.latent_h.into());
        put("model.latent_w", self.dims.latent_w.into());
        put("model.latent_c", self.dims.latent_c.into());
        put("model.d_w", self.dims.d_w.into());
        put("model.d_cond", self.dims.d_cond.into());
        put("model.n_s", self.dims.n_s.into());
        put("model.n_v", self.dims.n_v.into());
        put("model.hidden", self.dims.hidden.into());
        put("model.t_max", self.dims.t_max.into());
        put("pretrain.ae_epochs", self.ae_epochs.into());
        put("pretrain.denoiser_epochs", self.denoiser_epochs.into());
        put("pretrain.lr", self.pretrain_lr.into());
        put("pretrain.batch", self.pretrain_batch.into());
        put("pretrain.cond_aug", self.cond_aug.into());
        put("client.n_step", self.n_step.into());
        put("client.lr", self.concept_lr.into());
        put("client.batch", self.client_batch.into());
        put("client.gamma_mean", self.gamma_mean.into());
        put("client.gamma_std", self.gamma_std.into());
        put("client.prototype_mode", self.prototype_mode.into());
        put("server.multiplier", self.multiplier.into());
        put("server.sigma_eta_rel", self.sigma_eta_rel.into());
        put("server.sample_steps", self.sample_steps.into());
        put("classifier.epochs", self.classifier_epochs.into());
        put("classifier.lr", self.classifier_lr.into());
        put("classifier.momentum", self.classifier_momentum.into());
        put("classifier.batch", self.classifier_batch.into());
        put("fedavg.rounds", self.fedavg_rounds.into());
        put("fedavg.local_epochs", self.fedavg_local_epochs.into());
        put("ablation.use_instance", self.ablation.use_instance.into());
        put("ablation.use_concept_s", self.ablation.use_concept_s.into());
        put("ablation.use_concept_v", self.ablation.use_concept_v.into());
        put("ablation.use_perturbation", self.ablation.use_perturbation.into());
        m
    }

    /// Named presets for the ablation matrix and the scaling sweeps.
    ///
    /// `table3-row1` .. `table3-row7` follow the component matrix:
    /// row1 = FedAvg, row2 = prompt-only, row3 = V only, row4 = S only,
    /// row5 = instance only, row6 = instance + S + V without perturbation,
    /// row7 = full method.
    pub fn preset(name: &str) -> Result<Vec<(String, RunConfig)>> {
        let base = RunConfig::default();
        let toggles = |i, s, v, p| AblationToggles {
            use_instance: i,
            use_concept_s: s,
            use_concept_v: v,
            use_perturbation: p,
        };
        match name {
            "table3-row1" => Ok(vec![("fedavg".into(), base)]),
            "table3-row2" => Ok(vec![(name.into(), {
                let mut c = base;
                c.ablation = toggles(false, false, false, false);
                c
            })]),
            "table3-row3" => Ok(vec![(name.into(), {
                let mut c = base;
                c.ablation = toggles(false, false, true, false);
                c
            })]),
            "table3-row4" => Ok(vec![(name.into(), {
                let mut c = base;
                c.ablation = toggles(false, true, false, true);
                c
            })]),
            "table3-row5" => Ok(vec![(name.into(), {
                let mut c = base;
                c.ablation = toggles(true, false, false, false);
                c
            })]),
            "table3-row6" => Ok(vec![(name.into(), {
                let mut c = base;
                c.ablation = toggles(true, true, true, false);
                c
            })]),
            "table3-row7" => Ok(vec![(name.into(), base)]),
            "fig4" => {
                // Client-count sweep: 1..=5 clients per domain.
                Ok((1..=5)
                    .map(|cpd| {
                        let mut c = base.clone();
                        c.clients_per_domain = cpd;
                        (format!("fig4-cpd{cpd}"), c)
                    })
                    .collect())
            }
            "fig5" => {
                // Synthesis-multiplier sweep.
                Ok([1usize, 2, 5, 10, 20]
                    .iter()
                    .map(|&m| {
                        let mut c = base.clone();
                        c.multiplier = m;
                        (format!("fig5-m{m}"), c)
                    })
                    .collect())
            }
            other => Err(Error::Config(format!("unknown preset: {other}"))),
        }
    }
}
