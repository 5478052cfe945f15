//! Multi-round and centralized baselines for the one-shot method.
//!
//! FedAvg trains the same downstream classifier directly on the clients'
//! raw data over R communication rounds of E local epochs each, averaging
//! weights by example count. The centralized baseline trains once on the
//! pooled data. RNG streams are laid out so that FedAvg with one client,
//! one round and one local epoch consumes exactly the sequence of the
//! one-epoch centralized run, making the two bitwise equal.

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, train_epochs};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{flatten_params, load_flat_params};
use crate::rng::{RngScope, derive_rng};
use crate::server::SERVER_STREAM_ID;
use crate::types::{ClientDataset, LabeledExample};

/// Per-round communication accounting, in bytes at wire precision (f32).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommunicationReport {
    pub rounds: usize,
    pub clients: usize,
    pub params_per_model: usize,
    /// Client-to-server traffic per round (all clients).
    pub upload_bytes_per_round: usize,
    pub total_upload_bytes: usize,
}

pub struct FedAvgOutcome {
    pub classifier: Classifier,
    /// Mean local loss per round, averaged over clients.
    pub round_losses: Vec<f64>,
    pub communication: CommunicationReport,
}

fn fresh_classifier(cfg: &RunConfig, num_classes: usize) -> Classifier {
    let mut rng = derive_rng(cfg.seed, RngScope::Train, SERVER_STREAM_ID);
    Classifier::new(num_classes, &mut rng)
}

/// Example-count-weighted average of flattened weights.
pub fn weighted_average(flats: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
    let total: f64 = flats.iter().map(|(_, w)| w).sum();
    if flats.is_empty() || total <= 0.0 {
        return Err(Error::InvalidArgument("weighted average needs positive weights".into()));
    }
    let len = flats[0].0.len();
    if flats.iter().any(|(f, _)| f.len() != len) {
        return Err(Error::ShapeMismatch {
            expected: format!("{len} weights"),
            actual: "mismatched model sizes".into(),
        });
    }
    let mut out = vec![0.0; len];
    for (flat, w) in flats {
        let scale = w / total;
        for (acc, &v) in out.iter_mut().zip(flat) {
            *acc += scale * v;
        }
    }
    Ok(out)
}

pub fn fedavg(clients: &[&ClientDataset], num_classes: usize, cfg: &RunConfig) -> Result<FedAvgOutcome> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("fedavg needs at least one client".into()));
    }
    let mut global = fresh_classifier(cfg, num_classes);
    let params_per_model = flatten_params(&global.params_ref()).len();
    // One persistent stream per client: local batching noise continues
    // across rounds instead of repeating.
    let mut client_rngs: Vec<_> = clients
        .iter()
        .map(|c| derive_rng(cfg.seed, RngScope::Train, c.client_id))
        .collect();

    let mut round_losses = Vec::with_capacity(cfg.fedavg_rounds);
    for _ in 0..cfg.fedavg_rounds {
        let mut flats = Vec::with_capacity(clients.len());
        let mut loss_acc = 0.0;
        for (client, rng) in clients.iter().zip(client_rngs.iter_mut()) {
            let mut local = global.clone();
            let trace = train_epochs(
                &mut local,
                &client.examples,
                cfg.fedavg_local_epochs,
                cfg.classifier_lr,
                cfg.classifier_momentum,
                cfg.classifier_batch,
                rng,
            )?;
            loss_acc += trace.last().copied().unwrap_or(0.0);
            flats.push((flatten_params(&local.params_ref()), client.len() as f64));
        }
        let avg = weighted_average(&flats)?;
        load_flat_params(&mut global.params(), &avg);
        round_losses.push(loss_acc / clients.len() as f64);
    }

    let upload_bytes_per_round = clients.len() * params_per_model * 4;
    Ok(FedAvgOutcome {
        classifier: global,
        round_losses,
        communication: CommunicationReport {
            rounds: cfg.fedavg_rounds,
            clients: clients.len(),
            params_per_model,
            upload_bytes_per_round,
            total_upload_bytes: upload_bytes_per_round * cfg.fedavg_rounds,
        },
    })
}

/// Trains the classifier once on the pooled data for `epochs` epochs.
pub fn central(
    data: &[LabeledExample],
    num_classes: usize,
    epochs: usize,
    cfg: &RunConfig,
) -> Result<(Classifier, Vec<f64>)> {
    let mut clf = fresh_classifier(cfg, num_classes);
    // Client 0's stream: with a single client and one round of one local
    // epoch, FedAvg replays this exact computation.
    let mut rng = derive_rng(cfg.seed, RngScope::Train, 0);
    let trace = train_epochs(
        &mut clf,
        data,
        epochs,
        cfg.classifier_lr,
        cfg.classifier_momentum,
        cfg.classifier_batch,
        &mut rng,
    )?;
    Ok((clf, trace))
}
