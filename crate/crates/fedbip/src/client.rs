//! Client-side personalization: instance-level latent interpolation and
//! concept-level prompt optimization against the frozen backbone.
//!
//! A client touches the network exactly once. Everything here is a pure
//! function of (dataset, backbone, config), with all randomness drawn
//! from streams derived from the global seed and the client id, so client
//! updates can run in any order or in parallel without changing results.

use ndarray::{Array2, Array3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ldm::{
    LdmParams, LossExample, SlotValue, forward_diffuse, init_concept_rows, ldm_loss_fixed_grad,
    standard_normal_latent,
};
use crate::nn::{Optimizer, Param};
use crate::rng::{RngScope, derive_rng};
use crate::types::{ClientDataset, ClientUpload, ConceptVectors, LatentTensor};

/// Interpolation weight gamma ~ N(mean, std) clipped to [0, 1].
pub fn sample_gamma(mean: f64, std: f64, rng: &mut impl Rng) -> f64 {
    let normal = Normal::new(mean, std).expect("gamma distribution parameters");
    normal.sample(rng).clamp(0.0, 1.0)
}

/// Builds the instance-level upload latents: for each example, its clean
/// latent is mixed with a same-class partner's and pushed to t = T.
///
/// With `prototype_mode` the partner is the class mean latent. A class
/// singleton is mixed with itself, which degenerates to plain diffusion
/// of the example.
pub fn instance_personalize(
    model: &LdmParams,
    dataset: &ClientDataset,
    cfg: &RunConfig,
    gamma_rng: &mut impl Rng,
    noise_rng: &mut impl Rng,
) -> Result<Vec<(LatentTensor, usize)>> {
    let t_max = model.schedule.t_max();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    mix_latents(model, dataset, cfg, gamma_rng)?
        .into_iter()
        .map(|(mixed, label)| {
            let (h, w, c) = mixed.shape();
            let eps = Array3::from_shape_fn((h, w, c), |_| normal.sample(noise_rng));
            Ok((forward_diffuse(&mixed, t_max, &eps, &model.schedule)?, label))
        })
        .collect()
}

/// The pre-noise interpolations z(0) underlying [`instance_personalize`]:
/// everything but the final push to t = T. Consumes the gamma stream in
/// the same order, so the two functions agree draw for draw.
pub fn mix_latents(
    model: &LdmParams,
    dataset: &ClientDataset,
    cfg: &RunConfig,
    gamma_rng: &mut impl Rng,
) -> Result<Vec<(LatentTensor, usize)>> {
    let z0: Vec<LatentTensor> = dataset
        .examples
        .iter()
        .map(|e| model.encode(&e.image))
        .collect::<Result<_>>()?;

    let mut prototypes: Vec<Option<Array3<f64>>> = Vec::new();
    if cfg.prototype_mode {
        let num_classes = model.num_classes();
        prototypes = (0..num_classes)
            .map(|y| {
                let members: Vec<&LatentTensor> = dataset
                    .examples
                    .iter()
                    .zip(&z0)
                    .filter(|(e, _)| e.label == y)
                    .map(|(_, z)| z)
                    .collect();
                if members.is_empty() {
                    return None;
                }
                let mut acc = Array3::zeros(members[0].values().raw_dim());
                for z in &members {
                    acc += z.values();
                }
                Some(acc / members.len() as f64)
            })
            .collect();
    }

    let mut out = Vec::with_capacity(dataset.examples.len());
    for (i, e) in dataset.examples.iter().enumerate() {
        let gamma = sample_gamma(cfg.gamma_mean, cfg.gamma_std, gamma_rng);
        let partner: Array3<f64> = if cfg.prototype_mode {
            prototypes[e.label].clone().expect("class of an existing example has a prototype")
        } else {
            let peers: Vec<usize> = dataset
                .examples
                .iter()
                .enumerate()
                .filter(|(j, p)| *j != i && p.label == e.label)
                .map(|(j, _)| j)
                .collect();
            match peers.as_slice() {
                [] => z0[i].values().clone(),
                _ => z0[*peers.choose(gamma_rng).unwrap()].values().clone(),
            }
        };
        let mixed = LatentTensor::new(z0[i].values() * gamma + &partner * (1.0 - gamma))?;
        out.push((mixed, e.label));
    }
    Ok(out)
}

/// Trace of the concept optimization plus the verified-frozen backbone
/// checksum.
#[derive(Debug, Clone)]
pub struct ConceptReport {
    /// Mean batch loss after each of the N optimization steps.
    pub loss_trace: Vec<f64>,
}

/// Optimizes the domain concept S and the per-class concepts V on the
/// client's data with plain SGD, holding the backbone frozen. Concepts
/// are warm-started from the pretrained vocabulary embeddings; classes
/// the client never saw keep that initialization and are flagged
/// unoptimized.
pub fn concept_optimize(
    model: &LdmParams,
    dataset: &ClientDataset,
    cfg: &RunConfig,
    init_rng: &mut impl Rng,
    train_rng: &mut impl Rng,
) -> Result<(ConceptVectors, ConceptReport)> {
    let dims = &model.dims;
    let num_classes = model.num_classes();
    if let Some(bad) = dataset.examples.iter().find(|e| e.label >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for C={num_classes}",
            bad.label
        )));
    }
    // Warm start from the pretrained vocabulary: each concept row is the
    // matching token embedding plus small noise, so optimization refines
    // a working prompt instead of recovering one from scratch. The domain
    // slot falls back to pure noise when the client's domain is unknown.
    let embed = &model.conditioner.embed.value;
    let warm = |mut rows: ndarray::Array2<f64>, token: Option<usize>| {
        if let Some(tok) = token {
            for r in 0..rows.shape()[0] {
                for j in 0..rows.shape()[1] {
                    rows[[r, j]] += embed[[tok, j]];
                }
            }
        }
        rows
    };
    let s_token = match dataset.domain_id {
        Some(d) => Some(model.vocab.domain_token(d)?),
        None => None,
    };
    let mut s_param =
        Param::new(warm(init_concept_rows(dims.n_s, dims.d_w, init_rng), s_token).into_dyn());
    let mut v_params: Vec<Param> = (0..num_classes)
        .map(|y| {
            let tok = model.vocab.class_token(y)?;
            Ok(Param::new(
                warm(init_concept_rows(dims.n_v, dims.d_w, init_rng), Some(tok)).into_dyn(),
            ))
        })
        .collect::<Result<_>>()?;

    let backbone_before = model.checksum();
    let z0: Vec<LatentTensor> = dataset
        .examples
        .iter()
        .map(|e| model.encode(&e.image))
        .collect::<Result<_>>()?;

    // The backbone is only read here; gradients accumulated on these
    // working copies are discarded, never stepped.
    let mut denoiser = model.denoiser.clone();
    let mut conditioner = model.conditioner.clone();

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let t_max = model.schedule.t_max();
    let batch = cfg.client_batch.max(1).min(dataset.len());
    let mut opt = Optimizer::Sgd { lr: cfg.concept_lr };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.n_step);

    for _ in 0..cfg.n_step {
        order.shuffle(train_rng);
        let chunk = &order[..batch];
        let mut step_loss = 0.0;
        let mut touched: Vec<usize> = Vec::new();
        for &i in chunk {
            let y = dataset.examples[i].label;
            let s_view = s_param
                .value
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("S is 2-D");
            let v_view = v_params[y]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("V rows are 2-D");
            let s_arr = s_view.to_owned();
            let v_arr = v_view.to_owned();
            let ex = LossExample {
                z0: &z0[i],
                style: SlotValue::Concept(&s_arr),
                class: SlotValue::Concept(&v_arr),
            };
            let t = train_rng.random_range(1..=t_max);
            let (h, w, c) = z0[i].shape();
            let eps = Array3::from_shape_fn((h, w, c), |_| normal.sample(train_rng));
            let (loss, grads) = ldm_loss_fixed_grad(
                &mut denoiser,
                &mut conditioner,
                &model.template,
                &model.schedule,
                &ex,
                t,
                &eps,
                1.0 / batch as f64,
            )?;
            step_loss += loss / batch as f64;
            s_param.grad += &grads.style.into_dyn();
            v_params[y].grad += &grads.class.into_dyn();
            touched.push(y);
        }
        if !step_loss.is_finite() {
            return Err(Error::Divergence("concept optimization loss is non-finite".into()));
        }
        loss_trace.push(step_loss);
        // Step only the concepts; discard the backbone working grads.
        touched.sort_unstable();
        touched.dedup();
        let mut params: Vec<&mut Param> = vec![&mut s_param];
        params.extend(
            v_params
                .iter_mut()
                .enumerate()
                .filter(|(y, _)| touched.contains(y))
                .map(|(_, p)| p),
        );
        opt.step(&mut params);
        for p in denoiser.params() {
            p.zero_grad();
        }
        for p in conditioner.params() {
            p.zero_grad();
        }
    }

    assert_eq!(
        model.checksum(),
        backbone_before,
        "backbone weights changed during concept optimization"
    );

    let mut optimized = vec![false; num_classes];
    for e in &dataset.examples {
        optimized[e.label] = true;
    }
    let s = s_param
        .value
        .into_dimensionality::<ndarray::Ix2>()
        .expect("S is 2-D");
    let mut v = Array3::zeros((num_classes, dims.n_v, dims.d_w));
    for (y, p) in v_params.into_iter().enumerate() {
        let rows: Array2<f64> = p.value.into_dimensionality().expect("V rows are 2-D");
        v.index_axis_mut(ndarray::Axis(0), y).assign(&rows);
    }
    let concepts = ConceptVectors::new(s, v, optimized)?;
    Ok((concepts, ConceptReport { loss_trace }))
}

/// The full client computation: one dataset in, one upload out.
pub fn client_update(
    model: &LdmParams,
    dataset: &ClientDataset,
    cfg: &RunConfig,
) -> Result<(ClientUpload, ConceptReport)> {
    let id = dataset.client_id;
    let mut gamma_rng = derive_rng(cfg.seed, RngScope::Gamma, id);
    let mut noise_rng = derive_rng(cfg.seed, RngScope::Noise, id);
    let mut init_rng = derive_rng(cfg.seed, RngScope::ConceptInit, id);
    let mut train_rng = derive_rng(cfg.seed, RngScope::Train, id);

    let latents = if cfg.ablation.use_instance {
        instance_personalize(model, dataset, cfg, &mut gamma_rng, &mut noise_rng)?
    } else {
        // Instance personalization disabled: the synthesis pass starts
        // from pure noise, one draw per private example.
        dataset
            .examples
            .iter()
            .map(|e| (standard_normal_latent(&model.dims, &mut noise_rng), e.label))
            .collect()
    };

    let needs_concepts = cfg.ablation.use_concept_s || cfg.ablation.use_concept_v;
    let (concepts, report) = if needs_concepts {
        concept_optimize(model, dataset, cfg, &mut init_rng, &mut train_rng)?
    } else {
        let dims = &model.dims;
        let num_classes = model.num_classes();
        let s = init_concept_rows(dims.n_s, dims.d_w, &mut init_rng);
        let mut v = Array3::zeros((num_classes, dims.n_v, dims.d_w));
        for y in 0..num_classes {
            v.index_axis_mut(ndarray::Axis(0), y)
                .assign(&init_concept_rows(dims.n_v, dims.d_w, &mut init_rng));
        }
        (
            ConceptVectors::new(s, v, vec![false; num_classes])?,
            ConceptReport { loss_trace: Vec::new() },
        )
    };

    let provenance = format!("seed={};client={id}", cfg.seed);
    let upload = ClientUpload::new(id, latents, concepts, dataset.domain_id, provenance)?;
    Ok((upload, report))
}
