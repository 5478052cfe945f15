//! Microbenchmarks for the hot numeric kernels: encode/decode, forward
//! diffusion, DDIM sampling, and conditioning.

use criterion::{Criterion, criterion_group, criterion_main};
use ndarray::Array3;

use fedbip::config::ModelDims;
use fedbip::ldm::{FINAL_ALPHA_BAR, LdmParams, SlotValue, forward_diffuse, sample};
use fedbip::rng::{RngScope, derive_rng};
use fedbip::types::{Image, LatentTensor, NoiseSchedule};

fn dims() -> ModelDims {
    ModelDims {
        image_size: 32,
        latent_h: 8,
        latent_w: 8,
        latent_c: 4,
        t_max: 200,
        ..ModelDims::default()
    }
}

fn model(dims: &ModelDims) -> LdmParams {
    let mut rng = derive_rng(7, RngScope::Train, 0);
    let domains: Vec<String> = (0..2).map(|d| format!("domain{d}")).collect();
    let classes: Vec<String> = (0..4).map(|c| format!("class{c}")).collect();
    LdmParams::new(dims, &domains, &classes, &mut rng).expect("valid dims")
}

fn bench_kernels(c: &mut Criterion) {
    let d = dims();
    let m = model(&d);
    let image = Image::from_unclamped(Array3::from_shape_fn(
        (d.image_size, d.image_size, 3),
        |(i, j, k)| ((i * 7 + j * 3 + k) % 17) as f64 / 17.0,
    ))
    .expect("rgb image");
    let z = m.encode(&image).expect("encode");
    let eps = Array3::from_elem((d.latent_h, d.latent_w, d.latent_c), 0.3);
    let schedule = NoiseSchedule::linear(d.t_max, FINAL_ALPHA_BAR).expect("schedule");
    let cond = m
        .condition(
            &SlotValue::Vocab(m.vocab.domain_token(0).expect("domain token")),
            &SlotValue::Vocab(m.vocab.class_token(0).expect("class token")),
        )
        .expect("conditioning");

    c.bench_function("encode_32px", |b| b.iter(|| m.encode(&image).expect("encode")));
    c.bench_function("decode_8x8x4", |b| b.iter(|| m.decode(&z).expect("decode")));
    c.bench_function("forward_diffuse", |b| {
        b.iter(|| forward_diffuse(&z, d.t_max / 2, &eps, &schedule).expect("diffuse"))
    });
    c.bench_function("condition", |b| {
        b.iter(|| {
            m.condition(
                &SlotValue::Vocab(m.vocab.domain_token(0).expect("domain token")),
                &SlotValue::Vocab(m.vocab.class_token(0).expect("class token")),
            )
            .expect("conditioning")
        })
    });
    c.bench_function("ddim_sample_10_steps", |b| {
        let start = LatentTensor::new(eps.clone()).expect("finite latent");
        b.iter(|| {
            let mut rng = derive_rng(7, RngScope::Sampler, 0);
            sample(&m.denoiser, &schedule, &start, &cond, 10, 0.0, &mut rng).expect("sample")
        })
    });
}

criterion_group!(benches, bench_kernels);
criterion_main!(benches);
