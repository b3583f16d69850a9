#![allow(dead_code)]

use mognet::blocks::{Activation, ModelConfig};
use mognet::model::{build_model, recalibrate_norms, ForwardOutput, Model, QuantModel};
use mognet::quant::levels;
use mognet::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(n: usize, k: u32, seed: u64) -> ModelConfig {
    ModelConfig {
        n,
        g: 2,
        k,
        stages: 2,
        blocks_per_stage: 1,
        class_count: 10,
        input_channels: 3,
        input_size: 8,
        master_seed: seed,
        ca_rule: 30,
    }
}

pub fn random_pixels(rng: &mut ChaCha8Rng, count: usize, cfg: &ModelConfig) -> Vec<u8> {
    let len = count * cfg.input_channels * cfg.input_size * cfg.input_size;
    (0..len).map(|_| rng.random()).collect()
}

pub fn pixels_to_real(pixels: &[u8], cfg: &ModelConfig) -> Tensor4<f64> {
    let per = cfg.input_channels * cfg.input_size * cfg.input_size;
    Tensor4::from_vec(
        [pixels.len() / per, cfg.input_channels, cfg.input_size, cfg.input_size],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .unwrap()
}

pub fn pixels_to_int(pixels: &[u8], cfg: &ModelConfig) -> Tensor4<i32> {
    let per = cfg.input_channels * cfg.input_size * cfg.input_size;
    mognet::infer::pixels_to_tensor(pixels, pixels.len() / per, cfg.input_channels, cfg.input_size).unwrap()
}

/// An untrained model whose batch norms are calibrated on random images and
/// whose affines are scrambled, so activations spread over every level and
/// some channels have negative slope.
pub fn random_model(cfg: &ModelConfig, seed: u64) -> Model {
    let mut model = build_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let calib = pixels_to_real(&random_pixels(&mut rng, 64, cfg), cfg);
    recalibrate_norms(&mut model, &calib, Activation::Quantized(cfg.k)).unwrap();
    let mut scramble = |p: &mut mognet::tensor::BnParams| {
        for c in 0..p.channels() {
            let sign = if rng.random_bool(0.2) { -1.0 } else { 1.0 };
            p.gamma[c] = sign * rng.random_range(0.1..0.6);
            p.beta[c] = rng.random_range(0.0..1.0);
        }
    };
    scramble(&mut model.stem_bn);
    for b in &mut model.blocks {
        for bn in &mut b.bns {
            scramble(bn);
        }
    }
    scramble(&mut model.head_bn);
    model
}

pub fn random_quant_model(cfg: &ModelConfig, seed: u64) -> QuantModel {
    random_model(cfg, seed).to_quant()
}

/// Number of elements where `real != level / (2^k − 1)` exactly over every recorded
/// k-bit activation, plus the number of compared elements.
pub fn trace_mismatches(real: &ForwardOutput, int: &mognet::infer::IntOutput, k: u32) -> (usize, usize) {
    let l = levels(k) as f64;
    let mut bad = 0;
    let mut total = 0;
    let ints: std::collections::HashMap<&str, &Tensor4<i32>> =
        int.trace.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, t) in &real.trace {
        let Some(it) = ints.get(name.as_str()) else {
            assert_eq!(name, "head.bn", "layer {name} missing from the integer trace");
            continue;
        };
        assert_eq!(t.dims(), it.dims(), "{name}");
        for (&r, &i) in t.data().iter().zip(it.data()) {
            total += 1;
            if r != f64::from(i) / l {
                bad += 1;
            }
        }
    }
    (bad, total)
}
