mod common;

use common::{rel_err, rng, FD_STEP};
use kseg::kspace::{undersample, KSample, KSpaceSampleSet, UndersampleConfig};
use kseg::model::{ModelConfig, ModelParams, QuerySet};
use kseg::phantom::{generate_phantom, PhantomParams};
use kseg::tensor::{Tape, Tensor};
use kseg::train::{loss_and_grads, sample_query_voxels, QueryBatch};
use rand::seq::SliceRandom;
use rand::Rng;

fn random_samples(n: usize, seed: u64) -> KSpaceSampleSet {
    let mut r = rng(seed);
    let mut set = KSpaceSampleSet::empty(8, 64, 64);
    for _ in 0..n {
        set.samples.push(KSample {
            ky: r.random_range(0..64),
            kx: r.random_range(0..64),
            t: r.random_range(0..8),
            re: r.random_range(-1.0..1.0),
            im: r.random_range(-1.0..1.0),
        });
    }
    set
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

#[test]
fn encoder_ignores_sample_order() {
    let scan = generate_phantom(&PhantomParams::default()).unwrap();
    let cfg = UndersampleConfig {
        acceleration: 8.0,
        ..Default::default()
    };
    let (samples, _) = undersample(&scan, &cfg, &mut rng(4)).unwrap();
    assert_eq!(samples.len(), 4096);
    let params = ModelParams::init(ModelConfig::default(), 1).unwrap();
    let reference = params.encode(&samples).unwrap();
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut shuffled = samples.clone();
        shuffled.samples.shuffle(&mut r);
        worst = worst.max(max_diff(&params.encode(&shuffled).unwrap(), &reference));
    }
    assert!(worst <= 1e-9, "permutation changed latents by {worst}");
}

#[test]
fn encoder_accepts_any_sample_count() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(cfg, 2).unwrap();
    for n in [1, 7, 64, 4096] {
        let latents = params.encode(&random_samples(n, n as u64)).unwrap();
        assert_eq!(latents.shape(), &[cfg.latents, cfg.width]);
        assert!(latents.is_finite());
    }
}

#[test]
fn chunked_decoding_matches_whole() {
    let params = ModelParams::init(ModelConfig::default(), 3).unwrap();
    let latents = params.encode(&random_samples(100, 1)).unwrap();
    let grid = QuerySet::grid(2, 8, 8);
    let whole = params.decode(&latents, &grid).unwrap();
    let parts: Vec<f64> = grid
        .chunks(13)
        .flat_map(|c| params.decode(&latents, &c).unwrap().into_data())
        .collect();
    let chunked = Tensor::new(whole.shape().to_vec(), parts).unwrap();
    assert!(max_diff(&whole, &chunked) <= 1e-12);
}

#[test]
fn queries_are_decoded_independently() {
    let params = ModelParams::init(ModelConfig::default(), 4).unwrap();
    let latents = params.encode(&random_samples(50, 2)).unwrap();
    let a = QuerySet::new(vec![[0.1, -0.2, 0.3], [-0.9, 0.9, -1.0]]).unwrap();
    let mut coords = a.coords().to_vec();
    coords.extend([[0.5, 0.5, 0.5], [-0.3, 0.0, 1.0], [1.0, 1.0, 1.0]]);
    let ab = QuerySet::new(coords).unwrap();
    let alone = params.decode(&latents, &a).unwrap();
    let together = params.decode(&latents, &ab).unwrap();
    let c = alone.last_dim();
    let head = Tensor::new(alone.shape().to_vec(), together.data()[..2 * c].to_vec()).unwrap();
    assert!(max_diff(&alone, &head) <= 1e-12);
}

#[test]
fn equal_keys_average_the_values() {
    let mut r = rng(6);
    let mut tape = Tape::new();
    let q = tape.constant(common::random_tensor(&mut r, &[3, 4], -1.0, 1.0));
    let row = common::random_tensor(&mut r, &[1, 4], -1.0, 1.0);
    let k = tape.constant(Tensor::new(vec![5, 4], row.data().repeat(5)).unwrap());
    let values = common::random_tensor(&mut r, &[5, 4], -1.0, 1.0);
    let v = tape.constant(values.clone());
    let out = tape.attention(q, k, v, 2).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mean = (0..5).map(|n| values.data()[n * 4 + j]).sum::<f64>() / 5.0;
            assert!((tape.value(out).data()[i * 4 + j] - mean).abs() < 1e-12);
        }
    }
}

/// Central differences of the full Dice + BCE loss with respect to every parameter.
#[test]
fn end_to_end_gradient_check_on_micro_model() {
    let cfg = ModelConfig {
        latents: 8,
        width: 16,
        heads: 2,
        frequencies: 2,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(cfg, 7).unwrap();
    let samples = random_samples(32, 3);
    let scan = generate_phantom(&PhantomParams {
        frames: 8,
        ..Default::default()
    })
    .unwrap();
    let voxels = sample_query_voxels(&scan, 16, 0.5, &mut rng(8));
    let batch = QueryBatch::from_voxels(&scan, &voxels, 3).unwrap();
    let (_, grads) = loss_and_grads(&params, &samples, &batch, 1.0, 1.0).unwrap();
    let loss = |p: &ModelParams| loss_and_grads(p, &samples, &batch, 1.0, 1.0).unwrap().0.total;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = params.tensors()[i].data()[j];
            probe.tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
            let plus = loss(&probe);
            probe.tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
            let minus = loss(&probe);
            probe.tensors_mut()[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(g[j], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    assert!(worst < 1e-3, "end-to-end relative gradient error {worst}");
}
