use nalgebra::DMatrix;

use sejd_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use sejd_core::conditioner::ConditionerHyper;
use sejd_core::data::gen_gradient_patches;
use sejd_core::decode::{layer_generate_jacobi, prefix_property_check, JacobiInit, PrefixReport};
use sejd_core::flow::{layer_generate_sequential, log_likelihood, model_generate, model_normalize, NetworkFlow};
use sejd_core::train::{adam_step, nll_loss_and_grads, AdamConfig, OptimizerState};
use sejd_core::{ConditionerParams, FlowModel, Matrix, Rng};

fn hyper(l: usize, d: usize, c: usize, b: usize) -> ConditionerHyper {
    ConditionerHyper {
        seq_len: l,
        patch_dim: d,
        channels: c,
        blocks: b,
        scale_clamp: 2.0,
    }
}

fn random_flow<T: sejd_core::Real>(
    seed: u64,
    k: usize,
    h: ConditionerHyper,
    std: f64,
) -> FlowModel<ConditionerParams<T>> {
    let mut rng = Rng::new(seed);
    let layers = (0..k)
        .map(|_| ConditionerParams::randomized(&mut rng, h, std).unwrap())
        .collect();
    FlowModel::new(layers, true).unwrap()
}

#[test]
fn neighbouring_patches_are_correlated() {
    let d = gen_gradient_patches(3, 10_000).unwrap();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mean = |m: &Matrix<f32>, i: usize| m.row(i).iter().map(|&v| v as f64).sum::<f64>() / 4.0;
    for s in &d.samples {
        for br in 0..4 {
            for bc in 0..4 {
                let here = br * 4 + bc;
                if bc + 1 < 4 {
                    xs.push(mean(s, here));
                    ys.push(mean(s, here + 1));
                }
                if br + 1 < 4 {
                    xs.push(mean(s, here));
                    ys.push(mean(s, here + 4));
                }
            }
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r = cov / (vx * vy).sqrt();
    assert!(r > 0.5, "pearson r = {r}");
}

#[test]
fn logdet_matches_finite_difference_jacobian() {
    for (seed, (l, d)) in [(1u64, (3usize, 4usize)), (2, (4, 3)), (3, (6, 2)), (4, (2, 2))] {
        let model: NetworkFlow<f64> = random_flow(seed, 2, hyper(l, d, 8, 1), 0.3);
        let x: Matrix<f64> = Rng::new(seed + 100).normal_matrix(l, d, 1.0);
        let (_, logdet) = model_normalize(&model, &x).unwrap();
        let n = l * d;
        let h = 1e-6;
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.data_mut()[j] += h;
            minus.data_mut()[j] -= h;
            let (zp, _) = model_normalize(&model, &plus).unwrap();
            let (zm, _) = model_normalize(&model, &minus).unwrap();
            for i in 0..n {
                jac[(i, j)] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
            }
        }
        let fd = jac.determinant().abs().ln();
        let rel = (fd - logdet).abs() / logdet.abs().max(1.0);
        assert!(rel < 1e-4, "L={l} D={d}: analytic {logdet} fd {fd}");
    }
}

#[test]
fn normalize_generate_roundtrip_f32() {
    let model: NetworkFlow = random_flow(9, 3, hyper(8, 4, 16, 2), 0.2);
    let mut rng = Rng::new(10);
    for _ in 0..200 {
        let x: Matrix<f32> = rng.normal_matrix(8, 4, 1.0);
        let (z, _) = model_normalize(&model, &x).unwrap();
        let back = model_generate(&model, &z).unwrap();
        let err = x
            .data()
            .iter()
            .zip(back.data())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-4, "roundtrip error {err}");
    }
}

/// A one-layer, two-variable flow fit to a curved density; its likelihood
/// must integrate to one over the plane.
#[test]
fn trained_two_dimensional_density_integrates_to_one() {
    let h = hyper(2, 1, 8, 1);
    let mut rng = Rng::new(17);
    let layers = vec![ConditionerParams::<f32>::init(&mut rng, h).unwrap()];
    let data: Vec<Matrix<f32>> = (0..512)
        .map(|_| {
            let a = rng.normal();
            let b = 0.5 * a * a - 0.5 + 0.3 * rng.normal();
            Matrix::from_vec(2, 1, vec![a as f32, b as f32]).unwrap()
        })
        .collect();
    let cfg = AdamConfig {
        lr: 1e-2,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
        clip: 1.0,
    };
    let mut model = FlowModel::new(layers, false).unwrap();
    let mut state = OptimizerState::for_layers(model.layers());
    let mut first_loss = None;
    let mut last_loss = 0.0;
    for step in 0..300 {
        let batch: Vec<&Matrix<f32>> = (0..32).map(|i| &data[(step * 32 + i) % data.len()]).collect();
        let (loss, mut grads) = nll_loss_and_grads(&model, &batch).unwrap();
        first_loss.get_or_insert(loss);
        last_loss = loss;
        let mut layers = model.layers().to_vec();
        {
            let mut p: Vec<&mut [f32]> = layers
                .iter_mut()
                .flat_map(|l| l.tensors_mut().into_iter().map(|(_, m)| m.data_mut()))
                .collect();
            let mut g: Vec<&mut [f32]> = grads
                .iter_mut()
                .flat_map(|l| l.tensors_mut().into_iter().map(|(_, m)| m.data_mut()))
                .collect();
            adam_step(&mut state, &mut p, &mut g, &cfg);
        }
        model = FlowModel::new(layers, false).unwrap();
    }
    assert!(last_loss < first_loss.unwrap() - 0.2, "{first_loss:?} -> {last_loss}");

    let (lo, hi, step) = (-9.0f64, 9.0f64, 0.03f64);
    let n = ((hi - lo) / step) as usize;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = lo + (i as f64 + 0.5) * step;
            let b = lo + (j as f64 + 0.5) * step;
            let x = Matrix::from_vec(2, 1, vec![a as f32, b as f32]).unwrap();
            mass += log_likelihood(&model, &x).unwrap().exp() * step * step;
        }
    }
    assert!((mass - 1.0).abs() < 0.05, "integrated mass {mass}");
}

#[test]
fn exact_jacobi_equals_sequential_on_random_layers() {
    for seed in 0..20u64 {
        let l = [4, 8, 16][seed as usize % 3];
        let layer = ConditionerParams::<f32>::randomized(&mut Rng::new(seed), hyper(l, 3, 16, 2), 0.3).unwrap();
        let u: Matrix<f32> = Rng::new(seed + 50).normal_matrix(l, 3, 1.0);
        let seq = layer_generate_sequential(&layer, &u).unwrap();
        let jac = layer_generate_jacobi(&layer, &u, 0.0, l, None, JacobiInit::Zeros).unwrap();
        let err = seq
            .data()
            .iter()
            .zip(jac.y.data())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-5, "seed {seed}: {err}");
        assert_eq!(prefix_property_check(&layer, &u).unwrap(), PrefixReport::Holds);
    }
}

#[test]
fn iterations_do_not_grow_with_tau() {
    let layer = ConditionerParams::<f32>::randomized(&mut Rng::new(4), hyper(16, 4, 16, 2), 0.3).unwrap();
    for seed in 0..10u64 {
        let u: Matrix<f32> = Rng::new(seed).normal_matrix(16, 4, 1.0);
        let mut prev = usize::MAX;
        for tau in [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 10.0] {
            let used = layer_generate_jacobi(&layer, &u, tau, 16, None, JacobiInit::Zeros)
                .unwrap()
                .trace
                .iterations_used;
            assert!(used <= prev, "tau {tau}: {used} > {prev}");
            prev = used;
        }
    }
}

#[test]
fn checkpoint_fuzzing_never_panics() {
    let model: NetworkFlow = random_flow(5, 2, hyper(4, 2, 8, 1), 0.1);
    let bytes = encode_checkpoint(&model).unwrap();
    let mut rng = Rng::new(77);
    for _ in 0..200 {
        let cut = rng.below(bytes.len());
        assert!(
            decode_checkpoint(&bytes[..cut]).is_err(),
            "truncation at {cut} accepted"
        );
        let mut bad = bytes.clone();
        let at = rng.below(bad.len());
        bad[at] ^= 1 + rng.below(255) as u8;
        let _ = decode_checkpoint(&bad);
    }
}
