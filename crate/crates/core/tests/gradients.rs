use formation_diffusion::ddpm::NoiseSchedule;
use formation_diffusion::nn::unet::sequences_to_feat;
use formation_diffusion::nn::{check_gradients, loss_gradients, Batch, ConditionalUnet1d, NetworkConfig, ParameterStore, Rows};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HORIZON: usize = 8;
const OBS: usize = 5;

fn reduced() -> ConditionalUnet1d {
    ConditionalUnet1d::new(NetworkConfig {
        down_dims: vec![8, 16],
        step_embed_dim: 8,
        cond_dim: OBS,
        ..NetworkConfig::default()
    })
    .unwrap()
}

/// Parameters away from the identity-like start so every path carries gradient.
fn perturbed(net: &ConditionalUnet1d, rng: &mut ChaCha8Rng) -> ParameterStore<f64> {
    let mut p: ParameterStore<f64> = net.init_params(rng);
    for v in p.flat_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    p
}

fn batch(rng: &mut ChaCha8Rng, b: usize) -> (Batch<f64>, Vec<usize>, Vec<f64>) {
    let n = b * HORIZON * 2;
    let batch = Batch {
        b,
        horizon: HORIZON,
        obs: (0..b * OBS).map(|_| rng.random_range(-1.0..1.0)).collect(),
        actions: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let steps = (0..b).map(|_| rng.random_range(0..20)).collect();
    let noise = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    (batch, steps, noise)
}

#[test]
fn gradients_match_finite_differences() {
    let net = reduced();
    let sched = NoiseSchedule::cosine(20).unwrap();
    for seed in [1, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = perturbed(&net, &mut rng);
        let (b, ks, eps) = batch(&mut rng, 3);
        let r = check_gradients(&net, &p, &sched, &b, &ks, &eps, 1e-5, 1e-6).unwrap();
        assert_eq!(r.checked, p.len());
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn final_bias_gradient_is_the_mse_derivative() {
    let net = reduced();
    let sched = NoiseSchedule::cosine(20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = perturbed(&net, &mut rng);
    p.get_mut(net.final_weight()).iter_mut().for_each(|w| *w = 0.0);
    let bias = [0.25, -0.4];
    p.get_mut(net.final_bias()).copy_from_slice(&bias);
    let (b, ks, eps) = batch(&mut rng, 2);
    let (_, g) = loss_gradients(&net, &p, &sched, &b, &ks, &eps).unwrap();
    let n = eps.len() as f64;
    for c in 0..2 {
        let expect: f64 = eps.iter().skip(c).step_by(2).map(|e| 2.0 * (bias[c] - e) / n).sum();
        assert!((g.get(net.final_bias())[c] - expect).abs() < 1e-12);
    }
}

#[test]
fn duplicated_batch_gives_identical_gradients() {
    let net = reduced();
    let sched = NoiseSchedule::cosine(20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = perturbed(&net, &mut rng);
    let (b, ks, eps) = batch(&mut rng, 1);
    let twice = Batch { b: 2, horizon: HORIZON, obs: b.obs.repeat(2), actions: b.actions.repeat(2) };
    let (l1, g1) = loss_gradients(&net, &p, &sched, &b, &ks, &eps).unwrap();
    let (l2, g2) = loss_gradients(&net, &p, &sched, &twice, &ks.repeat(2), &eps.repeat(2)).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (a, c) in g1.flat().iter().zip(g2.flat()) {
        assert!((a - c).abs() <= 1e-10 * a.abs().max(1e-6));
    }
}

#[test]
fn observation_changes_output() {
    let net = reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = perturbed(&net, &mut rng);
    let x = sequences_to_feat(&(0..HORIZON * 2).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>(), 1, HORIZON, 2);
    let mut obs = Rows { b: 1, f: OBS, data: vec![0.1; OBS] };
    let a = net.forward(&p, &x, &[3], &obs).unwrap();
    obs.data[2] += 0.05;
    let b = net.forward(&p, &x, &[3], &obs).unwrap();
    assert!(a.data.iter().zip(&b.data).any(|(u, v)| (u - v).abs() > 1e-9));
}

#[test]
fn fresh_network_outputs_are_finite() {
    let net = ConditionalUnet1d::new(NetworkConfig { cond_dim: 63, ..NetworkConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p: ParameterStore<f32> = net.init_params(&mut rng);
    let b = 2;
    let x = sequences_to_feat(&(0..b * 64 * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>(), b, 64, 2);
    let obs = Rows { b, f: 63, data: (0..b * 63).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let y = net.forward(&p, &x, &[0, 99], &obs).unwrap();
    assert!(y.data.iter().all(|v| v.is_finite()));
}
