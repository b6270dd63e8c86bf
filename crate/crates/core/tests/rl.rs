use flowcem::metrics::NullSink;
use flowcem::rewards::neg_sq_dist;
use flowcem::rl::{
    clipped_surrogate, gaussian_log_prob, group_advantages, grpo_loss, rollout_group, train, TrajectoryGroup,
};
use flowcem::{rng, CemConfig, GrpoConfig, Mlp, NoiseSource, Vector, VelocityField};
use proptest::prelude::*;

fn mlp(dims: Vec<usize>, seed: u64) -> Mlp {
    Mlp::init(dims, &mut rng::stream(seed, "init", &[])).unwrap()
}

fn nudged(base: &Mlp, scale: f64, seed: u64) -> Mlp {
    let mut r = rng::stream(seed, "nudge", &[]);
    let noise = Vector::standard_normal(base.num_weights(), &mut r);
    let w: Vec<f64> = base.weights().iter().zip(noise.as_slice()).map(|(w, n)| w + scale * n).collect();
    base.with_weights(&w).unwrap()
}

fn group_for(policy: &Mlp, cfg: &GrpoConfig, source: &NoiseSource, seed: u64) -> TrajectoryGroup {
    let field = VelocityField::Mlp(policy.clone());
    let target = Vector::filled(policy.output_dim(), 1.0);
    let mut r = rng::stream(seed, "rollout", &[]);
    let mut g = rollout_group(&field, &field, &neg_sq_dist(target), cfg, source, &mut r).unwrap();
    g.sample_step_mask(cfg.timestep_fraction, &mut r);
    g
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn sources() -> impl Strategy<Value = NoiseSource> {
    prop_oneof![
        Just(NoiseSource::Gaussian),
        Just(NoiseSource::Search(CemConfig::default())),
        Just(NoiseSource::OneShot { candidates: 25, keep: 12 }),
        Just(NoiseSource::RandomUpdate(CemConfig::default())),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn advantages_are_centred(rewards in prop::collection::vec(prop_oneof![-1e3..1e3f64, Just(0.5)], 2..16)) {
        let a = group_advantages(&rewards).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9, "{a:?}");
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_the_reference(seed in any::<u64>(), spread in 0.0..0.5f64, kl_beta in 0.0..1.0f64) {
        let cfg = GrpoConfig { kl_beta, timestep_fraction: 1.0, ..Default::default() };
        let reference = mlp(vec![3, 4, 2], seed);
        let current = nudged(&reference, spread, seed);
        let group = group_for(&current, &cfg, &NoiseSource::Gaussian, seed);
        let adv = group_advantages(&group.rewards()).unwrap();
        let (cur, refr) = (VelocityField::Mlp(current), VelocityField::Mlp(reference));
        prop_assert!(grpo_loss(&group, &adv, &cur, &refr, &cfg).unwrap().kl >= 0.0);
        prop_assert_eq!(grpo_loss(&group, &adv, &refr, &refr, &cfg).unwrap().kl, 0.0);
    }

    #[test]
    fn surrogate_gain_is_bounded_by_the_clip(ratio in 0.0..10.0f64, adv in -5.0..5.0f64, eps in 1e-3..0.9f64) {
        let (s, _) = clipped_surrogate(ratio, adv, eps);
        let bound = (1.0 + eps) * adv.abs();
        prop_assert!(s <= bound + 1e-12, "surrogate {s} > {bound}");
        if adv >= 0.0 || ratio <= 1.0 + eps {
            prop_assert!(s.abs() <= bound + 1e-12, "|surrogate| {} > {bound}", s.abs());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stored_behavior_log_probs_replay_exactly(seed in any::<u64>(), source in sources()) {
        let cfg = GrpoConfig { smart_t_threshold: 0.6, ..Default::default() };
        let policy = mlp(vec![3, 5, 2], seed);
        let group = group_for(&policy, &cfg, &source, seed);
        for traj in &group.trajectories {
            for s in &traj.steps {
                let v = policy.velocity(s.state_before.as_slice(), s.t_before);
                let mean: Vec<f64> = s.state_before.as_slice().iter().zip(&v).map(|(x, v)| x + v * s.dt).collect();
                let replay = gaussian_log_prob(s.state_after.as_slice(), &mean, (-s.dt).sqrt() * s.sigma_t);
                let stored = s.log_prob_behavior.unwrap();
                prop_assert!((replay - stored).abs() <= 1e-12, "{replay} vs {stored}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grpo_grad_matches_central_differences(seed in any::<u64>(), wide in any::<bool>()) {
        let dims = if wide { vec![3, 4, 2] } else { vec![2, 1] };
        let cfg = GrpoConfig { timestep_fraction: 1.0, ..Default::default() };
        let behavior = mlp(dims, seed);
        let reference = nudged(&behavior, 0.05, seed ^ 1);
        let current = nudged(&behavior, 1e-3, seed ^ 2);
        let group = group_for(&behavior, &cfg, &NoiseSource::Gaussian, seed);
        let adv = group_advantages(&group.rewards()).unwrap();
        let refr = VelocityField::Mlp(reference);
        let loss_at = |w: &[f64]| grpo_loss(&group, &adv, &VelocityField::Mlp(current.with_weights(w).unwrap()), &refr, &cfg).unwrap();
        let out = loss_at(current.weights());
        let h = 1e-5;
        let mut w = current.weights().to_vec();
        for k in 0..w.len() {
            let w0 = w[k];
            w[k] = w0 + h;
            let plus = loss_at(&w).loss;
            w[k] = w0 - h;
            let minus = loss_at(&w).loss;
            w[k] = w0;
            let fd = (plus - minus) / (2.0 * h);
            prop_assert!(rel_err(out.grad[k], fd) < 1e-4, "weight {k}: {} vs {fd}", out.grad[k]);
        }
    }
}

#[test]
fn training_is_reproducible() {
    let pretrained = mlp(vec![3, 6, 2], 4);
    let reward = neg_sq_dist(Vector::from(vec![1.0, -1.0]));
    let cfg = GrpoConfig {
        epochs: 3,
        groups_per_epoch: 2,
        eval_interval: 1,
        eval_samples: 16,
        seed: 7,
        ..Default::default()
    };
    for source in [NoiseSource::Gaussian, NoiseSource::Search(CemConfig::default())] {
        let a = train(&pretrained, &reward, &cfg, &source, &mut NullSink).unwrap();
        let b = train(&pretrained, &reward, &cfg, &source, &mut NullSink).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.ema.weights(), b.ema.weights());
        let c = train(&pretrained, &reward, &GrpoConfig { seed: 8, ..cfg.clone() }, &source, &mut NullSink).unwrap();
        assert_ne!(a.ema.weights(), c.ema.weights());
    }
}

#[test]
fn zero_threshold_matches_the_gaussian_baseline() {
    let policy = mlp(vec![3, 4, 2], 3);
    let cfg = GrpoConfig { smart_t_threshold: 0.0, ..Default::default() };
    let flow = group_for(&policy, &cfg, &NoiseSource::Gaussian, 9);
    let smart = group_for(&policy, &cfg, &NoiseSource::Search(CemConfig::default()), 9);
    assert_eq!(flow, smart);
}
