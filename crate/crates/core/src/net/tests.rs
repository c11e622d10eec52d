use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid_height: 2,
        grid_width: 3,
        token_dim: 5,
        blocks: 3,
        heads: 2,
        head_dim: 3,
        mlp_hidden: 7,
        vocab: 4,
        time_features: 4,
        adapter_branches: 2,
        injection_blocks: vec![1, 2],
    }
}

fn random_latent(config: &ModelConfig, seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.tokens() * config.token_dim;
    LatentGrid::from_vec(
        config.grid_height,
        config.grid_width,
        config.token_dim,
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// A net with every parameter randomized, including the zero-initialized ones.
fn random_net(config: &ModelConfig, seed: u64) -> VelocityNet {
    let mut net = VelocityNet::new(config.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in net.params_mut().tensors_mut() {
        t.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
    }
    net
}

fn request<'a>(
    cond: u32,
    hooks: &'a HookPlan,
    external: Option<&'a KvSlice>,
) -> ForwardRequest<'a> {
    ForwardRequest {
        cond: ConditionId(cond),
        hooks,
        external,
        adapter: None,
    }
}

#[test]
fn capture_is_observation_only() {
    let c = ModelConfig::default();
    let net = VelocityNet::new(c.clone(), 1).unwrap();
    let x = random_latent(&c, 2);
    let pass = HookPlan::passthrough(&c);
    let cap = HookPlan::on_injection_blocks(&c, AttentionHookMode::Capture);
    let a = net.forward(&x, 0.3, &request(5, &pass, None)).unwrap();
    let b = net.forward(&x, 0.3, &request(5, &cap, None)).unwrap();
    assert_eq!(a.velocity, b.velocity);
    assert!(a.captured.is_empty());
    assert_eq!(
        b.captured.keys().copied().collect::<Vec<_>>(),
        c.injection_blocks
    );
    for kv in b.captured.values() {
        assert_eq!(kv.keys.dim(), (c.tokens(), c.width()));
        assert_eq!(kv.values.dim(), (c.tokens(), c.width()));
    }
}

#[test]
fn self_injection_is_a_fixed_point() {
    let c = tiny_config();
    let net = random_net(&c, 7);
    let x = random_latent(&c, 8);
    let cap = HookPlan::on_injection_blocks(&c, AttentionHookMode::Capture);
    let captured = net.forward(&x, 0.6, &request(1, &cap, None)).unwrap();
    let pass = net
        .forward(&x, 0.6, &request(1, &HookPlan::passthrough(&c), None))
        .unwrap();

    let full = HookPlan::on_injection_blocks(&c, AttentionHookMode::InjectFull);
    let injected = net
        .forward(&x, 0.6, &request(1, &full, Some(&captured.captured)))
        .unwrap();
    assert_eq!(injected.velocity, pass.velocity);

    let mask: Vec<f32> = (0..c.tokens())
        .map(|i| i as f32 / c.tokens() as f32)
        .collect();
    let blended = HookPlan::on_injection_blocks(&c, AttentionHookMode::InjectBlended(mask));
    let out = net
        .forward(&x, 0.6, &request(1, &blended, Some(&captured.captured)))
        .unwrap();
    // a blend of a tensor with itself changes at most rounding
    for (a, b) in out.velocity.values().iter().zip(pass.velocity.values()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn injecting_foreign_kv_changes_output() {
    let c = tiny_config();
    let net = random_net(&c, 7);
    let x = random_latent(&c, 8);
    let other = random_latent(&c, 9);
    let cap = HookPlan::on_injection_blocks(&c, AttentionHookMode::Capture);
    let foreign = net
        .forward(&other, 0.6, &request(2, &cap, None))
        .unwrap()
        .captured;
    let full = HookPlan::on_injection_blocks(&c, AttentionHookMode::InjectFull);
    let injected = net
        .forward(&x, 0.6, &request(1, &full, Some(&foreign)))
        .unwrap();
    let pass = net.predict(&x, 0.6, ConditionId(1)).unwrap();
    assert_ne!(injected.velocity, pass);

    // mask of ones keeps the block's own features: identical to passthrough
    let ones =
        HookPlan::on_injection_blocks(&c, AttentionHookMode::InjectBlended(vec![1.0; c.tokens()]));
    let kept = net
        .forward(&x, 0.6, &request(1, &ones, Some(&foreign)))
        .unwrap();
    assert_eq!(kept.velocity, pass);
    // mask of zeros is exactly full injection
    let zeros =
        HookPlan::on_injection_blocks(&c, AttentionHookMode::InjectBlended(vec![0.0; c.tokens()]));
    let swapped = net
        .forward(&x, 0.6, &request(1, &zeros, Some(&foreign)))
        .unwrap();
    assert_eq!(swapped.velocity, injected.velocity);
}

#[test]
fn zero_strength_adapter_is_a_no_op() {
    let c = tiny_config();
    let net = random_net(&c, 3);
    let x = random_latent(&c, 4);
    let hooks = HookPlan::passthrough(&c);
    let map: Vec<f32> = (0..c.tokens()).map(|i| (i % 3) as f32 / 2.0).collect();
    let plain = net.forward(&x, 0.2, &request(0, &hooks, None)).unwrap();
    let with = ForwardRequest {
        adapter: Some(AdapterInput {
            map: &map,
            strengths: &[0.0, 0.0],
        }),
        ..request(0, &hooks, None)
    };
    assert_eq!(
        net.forward(&x, 0.2, &with).unwrap().velocity,
        plain.velocity
    );
    let active = ForwardRequest {
        adapter: Some(AdapterInput {
            map: &map,
            strengths: &[2.5, 3.5],
        }),
        ..request(0, &hooks, None)
    };
    assert_ne!(
        net.forward(&x, 0.2, &active).unwrap().velocity,
        plain.velocity
    );
}

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    let c = tiny_config();
    let net = random_net(&c, 11);
    let x = random_latent(&c, 12);
    let a = net.predict(&x, 0.9, ConditionId::NULL).unwrap();
    let b = net.predict(&x, 0.9, ConditionId::NULL).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), x.shape());
}

#[test]
fn forward_rejects_bad_requests() {
    let c = tiny_config();
    let net = random_net(&c, 1);
    let x = random_latent(&c, 2);
    let full = HookPlan::on_injection_blocks(&c, AttentionHookMode::InjectFull);
    assert!(matches!(
        net.forward(&x, 0.5, &request(0, &full, None)),
        Err(Error::Config(_))
    ));

    let cap = HookPlan::on_injection_blocks(&c, AttentionHookMode::Capture);
    let kv = net
        .forward(&x, 0.5, &request(0, &cap, None))
        .unwrap()
        .captured;
    let bad_mask =
        HookPlan::on_injection_blocks(&c, AttentionHookMode::InjectBlended(vec![0.5; 2]));
    assert!(matches!(
        net.forward(&x, 0.5, &request(0, &bad_mask, Some(&kv))),
        Err(Error::InvalidInput(_))
    ));

    let mut on_wrong_block = HookPlan::passthrough(&c);
    on_wrong_block.0[0] = AttentionHookMode::Capture;
    assert!(matches!(
        net.forward(&x, 0.5, &request(0, &on_wrong_block, None)),
        Err(Error::Config(_))
    ));

    let pass = HookPlan::passthrough(&c);
    assert!(net.forward(&x, 1.5, &request(0, &pass, None)).is_err());
    assert!(net.forward(&x, 0.5, &request(99, &pass, None)).is_err());
    let wrong = LatentGrid::zeros(3, 3, 5);
    assert!(net.forward(&wrong, 0.5, &request(0, &pass, None)).is_err());
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    assert!(c.validate().is_ok());
    c.injection_blocks = vec![6];
    assert!(c.validate().is_err());
    c.injection_blocks = vec![2, 2];
    assert!(c.validate().is_err());
    let c = ModelConfig {
        heads: 0,
        ..ModelConfig::default()
    };
    assert!(c.validate().is_err());
}

#[test]
fn guidance_is_the_linear_cfg_form() {
    let u = LatentGrid::from_vec(1, 2, 1, vec![0.5, -1.0]).unwrap();
    let cnd = LatentGrid::from_vec(1, 2, 1, vec![1.5, 3.0]).unwrap();
    assert_eq!(apply_guidance(&cnd, &u, 1.0).unwrap(), cnd);
    assert_eq!(apply_guidance(&cnd, &u, 0.0).unwrap(), u);
    let zero = LatentGrid::zeros(1, 2, 1);
    let two = apply_guidance(&cnd, &zero, 2.0).unwrap();
    assert_eq!(two.values(), &[3.0, 6.0]);
    assert!(apply_guidance(&cnd, &LatentGrid::zeros(2, 1, 1), 2.0).is_err());
}

/// Central finite differences against the analytic backward pass for a
/// linear functional `L = Σ R ⊙ f(x)`.
#[test]
fn backward_matches_finite_differences() {
    let c = tiny_config();
    let mut net = random_net(&c, 21);
    let x = random_latent(&c, 22);
    let map: Vec<f32> = (0..c.tokens()).map(|i| 0.2 + 0.1 * i as f32).collect();
    let strengths = [0.7f32, 1.3];
    let adapter = Some(AdapterInput {
        map: &map,
        strengths: &strengths,
    });
    let cond = ConditionId(2);
    let t = 0.37;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let weights: Vec<f32> = (0..x.values().len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let r = Array2::from_shape_vec((c.tokens(), c.token_dim), weights.clone()).unwrap();

    let (_, tape) = net.forward_taped(&x, t, cond, adapter).unwrap();
    let mut grads = Params::zeros(&c);
    net.backward(&tape, r.view(), &mut grads);
    let analytic: Vec<Vec<f32>> = grads
        .tensors()
        .iter()
        .map(|g| g.iter().copied().collect())
        .collect();

    let loss = |net: &VelocityNet| -> f64 {
        let (out, _) = net.forward_taped(&x, t, cond, adapter).unwrap();
        out.values()
            .iter()
            .zip(&weights)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    };
    let eps = 1e-3f32;
    let n_tensors = analytic.len();
    let mut checked = 0;
    for ti in 0..n_tensors {
        let len = analytic[ti].len();
        let mut probes: Vec<usize> = (0..3.min(len))
            .map(|k| (k * 7919 + ti * 31) % len)
            .collect();
        // cond and cond_map: only the active row has a gradient
        if ti == 5 || ti == 6 {
            let row = len / (c.vocab + 1);
            probes.extend([2 * row, 2 * row + row / 2, 3 * row - 1]);
        }
        for idx in probes {
            let orig = net.params().tensors()[ti].as_slice().unwrap()[idx];
            net.params_mut().tensors_mut()[ti].as_slice_mut().unwrap()[idx] = orig + eps;
            let up = loss(&net);
            net.params_mut().tensors_mut()[ti].as_slice_mut().unwrap()[idx] = orig - eps;
            let down = loss(&net);
            net.params_mut().tensors_mut()[ti].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * f64::from(eps));
            let exact = f64::from(analytic[ti][idx]);
            let tol = 2e-2 * exact.abs().max(numeric.abs()) + 2e-3;
            assert!(
                (numeric - exact).abs() < tol,
                "tensor {ti} index {idx}: numeric {numeric} vs analytic {exact}"
            );
            checked += 1;
        }
    }
    assert!(checked > 50);
}
