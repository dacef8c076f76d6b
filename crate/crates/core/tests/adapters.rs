use metatuner::adapters::{
    apply_lora, apply_lora_values, generate_lora, init_hypernetwork, LoraConfig, LoraFactors, LoraVars,
};
use metatuner::microlm::{forward, ArchConfig, IncrementalDecoder, MicroLm};
use metatuner::numerics::{finite_difference_check, Graph, Parameters, Tensor};
use metatuner::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch(d: usize, layers: usize, ctx: usize) -> ArchConfig {
    ArchConfig {
        vocab_size: 48,
        context_len: ctx,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
    }
}

fn random_h(l: usize, h_g: usize, seed: u64) -> Tensor {
    Tensor::randn(&[l, h_g], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn declared_shapes() {
    let actor = arch(32, 2, 32);
    let gen = arch(32, 4, 24);
    let lora = LoraConfig::for_actor(&actor, 4, 0.1).unwrap();
    let mut hyper = init_hypernetwork(&lora, &gen, 2, false, 0).unwrap();
    assert_eq!(hyper.layers[0].w_d_b.shape(), [32, 24]);
    assert_eq!(hyper.layers[0].w_u_b.shape(), [32, 4]);
    assert_eq!(hyper.layers[0].w_d_a.shape(), [4, 24]);
    assert_eq!(hyper.layers[0].w_u_a.shape(), [32, 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in hyper.params_mut() {
        *p = Tensor::randn(p.shape(), 0.1, &mut rng);
    }
    let mut g = Graph::new();
    let h = g.constant(&[24, 32], random_h(24, 32, 2).data).unwrap();
    let f = generate_lora(&mut g, &hyper, h).unwrap().values(&g).unwrap();
    assert_eq!(f.layers.len(), 2);
    assert_eq!(f.layers[0].0.shape(), [32, 4]);
    assert_eq!(f.layers[0].1.shape(), [4, 32]);
}

#[test]
fn fresh_init_gives_zero_update() {
    let gen = arch(16, 2, 16);
    let lora = LoraConfig::for_actor(&arch(16, 2, 32), 2, 0.1).unwrap();
    let hyper = init_hypernetwork(&lora, &gen, 2, false, 9).unwrap();
    let mut g = Graph::new();
    let h = g.constant(&[16, 16], random_h(16, 16, 3).data).unwrap();
    let f = generate_lora(&mut g, &hyper, h).unwrap().values(&g).unwrap();
    assert!(f.delta_is_zero());
    assert!(!f.is_zero());
    let actor = MicroLm::init(arch(16, 2, 32), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(lora_logits(&actor, &f, &lora, &TOKENS), base_logits(&actor, &TOKENS));
}

#[test]
fn both_zero_up_projections_block_all_gradients() {
    let actor = MicroLm::init(arch(16, 2, 32), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let lora = LoraConfig::for_actor(&actor.cfg, 2, 0.1).unwrap();
    let mut hyper = init_hypernetwork(&lora, &arch(16, 2, 16), 2, false, 1).unwrap();
    let grads = |hyper: &mut metatuner::adapters::HyperNetwork| {
        let mut g = Graph::new();
        let h = g.constant(&[16, 16], random_h(16, 16, 3).data).unwrap();
        let f = generate_lora(&mut g, hyper, h).unwrap();
        let o = apply_lora(&mut g, &actor, &f, &lora).unwrap();
        let out = forward(&mut g, &actor.parts(), &TOKENS, Some(&o), None).unwrap();
        let loss = g.cross_entropy(out.logits, &[4, 5, 6, 7, 8, 9, 10]).unwrap();
        g.backward(loss).unwrap();
        hyper.zero_grad();
        g.accumulate_grads(hyper.params_mut());
        hyper.layers[0].w_u_b.grad.iter().map(|x| x.abs()).sum::<f64>()
    };
    assert!(grads(&mut hyper) > 0.0);
    for layer in hyper.layers.iter_mut() {
        layer.w_u_a.data.iter_mut().for_each(|x| *x = 0.0);
    }
    assert_eq!(grads(&mut hyper), 0.0);
}

#[test]
fn seeds_control_init() {
    let gen = arch(16, 2, 16);
    let lora = LoraConfig::for_actor(&arch(16, 2, 32), 2, 0.1).unwrap();
    let a = init_hypernetwork(&lora, &gen, 2, false, 5).unwrap();
    let b = init_hypernetwork(&lora, &gen, 2, false, 5).unwrap();
    let c = init_hypernetwork(&lora, &gen, 2, false, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.layers[0].w_d_b.data, c.layers[0].w_d_b.data);
    let std = a.layers[0].w_d_b.norm() / (a.layers[0].w_d_b.numel() as f64).sqrt();
    assert!((std - 0.25).abs() < 0.05, "std {std}");
}

#[test]
fn scalar_chain_by_hand() {
    // θᵇ = relu(2·0.5)·3 = 3; θᵃ = relu(-1·0.5)·7 = 0, then with W_d_a = 4: relu(2)·7 = 14.
    let gen = arch(1, 1, 1);
    let lora = LoraConfig {
        rank: 1,
        lambda: 1.0,
        d_m: 1,
        k_m: 1,
    };
    let gen = ArchConfig { n_heads: 1, ..gen };
    let mut hyper = init_hypernetwork(&lora, &gen, 1, false, 0).unwrap();
    let layer = &mut hyper.layers[0];
    layer.w_d_b = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
    layer.w_u_b = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
    layer.w_d_a = Tensor::from_vec(&[1, 1], vec![-1.0]).unwrap();
    layer.w_u_a = Tensor::from_vec(&[1, 1], vec![7.0]).unwrap();
    let run = |hyper: &_| {
        let mut g = Graph::new();
        let h = g.constant(&[1, 1], vec![0.5]).unwrap();
        let f = generate_lora(&mut g, hyper, h).unwrap().values(&g).unwrap();
        (f.layers[0].0.data[0], f.layers[0].1.data[0])
    };
    assert_eq!(run(&hyper), (3.0, 0.0));
    hyper.layers[0].w_d_a.data[0] = 4.0;
    assert_eq!(run(&hyper), (3.0, 14.0));
}

#[test]
fn shape_errors_name_the_matrix() {
    let gen = arch(16, 2, 16);
    let lora = LoraConfig::for_actor(&arch(16, 2, 32), 2, 0.1).unwrap();
    let mut hyper = init_hypernetwork(&lora, &gen, 2, false, 0).unwrap();
    let mut g = Graph::new();
    let bad_h = g.constant(&[15, 16], vec![0.0; 15 * 16]).unwrap();
    match generate_lora(&mut g, &hyper, bad_h) {
        Err(Error::Shape { op, .. }) => assert!(op.contains("hidden")),
        other => panic!("expected shape error, got {other:?}"),
    }
    hyper.layers[1].w_u_a = Tensor::zeros(&[16, 15]);
    let h = g.constant(&[16, 16], vec![0.0; 256]).unwrap();
    match generate_lora(&mut g, &hyper, h) {
        Err(Error::Shape { op, .. }) => assert_eq!(op, "W_u_a"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    let actor = arch(16, 2, 32);
    assert!(LoraConfig::for_actor(&actor, 0, 0.1).is_err());
    assert!(LoraConfig::for_actor(&actor, 17, 0.1).is_err());
    assert!(LoraConfig::for_actor(&actor, 16, 0.1).is_ok());
    assert!(LoraConfig::for_actor(&actor, 4, -0.1).is_err());
}

fn random_factors(n_layers: usize, d: usize, r: usize, seed: u64) -> LoraFactors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LoraFactors {
        layers: (0..n_layers)
            .map(|_| (Tensor::randn(&[d, r], 0.5, &mut rng), Tensor::randn(&[r, d], 0.5, &mut rng)))
            .collect(),
    }
}

fn lora_logits(actor: &MicroLm, f: &LoraFactors, cfg: &LoraConfig, tokens: &[usize]) -> Vec<f64> {
    let mut g = Graph::no_grad();
    let vars = LoraVars {
        layers: f
            .layers
            .iter()
            .map(|(b, a)| (g.constant(b.shape(), b.data.clone()).unwrap(), g.constant(a.shape(), a.data.clone()).unwrap()))
            .collect(),
    };
    let o = apply_lora(&mut g, actor, &vars, cfg).unwrap();
    let out = forward(&mut g, &actor.parts(), tokens, Some(&o), None).unwrap();
    g.value(out.logits).to_vec()
}

fn base_logits(actor: &MicroLm, tokens: &[usize]) -> Vec<f64> {
    let mut g = Graph::no_grad();
    let out = forward(&mut g, &actor.parts(), tokens, None, None).unwrap();
    g.value(out.logits).to_vec()
}

const TOKENS: [usize; 7] = [1, 24, 3, 30, 5, 9, 3];

#[test]
fn zero_lambda_is_bitwise_base() {
    let actor = MicroLm::init(arch(16, 2, 32), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = LoraConfig::for_actor(&actor.cfg, 4, 0.0).unwrap();
    let f = random_factors(2, 16, 4, 1);
    assert_eq!(lora_logits(&actor, &f, &cfg, &TOKENS), base_logits(&actor, &TOKENS));
}

#[test]
fn zero_theta_b_matches_zero_lambda() {
    let actor = MicroLm::init(arch(16, 2, 32), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = LoraConfig::for_actor(&actor.cfg, 4, 0.1).unwrap();
    let mut f = random_factors(2, 16, 4, 1);
    for (b, _) in f.layers.iter_mut() {
        b.data.iter_mut().for_each(|x| *x = 0.0);
    }
    assert_eq!(lora_logits(&actor, &f, &cfg, &TOKENS), base_logits(&actor, &TOKENS));
}

#[test]
fn matches_explicitly_materialized_weights() {
    let actor = MicroLm::init(arch(16, 1, 32), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let cfg = LoraConfig::for_actor(&actor.cfg, 4, 0.1).unwrap();
    let f = random_factors(1, 16, 4, 8);
    let mut merged = actor.clone();
    let (b, a) = &f.layers[0];
    for i in 0..16 {
        for j in 0..16 {
            let delta: f64 = (0..4).map(|k| b.at(i, k) * a.at(k, j)).sum();
            merged.blocks[0].wo.data[i * 16 + j] += 0.1 * delta;
        }
    }
    let got = lora_logits(&actor, &f, &cfg, &TOKENS);
    let want = base_logits(&merged, &TOKENS);
    for (x, y) in got.iter().zip(&want) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    assert_ne!(got, base_logits(&actor, &TOKENS));
}

#[test]
fn value_path_matches_tape_path_bitwise() {
    let actor = MicroLm::init(arch(16, 2, 32), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let cfg = LoraConfig::for_actor(&actor.cfg, 4, 0.1).unwrap();
    let f = random_factors(2, 16, 4, 8);
    let tape = lora_logits(&actor, &f, &cfg, &TOKENS);
    let mut dec = IncrementalDecoder::new(actor.parts(), Some(apply_lora_values(&actor, &f, &cfg).unwrap())).unwrap();
    for (i, &t) in TOKENS.iter().enumerate() {
        assert_eq!(dec.push(t).unwrap(), tape[i * 48..(i + 1) * 48]);
    }
    let bad = random_factors(2, 16, 3, 8);
    assert!(apply_lora_values(&actor, &bad, &cfg).is_err());
}

#[test]
fn gradients_reach_all_hypernetwork_matrices() {
    let actor = MicroLm::init(arch(16, 2, 32), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let gen = arch(16, 2, 16);
    let cfg = LoraConfig::for_actor(&actor.cfg, 2, 0.5).unwrap();
    let mut hyper = init_hypernetwork(&cfg, &gen, 2, false, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for layer in hyper.layers.iter_mut() {
        layer.w_u_b = Tensor::randn(layer.w_u_b.shape(), 0.5, &mut rng);
        layer.w_u_a = Tensor::randn(layer.w_u_a.shape(), 0.5, &mut rng);
    }
    let h = random_h(16, 16, 12);
    let targets: Vec<usize> = vec![4, 5, 6, 7, 8, 9, 10];
    let report = finite_difference_check(
        &mut hyper,
        |hyper| {
            let mut g = Graph::new();
            let hv = g.constant(&[16, 16], h.data.clone())?;
            let f = generate_lora(&mut g, hyper, hv)?;
            let o = apply_lora(&mut g, &actor, &f, &cfg)?;
            let out = forward(&mut g, &actor.parts(), &TOKENS, Some(&o), None)?;
            let loss = g.cross_entropy(out.logits, &targets)?;
            Ok((g, loss))
        },
        |hyper| hyper.params_mut(),
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.nonzero_grads > report.entries_checked / 2, "{report:?}");
}

#[test]
fn shared_mode_reuses_one_decoder() {
    let gen = arch(16, 2, 16);
    let lora = LoraConfig::for_actor(&arch(16, 3, 32), 2, 0.1).unwrap();
    let mut hyper = init_hypernetwork(&lora, &gen, 3, true, 0).unwrap();
    assert_eq!(hyper.layers.len(), 1);
    hyper.layers[0].w_u_b = Tensor::filled(&[16, 2], 0.3);
    hyper.layers[0].w_u_a = Tensor::filled(&[16, 16], 0.2);
    let mut g = Graph::new();
    let h = g.constant(&[16, 16], random_h(16, 16, 1).data).unwrap();
    let f = generate_lora(&mut g, &hyper, h).unwrap().values(&g).unwrap();
    assert_eq!(f.layers.len(), 3);
    assert_eq!(f.layers[0], f.layers[2]);
}
