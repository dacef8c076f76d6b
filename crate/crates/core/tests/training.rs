use metatuner::adapters::LoraConfig;
use metatuner::microlm::{ArchConfig, MicroLm};
use metatuner::numerics::{finite_difference_check, Parameters, Tensor};
use metatuner::pipeline::{MetaTunerModel, PipelineConfig, PromptMode};
use metatuner::tasks::vocab::encode;
use metatuner::tasks::{expert_prompt_oracle, generate_dataset, Example, GeneratedData, SuiteConfig, TaskKind};
use metatuner::training::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gen_cfg() -> ArchConfig {
    ArchConfig {
        vocab_size: 48,
        context_len: 16,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
    }
}

fn actor_cfg() -> ArchConfig {
    ArchConfig {
        vocab_size: 48,
        context_len: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
    }
}

fn micro_model(seed: u64) -> MetaTunerModel {
    let lora = LoraConfig::for_actor(&actor_cfg(), 2, 0.1).unwrap();
    let cfg = PipelineConfig {
        split_k: 1,
        max_prompt_len: 4,
        ..PipelineConfig::default()
    };
    MetaTunerModel::random(gen_cfg(), actor_cfg(), lora, cfg, seed).unwrap()
}

fn randomize_up(model: &mut MetaTunerModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in model.hyper.layers.iter_mut() {
        layer.w_u_b = Tensor::randn(layer.w_u_b.shape(), 0.5, &mut rng);
        layer.w_u_a = Tensor::randn(layer.w_u_a.shape(), 0.5, &mut rng);
    }
}

fn small_data() -> GeneratedData {
    let cfg = SuiteConfig {
        min_len: 2,
        max_len: 4,
        n_train: 40,
        n_pretrain_train: 60,
        n_dev: 10,
        n_test: 10,
        ..SuiteConfig::default()
    };
    generate_dataset(&cfg, 3).unwrap()
}

fn snapshot(ps: Vec<&Tensor>) -> Vec<Vec<f64>> {
    ps.into_iter().map(|t| t.data.clone()).collect()
}

fn pair(x: &str, prompt: &str, kind: TaskKind) -> ExpertPair {
    let x = encode(x).unwrap();
    ExpertPair {
        answer: kind.gold(&x[1..]).unwrap(),
        x,
        kind,
        prompt: encode(prompt).unwrap(),
        provenance: Provenance::SelfRollout,
        actor_loglik: 0.0,
    }
}

fn quick_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        rollouts: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn actor_warmup_zero_epochs_is_identity() {
    let data = small_data();
    let mut actor = MicroLm::init(actor_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = actor.clone();
    let rep = warmup_actor(&mut actor, &data.pretrain_mix.train, &PromptPolicy::Instruction, 0, 1e-3, 8, 0).unwrap();
    assert_eq!(snapshot(actor.params()), snapshot(before.params()));
    assert_eq!(rep.loss_before, rep.loss_after);
    assert!(rep.epoch_losses.is_empty());
}

#[test]
fn actor_warmup_lowers_loss() {
    let data = small_data();
    let mut actor = MicroLm::init(actor_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let rep = warmup_actor(&mut actor, &data.pretrain_mix.train, &PromptPolicy::Instruction, 2, 3e-3, 8, 0).unwrap();
    assert!(rep.loss_after < rep.loss_before, "{rep:?}");
    assert_eq!(rep.epoch_losses.len(), 2);
}

#[test]
fn actor_warmup_rejects_empty_data() {
    let mut actor = MicroLm::init(actor_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(warmup_actor(&mut actor, &[], &PromptPolicy::Instruction, 1, 1e-3, 8, 0).is_err());
}

#[test]
fn generator_warmup_fails_when_nothing_is_kept() {
    let data = small_data();
    let mut m = micro_model(4);
    // An untrained actor solves nothing, so every proposal is rejected.
    let err = warmup_generator(&mut m, &data.stress_suite.train, &expert_prompt_oracle, 1, 1e-3, 8, 0);
    assert!(matches!(err, Err(metatuner::Error::Config(_))), "{err:?}");
}

#[test]
fn greedy_single_rollout_is_deterministic_and_matches_solve() {
    let data = small_data();
    let mut m = micro_model(5);
    randomize_up(&mut m, 1);
    m.update_snapshot();
    let batch = &data.stress_suite.train[..6];
    let a = build_expert_set(&m, batch, 0.0, 1, 9).unwrap();
    let b = build_expert_set(&m, batch, 0.0, 1, 123).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), batch.len());
    for (ex, rec) in batch.iter().zip(&a.records) {
        let (p, ans) = m.solve(&ex.x).unwrap();
        assert_eq!(rec.prompt, p.prompt);
        assert_eq!(rec.answer, ans);
        let kept = a.pairs.iter().any(|q| q.x == ex.x);
        assert_eq!(kept, rec.reward == 1);
    }
}

#[test]
fn rollout_records_carry_oracle_rewards() {
    let data = small_data();
    let m = micro_model(6);
    let batch = &data.stress_suite.train[..5];
    let r = build_expert_set(&m, batch, 1.0, 3, 2).unwrap();
    assert_eq!(r.records.len(), 15);
    assert_eq!(r.first_prompts.len(), 5);
    for rec in &r.records {
        assert_eq!(rec.reward, metatuner::tasks::reward(rec.kind, &rec.query, &rec.answer));
        assert_eq!(rec.delta_norms.len(), 2);
    }
    assert!(r.pairs.iter().all(ExpertPair::reverify));
    assert!(r.pairs.len() <= batch.len());
}

#[test]
fn alpha_zero_makes_combined_equal_answer_term() {
    let data = small_data();
    let mut m = micro_model(7);
    randomize_up(&mut m, 2);
    let batch = &data.stress_suite.train[..3];
    let prompts = vec![encode("INSTR_COPY").unwrap(); 3];
    let d2 = vec![pair("CUE_1 a b", "INSTR_COPY", TaskKind::Copy)];
    let l = loss_joint(&m, batch, &prompts, &d2, 0.0, true, true).unwrap();
    assert_eq!(l.combined_value(), l.term1_value());
    assert!(l.term2_value().unwrap() > 0.0);
}

#[test]
fn ablations_drop_their_term() {
    let data = small_data();
    let mut m = micro_model(8);
    randomize_up(&mut m, 3);
    let batch = &data.stress_suite.train[..3];
    let prompts = vec![encode("INSTR_REV").unwrap(); 3];
    let d2 = vec![
        pair("CUE_2 1 2", "INSTR_REV", TaskKind::Rev),
        pair("CUE_3 c a", "INSTR_SORT", TaskKind::Sort),
    ];
    let alpha = 0.3;
    let full = loss_joint(&m, batch, &prompts, &d2, alpha, true, true).unwrap();
    let wo_f = loss_joint(&m, batch, &prompts, &d2, alpha, false, true).unwrap();
    let wo_p = loss_joint(&m, batch, &prompts, &d2, alpha, true, false).unwrap();
    assert!(wo_f.term1.is_none());
    assert_eq!(wo_f.combined_value().unwrap(), alpha * full.term2_value().unwrap());
    assert!(wo_p.term2.is_none());
    assert_eq!(wo_p.combined_value(), full.term1_value());
    let sum = full.term1_value().unwrap() + alpha * full.term2_value().unwrap();
    assert!((full.combined_value().unwrap() - sum).abs() < 1e-12);
}

#[test]
fn empty_expert_set_leaves_only_answer_term() {
    let data = small_data();
    let m = micro_model(9);
    let batch = &data.stress_suite.train[..2];
    let prompts = vec![Vec::new(); 2];
    let l = loss_joint(&m, batch, &prompts, &[], 0.5, true, true).unwrap();
    assert!(l.term2.is_none());
    assert_eq!(l.combined_value(), l.term1_value());
    assert!(loss_joint(&m, batch, &prompts[..1], &[], 0.5, true, true).is_err());
}

fn group_grads(m: &mut MetaTunerModel, use_answer: bool, use_prompt: bool) -> [f64; 3] {
    let data = small_data();
    let batch = data.stress_suite.train[..2].to_vec();
    let prompts = vec![encode("INSTR_SORT").unwrap(); 2];
    let d2 = vec![pair("CUE_3 b a", "INSTR_SORT", TaskKind::Sort)];
    let mut l = loss_joint(m, &batch, &prompts, &d2, 0.5, use_answer, use_prompt).unwrap();
    l.graph.backward(l.combined.unwrap()).unwrap();
    m.encoder.zero_grad();
    m.prompt_decoder.zero_grad();
    m.hyper.zero_grad();
    l.graph.accumulate_grads(m.encoder.params_mut());
    l.graph.accumulate_grads(m.prompt_decoder.params_mut());
    l.graph.accumulate_grads(m.hyper.params_mut());
    let max = |ps: Vec<&Tensor>| ps.iter().flat_map(|t| t.grad.iter()).fold(0.0f64, |a, g| a.max(g.abs()));
    [max(m.encoder.params()), max(m.prompt_decoder.params()), max(m.hyper.params())]
}

#[test]
fn answer_term_reaches_shared_and_hyper_only() {
    let mut m = micro_model(10);
    randomize_up(&mut m, 4);
    let [s, p, q] = group_grads(&mut m, true, false);
    assert!(s > 0.0 && q > 0.0);
    assert_eq!(p, 0.0);
}

#[test]
fn prompt_term_reaches_shared_and_private_only() {
    let mut m = micro_model(11);
    randomize_up(&mut m, 5);
    let [s, p, q] = group_grads(&mut m, false, true);
    assert!(s > 0.0 && p > 0.0);
    assert_eq!(q, 0.0);
}

#[test]
fn combined_loss_matches_finite_differences() {
    let data = small_data();
    let mut m = micro_model(12);
    randomize_up(&mut m, 6);
    m.lora.lambda = 0.5;
    let batch = data.stress_suite.train[..2].to_vec();
    let prompts = vec![encode("INSTR_COPY").unwrap(), encode("INSTR_REV 7").unwrap()];
    let d2 = vec![pair("CUE_1 a 1", "INSTR_COPY", TaskKind::Copy)];
    let report = finite_difference_check(
        &mut m,
        |m| {
            let l = loss_joint(m, &batch, &prompts, &d2, 0.5, true, true)?;
            Ok((l.graph, l.combined.unwrap()))
        },
        |m| {
            let mut v = m.encoder.params_mut();
            v.extend(m.prompt_decoder.params_mut());
            v.extend(m.hyper.params_mut());
            v
        },
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn joint_step_with_zero_alpha_keeps_private_decoder() {
    let data = small_data();
    let mut m = micro_model(13);
    randomize_up(&mut m, 7);
    let before = snapshot(m.prompt_decoder.params());
    let cfg = TrainConfig { alpha: 0.0, ..quick_cfg(1) };
    let mut tr = Trainer::new(m, cfg, &data.stress_suite.train, &data.stress_suite.dev).unwrap();
    let batch = data.stress_suite.train[..4].to_vec();
    tr.step_j(&batch).unwrap();
    assert_eq!(snapshot(tr.model.prompt_decoder.params()), before);
}

#[test]
fn alternating_steps_touch_disjoint_groups() {
    let data = small_data();
    let mut m = micro_model(14);
    randomize_up(&mut m, 8);
    let cfg = TrainConfig {
        schedule: Schedule::I,
        temperature: 0.0,
        ..quick_cfg(2)
    };
    let mut tr = Trainer::new(m, cfg, &data.stress_suite.train, &data.stress_suite.dev).unwrap();
    let batch = data.stress_suite.train[..4].to_vec();
    let p0 = snapshot(tr.model.prompt_decoder.params());
    let q0 = snapshot(tr.model.hyper.params());
    let first = tr.step_i(&batch).unwrap();
    assert!(first.term1.is_some() && first.term2.is_none());
    assert_eq!(snapshot(tr.model.prompt_decoder.params()), p0);
    assert_ne!(snapshot(tr.model.hyper.params()), q0);
    let q1 = snapshot(tr.model.hyper.params());
    let second = tr.step_i(&batch).unwrap();
    assert!(second.term1.is_none());
    assert_eq!(snapshot(tr.model.hyper.params()), q1);
}

#[test]
fn fresh_snapshot_rollouts_equal_live_greedy() {
    let data = small_data();
    let mut m = micro_model(15);
    randomize_up(&mut m, 9);
    let cfg = TrainConfig {
        snapshot_every: 1,
        temperature: 0.0,
        ..quick_cfg(3)
    };
    let mut tr = Trainer::new(m, cfg, &data.stress_suite.train, &data.stress_suite.dev).unwrap();
    for _ in 0..3 {
        tr.step().unwrap();
        let batch = &data.stress_suite.dev[..5];
        let r = build_expert_set(&tr.model, batch, 0.0, 1, 1).unwrap();
        for (ex, p) in batch.iter().zip(&r.first_prompts) {
            assert_eq!(&tr.model.generate_prompt(&ex.x, PromptMode::GreedyLive).unwrap().prompt, p);
        }
    }
}

fn run_metrics(cfg: TrainConfig, data: &GeneratedData) -> (Vec<String>, MetaTunerModel) {
    let mut m = micro_model(16);
    randomize_up(&mut m, 10);
    let mut tr = Trainer::new(m, cfg, &data.stress_suite.train, &data.stress_suite.dev).unwrap();
    let lines = tr.run(|_| Ok(())).unwrap().iter().map(StepMetrics::to_json_line).collect();
    (lines, tr.model)
}

#[test]
fn metrics_stream_replays_exactly() {
    let data = small_data();
    let cfg = TrainConfig { eval_every: 2, ..quick_cfg(4) };
    let (a, ma) = run_metrics(cfg.clone(), &data);
    let (b, mb) = run_metrics(cfg, &data);
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert_eq!(snapshot(ma.hyper.params()), snapshot(mb.hyper.params()));
    let last: StepMetrics = serde_json::from_str(a.last().unwrap()).unwrap();
    assert!(last.dev_reward.is_some());
}

#[test]
fn ablations_freeze_their_groups() {
    let data = small_data();
    let mut randomized = micro_model(16);
    randomize_up(&mut randomized, 10);
    let q0 = snapshot(randomized.hyper.params());
    let p0 = snapshot(randomized.prompt_decoder.params());
    let (_, wo_f) = run_metrics(TrainConfig { ablation: Ablation::WoF, ..quick_cfg(3) }, &data);
    assert_eq!(snapshot(wo_f.hyper.params()), q0);
    let (_, wo_p) = run_metrics(TrainConfig { ablation: Ablation::WoP, ..quick_cfg(3) }, &data);
    assert_eq!(snapshot(wo_p.prompt_decoder.params()), p0);
    let (_, wo_s) = run_metrics(TrainConfig { ablation: Ablation::WoS, ..quick_cfg(3) }, &data);
    let own = wo_s.param_encoder.as_ref().expect("separate encoder");
    let shared_ids: Vec<_> = wo_s.encoder.params().iter().map(|t| t.id()).collect();
    assert!(own.params().iter().all(|t| !shared_ids.contains(&t.id())));
}

#[test]
fn audits_see_no_answer_gradient_on_private_decoder() {
    let data = small_data();
    let mut m = micro_model(17);
    randomize_up(&mut m, 11);
    let cfg = TrainConfig { audit_every: 1, ..quick_cfg(3) };
    let mut tr = Trainer::new(m, cfg, &data.stress_suite.train, &data.stress_suite.dev).unwrap();
    tr.run(|_| Ok(())).unwrap();
    assert_eq!(tr.audits.len(), 3);
    assert!(tr.audits.iter().all(|a| a.max_private_grad == 0.0));
}

#[test]
fn collected_pairs_reverify() {
    let data = small_data();
    let mut m = micro_model(18);
    randomize_up(&mut m, 12);
    let mut tr = Trainer::new(m, quick_cfg(3), &data.stress_suite.train, &data.stress_suite.dev).unwrap();
    tr.run(|_| Ok(())).unwrap();
    assert!(tr.collected.iter().all(ExpertPair::reverify));
}

#[test]
fn evaluate_rejects_empty_input() {
    assert!(evaluate(&ScriptedModel, &[], false).is_err());
}

#[test]
fn scripted_model_is_perfect() {
    let data = small_data();
    let r = evaluate(&ScriptedModel, &data.stress_suite.test, true).unwrap();
    assert_eq!(r.mean_reward, 1.0);
    assert_eq!(r.mean_answer_loss, None);
    assert!(r.per_task.values().all(|t| t.mean_reward == 1.0));
}

#[test]
fn evaluation_is_repeatable() {
    let data = small_data();
    let mut m = micro_model(19);
    randomize_up(&mut m, 13);
    let a = evaluate(&m, &data.stress_suite.dev, true).unwrap();
    let b = evaluate(&m, &data.stress_suite.dev, true).unwrap();
    assert_eq!(a, b);
    assert!(a.mean_answer_loss.unwrap() > 0.0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { alpha: -0.1, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { rollouts: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { snapshot_every: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { temperature: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    let toml_like: TrainConfig = serde_json::from_str(r#"{"ablation":"wo_S","schedule":"I"}"#).unwrap();
    assert_eq!(toml_like.ablation, Ablation::WoS);
    assert_eq!(toml_like.schedule, Schedule::I);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"alhpa":0.1}"#).is_err());
    assert_eq!("wo_p".parse::<Ablation>().unwrap(), Ablation::WoP);
    assert!("both".parse::<Ablation>().is_err());
}

#[test]
fn trainer_rejects_empty_sets() {
    let m = micro_model(20);
    let ex: Vec<Example> = Vec::new();
    assert!(Trainer::new(m, quick_cfg(1), &ex, &ex).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seed_paths_are_stable_and_sensitive(base in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assert_eq!(seeds::derive(base, &[a, b]), seeds::derive(base, &[a, b]));
        if a != b {
            prop_assert_ne!(seeds::derive(base, &[a]), seeds::derive(base, &[b]));
        }
    }

    #[test]
    fn metrics_lines_round_trip(step in 0usize..10_000, t1 in proptest::option::of(0.0f64..10.0), d2 in 0usize..64) {
        let m = StepMetrics {
            step,
            schedule: Schedule::J,
            term1: t1,
            term2: None,
            alpha: 0.5,
            dev_reward: None,
            snapshot_age: step % 10,
            seed: 7,
            d2_pairs: d2,
        };
        let back: StepMetrics = serde_json::from_str(&m.to_json_line()).unwrap();
        prop_assert_eq!(back, m);
    }
}
