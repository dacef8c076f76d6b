use criterion::{criterion_group, criterion_main, Criterion};
use metatuner::adapters::{generate_lora, LoraConfig};
use metatuner::microlm::{decode_greedy, sequence_loss, ArchConfig, MicroLm, SeqExample};
use metatuner::numerics::Graph;
use metatuner::pipeline::{MetaTunerModel, PipelineConfig};
use metatuner::tasks::vocab::encode;
use metatuner::tasks::{generate_dataset, SuiteConfig};
use metatuner::training::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn actor_cfg() -> ArchConfig {
    ArchConfig {
        vocab_size: 48,
        context_len: 32,
        d_model: 32,
        n_layers: 3,
        n_heads: 2,
    }
}

fn gen_cfg() -> ArchConfig {
    ArchConfig {
        vocab_size: 48,
        context_len: 24,
        d_model: 32,
        n_layers: 4,
        n_heads: 2,
    }
}

fn model() -> MetaTunerModel {
    let lora = LoraConfig::for_actor(&actor_cfg(), 16, 0.5).unwrap();
    MetaTunerModel::random(gen_cfg(), actor_cfg(), lora, PipelineConfig::default(), 0).unwrap()
}

fn microlm(c: &mut Criterion) {
    let actor = MicroLm::init(actor_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let prefix = encode("BOS INSTR_SORT SEP CUE_3 7 2 9 4 1 SEP").unwrap();
    let ex = SeqExample::completion(&prefix, &encode("1 2 4 7 9").unwrap());
    c.bench_function("actor forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let loss = sequence_loss(&mut g, &actor.parts(), &ex, None).unwrap();
            g.backward(loss).unwrap()
        })
    });
    c.bench_function("actor greedy decode 8 tokens", |b| b.iter(|| decode_greedy(&actor, &prefix, 8).unwrap()));
}

fn hypernetwork(c: &mut Criterion) {
    let m = model();
    let x = encode("CUE_4 1 2 3 4 5").unwrap();
    c.bench_function("encode + generate_lora", |b| {
        b.iter(|| {
            let mut g = Graph::no_grad();
            let h = m.encode_meta(&mut g, &x).unwrap();
            generate_lora(&mut g, &m.hyper, h).unwrap()
        })
    });
    c.bench_function("solve (prompt, factors, answer)", |b| b.iter(|| m.solve(&x).unwrap()));
}

fn joint_step(c: &mut Criterion) {
    let data = generate_dataset(&SuiteConfig { n_train: 200, n_pretrain_train: 50, n_dev: 20, n_test: 20, ..SuiteConfig::default() }, 0).unwrap();
    let cfg = TrainConfig { steps: usize::MAX, ..TrainConfig::default() };
    let mut tr = Trainer::new(model(), cfg, &data.stress_suite.train, &data.stress_suite.dev).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("joint step, batch 16, n=4", |b| b.iter(|| tr.step().unwrap()));
    group.finish();
}

criterion_group!(benches, microlm, hypernetwork, joint_step);
criterion_main!(benches);
