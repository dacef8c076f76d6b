use std::collections::HashSet;

use metatuner::tasks::vocab::{self, encode, TokenId};
use metatuner::tasks::{
    expert_prompt_oracle, generate_dataset, read_split, reward, write_split, Example, SuiteConfig, TaskKind,
};
use proptest::prelude::*;

fn small() -> SuiteConfig {
    SuiteConfig {
        n_train: 200,
        n_pretrain_train: 300,
        n_dev: 40,
        n_test: 60,
        ..SuiteConfig::default()
    }
}

#[test]
fn same_seed_same_hash() {
    let a = generate_dataset(&small(), 11).unwrap();
    let b = generate_dataset(&small(), 11).unwrap();
    let c = generate_dataset(&small(), 12).unwrap();
    assert_eq!(a.stress_suite.manifest_hash, b.stress_suite.manifest_hash);
    assert_eq!(a.pretrain_mix.manifest_hash, b.pretrain_mix.manifest_hash);
    assert_eq!(a, b);
    assert_ne!(a.stress_suite.manifest_hash, c.stress_suite.manifest_hash);
}

#[test]
fn stress_inputs_carry_only_a_cue() {
    let d = generate_dataset(&small(), 3).unwrap();
    for (_, v) in d.stress_suite.parts() {
        for ex in v {
            assert!(ex.x.iter().all(|&t| !vocab::is_instruction(t)));
            assert_eq!(ex.x[0], ex.kind.cue());
        }
    }
    assert_eq!(d.stress_suite.kinds(), TaskKind::ALL.to_vec());
    assert!(!d.stress_suite.explicit_instructions);
}

#[test]
fn pretrain_mix_excludes_unseen_kinds() {
    let d = generate_dataset(&small(), 3).unwrap();
    assert_eq!(d.pretrain_mix.kinds(), TaskKind::PRETRAIN.to_vec());
    assert!(d.pretrain_mix.explicit_instructions);
}

#[test]
fn rev_example() {
    let ex = Example::new(TaskKind::Rev, TaskKind::Rev.cue(), &encode("a b c").unwrap()).unwrap();
    assert_eq!(ex.y, encode("c b a").unwrap());
}

#[test]
fn rev_length_two_exhaustive() {
    let alphabet = TaskKind::Rev.alphabet();
    let mut n = 0;
    for &a in &alphabet {
        for &b in &alphabet {
            let x = vec![TaskKind::Rev.cue(), a, b];
            // Gold for a two-symbol reversal written out directly.
            assert_eq!(reward(TaskKind::Rev, &x, &[b, a]), 1);
            if a != b {
                assert_eq!(reward(TaskKind::Rev, &x, &[a, b]), 0);
            }
            n += 1;
        }
    }
    assert_eq!(n, 400);
}

#[test]
fn inc_off_by_one_is_wrong() {
    let x = encode("CUE_4 3 5").unwrap();
    assert_eq!(reward(TaskKind::Inc, &x, &encode("4 6").unwrap()), 1);
    assert_eq!(reward(TaskKind::Inc, &x, &encode("4 7").unwrap()), 0);
}

#[test]
fn splits_disjoint_by_operand() {
    let d = generate_dataset(&small(), 5).unwrap();
    for split in [&d.pretrain_mix, &d.stress_suite] {
        let ops = |v: &[Example]| v.iter().map(|e| e.operand().to_vec()).collect::<HashSet<_>>();
        let (tr, dv, te) = (ops(&split.train), ops(&split.dev), ops(&split.test));
        assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
        for ex in split.train.iter().chain(&split.dev).chain(&split.test) {
            let len = ex.operand().len();
            assert!((3..=6).contains(&len));
        }
    }
}

#[test]
fn leave_one_out_holds_out_one_kind() {
    let d = generate_dataset(&small(), 5).unwrap();
    assert_eq!(d.leave_one_out.len(), 5);
    for (held, split) in &d.leave_one_out {
        assert!(split.train.iter().chain(&split.dev).all(|e| e.kind != *held));
        assert!(split.test.iter().all(|e| e.kind == *held));
        assert_eq!(split.train.len(), 160);
    }
}

#[test]
fn empty_split_is_an_error() {
    let cfg = SuiteConfig {
        n_dev: 0,
        ..small()
    };
    assert!(generate_dataset(&cfg, 1).is_err());
    let tight = SuiteConfig {
        context_len: 16,
        ..small()
    };
    assert!(generate_dataset(&tight, 1).is_err());
}

#[test]
fn files_round_trip_and_detect_tampering() {
    let d = generate_dataset(&small(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), &d.stress_suite).unwrap();
    let back = read_split(dir.path()).unwrap();
    assert_eq!(back, d.stress_suite);

    let path = dir.path().join("dev.tsv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(read_split(dir.path()).is_err());
}

#[test]
fn line_format_is_names_and_tabs() {
    let ex = Example::new(TaskKind::Caesar, TaskKind::Caesar.cue(), &encode("a j").unwrap()).unwrap();
    assert_eq!(ex.to_line(), "CUE_5 a j\tc b\tCAESAR");
    assert_eq!(Example::from_line(&ex.to_line()).unwrap(), ex);
    assert!(Example::from_line("CUE_5 a j\tc c\tCAESAR").is_err());
}

#[test]
fn oracle_matches_instruction() {
    assert_eq!(expert_prompt_oracle(TaskKind::Rev), vec![vocab::INSTR_REV]);
}

fn kind_strategy() -> impl Strategy<Value = TaskKind> {
    (0usize..5).prop_map(|i| TaskKind::ALL[i])
}

proptest! {
    #[test]
    fn reward_is_pure(kind in kind_strategy(), picks in prop::collection::vec(0usize..20, 1..7),
                      decoded in prop::collection::vec(0usize..48, 0..8)) {
        let alphabet = kind.alphabet();
        let op: Vec<TokenId> = picks.iter().map(|&i| alphabet[i % alphabet.len()]).collect();
        let ex = Example::new(kind, kind.cue(), &op).unwrap();
        prop_assert_eq!(reward(kind, &ex.x, &ex.y), 1);
        let r = reward(kind, &ex.x, &decoded);
        prop_assert_eq!(r, reward(kind, &ex.x, &decoded));
        prop_assert_eq!(r == 1, decoded.split(|&t| t == vocab::EOS).next().unwrap() == ex.y.as_slice());
    }

    #[test]
    fn vocab_round_trip(ids in prop::collection::vec(0usize..48, 0..20)) {
        prop_assert_eq!(encode(&vocab::decode(&ids).unwrap()).unwrap(), ids);
    }
}
