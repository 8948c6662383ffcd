use std::collections::BTreeMap;

use cadmus_core::enumerate::{
    default_alphabet, enum_value_programs, majority_baseline, BaselineMode, ValueProgramSet,
};
use cadmus_core::isa::{OpCode, TokenId};
use cadmus_core::templates::{random_true_program, AcceptanceRate};
use cadmus_core::vm::{classify_tokens, run, Value, VmConfig};

const LENGTH: usize = 5;
// Measured once by the brute-force pass below and frozen.
const FROZEN_COUNT: usize = 91_300;
const FROZEN_MODE: (i64, usize) = (0, 19_434);
const FROZEN_TRUE_AT_5: u64 = 547_366;

fn sequences(alphabet: &[TokenId], length: usize) -> impl Iterator<Item = Vec<TokenId>> + '_ {
    let n = alphabet.len() as u64;
    (0..n.pow(length as u32)).map(move |mut i| {
        let mut seq = vec![0; length];
        for slot in seq.iter_mut().rev() {
            *slot = alphabet[(i % n) as usize];
            i /= n;
        }
        seq
    })
}

/// Every sequence through the VM, keeping those whose final stack is a
/// single integer.
fn brute_force(length: usize) -> BTreeMap<Vec<TokenId>, i64> {
    let alphabet: Vec<TokenId> = default_alphabet().iter().map(|op| op.token()).collect();
    let config = VmConfig::default();
    sequences(&alphabet, length)
        .filter_map(|seq| match run(&seq, &config).as_slice() {
            [Value::Int(v)] => Some((seq, *v)),
            _ => None,
        })
        .collect()
}

fn as_map(set: &ValueProgramSet) -> BTreeMap<Vec<TokenId>, i64> {
    set.iter().map(|(p, v)| (p.to_vec(), v)).collect()
}

#[test]
fn optimized_matches_brute_force() {
    let expected = brute_force(LENGTH);
    assert_eq!(expected.len(), FROZEN_COUNT);
    let set = enum_value_programs(LENGTH, &default_alphabet()).unwrap();
    assert_eq!(as_map(&set), expected);
    let sorted: Vec<&[TokenId]> = set.iter().map(|(p, _)| p).collect();
    assert!(sorted.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn short_lengths_match_brute_force() {
    for length in 1..LENGTH {
        let set = enum_value_programs(length, &default_alphabet()).unwrap();
        assert_eq!(as_map(&set), brute_force(length), "length {length}");
    }
}

#[test]
fn every_small_integer_reachable() {
    let set = enum_value_programs(LENGTH, &default_alphabet()).unwrap();
    for v in -20..=20 {
        assert!(set.is_reachable(v), "{v} unreachable");
    }
    assert!(set.programs_for_value(1_000_000_000).is_empty());
}

#[test]
fn baseline_at_zero_is_histogram_mode() {
    let set = enum_value_programs(LENGTH, &default_alphabet()).unwrap();
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for (_, v) in set.iter() {
        *counts.entry(v).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap();
    let mode = counts.iter().find(|(_, &c)| c == best).map(|(&v, _)| v).unwrap();
    assert_eq!((mode, best), FROZEN_MODE);
    let t0 = majority_baseline(&set, 0, BaselineMode::Conditional).unwrap();
    assert_eq!(t0, best as f64 / set.len() as f64);

    let curve: Vec<f64> = (0..=LENGTH)
        .map(|t| majority_baseline(&set, t, BaselineMode::Conditional).unwrap())
        .collect();
    assert!(curve.windows(2).all(|w| w[0] <= w[1]), "{curve:?}");
    assert_eq!(curve[LENGTH], 1.0);
}

#[test]
fn random_acceptance_rate_at_length_five() {
    let core: Vec<TokenId> = OpCode::core_set().iter().map(|op| op.token()).collect();
    assert_eq!(core.len(), 22);
    let config = VmConfig::default();
    let end = OpCode::End.token();
    let accepted = sequences(&core, 5)
        .filter(|seq| {
            let mut tokens: Vec<TokenId> = seq.iter().copied().take_while(|&t| t != end).collect();
            tokens.push(end);
            classify_tokens(&tokens, &config).is_true()
        })
        .count() as u64;
    assert_eq!(accepted, FROZEN_TRUE_AT_5);
    let exact = accepted as f64 / 22f64.powi(5);

    let mut rate = AcceptanceRate::default();
    for i in 0..20_000 {
        rate.record(&random_true_program(11, i, 5).unwrap());
    }
    assert!((rate.rate() - exact).abs() < 0.005, "sampled {} vs exact {exact}", rate.rate());
}
