use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ipfsim_core::compressed::representable;
use ipfsim_core::trace::{
    cluster_stats, generate_synthetic, load_trace, miss_pairs, read_trace, save_trace, write_trace,
    SyntheticWorkloadSpec, TraceRecord, DEFAULT_WINDOW_SIZES,
};

fn spec_strategy() -> impl Strategy<Value = SyntheticWorkloadSpec> {
    (
        any::<u64>(),
        1u32..64,
        1u32..24,
        0u32..8,
        0.0f64..0.5,
        0.0f64..0.5,
        0.0f64..0.2,
        1u64..4000,
        1u32..500,
        1u64..3000,
        0.0f64..0.5,
    )
        .prop_map(
            |(seed, fc, ml, depth, lp, cp, churn, fp, rpc, n, far)| SyntheticWorkloadSpec {
                seed,
                function_count: fc,
                mean_function_lines: ml,
                call_depth_max: depth,
                loop_probability: lp,
                call_probability: cp,
                phase_churn_probability: churn,
                footprint_lines: fp,
                rpc_length_mean: rpc,
                record_count: n,
                far_function_fraction: far,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn generator_is_deterministic(spec in spec_strategy()) {
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_trace(&mut ba, &a).unwrap();
        write_trace(&mut bb, &b).unwrap();
        prop_assert_eq!(ba, bb);
    }

    #[test]
    fn generated_traces_respect_spec(spec in spec_strategy()) {
        let t = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(t.len() as u64, spec.record_count);
        let lines: BTreeSet<u64> = t.iter().filter_map(TraceRecord::line).collect();
        prop_assert!(lines.len() as u64 <= spec.footprint_lines);
    }

    #[test]
    fn format_round_trip(spec in spec_strategy()) {
        let t = generate_synthetic(&spec).unwrap();
        let mut bytes = Vec::new();
        write_trace(&mut bytes, &t).unwrap();
        prop_assert_eq!(bytes.len() as u64, 8 + 10 * spec.record_count);
        prop_assert_eq!(read_trace(&bytes[..]).unwrap(), t);
    }

    #[test]
    fn coverage_monotone_in_window(spec in spec_strategy()) {
        let t = generate_synthetic(&spec).unwrap();
        let windows: Vec<u64> = (1..=20).collect();
        if let Ok(s) = cluster_stats(&t, &windows) {
            for w in s.per_window_histogram.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
            prop_assert!((0.0..=1.0).contains(&s.window8_fraction));
            prop_assert!((0.0..=1.0).contains(&s.delta20_fraction));
        }
    }
}

#[test]
fn file_round_trip() {
    let spec = SyntheticWorkloadSpec {
        record_count: 5_000,
        ..Default::default()
    };
    let t = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.slof");
    save_trace(&path, &t).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 10 * 5_000);
    assert_eq!(load_trace(&path).unwrap(), t);
}

#[test]
fn default_spec_is_clustered() {
    let t = generate_synthetic(&SyntheticWorkloadSpec::default()).unwrap();
    let s = cluster_stats(&t, &DEFAULT_WINDOW_SIZES).unwrap();
    assert!(s.window8_fraction >= 0.7, "window8_fraction {}", s.window8_fraction);
    assert_eq!(s.delta20_fraction, 1.0);
}

#[test]
fn far_functions_break_the_shared_region() {
    let spec = SyntheticWorkloadSpec {
        far_function_fraction: 0.5,
        record_count: 50_000,
        ..Default::default()
    };
    let s = cluster_stats(&generate_synthetic(&spec).unwrap(), &DEFAULT_WINDOW_SIZES).unwrap();
    assert!(s.delta20_fraction < 0.9, "delta20_fraction {}", s.delta20_fraction);
}

/// Quadratic recount straight from the definitions: replay a list-LRU L1,
/// collect distinct consecutive-miss pairs, and try every window start.
fn brute_force(trace: &[TraceRecord], width: u64) -> (u64, u64, u64) {
    let mut sets: Vec<Vec<u64>> = vec![Vec::new(); 64];
    let mut prev = None;
    let mut pairs = BTreeSet::new();
    for line in trace.iter().filter_map(TraceRecord::line) {
        let set = &mut sets[(line % 64) as usize];
        if let Some(p) = set.iter().position(|&l| l == line) {
            set.remove(p);
            set.push(line);
            continue;
        }
        if set.len() == 8 {
            set.remove(0);
        }
        set.push(line);
        if let Some(s) = prev {
            pairs.insert((s, line));
        }
        prev = Some(line);
    }
    let within20 = pairs.iter().filter(|(s, d)| s >> 20 == d >> 20).count() as u64;
    let sources: BTreeSet<u64> = pairs.iter().map(|p| p.0).collect();
    let mut covered = 0;
    for s in sources {
        let dests: Vec<u64> = pairs.iter().filter(|p| p.0 == s).map(|p| p.1).collect();
        let best = dests
            .iter()
            .map(|&start| dests.iter().filter(|&&d| d >= start && d < start + width).count())
            .max()
            .unwrap();
        covered += best as u64;
    }
    (pairs.len() as u64, within20, covered)
}

#[test]
fn cluster_stats_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for round in 0..20 {
        // random lines over a few far-apart regions so both fractions vary
        let n = rng.gen_range(50..2000);
        let trace: Vec<TraceRecord> = (0..n)
            .map(|_| {
                let region: u64 = rng.gen_range(0..3);
                let line = (region << 21) + rng.gen_range(0..600);
                TraceRecord::Fetch {
                    address: line << 6,
                    thread_tag: 0,
                }
            })
            .collect();
        let s = cluster_stats(&trace, &DEFAULT_WINDOW_SIZES).unwrap();
        for &w in &DEFAULT_WINDOW_SIZES {
            let (pairs, within20, covered) = brute_force(&trace, w);
            assert_eq!(s.pairs, pairs, "round {round}");
            assert_eq!(
                s.coverage(w).unwrap(),
                covered as f64 / pairs as f64,
                "round {round} w {w}"
            );
            assert_eq!(s.delta20_fraction, within20 as f64 / pairs as f64, "round {round}");
        }
    }
}

#[test]
fn representable_fraction_matches_delta20() {
    let spec = SyntheticWorkloadSpec {
        far_function_fraction: 0.3,
        record_count: 60_000,
        ..Default::default()
    };
    let t = generate_synthetic(&spec).unwrap();
    let pairs = miss_pairs(&t);
    let rep = pairs.iter().filter(|&&(s, d)| representable(s, d)).count();
    let s = cluster_stats(&t, &DEFAULT_WINDOW_SIZES).unwrap();
    assert_eq!(s.delta20_fraction, rep as f64 / pairs.len() as f64);
}
