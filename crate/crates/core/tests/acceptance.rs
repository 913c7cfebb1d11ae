//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use exact_alloc::corpus::{generate_synthetic_corpus, Document, SynthSpec};
use exact_alloc::exposure::{BucketScheme, BucketStats, LossMassAccumulator, PositionSignal};
use exact_alloc::objective::{stream_loss, Normalization, ObjectiveConfig};
use exact_alloc::packer::{effective_context_oracle, pack_stream, reconstruct_documents, PackPolicy, PackedStream};
use exact_alloc::probe::{build_field, delta_field, macro_mean_delta, paired_bootstrap_ci};
use exact_alloc::toylm::{forward_loss, train, ToyModel, TrainConfig};
use exact_alloc::util::seeded_rng;
use exact_alloc::weights::{
    compute_bucket_weights, extra_mass, weights_for_stream, TokenWeights, WeightFile, WeightKind, WeightPolicy,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn random_policy(rng: &mut impl Rng, kind: WeightKind) -> WeightPolicy {
    WeightPolicy {
        kind,
        alpha: rng.random_range(0.0..2.0),
        gamma: rng.random_range(0.0..3.0),
        epsilon: 10f64.powf(rng.random_range(-8.0..-1.0)),
        tau: BucketScheme::lower_bound(rng.random_range(0..12)),
        seed: 0,
    }
}

/// Random counts with at least one occupied bucket at or above `tau`.
fn random_stats(rng: &mut impl Rng, tau: u64) -> BucketStats {
    let n = rng.random_range(1..16usize).max(BucketScheme::bucket_of(tau) + 1);
    let mut counts: Vec<u64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                0
            } else {
                rng.random_range(1..1_000_000)
            }
        })
        .collect();
    let forced = rng.random_range(BucketScheme::bucket_of(tau)..n);
    counts[forced] = counts[forced].max(1);
    BucketStats::from_counts(PositionSignal::EffectiveContext, counts, "acceptance")
}

fn mass_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(0xacce, 1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let policy = random_policy(&mut rng, WeightKind::Exact);
        let stats = random_stats(&mut rng, policy.tau);
        let table = compute_bucket_weights(&stats, &policy).map_err(|e| e.to_string())?;
        worst = worst.max((table.tail_extra_mass() - policy.alpha).abs());
    }
    let t = start.elapsed();
    check(
        worst <= 1e-12 && t < Duration::from_secs(1),
        format!(
            "max |tail extra mass - alpha| = {worst:.2e} over 1000 cases in {}",
            secs(t)
        ),
    )
}

fn two_bucket_closed_form() -> Outcome {
    // Reference values from a 50-digit evaluation.
    const ORACLE: [f64; 2] = [1.1250138796364829, 1.3748750832716536];
    let stats = BucketStats::from_counts(
        PositionSignal::EffectiveContext,
        vec![0, 0, 0, 0, 0, 0, 0, 0, 90, 10],
        "x",
    );
    let policy = WeightPolicy {
        alpha: 0.15,
        gamma: 0.5,
        epsilon: 1e-4,
        tau: 1024,
        ..WeightPolicy::exact()
    };
    let t = compute_bucket_weights(&stats, &policy).map_err(|e| e.to_string())?;
    let (w0, w1) = (t.weight(8), t.weight(9));
    let err = (w0 - ORACLE[0]).abs().max((w1 - ORACLE[1]).abs());
    check(
        err <= 5e-4,
        format!("w = {{{w0:.10}, {w1:.10}}}, max deviation {err:.2e}"),
    )
}

fn tail_share_shift() -> Outcome {
    // 27.4% of supervised tokens sit at or above tau, spread unevenly.
    let tau = 1024;
    let mut counts = vec![900u64; 8];
    counts[7] = 7260 - 900 * 7;
    counts.extend([1500, 900, 340]);
    let stats = BucketStats::from_counts(PositionSignal::EffectiveContext, counts.clone(), "x");
    let mut shares = Vec::new();
    for (kind, gamma) in [
        (WeightKind::Exact, 0.5),
        (WeightKind::Exact, 2.0),
        (WeightKind::UniformBoost, 0.5),
    ] {
        let policy = WeightPolicy {
            kind,
            gamma,
            alpha: 0.15,
            tau,
            ..WeightPolicy::default()
        };
        let table = compute_bucket_weights(&stats, &policy).map_err(|e| e.to_string())?;
        let mut acc = LossMassAccumulator::new();
        for (b, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                acc.add(b, 1.0, table.weight(b));
            }
        }
        let report = acc.finish(tau);
        if (report.unweighted_tail_share - 0.274).abs() > 1e-12 {
            return Err(format!("fixture tail share {}", report.unweighted_tail_share));
        }
        shares.push(report.weighted_tail_share);
    }
    let worst = shares.iter().map(|s| (s - 0.3027).abs()).fold(0.0, f64::max);
    check(
        worst <= 0.0005,
        format!(
            "unweighted 0.2740 -> weighted {:?} (target 0.3027 +- 0.0005)",
            shares.iter().map(|s| format!("{s:.5}")).collect::<Vec<_>>()
        ),
    )
}

fn bucket_oracle() -> Outcome {
    let mut intervals = vec![(0u64, 7u64)];
    let mut lo = 8u64;
    while lo <= 65535 {
        intervals.push((lo, 2 * lo - 1));
        lo *= 2;
    }
    for ell in 0..=65535u64 {
        let want = intervals.iter().position(|&(a, b)| a <= ell && ell <= b).unwrap();
        if BucketScheme::bucket_of(ell) != want {
            return Err(format!(
                "bucket_of({ell}) = {}, interval scan says {want}",
                BucketScheme::bucket_of(ell)
            ));
        }
    }
    let edges = [
        (7, 0),
        (8, 1),
        (15, 1),
        (16, 2),
        (2047, 8),
        (2048, 9),
        (4095, 9),
        (4096, 10),
    ];
    for (ell, b) in edges {
        if BucketScheme::bucket_of(ell) != b {
            return Err(format!(
                "boundary {ell}: got bucket {}, expected {b}",
                BucketScheme::bucket_of(ell)
            ));
        }
    }
    Ok("65536 values agree; boundaries 7/8 15/16 2047/2048 4095/4096 hold".into())
}

fn packer_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(0xacce, 2);
    let mut positions = 0usize;
    for trial in 0..500 {
        let seq_len = rng.random_range(2..=512usize);
        let n_docs = rng.random_range(1..=24usize);
        let docs: Vec<Document> = (0..n_docs)
            .map(|k| {
                let n = rng.random_range(1..=4 * seq_len);
                Document::new(
                    format!("t{trial}d{k}"),
                    (0..n).map(|_| rng.random_range(0..50_000)).collect(),
                )
            })
            .collect();
        let policy = PackPolicy {
            drop_final_partial: false,
            permutation_seed: rng.random_bool(0.5).then(|| rng.random()),
            ..PackPolicy::new(seq_len)
        };
        let stream = pack_stream(docs.clone(), &policy).map_err(|e| e.to_string())?;
        let mut rebuilt = reconstruct_documents(&stream);
        let mut expected = docs;
        rebuilt.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        expected.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if rebuilt != expected {
            return Err(format!("trial {trial}: reconstruction differs"));
        }
        let decoded = PackedStream::decode(&stream.encode().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for (seq, dec) in stream.sequences.iter().zip(&decoded.sequences) {
            for i in 0..seq_len {
                let oracle = effective_context_oracle(seq, i) as u32;
                if seq.effective_context[i] != oracle || dec.effective_context[i] != oracle {
                    return Err(format!("trial {trial}: context mismatch at {i}"));
                }
            }
            positions += seq_len;
        }
    }
    let t = start.elapsed();
    check(
        t < Duration::from_secs(10),
        format!(
            "500 corpora, {positions} positions checked against the scan oracle in {}",
            secs(t)
        ),
    )
}

fn degeneracies() -> Outcome {
    let spec = SynthSpec {
        doc_count: 400,
        seed: 17,
        ..SynthSpec::default()
    };
    let (docs, _) = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
    let stream = pack_stream(docs, &PackPolicy::new(1024)).map_err(|e| e.to_string())?;
    let policy = WeightPolicy {
        alpha: 0.0,
        tau: 256,
        ..WeightPolicy::exact()
    };
    let (table, tw) = weights_for_stream(&stream, &policy).map_err(|e| e.to_string())?;
    let file = WeightFile::decode(
        &WeightFile::new(&table, &stream, &tw)
            .encode()
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(0xacce, 3);
    let ce: Vec<Vec<f64>> = stream
        .sequences
        .iter()
        .map(|_| (0..1024).map(|_| rng.random_range(0.0..8.0)).collect())
        .collect();
    let mut worst = 0.0f64;
    for norm in [Normalization::MaskSum, Normalization::WeightedMaskSum] {
        let cfg = ObjectiveConfig::new(norm);
        let weighted = stream_loss(&stream, &ce, &file.token_weights(), cfg).map_err(|e| e.to_string())?;
        let plain = stream_loss(&stream, &ce, &TokenWeights::ones(&stream), cfg).map_err(|e| e.to_string())?;
        worst = worst.max((weighted - plain).abs());
    }
    let model = ToyModel::new(spec.vocab_size() as usize, 8, 2);
    let seqs: Vec<_> = stream.sequences.iter().take(4).collect();
    let ws: Vec<&[f64]> = tw.sequences.iter().take(4).map(Vec::as_slice).collect();
    let ones = vec![1.0; 1024];
    let os: Vec<&[f64]> = (0..4).map(|_| ones.as_slice()).collect();
    let a = forward_loss(&model, &seqs, &ws, ObjectiveConfig::default())
        .map_err(|e| e.to_string())?
        .loss;
    let b = forward_loss(&model, &seqs, &os, ObjectiveConfig::default())
        .map_err(|e| e.to_string())?
        .loss;
    worst = worst.max((a - b).abs());

    let mut gamma_equal = true;
    for _ in 0..200 {
        let p = WeightPolicy {
            gamma: 0.0,
            ..random_policy(&mut rng, WeightKind::Exact)
        };
        let stats = random_stats(&mut rng, p.tau);
        let exact = compute_bucket_weights(&stats, &p).map_err(|e| e.to_string())?;
        let uniform = compute_bucket_weights(
            &stats,
            &WeightPolicy {
                kind: WeightKind::UniformBoost,
                ..p
            },
        )
        .map_err(|e| e.to_string())?;
        gamma_equal &= exact.weights == uniform.weights;
    }
    check(
        worst <= 1e-12 && gamma_equal,
        format!("alpha=0: max |weighted - masked CE| = {worst:.2e}; gamma=0: exact == uniform_boost on 200 tables: {gamma_equal}"),
    )
}

fn ablation_controls() -> Outcome {
    let spec = SynthSpec {
        doc_count: 400,
        seed: 23,
        ..SynthSpec::default()
    };
    let (docs, _) = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
    let stream = pack_stream(docs, &PackPolicy::new(1024)).map_err(|e| e.to_string())?;
    let exact = WeightPolicy {
        tau: 256,
        ..WeightPolicy::exact()
    };
    let (_, base) = weights_for_stream(&stream, &exact).map_err(|e| e.to_string())?;
    let target = extra_mass(&stream, &base);
    let mut preserved = 0;
    let mut moved = 0;
    for seed in 0..100 {
        let p = WeightPolicy {
            kind: WeightKind::RandomSameMass,
            seed,
            ..exact
        };
        let (_, tw) = weights_for_stream(&stream, &p).map_err(|e| e.to_string())?;
        preserved += (extra_mass(&stream, &tw) == target) as usize;
        moved += (tw.sequences != base.sequences) as usize;
    }

    // Every sequence holds several segments.
    let lens = [300usize, 700, 1500, 2000, 100, 900, 1200, 400, 3000, 250, 1800];
    let fixture: Vec<Document> = lens
        .iter()
        .enumerate()
        .map(|(k, &n)| Document::new(format!("f{k}"), vec![k as u32; n]))
        .collect();
    let fstream = pack_stream(fixture, &PackPolicy::new(2048)).map_err(|e| e.to_string())?;
    let multi = fstream.sequences.iter().filter(|s| s.segment_starts.len() >= 2).count();
    let (_, ex) = weights_for_stream(&fstream, &exact).map_err(|e| e.to_string())?;
    let (_, pp) = weights_for_stream(
        &fstream,
        &WeightPolicy {
            kind: WeightKind::PackedPosition,
            ..exact
        },
    )
    .map_err(|e| e.to_string())?;
    let differ = ex.sequences != pp.sequences;
    check(
        preserved == 100 && moved == 100 && multi > 0 && differ,
        format!(
            "random_same_mass kept extra mass {target:.6} bit-exactly on {preserved}/100 seeds; \
             packed_position differs from exact on a fixture with {multi} multi-segment sequences: {differ}"
        ),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let g = common::toy_gradient_check(7, 200, 1e-5, 1e-6, Normalization::MaskSum);
    let t = start.elapsed();
    check(
        g.max_rel <= 1e-4 && t < Duration::from_secs(30),
        format!(
            "max relative error {:.2e} (denominator floor 1e-6), max abs {:.2e} over {} coordinates in {}",
            g.max_rel,
            g.max_abs,
            g.coords,
            secs(t)
        ),
    )
}

fn mechanism_direction() -> Outcome {
    let start = Instant::now();
    let tau = 256;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let mut tail = [Vec::new(), Vec::new()];
    let mut short = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let spec = SynthSpec {
            doc_count: 2000,
            seed: 100 + seed,
            ..SynthSpec::default()
        };
        let (docs, _) = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
        let pack = PackPolicy {
            permutation_seed: Some(seed),
            ..PackPolicy::new(1024)
        };
        let cfg = TrainConfig {
            steps: 300,
            learning_rate: 0.5,
            seed,
            eval_every: 300,
            ..TrainConfig::default()
        };
        for (arm, kind) in [WeightKind::Identity, WeightKind::Exact].into_iter().enumerate() {
            let policy = WeightPolicy {
                kind,
                tau,
                ..WeightPolicy::default()
            };
            let out = pool
                .install(|| train(docs.clone(), spec.vocab_size() as usize, &pack, &policy, &cfg))
                .map_err(|e| e.to_string())?;
            let last = out.metrics.last().unwrap();
            tail[arm].push(
                last.mean_ce_between(tau, u64::MAX)
                    .ok_or("no tail targets in held-out")?,
            );
            short[arm].push(last.mean_ce_between(0, tau).ok_or("no short targets in held-out")?);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (tail_id, tail_ex) = (mean(&tail[0]), mean(&tail[1]));
    let (short_id, short_ex) = (mean(&short[0]), mean(&short[1]));
    let degradation = short_ex / short_id - 1.0;
    let wins = tail[0].iter().zip(&tail[1]).filter(|(a, b)| b < a).count();
    let t = start.elapsed();
    check(
        tail_ex < tail_id && degradation < 0.05 && t < Duration::from_secs(600),
        format!(
            "tail CE {tail_ex:.5} (exact) vs {tail_id:.5} (identity), lower on {wins}/5 seeds; \
             non-tail change {:+.3}%; single thread {}",
            degradation * 100.0,
            secs(t)
        ),
    )
}

fn probe_analytics() -> Outcome {
    let edges = common::probe_edges();
    let (a, planted_a) = common::planted_records("exact", 31, 40);
    let (b, planted_b) = common::planted_records("standard", 32, 40);
    let fa = build_field(&a, &edges).map_err(|e| e.to_string())?;
    let fb = build_field(&b, &edges).map_err(|e| e.to_string())?;
    let exact_g = planted_a.iter().all(|(k, g)| fa.cells[k].mean_g == *g);
    let ab = delta_field(&fa, &fb).map_err(|e| e.to_string())?;
    let exact_delta = ab
        .cells
        .iter()
        .all(|(k, c)| c.delta_g == Some(planted_a[k] - planted_b[k]));

    let (mut na, _) = common::planted_records("exact", 33, 40);
    for (i, r) in na.iter_mut().enumerate() {
        r.margin_original += (i as f64).sqrt() / 7.0;
    }
    let fna = build_field(&na, &edges).map_err(|e| e.to_string())?;
    let x = delta_field(&fna, &fb).map_err(|e| e.to_string())?;
    let y = delta_field(&fb, &fna).map_err(|e| e.to_string())?;
    let antisym = x
        .cells
        .iter()
        .all(|(k, c)| c.delta_g.unwrap() == -y.cells[k].delta_g.unwrap());

    let mut covered = 0;
    for trial in 0..100u64 {
        let cells = common::gaussian_cells(5000 + trial, 3, 500, 0.5);
        let ci = paired_bootstrap_ci(&cells, macro_mean_delta, 1000, 0.95, trial).map_err(|e| e.to_string())?;
        covered += (ci.lower <= 0.5 && 0.5 <= ci.upper) as usize;
    }
    check(
        exact_g && exact_delta && antisym && covered >= 93,
        format!(
            "planted G exact: {exact_g}; planted dG exact: {exact_delta}; antisymmetry: {antisym}; \
             bootstrap coverage {covered}/100"
        ),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dump = dir.path().join("dump.jsonl");
    common::write_dump(&dump);
    let root = dir.path().join("run");
    common::full_chain(&root, &dump);
    let first = common::snapshot(&root);
    std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
    common::full_chain(&root, &dump);
    let second = common::snapshot(&root);
    let differing: Vec<String> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    check(
        differing.is_empty() && first.len() == second.len(),
        format!(
            "{} artifacts across 11 commands; differing: {:?}",
            first.len(),
            differing
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("mass_identity", mass_identity),
        ("two_bucket_closed_form", two_bucket_closed_form),
        ("tail_share_shift", tail_share_shift),
        ("bucket_oracle", bucket_oracle),
        ("packer_correctness", packer_correctness),
        ("alpha_gamma_degeneracies", degeneracies),
        ("ablation_controls", ablation_controls),
        ("toy_gradient_check", gradient_check),
        ("mechanism_direction", mechanism_direction),
        ("probe_analytics", probe_analytics),
        ("cli_determinism", cli_determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if filter.as_deref().is_some_and(|p| !name.contains(p)) {
            continue;
        }
        ran += 1;
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
