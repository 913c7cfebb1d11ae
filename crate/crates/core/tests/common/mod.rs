#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use exact_alloc::cli::dispatch;
use exact_alloc::objective::CeDump;
use exact_alloc::packer::PackedStream;

use exact_alloc::probe::{BinEdges, CellKey, PairedCell, ProbeRecord};
use exact_alloc::util::seeded_rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn probe_edges() -> BinEdges {
    BinEdges::new(vec![0, 4096, 8192, 16384], vec![0, 1024, 4096, 16384]).unwrap()
}

/// Records where every prompt of `arm` in cell `k` has G exactly equal to the
/// planted constant. Margins are dyadic so the subtraction is exact.
pub fn planted_records(arm: &str, seed: u64, per_cell: usize) -> (Vec<ProbeRecord>, BTreeMap<CellKey, f64>) {
    let edges = probe_edges();
    let mut rng = seeded_rng(seed, 0);
    let mut records = Vec::new();
    let mut planted = BTreeMap::new();
    for c in 0..edges.context.len() - 1 {
        for d in 0..edges.distance.len() - 1 {
            let (c_lo, c_hi) = (edges.context[c], edges.context[c + 1]);
            let d_lo = edges.distance[d];
            if d_lo >= c_hi {
                continue;
            }
            let g = rng.random_range(-512i64..512) as f64 / 256.0;
            planted.insert(
                CellKey {
                    context: c,
                    distance: d,
                },
                g,
            );
            for p in 0..per_cell {
                let ctx = rng.random_range(c_lo.max(d_lo)..c_hi);
                let dist = rng.random_range(d_lo..=ctx.min(edges.distance[d + 1] - 1));
                let base = rng.random_range(-4096i64..4096) as f64 / 1024.0;
                records.push(ProbeRecord {
                    prompt_id: format!("c{c}d{d}p{p}"),
                    context_length: ctx,
                    evidence_distance: dist,
                    margin_original: base + g,
                    margin_counterfactual: base,
                    arm: arm.to_string(),
                    view: None,
                    correct: Some(rng.random_bool(0.5)),
                });
            }
        }
    }
    (records, planted)
}

/// Paired cells whose per-pair difference is Gaussian with the given mean.
pub fn gaussian_cells(seed: u64, cells: usize, per_cell: usize, mean: f64) -> Vec<PairedCell> {
    let mut rng = seeded_rng(seed, 0);
    let base = Normal::new(0.0, 2.0).unwrap();
    let diff = Normal::new(mean, 1.0).unwrap();
    (0..cells)
        .map(|k| PairedCell {
            key: CellKey {
                context: k,
                distance: 0,
            },
            pairs: (0..per_cell)
                .map(|_| {
                    let b = base.sample(&mut rng);
                    (b + diff.sample(&mut rng), b)
                })
                .collect(),
        })
        .collect()
}

pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub coords: usize,
}

/// Central finite differences against the analytic gradient of the toy
/// model on a vocab-20, L=32, two-sequence batch with random parameters,
/// random token weights and a padded tail.
pub fn toy_gradient_check(
    seed: u64,
    coords: usize,
    h: f64,
    floor: f64,
    normalization: exact_alloc::objective::Normalization,
) -> GradCheck {
    use exact_alloc::corpus::Document;
    use exact_alloc::objective::ObjectiveConfig;
    use exact_alloc::packer::{pack_stream, PackPolicy};
    use exact_alloc::toylm::{backward, forward_loss, ToyModel};
    use rand::seq::index::sample;

    let (vocab, seq_len) = (20usize, 32usize);
    let mut rng = seeded_rng(seed, 0);
    let docs: Vec<Document> = [9usize, 14, 3, 21, 5]
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            Document::new(
                format!("d{k}"),
                (0..n).map(|_| rng.random_range(0..vocab as u32)).collect(),
            )
        })
        .collect();
    let policy = PackPolicy {
        drop_final_partial: false,
        ..PackPolicy::new(seq_len)
    };
    let stream = pack_stream(docs, &policy).unwrap();
    assert_eq!(stream.sequences.len(), 2);
    let seqs: Vec<_> = stream.sequences.iter().collect();
    let weights: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..seq_len).map(|_| rng.random_range(0.5..2.0)).collect())
        .collect();
    let ws: Vec<&[f64]> = weights.iter().map(Vec::as_slice).collect();
    let config = ObjectiveConfig::new(normalization);

    let mut model = ToyModel::new(vocab, 8, seed);
    for i in 0..model.num_params() {
        *model.param_mut(i) += rng.random_range(-0.5..0.5);
    }
    let fwd = forward_loss(&model, &seqs, &ws, config).unwrap();
    let grads = backward(&model, &seqs, &fwd.cache, &ws, config).unwrap();

    let mut out = GradCheck {
        max_rel: 0.0,
        max_abs: 0.0,
        coords,
    };
    for idx in sample(&mut rng, model.num_params(), coords) {
        let orig = model.param(idx);
        *model.param_mut(idx) = orig + h;
        let up = forward_loss(&model, &seqs, &ws, config).unwrap().loss;
        *model.param_mut(idx) = orig - h;
        let down = forward_loss(&model, &seqs, &ws, config).unwrap().loss;
        *model.param_mut(idx) = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(idx);
        let abs = (numeric - analytic).abs();
        out.max_abs = out.max_abs.max(abs);
        out.max_rel = out.max_rel.max(abs / analytic.abs().max(numeric.abs()).max(floor));
    }
    out
}

pub fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["exact-alloc"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn tsv_value(path: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .find_map(|l| l.strip_prefix(&format!("{key}\t")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
}

pub fn synthetic_ce(stream: &PackedStream) -> CeDump {
    CeDump {
        sequences: (0..stream.sequences.len())
            .map(|k| {
                (0..stream.seq_len)
                    .map(|i| ((k * 31 + i * 17) % 97) as f64 / 10.0 + 0.01)
                    .collect()
            })
            .collect(),
    }
}

pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

pub fn full_chain(root: &Path, dump: &Path) {
    let s = |x: &str| root.join(x);
    assert_eq!(
        run(&["synth", "--docs", "300", "--seed", "9", "--out", p(&s("syn"))]),
        0
    );
    let corpus = s("syn/corpus.jsonl");
    let manifest = s("syn/corpus_manifest.json");
    let pack = [
        "pack",
        "--corpus",
        p(&corpus),
        "--manifest",
        p(&manifest),
        "--seq-len",
        "256",
        "--seed",
        "2",
    ];
    assert_eq!(run(&[&pack[..], &["--out", p(&s("pk"))]].concat()), 0);
    let stream = s("pk/stream.expk");
    assert_eq!(run(&["stats", "--stream", p(&stream), "--out", p(&s("st"))]), 0);
    let stats = s("st/stats.json");
    let weights = [
        "weights",
        "--stream",
        p(&stream),
        "--stats",
        p(&stats),
        "--kind",
        "exact",
        "--tau",
        "128",
    ];
    assert_eq!(run(&[&weights[..], &["--out", p(&s("wt"))]].concat()), 0);
    let random = [
        "weights",
        "--stream",
        p(&stream),
        "--kind",
        "random-same-mass",
        "--tau",
        "128",
        "--seed",
        "5",
    ];
    assert_eq!(run(&[&random[..], &["--out", p(&s("wr"))]].concat()), 0);
    let export = [
        "export",
        "--corpus",
        p(&corpus),
        "--seq-len",
        "256",
        "--kind",
        "packed-position",
        "--tau",
        "128",
    ];
    assert_eq!(run(&[&export[..], &["--out", p(&s("ex"))]].concat()), 0);
    let train = [
        "toy-train",
        "--corpus",
        p(&corpus),
        "--manifest",
        p(&manifest),
        "--seq-len",
        "256",
        "--kind",
        "exact",
        "--tau",
        "128",
        "--seed",
        "1",
        "--steps",
        "12",
        "--eval-every",
        "4",
        "--workers",
        "3",
    ];
    assert_eq!(run(&[&train[..], &["--out", p(&s("tt"))]].concat()), 0);
    let decoded = PackedStream::decode(&std::fs::read(&stream).unwrap()).unwrap();
    std::fs::write(s("ce.exce"), synthetic_ce(&decoded).encode()).unwrap();
    let wfile = s("wt/weights.exwt");
    let ce = s("ce.exce");
    let le_out = s("le");
    let le = [
        "loss-eval",
        "--stream",
        p(&stream),
        "--weights",
        p(&wfile),
        "--ce",
        p(&ce),
        "--out",
        p(&le_out),
    ];
    assert_eq!(run(&le), 0);
    let edges = [
        "--context-edges",
        "0,4096,8192,16384",
        "--distance-edges",
        "0,1024,4096,16384",
    ];
    assert_eq!(
        run(&[
            &["probe", "field", "--dump", p(dump), "--out", p(&s("pf"))][..],
            &edges[..]
        ]
        .concat()),
        0
    );
    assert_eq!(
        run(&[
            &["probe", "delta", "--dump", p(dump), "--out", p(&s("pd"))][..],
            &edges[..]
        ]
        .concat()),
        0
    );
    let pb = s("pb");
    let boot = [
        "probe",
        "bootstrap",
        "--dump",
        p(dump),
        "--resamples",
        "1000",
        "--seed",
        "3",
        "--out",
        p(&pb),
    ];
    assert_eq!(run(&[&boot[..], &edges[..]].concat()), 0);
}

pub fn write_dump(path: &Path) {
    let (mut a, _) = planted_records("exact", 1, 6);
    let (b, _) = planted_records("standard", 2, 6);
    a.extend(b);
    let text: String = a.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(path, text).unwrap();
}
