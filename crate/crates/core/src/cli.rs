//! Command-line front end. One binary, one subcommand per pipeline stage.
//!
//! Configuration comes from an optional TOML file (`--config`); flags win
//! over file values and file values win over built-in defaults. Every run
//! writes `run_manifest.json` next to its outputs with the resolved config,
//! its hash, input fingerprints and the seeds in effect.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{
    generate_synthetic_corpus, load_documents, write_documents, CorpusFormat, CorpusManifest, Document, SynthSpec,
};
use crate::error::{Error, Result};
use crate::exposure::{collect_stats, loss_mass_report, BucketScheme, BucketStats, PositionSignal, StatsFile};
use crate::objective::{stream_loss, CeDump, Normalization, ObjectiveConfig};
use crate::packer::{pack_stream, PackPolicy, PackedStream, DEFAULT_PAD_ID};
use crate::probe::{
    accuracy_by_distance, build_field, delta_by_distance, delta_field, field_to_tsv, macro_mean_delta, pair_records,
    parse_probe_dump, robust_display_normalize, split_by_arm, BinEdges, MarginMode, ProbeRecord,
};
use crate::toylm::{metrics_to_tsv, train, TrainConfig};
use crate::util::{read_file, sha256_file, sha256_hex, write_file};
use crate::weights::{
    assign_token_weights, compute_bucket_weights, TokenWeights, WeightFile, WeightKind, WeightPolicy, WeightTable,
    DEFAULT_TAU,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "exact-alloc",
    version,
    about = "Supervision allocation toolkit for packed LM training"
)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct PackArgs {
    #[arg(long)]
    seq_len: Option<usize>,
    /// Keep the trailing partial sequence (padded) instead of dropping it.
    #[arg(long)]
    keep_partial: bool,
    #[arg(long)]
    pad_id: Option<u32>,
    /// Seed for the document permutation applied before packing.
    #[arg(long)]
    permutation_seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
struct WeightArgs {
    #[arg(long)]
    kind: Option<WeightKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tau: Option<u64>,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Tokenized corpus (JSON lines or EXTK binary).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus manifest to verify the corpus against.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Binary,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SignalArg {
    EffectiveContext,
    PackedOffset,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic key/recall corpus.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        docs: Option<u64>,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: FormatArg,
    },
    /// Pack a corpus into fixed-length sequences.
    Pack {
        #[command(flatten)]
        input: CorpusArgs,
        #[command(flatten)]
        pack: PackArgs,
        /// Same as --permutation-seed.
        #[arg(long, conflicts_with = "permutation_seed")]
        seed: Option<u64>,
    },
    /// Bucket statistics of a packed stream.
    Stats {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, value_enum, default_value = "effective-context")]
        signal: SignalArg,
    },
    /// Bucket and per-token weights for a packed stream.
    Weights {
        #[arg(long)]
        stream: PathBuf,
        /// Precomputed statistics; must match the stream fingerprint.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        weights: WeightArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pack plus weights in one step.
    Export {
        #[command(flatten)]
        input: CorpusArgs,
        #[command(flatten)]
        pack: PackArgs,
        #[command(flatten)]
        weights: WeightArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Objective value and loss-mass report from a CE dump.
    LossEval {
        #[arg(long)]
        stream: PathBuf,
        /// EXWT weights; identity weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        ce: PathBuf,
        #[arg(long)]
        normalization: Option<Normalization>,
        /// Display threshold for the tail share (default: the weights' tau).
        #[arg(long)]
        threshold: Option<u64>,
    },
    /// Train the toy model on a corpus (synthetic when none is given).
    ToyTrain {
        #[command(flatten)]
        input: CorpusArgs,
        #[command(flatten)]
        pack: PackArgs,
        #[command(flatten)]
        weights: WeightArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        eval_every: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        normalization: Option<Normalization>,
    },
    /// Evidence-sensitivity analysis of probe dumps.
    Probe {
        #[command(subcommand)]
        command: ProbeCommand,
    },
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    margin_mode: Option<MarginMode>,
    #[arg(long, value_delimiter = ',')]
    context_edges: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    distance_edges: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct ArmArgs {
    /// First arm (default: first arm in the dump).
    #[arg(long)]
    arm_a: Option<String>,
    /// Second arm (default: second arm in the dump).
    #[arg(long)]
    arm_b: Option<String>,
}

#[derive(Debug, Subcommand)]
enum ProbeCommand {
    /// Per-arm G fields plus the shared display normalization.
    Field {
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
    },
    /// ΔG field between two arms.
    Delta {
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        arms: ArmArgs,
    },
    /// Paired bootstrap interval for the macro-mean ΔG.
    Bootstrap {
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        arms: ArmArgs,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        confidence: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PackSection {
    seq_len: Option<usize>,
    permutation_seed: Option<u64>,
    drop_final_partial: Option<bool>,
    pad_id: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProbeSection {
    margin_mode: MarginMode,
    context_edges: Vec<u64>,
    distance_edges: Vec<u64>,
    display_lo: f64,
    display_hi: f64,
    resamples: usize,
    confidence: f64,
    seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            margin_mode: MarginMode::Direct,
            context_edges: vec![0, 4096, 8192, 16384, 32768, 65536, 131072],
            distance_edges: vec![0, 1024, 4096, 8192, 16384, 32768, 65536, 131072],
            display_lo: 5.0,
            display_hi: 95.0,
            resamples: 2000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    corpus: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    synth: SynthSpec,
    pack: PackSection,
    weights: WeightPolicy,
    objective: ObjectiveConfig,
    train: TrainConfig,
    probe: ProbeSection,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Malformed {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Malformed {
            location: path.display().to_string(),
            message: e.message().to_string(),
        })
    }

    fn pack_policy(&self, args: &PackArgs) -> Result<PackPolicy> {
        let seq_len = args
            .seq_len
            .or(self.pack.seq_len)
            .ok_or_else(|| Error::InvalidConfig("--seq-len is required".into()))?;
        let policy = PackPolicy {
            seq_len,
            permutation_seed: args.permutation_seed.or(self.pack.permutation_seed),
            drop_final_partial: !args.keep_partial && self.pack.drop_final_partial.unwrap_or(true),
            pad_id: args.pad_id.or(self.pack.pad_id).unwrap_or(DEFAULT_PAD_ID),
        };
        policy.validate()?;
        Ok(policy)
    }

    fn weight_policy(&self, args: &WeightArgs, seed: Option<u64>) -> Result<WeightPolicy> {
        let base = self.weights;
        let policy = WeightPolicy {
            kind: args.kind.unwrap_or(base.kind),
            alpha: args.alpha.unwrap_or(base.alpha),
            gamma: args.gamma.unwrap_or(base.gamma),
            epsilon: args.epsilon.unwrap_or(base.epsilon),
            tau: args.tau.unwrap_or(base.tau),
            seed: seed.unwrap_or(base.seed),
        };
        policy.validate()?;
        Ok(policy)
    }

    fn out_dir(&self, flag: Option<&PathBuf>) -> Result<PathBuf> {
        flag.or(self.out.as_ref())
            .cloned()
            .ok_or_else(|| Error::InvalidConfig("--out is required".into()))
    }

    fn corpus_paths(&self, args: &CorpusArgs) -> (Option<PathBuf>, Option<PathBuf>) {
        (
            args.corpus.clone().or_else(|| self.corpus.clone()),
            args.manifest.clone().or_else(|| self.manifest.clone()),
        )
    }

    fn edges(&self, args: &ProbeArgs) -> Result<BinEdges> {
        BinEdges::new(
            args.context_edges
                .clone()
                .unwrap_or_else(|| self.probe.context_edges.clone()),
            args.distance_edges
                .clone()
                .unwrap_or_else(|| self.probe.distance_edges.clone()),
        )
    }
}

/// Collects inputs and outputs of one run and writes them with a manifest.
struct Run {
    command: &'static str,
    out: PathBuf,
    config: serde_json::Value,
    config_hash: String,
    inputs: Vec<serde_json::Value>,
    outputs: Vec<serde_json::Value>,
}

impl Run {
    fn new(command: &'static str, out: PathBuf, config: serde_json::Value) -> Self {
        let config_hash = sha256_hex(&serde_json::to_vec(&config).expect("config serializes"));
        Self {
            command,
            out,
            config,
            config_hash,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<String> {
        let sha = sha256_file(path)?;
        let name = path
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        self.inputs
            .push(json!({ "role": role, "path": path.display().to_string(), "name": name, "sha256": sha }));
        Ok(sha)
    }

    /// Header lines for text outputs. Inputs appear by file name so that
    /// identical inputs in different directories give identical bytes.
    fn header(&self) -> String {
        let mut h = format!(
            "# exact-alloc {VERSION} {}\n# config_hash={}\n",
            self.command, self.config_hash
        );
        for i in &self.inputs {
            let field = |k: &str| i[k].as_str().unwrap_or("").to_string();
            h.push_str(&format!(
                "# input {}={} sha256={}\n",
                field("role"),
                field("name"),
                field("sha256")
            ));
        }
        h
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        write_file(&path, bytes)?;
        self.outputs.push(json!({ "name": name, "sha256": sha256_hex(bytes) }));
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn write_text(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("{}{}", self.header(), body);
        self.write(name, text.as_bytes())
    }

    fn finish(self, seeds: serde_json::Value) -> Result<()> {
        let manifest = json!({
            "tool": "exact-alloc",
            "version": VERSION,
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seeds": seeds,
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_file(&self.out.join(MANIFEST_NAME), text.as_bytes())
    }
}

fn read_corpus(run: &mut Run, corpus: Option<&Path>, manifest: Option<&Path>) -> Result<(Vec<Document>, Option<u32>)> {
    let corpus = corpus.ok_or_else(|| Error::InvalidConfig("--corpus is required".into()))?;
    let manifest = match manifest {
        Some(p) => {
            run.input("corpus_manifest", p)?;
            Some(CorpusManifest::read(p)?)
        }
        None => None,
    };
    run.input("corpus", corpus)?;
    let reader = load_documents(corpus, manifest.as_ref())?;
    let vocab = reader.vocab_size();
    let docs = reader.collect::<Result<Vec<_>>>()?;
    Ok((docs, vocab))
}

fn read_stream(run: &mut Run, path: &Path) -> Result<PackedStream> {
    run.input("stream", path)?;
    PackedStream::decode(&read_file(path)?)
}

fn bucket_weights_tsv(table: &WeightTable, stats_counts: &BucketStats) -> String {
    let mut out = format!(
        "# kind={} alpha={} gamma={} epsilon={} tau={} seed={}\n# stream_fingerprint={}\n# rbar={}\n",
        table.policy.kind,
        table.policy.alpha,
        table.policy.gamma,
        table.policy.epsilon,
        table.policy.tau,
        table.policy.seed,
        table.fingerprint,
        table.rbar
    );
    out.push_str("bucket\tlower_bound\tcount\tweight\n");
    for (b, w) in table.weights.iter().enumerate() {
        out.push_str(&format!(
            "{b}\t{}\t{}\t{w:.17}\n",
            BucketScheme::lower_bound(b),
            stats_counts.count(b)
        ));
    }
    out
}

fn table_policy(policy: &WeightPolicy) -> WeightPolicy {
    match policy.kind {
        WeightKind::RandomSameMass => WeightPolicy {
            kind: WeightKind::Exact,
            ..*policy
        },
        _ => *policy,
    }
}

/// Table and token weights, optionally from precomputed statistics.
fn derive_weights(
    stream: &PackedStream,
    policy: &WeightPolicy,
    stats: Option<BucketStats>,
) -> Result<(WeightTable, TokenWeights, BucketStats)> {
    let stats = match stats {
        Some(s) => {
            let fp = stream.fingerprint()?;
            if s.fingerprint != fp {
                return Err(Error::FingerprintMismatch {
                    expected: fp,
                    actual: s.fingerprint,
                });
            }
            s
        }
        None => collect_stats(stream, policy.kind.signal())?,
    };
    let mut table = compute_bucket_weights(&stats, &table_policy(policy))?;
    table.policy = *policy;
    let weights = assign_token_weights(stream, &table, policy)?;
    Ok((table, weights, stats))
}

fn write_weight_outputs(
    run: &mut Run,
    stream: &PackedStream,
    table: &WeightTable,
    tw: &TokenWeights,
    stats: &BucketStats,
) -> Result<()> {
    run.write("weights.exwt", &WeightFile::new(table, stream, tw).encode()?)?;
    run.write_text("bucket_weights.tsv", &bucket_weights_tsv(table, stats))
}

fn stats_tsv(stats: &BucketStats) -> String {
    let mut out = format!(
        "# signal={:?} total={}\n# fingerprint={}\n",
        stats.signal, stats.total, stats.fingerprint
    );
    out.push_str("bucket\tlower_bound\tupper_bound\tcount\n");
    for (b, c) in stats.counts.iter().enumerate() {
        out.push_str(&format!(
            "{b}\t{}\t{}\t{c}\n",
            BucketScheme::lower_bound(b),
            BucketScheme::upper_bound(b)
        ));
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn select_arms(records: &[ProbeRecord], arms: &ArmArgs) -> Result<(Vec<ProbeRecord>, Vec<ProbeRecord>)> {
    let groups = split_by_arm(records);
    let pick = |name: Option<&String>, fallback: usize| -> Result<Vec<ProbeRecord>> {
        match name {
            Some(n) => groups
                .iter()
                .find(|(a, _)| a == n)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Probe(format!("arm {n:?} not present in the dump"))),
            None => groups
                .get(fallback)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Probe("dump needs at least two arms".into())),
        }
    };
    Ok((pick(arms.arm_a.as_ref(), 0)?, pick(arms.arm_b.as_ref(), 1)?))
}

fn load_probe(run: &mut Run, args: &ProbeArgs, mode: MarginMode) -> Result<Vec<ProbeRecord>> {
    run.input("dump", &args.dump)?;
    let text = String::from_utf8(read_file(&args.dump)?).map_err(|e| Error::Malformed {
        location: args.dump.display().to_string(),
        message: e.to_string(),
    })?;
    parse_probe_dump(&text, mode)
}

fn run_command(cli: Cli, file: FileConfig) -> Result<()> {
    let out = file.out_dir(cli.out.as_ref())?;
    match cli.command {
        Command::Synth { seed, docs, format } => {
            let mut spec = file.synth.clone();
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = docs {
                spec.doc_count = n;
            }
            let mut run = Run::new(
                "synth",
                out,
                json!({ "synth": to_json(&spec), "format": format!("{format:?}") }),
            );
            let (docs, mut manifest) = generate_synthetic_corpus(&spec)?;
            let (name, fmt) = match format {
                FormatArg::Jsonl => ("corpus.jsonl", CorpusFormat::Text),
                FormatArg::Binary => ("corpus.extk", CorpusFormat::Binary),
            };
            write_documents(&run.out.join(name), &docs, fmt, spec.vocab_size())?;
            let bytes = read_file(&run.out.join(name))?;
            run.outputs.push(json!({ "name": name, "sha256": sha256_hex(&bytes) }));
            manifest.add_source(&run.out.join(name))?;
            // Source paths are recorded relative to the output directory.
            for s in &mut manifest.sources {
                s.path = name.to_string();
            }
            let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            text.push('\n');
            run.write("corpus_manifest.json", text.as_bytes())?;
            run.finish(json!({ "generator": spec.seed }))
        }
        Command::Pack { input, mut pack, seed } => {
            pack.permutation_seed = pack.permutation_seed.or(seed);
            let policy = file.pack_policy(&pack)?;
            let (corpus, manifest) = file.corpus_paths(&input);
            let mut run = Run::new("pack", out, json!({ "pack": to_json(&policy) }));
            let (docs, _) = read_corpus(&mut run, corpus.as_deref(), manifest.as_deref())?;
            let stream = pack_stream(docs, &policy)?;
            log::info!("packed {} sequences", stream.sequences.len());
            run.write("stream.expk", &stream.encode()?)?;
            run.finish(json!({ "permutation": policy.permutation_seed }))
        }
        Command::Stats { stream, signal } => {
            let signal = match signal {
                SignalArg::EffectiveContext => PositionSignal::EffectiveContext,
                SignalArg::PackedOffset => PositionSignal::PackedOffset,
            };
            let mut run = Run::new("stats", out, json!({ "signal": to_json(&signal) }));
            let stream = read_stream(&mut run, &stream)?;
            let stats = collect_stats(&stream, signal)?;
            let mut text = serde_json::to_string_pretty(&stats.to_file()).expect("stats serialize");
            text.push('\n');
            run.write("stats.json", text.as_bytes())?;
            run.write_text("stats.tsv", &stats_tsv(&stats))?;
            run.finish(json!({}))
        }
        Command::Weights {
            stream,
            stats,
            weights,
            seed,
        } => {
            let policy = file.weight_policy(&weights, seed)?;
            let mut run = Run::new("weights", out, json!({ "weights": to_json(&policy) }));
            let stream = read_stream(&mut run, &stream)?;
            let stats = match stats {
                Some(p) => {
                    run.input("stats", &p)?;
                    let f: StatsFile = serde_json::from_slice(&read_file(&p)?).map_err(|e| Error::Malformed {
                        location: p.display().to_string(),
                        message: e.to_string(),
                    })?;
                    Some(f.into_stats()?)
                }
                None => None,
            };
            let (table, tw, stats) = derive_weights(&stream, &policy, stats)?;
            write_weight_outputs(&mut run, &stream, &table, &tw, &stats)?;
            run.finish(json!({ "weights": policy.seed }))
        }
        Command::Export {
            input,
            pack,
            weights,
            seed,
        } => {
            let pack_policy = file.pack_policy(&pack)?;
            let policy = file.weight_policy(&weights, seed)?;
            let (corpus, manifest) = file.corpus_paths(&input);
            let mut run = Run::new(
                "export",
                out,
                json!({ "pack": to_json(&pack_policy), "weights": to_json(&policy) }),
            );
            let (docs, _) = read_corpus(&mut run, corpus.as_deref(), manifest.as_deref())?;
            let stream = pack_stream(docs, &pack_policy)?;
            let (table, tw, stats) = derive_weights(&stream, &policy, None)?;
            run.write("stream.expk", &stream.encode()?)?;
            let mut text = serde_json::to_string_pretty(&stats.to_file()).expect("stats serialize");
            text.push('\n');
            run.write("stats.json", text.as_bytes())?;
            write_weight_outputs(&mut run, &stream, &table, &tw, &stats)?;
            run.finish(json!({ "permutation": pack_policy.permutation_seed, "weights": policy.seed }))
        }
        Command::LossEval {
            stream,
            weights,
            ce,
            normalization,
            threshold,
        } => {
            let objective = ObjectiveConfig::new(normalization.unwrap_or(file.objective.normalization));
            let mut run = Run::new(
                "loss-eval",
                out,
                json!({ "objective": to_json(&objective), "threshold": threshold }),
            );
            let stream = read_stream(&mut run, &stream)?;
            let (tw, tau) = match &weights {
                Some(p) => {
                    run.input("weights", p)?;
                    let wf = WeightFile::decode(&read_file(p)?)?;
                    wf.check_stream(&stream)?;
                    (wf.token_weights(), wf.policy.tau)
                }
                None => (TokenWeights::ones(&stream), DEFAULT_TAU),
            };
            run.input("ce", &ce)?;
            let ce = CeDump::decode(&read_file(&ce)?, stream.seq_len)?;
            let loss = stream_loss(&stream, &ce.sequences, &tw, objective)?;
            let plain = stream_loss(&stream, &ce.sequences, &TokenWeights::ones(&stream), objective)?;
            let report = loss_mass_report(&stream, &ce.sequences, &tw.sequences, threshold.unwrap_or(tau))?;
            run.write_text(
                "loss.tsv",
                &format!(
                    "metric\tvalue\nobjective\t{loss:.17}\nmasked_mean_ce\t{plain:.17}\nnormalization\t{}\nweight_kind\t{}\nsupervised_tokens\t{}\n",
                    objective.normalization,
                    tw.kind,
                    stream.supervised_tokens()
                ),
            )?;
            run.write_text("loss_mass.tsv", &report.to_tsv())?;
            log::info!("objective {loss:.17}");
            run.finish(json!({}))
        }
        Command::ToyTrain {
            input,
            pack,
            weights,
            seed,
            steps,
            batch_size,
            learning_rate,
            eval_every,
            dim,
            normalization,
        } => {
            let mut cfg = file.train.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            cfg.eval_every = eval_every.unwrap_or(cfg.eval_every);
            cfg.dim = dim.unwrap_or(cfg.dim);
            if let Some(n) = normalization {
                cfg.objective.normalization = n;
            }
            cfg.validate()?;
            let pack_policy = file.pack_policy(&pack)?;
            let policy = file.weight_policy(&weights, seed)?;
            let (corpus, manifest) = file.corpus_paths(&input);
            let synth = corpus.is_none().then(|| file.synth.clone());
            let mut run = Run::new(
                "toy-train",
                out,
                json!({
                    "pack": to_json(&pack_policy),
                    "weights": to_json(&policy),
                    "train": to_json(&cfg),
                    "synth": synth.as_ref().map(to_json),
                }),
            );
            let (docs, vocab) = match &synth {
                Some(spec) => (generate_synthetic_corpus(spec)?.0, spec.vocab_size()),
                None => {
                    let (docs, vocab) = read_corpus(&mut run, corpus.as_deref(), manifest.as_deref())?;
                    let vocab =
                        vocab.unwrap_or_else(|| docs.iter().flat_map(|d| d.tokens.iter()).max().map_or(1, |&t| t + 1));
                    (docs, vocab)
                }
            };
            let result = train(docs, vocab as usize, &pack_policy, &policy, &cfg)?;
            run.write_text("metrics.tsv", &metrics_to_tsv(&result.metrics))?;
            run.write("model.extm", &result.model.encode())?;
            run.finish(json!({
                "train": cfg.seed,
                "weights": policy.seed,
                "permutation": pack_policy.permutation_seed,
                "generator": synth.map(|s| s.seed),
            }))
        }
        Command::Probe { command } => run_probe(command, &file, out),
    }
}

fn run_probe(command: ProbeCommand, file: &FileConfig, out: PathBuf) -> Result<()> {
    let p = &file.probe;
    match command {
        ProbeCommand::Field { probe, lo, hi } => {
            let mode = probe.margin_mode.unwrap_or(p.margin_mode);
            let edges = file.edges(&probe)?;
            let (lo, hi) = (lo.unwrap_or(p.display_lo), hi.unwrap_or(p.display_hi));
            let mut run = Run::new(
                "probe-field",
                out,
                json!({ "margin_mode": mode.to_string(), "edges": to_json(&edges), "display_lo": lo, "display_hi": hi }),
            );
            let records = load_probe(&mut run, &probe, mode)?;
            let fields = split_by_arm(&records)
                .into_iter()
                .map(|(_, recs)| build_field(&recs, &edges))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = fields.iter().collect();
            let display = robust_display_normalize(&refs, lo, hi)?;
            let mut disp = edges.header();
            disp.push_str(&format!("# margin_mode={mode}\n# percentiles={lo}/{hi}\n"));
            disp.push_str("arm\tcontext_bin\tdistance_bin\tdisplay_value\trange_lo\trange_hi\tdegenerate\n");
            for (f, d) in fields.iter().zip(&display) {
                run.write_text(&format!("field_{}.tsv", f.arm), &field_to_tsv(f, mode))?;
                for (k, v) in &d.cells {
                    disp.push_str(&format!(
                        "{}\t{}\t{}\t{v:.12}\t{:.12}\t{:.12}\t{}\n",
                        d.arm, k.context, k.distance, d.range.0, d.range.1, d.degenerate
                    ));
                }
            }
            run.write_text("display.tsv", &disp)?;
            run.finish(json!({}))
        }
        ProbeCommand::Delta { probe, arms } => {
            let mode = probe.margin_mode.unwrap_or(p.margin_mode);
            let edges = file.edges(&probe)?;
            let mut run = Run::new(
                "probe-delta",
                out,
                json!({ "margin_mode": mode.to_string(), "edges": to_json(&edges), "arm_a": arms.arm_a, "arm_b": arms.arm_b }),
            );
            let records = load_probe(&mut run, &probe, mode)?;
            let (a, b) = select_arms(&records, &arms)?;
            let d = delta_field(&build_field(&a, &edges)?, &build_field(&b, &edges)?)?;
            run.write_text("delta.tsv", &field_to_tsv(&d, mode))?;
            let acc_a = accuracy_by_distance(&a, &edges)?;
            let acc_b = accuracy_by_distance(&b, &edges)?;
            let mut prof = edges.header();
            prof.push_str(&format!("# arms={}\n# margin_mode={mode}\n", d.arm));
            prof.push_str("distance_bin\tdistance_lo\tmacro_delta_g\tanswer_lift\n");
            for (bin, v) in delta_by_distance(&d) {
                let lift = match (acc_a.get(&bin), acc_b.get(&bin)) {
                    (Some(x), Some(y)) => format!("{:.12}", x.0 - y.0),
                    _ => "NA".into(),
                };
                prof.push_str(&format!("{bin}\t{}\t{v:.12}\t{lift}\n", edges.distance[bin]));
            }
            run.write_text("distance_profile.tsv", &prof)?;
            run.finish(json!({}))
        }
        ProbeCommand::Bootstrap {
            probe,
            arms,
            resamples,
            confidence,
            seed,
        } => {
            let mode = probe.margin_mode.unwrap_or(p.margin_mode);
            let edges = file.edges(&probe)?;
            let resamples = resamples.unwrap_or(p.resamples);
            let confidence = confidence.unwrap_or(p.confidence);
            let seed = seed.unwrap_or(p.seed);
            let mut run = Run::new(
                "probe-bootstrap",
                out,
                json!({
                    "margin_mode": mode.to_string(), "edges": to_json(&edges), "arm_a": arms.arm_a,
                    "arm_b": arms.arm_b, "resamples": resamples, "confidence": confidence, "seed": seed,
                }),
            );
            let records = load_probe(&mut run, &probe, mode)?;
            let (a, b) = select_arms(&records, &arms)?;
            let cells = pair_records(&a, &b, &edges)?;
            let ci = crate::probe::paired_bootstrap_ci(&cells, macro_mean_delta, resamples, confidence, seed)?;
            let mut body = edges.header();
            body.push_str(&format!(
                "# arms={}-{}\n# margin_mode={mode}\n# aggregation=macro_mean\n",
                a[0].arm, b[0].arm
            ));
            body.push_str("point\tlower\tupper\tconfidence\tresamples\tcells\tseed\n");
            body.push_str(&format!(
                "{:.12}\t{:.12}\t{:.12}\t{}\t{}\t{}\t{seed}\n",
                ci.point,
                ci.lower,
                ci.upper,
                ci.confidence,
                ci.resamples,
                cells.len()
            ));
            run.write_text("bootstrap.tsv", &body)?;
            run.finish(json!({ "bootstrap": seed }))
        }
    }
}

/// Single-line machine-readable error record.
pub fn error_record(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status. Errors are reported as one JSON line on stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("EXACT_ALLOC_LOG")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_record("usage", first));
            return 2;
        }
    };
    let result = FileConfig::load(cli.config.as_deref()).and_then(|file| {
        let workers = cli.workers.or(file.workers).unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| run_command(cli, file))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parses_partial_sections() {
        let text = r#"
            out = "o"
            [pack]
            seq_len = 64
            [weights]
            kind = "uniform_boost"
            alpha = 0.3
            [train]
            steps = 5
        "#;
        let f: FileConfig = toml::from_str(text).unwrap();
        assert_eq!(f.pack.seq_len, Some(64));
        assert_eq!(f.weights.kind, WeightKind::UniformBoost);
        assert_eq!(f.weights.gamma, crate::weights::DEFAULT_GAMMA);
        assert_eq!(f.train.steps, 5);
        assert_eq!(f.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn flags_override_file() {
        let f: FileConfig = toml::from_str("[weights]\nalpha = 0.3\ntau = 256\n").unwrap();
        let args = WeightArgs {
            alpha: Some(0.0),
            ..WeightArgs::default()
        };
        let p = f.weight_policy(&args, Some(9)).unwrap();
        assert_eq!((p.alpha, p.tau, p.seed), (0.0, 256, 9));
    }

    #[test]
    fn unknown_config_keys_fail() {
        assert!(toml::from_str::<FileConfig>("[weights]\nalpah = 0.3\n").is_err());
    }

    #[test]
    fn error_record_is_one_line_json() {
        let r = error_record("empty_tail", "no tail\nsecond line");
        assert!(!r.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&r).unwrap();
        assert_eq!(v["error"], "empty_tail");
    }
}
