//! Bucket and per-token supervision weights.
//!
//! The long-context tail `T` is the set of occupied buckets whose lower bound
//! reaches the threshold `tau`. EXACT spreads an average extra weight `alpha`
//! over `T` by inverse tail-local frequency:
//!
//! ```text
//! q_b = c_b / sum_{j in T} c_j
//! r_b = (q_b + eps)^(-gamma)
//! rbar = sum_{j in T} q_j r_j
//! w_b = 1 + alpha * r_b / rbar   (b in T), 1 otherwise
//! ```
//!
//! so that `sum_{b in T} q_b (w_b - 1) = alpha`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::{collect_stats, BucketScheme, BucketStats, PositionSignal};
use crate::packer::PackedStream;
use crate::util::{seeded_rng, ByteCursor, NeumaierSum};

pub const WEIGHT_MAGIC: &[u8; 4] = b"EXWT";
pub const WEIGHT_VERSION: u16 = 1;

pub const DEFAULT_ALPHA: f64 = 0.15;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_TAU: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Exact,
    UniformBoost,
    PackedPosition,
    RandomSameMass,
    Identity,
}

impl WeightKind {
    pub fn code(self) -> u8 {
        match self {
            WeightKind::Exact => 0,
            WeightKind::UniformBoost => 1,
            WeightKind::PackedPosition => 2,
            WeightKind::RandomSameMass => 3,
            WeightKind::Identity => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => WeightKind::Exact,
            1 => WeightKind::UniformBoost,
            2 => WeightKind::PackedPosition,
            3 => WeightKind::RandomSameMass,
            4 => WeightKind::Identity,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Exact => "exact",
            WeightKind::UniformBoost => "uniform_boost",
            WeightKind::PackedPosition => "packed_position",
            WeightKind::RandomSameMass => "random_same_mass",
            WeightKind::Identity => "identity",
        }
    }

    /// Position signal whose bucket statistics feed this policy.
    pub fn signal(self) -> PositionSignal {
        match self {
            WeightKind::PackedPosition => PositionSignal::PackedOffset,
            _ => PositionSignal::EffectiveContext,
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "exact" => WeightKind::Exact,
            "uniform_boost" => WeightKind::UniformBoost,
            "packed_position" => WeightKind::PackedPosition,
            "random_same_mass" => WeightKind::RandomSameMass,
            "identity" => WeightKind::Identity,
            other => return Err(Error::InvalidConfig(format!("unknown weight kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightPolicy {
    pub kind: WeightKind,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub tau: u64,
    pub seed: u64,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        Self {
            kind: WeightKind::Exact,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

impl WeightPolicy {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn with_kind(kind: WeightKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be finite and >= 0", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be finite and >= 0", self.gamma));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be finite and > 0", self.epsilon));
        }
        Ok(())
    }
}

/// Per-bucket weights plus the intermediate tail quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub policy: WeightPolicy,
    pub signal: PositionSignal,
    /// `weights[b]`; buckets past the end have weight 1.
    pub weights: Vec<f64>,
    pub tail: Vec<TailBucket>,
    pub rbar: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailBucket {
    pub bucket: usize,
    pub count: u64,
    pub q: f64,
    pub r: f64,
}

impl WeightTable {
    #[inline]
    pub fn weight(&self, bucket: usize) -> f64 {
        self.weights.get(bucket).copied().unwrap_or(1.0)
    }

    /// `sum_{b in T} q_b (w_b - 1)`; equals alpha for tail policies.
    pub fn tail_extra_mass(&self) -> f64 {
        self.tail
            .iter()
            .map(|t| t.q * (self.weight(t.bucket) - 1.0))
            .collect::<NeumaierSum>()
            .value()
    }

    pub fn token_weight(&self, ell: u64) -> f64 {
        self.weight(BucketScheme::bucket_of(ell))
    }
}

/// Builds the bucket table for `policy` from `stats`.
pub fn compute_bucket_weights(stats: &BucketStats, policy: &WeightPolicy) -> Result<WeightTable> {
    policy.validate()?;
    if stats.is_empty() {
        return Err(Error::InvalidConfig("bucket statistics are empty".into()));
    }
    let n = stats.counts.len();
    if policy.kind == WeightKind::Identity {
        return Ok(WeightTable {
            policy: *policy,
            signal: stats.signal,
            weights: vec![1.0; n],
            tail: Vec::new(),
            rbar: 1.0,
            fingerprint: stats.fingerprint.clone(),
        });
    }
    if stats.signal != policy.kind.signal() {
        return Err(Error::InvalidConfig(format!(
            "{} weighting needs {:?} statistics, got {:?}",
            policy.kind,
            policy.kind.signal(),
            stats.signal
        )));
    }

    let tail_buckets: Vec<(usize, u64)> = stats
        .occupied()
        .filter(|(b, _)| BucketScheme::lower_bound(*b) >= policy.tau)
        .collect();
    if tail_buckets.is_empty() {
        return Err(Error::EmptyTail {
            tau: policy.tau,
            occupied: stats.summary(),
        });
    }
    let tail_total: u64 = tail_buckets.iter().map(|(_, c)| c).sum();
    let denom = tail_total as f64;

    let mut tail: Vec<TailBucket> = tail_buckets
        .iter()
        .map(|&(bucket, count)| {
            let q = count as f64 / denom;
            let r = match policy.kind {
                WeightKind::UniformBoost => 1.0,
                _ => (q + policy.epsilon).powf(-policy.gamma),
            };
            TailBucket { bucket, count, q, r }
        })
        .collect();
    // rbar = sum q_j r_j, accumulated as (sum c_j r_j) / sum c_j so that
    // unit scores give rbar == 1 without rounding.
    let rbar = tail
        .iter()
        .map(|t| t.count as f64 * t.r)
        .collect::<NeumaierSum>()
        .value()
        / denom;

    let mut weights = vec![1.0; n];
    for t in &mut tail {
        weights[t.bucket] = 1.0 + policy.alpha * (t.r / rbar);
    }
    Ok(WeightTable {
        policy: *policy,
        signal: stats.signal,
        weights,
        tail,
        rbar,
        fingerprint: stats.fingerprint.clone(),
    })
}

/// Collects the statistics `policy` needs from `stream`, then builds the table.
pub fn build_weight_table(stream: &PackedStream, policy: &WeightPolicy) -> Result<WeightTable> {
    let stats = collect_stats(stream, policy.kind.signal())?;
    compute_bucket_weights(&stats, policy)
}

/// Per-token weights aligned with a packed stream, one array per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    pub kind: WeightKind,
    pub sequences: Vec<Vec<f64>>,
}

impl TokenWeights {
    pub fn ones(stream: &PackedStream) -> Self {
        Self {
            kind: WeightKind::Identity,
            sequences: vec![vec![1.0; stream.seq_len]; stream.sequences.len()],
        }
    }
}

fn table_weights(stream: &PackedStream, table: &WeightTable, signal: PositionSignal) -> Vec<Vec<f64>> {
    stream
        .sequences
        .iter()
        .enumerate()
        .map(|(k, seq)| {
            (0..seq.len())
                .map(|i| {
                    if seq.loss_mask[i] {
                        table.token_weight(signal.value(stream, k, i))
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Assigns a weight to every position of `stream`. Unsupervised positions
/// always get weight 1.
pub fn assign_token_weights(stream: &PackedStream, table: &WeightTable, policy: &WeightPolicy) -> Result<TokenWeights> {
    if policy.kind != WeightKind::Identity {
        let fp = stream.fingerprint()?;
        if fp != table.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: table.fingerprint.clone(),
                actual: fp,
            });
        }
    }
    let expected_signal = policy.kind.signal();
    if policy.kind != WeightKind::Identity && table.signal != expected_signal {
        return Err(Error::InvalidConfig(format!(
            "table was built from {:?} statistics but {} needs {:?}",
            table.signal, policy.kind, expected_signal
        )));
    }
    let sequences = match policy.kind {
        WeightKind::Identity => TokenWeights::ones(stream).sequences,
        WeightKind::Exact | WeightKind::UniformBoost => table_weights(stream, table, PositionSignal::EffectiveContext),
        WeightKind::PackedPosition => table_weights(stream, table, PositionSignal::PackedOffset),
        WeightKind::RandomSameMass => {
            let mut out = table_weights(stream, table, PositionSignal::EffectiveContext);
            for (k, (seq, w)) in stream.sequences.iter().zip(out.iter_mut()).enumerate() {
                let supervised: Vec<usize> = (0..seq.len()).filter(|&i| seq.loss_mask[i]).collect();
                let mut values: Vec<f64> = supervised.iter().map(|&i| w[i]).collect();
                values.shuffle(&mut seeded_rng(policy.seed, k as u64));
                for (&i, v) in supervised.iter().zip(values) {
                    w[i] = v;
                }
            }
            out
        }
    };
    Ok(TokenWeights {
        kind: policy.kind,
        sequences,
    })
}

/// Convenience: table + token weights in one call.
pub fn weights_for_stream(stream: &PackedStream, policy: &WeightPolicy) -> Result<(WeightTable, TokenWeights)> {
    let table_policy = match policy.kind {
        WeightKind::RandomSameMass => WeightPolicy {
            kind: WeightKind::Exact,
            ..*policy
        },
        _ => *policy,
    };
    let mut table = build_weight_table(stream, &table_policy)?;
    table.policy = *policy;
    let weights = assign_token_weights(stream, &table, policy)?;
    Ok((table, weights))
}

/// Total extra weight `sum_i m_i (w_i - 1)` summed in sorted order, so any
/// rearrangement of the same multiset gives a bit-identical result.
pub fn extra_mass(stream: &PackedStream, weights: &TokenWeights) -> f64 {
    let mut extras: Vec<f64> = stream
        .sequences
        .iter()
        .zip(&weights.sequences)
        .flat_map(|(seq, w)| (0..seq.len()).filter(|&i| seq.loss_mask[i]).map(move |i| w[i] - 1.0))
        .collect();
    extras.sort_by(f64::total_cmp);
    extras.into_iter().collect::<NeumaierSum>().value()
}

/// Decoded `EXWT` file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub fingerprint: String,
    pub policy: WeightPolicy,
    pub bucket_weights: Vec<(u16, f64)>,
    pub seq_len: usize,
    pub weights: Vec<Vec<f32>>,
}

impl WeightFile {
    pub fn new(table: &WeightTable, stream: &PackedStream, weights: &TokenWeights) -> Self {
        Self {
            fingerprint: table.fingerprint.clone(),
            policy: table.policy,
            bucket_weights: table.weights.iter().enumerate().map(|(b, &w)| (b as u16, w)).collect(),
            seq_len: stream.seq_len,
            weights: weights
                .sequences
                .iter()
                .map(|s| s.iter().map(|&w| w as f32).collect())
                .collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let fp = hex::decode(&self.fingerprint)
            .ok()
            .filter(|b| b.len() == 32)
            .ok_or_else(|| Error::format("EXWT", "fingerprint must be 32 hex-encoded bytes"))?;
        let tau = u32::try_from(self.policy.tau).map_err(|_| Error::format("EXWT", "tau does not fit 32 bits"))?;
        let nb = u16::try_from(self.bucket_weights.len()).map_err(|_| Error::format("EXWT", "too many buckets"))?;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&fp);
        out.push(self.policy.kind.code());
        out.extend_from_slice(&self.policy.alpha.to_le_bytes());
        out.extend_from_slice(&self.policy.gamma.to_le_bytes());
        out.extend_from_slice(&self.policy.epsilon.to_le_bytes());
        out.extend_from_slice(&tau.to_le_bytes());
        out.extend_from_slice(&self.policy.seed.to_le_bytes());
        out.extend_from_slice(&nb.to_le_bytes());
        for (b, w) in &self.bucket_weights {
            out.extend_from_slice(&b.to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        for seq in &self.weights {
            if seq.len() != self.seq_len {
                return Err(Error::LengthMismatch {
                    what: "weight sequence",
                    expected: self.seq_len,
                    actual: seq.len(),
                });
            }
            for w in seq {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = ByteCursor::new(bytes, "EXWT");
        c.magic(WEIGHT_MAGIC)?;
        let version = c.u16()?;
        if version != WEIGHT_VERSION {
            return Err(c.error(format!("unsupported version {version}")));
        }
        let fingerprint = hex::encode(c.take(32)?);
        let code = c.u8()?;
        let kind = WeightKind::from_code(code).ok_or_else(|| c.error(format!("unknown kind code {code}")))?;
        let policy = WeightPolicy {
            kind,
            alpha: c.f64()?,
            gamma: c.f64()?,
            epsilon: c.f64()?,
            tau: c.u32()? as u64,
            seed: c.u64()?,
        };
        let nb = c.u16()?;
        let mut bucket_weights = Vec::with_capacity(nb as usize);
        for _ in 0..nb {
            bucket_weights.push((c.u16()?, c.f64()?));
        }
        let count = c.u64()?;
        let seq_len = c.u32()? as usize;
        let mut weights = Vec::new();
        for _ in 0..count {
            let raw = c.take(seq_len * 4)?;
            weights.push(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
        }
        c.finish()?;
        Ok(Self {
            fingerprint,
            policy,
            bucket_weights,
            seq_len,
            weights,
        })
    }

    /// Checks that this file was produced for `stream`.
    pub fn check_stream(&self, stream: &PackedStream) -> Result<()> {
        let fp = stream.fingerprint()?;
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                actual: fp,
            });
        }
        if self.seq_len != stream.seq_len || self.weights.len() != stream.sequences.len() {
            return Err(Error::LengthMismatch {
                what: "weight file sequences",
                expected: stream.sequences.len(),
                actual: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn token_weights(&self) -> TokenWeights {
        TokenWeights {
            kind: self.policy.kind,
            sequences: self
                .weights
                .iter()
                .map(|s| s.iter().map(|&w| w as f64).collect())
                .collect(),
        }
    }
}
