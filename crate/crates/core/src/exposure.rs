//! Logarithmic exposure buckets over effective context, stream-level bucket
//! counts, and loss-mass allocation reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packer::PackedStream;
use crate::util::NeumaierSum;

pub const SCHEME_VERSION: u32 = 1;

/// Bucket 0 is `[0, 7]`; bucket `k >= 1` is `[2^(k+2), 2^(k+3) - 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BucketScheme;

impl BucketScheme {
    #[inline]
    pub fn bucket_of(ell: u64) -> usize {
        if ell <= 7 {
            0
        } else {
            (63 - ell.leading_zeros()) as usize - 2
        }
    }

    #[inline]
    pub fn lower_bound(bucket: usize) -> u64 {
        if bucket == 0 {
            0
        } else {
            1u64 << (bucket + 2)
        }
    }

    /// Inclusive upper bound; saturates for the top bucket.
    pub fn upper_bound(bucket: usize) -> u64 {
        if bucket + 3 >= 64 {
            u64::MAX
        } else {
            (1u64 << (bucket + 3)) - 1
        }
    }
}

/// Which per-position signal is bucketed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSignal {
    /// Same-segment left context ℓ_i.
    EffectiveContext,
    /// Absolute offset inside the packed sequence.
    PackedOffset,
}

impl PositionSignal {
    #[inline]
    pub fn value(self, stream: &PackedStream, seq: usize, pos: usize) -> u64 {
        match self {
            PositionSignal::EffectiveContext => stream.sequences[seq].effective_context[pos] as u64,
            PositionSignal::PackedOffset => pos as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketStats {
    pub signal: PositionSignal,
    /// `counts[b]` = supervised targets in bucket `b`; no trailing zeros.
    pub counts: Vec<u64>,
    pub total: u64,
    pub fingerprint: String,
}

impl BucketStats {
    pub fn from_counts(signal: PositionSignal, mut counts: Vec<u64>, fingerprint: impl Into<String>) -> Self {
        while counts.last() == Some(&0) {
            counts.pop();
        }
        Self {
            signal,
            total: counts.iter().sum(),
            counts,
            fingerprint: fingerprint.into(),
        }
    }

    pub fn count(&self, bucket: usize) -> u64 {
        self.counts.get(bucket).copied().unwrap_or(0)
    }

    pub fn occupied(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts.iter().copied().enumerate().filter(|(_, c)| *c > 0)
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn summary(&self) -> String {
        let parts: Vec<String> = self
            .occupied()
            .map(|(b, c)| format!("{}:{}", BucketScheme::lower_bound(b), c))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }

    pub fn to_file(&self) -> StatsFile {
        StatsFile {
            scheme_version: SCHEME_VERSION,
            signal: self.signal,
            fingerprint: self.fingerprint.clone(),
            total: self.total,
            buckets: self
                .counts
                .iter()
                .enumerate()
                .map(|(index, &count)| StatsRow {
                    index,
                    lower_bound: BucketScheme::lower_bound(index),
                    count,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub index: usize,
    pub lower_bound: u64,
    pub count: u64,
}

/// On-disk stats record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub scheme_version: u32,
    pub signal: PositionSignal,
    pub fingerprint: String,
    pub total: u64,
    pub buckets: Vec<StatsRow>,
}

impl StatsFile {
    pub fn into_stats(self) -> Result<BucketStats> {
        if self.scheme_version != SCHEME_VERSION {
            return Err(Error::format(
                "stats",
                format!("unsupported scheme version {}", self.scheme_version),
            ));
        }
        let n = self.buckets.iter().map(|r| r.index + 1).max().unwrap_or(0);
        let mut counts = vec![0u64; n];
        for r in &self.buckets {
            if r.lower_bound != BucketScheme::lower_bound(r.index) {
                return Err(Error::format(
                    "stats",
                    format!("bucket {} has lower bound {}", r.index, r.lower_bound),
                ));
            }
            counts[r.index] = r.count;
        }
        let stats = BucketStats::from_counts(self.signal, counts, self.fingerprint);
        if stats.total != self.total {
            return Err(Error::format(
                "stats",
                format!("counts sum to {} but total says {}", stats.total, self.total),
            ));
        }
        Ok(stats)
    }
}

fn count_sequence(stream: &PackedStream, seq: usize, signal: PositionSignal) -> Vec<u64> {
    let mut counts = Vec::new();
    let s = &stream.sequences[seq];
    for pos in 0..s.len() {
        if !s.loss_mask[pos] {
            continue;
        }
        let b = BucketScheme::bucket_of(signal.value(stream, seq, pos));
        if counts.len() <= b {
            counts.resize(b + 1, 0);
        }
        counts[b] += 1;
    }
    counts
}

/// Counts supervised targets per bucket. Shards by sequence; merging is
/// integer addition, so the result does not depend on scheduling.
pub fn collect_stats(stream: &PackedStream, signal: PositionSignal) -> Result<BucketStats> {
    let fingerprint = stream.fingerprint()?;
    let counts = (0..stream.sequences.len())
        .into_par_iter()
        .map(|k| count_sequence(stream, k, signal))
        .reduce(Vec::new, |mut a, b| {
            if a.len() < b.len() {
                a.resize(b.len(), 0);
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        });
    Ok(BucketStats::from_counts(signal, counts, fingerprint))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMassRow {
    pub bucket: usize,
    pub lower_bound: u64,
    pub unweighted_share: f64,
    pub weighted_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMassReport {
    pub rows: Vec<LossMassRow>,
    pub display_threshold: u64,
    pub unweighted_tail_share: f64,
    pub weighted_tail_share: f64,
}

impl LossMassReport {
    pub fn unweighted_below_share(&self) -> f64 {
        1.0 - self.unweighted_tail_share
    }

    pub fn weighted_below_share(&self) -> f64 {
        1.0 - self.weighted_tail_share
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bucket\tlower_bound\tunweighted_share\tweighted_share\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.12}\t{:.12}\n",
                r.bucket, r.lower_bound, r.unweighted_share, r.weighted_share
            ));
        }
        out.push_str(&format!(
            "tail>={}\t{}\t{:.12}\t{:.12}\n",
            self.display_threshold, self.display_threshold, self.unweighted_tail_share, self.weighted_tail_share
        ));
        out
    }
}

/// Per-bucket CE mass accumulator, unweighted and weighted columns.
#[derive(Debug, Clone, Default)]
pub struct LossMassAccumulator {
    unweighted: Vec<NeumaierSum>,
    weighted: Vec<NeumaierSum>,
}

impl LossMassAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, bucket: usize, ce: f64, weight: f64) {
        if self.unweighted.len() <= bucket {
            self.unweighted.resize(bucket + 1, NeumaierSum::new());
            self.weighted.resize(bucket + 1, NeumaierSum::new());
        }
        self.unweighted[bucket].add(ce);
        self.weighted[bucket].add(weight * ce);
    }

    pub fn finish(&self, display_threshold: u64) -> LossMassReport {
        let un: Vec<f64> = self.unweighted.iter().map(|s| s.value()).collect();
        let wt: Vec<f64> = self.weighted.iter().map(|s| s.value()).collect();
        let un_total: f64 = un.iter().copied().collect::<NeumaierSum>().value();
        let wt_total: f64 = wt.iter().copied().collect::<NeumaierSum>().value();
        let share = |x: f64, t: f64| if t > 0.0 { x / t } else { 0.0 };
        let mut rows = Vec::new();
        let mut un_tail = NeumaierSum::new();
        let mut wt_tail = NeumaierSum::new();
        for b in 0..un.len() {
            if BucketScheme::lower_bound(b) >= display_threshold {
                un_tail.add(un[b]);
                wt_tail.add(wt[b]);
            }
            if un[b] == 0.0 && wt[b] == 0.0 {
                continue;
            }
            rows.push(LossMassRow {
                bucket: b,
                lower_bound: BucketScheme::lower_bound(b),
                unweighted_share: share(un[b], un_total),
                weighted_share: share(wt[b], wt_total),
            });
        }
        LossMassReport {
            rows,
            display_threshold,
            unweighted_tail_share: share(un_tail.value(), un_total),
            weighted_tail_share: share(wt_tail.value(), wt_total),
        }
    }
}

/// Loss-mass allocation by effective-context bucket. `ce` and `weights` are
/// per-sequence arrays aligned with the stream; masked positions are skipped.
pub fn loss_mass_report(
    stream: &PackedStream,
    ce: &[Vec<f64>],
    weights: &[Vec<f64>],
    display_threshold: u64,
) -> Result<LossMassReport> {
    check_alignment(stream, ce, "CE dump")?;
    check_alignment(stream, weights, "token weights")?;
    let mut acc = LossMassAccumulator::new();
    for (k, seq) in stream.sequences.iter().enumerate() {
        for i in 0..seq.len() {
            if !seq.loss_mask[i] {
                continue;
            }
            let c = ce[k][i];
            if !c.is_finite() || c < 0.0 {
                return Err(Error::NonFinite {
                    what: "CE dump",
                    index: k * stream.seq_len + i,
                });
            }
            acc.add(
                BucketScheme::bucket_of(seq.effective_context[i] as u64),
                c,
                weights[k][i],
            );
        }
    }
    Ok(acc.finish(display_threshold))
}

pub(crate) fn check_alignment(stream: &PackedStream, values: &[Vec<f64>], what: &'static str) -> Result<()> {
    if values.len() != stream.sequences.len() {
        return Err(Error::LengthMismatch {
            what,
            expected: stream.sequences.len(),
            actual: values.len(),
        });
    }
    for v in values {
        if v.len() != stream.seq_len {
            return Err(Error::LengthMismatch {
                what,
                expected: stream.seq_len,
                actual: v.len(),
            });
        }
    }
    Ok(())
}

/// Mean CE per bucket over supervised targets. Unoccupied buckets are absent.
pub fn mean_ce_by_bucket(stream: &PackedStream, ce: &[Vec<f64>]) -> Result<Vec<BucketMean>> {
    check_alignment(stream, ce, "CE dump")?;
    let mut sums: Vec<(NeumaierSum, u64)> = Vec::new();
    for (k, seq) in stream.sequences.iter().enumerate() {
        for ((&supervised, &ell), &c) in seq.loss_mask.iter().zip(&seq.effective_context).zip(&ce[k]) {
            if !supervised {
                continue;
            }
            let b = BucketScheme::bucket_of(ell as u64);
            if sums.len() <= b {
                sums.resize(b + 1, (NeumaierSum::new(), 0));
            }
            sums[b].0.add(c);
            sums[b].1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(bucket, (s, count))| BucketMean {
            bucket,
            lower_bound: BucketScheme::lower_bound(bucket),
            mean_ce: s.value() / count as f64,
            count,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMean {
    pub bucket: usize,
    pub lower_bound: u64,
    pub mean_ce: f64,
    pub count: u64,
}
