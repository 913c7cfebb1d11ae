//! Evidence-sensitivity analysis over numeric probe dumps.
//!
//! Each record pairs the gold-answer margin under the original context with
//! the margin under a counterfactual context whose evidence was swapped for a
//! same-type distractor. `G = margin_original - margin_counterfactual`.
//! Records are binned by (context length, evidence distance); two training
//! arms binned identically give a per-cell `ΔG`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{seeded_rng, NeumaierSum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub prompt_id: String,
    pub context_length: u64,
    pub evidence_distance: u64,
    pub margin_original: f64,
    pub margin_counterfactual: f64,
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl ProbeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.evidence_distance > self.context_length {
            return Err(Error::Probe(format!(
                "prompt {}: evidence distance {} exceeds context length {}",
                self.prompt_id, self.evidence_distance, self.context_length
            )));
        }
        if !self.margin_original.is_finite() || !self.margin_counterfactual.is_finite() {
            return Err(Error::Probe(format!("prompt {}: non-finite margin", self.prompt_id)));
        }
        Ok(())
    }
}

/// Context-induced answer margin.
pub fn compute_g(record: &ProbeRecord) -> f64 {
    record.margin_original - record.margin_counterfactual
}

/// How margins are obtained from a dump line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginMode {
    /// `margin_original` / `margin_counterfactual` are given directly.
    #[default]
    Direct,
    /// Margin = gold log-probability minus the best competitor log-probability.
    CompetitorMax,
}

impl fmt::Display for MarginMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarginMode::Direct => "direct",
            MarginMode::CompetitorMax => "competitor-max",
        })
    }
}

impl FromStr for MarginMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(MarginMode::Direct),
            "competitor-max" | "competitor_max" => Ok(MarginMode::CompetitorMax),
            other => Err(Error::InvalidConfig(format!("unknown margin mode {other:?}"))),
        }
    }
}

#[derive(Debug, Deserialize)]
struct DumpLine {
    prompt_id: String,
    context_length: u64,
    evidence_distance: u64,
    arm: String,
    #[serde(default)]
    view: Option<String>,
    #[serde(default)]
    correct: Option<bool>,
    #[serde(default)]
    margin_original: Option<f64>,
    #[serde(default)]
    margin_counterfactual: Option<f64>,
    #[serde(default)]
    gold_logprob_original: Option<f64>,
    #[serde(default)]
    competitor_logprobs_original: Option<Vec<f64>>,
    #[serde(default)]
    gold_logprob_counterfactual: Option<f64>,
    #[serde(default)]
    competitor_logprobs_counterfactual: Option<Vec<f64>>,
}

fn competitor_margin(gold: Option<f64>, rivals: Option<Vec<f64>>, what: &str, line: usize) -> Result<f64> {
    let gold = gold.ok_or_else(|| Error::Probe(format!("line {line}: missing gold_logprob_{what}")))?;
    let best = rivals
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::Probe(format!("line {line}: missing competitor_logprobs_{what}")))?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(gold - best)
}

/// Parses a line-delimited probe dump. Geometry and finiteness are checked
/// per record.
pub fn parse_probe_dump(text: &str, mode: MarginMode) -> Result<Vec<ProbeRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let raw: DumpLine = serde_json::from_str(line).map_err(|e| Error::Malformed {
            location: format!("probe dump line {lineno}"),
            message: e.to_string(),
        })?;
        let (mo, mc) = match mode {
            MarginMode::Direct => (
                raw.margin_original
                    .ok_or_else(|| Error::Probe(format!("line {lineno}: missing margin_original")))?,
                raw.margin_counterfactual
                    .ok_or_else(|| Error::Probe(format!("line {lineno}: missing margin_counterfactual")))?,
            ),
            MarginMode::CompetitorMax => (
                competitor_margin(
                    raw.gold_logprob_original,
                    raw.competitor_logprobs_original,
                    "original",
                    lineno,
                )?,
                competitor_margin(
                    raw.gold_logprob_counterfactual,
                    raw.competitor_logprobs_counterfactual,
                    "counterfactual",
                    lineno,
                )?,
            ),
        };
        let rec = ProbeRecord {
            prompt_id: raw.prompt_id,
            context_length: raw.context_length,
            evidence_distance: raw.evidence_distance,
            margin_original: mo,
            margin_counterfactual: mc,
            arm: raw.arm,
            view: raw.view,
            correct: raw.correct,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Half-open bin edges: bin `k` covers `[edges[k], edges[k+1])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinEdges {
    pub context: Vec<u64>,
    pub distance: Vec<u64>,
}

impl BinEdges {
    pub fn new(context: Vec<u64>, distance: Vec<u64>) -> Result<Self> {
        for (name, e) in [("context", &context), ("distance", &distance)] {
            if e.len() < 2 || e.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Probe(format!(
                    "{name} bin edges must be strictly increasing with at least two entries"
                )));
            }
        }
        Ok(Self { context, distance })
    }

    fn bin(edges: &[u64], x: u64) -> Option<usize> {
        if x < edges[0] || x >= edges[edges.len() - 1] {
            return None;
        }
        Some(edges.partition_point(|&e| e <= x) - 1)
    }

    pub fn cell_of(&self, record: &ProbeRecord) -> Result<CellKey> {
        let c = Self::bin(&self.context, record.context_length);
        let d = Self::bin(&self.distance, record.evidence_distance);
        match (c, d) {
            (Some(context), Some(distance)) => Ok(CellKey { context, distance }),
            _ => Err(Error::Probe(format!(
                "prompt {} (context {}, distance {}) falls outside the bin edges",
                record.prompt_id, record.context_length, record.evidence_distance
            ))),
        }
    }

    pub fn header(&self) -> String {
        let join = |e: &[u64]| e.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        format!(
            "# context_edges={}\n# distance_edges={}\n",
            join(&self.context),
            join(&self.distance)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub context: usize,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCell {
    pub mean_g: f64,
    pub count: u64,
    /// Present only on fields produced by [`delta_field`].
    pub delta_g: Option<f64>,
    /// Mean of the per-record correctness bit, when the dump carries it.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeField {
    pub arm: String,
    pub edges: BinEdges,
    pub cells: BTreeMap<CellKey, FieldCell>,
}

/// Shifted mean: a population of identical values returns that value exactly.
fn stable_mean(xs: &[f64]) -> f64 {
    let pivot = xs[0];
    let dev: NeumaierSum = xs.iter().map(|x| x - pivot).collect();
    pivot + dev.value() / xs.len() as f64
}

/// Bins one arm's records into a field of per-cell mean G.
pub fn build_field(records: &[ProbeRecord], edges: &BinEdges) -> Result<ProbeField> {
    let Some(first) = records.first() else {
        return Err(Error::Probe("no records to bin".into()));
    };
    let mut groups: BTreeMap<CellKey, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for r in records {
        if r.arm != first.arm {
            return Err(Error::Probe(format!(
                "mixed arms in one field: {:?} and {:?}",
                first.arm, r.arm
            )));
        }
        r.validate()?;
        let key = edges.cell_of(r)?;
        let entry = groups.entry(key).or_default();
        entry.0.push(compute_g(r));
        if let Some(c) = r.correct {
            entry.1.push(c);
        }
    }
    let cells = groups
        .into_iter()
        .map(|(key, (gs, correct))| {
            let accuracy =
                (!correct.is_empty()).then(|| correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64);
            (
                key,
                FieldCell {
                    mean_g: stable_mean(&gs),
                    count: gs.len() as u64,
                    delta_g: None,
                    accuracy,
                },
            )
        })
        .collect();
    Ok(ProbeField {
        arm: first.arm.clone(),
        edges: edges.clone(),
        cells,
    })
}

/// Groups records by arm label, keeping first-seen arm order.
pub fn split_by_arm(records: &[ProbeRecord]) -> Vec<(String, Vec<ProbeRecord>)> {
    let mut order: Vec<(String, Vec<ProbeRecord>)> = Vec::new();
    for r in records {
        match order.iter_mut().find(|(a, _)| *a == r.arm) {
            Some((_, v)) => v.push(r.clone()),
            None => order.push((r.arm.clone(), vec![r.clone()])),
        }
    }
    order
}

/// `ΔG = G_A - G_B` on cells populated in both arms. Unnormalized.
pub fn delta_field(a: &ProbeField, b: &ProbeField) -> Result<ProbeField> {
    if a.edges != b.edges {
        return Err(Error::Probe("arms are binned with different edges".into()));
    }
    let cells = a
        .cells
        .iter()
        .filter_map(|(k, ca)| {
            b.cells.get(k).map(|cb| {
                (
                    *k,
                    FieldCell {
                        mean_g: ca.mean_g,
                        count: ca.count.min(cb.count),
                        delta_g: Some(ca.mean_g - cb.mean_g),
                        accuracy: match (ca.accuracy, cb.accuracy) {
                            (Some(x), Some(y)) => Some(x - y),
                            _ => None,
                        },
                    },
                )
            })
        })
        .collect();
    Ok(ProbeField {
        arm: format!("{}-{}", a.arm, b.arm),
        edges: a.edges.clone(),
        cells,
    })
}

/// Macro mean of ΔG over context bins for each distance bin.
pub fn delta_by_distance(delta: &ProbeField) -> Vec<(usize, f64)> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (k, c) in &delta.cells {
        if let Some(d) = c.delta_g {
            by.entry(k.distance).or_default().push(d);
        }
    }
    by.into_iter().map(|(d, v)| (d, stable_mean(&v))).collect()
}

/// Answer-level accuracy per distance band: plain mean of the correctness bit.
/// Records without the bit are skipped; bands with none are absent.
pub fn accuracy_by_distance(records: &[ProbeRecord], edges: &BinEdges) -> Result<BTreeMap<usize, (f64, u64)>> {
    let mut by: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for r in records {
        r.validate()?;
        let key = edges.cell_of(r)?;
        if let Some(c) = r.correct {
            let e = by.entry(key.distance).or_default();
            e.0 += c as u64;
            e.1 += 1;
        }
    }
    Ok(by
        .into_iter()
        .map(|(d, (hits, n))| (d, (hits as f64 / n as f64, n)))
        .collect())
}

pub fn field_to_tsv(field: &ProbeField, mode: MarginMode) -> String {
    let mut out = field.edges.header();
    out.push_str(&format!("# arm={}\n# margin_mode={}\n", field.arm, mode));
    out.push_str("context_bin\tdistance_bin\tcontext_lo\tdistance_lo\tcount\tmean_g\tdelta_g\taccuracy\n");
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.12}")).unwrap_or_else(|| "NA".into());
    for (k, c) in &field.cells {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.12}\t{}\t{}\n",
            k.context,
            k.distance,
            field.edges.context[k.context],
            field.edges.distance[k.distance],
            c.count,
            c.mean_g,
            opt(c.delta_g),
            opt(c.accuracy)
        ));
    }
    out
}

/// Linear-interpolation percentile of sorted data, `p` in [0, 100].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayField {
    pub arm: String,
    pub cells: BTreeMap<CellKey, f64>,
    pub range: (f64, f64),
    /// Set when every clipped value coincides; all cells then read 0.5.
    pub degenerate: bool,
}

/// Shared robust display scaling: clip each field's cell means to the
/// `[lo, hi]` percentile range of the union, then map that range onto [0, 1].
pub fn robust_display_normalize(fields: &[&ProbeField], lo: f64, hi: f64) -> Result<Vec<DisplayField>> {
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(Error::Probe(format!("invalid percentiles {lo}/{hi}")));
    }
    let mut all: Vec<f64> = fields.iter().flat_map(|f| f.cells.values().map(|c| c.mean_g)).collect();
    if all.is_empty() {
        return Err(Error::Probe("no cells to normalize".into()));
    }
    all.sort_by(f64::total_cmp);
    let (plo, phi) = (percentile(&all, lo), percentile(&all, hi));
    let degenerate = phi <= plo;
    if degenerate {
        log::warn!("display normalization range is degenerate ({plo}); emitting 0.5 everywhere");
    }
    Ok(fields
        .iter()
        .map(|f| DisplayField {
            arm: f.arm.clone(),
            cells: f
                .cells
                .iter()
                .map(|(k, c)| {
                    let v = if degenerate {
                        0.5
                    } else {
                        (c.mean_g.clamp(plo, phi) - plo) / (phi - plo)
                    };
                    (*k, v)
                })
                .collect(),
            range: (plo, phi),
            degenerate,
        })
        .collect())
}

/// Paired observations `(G_A, G_B)` of one evaluation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCell {
    pub key: CellKey,
    pub pairs: Vec<(f64, f64)>,
}

/// Pairs two arms by `(cell, prompt_id)`. Every prompt must appear exactly
/// once in each arm.
pub fn pair_records(a: &[ProbeRecord], b: &[ProbeRecord], edges: &BinEdges) -> Result<Vec<PairedCell>> {
    let mut index: HashMap<(CellKey, &str), f64> = HashMap::new();
    for r in b {
        r.validate()?;
        if index
            .insert((edges.cell_of(r)?, r.prompt_id.as_str()), compute_g(r))
            .is_some()
        {
            return Err(Error::Probe(format!(
                "duplicate prompt {} in arm {}",
                r.prompt_id, r.arm
            )));
        }
    }
    let mut cells: BTreeMap<CellKey, Vec<(f64, f64)>> = BTreeMap::new();
    for r in a {
        r.validate()?;
        let key = edges.cell_of(r)?;
        let gb = index.remove(&(key, r.prompt_id.as_str())).ok_or_else(|| {
            Error::Probe(format!(
                "unpaired record: prompt {} has no partner in the other arm",
                r.prompt_id
            ))
        })?;
        cells.entry(key).or_default().push((compute_g(r), gb));
    }
    if let Some(((_, id), _)) = index.into_iter().next() {
        return Err(Error::Probe(format!(
            "unpaired record: prompt {id} has no partner in the other arm"
        )));
    }
    Ok(cells
        .into_iter()
        .map(|(key, pairs)| PairedCell { key, pairs })
        .collect())
}

/// Default cell aggregation: macro mean over cells of the mean paired difference.
pub fn macro_mean_delta(cells: &[Vec<(f64, f64)>]) -> f64 {
    let per_cell: Vec<f64> = cells
        .iter()
        .map(|c| {
            let d: Vec<f64> = c.iter().map(|(a, b)| a - b).collect();
            stable_mean(&d)
        })
        .collect();
    stable_mean(&per_cell)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    pub resamples: usize,
}

/// Percentile paired bootstrap. Prompt pairs are resampled with replacement
/// inside each cell and every replicate is aggregated with `aggregate`.
/// Replicate `r` draws from `hash(seed, r)`, so results do not depend on
/// thread scheduling.
pub fn paired_bootstrap_ci<F>(
    cells: &[PairedCell],
    aggregate: F,
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapCi>
where
    F: Fn(&[Vec<(f64, f64)>]) -> f64 + Sync,
{
    if resamples < 1000 {
        return Err(Error::Probe(format!("need at least 1000 resamples, got {resamples}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Probe(format!("confidence {confidence} not in (0, 1)")));
    }
    if cells.is_empty() {
        return Err(Error::Probe("no paired cells".into()));
    }
    if let Some(c) = cells.iter().find(|c| c.pairs.is_empty()) {
        return Err(Error::Probe(format!("empty cell {:?}", c.key)));
    }
    let original: Vec<Vec<(f64, f64)>> = cells.iter().map(|c| c.pairs.clone()).collect();
    let point = aggregate(&original);
    let mut reps: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeded_rng(seed, r as u64);
            let sample: Vec<Vec<(f64, f64)>> = cells
                .iter()
                .map(|c| {
                    let n = c.pairs.len();
                    (0..n).map(|_| c.pairs[rng.random_range(0..n)]).collect()
                })
                .collect();
            aggregate(&sample)
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0 * 100.0;
    Ok(BootstrapCi {
        point,
        lower: percentile(&reps, tail),
        upper: percentile(&reps, 100.0 - tail),
        confidence,
        resamples,
    })
}
