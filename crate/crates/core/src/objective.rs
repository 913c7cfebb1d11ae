//! Weighted cross-entropy objective over per-token CE values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::check_alignment;
use crate::packer::PackedStream;
use crate::util::{ByteCursor, NeumaierSum};
use crate::weights::TokenWeights;

pub const CE_MAGIC: &[u8; 4] = b"EXCE";
pub const CE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the number of supervised tokens.
    #[default]
    MaskSum,
    /// Divide by the total weight of supervised tokens.
    WeightedMaskSum,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::MaskSum => "mask_sum",
            Normalization::WeightedMaskSum => "weighted_mask_sum",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "mask_sum" => Ok(Normalization::MaskSum),
            "weighted_mask_sum" => Ok(Normalization::WeightedMaskSum),
            other => Err(Error::InvalidConfig(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    #[serde(default)]
    pub normalization: Normalization,
}

impl ObjectiveConfig {
    pub fn new(normalization: Normalization) -> Self {
        Self { normalization }
    }
}

fn check_inputs(ce: Option<&[f64]>, mask: &[bool], weights: &[f64]) -> Result<()> {
    if weights.len() != mask.len() {
        return Err(Error::LengthMismatch {
            what: "weights",
            expected: mask.len(),
            actual: weights.len(),
        });
    }
    if let Some(ce) = ce {
        if ce.len() != mask.len() {
            return Err(Error::LengthMismatch {
                what: "CE values",
                expected: mask.len(),
                actual: ce.len(),
            });
        }
        for (i, &c) in ce.iter().enumerate() {
            if c.is_nan() || c.is_infinite() {
                return Err(Error::NonFinite {
                    what: "CE values",
                    index: i,
                });
            }
            if c < 0.0 {
                return Err(Error::InvalidConfig(format!("negative CE {c} at index {i}")));
            }
        }
    }
    for (i, &w) in weights.iter().enumerate() {
        if w.is_nan() || w.is_infinite() {
            return Err(Error::NonFinite {
                what: "weights",
                index: i,
            });
        }
        if w < 0.0 {
            return Err(Error::InvalidConfig(format!("negative weight {w} at index {i}")));
        }
    }
    Ok(())
}

fn denominator(mask: &[bool], weights: &[f64], config: ObjectiveConfig) -> Result<f64> {
    let supervised = mask.iter().filter(|&&m| m).count();
    if supervised == 0 {
        return Err(Error::AllMasked);
    }
    Ok(match config.normalization {
        Normalization::MaskSum => supervised as f64,
        Normalization::WeightedMaskSum => mask
            .iter()
            .zip(weights)
            .filter(|(m, _)| **m)
            .map(|(_, &w)| w)
            .collect::<NeumaierSum>()
            .value(),
    })
}

/// `sum_i m_i w_i CE_i` divided by the configured normalizer.
pub fn weighted_loss(ce: &[f64], mask: &[bool], weights: &[f64], config: ObjectiveConfig) -> Result<f64> {
    check_inputs(Some(ce), mask, weights)?;
    let denom = denominator(mask, weights, config)?;
    let num = (0..ce.len())
        .filter(|&i| mask[i])
        .map(|i| weights[i] * ce[i])
        .collect::<NeumaierSum>()
        .value();
    Ok(num / denom)
}

/// Per-token derivative of [`weighted_loss`] with respect to each CE value.
pub fn gradient_scale(mask: &[bool], weights: &[f64], config: ObjectiveConfig) -> Result<Vec<f64>> {
    check_inputs(None, mask, weights)?;
    let denom = denominator(mask, weights, config)?;
    Ok(mask
        .iter()
        .zip(weights)
        .map(|(&m, &w)| if m { w / denom } else { 0.0 })
        .collect())
}

/// Flattens stream-aligned arrays and evaluates the objective over the whole stream.
pub fn stream_loss(
    stream: &PackedStream,
    ce: &[Vec<f64>],
    weights: &TokenWeights,
    config: ObjectiveConfig,
) -> Result<f64> {
    check_alignment(stream, ce, "CE dump")?;
    check_alignment(stream, &weights.sequences, "token weights")?;
    let mask: Vec<bool> = stream
        .sequences
        .iter()
        .flat_map(|s| s.loss_mask.iter().copied())
        .collect();
    let ce: Vec<f64> = ce.iter().flatten().copied().collect();
    let w: Vec<f64> = weights.sequences.iter().flatten().copied().collect();
    weighted_loss(&ce, &mask, &w, config)
}

/// Per-token CE values aligned with a packed stream (`EXCE`).
#[derive(Debug, Clone, PartialEq)]
pub struct CeDump {
    pub sequences: Vec<Vec<f64>>,
}

impl CeDump {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CE_MAGIC);
        out.extend_from_slice(&CE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u64).to_le_bytes());
        for seq in &self.sequences {
            for v in seq {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// The format carries no sequence length; it comes from the packed stream.
    pub fn decode(bytes: &[u8], seq_len: usize) -> Result<Self> {
        let mut c = ByteCursor::new(bytes, "EXCE");
        c.magic(CE_MAGIC)?;
        let version = c.u16()?;
        if version != CE_VERSION {
            return Err(c.error(format!("unsupported version {version}")));
        }
        let count = c.u64()? as usize;
        let expected = count.checked_mul(seq_len * 8);
        if expected != Some(c.remaining()) {
            return Err(c.error(format!(
                "{} payload bytes do not match {count} sequences of length {seq_len}",
                c.remaining()
            )));
        }
        let mut sequences = Vec::with_capacity(count);
        for _ in 0..count {
            let mut seq = Vec::with_capacity(seq_len);
            for _ in 0..seq_len {
                seq.push(c.f64()?);
            }
            sequences.push(seq);
        }
        Ok(Self { sequences })
    }
}
