//! Greedy fixed-length packing with document-boundary bookkeeping.
//!
//! Every position carries its effective left context: the number of earlier
//! positions that belong to the same document segment of the same packed
//! sequence. A document that overflows the current sequence continues in the
//! next one as a fresh segment, so its context restarts at zero.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::util::{seeded_rng, sha256_hex, ByteCursor};

pub const PACK_MAGIC: &[u8; 4] = b"EXPK";
pub const PACK_VERSION: u16 = 1;
pub const DEFAULT_PAD_ID: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackPolicy {
    pub seq_len: usize,
    #[serde(default)]
    pub permutation_seed: Option<u64>,
    #[serde(default = "default_drop_final")]
    pub drop_final_partial: bool,
    #[serde(default = "default_pad")]
    pub pad_id: u32,
}

fn default_drop_final() -> bool {
    true
}

fn default_pad() -> u32 {
    DEFAULT_PAD_ID
}

impl PackPolicy {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            permutation_seed: None,
            drop_final_partial: true,
            pad_id: DEFAULT_PAD_ID,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "sequence length {} must be at least 2",
                self.seq_len
            )));
        }
        if self.seq_len > u32::MAX as usize {
            return Err(Error::InvalidConfig("sequence length exceeds 32 bits".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRef {
    pub doc_id: String,
    pub chunk: u32,
}

/// One packed training sequence.
///
/// `doc_refs` lines up with the leading entries of `segment_starts`; a
/// trailing padding segment (if any) has no document reference. Sequences
/// decoded from `EXPK` files carry no document references at all.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub segment_starts: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub effective_context: Vec<u32>,
    pub doc_refs: Vec<SegmentRef>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Recomputes ℓ from `segment_starts`.
    pub fn context_from_starts(segment_starts: &[u32], len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut next = 0usize;
        let mut start = 0u32;
        for i in 0..len as u32 {
            while next < segment_starts.len() && segment_starts[next] <= i {
                start = segment_starts[next];
                next += 1;
            }
            out.push(i - start);
        }
        out
    }

    /// Segment spans as `(start, end)` half-open offsets.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let len = self.len();
        self.segment_starts.iter().enumerate().map(move |(k, &s)| {
            let end = self.segment_starts.get(k + 1).map(|&e| e as usize).unwrap_or(len);
            (s as usize, end)
        })
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::format("EXPK", m));
        if self.tokens.len() != seq_len || self.loss_mask.len() != seq_len || self.effective_context.len() != seq_len {
            return bad(format!("sequence arrays must have length {seq_len}"));
        }
        if self.segment_starts.first() != Some(&0) {
            return bad("first segment must start at offset 0".into());
        }
        if self.segment_starts.windows(2).any(|w| w[0] >= w[1])
            || self.segment_starts.iter().any(|&s| s as usize >= seq_len)
        {
            return bad("segment starts must be strictly increasing and < L".into());
        }
        if Self::context_from_starts(&self.segment_starts, seq_len) != self.effective_context {
            return bad("stored effective context disagrees with segment starts".into());
        }
        Ok(())
    }
}

/// O(L) reference for ℓ: walk backward from `i` to the nearest segment start.
pub fn effective_context_oracle(seq: &PackedSequence, i: usize) -> usize {
    let mut j = i;
    loop {
        if seq.segment_starts.iter().any(|&s| s as usize == j) {
            return i - j;
        }
        // segment_starts[0] == 0 terminates the walk
        j -= 1;
    }
}

/// Incremental greedy packer; feed documents with [`Packer::push`].
pub struct Packer {
    policy: PackPolicy,
    tokens: Vec<u32>,
    starts: Vec<u32>,
    refs: Vec<SegmentRef>,
}

impl Packer {
    pub fn new(policy: PackPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            tokens: Vec::with_capacity(policy.seq_len),
            starts: Vec::new(),
            refs: Vec::new(),
            policy,
        })
    }

    fn emit(&mut self) -> PackedSequence {
        let len = self.policy.seq_len;
        let tokens = std::mem::replace(&mut self.tokens, Vec::with_capacity(len));
        let starts = std::mem::take(&mut self.starts);
        let refs = std::mem::take(&mut self.refs);
        PackedSequence {
            loss_mask: vec![true; len],
            effective_context: PackedSequence::context_from_starts(&starts, len),
            tokens,
            segment_starts: starts,
            doc_refs: refs,
        }
    }

    pub fn push(&mut self, doc: &Document) -> Result<Vec<PackedSequence>> {
        if doc.is_empty() {
            return Err(Error::EmptyDocument {
                location: format!("document {}", doc.doc_id),
            });
        }
        if doc.tokens.contains(&self.policy.pad_id) {
            return Err(Error::PadCollision {
                doc_id: doc.doc_id.clone(),
                pad_id: self.policy.pad_id,
            });
        }
        let len = self.policy.seq_len;
        let mut out = Vec::new();
        let mut rest = &doc.tokens[..];
        let mut chunk = 0u32;
        while !rest.is_empty() {
            let take = (len - self.tokens.len()).min(rest.len());
            self.starts.push(self.tokens.len() as u32);
            self.refs.push(SegmentRef {
                doc_id: doc.doc_id.clone(),
                chunk,
            });
            self.tokens.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
            chunk += 1;
            if self.tokens.len() == len {
                out.push(self.emit());
            }
        }
        Ok(out)
    }

    /// Flushes the partial sequence: dropped or padded per policy. Padding
    /// forms its own segment and is never supervised.
    pub fn finish(mut self) -> Option<PackedSequence> {
        if self.tokens.is_empty() || self.policy.drop_final_partial {
            return None;
        }
        let fill = self.tokens.len();
        self.starts.push(fill as u32);
        self.tokens.resize(self.policy.seq_len, self.policy.pad_id);
        let mut seq = self.emit();
        for m in &mut seq.loss_mask[fill..] {
            *m = false;
        }
        Some(seq)
    }
}

/// Packs a document stream. With a permutation seed the documents are first
/// shuffled deterministically; otherwise file order is kept.
pub fn pack_stream<I>(docs: I, policy: &PackPolicy) -> Result<PackedStream>
where
    I: IntoIterator<Item = Document>,
{
    let mut packer = Packer::new(policy.clone())?;
    let mut sequences = Vec::new();
    match policy.permutation_seed {
        Some(seed) => {
            let mut all: Vec<Document> = docs.into_iter().collect();
            all.shuffle(&mut seeded_rng(seed, 0));
            for d in &all {
                sequences.extend(packer.push(d)?);
            }
        }
        None => {
            for d in docs {
                sequences.extend(packer.push(&d)?);
            }
        }
    }
    sequences.extend(packer.finish());
    Ok(PackedStream {
        seq_len: policy.seq_len,
        pad_id: policy.pad_id,
        sequences,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedStream {
    pub seq_len: usize,
    pub pad_id: u32,
    pub sequences: Vec<PackedSequence>,
}

impl PackedStream {
    pub fn supervised_tokens(&self) -> u64 {
        self.sequences.iter().map(|s| s.supervised() as u64).sum()
    }

    pub fn total_positions(&self) -> usize {
        self.sequences.len() * self.seq_len
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = self.seq_len;
        let mut out = Vec::with_capacity(22 + self.sequences.len() * (len * 8 + len / 8 + 8));
        out.extend_from_slice(PACK_MAGIC);
        out.extend_from_slice(&PACK_VERSION.to_le_bytes());
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.pad_id.to_le_bytes());
        for seq in &self.sequences {
            seq.validate(len)?;
            for t in &seq.tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
            let nseg = u16::try_from(seq.segment_starts.len())
                .map_err(|_| Error::format("EXPK", "more than 65535 segments in a sequence"))?;
            out.extend_from_slice(&nseg.to_le_bytes());
            for s in &seq.segment_starts {
                out.extend_from_slice(&s.to_le_bytes());
            }
            let mut bits = vec![0u8; len.div_ceil(8)];
            for (i, &m) in seq.loss_mask.iter().enumerate() {
                if m {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bits);
            for l in &seq.effective_context {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = ByteCursor::new(bytes, "EXPK");
        c.magic(PACK_MAGIC)?;
        let version = c.u16()?;
        if version != PACK_VERSION {
            return Err(c.error(format!("unsupported version {version}")));
        }
        let len = c.u32()? as usize;
        let count = c.u64()?;
        let pad_id = c.u32()?;
        if len < 2 {
            return Err(c.error(format!("sequence length {len} < 2")));
        }
        let mut sequences = Vec::new();
        for k in 0..count {
            let tokens = read_u32s(&mut c, len)?;
            let nseg = c.u16()? as usize;
            let segment_starts = read_u32s(&mut c, nseg)?;
            let bits = c.take(len.div_ceil(8))?;
            let loss_mask = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            let effective_context = read_u32s(&mut c, len)?;
            let seq = PackedSequence {
                tokens,
                segment_starts,
                loss_mask,
                effective_context,
                doc_refs: Vec::new(),
            };
            seq.validate(len)
                .map_err(|e| Error::format("EXPK", format!("sequence {k}: {e}")))?;
            sequences.push(seq);
        }
        c.finish()?;
        Ok(Self {
            seq_len: len,
            pad_id,
            sequences,
        })
    }

    /// Content fingerprint over the encoded stream.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.encode()?))
    }
}

fn read_u32s(c: &mut ByteCursor<'_>, n: usize) -> Result<Vec<u32>> {
    let raw = c.take(n * 4)?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Reassembles each document from its `(doc_id, chunk)` segments.
pub fn reconstruct_documents(stream: &PackedStream) -> Vec<Document> {
    let mut order: Vec<String> = Vec::new();
    let mut parts: std::collections::HashMap<String, Vec<(u32, Vec<u32>)>> = Default::default();
    for seq in &stream.sequences {
        for (r, (s, e)) in seq.doc_refs.iter().zip(seq.segments()) {
            let entry = parts.entry(r.doc_id.clone()).or_insert_with(|| {
                order.push(r.doc_id.clone());
                Vec::new()
            });
            entry.push((r.chunk, seq.tokens[s..e].to_vec()));
        }
    }
    order
        .into_iter()
        .map(|id| {
            let mut chunks = parts.remove(&id).unwrap();
            chunks.sort_by_key(|(c, _)| *c);
            let tokens = chunks.into_iter().flat_map(|(_, t)| t).collect();
            Document::new(id, tokens)
        })
        .collect()
}
