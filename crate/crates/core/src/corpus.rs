//! Tokenized document corpora: the line-delimited and `EXTK` binary exchange
//! formats, the reproducibility manifest, and the synthetic needle-recall
//! generator used for desk-scale experiments.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::BucketScheme;
use crate::util::{seeded_rng, sha256_file, write_file};

pub const CORPUS_MAGIC: &[u8; 4] = b"EXTK";
pub const CORPUS_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            doc_id: doc_id.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBin {
    pub lower_bound: u64,
    pub count: u64,
}

/// Reproducibility record colocated with a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    #[serde(default)]
    pub sources: Vec<SourceDescriptor>,
    pub vocab_size: u32,
    pub total_tokens: u64,
    pub doc_count: u64,
    /// Document lengths binned on the same log-2 scheme as effective context.
    #[serde(default)]
    pub length_histogram: Vec<LengthBin>,
    #[serde(default)]
    pub generator_seed: Option<u64>,
    #[serde(default)]
    pub split_sizes: BTreeMap<String, u64>,
}

impl CorpusManifest {
    pub fn from_documents(docs: &[Document], vocab_size: u32) -> Self {
        let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
        for d in docs {
            let b = BucketScheme::bucket_of(d.len() as u64);
            *hist.entry(BucketScheme::lower_bound(b)).or_default() += 1;
        }
        Self {
            sources: Vec::new(),
            vocab_size,
            total_tokens: docs.iter().map(|d| d.len() as u64).sum(),
            doc_count: docs.len() as u64,
            length_histogram: hist
                .into_iter()
                .map(|(lower_bound, count)| LengthBin { lower_bound, count })
                .collect(),
            generator_seed: None,
            split_sizes: BTreeMap::new(),
        }
    }

    /// Records `path` (stored by file name, relative to the manifest) with its hash.
    pub fn add_source(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.sources.retain(|s| s.path != name);
        self.sources.push(SourceDescriptor { path: name, sha256 });
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    fn verify_source_hash(&self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let entry = match self.sources.iter().find(|s| s.path == name) {
            Some(e) => e,
            None if self.sources.len() == 1 => &self.sources[0],
            None => return Ok(()),
        };
        let actual = sha256_file(path)?;
        if actual != entry.sha256 {
            return Err(Error::HashMismatch {
                path: path.display().to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Text,
    Binary,
}

#[derive(Deserialize)]
struct TextRecord {
    doc_id: String,
    tokens: Vec<u64>,
}

enum Source {
    Text(std::io::Lines<BufReader<File>>),
    Binary { reader: BufReader<File>, remaining: u64 },
}

/// Streaming corpus reader. Yields documents in file order; when a manifest
/// is supplied its counts are checked once the input is exhausted and a
/// mismatch is yielded as the final item.
pub struct CorpusReader {
    path: PathBuf,
    source: Source,
    vocab_size: Option<u32>,
    manifest: Option<CorpusManifest>,
    record: u64,
    docs_seen: u64,
    tokens_seen: u64,
    done: bool,
}

impl CorpusReader {
    pub fn format(&self) -> CorpusFormat {
        match self.source {
            Source::Text(_) => CorpusFormat::Text,
            Source::Binary { .. } => CorpusFormat::Binary,
        }
    }

    pub fn vocab_size(&self) -> Option<u32> {
        self.vocab_size
    }

    fn next_text(&mut self) -> Option<Result<Document>> {
        let Source::Text(lines) = &mut self.source else {
            unreachable!()
        };
        loop {
            let line = lines.next()?;
            self.record += 1;
            let location = format!("{}:{}", self.path.display(), self.record);
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let rec: TextRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(Error::Malformed {
                        location,
                        message: e.to_string(),
                    }))
                }
            };
            if rec.tokens.is_empty() {
                return Some(Err(Error::EmptyDocument { location }));
            }
            let mut tokens = Vec::with_capacity(rec.tokens.len());
            for t in rec.tokens {
                match u32::try_from(t) {
                    Ok(t) => tokens.push(t),
                    Err(_) => {
                        return Some(Err(Error::Malformed {
                            location,
                            message: format!("token id {t} does not fit 32 bits"),
                        }))
                    }
                }
            }
            return Some(Ok(Document::new(rec.doc_id, tokens)));
        }
    }

    fn next_binary(&mut self) -> Option<Result<Document>> {
        let Source::Binary { reader, remaining } = &mut self.source else {
            unreachable!()
        };
        if *remaining == 0 {
            let mut probe = [0u8; 1];
            return match reader.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(Error::format("EXTK", "trailing bytes after last document"))),
                Err(e) => Some(Err(Error::io(&self.path, e))),
            };
        }
        *remaining -= 1;
        self.record += 1;
        let location = format!("{} document #{}", self.path.display(), self.record);
        let res = (|| -> std::io::Result<Document> {
            let mut b2 = [0u8; 2];
            reader.read_exact(&mut b2)?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            reader.read_exact(&mut id)?;
            let mut b4 = [0u8; 4];
            reader.read_exact(&mut b4)?;
            let n = u32::from_le_bytes(b4) as usize;
            let mut raw = vec![0u8; n * 4];
            reader.read_exact(&mut raw)?;
            let tokens = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Document::new(String::from_utf8_lossy(&id).into_owned(), tokens))
        })();
        match res {
            Ok(doc) if doc.tokens.is_empty() => Some(Err(Error::EmptyDocument { location })),
            Ok(doc) => Some(Ok(doc)),
            Err(e) => Some(Err(Error::Malformed {
                location,
                message: e.to_string(),
            })),
        }
    }

    fn check_manifest_totals(&self) -> Result<()> {
        let Some(m) = &self.manifest else {
            return Ok(());
        };
        if m.doc_count != self.docs_seen {
            return Err(Error::ManifestMismatch {
                field: "doc_count",
                expected: m.doc_count.to_string(),
                actual: self.docs_seen.to_string(),
            });
        }
        if m.total_tokens != self.tokens_seen {
            return Err(Error::ManifestMismatch {
                field: "total_tokens",
                expected: m.total_tokens.to_string(),
                actual: self.tokens_seen.to_string(),
            });
        }
        Ok(())
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = match self.format() {
            CorpusFormat::Text => self.next_text(),
            CorpusFormat::Binary => self.next_binary(),
        };
        match item {
            None => {
                self.done = true;
                self.check_manifest_totals().err().map(Err)
            }
            Some(Ok(doc)) => {
                if let Some(vocab) = self.vocab_size {
                    if let Some(&bad) = doc.tokens.iter().find(|&&t| t >= vocab) {
                        self.done = true;
                        return Some(Err(Error::TokenOutOfVocab {
                            doc_id: doc.doc_id,
                            token: bad,
                            vocab_size: vocab,
                        }));
                    }
                }
                self.docs_seen += 1;
                self.tokens_seen += doc.len() as u64;
                Some(Ok(doc))
            }
            Some(Err(e)) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Opens a corpus file, sniffing the `EXTK` magic to pick the binary reader.
pub fn load_documents(path: &Path, manifest: Option<&CorpusManifest>) -> Result<CorpusReader> {
    if let Some(m) = manifest {
        m.verify_source_hash(path)?;
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf().map_err(|e| Error::io(path, e))?;
    let is_binary = head.len() >= 4 && &head[..4] == CORPUS_MAGIC;

    let mut vocab_size = manifest.map(|m| m.vocab_size);
    let source = if is_binary {
        let mut hdr = [0u8; 4 + 2 + 4 + 8];
        reader
            .read_exact(&mut hdr)
            .map_err(|_| Error::format("EXTK", "truncated header"))?;
        let version = u16::from_le_bytes([hdr[4], hdr[5]]);
        if version != CORPUS_VERSION {
            return Err(Error::format("EXTK", format!("unsupported version {version}")));
        }
        let file_vocab = u32::from_le_bytes(hdr[6..10].try_into().unwrap());
        let doc_count = u64::from_le_bytes(hdr[10..18].try_into().unwrap());
        if let Some(m) = manifest {
            if m.vocab_size != file_vocab {
                return Err(Error::ManifestMismatch {
                    field: "vocab_size",
                    expected: m.vocab_size.to_string(),
                    actual: file_vocab.to_string(),
                });
            }
        }
        vocab_size = Some(file_vocab);
        Source::Binary {
            reader,
            remaining: doc_count,
        }
    } else {
        Source::Text(reader.lines())
    };

    Ok(CorpusReader {
        path: path.to_path_buf(),
        source,
        vocab_size,
        manifest: manifest.cloned(),
        record: 0,
        docs_seen: 0,
        tokens_seen: 0,
        done: false,
    })
}

pub fn read_documents(path: &Path, manifest: Option<&CorpusManifest>) -> Result<Vec<Document>> {
    load_documents(path, manifest)?.collect()
}

pub fn encode_documents_text(docs: &[Document]) -> Vec<u8> {
    let mut out = Vec::new();
    for d in docs {
        let line = serde_json::to_string(d).expect("document serializes");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn encode_documents_binary(docs: &[Document], vocab_size: u32) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&vocab_size.to_le_bytes());
    out.extend_from_slice(&(docs.len() as u64).to_le_bytes());
    for d in docs {
        let id = d.doc_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::format("EXTK", format!("doc_id {} longer than 65535 bytes", d.doc_id)))?;
        let n = u32::try_from(d.tokens.len())
            .map_err(|_| Error::format("EXTK", format!("document {} too long", d.doc_id)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&n.to_le_bytes());
        for t in &d.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_documents(path: &Path, docs: &[Document], format: CorpusFormat, vocab_size: u32) -> Result<()> {
    let bytes = match format {
        CorpusFormat::Text => encode_documents_text(docs),
        CorpusFormat::Binary => encode_documents_binary(docs, vocab_size)?,
    };
    write_file(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthComponent {
    pub weight: f64,
    pub mean: f64,
}

/// Maps a key index to an answer index. `Shift(k)` is a cyclic rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedleRule {
    Identity,
    Shift(u32),
    Permutation(Vec<u32>),
}

impl NeedleRule {
    pub fn apply(&self, key_index: u32, key_alphabet: u32) -> u32 {
        match self {
            NeedleRule::Identity => key_index,
            NeedleRule::Shift(k) => (key_index + k) % key_alphabet,
            NeedleRule::Permutation(p) => p[key_index as usize],
        }
    }
}

/// Synthetic needle-recall corpus parameters.
///
/// Vocabulary layout: keys `[0, K)`, answers `[K, 2K)`, filler `[2K, 2K + F)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub key_alphabet: u32,
    pub filler_alphabet: u32,
    pub length_mixture: Vec<LengthComponent>,
    pub needle_rule: NeedleRule,
    pub recall_density: f64,
    pub doc_count: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            key_alphabet: 8,
            filler_alphabet: 16,
            length_mixture: vec![
                LengthComponent {
                    weight: 0.85,
                    mean: 48.0,
                },
                LengthComponent {
                    weight: 0.15,
                    mean: 1024.0,
                },
            ],
            needle_rule: NeedleRule::Shift(1),
            recall_density: 0.05,
            doc_count: 2000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn vocab_size(&self) -> u32 {
        2 * self.key_alphabet + self.filler_alphabet
    }

    pub fn answer_token(&self, key_token: u32) -> u32 {
        self.key_alphabet + self.needle_rule.apply(key_token, self.key_alphabet)
    }

    pub fn is_filler(&self, token: u32) -> bool {
        token >= 2 * self.key_alphabet && token < self.vocab_size()
    }

    pub fn mixture_mean(&self) -> f64 {
        let total: f64 = self.length_mixture.iter().map(|c| c.weight).sum();
        self.length_mixture.iter().map(|c| c.weight * c.mean).sum::<f64>() / total
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.key_alphabet == 0 || self.filler_alphabet == 0 {
            return bad("key and filler alphabets must be non-empty".into());
        }
        if self.length_mixture.is_empty() {
            return bad("length mixture has no components".into());
        }
        for c in &self.length_mixture {
            if !(c.mean >= 1.0 && c.mean.is_finite()) {
                return bad(format!("length mean {} must be >= 1", c.mean));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return bad(format!("mixture weight {} must be positive", c.weight));
            }
        }
        if !(self.recall_density > 0.0 && self.recall_density <= 1.0) {
            return bad(format!("recall density {} not in (0, 1]", self.recall_density));
        }
        if let NeedleRule::Permutation(p) = &self.needle_rule {
            let mut seen = vec![false; self.key_alphabet as usize];
            if p.len() != self.key_alphabet as usize {
                return bad("needle permutation length differs from key alphabet".into());
            }
            for &x in p {
                if x >= self.key_alphabet || std::mem::replace(&mut seen[x as usize], true) {
                    return bad("needle rule is not a bijection on the key alphabet".into());
                }
            }
        }
        Ok(())
    }

    /// Generates document `index`; each document draws from its own seed
    /// stream so generation can be sharded without changing the output.
    pub fn generate_document(&self, index: u64) -> Document {
        let mut rng = seeded_rng(self.seed, index);
        let total_weight: f64 = self.length_mixture.iter().map(|c| c.weight).sum();
        let mut pick = rng.random::<f64>() * total_weight;
        let mut component = &self.length_mixture[self.length_mixture.len() - 1];
        for c in &self.length_mixture {
            if pick < c.weight {
                component = c;
                break;
            }
            pick -= c.weight;
        }
        let len = if component.mean <= 1.0 {
            1
        } else {
            let geo = Geometric::new(1.0 / component.mean).expect("p in (0,1]");
            1 + geo.sample(&mut rng) as usize
        };

        let key = rng.random_range(0..self.key_alphabet);
        let answer = self.answer_token(key);
        let filler_base = 2 * self.key_alphabet;
        let mut tokens = Vec::with_capacity(len);
        tokens.push(key);
        for _ in 1..len {
            if rng.random::<f64>() < self.recall_density {
                tokens.push(answer);
            } else {
                tokens.push(filler_base + rng.random_range(0..self.filler_alphabet));
            }
        }
        Document::new(format!("synth-{index:08}"), tokens)
    }
}

pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<(Vec<Document>, CorpusManifest)> {
    spec.validate()?;
    let docs: Vec<Document> = (0..spec.doc_count).map(|i| spec.generate_document(i)).collect();
    let mut manifest = CorpusManifest::from_documents(&docs, spec.vocab_size());
    manifest.generator_seed = Some(spec.seed);
    Ok((docs, manifest))
}
