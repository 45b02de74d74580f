//! Typing instances, the label vocabulary and word-embedding tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One mention in context with its gold label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub left_tokens: Vec<String>,
    pub mention_tokens: Vec<String>,
    pub right_tokens: Vec<String>,
    #[serde(default)]
    pub gold_labels: BTreeSet<String>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        left: &[&str],
        mention: &[&str],
        right: &[&str],
        gold: &[&str],
    ) -> Result<Self> {
        let instance = Self {
            id: id.into(),
            left_tokens: left.iter().map(|s| s.to_string()).collect(),
            mention_tokens: mention.iter().map(|s| s.to_string()).collect(),
            right_tokens: right.iter().map(|s| s.to_string()).collect(),
            gold_labels: gold.iter().map(|s| s.to_string()).collect(),
        };
        instance.validate()?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mention_tokens.is_empty() {
            return Err(Error::EmptyMention {
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceLine {
    #[serde(default)]
    id: Option<String>,
    left_tokens: Vec<String>,
    mention_tokens: Vec<String>,
    right_tokens: Vec<String>,
    #[serde(default)]
    gold_labels: Vec<String>,
}

/// Reads instance jsonl. A missing `id` becomes the 0-based line number.
pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_instances(&text, path)
}

pub(crate) fn parse_instances(text: &str, path: &Path) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: InstanceLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        let instance = Instance {
            id: raw.id.unwrap_or_else(|| line_no.to_string()),
            left_tokens: raw.left_tokens,
            mention_tokens: raw.mention_tokens,
            right_tokens: raw.right_tokens,
            gold_labels: raw.gold_labels.into_iter().collect(),
        };
        instance.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        out.push(instance);
    }
    Ok(out)
}

pub fn write_instances(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    write_jsonl(path, instances)
}

pub(crate) fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Label granularity tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "general")]
    General,
    #[serde(rename = "fine")]
    Fine,
    #[serde(rename = "ultra-fine")]
    UltraFine,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::General, Tier::Fine, Tier::UltraFine];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::General => "general",
            Tier::Fine => "fine",
            Tier::UltraFine => "ultra-fine",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierEntry {
    pub label: String,
    pub tier: Tier,
}

/// Reads `{"label": ..., "tier": ...}` lines. A label listed twice with
/// different tiers is an error.
pub fn load_tier_map(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tier>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no + 1,
            message,
        };
        let entry: TierEntry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(prev) = map.insert(entry.label.clone(), entry.tier) {
            if prev != entry.tier {
                return Err(parse_err(format!(
                    "label `{}` listed as both {prev} and {}",
                    entry.label, entry.tier
                )));
            }
        }
    }
    Ok(map)
}

pub fn write_tier_map(path: impl AsRef<Path>, map: &BTreeMap<String, Tier>) -> Result<()> {
    let rows: Vec<TierEntry> = map
        .iter()
        .map(|(label, &tier)| TierEntry {
            label: label.clone(),
            tier,
        })
        .collect();
    write_jsonl(path, &rows)
}

/// The closed label set. Ids are positions in the lexicographically sorted
/// label list; `eos_id()` is one past the last label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct LabelVocabulary {
    labels: Vec<String>,
    tiers: Vec<Tier>,
    shots: Vec<u32>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    labels: Vec<String>,
    tiers: Vec<Tier>,
    shots: Vec<u32>,
}

impl TryFrom<VocabularyRepr> for LabelVocabulary {
    type Error = String;

    fn try_from(r: VocabularyRepr) -> std::result::Result<Self, String> {
        if r.labels.len() != r.tiers.len() || r.labels.len() != r.shots.len() {
            return Err("labels, tiers and shots differ in length".into());
        }
        let index: HashMap<String, usize> = r
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        if index.len() != r.labels.len() {
            return Err("duplicate label in vocabulary".into());
        }
        Ok(Self {
            labels: r.labels,
            tiers: r.tiers,
            shots: r.shots,
            index,
        })
    }
}

impl From<LabelVocabulary> for VocabularyRepr {
    fn from(v: LabelVocabulary) -> Self {
        Self {
            labels: v.labels,
            tiers: v.tiers,
            shots: v.shots,
        }
    }
}

impl LabelVocabulary {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn eos_id(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn tier(&self, id: usize) -> Tier {
        self.tiers[id]
    }

    pub fn shot(&self, id: usize) -> u32 {
        self.shots[id]
    }

    /// Ids of `labels`, silently skipping labels outside the vocabulary.
    pub fn ids_of<'a>(&self, labels: impl IntoIterator<Item = &'a String>) -> BTreeSet<usize> {
        labels.into_iter().filter_map(|l| self.id(l)).collect()
    }

    /// Like [`ids_of`](Self::ids_of) but rejects unknown labels.
    pub fn require_ids<'a>(
        &self,
        labels: impl IntoIterator<Item = &'a String>,
    ) -> Result<BTreeSet<usize>> {
        labels
            .into_iter()
            .map(|l| self.id(l).ok_or_else(|| Error::UnknownLabel(l.clone())))
            .collect()
    }

    /// Stable digest of the label list and tiers, used to pair checkpoints
    /// with vocabularies.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (label, tier) in self.labels.iter().zip(&self.tiers) {
            h.update(label.as_bytes());
            h.update([0u8]);
            h.update(tier.as_str().as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Labels come from the tier map (the full label space, sorted); shot counts
/// are instance frequencies in `train`.
pub fn build_vocabulary(
    train: &[Instance],
    tier_map: &BTreeMap<String, Tier>,
) -> Result<LabelVocabulary> {
    let labels: Vec<String> = tier_map.keys().cloned().collect();
    let index: HashMap<String, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect();
    let tiers = tier_map.values().copied().collect();
    let mut shots = vec![0u32; labels.len()];
    for instance in train {
        for label in &instance.gold_labels {
            let id = index
                .get(label)
                .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
            shots[*id] += 1;
        }
    }
    Ok(LabelVocabulary {
        labels,
        tiers,
        shots,
        index,
    })
}

/// Fixed word vectors. Lookups of absent words return the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            dimension,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::Dimension(format!(
                "vector of length {} in a table of dimension {}",
                vector.len(),
                self.dimension
            )));
        }
        self.vectors.insert(word.into(), vector);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn lookup(&self, word: &str) -> Vec<f64> {
        self.get(word)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.dimension])
    }

    /// Sorted by word so the output is byte-stable.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut words: Vec<&String> = self.vectors.keys().collect();
        words.sort();
        for word in words {
            let mut line = word.clone();
            for v in &self.vectors[word] {
                line.push(' ');
                line.push_str(&format!("{v}"));
            }
            line.push('\n');
            w.write_all(line.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the sorted table contents.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut words: Vec<&String> = self.vectors.keys().collect();
        words.sort();
        for word in words {
            h.update(word.as_bytes());
            for v in &self.vectors[word] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parses `word v1 ... vd` lines. The first line fixes the dimension; a later
/// duplicate word replaces the earlier vector.
pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_table(&text, path)
}

pub(crate) fn parse_embedding_table(text: &str, path: &Path) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    for (line_no, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else {
            continue;
        };
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no + 1,
            message,
        };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(e.to_string()))?;
        if values.is_empty() {
            return Err(parse_err(format!("word `{word}` has no vector")));
        }
        let table = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
        if values.len() != table.dimension {
            return Err(parse_err(format!(
                "expected {} values, found {}",
                table.dimension,
                values.len()
            )));
        }
        if table.vectors.insert(word.to_string(), values).is_some() {
            log::warn!(
                "event=duplicate_embedding file={} line={} word={word}",
                path.display(),
                line_no + 1
            );
        }
    }
    table.ok_or(Error::EmptyEmbeddingTable)
}
