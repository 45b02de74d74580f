//! Marker-wrapped input sequences and the encoder contract producing per-token
//! hidden states `H` and the sentence embedding `g` (the CLS row of `H`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::nn::{init_uniform, LstmCell};
use crate::tensor::Matrix;

pub const CLS: &str = "[CLS]";
pub const MENTION_OPEN: &str = "[E1]";
pub const MENTION_CLOSE: &str = "[E2]";
pub const UNK: &str = "[UNK]";

const RESERVED: [&str; 4] = [CLS, MENTION_OPEN, MENTION_CLOSE, UNK];

/// `[CLS] left [E1] mention [E2] right`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedSequence {
    tokens: Vec<String>,
}

impl MarkedSequence {
    /// Validates the marker layout of an externally built token list.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(CLS) {
            return Err(Error::Dimension(
                "marked sequence must start with [CLS]".into(),
            ));
        }
        let open: Vec<usize> = positions(&tokens, MENTION_OPEN);
        let close: Vec<usize> = positions(&tokens, MENTION_CLOSE);
        match (open.as_slice(), close.as_slice()) {
            ([o], [c]) if o < c => Ok(Self { tokens }),
            _ => Err(Error::Dimension(
                "marked sequence needs exactly one [E1] before one [E2]".into(),
            )),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn positions(tokens: &[String], marker: &str) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| *t == marker)
        .map(|(i, _)| i)
        .collect()
}

/// Wraps the instance in markers. Natural tokens that collide with a reserved
/// marker are replaced by `[UNK]`.
pub fn mark(instance: &Instance) -> MarkedSequence {
    let clean = |t: &String| {
        if RESERVED.contains(&t.as_str()) {
            UNK.to_string()
        } else {
            t.clone()
        }
    };
    let mut tokens = Vec::with_capacity(
        instance.left_tokens.len()
            + instance.mention_tokens.len()
            + instance.right_tokens.len()
            + 3,
    );
    tokens.push(CLS.to_string());
    tokens.extend(instance.left_tokens.iter().map(clean));
    tokens.push(MENTION_OPEN.to_string());
    tokens.extend(instance.mention_tokens.iter().map(clean));
    tokens.push(MENTION_CLOSE.to_string());
    tokens.extend(instance.right_tokens.iter().map(clean));
    MarkedSequence { tokens }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    hidden_states: Matrix,
    sentence_embedding: Vec<f64>,
}

impl EncodedInstance {
    /// `g` is taken from row 0 of `hidden_states`.
    pub fn from_hidden_states(hidden_states: Matrix) -> Result<Self> {
        if hidden_states.rows() == 0 {
            return Err(Error::EmptySequence);
        }
        if !hidden_states.all_finite() {
            return Err(Error::Dimension("non-finite hidden state".into()));
        }
        let sentence_embedding = hidden_states.row(0).to_vec();
        Ok(Self {
            hidden_states,
            sentence_embedding,
        })
    }

    pub fn hidden_states(&self) -> &Matrix {
        &self.hidden_states
    }

    pub fn sentence_embedding(&self) -> &[f64] {
        &self.sentence_embedding
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_states.cols()
    }

    /// Places the encoding on `g` as constants.
    pub fn to_vars(&self, g: &mut Graph) -> EncodedVars {
        let hidden = g.input(self.hidden_states.clone());
        let sentence = g.input(Matrix::row_vector(self.sentence_embedding.clone()));
        EncodedVars { hidden, sentence }
    }
}

/// Graph handles for `H` (n × d_h) and `g` (1 × d_h).
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub hidden: Var,
    pub sentence: Var,
}

impl EncodedVars {
    pub fn extract(&self, g: &Graph) -> Result<EncodedInstance> {
        EncodedInstance::from_hidden_states(g.value(self.hidden).clone())
    }
}

pub trait Encoder: Send + Sync {
    fn hidden_size(&self) -> usize;

    /// Encodes onto a graph whose parameters come from the model store.
    fn encode_on(&self, g: &mut Graph, seq: &MarkedSequence) -> Result<EncodedVars>;

    fn encode(&self, params: &ParamStore, seq: &MarkedSequence) -> Result<EncodedInstance> {
        let mut g = Graph::new(params);
        let vars = self.encode_on(&mut g, seq)?;
        vars.extract(&g)
    }
}

/// Token-to-row index for the toy encoder. Lowercased; unknown tokens map to
/// `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TokenVocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<TokenVocab> for Vec<String> {
    fn from(v: TokenVocab) -> Self {
        v.tokens
    }
}

impl TokenVocab {
    /// Reserved markers first, then every distinct lowercased token in
    /// first-seen order.
    pub fn build<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for inst in instances {
            for t in inst
                .left_tokens
                .iter()
                .chain(&inst.mention_tokens)
                .chain(&inst.right_tokens)
            {
                let t = t.to_lowercase();
                if seen.insert(t.clone()) {
                    tokens.push(t);
                }
            }
        }
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.index
            .get(&token.to_lowercase())
            .or_else(|| self.index.get(UNK))
            .copied()
            .unwrap_or(0)
    }
}

/// Embedding lookup, a bidirectional LSTM of width `d_h / 2` per direction,
/// and a linear skip path from the embeddings: `H_i = x_i W_skip + [fwd_i; bwd_i]`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub vocab: TokenVocab,
    pub embedding: ParamId,
    pub skip: ParamId,
    pub forward: LstmCell,
    pub backward: LstmCell,
    hidden_size: usize,
}

impl ToyEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        vocab: TokenVocab,
        token_dim: usize,
        hidden_size: usize,
    ) -> Result<Self> {
        if hidden_size == 0 || !hidden_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "toy encoder hidden size must be even and positive, got {hidden_size}"
            )));
        }
        let half = hidden_size / 2;
        let embedding = store.add(
            "encoder.embedding",
            ParamGroup::Encoder,
            init_uniform(rng, vocab.len(), token_dim, 1).map(|x| x * 0.5),
        );
        let skip = store.add(
            "encoder.skip",
            ParamGroup::Encoder,
            init_uniform(rng, token_dim, hidden_size, token_dim),
        );
        let forward = LstmCell::new(
            store,
            rng,
            "encoder.fwd",
            ParamGroup::Encoder,
            token_dim,
            half,
        );
        let backward = LstmCell::new(
            store,
            rng,
            "encoder.bwd",
            ParamGroup::Encoder,
            token_dim,
            half,
        );
        Ok(Self {
            vocab,
            embedding,
            skip,
            forward,
            backward,
            hidden_size,
        })
    }

    pub fn from_store(store: &ParamStore, vocab: TokenVocab) -> Result<Self> {
        let missing = |what: &str| Error::Config(format!("parameter store lacks {what}"));
        let embedding = store
            .id("encoder.embedding")
            .ok_or_else(|| missing("encoder.embedding"))?;
        let skip = store
            .id("encoder.skip")
            .ok_or_else(|| missing("encoder.skip"))?;
        let forward =
            LstmCell::lookup(store, "encoder.fwd").ok_or_else(|| missing("encoder.fwd"))?;
        let backward =
            LstmCell::lookup(store, "encoder.bwd").ok_or_else(|| missing("encoder.bwd"))?;
        if store.get(embedding).rows() != vocab.len() {
            return Err(Error::Dimension(format!(
                "token vocabulary has {} entries but the embedding has {} rows",
                vocab.len(),
                store.get(embedding).rows()
            )));
        }
        let hidden_size = store.get(skip).cols();
        Ok(Self {
            vocab,
            embedding,
            skip,
            forward,
            backward,
            hidden_size,
        })
    }
}

impl Encoder for ToyEncoder {
    fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn encode_on(&self, g: &mut Graph, seq: &MarkedSequence) -> Result<EncodedVars> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let ids: Vec<usize> = seq.tokens().iter().map(|t| self.vocab.id(t)).collect();
        let table = g.param(self.embedding);
        let xs = g.gather_rows(table, &ids);
        let skip = g.param(self.skip);
        let skipped = g.matmul(xs, skip);

        let n = ids.len();
        let rows: Vec<Var> = (0..n).map(|i| g.gather_rows(xs, &[i])).collect();
        let half = self.hidden_size / 2;
        let zero = g.input(Matrix::zeros(1, half));

        let mut fwd = Vec::with_capacity(n);
        let (mut h, mut c) = (zero, zero);
        for &x in &rows {
            (h, c) = self.forward.step(g, x, h, c);
            fwd.push(h);
        }
        let mut bwd = vec![zero; n];
        let (mut h, mut c) = (zero, zero);
        for i in (0..n).rev() {
            (h, c) = self.backward.step(g, rows[i], h, c);
            bwd[i] = h;
        }
        let per_token: Vec<Var> = (0..n).map(|i| g.concat_cols(&[fwd[i], bwd[i]])).collect();
        let recurrent = g.concat_rows(&per_token);
        let hidden = g.add(skipped, recurrent);
        let sentence = g.gather_rows(hidden, &[0]);
        Ok(EncodedVars { hidden, sentence })
    }
}

#[derive(Deserialize)]
struct FeatureLine {
    tokens: Vec<String>,
    hidden_states: Vec<Vec<f64>>,
}

/// Frozen features produced by an external encoder (for instance a pretrained
/// transformer run offline), keyed by the marked token sequence. Rows may be
/// per-subword; they are consumed as-is.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEncoder {
    hidden_size: usize,
    features: HashMap<String, Matrix>,
}

fn sequence_key(tokens: &[String]) -> String {
    tokens.join("\u{1f}")
}

impl PrecomputedEncoder {
    pub fn new(hidden_size: usize) -> Self {
        Self {
            hidden_size,
            features: HashMap::new(),
        }
    }

    pub fn insert(&mut self, seq: &MarkedSequence, hidden_states: Matrix) -> Result<()> {
        if hidden_states.cols() != self.hidden_size || hidden_states.rows() == 0 {
            return Err(Error::Dimension(format!(
                "features of shape {:?} for an encoder of width {}",
                hidden_states.shape(),
                self.hidden_size
            )));
        }
        self.features
            .insert(sequence_key(seq.tokens()), hidden_states);
        Ok(())
    }

    /// Reads `{"tokens": [...], "hidden_states": [[...], ...]}` lines, where
    /// `tokens` is the full marked sequence.
    pub fn load(path: impl AsRef<Path>, hidden_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut enc = Self::new(hidden_size);
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no + 1,
                message,
            };
            let row: FeatureLine =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let seq = MarkedSequence::new(row.tokens).map_err(|e| parse_err(e.to_string()))?;
            let m = Matrix::from_rows(
                &row.hidden_states,
                row.hidden_states.first().map_or(0, Vec::len),
            );
            enc.insert(&seq, m).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(enc)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

impl Encoder for PrecomputedEncoder {
    fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn encode_on(&self, g: &mut Graph, seq: &MarkedSequence) -> Result<EncodedVars> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let key = sequence_key(seq.tokens());
        let m = self
            .features
            .get(&key)
            .ok_or_else(|| Error::MissingFeatures(seq.tokens().join(" ")))?;
        let hidden = g.input(m.clone());
        let sentence = g.gather_rows(hidden, &[0]);
        Ok(EncodedVars { hidden, sentence })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(seq: &MarkedSequence) -> Vec<&str> {
        seq.tokens().iter().map(String::as_str).collect()
    }

    #[test]
    fn mark_wraps_mention() {
        let inst = Instance::new("0", &["a"], &["b"], &["c"], &[]).unwrap();
        assert_eq!(toks(&mark(&inst)), ["[CLS]", "a", "[E1]", "b", "[E2]", "c"]);
    }

    #[test]
    fn mark_without_context() {
        let inst = Instance::new("0", &[], &["m1", "m2"], &[], &[]).unwrap();
        assert_eq!(toks(&mark(&inst)), ["[CLS]", "[E1]", "m1", "m2", "[E2]"]);
    }

    #[test]
    fn mark_the_fbi_sentence() {
        let inst = Instance::new(
            "0",
            &["They", "were", "arrested", "by"],
            &["FBI", "agents"],
            &["."],
            &[],
        )
        .unwrap();
        assert_eq!(
            toks(&mark(&inst)),
            ["[CLS]", "They", "were", "arrested", "by", "[E1]", "FBI", "agents", "[E2]", "."]
        );
    }

    #[test]
    fn natural_marker_tokens_are_neutralised() {
        let inst = Instance::new("0", &["[E1]"], &["x"], &[], &[]).unwrap();
        let seq = mark(&inst);
        assert!(MarkedSequence::new(seq.tokens().to_vec()).is_ok());
        assert_eq!(seq.tokens()[1], UNK);
    }

    #[test]
    fn marked_sequence_validation() {
        let bad = vec!["x".to_string(), "[E1]".into(), "[E2]".into()];
        assert!(MarkedSequence::new(bad).is_err());
        let bad = vec!["[CLS]".to_string(), "[E2]".into(), "[E1]".into()];
        assert!(MarkedSequence::new(bad).is_err());
    }

    fn toy(hidden: usize) -> (ParamStore, ToyEncoder, MarkedSequence) {
        let inst = Instance::new("0", &["the", "cat"], &["Tom"], &["ran"], &[]).unwrap();
        let vocab = TokenVocab::build([&inst]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = ToyEncoder::new(&mut store, &mut rng, vocab, 6, hidden).unwrap();
        (store, enc, mark(&inst))
    }

    #[test]
    fn toy_encoder_shape_and_determinism() {
        let (store, enc, seq) = toy(8);
        let a = enc.encode(&store, &seq).unwrap();
        let b = enc.encode(&store, &seq).unwrap();
        assert_eq!(a.hidden_states().shape(), (seq.len(), 8));
        assert_eq!(a, b);
        assert_eq!(a.sentence_embedding(), a.hidden_states().row(0));
    }

    #[test]
    fn toy_encoder_with_identity_skip_returns_embedding_row() {
        let inst = Instance::new("0", &[], &["x"], &[], &[]).unwrap();
        let vocab = TokenVocab::build([&inst]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ToyEncoder::new(&mut store, &mut rng, vocab, 4, 4).unwrap();
        *store.get_mut(enc.skip) = Matrix::identity(4);
        for cell in [enc.forward, enc.backward] {
            for id in [cell.input, cell.recurrent, cell.bias] {
                let shape = store.get(id).shape();
                *store.get_mut(id) = Matrix::zeros(shape.0, shape.1);
            }
        }
        let seq = MarkedSequence::new(vec![CLS.into(), MENTION_OPEN.into(), MENTION_CLOSE.into()])
            .unwrap();
        // a single-token encoding is exercised through the graph directly
        let one = MarkedSequence {
            tokens: vec![CLS.to_string()],
        };
        let out = enc.encode(&store, &one).unwrap();
        let cls_row = store.get(enc.embedding).row(enc.vocab.id(CLS)).to_vec();
        assert_eq!(out.sentence_embedding(), cls_row.as_slice());
        assert_eq!(enc.encode(&store, &seq).unwrap().hidden_states().rows(), 3);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, enc, _) = toy(4);
        let empty = MarkedSequence { tokens: vec![] };
        assert!(matches!(
            enc.encode(&store, &empty),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn odd_hidden_size_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vocab = TokenVocab::build(std::iter::empty());
        assert!(ToyEncoder::new(&mut store, &mut rng, vocab, 4, 5).is_err());
    }

    #[test]
    fn precomputed_encoder_round_trip() {
        let inst = Instance::new("0", &["a"], &["b"], &[], &[]).unwrap();
        let seq = mark(&inst);
        let mut enc = PrecomputedEncoder::new(3);
        let h = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        enc.insert(&seq, h.clone()).unwrap();
        let store = ParamStore::new();
        let out = enc.encode(&store, &seq).unwrap();
        assert_eq!(out.hidden_states(), &h);
        assert_eq!(out.sentence_embedding(), &[1.0, 2.0, 3.0]);
        let other = mark(&Instance::new("1", &[], &["zz"], &[], &[]).unwrap());
        assert!(matches!(
            enc.encode(&store, &other),
            Err(Error::MissingFeatures(_))
        ));
    }
}
