use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BagAggregation, EncoderKind, MatchingPass, RunConfig};
use crate::autodiff::{Gradients, Graph, ParamStore, Var};
use crate::bag::{
    activate, build_graph_with, induce, label_scores_on, AttributeProposal, BagParameters, BagVars,
    BipartiteAttributeGraph, LabelEmbeddings,
};
use crate::corpus::{EmbeddingTable, Instance, LabelVocabulary};
use crate::deductive::{
    free_running_on, greedy_on, prepare_on, step_on, teacher_forced_on, DecoderDims, DecoderInputs,
    DecoderParameters, Dropout, StepVars,
};
use crate::encoder::{mark, Encoder, MarkedSequence, PrecomputedEncoder, TokenVocab, ToyEncoder};
use crate::error::{Error, Result};
use crate::objective::{bag_loss_on, free_run_cost, hungarian, reorder_gold, set_loss_on};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub enum ModelEncoder {
    Toy(ToyEncoder),
    Precomputed(PrecomputedEncoder),
}

impl ModelEncoder {
    pub fn as_dyn(&self) -> &dyn Encoder {
        match self {
            ModelEncoder::Toy(e) => e,
            ModelEncoder::Precomputed(e) => e,
        }
    }

    pub fn token_vocab(&self) -> Option<&TokenVocab> {
        match self {
            ModelEncoder::Toy(e) => Some(&e.vocab),
            ModelEncoder::Precomputed(_) => None,
        }
    }
}

/// What the encoder is built from.
#[derive(Debug, Clone)]
pub enum EncoderSource {
    Toy(TokenVocab),
    Precomputed(PrecomputedEncoder),
}

/// Parameters and fixed resources of a trained or freshly initialised model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: LabelVocabulary,
    pub store: ParamStore,
    pub encoder: ModelEncoder,
    pub decoder: DecoderParameters,
    pub bag: BagParameters,
    pub table: EmbeddingTable,
    pub labels: LabelEmbeddings,
}

/// An instance with everything training and inference need precomputed.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub instance: Instance,
    pub sequence: MarkedSequence,
    /// Gold ids in ascending order; labels outside the vocabulary are dropped.
    pub gold: Vec<usize>,
    pub gold_set: BTreeSet<usize>,
    pub graph: BipartiteAttributeGraph,
}

#[derive(Debug, Clone)]
pub struct InstanceLoss {
    pub total: f64,
    pub set_loss: f64,
    pub bag_loss: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub id: String,
    pub deductive: Vec<usize>,
    /// Induced labels with their highest score over the decoding steps.
    pub inductive: BTreeMap<usize, f64>,
    pub final_labels: BTreeSet<usize>,
}

/// Serialised form of a [`PredictionResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub deductive: Vec<String>,
    pub inductive: BTreeMap<String, f64>,
    #[serde(rename = "final")]
    pub final_labels: Vec<String>,
}

impl PredictionResult {
    pub fn to_record(&self, vocab: &LabelVocabulary) -> PredictionRecord {
        PredictionRecord {
            id: self.id.clone(),
            deductive: self
                .deductive
                .iter()
                .map(|&i| vocab.label(i).to_string())
                .collect(),
            inductive: self
                .inductive
                .iter()
                .map(|(&i, &s)| (vocab.label(i).to_string(), s))
                .collect(),
            final_labels: self
                .final_labels
                .iter()
                .map(|&i| vocab.label(i).to_string())
                .collect(),
        }
    }
}

impl Model {
    pub fn new(
        config: RunConfig,
        vocab: LabelVocabulary,
        source: EncoderSource,
        table: EmbeddingTable,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = match source {
            EncoderSource::Toy(tokens) => {
                if config.encoder != EncoderKind::Toy {
                    return Err(Error::Config(
                        "token vocabulary given for a precomputed encoder".into(),
                    ));
                }
                ModelEncoder::Toy(ToyEncoder::new(
                    &mut store,
                    &mut rng,
                    tokens,
                    config.toy_token_dim,
                    config.hidden_size(),
                )?)
            }
            EncoderSource::Precomputed(features) => {
                if config.encoder != EncoderKind::Precomputed {
                    return Err(Error::Config("features given for a toy encoder".into()));
                }
                ModelEncoder::Precomputed(features)
            }
        };
        let dims = DecoderDims {
            d_h: config.hidden_size(),
            d_s: config.d_s,
            d_a: config.attention_size(),
            d_e: config.d_e,
            num_labels: vocab.len(),
        };
        let decoder = DecoderParameters::new(&mut store, &mut rng, dims);
        let bag = BagParameters::new(&mut store, &mut rng, config.d_s, config.d_g);
        Self::from_parts(config, vocab, store, encoder, table, decoder, bag)
    }

    pub(crate) fn from_parts(
        config: RunConfig,
        vocab: LabelVocabulary,
        store: ParamStore,
        encoder: ModelEncoder,
        table: EmbeddingTable,
        decoder: DecoderParameters,
        bag: BagParameters,
    ) -> Result<Self> {
        if table.dimension() != config.d_g {
            return Err(Error::Config(format!(
                "d_g is {} but the embedding table has dimension {}",
                config.d_g,
                table.dimension()
            )));
        }
        if encoder.as_dyn().hidden_size() != config.hidden_size() {
            return Err(Error::Dimension(format!(
                "encoder width {} but config d_h is {}",
                encoder.as_dyn().hidden_size(),
                config.hidden_size()
            )));
        }
        let labels = LabelEmbeddings::new(&vocab, &table);
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            decoder,
            bag,
            table,
            labels,
        })
    }

    /// Marks the instance, resolves its gold ids and builds its attribute
    /// graph. With `strict`, gold labels outside the vocabulary are an error.
    pub fn prepare(
        &self,
        instance: &Instance,
        attributes: &[AttributeProposal],
        strict: bool,
    ) -> Result<PreparedInstance> {
        instance.validate()?;
        let mut gold_set = BTreeSet::new();
        for label in &instance.gold_labels {
            match self.vocab.id(label) {
                Some(id) => {
                    gold_set.insert(id);
                }
                None if strict => return Err(Error::UnknownLabel(label.clone())),
                None => {}
            }
        }
        Ok(PreparedInstance {
            instance: instance.clone(),
            sequence: mark(instance),
            gold: gold_set.iter().copied().collect(),
            gold_set,
            graph: build_graph_with(attributes, &self.labels, &self.table),
        })
    }

    fn inputs<'g>(&'g self, g: &mut Graph<'g>, p: &PreparedInstance) -> Result<DecoderInputs> {
        let enc = self.encoder.as_dyn().encode_on(g, &p.sequence)?;
        prepare_on(g, &self.decoder, enc)
    }

    /// Gold ids ordered by the minimum-cost matching against a free-running
    /// pass without dropout.
    pub fn matched_order(&self, p: &PreparedInstance) -> Result<Vec<usize>> {
        let mut g = Graph::new(&self.store);
        let inputs = self.inputs(&mut g, p)?;
        let run = free_running_on(&mut g, &self.decoder, &inputs, p.gold.len(), None)?;
        let dists: Vec<Vec<f64>> = run
            .steps
            .iter()
            .map(|s| g.value(s.probs).data().to_vec())
            .collect();
        let cost = free_run_cost(&p.gold, &dists)?;
        let (assignment, _) = hungarian(cost.matrix())?;
        Ok(reorder_gold(&p.gold, &assignment))
    }

    /// Loss and gradients for one instance. `dropout_seed` switches dropout
    /// on.
    pub fn instance_loss(
        &self,
        p: &PreparedInstance,
        dropout_seed: Option<u64>,
    ) -> Result<InstanceLoss> {
        let cfg = &self.config;
        let eos = self.vocab.eos_id();
        let mut dropout = dropout_seed
            .filter(|_| cfg.dropout > 0.0)
            .map(|seed| Dropout {
                rate: cfg.dropout,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        let mut g = Graph::new(&self.store);
        let inputs = self.inputs(&mut g, p)?;
        let m = p.gold.len();
        let (steps, targets): (Vec<StepVars>, Vec<usize>) = if m == 0 {
            (
                teacher_forced_on(&mut g, &self.decoder, &inputs, &[], dropout.as_mut())?,
                Vec::new(),
            )
        } else {
            match cfg.matching {
                MatchingPass::TwoPass => {
                    let order = self.matched_order(p)?;
                    let steps = teacher_forced_on(
                        &mut g,
                        &self.decoder,
                        &inputs,
                        &order,
                        dropout.as_mut(),
                    )?;
                    (steps, order)
                }
                MatchingPass::SinglePass => {
                    let run = free_running_on(&mut g, &self.decoder, &inputs, m, dropout.as_mut())?;
                    let (last, _) = step_on(
                        &mut g,
                        &self.decoder,
                        &inputs,
                        &run.state,
                        run.prev,
                        dropout.as_mut(),
                    )?;
                    let dists: Vec<Vec<f64>> = run
                        .steps
                        .iter()
                        .map(|s| g.value(s.probs).data().to_vec())
                        .collect();
                    let cost = free_run_cost(&p.gold, &dists)?;
                    let (assignment, _) = hungarian(cost.matrix())?;
                    let mut steps = run.steps;
                    steps.push(last);
                    (steps, reorder_gold(&p.gold, &assignment))
                }
            }
        };
        let probs: Vec<Var> = steps.iter().map(|s| s.probs).collect();
        let set_loss = set_loss_on(&mut g, &probs, &targets, eos);
        let mut total = set_loss;
        let mut bag_value = 0.0;
        if cfg.lambda > 0.0 {
            if let Some(bv) = BagVars::new(&mut g, &p.graph) {
                let rows: Vec<Var> = steps
                    .iter()
                    .map(|s| label_scores_on(&mut g, self.bag, s.hidden, bv))
                    .collect();
                let stacked = g.concat_rows(&rows);
                let weight = match cfg.bag_aggregation {
                    BagAggregation::Mean => 1.0 / rows.len() as f64,
                    BagAggregation::Sum => 1.0,
                };
                let w = g.input(Matrix::filled(1, rows.len(), weight));
                let scores = g.matmul(w, stacked);
                let bag = bag_loss_on(&mut g, scores, &p.gold_set);
                bag_value = g.scalar(bag);
                let weighted = g.scale(bag, cfg.lambda);
                total = g.add(total, weighted);
            }
        }
        let grads = g.backward(total);
        Ok(InstanceLoss {
            total: g.scalar(total),
            set_loss: g.scalar(set_loss),
            bag_loss: bag_value,
            grads,
        })
    }

    /// Greedy decoding plus per-step induction; the final set is their union.
    pub fn predict(&self, p: &PreparedInstance) -> Result<PredictionResult> {
        let mut g = Graph::new(&self.store);
        let inputs = self.inputs(&mut g, p)?;
        let trace = greedy_on(&mut g, &self.decoder, &inputs, self.config.max_steps)?;
        let w_s = self.store.get(self.bag.state_projection);
        let mut inductive: BTreeMap<usize, f64> = BTreeMap::new();
        for s in &trace.hidden_states {
            let attr = activate(s, &p.graph, w_s)?;
            let (scores, induced) = induce(&attr, &p.graph, self.config.theta_s);
            for j in induced {
                let e = inductive.entry(j).or_insert(scores[j]);
                *e = e.max(scores[j]);
            }
        }
        let final_labels = trace
            .labels
            .iter()
            .copied()
            .chain(inductive.keys().copied())
            .collect();
        Ok(PredictionResult {
            id: p.instance.id.clone(),
            deductive: trace.labels,
            inductive,
            final_labels,
        })
    }

    pub fn predict_all(&self, prepared: &[PreparedInstance]) -> Result<Vec<PredictionResult>> {
        prepared.iter().map(|p| self.predict(p)).collect()
    }

    /// Same model with different inference settings.
    pub fn with_config(&self, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let shape_keys = |c: &RunConfig| {
            (
                c.encoder,
                c.hidden_size(),
                c.toy_token_dim,
                c.d_s,
                c.d_e,
                c.d_g,
                c.attention_size(),
            )
        };
        if shape_keys(&config) != shape_keys(&self.config) {
            return Err(Error::Config("override changes model dimensions".into()));
        }
        let mut m = self.clone();
        m.config = config;
        Ok(m)
    }
}
