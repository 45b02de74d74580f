use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{EncoderKind, RunConfig};
use super::model::{EncoderSource, InstanceLoss, Model, PreparedInstance};
use crate::autodiff::{Gradients, ParamGroup, ParamStore};
use crate::bag::{collect_attributes, AttributeProposal, MaskedWordProposer};
use crate::corpus::{build_vocabulary, EmbeddingTable, Instance, Tier};
use crate::encoder::{PrecomputedEncoder, TokenVocab};
use crate::error::{Error, Result};
use crate::metrics::{macro_prf, Pair};
use crate::tensor::Matrix;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update; parameters without a gradient are treated as having a zero
    /// gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let rate = lr(store.group(id));
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.get_mut(id);
            for k in 0..w.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = BETA1 * m.data()[k] + (1.0 - BETA1) * gk;
                let vk = BETA2 * v.data()[k] + (1.0 - BETA2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                w.data_mut()[k] -= rate * (mk / c1) / ((vk / c2).sqrt() + EPSILON);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub set_loss: f64,
    pub bag_loss: f64,
    pub dev_macro_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best epoch on dev, or of the last epoch without dev.
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Mixes a seed with indices into an independent stream seed.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn learning_rate(cfg: &RunConfig) -> impl Fn(ParamGroup) -> f64 + '_ {
    move |group| match group {
        ParamGroup::Encoder => cfg.lr_encoder,
        ParamGroup::Decoder => cfg.lr,
    }
}

/// Per-instance losses for one batch, computed on `workers` threads and
/// returned in batch order.
fn batch_losses(
    model: &Model,
    batch: &[(usize, &PreparedInstance)],
    epoch: usize,
    workers: usize,
) -> Vec<Result<InstanceLoss>> {
    let seed = model.config.seed;
    let run = |&(pos, p): &(usize, &PreparedInstance)| {
        model.instance_loss(p, Some(mix(seed, epoch as u64, pos as u64)))
    };
    if workers <= 1 || batch.len() <= 1 {
        return batch.iter().map(run).collect();
    }
    let chunk = batch.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Macro F1 of final predictions against gold.
pub fn dev_macro_f1(model: &Model, dev: &[PreparedInstance]) -> Result<f64> {
    let preds = model.predict_all(dev)?;
    let pairs: Vec<Pair<usize>> = preds
        .into_iter()
        .zip(dev)
        .map(|(r, p)| (r.final_labels, p.gold_set.clone()))
        .collect();
    Ok(macro_prf(&pairs).f1)
}

/// Trains `model` in place of its current parameters.
pub fn fit(
    mut model: Model,
    train: &[PreparedInstance],
    dev: &[PreparedInstance],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let cfg = model.config.clone();
    let mut adam = Adam::new(&model.store);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_no = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut set_sum, mut bag_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch_no += 1;
            let batch: Vec<(usize, &PreparedInstance)> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| (b * cfg.batch_size + k, &train[i]))
                .collect();
            let mut grads = Gradients::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for r in batch_losses(&model, &batch, epoch, cfg.workers) {
                let r = r?;
                batch_loss += r.total;
                set_sum += r.set_loss;
                bag_sum += r.bag_loss;
                grads.add(&r.grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            loss_sum += batch_loss;
            let norm = grads.global_norm();
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            adam.step(&mut model.store, &grads, learning_rate(&cfg));
            log::debug!(
                "event=batch epoch={epoch} batch={b} step={batch_no} loss={:.6} grad_norm={norm:.6}",
                batch_loss / batch.len() as f64
            );
        }
        let n = train.len() as f64;
        let dev_f1 = if dev.is_empty() {
            None
        } else {
            Some(dev_macro_f1(&model, dev)?)
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n,
            set_loss: set_sum / n,
            bag_loss: bag_sum / n,
            dev_macro_f1: dev_f1,
        };
        log::info!(
            "event=epoch epoch={} loss={:.6} set_loss={:.6} bag_loss={:.6} dev_macro_f1={}",
            entry.epoch,
            entry.loss,
            entry.set_loss,
            entry.bag_loss,
            dev_f1.map_or("na".to_string(), |f| format!("{f:.6}"))
        );
        history.push(entry);
        let score = dev_f1.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => dev_f1.is_none() || score > *b,
        };
        if improved {
            best = Some((score, epoch, model.store.clone()));
            stale = 0;
            if let Some(dir) = checkpoint_dir {
                checkpoint::save(&model, dir)?;
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("event=early_stop epoch={epoch} patience={}", cfg.patience);
                break;
            }
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Where context attributes come from.
pub enum AttributeSupply<'a> {
    /// Entity attributes only.
    None,
    Proposer(&'a dyn MaskedWordProposer),
    /// Precomputed attribute lists by instance id; missing ids fall back to
    /// entity attributes.
    Precomputed(&'a BTreeMap<String, Vec<AttributeProposal>>),
}

impl AttributeSupply<'_> {
    pub fn attributes(&self, instance: &Instance, theta_c: f64) -> Vec<AttributeProposal> {
        match self {
            AttributeSupply::None => collect_attributes(instance, None, theta_c),
            AttributeSupply::Proposer(p) => collect_attributes(instance, Some(*p), theta_c),
            AttributeSupply::Precomputed(map) => match map.get(&instance.id) {
                Some(a) => a.clone(),
                None => {
                    log::warn!("event=missing_attributes id={}", instance.id);
                    collect_attributes(instance, None, theta_c)
                }
            },
        }
    }
}

/// Inputs that are not hyperparameters.
pub struct Resources<'a> {
    pub tier_map: &'a BTreeMap<String, Tier>,
    pub table: &'a EmbeddingTable,
    pub attributes: AttributeSupply<'a>,
    /// Required for [`EncoderKind::Precomputed`].
    pub features: Option<PrecomputedEncoder>,
}

pub fn prepare_all(
    model: &Model,
    instances: &[Instance],
    attributes: &AttributeSupply,
    strict: bool,
) -> Result<Vec<PreparedInstance>> {
    instances
        .iter()
        .map(|i| model.prepare(i, &attributes.attributes(i, model.config.theta_c), strict))
        .collect()
}

/// Builds the vocabulary and a fresh model, then trains it.
pub fn train(
    config: &RunConfig,
    train_set: &[Instance],
    dev_set: &[Instance],
    resources: Resources,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    config.validate()?;
    let vocab = build_vocabulary(train_set, resources.tier_map)?;
    let source = match config.encoder {
        EncoderKind::Toy => EncoderSource::Toy(TokenVocab::build(train_set)),
        EncoderKind::Precomputed => EncoderSource::Precomputed(
            resources
                .features
                .ok_or_else(|| Error::Config("precomputed encoder needs a features file".into()))?,
        ),
    };
    let model = Model::new(config.clone(), vocab, source, resources.table.clone())?;
    let train_p = prepare_all(&model, train_set, &resources.attributes, true)?;
    let dev_p = prepare_all(&model, dev_set, &resources.attributes, false)?;
    fit(model, &train_p, &dev_p, checkpoint_dir)
}
