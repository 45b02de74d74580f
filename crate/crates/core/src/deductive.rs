//! Autoregressive label decoder with contextual attention over encoder states,
//! premise attention over its own earlier states, a duplicate mask and EOS
//! termination.
//!
//! The graph-level functions (`*_on`) are what training differentiates
//! through. The plain-value functions wrap them for inference and inspection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::encoder::{EncodedInstance, EncodedVars};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, Linear, LstmCell};
use crate::tensor::{argmax, Matrix};

/// Marker value of a masked mask entry.
pub const MASKED: f64 = f64::NEG_INFINITY;
/// Mask value of an open entry.
pub const OPEN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderDims {
    /// Encoder width.
    pub d_h: usize,
    /// Decoder width.
    pub d_s: usize,
    /// Attention width.
    pub d_a: usize,
    /// Label embedding width.
    pub d_e: usize,
    /// Number of labels, excluding EOS.
    pub num_labels: usize,
}

impl DecoderDims {
    pub fn eos_id(&self) -> usize {
        self.num_labels
    }

    /// Output size: every label plus EOS.
    pub fn num_outputs(&self) -> usize {
        self.num_labels + 1
    }
}

/// Parameter handles for the decoder. Values live in the model's
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DecoderParameters {
    pub dims: DecoderDims,
    pub context_query: ParamId,
    pub context_key: ParamId,
    pub context_score: ParamId,
    pub premise_query: ParamId,
    pub premise_key: ParamId,
    pub premise_score: ParamId,
    pub output: ParamId,
    pub label_input: ParamId,
    pub label_embedding: ParamId,
    pub start_embedding: ParamId,
    pub cell: LstmCell,
    /// Maps `d_h` into `d_s` when the widths differ; used for both `s_0` and
    /// the context half of `m_t`.
    pub bridge: Option<Linear>,
}

const NAMES: [&str; 10] = [
    "decoder.context.query",
    "decoder.context.key",
    "decoder.context.score",
    "decoder.premise.query",
    "decoder.premise.key",
    "decoder.premise.score",
    "decoder.output",
    "decoder.label_input",
    "decoder.label_embedding",
    "decoder.start_embedding",
];

impl DecoderParameters {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dims: DecoderDims) -> Self {
        let DecoderDims {
            d_h,
            d_s,
            d_a,
            d_e,
            num_labels,
        } = dims;
        let mut add = |store: &mut ParamStore, name: &str, rows, cols, fan_in| {
            store.add(
                name,
                ParamGroup::Decoder,
                init_uniform(rng, rows, cols, fan_in),
            )
        };
        let context_query = add(store, NAMES[0], d_s, d_a, d_s);
        let context_key = add(store, NAMES[1], d_h, d_a, d_h);
        let context_score = add(store, NAMES[2], d_a, 1, d_a);
        let premise_query = add(store, NAMES[3], d_s, d_a, d_s);
        let premise_key = add(store, NAMES[4], d_s, d_a, d_s);
        let premise_score = add(store, NAMES[5], d_a, 1, d_a);
        let output = add(store, NAMES[6], 2 * d_s, num_labels + 1, 2 * d_s);
        let label_input = add(store, NAMES[7], d_e, d_e, d_e);
        let label_embedding = add(store, NAMES[8], num_labels + 1, d_e, 1);
        let start_embedding = add(store, NAMES[9], 1, d_e, 1);
        let cell = LstmCell::new(store, rng, "decoder.cell", ParamGroup::Decoder, d_e, d_s);
        let bridge = (d_h != d_s).then(|| {
            Linear::new(
                store,
                rng,
                "decoder.bridge",
                ParamGroup::Decoder,
                d_h,
                d_s,
                true,
            )
        });
        Self {
            dims,
            context_query,
            context_key,
            context_score,
            premise_query,
            premise_key,
            premise_score,
            output,
            label_input,
            label_embedding,
            start_embedding,
            cell,
            bridge,
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Config(format!("parameter store lacks {name}")))
        };
        let ids: Vec<ParamId> = NAMES.iter().map(|n| get(n)).collect::<Result<_>>()?;
        let cell = LstmCell::lookup(store, "decoder.cell")
            .ok_or_else(|| Error::Config("parameter store lacks decoder.cell".into()))?;
        let bridge = Linear::lookup(store, "decoder.bridge");
        let d_h = store.get(ids[1]).rows();
        let d_s = store.get(ids[0]).rows();
        let d_a = store.get(ids[0]).cols();
        let d_e = store.get(ids[8]).cols();
        let num_labels = store.get(ids[8]).rows() - 1;
        Ok(Self {
            dims: DecoderDims {
                d_h,
                d_s,
                d_a,
                d_e,
                num_labels,
            },
            context_query: ids[0],
            context_key: ids[1],
            context_score: ids[2],
            premise_query: ids[3],
            premise_key: ids[4],
            premise_score: ids[5],
            output: ids[6],
            label_input: ids[7],
            label_embedding: ids[8],
            start_embedding: ids[9],
            cell,
            bridge,
        })
    }

    fn bridge_on(&self, g: &mut Graph, x: Var) -> Var {
        match &self.bridge {
            Some(b) => b.forward(g, x),
            None => x,
        }
    }
}

/// Previous decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrevLabel {
    Start,
    Label(usize),
}

/// Inverted dropout on `m_t`, active only while training.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let (rows, cols) = g.value(x).shape();
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = g.input(Matrix::from_vec(rows, cols, mask));
        g.mul(x, m)
    }
}

/// Per-instance quantities reused at every step.
#[derive(Debug, Clone, Copy)]
pub struct DecoderInputs {
    pub hidden: Var,
    pub sentence: Var,
    /// `H · U_c`, shape n × d_a.
    pub context_keys: Var,
}

pub fn prepare_on(
    g: &mut Graph,
    params: &DecoderParameters,
    enc: EncodedVars,
) -> Result<DecoderInputs> {
    let (n, d_h) = g.value(enc.hidden).shape();
    if n == 0 {
        return Err(Error::EmptyAttention("contextual attention"));
    }
    if d_h != params.dims.d_h {
        return Err(Error::Dimension(format!(
            "encoder width {d_h} but decoder expects {}",
            params.dims.d_h
        )));
    }
    let uc = g.param(params.context_key);
    let context_keys = g.matmul(enc.hidden, uc);
    Ok(DecoderInputs {
        hidden: enc.hidden,
        sentence: enc.sentence,
        context_keys,
    })
}

/// Decoder state on a graph.
#[derive(Debug, Clone)]
pub struct GraphState {
    pub t: usize,
    pub hidden: Var,
    pub cell: Var,
    /// `s_0 .. s_t`.
    pub priors: Vec<Var>,
    pub emitted: Vec<usize>,
    pub masked: Vec<bool>,
}

impl GraphState {
    pub fn record_emission(&mut self, label: usize) -> Result<()> {
        let eos = self.masked.len() - 1;
        check_emission(label, eos, &self.masked)?;
        self.masked[label] = true;
        self.emitted.push(label);
        Ok(())
    }
}

fn check_emission(label: usize, eos: usize, masked: &[bool]) -> Result<()> {
    if label == eos {
        return Err(Error::InvalidInput(
            "EOS is never recorded as an emission".into(),
        ));
    }
    if label > eos {
        return Err(Error::LabelOutOfRange {
            id: label,
            size: eos,
        });
    }
    if masked[label] {
        return Err(Error::DuplicateEmission(label));
    }
    Ok(())
}

pub fn init_state_on(
    g: &mut Graph,
    params: &DecoderParameters,
    inputs: &DecoderInputs,
) -> GraphState {
    let s0 = params.bridge_on(g, inputs.sentence);
    let c0 = g.input(Matrix::zeros(1, params.dims.d_s));
    GraphState {
        t: 0,
        hidden: s0,
        cell: c0,
        priors: vec![s0],
        emitted: Vec::new(),
        masked: vec![false; params.dims.num_outputs()],
    }
}

/// Returns `(alpha, c_t)` as `1 × n` and `1 × d_h`.
pub fn contextual_attention_on(
    g: &mut Graph,
    params: &DecoderParameters,
    s_t: Var,
    inputs: &DecoderInputs,
) -> (Var, Var) {
    let wc = g.param(params.context_query);
    let vc = g.param(params.context_score);
    let q = g.matmul(s_t, wc);
    let z = g.add_row(inputs.context_keys, q);
    let z = g.tanh(z);
    let e = g.matmul(z, vc);
    let e = g.transpose(e);
    let alpha = g.softmax(e, None);
    let c = g.matmul(alpha, inputs.hidden);
    (alpha, c)
}

/// Returns `(alpha, u_t)` as `1 × t` and `1 × d_s`.
pub fn premise_attention_on(
    g: &mut Graph,
    params: &DecoderParameters,
    s_t: Var,
    priors: &[Var],
) -> Result<(Var, Var)> {
    if priors.is_empty() {
        return Err(Error::EmptyAttention("premise attention"));
    }
    let stacked = g.concat_rows(priors);
    let wp = g.param(params.premise_query);
    let up = g.param(params.premise_key);
    let vp = g.param(params.premise_score);
    let keys = g.matmul(stacked, up);
    let q = g.matmul(s_t, wp);
    let z = g.add_row(keys, q);
    let z = g.tanh(z);
    let e = g.matmul(z, vp);
    let e = g.transpose(e);
    let alpha = g.softmax(e, None);
    let u = g.matmul(alpha, stacked);
    Ok((alpha, u))
}

/// Graph handles produced by one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    /// `s_t`.
    pub hidden: Var,
    /// `o_t + I_t` over unmasked entries; masked entries are excluded from
    /// the softmax.
    pub logits: Var,
    /// `y_t`.
    pub probs: Var,
}

pub fn step_on(
    g: &mut Graph,
    params: &DecoderParameters,
    inputs: &DecoderInputs,
    state: &GraphState,
    prev: PrevLabel,
    dropout: Option<&mut Dropout>,
) -> Result<(StepVars, GraphState)> {
    let dims = params.dims;
    let x = match prev {
        PrevLabel::Start => g.param(params.start_embedding),
        PrevLabel::Label(id) => {
            if id >= dims.num_outputs() {
                return Err(Error::LabelOutOfRange {
                    id,
                    size: dims.num_labels,
                });
            }
            let table = g.param(params.label_embedding);
            g.gather_rows(table, &[id])
        }
    };
    let wb = g.param(params.label_input);
    let x = g.matmul(x, wb);
    let (s_t, cell) = params.cell.step(g, x, state.hidden, state.cell);

    let (_, context) = contextual_attention_on(g, params, s_t, inputs);
    let (_, premise) = premise_attention_on(g, params, s_t, &state.priors)?;

    let ctx = g.add(context, inputs.sentence);
    let ctx = params.bridge_on(g, ctx);
    let prem = g.add(premise, s_t);
    let mut m = g.concat_cols(&[ctx, prem]);
    if let Some(d) = dropout {
        m = d.apply(g, m);
    }
    let wo = g.param(params.output);
    let o = g.matmul(m, wo);
    let open = g.input(Matrix::filled(1, dims.num_outputs(), OPEN));
    let logits = g.add(o, open);
    let probs = g.softmax(logits, Some(&state.masked));

    let mut priors = state.priors.clone();
    priors.push(s_t);
    let next = GraphState {
        t: state.t + 1,
        hidden: s_t,
        cell,
        priors,
        emitted: state.emitted.clone(),
        masked: state.masked.clone(),
    };
    Ok((
        StepVars {
            hidden: s_t,
            logits,
            probs,
        },
        next,
    ))
}

/// Teacher-forced pass over `targets` followed by one EOS step: returns
/// `targets.len() + 1` steps. Each target is recorded as emitted before the
/// next step, so the mask matches inference.
pub fn teacher_forced_on(
    g: &mut Graph,
    params: &DecoderParameters,
    inputs: &DecoderInputs,
    targets: &[usize],
    mut dropout: Option<&mut Dropout>,
) -> Result<Vec<StepVars>> {
    let mut state = init_state_on(g, params, inputs);
    let mut prev = PrevLabel::Start;
    let mut steps = Vec::with_capacity(targets.len() + 1);
    for k in 0..=targets.len() {
        let (step, mut next) = step_on(g, params, inputs, &state, prev, dropout.as_deref_mut())?;
        steps.push(step);
        if k < targets.len() {
            next.record_emission(targets[k])?;
            prev = PrevLabel::Label(targets[k]);
        }
        state = next;
    }
    Ok(steps)
}

/// Output of [`free_running_on`].
#[derive(Debug, Clone)]
pub struct FreeRun {
    pub steps: Vec<StepVars>,
    pub picked: Vec<usize>,
    /// State after the last step, ready for another [`step_on`].
    pub state: GraphState,
    pub prev: PrevLabel,
}

/// Runs `steps` greedy steps feeding back the arg-max non-EOS label. Used to
/// obtain the generated distributions that gold labels are matched against.
/// Stops early only if every label is masked.
pub fn free_running_on(
    g: &mut Graph,
    params: &DecoderParameters,
    inputs: &DecoderInputs,
    steps: usize,
    mut dropout: Option<&mut Dropout>,
) -> Result<FreeRun> {
    let eos = params.dims.eos_id();
    let mut state = init_state_on(g, params, inputs);
    let mut prev = PrevLabel::Start;
    let mut out = Vec::with_capacity(steps);
    let mut picked = Vec::with_capacity(steps);
    for _ in 0..steps {
        if state.masked[..eos].iter().all(|&m| m) {
            break;
        }
        let (step, mut next) = step_on(g, params, inputs, &state, prev, dropout.as_deref_mut())?;
        out.push(step);
        let probs = g.value(step.probs).data();
        let label =
            argmax(&masked_view(&probs[..eos], &next.masked[..eos])).expect("an open label exists");
        next.record_emission(label)?;
        picked.push(label);
        prev = PrevLabel::Label(label);
        state = next;
    }
    Ok(FreeRun {
        steps: out,
        picked,
        state,
        prev,
    })
}

/// Greedy decoding result with the per-step decoder states, which the
/// attribute graph reuses.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyTrace {
    pub labels: Vec<usize>,
    /// `s_1 .. s_T` for every step taken, including the step that produced EOS.
    pub hidden_states: Vec<Vec<f64>>,
    pub distributions: Vec<Vec<f64>>,
}

pub fn greedy_on(
    g: &mut Graph,
    params: &DecoderParameters,
    inputs: &DecoderInputs,
    max_steps: usize,
) -> Result<GreedyTrace> {
    if max_steps == 0 {
        return Err(Error::InvalidInput("max_steps must be at least 1".into()));
    }
    let eos = params.dims.eos_id();
    let mut state = init_state_on(g, params, inputs);
    let mut prev = PrevLabel::Start;
    let mut trace = GreedyTrace {
        labels: Vec::new(),
        hidden_states: Vec::new(),
        distributions: Vec::new(),
    };
    for _ in 0..max_steps {
        let (step, mut next) = step_on(g, params, inputs, &state, prev, None)?;
        trace
            .hidden_states
            .push(g.value(step.hidden).data().to_vec());
        let probs = g.value(step.probs).data().to_vec();
        let choice = argmax(&masked_view(&probs, &next.masked));
        trace.distributions.push(probs);
        match choice {
            Some(label) if label != eos => {
                next.record_emission(label)?;
                trace.labels.push(label);
                prev = PrevLabel::Label(label);
            }
            _ => break,
        }
        state = next;
    }
    Ok(trace)
}

/// Probabilities with masked entries pushed to `-inf` so they can never win
/// an arg-max, even when every open entry underflows to 0.
fn masked_view(probs: &[f64], masked: &[bool]) -> Vec<f64> {
    probs
        .iter()
        .zip(masked)
        .map(|(&p, &m)| if m { f64::NEG_INFINITY } else { p })
        .collect()
}

// ---------------------------------------------------------------------------
// Plain-value API

/// Decoder state as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub t: usize,
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    /// `s_0 .. s_t`; always `t + 1` entries.
    pub priors: Vec<Vec<f64>>,
    pub emitted: Vec<usize>,
    /// `I_t`: [`MASKED`] at emitted ids, [`OPEN`] elsewhere. EOS is never masked.
    pub mask: Vec<f64>,
}

impl DecodeState {
    fn masked(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == MASKED).collect()
    }

    fn to_graph(&self, g: &mut Graph) -> GraphState {
        let priors: Vec<Var> = self
            .priors
            .iter()
            .map(|p| g.input(Matrix::row_vector(p.clone())))
            .collect();
        let hidden = *priors.last().expect("priors never empty");
        GraphState {
            t: self.t,
            hidden,
            cell: g.input(Matrix::row_vector(self.cell.clone())),
            priors,
            emitted: self.emitted.clone(),
            masked: self.masked(),
        }
    }

    fn from_graph(g: &Graph, s: &GraphState) -> Self {
        Self {
            t: s.t,
            hidden: g.value(s.hidden).data().to_vec(),
            cell: g.value(s.cell).data().to_vec(),
            priors: s
                .priors
                .iter()
                .map(|&p| g.value(p).data().to_vec())
                .collect(),
            emitted: s.emitted.clone(),
            mask: s
                .masked
                .iter()
                .map(|&m| if m { MASKED } else { OPEN })
                .collect(),
        }
    }
}

/// Output of [`step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `o_t + I_t`, with `-inf` at masked ids.
    pub logits: Vec<f64>,
    /// `y_t`.
    pub probs: Vec<f64>,
    pub state: DecodeState,
}

fn encoded_inputs(
    g: &mut Graph,
    params: &DecoderParameters,
    encoded: &EncodedInstance,
) -> Result<DecoderInputs> {
    let vars = encoded.to_vars(g);
    prepare_on(g, params, vars)
}

pub fn init_state(
    store: &ParamStore,
    params: &DecoderParameters,
    encoded: &EncodedInstance,
) -> Result<DecodeState> {
    let mut g = Graph::new(store);
    let inputs = encoded_inputs(&mut g, params, encoded)?;
    let s = init_state_on(&mut g, params, &inputs);
    Ok(DecodeState::from_graph(&g, &s))
}

pub fn contextual_attention(
    store: &ParamStore,
    params: &DecoderParameters,
    s_t: &[f64],
    hidden_states: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if hidden_states.rows() == 0 {
        return Err(Error::EmptyAttention("contextual attention"));
    }
    check_len("s_t", s_t.len(), params.dims.d_s)?;
    check_len("h_i", hidden_states.cols(), params.dims.d_h)?;
    let mut g = Graph::new(store);
    let hidden = g.input(hidden_states.clone());
    let uc = g.param(params.context_key);
    let context_keys = g.matmul(hidden, uc);
    let sentence = g.gather_rows(hidden, &[0]);
    let inputs = DecoderInputs {
        hidden,
        sentence,
        context_keys,
    };
    let s = g.input(Matrix::row_vector(s_t.to_vec()));
    let (alpha, c) = contextual_attention_on(&mut g, params, s, &inputs);
    Ok((g.value(alpha).data().to_vec(), g.value(c).data().to_vec()))
}

pub fn premise_attention(
    store: &ParamStore,
    params: &DecoderParameters,
    s_t: &[f64],
    priors: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if priors.is_empty() {
        return Err(Error::EmptyAttention("premise attention"));
    }
    check_len("s_t", s_t.len(), params.dims.d_s)?;
    for p in priors {
        check_len("s_j", p.len(), params.dims.d_s)?;
    }
    let mut g = Graph::new(store);
    let s = g.input(Matrix::row_vector(s_t.to_vec()));
    let pv: Vec<Var> = priors
        .iter()
        .map(|p| g.input(Matrix::row_vector(p.clone())))
        .collect();
    let (alpha, u) = premise_attention_on(&mut g, params, s, &pv)?;
    Ok((g.value(alpha).data().to_vec(), g.value(u).data().to_vec()))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!(
            "{what} has width {got}, expected {want}"
        )));
    }
    Ok(())
}

/// One decoding step. The mask is left as-is; the caller records the emitted
/// label with [`record_emission`].
pub fn step(
    store: &ParamStore,
    params: &DecoderParameters,
    state: &DecodeState,
    prev: PrevLabel,
    encoded: &EncodedInstance,
) -> Result<StepOutput> {
    match (state.t, prev) {
        (0, PrevLabel::Start) => {}
        (0, PrevLabel::Label(_)) => {
            return Err(Error::InvalidInput("the first step consumes START".into()))
        }
        (_, PrevLabel::Start) => {
            return Err(Error::InvalidInput("START is only valid at t = 0".into()))
        }
        _ => {}
    }
    check_len("decoder state", state.hidden.len(), params.dims.d_s)?;
    check_len("mask", state.mask.len(), params.dims.num_outputs())?;
    let mut g = Graph::new(store);
    let inputs = encoded_inputs(&mut g, params, encoded)?;
    let gs = state.to_graph(&mut g);
    let (out, next) = step_on(&mut g, params, &inputs, &gs, prev, None)?;
    let logits = g
        .value(out.logits)
        .data()
        .iter()
        .zip(&gs.masked)
        .map(|(&l, &m)| if m { MASKED } else { l })
        .collect();
    Ok(StepOutput {
        logits,
        probs: g.value(out.probs).data().to_vec(),
        state: DecodeState::from_graph(&g, &next),
    })
}

pub fn record_emission(state: &DecodeState, label: usize) -> Result<DecodeState> {
    let eos = state.mask.len() - 1;
    check_emission(label, eos, &state.masked())?;
    let mut next = state.clone();
    next.emitted.push(label);
    next.mask[label] = MASKED;
    Ok(next)
}

/// Greedy arg-max decoding until EOS or `max_steps`. Ties go to the lowest id.
pub fn decode_greedy(
    store: &ParamStore,
    params: &DecoderParameters,
    encoded: &EncodedInstance,
    max_steps: usize,
) -> Result<Vec<usize>> {
    let mut g = Graph::new(store);
    let inputs = encoded_inputs(&mut g, params, encoded)?;
    Ok(greedy_on(&mut g, params, &inputs, max_steps)?.labels)
}
