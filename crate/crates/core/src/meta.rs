//! Task-conditioned softmax heads, inner-loop adaptation with learned
//! per-group step sizes, and the first-order meta-training loop.
//!
//! The fast weights of a task are the inner-adaptable encoder parameters,
//! the output MLP `h_phi` and the generated head `(W, b)`. Warp parameters
//! and the head generator `g_psi` are only ever changed by outer updates.

use std::fmt;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::encoder::{EncoderConfig, EncoderError, TextEncoder};
use crate::params::{truncated_normal, ParamTree};
use crate::tasks::{episode_rng, Episode, Example, Provenance, TaskError, TaskSampler};

/// Group holding the generated head `(W, b)`.
pub const HEAD_GROUP: &str = "softmax_Wb";
pub const G_PSI_GROUP: &str = "g_psi";
pub const H_PHI_GROUP: &str = "h_phi";
pub const ALPHA_INIT: f64 = 1e-3;
/// Weight std of the `g_psi` and `h_phi` MLPs. Larger than the encoder's
/// so generated heads separate classes before any training.
pub const GENERATOR_INIT_STD: f64 = 0.125;
/// Output-layer std of the same MLPs. Small enough that a fresh model's
/// query loss stays near ln N.
pub const GENERATOR_OUT_STD: f64 = 0.04;
/// Mixed into the training seed so dropout and batching streams differ
/// from the episode sampling stream.
const TRAIN_SALT: u64 = 0x5eed_7a1e_0f0f_0001;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("class {label} has no support examples")]
    EmptyClass { label: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss {loss} at inner step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("non-finite outer gradient for {param} at update {update}: {dump}")]
    NonFiniteGradient { update: u64, param: String, dump: String },
    #[error("invalid config: {0}")]
    Config(String),
}

/// Shapes of the two head MLPs: `g_psi` maps a sentence representation to
/// `d + 1` values (a weight row and a bias), `h_phi` maps it to `d` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorParams {
    pub model_dim: usize,
    pub hidden: usize,
    pub d: usize,
}

impl GeneratorParams {
    pub fn new(model_dim: usize, d: usize) -> Self {
        Self { model_dim, hidden: model_dim, d }
    }

    /// `g_psi.*` (outer-only) and `h_phi.*` (adaptable) entries.
    pub fn init_params(&self, seed: u64) -> ParamTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = ParamTree::new();
        for (prefix, out, adaptable) in [("g_psi", self.d + 1, false), ("h_phi", self.d, true)] {
            let w1 = truncated_normal(&[self.model_dim, self.hidden], GENERATOR_INIT_STD, &mut rng);
            let w2 = truncated_normal(&[self.hidden, out], GENERATOR_OUT_STD, &mut rng);
            tree.push(format!("{prefix}.hidden.weight"), w1, prefix, false, adaptable);
            tree.push(format!("{prefix}.hidden.bias"), Tensor::zeros(&[self.hidden]), prefix, false, adaptable);
            tree.push(format!("{prefix}.out.weight"), w2, prefix, false, adaptable);
            tree.push(format!("{prefix}.out.bias"), Tensor::zeros(&[out]), prefix, false, adaptable);
        }
        tree
    }

    fn mlp(tape: &mut Tape, tree: &ParamTree, nodes: &[NodeId], prefix: &str, x: NodeId) -> Result<NodeId, MetaError> {
        let p = |n: &str| {
            let name = format!("{prefix}.{n}");
            tree.index_of(&name)
                .map(|i| nodes[i])
                .ok_or(MetaError::Encoder(EncoderError::MissingParam(name)))
        };
        let h = tape.matmul(x, p("hidden.weight")?)?;
        let h = tape.add_row(h, p("hidden.bias")?)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, p("out.weight")?)?;
        Ok(tape.add_row(o, p("out.bias")?)?)
    }
}

/// One learned inner-loop step size per adaptable group plus one for the
/// generated head.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningRates {
    groups: Vec<String>,
    values: Vec<f64>,
}

impl LearningRates {
    pub fn new(groups: Vec<String>, init: f64) -> Self {
        let values = vec![init; groups.len()];
        Self { groups, values }
    }

    pub fn from_parts(groups: Vec<String>, values: Vec<f64>) -> Result<Self, MetaError> {
        if groups.len() != values.len() {
            return Err(MetaError::Shape(format!("{} groups but {} rates", groups.len(), values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(MetaError::Config(format!("non-finite learning rate {v}")));
        }
        Ok(Self { groups, values })
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn index_of(&self, group: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == group)
    }

    pub fn get(&self, group: &str) -> Option<f64> {
        self.index_of(group).map(|i| self.values[i])
    }

    pub fn set(&mut self, group: &str, value: f64) -> bool {
        match self.index_of(group) {
            Some(i) => {
                self.values[i] = value;
                true
            }
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Fast weights of one task: the adapted tree entries followed by `W` and
/// `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedState {
    /// Tree indices of the adapted entries, ascending.
    slots: Vec<usize>,
    values: Vec<Tensor>,
    pub step: usize,
}

impl AdaptedState {
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Current value of tree entry `i` if it is adapted.
    pub fn fast(&self, i: usize) -> Option<&Tensor> {
        self.slots.binary_search(&i).ok().map(|p| &self.values[p])
    }

    pub fn w(&self) -> &Tensor {
        &self.values[self.slots.len()]
    }

    pub fn b(&self) -> &Tensor {
        &self.values[self.slots.len() + 1]
    }

    pub fn n_way(&self) -> usize {
        self.b().len()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
}

/// Encoder, head generator, their parameters and the learned step sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub encoder: TextEncoder,
    pub generator: GeneratorParams,
    pub params: ParamTree,
    pub lrs: LearningRates,
}

/// Forward products needed by callers that backpropagate.
struct HeadForward {
    tape: Tape,
    loss: NodeId,
    logits: NodeId,
    nodes: Vec<NodeId>,
    w: NodeId,
    b: NodeId,
}

/// Loss statistics of one scored batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub loss: f64,
    pub accuracy: f64,
}

impl MetaModel {
    pub fn new(cfg: EncoderConfig, d: usize, seed: u64) -> Result<Self, MetaError> {
        if d == 0 {
            return Err(MetaError::Config("head dimension d must be positive".into()));
        }
        let encoder = TextEncoder::new(cfg)?;
        let generator = GeneratorParams::new(cfg.model_dim, d);
        let mut params = encoder.init_params(seed);
        params.extend(generator.init_params(seed.wrapping_add(1)));
        let mut groups = params.adaptable_groups();
        groups.push(HEAD_GROUP.to_string());
        let lrs = LearningRates::new(groups, ALPHA_INIT);
        Ok(Self { encoder, generator, params, lrs })
    }

    /// Reassembles a model from stored parts, checking that the tree and the
    /// rates agree with the configuration.
    pub fn from_parts(cfg: EncoderConfig, d: usize, params: ParamTree, lrs: LearningRates) -> Result<Self, MetaError> {
        let fresh = Self::new(cfg, d, 0)?;
        if fresh.params.len() != params.len() {
            return Err(MetaError::Shape(format!("expected {} entries, found {}", fresh.params.len(), params.len())));
        }
        for (a, b) in fresh.params.entries().iter().zip(params.entries()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() || a.is_warp != b.is_warp || a.inner_adaptable != b.inner_adaptable
            {
                return Err(MetaError::Shape(format!("entry {} does not match the configuration", b.name)));
            }
        }
        if fresh.lrs.groups() != lrs.groups() {
            return Err(MetaError::Shape("learning-rate groups do not match the configuration".into()));
        }
        Ok(Self { params, lrs, ..fresh })
    }

    pub fn d(&self) -> usize {
        self.generator.d
    }

    /// Step-size index for tree entry `i`. Warp entries borrow the step
    /// size of their layer's feed-forward norm when `adapt_warp` is set.
    fn alpha_index(&self, i: usize, adapt_warp: bool) -> Option<usize> {
        let e = self.params.entry(i);
        if e.inner_adaptable {
            self.lrs.index_of(&e.group)
        } else if e.is_warp && adapt_warp {
            self.lrs.index_of(&format!("{}_norm", e.group))
        } else {
            None
        }
    }

    /// Fast state seeded from the current parameters and a generated head.
    pub fn initial_state(&self, w: Tensor, b: Tensor, adapt_warp: bool) -> Result<AdaptedState, MetaError> {
        if w.ndim() != 2 || w.shape()[1] != self.d() || b.shape() != [w.shape()[0]] {
            return Err(MetaError::Shape(format!(
                "head W {:?} and b {:?} inconsistent with d = {}",
                w.shape(),
                b.shape(),
                self.d()
            )));
        }
        let slots: Vec<usize> = (0..self.params.len())
            .filter(|&i| self.alpha_index(i, adapt_warp).is_some())
            .collect();
        let mut values: Vec<Tensor> = slots.iter().map(|&i| self.params.entry(i).tensor.clone()).collect();
        values.push(w);
        values.push(b);
        Ok(AdaptedState { slots, values, step: 0 })
    }

    fn slot_alphas(&self, state: &AdaptedState) -> Vec<usize> {
        let head = self.lrs.index_of(HEAD_GROUP).expect("head group present");
        let adapt_warp = state.slots.iter().any(|&i| self.params.entry(i).is_warp);
        let mut out: Vec<usize> = state
            .slots
            .iter()
            .map(|&i| self.alpha_index(i, adapt_warp).expect("slot has a step size"))
            .collect();
        out.extend([head, head]);
        out
    }

    /// Records `g_psi(f_pi(x))` for every support example and averages per
    /// class. Returns `W` (`[n_way, d]`) and `b` (`[n_way]`) nodes.
    #[allow(clippy::too_many_arguments)]
    fn record_generation<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        support: &[Example],
        n_way: usize,
        train: bool,
        rng: &mut R,
    ) -> Result<(NodeId, NodeId), MetaError> {
        let mut counts = vec![0usize; n_way];
        for ex in support {
            if ex.label >= n_way {
                return Err(MetaError::Shape(format!("label {} outside {n_way}-way task", ex.label)));
            }
            counts[ex.label] += 1;
        }
        if let Some(label) = counts.iter().position(|&c| c == 0) {
            return Err(MetaError::EmptyClass { label });
        }
        let inputs: Vec<&[u32]> = support.iter().map(|e| e.tokens.as_slice()).collect();
        let out = self.encoder.forward(tape, &self.params, nodes, &inputs, train, rng, false)?;
        let g = GeneratorParams::mlp(tape, &self.params, nodes, "g_psi", out.cls)?;
        let mut avg = vec![0.0; n_way * support.len()];
        for (j, ex) in support.iter().enumerate() {
            avg[ex.label * support.len() + j] = 1.0 / counts[ex.label] as f64;
        }
        let avg = tape.constant(Tensor::matrix(n_way, support.len(), avg)?);
        let pooled = tape.matmul(avg, g)?;
        let d = self.d();
        let w = tape.slice(pooled, 1, 0, d)?;
        let b = tape.slice(pooled, 1, d, d + 1)?;
        let b = tape.reshape(b, &[n_way])?;
        Ok((w, b))
    }

    /// Generated head for a support set, in evaluation mode.
    pub fn generate_softmax(&self, support: &[Example], n_way: usize) -> Result<(Tensor, Tensor), MetaError> {
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, b) = self.record_generation(&mut tape, &nodes, support, n_way, false, &mut rng)?;
        Ok((tape.value(w).clone(), tape.value(b).clone()))
    }

    /// Records head generation from `support` followed by the query
    /// cross-entropy, with every parameter read from `nodes`. Evaluation
    /// mode; used to check gradients of the whole path.
    pub fn record_task_loss(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        support: &[Example],
        query: &[Example],
        n_way: usize,
    ) -> Result<NodeId, MetaError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, b) = self.record_generation(tape, nodes, support, n_way, false, &mut rng)?;
        let inputs: Vec<&[u32]> = query.iter().map(|e| e.tokens.as_slice()).collect();
        let out = self.encoder.forward(tape, &self.params, nodes, &inputs, false, &mut rng, false)?;
        let h = GeneratorParams::mlp(tape, &self.params, nodes, "h_phi", out.cls)?;
        let wt = tape.transpose(w)?;
        let logits = tape.matmul(h, wt)?;
        let logits = tape.add_row(logits, b)?;
        let labels: Vec<usize> = query.iter().map(|e| e.label).collect();
        Ok(tape.cross_entropy(logits, &labels)?)
    }

    /// Cross-entropy of `examples` under the fast weights in `state`.
    /// Adapted entries and the head are leaves; warp entries are leaves when
    /// `warp_leaves`, everything else is constant.
    fn head_forward<R: Rng + ?Sized>(
        &self,
        state: &AdaptedState,
        examples: &[&Example],
        train: bool,
        rng: &mut R,
        warp_leaves: bool,
    ) -> Result<HeadForward, MetaError> {
        if examples.is_empty() {
            return Err(MetaError::Shape("empty batch".into()));
        }
        let mut tape = Tape::new();
        let mut nodes = Vec::with_capacity(self.params.len());
        for (i, e) in self.params.entries().iter().enumerate() {
            let node = match state.fast(i) {
                Some(t) => tape.leaf(t.clone()),
                None if e.is_warp && warp_leaves => tape.leaf(e.tensor.clone()),
                None => tape.constant(e.tensor.clone()),
            };
            nodes.push(node);
        }
        let w = tape.leaf(state.w().clone());
        let b = tape.leaf(state.b().clone());
        let inputs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let out = self.encoder.forward(&mut tape, &self.params, &nodes, &inputs, train, rng, false)?;
        let h = GeneratorParams::mlp(&mut tape, &self.params, &nodes, "h_phi", out.cls)?;
        let wt = tape.transpose(w)?;
        let logits = tape.matmul(h, wt)?;
        let logits = tape.add_row(logits, b)?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        if let Some(&l) = labels.iter().find(|&&l| l >= state.n_way()) {
            return Err(MetaError::Shape(format!("label {l} outside {}-way head", state.n_way())));
        }
        let loss = tape.cross_entropy(logits, &labels)?;
        Ok(HeadForward { tape, loss, logits, nodes, w, b })
    }

    /// Parameter tree with the adapted entries of `state` substituted.
    pub fn adapted_params(&self, state: &AdaptedState) -> ParamTree {
        let mut tree = self.params.clone();
        for (p, &i) in state.slots.iter().enumerate() {
            *tree.tensor_mut(i) = state.values[p].clone();
        }
        tree
    }

    /// Class probabilities for each input under `state`, in evaluation mode.
    pub fn predict(&self, state: &AdaptedState, inputs: &[&[u32]]) -> Result<Vec<Vec<f64>>, MetaError> {
        let examples: Vec<Example> = inputs
            .iter()
            .map(|t| Example { tokens: t.to_vec(), label: 0, source: None })
            .collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = self.head_forward(state, &refs, false, &mut rng, false)?;
        let probs = fwd.tape.softmax(fwd.logits);
        let p = fwd.tape.value(probs);
        Ok((0..inputs.len()).map(|r| p.row(r).to_vec()).collect())
    }

    /// Loss and accuracy of `examples` under `state`, in evaluation mode.
    pub fn score(&self, state: &AdaptedState, examples: &[Example]) -> Result<Score, MetaError> {
        let refs: Vec<&Example> = examples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.head_forward(state, &refs, false, &mut rng, false)?;
        Ok(Score {
            loss: fwd.tape.value(fwd.loss).item(),
            accuracy: accuracy(fwd.tape.value(fwd.logits), &refs),
        })
    }

    /// Loss and fast-weight gradients on one batch, without updating.
    fn inner_gradient<R: Rng + ?Sized>(
        &self,
        state: &AdaptedState,
        batch: &[&Example],
        train: bool,
        rng: &mut R,
    ) -> Result<(f64, Vec<Tensor>), MetaError> {
        let fwd = self.head_forward(state, batch, train, rng, false)?;
        let loss = fwd.tape.value(fwd.loss).item();
        if !loss.is_finite() {
            return Err(MetaError::NonFiniteLoss { step: state.step, loss });
        }
        let mut grads = fwd.tape.backward(fwd.loss)?;
        let mut out: Vec<Tensor> = state.slots.iter().map(|&i| grads.take(fwd.nodes[i])).collect();
        out.push(grads.take(fwd.w));
        out.push(grads.take(fwd.b));
        Ok((loss, out))
    }

    /// One inner step: every adapted group moves by `-alpha_g * grad_g` on
    /// the cross-entropy of `batch`. Warp entries are read, never written.
    /// Returns the pre-step loss.
    pub fn inner_adapt<R: Rng + ?Sized>(
        &self,
        state: &mut AdaptedState,
        batch: &[&Example],
        train: bool,
        rng: &mut R,
    ) -> Result<f64, MetaError> {
        let (loss, grads) = self.inner_gradient(state, batch, train, rng)?;
        let alphas = self.slot_alphas(state);
        for ((v, g), &a) in state.values.iter_mut().zip(&grads).zip(&alphas) {
            v.axpy(-self.lrs.values()[a], g);
        }
        state.step += 1;
        Ok(loss)
    }

    /// First-order meta-gradient of one episode: `G` inner steps on support
    /// batches, each followed by a validation gradient on the query set at
    /// the adapted point. Gradients with respect to the generated head are
    /// carried back through the generator, which also reaches the encoder.
    pub fn episode_gradient(
        &self,
        episode: &Episode,
        steps: usize,
        inner_batch: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<EpisodeGradient, MetaError> {
        if steps == 0 {
            return Err(MetaError::Config("adaptation steps must be at least 1".into()));
        }
        let mut gen_tape = Tape::new();
        let gen_nodes = self.params.register(&mut gen_tape, true);
        let (w0, b0) = self.record_generation(&mut gen_tape, &gen_nodes, &episode.support, episode.n_way, true, rng)?;
        let state = self.initial_state(gen_tape.value(w0).clone(), gen_tape.value(b0).clone(), false)?;
        let slots = state.slots.clone();
        let warp: Vec<usize> = (0..self.params.len()).filter(|&i| self.params.entry(i).is_warp).collect();

        let batches = inner_batches(episode.support.len(), inner_batch, steps, rng);
        let mut task = EpisodeTask {
            model: self,
            state,
            episode,
            batches,
            warp: &warp,
            rng,
        };
        let alphas = self.slot_alphas(&task.state);
        let init = task.state.values.clone();
        let outcome = first_order_adapt(&mut task, init, &alphas, self.lrs.values(), steps)?;

        let mut grads: Vec<Tensor> = self.params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        for (&i, g) in slots.iter().zip(&outcome.slot_grads) {
            grads[i] = g.clone();
        }
        for (&i, g) in warp.iter().zip(&outcome.outer_grads) {
            grads[i].axpy(1.0, g);
        }
        let dw = gen_tape.constant(outcome.slot_grads[slots.len()].clone());
        let db = gen_tape.constant(outcome.slot_grads[slots.len() + 1].clone());
        let sw = gen_tape.mul(w0, dw)?;
        let sb = gen_tape.mul(b0, db)?;
        let sw = gen_tape.sum(sw);
        let sb = gen_tape.sum(sb);
        let surrogate = gen_tape.add(sw, sb)?;
        let mut gen_grads = gen_tape.backward(surrogate)?;
        for (i, g) in grads.iter_mut().enumerate() {
            if let Some(t) = gen_grads.get_ref(gen_nodes[i]) {
                g.axpy(1.0, t);
            }
            let _ = gen_grads.take(gen_nodes[i]);
        }
        Ok(EpisodeGradient {
            params: grads,
            alphas: outcome.alpha_grads,
            inner_losses: outcome.inner_losses,
            val_loss: *outcome.val_losses.last().expect("steps >= 1"),
            val_acc: *outcome.val_accs.last().expect("steps >= 1"),
        })
    }

    /// Generated head plus `steps` inner steps over the support set, in
    /// evaluation mode; returns the adapted state and its query score.
    pub fn adapt_and_score(
        &self,
        episode: &Episode,
        steps: usize,
        inner_batch: Option<usize>,
        seed: u64,
    ) -> Result<(AdaptedState, Score), MetaError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = self.generate_softmax(&episode.support, episode.n_way)?;
        let mut state = self.initial_state(w, b, false)?;
        let batches = inner_batches(episode.support.len(), inner_batch, steps, &mut rng);
        for batch in &batches {
            let refs: Vec<&Example> = batch.iter().map(|&j| &episode.support[j]).collect();
            self.inner_adapt(&mut state, &refs, false, &mut rng)?;
        }
        let score = self.score(&state, &episode.query)?;
        Ok((state, score))
    }
}

fn accuracy(logits: &Tensor, examples: &[&Example]) -> f64 {
    let correct = examples
        .iter()
        .enumerate()
        .filter(|(r, e)| argmax(logits.row(*r)) == e.label)
        .count();
    correct as f64 / examples.len() as f64
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Support indices for each of `steps` inner batches: the whole support
/// when `size` is `None` or covers it, otherwise consecutive windows over
/// a shuffled order, wrapping around.
pub fn inner_batches<R: Rng + ?Sized>(n: usize, size: Option<usize>, steps: usize, rng: &mut R) -> Vec<Vec<usize>> {
    match size {
        Some(s) if s > 0 && s < n => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            (0..steps)
                .map(|step| (0..s).map(|j| order[(step * s + j) % n]).collect())
                .collect()
        }
        _ => vec![(0..n).collect(); steps],
    }
}

struct EpisodeTask<'a> {
    model: &'a MetaModel,
    state: AdaptedState,
    episode: &'a Episode,
    batches: Vec<Vec<usize>>,
    warp: &'a [usize],
    rng: &'a mut ChaCha8Rng,
}

impl FirstOrderTask for EpisodeTask<'_> {
    fn inner(&mut self, step: usize, fast: &[Tensor]) -> Result<(f64, Vec<Tensor>), MetaError> {
        self.state.values.clone_from_slice(fast);
        self.state.step = step;
        let batch: Vec<&Example> = self.batches[step].iter().map(|&j| &self.episode.support[j]).collect();
        self.model.inner_gradient(&self.state, &batch, true, self.rng)
    }

    fn validate(&mut self, fast: &[Tensor]) -> Result<ValStep, MetaError> {
        self.state.values.clone_from_slice(fast);
        let query: Vec<&Example> = self.episode.query.iter().collect();
        let fwd = self.model.head_forward(&self.state, &query, true, self.rng, true)?;
        let loss = fwd.tape.value(fwd.loss).item();
        if !loss.is_finite() {
            return Err(MetaError::NonFiniteLoss { step: self.state.step, loss });
        }
        let accuracy = accuracy(fwd.tape.value(fwd.logits), &query);
        let mut grads = fwd.tape.backward(fwd.loss)?;
        let mut slot_grads: Vec<Tensor> = self.state.slots.iter().map(|&i| grads.take(fwd.nodes[i])).collect();
        slot_grads.push(grads.take(fwd.w));
        slot_grads.push(grads.take(fwd.b));
        let outer_grads = self.warp.iter().map(|&i| grads.take(fwd.nodes[i])).collect();
        Ok(ValStep { loss, accuracy, slot_grads, outer_grads })
    }
}

/// Meta-gradient contribution of one episode, aligned with the model's
/// parameter tree and learning rates.
#[derive(Debug, Clone)]
pub struct EpisodeGradient {
    pub params: Vec<Tensor>,
    pub alphas: Vec<f64>,
    pub inner_losses: Vec<f64>,
    /// Query loss and accuracy after the last inner step.
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Validation products at one adapted point.
#[derive(Debug, Clone)]
pub struct ValStep {
    pub loss: f64,
    pub accuracy: f64,
    /// Gradient with respect to every fast-weight slot.
    pub slot_grads: Vec<Tensor>,
    /// Gradient with respect to outer-only parameters that enter the loss
    /// directly.
    pub outer_grads: Vec<Tensor>,
}

/// An adaptation problem seen through its fast-weight slots.
pub trait FirstOrderTask {
    /// Loss and slot gradients on inner batch `step` at `fast`.
    fn inner(&mut self, step: usize, fast: &[Tensor]) -> Result<(f64, Vec<Tensor>), MetaError>;
    /// Validation loss and gradients at `fast`.
    fn validate(&mut self, fast: &[Tensor]) -> Result<ValStep, MetaError>;
}

/// Accumulated first-order meta-gradient of one task.
#[derive(Debug, Clone)]
pub struct FirstOrderOutcome {
    pub inner_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub val_accs: Vec<f64>,
    /// Sum over steps of the validation gradient at each adapted point;
    /// the first-order gradient with respect to the initial slot values.
    pub slot_grads: Vec<Tensor>,
    /// Per step-size gradient, holding every inner gradient constant.
    pub alpha_grads: Vec<f64>,
    pub outer_grads: Vec<Tensor>,
    pub fast: Vec<Tensor>,
}

/// Runs `steps` inner updates `theta <- theta - alpha * grad` from `init`
/// and, after each, accumulates the validation gradient at the new point.
///
/// Slot `i` uses step size `alphas[slot_alpha[i]]`. Because
/// `theta_{s+1} = theta_0 - alpha * sum_{j<=s} g_j`, the first-order
/// derivative of the validation loss with respect to a step size is minus
/// the inner product of the validation gradient with the summed inner
/// gradients of its slots.
pub fn first_order_adapt<T: FirstOrderTask + ?Sized>(
    task: &mut T,
    init: Vec<Tensor>,
    slot_alpha: &[usize],
    alphas: &[f64],
    steps: usize,
) -> Result<FirstOrderOutcome, MetaError> {
    if slot_alpha.len() != init.len() {
        return Err(MetaError::Shape(format!("{} slots but {} step-size indices", init.len(), slot_alpha.len())));
    }
    let mut fast = init;
    let mut cumulative: Vec<Tensor> = fast.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut slot_grads = cumulative.clone();
    let mut alpha_grads = vec![0.0; alphas.len()];
    let mut outer_grads: Vec<Tensor> = Vec::new();
    let mut out = FirstOrderOutcome {
        inner_losses: Vec::with_capacity(steps),
        val_losses: Vec::with_capacity(steps),
        val_accs: Vec::with_capacity(steps),
        slot_grads: Vec::new(),
        alpha_grads: Vec::new(),
        outer_grads: Vec::new(),
        fast: Vec::new(),
    };
    for s in 0..steps {
        let (loss, grads) = task.inner(s, &fast)?;
        if grads.len() != fast.len() {
            return Err(MetaError::Shape(format!("inner step returned {} gradients for {} slots", grads.len(), fast.len())));
        }
        out.inner_losses.push(loss);
        for (i, g) in grads.iter().enumerate() {
            cumulative[i].axpy(1.0, g);
            fast[i].axpy(-alphas[slot_alpha[i]], g);
        }
        let val = task.validate(&fast)?;
        out.val_losses.push(val.loss);
        out.val_accs.push(val.accuracy);
        for (i, g) in val.slot_grads.iter().enumerate() {
            alpha_grads[slot_alpha[i]] -= g.dot(&cumulative[i]);
            slot_grads[i].axpy(1.0, g);
        }
        if outer_grads.is_empty() {
            outer_grads = val.outer_grads;
        } else {
            for (acc, g) in outer_grads.iter_mut().zip(&val.outer_grads) {
                acc.axpy(1.0, g);
            }
        }
    }
    out.slot_grads = slot_grads;
    out.alpha_grads = alpha_grads;
    out.outer_grads = outer_grads;
    out.fast = fast;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

impl fmt::Display for OuterOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OuterOptimizer::Sgd => "sgd",
            OuterOptimizer::Adam => "adam",
        })
    }
}

impl std::str::FromStr for OuterOptimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OuterOptimizer::Sgd),
            "adam" => Ok(OuterOptimizer::Adam),
            _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    pub tasks_per_batch: usize,
    /// Inner steps per episode (G).
    pub adaptation_steps: usize,
    /// Outer learning rate (beta) after warmup.
    pub outer_lr: f64,
    pub epochs: usize,
    pub episodes_per_epoch: u64,
    /// Fraction of outer updates over which beta ramps linearly from
    /// `beta / warmup_updates` to `beta`.
    pub warmup_fraction: f64,
    /// Support examples per inner step; `None` uses the whole support.
    pub inner_batch: Option<usize>,
    pub optimizer: OuterOptimizer,
    pub workers: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            tasks_per_batch: 4,
            adaptation_steps: 7,
            outer_lr: 1e-2,
            epochs: 1,
            episodes_per_epoch: 2000,
            warmup_fraction: 0.1,
            inner_batch: None,
            optimizer: OuterOptimizer::Sgd,
            workers: 1,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let fail = |m: &str| Err(MetaError::Config(m.to_string()));
        if self.adaptation_steps == 0 {
            return fail("adaptation_steps must be at least 1");
        }
        if self.tasks_per_batch == 0 {
            return fail("tasks_per_batch must be at least 1");
        }
        if !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return fail("outer_lr must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1]");
        }
        if self.inner_batch == Some(0) {
            return fail("inner_batch must be positive");
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> u64 {
        self.episodes_per_epoch * self.epochs as u64
    }

    pub fn total_updates(&self) -> u64 {
        self.total_episodes().div_ceil(self.tasks_per_batch as u64)
    }

    /// Outer learning rate at update `u` (0-based).
    pub fn beta_at(&self, u: u64) -> f64 {
        let warm = (self.warmup_fraction * self.total_updates() as f64).ceil() as u64;
        if u < warm {
            self.outer_lr * (u + 1) as f64 / warm as f64
        } else {
            self.outer_lr
        }
    }
}

/// Outer optimizer moments; empty for SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub updates: u64,
    /// One moment vector per tree entry, then one for the step sizes.
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One training-log line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub provenance: Provenance,
    pub inner_losses: Vec<f64>,
    pub val_loss: f64,
    pub val_acc: f64,
    pub alphas: Vec<f64>,
}

pub fn write_log_header<W: Write>(mut w: W, groups: &[String]) -> io::Result<()> {
    write!(w, "step,provenance,inner_losses,val_loss,val_acc")?;
    for g in groups {
        write!(w, ",alpha:{g}")?;
    }
    writeln!(w)
}

pub fn write_log_row<W: Write>(mut w: W, row: &LogRow) -> io::Result<()> {
    let inner: Vec<String> = row.inner_losses.iter().map(|l| format!("{l}")).collect();
    write!(w, "{},{},{},{},{}", row.step, row.provenance, inner.join(";"), row.val_loss, row.val_acc)?;
    for a in &row.alphas {
        write!(w, ",{a}")?;
    }
    writeln!(w)
}

/// Summary of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub episodes: u64,
    pub skipped: u64,
    pub updates: u64,
}

/// Meta-trainer: model plus outer optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainer {
    pub model: MetaModel,
    pub optimizer: OptimizerState,
}

impl MetaTrainer {
    pub fn new(model: MetaModel) -> Self {
        Self { model, optimizer: OptimizerState::default() }
    }

    /// Meta-trains on the sampler's episode stream. Episodes are taken in
    /// batches of `tasks_per_batch`; each batch's first-order gradients are
    /// summed in episode order, divided by the number of inner steps, and
    /// applied to every parameter and step size. `on_row` receives one log
    /// row per episode.
    pub fn train<F>(&mut self, sampler: &TaskSampler, cfg: &MetaTrainConfig, mut on_row: F) -> Result<TrainSummary, MetaError>
    where
        F: FnMut(&LogRow) -> io::Result<()>,
    {
        cfg.validate()?;
        let total = cfg.total_episodes();
        let mut summary = TrainSummary::default();
        let mut start = 0u64;
        while start < total {
            let end = (start + cfg.tasks_per_batch as u64).min(total);
            let update = self.optimizer.updates;
            let results = self.batch_gradients(sampler, cfg, start..end);
            let mut acc: Option<(Vec<Tensor>, Vec<f64>)> = None;
            for (idx, res) in (start..end).zip(results) {
                summary.episodes += 1;
                let (provenance, grad) = match res {
                    Ok(pair) => pair,
                    Err(MetaError::Task(e)) => {
                        log::warn!("episode {idx}: skipped ({e})");
                        summary.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                on_row(&LogRow {
                    step: update,
                    provenance,
                    inner_losses: grad.inner_losses.clone(),
                    val_loss: grad.val_loss,
                    val_acc: grad.val_acc,
                    alphas: self.model.lrs.values().to_vec(),
                })
                .map_err(|e| MetaError::Config(format!("writing training log: {e}")))?;
                match &mut acc {
                    None => acc = Some((grad.params, grad.alphas)),
                    Some((p, a)) => {
                        for (x, g) in p.iter_mut().zip(&grad.params) {
                            x.axpy(1.0, g);
                        }
                        for (x, g) in a.iter_mut().zip(&grad.alphas) {
                            *x += g;
                        }
                    }
                }
            }
            if let Some((p, a)) = acc {
                self.apply_update(cfg, p, a)?;
                summary.updates += 1;
            }
            start = end;
        }
        Ok(summary)
    }

    fn batch_gradients(
        &self,
        sampler: &TaskSampler,
        cfg: &MetaTrainConfig,
        range: std::ops::Range<u64>,
    ) -> Vec<Result<(Provenance, EpisodeGradient), MetaError>> {
        let model = &self.model;
        let one = |i: u64| -> Result<(Provenance, EpisodeGradient), MetaError> {
            let ep = sampler.episode(i)?;
            let mut rng = episode_rng(cfg.seed ^ TRAIN_SALT, i);
            let g = model.episode_gradient(&ep, cfg.adaptation_steps, cfg.inner_batch, &mut rng)?;
            Ok((ep.provenance, g))
        };
        if cfg.workers <= 1 || range.end - range.start < 2 {
            return range.map(one).collect();
        }
        let idx: Vec<u64> = range.collect();
        let chunk = idx.len().div_ceil(cfg.workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = idx
                .chunks(chunk)
                .map(|c| scope.spawn(move || c.iter().map(|&i| one(i)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
        })
    }

    fn apply_update(&mut self, cfg: &MetaTrainConfig, mut params: Vec<Tensor>, mut alphas: Vec<f64>) -> Result<(), MetaError> {
        let update = self.optimizer.updates;
        let scale = 1.0 / cfg.adaptation_steps as f64;
        for (i, g) in params.iter_mut().enumerate() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(MetaError::NonFiniteGradient {
                    update,
                    param: self.model.params.entry(i).name.clone(),
                    dump: format!("entry {j} = {}", g.data()[j]),
                });
            }
        }
        for (j, g) in alphas.iter_mut().enumerate() {
            *g *= scale;
            if !g.is_finite() {
                return Err(MetaError::NonFiniteGradient {
                    update,
                    param: format!("alpha:{}", self.model.lrs.groups()[j]),
                    dump: format!("value {g}"),
                });
            }
        }
        let beta = cfg.beta_at(update);
        match cfg.optimizer {
            OuterOptimizer::Sgd => {
                for (i, g) in params.iter().enumerate() {
                    self.model.params.tensor_mut(i).axpy(-beta, g);
                }
                for (a, g) in self.model.lrs.values_mut().iter_mut().zip(&alphas) {
                    *a -= beta * g;
                }
            }
            OuterOptimizer::Adam => {
                let st = &mut self.optimizer;
                if st.first.is_empty() {
                    st.first = params.iter().map(|g| vec![0.0; g.len()]).collect();
                    st.first.push(vec![0.0; alphas.len()]);
                    st.second = st.first.clone();
                }
                let t = (update + 1) as i32;
                let c1 = 1.0 - ADAM_B1.powi(t);
                let c2 = 1.0 - ADAM_B2.powi(t);
                let step = |x: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
                    *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
                    *x -= beta * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                };
                let n = params.len();
                for (i, g) in params.iter().enumerate() {
                    let x = self.model.params.tensor_mut(i).data_mut();
                    for (j, &gj) in g.data().iter().enumerate() {
                        step(&mut x[j], gj, &mut st.first[i][j], &mut st.second[i][j]);
                    }
                }
                for (j, &g) in alphas.iter().enumerate() {
                    step(&mut self.model.lrs.values_mut()[j], g, &mut st.first[n][j], &mut st.second[n][j]);
                }
            }
        }
        self.optimizer.updates += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS_ID, MASK_ID};

    fn tiny_model(seed: u64) -> MetaModel {
        let cfg = EncoderConfig {
            vocab_size: 30,
            model_dim: 8,
            ff_dim: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            dropout: 0.1,
        };
        MetaModel::new(cfg, 4, seed).unwrap()
    }

    fn ex(tokens: &[u32], label: usize) -> Example {
        Example { tokens: tokens.to_vec(), label, source: None }
    }

    fn toy_episode() -> Episode {
        let support = vec![ex(&[5, 6, MASK_ID], 0), ex(&[7, MASK_ID], 0), ex(&[MASK_ID, 9, 10], 1), ex(&[11, MASK_ID], 1)];
        let query = vec![ex(&[5, MASK_ID], 0), ex(&[MASK_ID, 10], 1)];
        Episode {
            n_way: 2,
            k_support: 2,
            q_query: 1,
            support,
            query,
            provenance: Provenance::Smlmt,
            secret_words: None,
        }
    }

    #[test]
    fn rates_cover_adaptable_groups_and_head() {
        let m = tiny_model(0);
        let mut expected = m.params.adaptable_groups();
        expected.push(HEAD_GROUP.into());
        assert_eq!(m.lrs.groups(), expected.as_slice());
        assert!(m.lrs.groups().contains(&H_PHI_GROUP.to_string()));
        assert!(!m.lrs.groups().contains(&G_PSI_GROUP.to_string()));
        assert!(m.lrs.values().iter().all(|&a| a == ALPHA_INIT));
    }

    #[test]
    fn head_shapes_follow_n_way_and_d() {
        let m = tiny_model(1);
        let support = vec![ex(&[5], 0), ex(&[6], 1), ex(&[7], 2)];
        let (w, b) = m.generate_softmax(&support, 3).unwrap();
        assert_eq!(w.shape(), &[3, 4]);
        assert_eq!(b.shape(), &[3]);
    }

    #[test]
    fn empty_class_is_rejected() {
        let m = tiny_model(1);
        let support = vec![ex(&[5], 0), ex(&[6], 0)];
        assert!(matches!(m.generate_softmax(&support, 2), Err(MetaError::EmptyClass { label: 1 })));
    }

    #[test]
    fn identical_examples_average_to_one_example() {
        let m = tiny_model(2);
        let (w1, b1) = m.generate_softmax(&[ex(&[5, 6], 0), ex(&[8], 1)], 2).unwrap();
        let (w3, b3) = m.generate_softmax(&[ex(&[5, 6], 0), ex(&[5, 6], 0), ex(&[5, 6], 0), ex(&[8], 1)], 2).unwrap();
        assert!(w1.max_abs_diff(&w3) < 1e-14);
        assert!(b1.max_abs_diff(&b3) < 1e-14);
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let m = tiny_model(3);
        let s = m.initial_state(Tensor::zeros(&[4, 4]), Tensor::zeros(&[4]), false).unwrap();
        let p = m.predict(&s, &[&[5, 6, 7]]).unwrap();
        for v in &p[0] {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_step_sizes_leave_state_unchanged() {
        let mut m = tiny_model(4);
        m.lrs.values_mut().iter_mut().for_each(|a| *a = 0.0);
        let ep = toy_episode();
        let (w, b) = m.generate_softmax(&ep.support, 2).unwrap();
        let mut s = m.initial_state(w, b, false).unwrap();
        let before = s.clone();
        let batch: Vec<&Example> = ep.support.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.inner_adapt(&mut s, &batch, true, &mut rng).unwrap();
        assert_eq!(s.values(), before.values());
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adapted_state_never_holds_warp_entries() {
        let m = tiny_model(5);
        let s = m.initial_state(Tensor::zeros(&[2, 4]), Tensor::zeros(&[2]), false).unwrap();
        assert!(s.slots().iter().all(|&i| !m.params.entry(i).is_warp));
        assert!(s.slots().iter().all(|&i| m.params.entry(i).group != G_PSI_GROUP));
        let s = m.initial_state(Tensor::zeros(&[2, 4]), Tensor::zeros(&[2]), true).unwrap();
        assert!(s.slots().iter().any(|&i| m.params.entry(i).is_warp));
    }

    #[test]
    fn episode_gradient_reaches_every_outer_parameter() {
        let m = tiny_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = m.episode_gradient(&toy_episode(), 2, None, &mut rng).unwrap();
        assert_eq!(g.params.len(), m.params.len());
        assert_eq!(g.inner_losses.len(), 2);
        for (e, t) in m.params.entries().iter().zip(&g.params) {
            if e.name == "embed.token" {
                // Only rows of tokens present in the episode receive gradient.
                assert!(t.row(CLS_ID as usize).iter().any(|&v| v != 0.0));
                continue;
            }
            assert!(t.data().iter().any(|&v| v != 0.0), "{} has zero meta-gradient", e.name);
        }
        assert!(g.alphas.iter().all(|a| a.is_finite()));
        assert!(g.alphas.iter().any(|&a| a != 0.0));
    }

    #[test]
    fn inner_batches_cycle_a_shuffled_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = inner_batches(5, Some(2), 5, &mut rng);
        let flat: Vec<usize> = b.concat();
        for w in flat.chunks(5) {
            let mut s = w.to_vec();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(inner_batches(3, None, 2, &mut rng), vec![vec![0, 1, 2]; 2]);
        assert_eq!(inner_batches(3, Some(8), 1, &mut rng), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let cfg = MetaTrainConfig {
            episodes_per_epoch: 400,
            tasks_per_batch: 4,
            warmup_fraction: 0.1,
            outer_lr: 1.0,
            ..Default::default()
        };
        assert_eq!(cfg.total_updates(), 100);
        assert!((cfg.beta_at(0) - 0.1).abs() < 1e-15);
        assert!((cfg.beta_at(4) - 0.5).abs() < 1e-15);
        assert_eq!(cfg.beta_at(9), 1.0);
        assert_eq!(cfg.beta_at(50), 1.0);
    }

    #[test]
    fn log_row_format() {
        let mut buf = Vec::new();
        write_log_header(&mut buf, &["a".into(), "b".into()]).unwrap();
        write_log_row(
            &mut buf,
            &LogRow {
                step: 3,
                provenance: Provenance::Supervised("x".into()),
                inner_losses: vec![0.5, 0.25],
                val_loss: 0.125,
                val_acc: 1.0,
                alphas: vec![0.001, -0.5],
            },
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,provenance,inner_losses,val_loss,val_acc,alpha:a,alpha:b\n3,supervised:x,0.5;0.25,0.125,1,0.001,-0.5\n"
        );
    }
}
