//! Gradient checks over composed graphs: a deep MLP, one attention block,
//! a small encoder and the full head-generation-to-prediction path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{
    check_gradients, check_gradients_with, primitive_suite, probe, random_tensor, GradCheckReport, Stencil, FD_STEP, MODEL_FD_STEP,
};
use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::encoder::{EncoderConfig, TextEncoder};
use crate::meta::MetaModel;
use crate::params::ParamTree;
use crate::tasks::Example;

fn wrap<E: std::fmt::Display>(op: &'static str) -> impl Fn(E) -> AutodiffError {
    move |e| AutodiffError::InvalidArgument { op, msg: e.to_string() }
}

/// Two-layer encoder small enough for exhaustive central differences.
pub fn toy_encoder_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        model_dim: 8,
        ff_dim: 12,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 8,
        dropout: 0.0,
    }
}

/// Replaces every tensor with values of order `scale` so that no gradient
/// is vanishingly small; norm gains stay near one.
pub fn perturbed(tree: &ParamTree, scale: f64, seed: u64) -> ParamTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tree.clone();
    for i in 0..out.len() {
        let name = out.entry(i).name.clone();
        let shape = out.entry(i).tensor.shape().to_vec();
        let mut t = random_tensor(&shape, scale, &mut rng);
        if name.ends_with(".gain") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        *out.tensor_mut(i) = t;
    }
    out
}

/// Key biases add the same score to every key of a query, so softmax
/// cancels them and their exact gradient is zero; a finite difference then
/// measures only round-off. They are held constant in the checks and
/// [`key_bias_gradient`] asserts the zero directly.
fn is_key_bias(name: &str) -> bool {
    name.ends_with("attn.k.bias")
}

fn checked_tensors(tree: &ParamTree) -> Vec<Tensor> {
    tree.entries()
        .iter()
        .filter(|e| !is_key_bias(&e.name))
        .map(|e| e.tensor.clone())
        .collect()
}

/// Leaves for checked entries, constants for key biases.
fn all_nodes(tp: &mut Tape, tree: &ParamTree, leaves: &[NodeId]) -> Vec<NodeId> {
    let mut it = leaves.iter();
    tree.entries()
        .iter()
        .map(|e| {
            if is_key_bias(&e.name) {
                tp.constant(e.tensor.clone())
            } else {
                *it.next().expect("one leaf per checked entry")
            }
        })
        .collect()
}

/// Largest absolute analytic gradient over the key biases of the toy
/// encoder; zero up to round-off.
pub fn key_bias_gradient(seed: u64) -> Result<f64, AutodiffError> {
    let enc = TextEncoder::new(toy_encoder_config()).map_err(wrap("encoder"))?;
    let tree = perturbed(&enc.init_params(seed), 0.5, seed ^ 0x11);
    let inputs = toy_inputs();
    let batch: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
    let mut tp = Tape::new();
    let nodes = tree.register(&mut tp, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = enc.forward(&mut tp, &tree, &nodes, &batch, false, &mut rng, false).map_err(wrap("encoder"))?;
    let loss = probe(&mut tp, out.cls, seed)?;
    let grads = tp.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, e) in tree.entries().iter().enumerate() {
        if is_key_bias(&e.name) {
            worst = grads.get(nodes[i]).data().iter().fold(worst, |m, v| m.max(v.abs()));
        }
    }
    Ok(worst)
}

fn toy_inputs() -> Vec<Vec<u32>> {
    vec![vec![4, 5, 6], vec![7, 3, 8, 9, 10], vec![11, 4]]
}

/// d(probe . CLS)/d(every encoder parameter) on the toy configuration.
pub fn encoder_check(seed: u64) -> Result<GradCheckReport, AutodiffError> {
    let enc = TextEncoder::new(toy_encoder_config()).map_err(wrap("encoder"))?;
    let tree = perturbed(&enc.init_params(seed), 0.5, seed ^ 0x11);
    let inputs = toy_inputs();
    check_gradients_with("encoder", &checked_tensors(&tree), MODEL_FD_STEP, Stencil::FivePoint, |tp, x| {
        let batch: Vec<&[u32]> = inputs.iter().map(|v| v.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes = all_nodes(tp, &tree, x);
        let out = enc.forward(tp, &tree, &nodes, &batch, false, &mut rng, false).map_err(wrap("encoder"))?;
        probe(tp, out.cls, seed)
    })
}

/// Query loss after head generation, differentiated with respect to every
/// parameter of a toy model (encoder, g_psi, h_phi).
pub fn generation_path_check(seed: u64) -> Result<GradCheckReport, AutodiffError> {
    let mut model = MetaModel::new(toy_encoder_config(), 4, seed).map_err(wrap("meta"))?;
    model.params = perturbed(&model.params, 0.5, seed ^ 0x22);
    let ex = |tokens: &[u32], label| Example { tokens: tokens.to_vec(), label, source: None };
    let support = vec![ex(&[4, 3, 5], 0), ex(&[5, 3, 4, 6], 0), ex(&[7, 3, 8], 1), ex(&[9, 8, 3], 1)];
    let query = vec![ex(&[4, 3, 6], 0), ex(&[3, 5, 10], 0), ex(&[8, 3, 7], 1), ex(&[11, 9, 3], 1)];
    check_gradients_with("generation_to_prediction", &checked_tensors(&model.params), MODEL_FD_STEP, Stencil::FivePoint, |tp, x| {
        let nodes = all_nodes(tp, &model.params, x);
        model.record_task_loss(tp, &nodes, &support, &query, 2).map_err(wrap("meta"))
    })
}

/// Three tanh layers on a batch of four.
pub fn mlp_check(seed: u64) -> Result<GradCheckReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [5, 6, 4, 3];
    let mut inputs = vec![random_tensor(&[4, dims[0]], 1.0, &mut rng)];
    for w in dims.windows(2) {
        inputs.push(random_tensor(&[w[0], w[1]], 0.8, &mut rng));
        inputs.push(random_tensor(&[w[1]], 0.3, &mut rng));
    }
    check_gradients("mlp3", &inputs, FD_STEP, |tp, x| {
        let mut h = x[0];
        for l in 0..3 {
            h = tp.matmul(h, x[1 + 2 * l])?;
            h = tp.add_row(h, x[2 + 2 * l])?;
            h = tp.tanh(h);
        }
        probe(tp, h, seed)
    })
}

/// Pre-norm attention block with a feed-forward sublayer over two segments.
pub fn attention_block_check(seed: u64) -> Result<GradCheckReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, dim, ff) = (5, 4, 6);
    let mut t = |shape: &[usize], s: f64| random_tensor(shape, s, &mut rng);
    let mut inputs = vec![t(&[rows, dim], 1.0)];
    for _ in 0..4 {
        inputs.push(t(&[dim, dim], 0.7));
    }
    let mut gain = t(&[dim], 0.2);
    gain.data_mut().iter_mut().for_each(|v| *v += 1.0);
    inputs.push(gain);
    inputs.push(t(&[dim], 0.2));
    inputs.push(t(&[dim, ff], 0.7));
    inputs.push(t(&[ff, dim], 0.7));
    let segments = vec![0..2, 2..rows];
    check_gradients("attention_block", &inputs, FD_STEP, |tp, x| {
        let h = tp.layer_norm(x[0], x[5], x[6], 1e-12)?;
        let q = tp.matmul(h, x[1])?;
        let k = tp.matmul(h, x[2])?;
        let v = tp.matmul(h, x[3])?;
        let a = tp.segment_attention::<ChaCha8Rng>(q, k, v, &segments, 2, None)?;
        let o = tp.matmul(a, x[4])?;
        let r = tp.add(x[0], o)?;
        let f = tp.matmul(r, x[7])?;
        let f = tp.gelu(f);
        let f = tp.matmul(f, x[8])?;
        let y = tp.add(r, f)?;
        probe(tp, y, seed)
    })
}

/// Every primitive followed by the composed checks.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>, AutodiffError> {
    let mut reports = primitive_suite(seed)?;
    reports.push(mlp_check(seed)?);
    reports.push(attention_block_check(seed)?);
    reports.push(encoder_check(seed)?);
    reports.push(generation_path_check(seed)?);
    Ok(reports)
}
