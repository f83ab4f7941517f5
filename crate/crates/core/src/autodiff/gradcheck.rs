//! Central finite-difference gradient checks.
//!
//! The numerical side only evaluates forward values, so it stays independent
//! of every backward rule it checks.

use super::{AutodiffError, NodeId, Tape, Tensor};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Step used with the five-point stencil on whole-model graphs.
pub const MODEL_FD_STEP: f64 = 1e-3;
/// Default pass threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// max |analytic - numeric| / (|numeric| + 1e-8) over all checked entries.
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of every input.
///
/// `f` builds a scalar-valued graph on a fresh tape from leaves holding the
/// given inputs. It must be deterministic.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor],
    step: f64,
    f: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    check_gradients_with(name, inputs, step, Stencil::ThreePoint, f)
}

/// Central-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    ThreePoint,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`; truncation error
    /// O(h^4), so a larger `h` keeps round-off small on deep graphs whose
    /// gradients span many orders of magnitude.
    FivePoint,
}

pub fn check_gradients_with<F>(
    name: &str,
    inputs: &[Tensor],
    step: f64,
    stencil: Stencil,
    f: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let mut at = |d: f64| -> Result<f64, AutodiffError> {
                probe[i].data_mut()[j] = orig + d;
                let v = eval(&probe);
                probe[i].data_mut()[j] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::FivePoint => {
                    (at(-2.0 * step)? - 8.0 * at(-step)? + 8.0 * at(step)? - at(2.0 * step)?) / (12.0 * step)
                }
            };
            let rel = (analytic.data()[j] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        entries,
    })
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor<R: rand::Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

/// Reduces `out` to a scalar by a fixed random projection, so every output
/// entry contributes a distinct weight to the checked gradient.
pub fn probe(tape: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId, AutodiffError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let weights = random_tensor(tape.value(out).shape(), 1.0, &mut rng);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Checks every primitive on small random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckReport>, AutodiffError> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| random_tensor(shape, 1.0, &mut rng);
    let h = FD_STEP;
    let mut reports = Vec::new();

    reports.push(check_gradients("matmul", &[t(&[3, 4]), t(&[4, 2])], h, |tp, x| {
        let y = tp.matmul(x[0], x[1])?;
        probe(tp, y, 1)
    })?);
    reports.push(check_gradients("transpose", &[t(&[3, 4])], h, |tp, x| {
        let y = tp.transpose(x[0])?;
        probe(tp, y, 2)
    })?);
    reports.push(check_gradients("add", &[t(&[2, 3]), t(&[2, 3])], h, |tp, x| {
        let y = tp.add(x[0], x[1])?;
        probe(tp, y, 3)
    })?);
    reports.push(check_gradients("add_row", &[t(&[4, 3]), t(&[3])], h, |tp, x| {
        let y = tp.add_row(x[0], x[1])?;
        probe(tp, y, 4)
    })?);
    reports.push(check_gradients("mul", &[t(&[2, 3]), t(&[2, 3])], h, |tp, x| {
        let y = tp.mul(x[0], x[1])?;
        probe(tp, y, 5)
    })?);
    reports.push(check_gradients("scale", &[t(&[5])], h, |tp, x| {
        let y = tp.scale(x[0], -1.7);
        probe(tp, y, 6)
    })?);
    reports.push(check_gradients("concat", &[t(&[2, 3]), t(&[4, 3]), t(&[2, 2])], h, |tp, x| {
        let rows = tp.concat(&[x[0], x[1]], 0)?;
        let cols = tp.concat(&[x[0], x[2]], 1)?;
        let a = probe(tp, rows, 7)?;
        let b = probe(tp, cols, 8)?;
        tp.add(a, b)
    })?);
    reports.push(check_gradients("slice", &[t(&[3, 5])], h, |tp, x| {
        let a = tp.slice(x[0], 1, 1, 4)?;
        let b = tp.slice(x[0], 0, 2, 3)?;
        let pa = probe(tp, a, 9)?;
        let pb = probe(tp, b, 10)?;
        tp.add(pa, pb)
    })?);
    reports.push(check_gradients("reshape", &[t(&[2, 6])], h, |tp, x| {
        let y = tp.reshape(x[0], &[3, 4])?;
        probe(tp, y, 11)
    })?);
    reports.push(check_gradients("sum", &[t(&[4])], h, |tp, x| {
        let sq = tp.mul(x[0], x[0])?;
        Ok(tp.sum(sq))
    })?);
    reports.push(check_gradients("mean_over_axis", &[t(&[3, 4])], h, |tp, x| {
        let a = tp.mean_over_axis(x[0], 0)?;
        let b = tp.mean_over_axis(x[0], 1)?;
        let pa = probe(tp, a, 12)?;
        let pb = probe(tp, b, 13)?;
        tp.add(pa, pb)
    })?);
    reports.push(check_gradients("softmax", &[t(&[3, 4])], h, |tp, x| {
        let y = tp.softmax(x[0]);
        probe(tp, y, 14)
    })?);
    reports.push(check_gradients("log_softmax", &[t(&[3, 4])], h, |tp, x| {
        let y = tp.log_softmax(x[0]);
        probe(tp, y, 15)
    })?);
    reports.push(check_gradients("cross_entropy", &[t(&[3, 4])], h, |tp, x| {
        tp.cross_entropy(x[0], &[2, 0, 3])
    })?);
    reports.push(check_gradients("layer_norm", &[t(&[3, 5]), t(&[5]), t(&[5])], h, |tp, x| {
        let y = tp.layer_norm(x[0], x[1], x[2], 1e-12)?;
        probe(tp, y, 16)
    })?);
    reports.push(check_gradients("tanh", &[t(&[2, 3])], h, |tp, x| {
        let y = tp.tanh(x[0]);
        probe(tp, y, 17)
    })?);
    reports.push(check_gradients("gelu", &[t(&[2, 4])], h, |tp, x| {
        let y = tp.gelu(x[0]);
        probe(tp, y, 18)
    })?);
    reports.push(check_gradients("embedding_lookup", &[t(&[5, 3])], h, |tp, x| {
        let y = tp.embedding_lookup(x[0], &[0, 2, 2, 4])?;
        probe(tp, y, 19)
    })?);
    reports.push(check_gradients("masked_fill", &[t(&[2, 3])], h, |tp, x| {
        let y = tp.masked_fill(x[0], &[true, false, false, true, false, true], 0.5)?;
        probe(tp, y, 20)
    })?);
    reports.push(check_gradients("dropout", &[t(&[3, 4])], h, |tp, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y = tp.dropout(x[0], 0.3, &mut rng);
        probe(tp, y, 22)
    })?);
    let segments = [0..2, 2..5];
    reports.push(check_gradients("segment_attention", &[t(&[5, 4]), t(&[5, 4]), t(&[5, 4])], h, |tp, x| {
        let y = tp.segment_attention::<ChaCha8Rng>(x[0], x[1], x[2], &segments, 2, None)?;
        probe(tp, y, 23)
    })?);
    reports.push(check_gradients("segment_attention_dropout", &[t(&[5, 4]), t(&[5, 4]), t(&[5, 4])], h, |tp, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let y = tp.segment_attention(x[0], x[1], x[2], &segments, 2, Some((0.2, &mut rng)))?;
        probe(tp, y, 25)
    })?);
    Ok(reports)
}
