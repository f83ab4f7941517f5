//! Independent oracles for the first-order adaptation core, shared by the
//! unit-style tests and the acceptance run.
#![allow(dead_code)]

use smlmt_core::autodiff::{Tape, Tensor};
use smlmt_core::meta::{first_order_adapt, FirstOrderTask, MetaError, ValStep};

/// Linear softmax classifier over fixed features; the fast slots are W and b.
struct LinearSoftmax {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    batches: Vec<Vec<usize>>,
    val: Vec<usize>,
}

impl LinearSoftmax {
    fn loss_grad(&self, fast: &[Tensor], rows: &[usize]) -> (f64, Vec<Tensor>, Vec<usize>) {
        let f = self.features[0].len();
        let mut tape = Tape::new();
        let w = tape.leaf(fast[0].clone());
        let b = tape.leaf(fast[1].clone());
        let x: Vec<f64> = rows.iter().flat_map(|&r| self.features[r].clone()).collect();
        let x = tape.constant(Tensor::matrix(rows.len(), f, x).unwrap());
        let wt = tape.transpose(w).unwrap();
        let logits = tape.matmul(x, wt).unwrap();
        let logits = tape.add_row(logits, b).unwrap();
        let labels: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        (tape.value(loss).item(), vec![grads.get(w), grads.get(b)], labels)
    }
}

impl FirstOrderTask for LinearSoftmax {
    fn inner(&mut self, step: usize, fast: &[Tensor]) -> Result<(f64, Vec<Tensor>), MetaError> {
        let rows = self.batches[step].clone();
        let (l, g, _) = self.loss_grad(fast, &rows);
        Ok((l, g))
    }

    fn validate(&mut self, fast: &[Tensor]) -> Result<ValStep, MetaError> {
        let rows = self.val.clone();
        let (loss, slot_grads, _) = self.loss_grad(fast, &rows);
        Ok(ValStep { loss, accuracy: 0.0, slot_grads, outer_grads: vec![] })
    }
}

/// Straight-line SGD on softmax regression, written without the tape.
fn oracle_sgd(
    features: &[Vec<f64>],
    labels: &[usize],
    batches: &[Vec<usize>],
    mut w: Vec<Vec<f64>>,
    mut b: Vec<f64>,
    alpha: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_cls = b.len();
    for batch in batches {
        let mut gw = vec![vec![0.0; features[0].len()]; n_cls];
        let mut gb = vec![0.0; n_cls];
        for &r in batch {
            let z: Vec<f64> = (0..n_cls)
                .map(|c| w[c].iter().zip(&features[r]).map(|(a, x)| a * x).sum::<f64>() + b[c])
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..n_cls {
                let d = e[c] / s - if c == labels[r] { 1.0 } else { 0.0 };
                for (g, x) in gw[c].iter_mut().zip(&features[r]) {
                    *g += d * x / batch.len() as f64;
                }
                gb[c] += d / batch.len() as f64;
            }
        }
        for c in 0..n_cls {
            for (wv, g) in w[c].iter_mut().zip(&gw[c]) {
                *wv -= alpha * g;
            }
            b[c] -= alpha * gb[c];
        }
    }
    (w, b)
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// Largest deviation between seven tape-driven inner steps and plain SGD.
pub fn inner_loop_deviation() -> f64 {
    let mut s = 17u64;
    let (n, f, n_cls) = (12, 5, 3);
    let features: Vec<Vec<f64>> = (0..n).map(|_| (0..f).map(|_| lcg(&mut s)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % n_cls).collect();
    let batches: Vec<Vec<usize>> = (0..7).map(|st| (0..4).map(|j| (st * 4 + j) % n).collect()).collect();
    let w0: Vec<Vec<f64>> = (0..n_cls).map(|_| (0..f).map(|_| 0.3 * lcg(&mut s)).collect()).collect();
    let b0: Vec<f64> = (0..n_cls).map(|_| 0.1 * lcg(&mut s)).collect();
    let alpha = 0.7;

    let mut task = LinearSoftmax { features: features.clone(), labels: labels.clone(), batches: batches.clone(), val: (0..n).collect() };
    let init = vec![
        Tensor::matrix(n_cls, f, w0.concat()).unwrap(),
        Tensor::vector(b0.clone()).unwrap(),
    ];
    let out = first_order_adapt(&mut task, init, &[0, 0], &[alpha], 7).unwrap();
    let (w, b) = oracle_sgd(&features, &labels, &batches, w0, b0, alpha);
    assert_eq!(out.inner_losses.len(), 7);
    let dw = out.fast[0].data().iter().zip(w.concat()).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
    let db = out.fast[1].data().iter().zip(&b).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
    dw.max(db)
}

/// Scalar fast weight `t`, outer-only scale `w`:
/// inner loss (w t - a)^2 / 2, validation loss (w t - c)^2 / 2.
struct Quadratic {
    w: f64,
    a: f64,
    c: f64,
}

impl FirstOrderTask for Quadratic {
    fn inner(&mut self, _step: usize, fast: &[Tensor]) -> Result<(f64, Vec<Tensor>), MetaError> {
        let (l, gt, _) = self.eval(fast[0].item(), self.a);
        Ok((l, vec![Tensor::scalar(gt)]))
    }

    fn validate(&mut self, fast: &[Tensor]) -> Result<ValStep, MetaError> {
        let (loss, gt, gw) = self.eval(fast[0].item(), self.c);
        Ok(ValStep { loss, accuracy: 0.0, slot_grads: vec![Tensor::scalar(gt)], outer_grads: vec![Tensor::scalar(gw)] })
    }
}

impl Quadratic {
    /// Loss and gradients through the tape.
    fn eval(&self, t: f64, target: f64) -> (f64, f64, f64) {
        let mut tape = Tape::new();
        let tn = tape.leaf(Tensor::scalar(t));
        let wn = tape.leaf(Tensor::scalar(self.w));
        let p = tape.mul(wn, tn).unwrap();
        let neg = tape.constant(Tensor::scalar(-target));
        let r = tape.add(p, neg).unwrap();
        let sq = tape.mul(r, r).unwrap();
        let loss = tape.scale(sq, 0.5);
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).item(), g.get(tn).item(), g.get(wn).item())
    }
}



/// Largest deviation of the first-order outer update from a hand
/// derivation, over the fast weight, the outer weight and the step size.
pub fn outer_update_deviation() -> f64 {
    let (t0, w, a, c, alpha, beta) = (0.8, 1.3, -0.4, 0.25, 0.15, 0.05);
    let mut task = Quadratic { w, a, c };
    let out = first_order_adapt(&mut task, vec![Tensor::scalar(t0)], &[0], &[alpha], 2).unwrap();

    // Hand derivation for G = 2.
    let g0 = w * (w * t0 - a);
    let t1 = t0 - alpha * g0;
    let r1 = w * t1 - c;
    let g1 = w * (w * t1 - a);
    let t2 = t1 - alpha * g1;
    let r2 = w * t2 - c;
    let grad_t0 = w * r1 + w * r2;
    let grad_w = t1 * r1 + t2 * r2;
    let grad_alpha = -(w * r1) * g0 - (w * r2) * (g0 + g1);
    let g = 2.0;
    let expected = [t0 - beta * grad_t0 / g, w - beta * grad_w / g, alpha - beta * grad_alpha / g];

    let got = [
        t0 - beta * out.slot_grads[0].item() / g,
        w - beta * out.outer_grads[0].item() / g,
        alpha - beta * out.alpha_grads[0] / g,
    ];
    assert!((out.fast[0].item() - t2).abs() < 1e-12);
    assert!((out.val_losses[1] - 0.5 * r2 * r2).abs() < 1e-12);
    expected.iter().zip(&got).map(|(e, x)| (e - x).abs()).fold(0.0, f64::max)
}
