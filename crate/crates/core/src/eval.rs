//! k-shot evaluation: repeated support draws from a labeled pool, head
//! generation plus fine-tuning, accuracy on a fixed test split.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{TokenId, TokenTable};
use crate::meta::{argmax, AdaptedState, MetaError, MetaModel};
use crate::tasks::Example;

/// Paper-protocol support sizes.
pub const DEFAULT_K: [usize; 4] = [4, 8, 16, 32];
pub const DEFAULT_DRAWS: usize = 10;
pub const DEFAULT_EPOCH_GRID: [usize; 4] = [5, 10, 50, 100];
pub const DEFAULT_BATCH_GRID: [usize; 2] = [4, 8];
/// Test inputs scored per forward pass.
const SCORE_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task {task}: class {class:?} has {have} pool examples, {need} needed")]
    InsufficientPool { task: String, class: String, have: usize, need: usize },
    #[error("task {task}: {msg}")]
    Invalid { task: String, msg: String },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Labeled pool for support draws plus a held-out test split.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTask {
    pub name: String,
    pub classes: Vec<String>,
    /// Pool sequences per class, indexed like `classes`.
    pub pool: Vec<Vec<Vec<TokenId>>>,
    pub test: Vec<(Vec<TokenId>, usize)>,
}

impl TargetTask {
    /// Checks class coverage and that no pool sequence appears in the test
    /// split.
    pub fn new(
        name: impl Into<String>,
        classes: Vec<String>,
        pool: Vec<Vec<Vec<TokenId>>>,
        test: Vec<(Vec<TokenId>, usize)>,
    ) -> Result<Self, EvalError> {
        let name = name.into();
        let invalid = |msg: String| EvalError::Invalid { task: name.clone(), msg };
        if classes.len() < 2 || pool.len() != classes.len() {
            return Err(invalid(format!("{} classes with {} pools", classes.len(), pool.len())));
        }
        if test.is_empty() {
            return Err(invalid("empty test split".into()));
        }
        if let Some((_, l)) = test.iter().find(|(_, l)| *l >= classes.len()) {
            return Err(invalid(format!("test label {l} out of range")));
        }
        let test_set: HashSet<&[TokenId]> = test.iter().map(|(t, _)| t.as_slice()).collect();
        if pool.iter().flatten().any(|s| test_set.contains(s.as_slice())) {
            return Err(invalid("a pool sequence also appears in the test split".into()));
        }
        Ok(Self { name, classes, pool, test })
    }

    /// Smallest per-class pool size.
    pub fn max_k(&self) -> usize {
        self.pool.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// `k` distinct pool examples per class, determined by `seed`.
    pub fn draw_support(&self, k: usize, seed: u64) -> Result<Vec<Example>, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(k * self.classes.len());
        for (label, members) in self.pool.iter().enumerate() {
            if members.len() < k {
                return Err(EvalError::InsufficientPool {
                    task: self.name.clone(),
                    class: self.classes[label].clone(),
                    have: members.len(),
                    need: k,
                });
            }
            for i in index::sample(&mut rng, members.len(), k) {
                out.push(Example { tokens: members[i].clone(), label, source: Some(i as u32) });
            }
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct TargetLine {
    text: String,
    label: String,
    split: String,
}

/// Reads a target task from JSON Lines `{"text", "label", "split"}` where
/// split is `pool` or `test`. Classes are ordered by name.
pub fn parse_target_task<R: BufRead>(reader: R, name: &str, table: &TokenTable) -> Result<TargetTask, EvalError> {
    let mut pool: BTreeMap<String, Vec<Vec<TokenId>>> = BTreeMap::new();
    let mut test_raw: Vec<(Vec<TokenId>, String)> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| EvalError::Malformed { path: name.to_string(), line: n + 1, msg };
        let rec: TargetLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let tokens = table.encode(&rec.text);
        if tokens.is_empty() {
            return Err(malformed("text has no tokens".into()));
        }
        match rec.split.as_str() {
            "pool" => pool.entry(rec.label).or_default().push(tokens),
            "test" => test_raw.push((tokens, rec.label)),
            other => return Err(malformed(format!("split must be pool or test, got {other:?}"))),
        }
    }
    let classes: Vec<String> = pool.keys().cloned().collect();
    let mut test = Vec::with_capacity(test_raw.len());
    for (tokens, label) in test_raw {
        let l = classes.iter().position(|c| *c == label).ok_or_else(|| EvalError::Invalid {
            task: name.to_string(),
            msg: format!("test label {label:?} has no pool examples"),
        })?;
        test.push((tokens, l));
    }
    TargetTask::new(name, classes, pool.into_values().collect(), test)
}

/// Fine-tuning settings for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Also adapt warp parameters at test time.
    pub adapt_warp: bool,
}

/// Accuracy after generating a head from a `k`-shot draw and fine-tuning
/// on it for `epochs` passes of shuffled mini-batches.
pub fn finetune_and_test(model: &MetaModel, task: &TargetTask, k: usize, ft: &FinetuneConfig, seed: u64) -> Result<f64, EvalError> {
    let state = finetune(model, task, k, ft, seed)?;
    let mut correct = 0usize;
    for chunk in task.test.chunks(SCORE_CHUNK) {
        let inputs: Vec<&[TokenId]> = chunk.iter().map(|(t, _)| t.as_slice()).collect();
        let probs = model.predict(&state, &inputs)?;
        correct += probs.iter().zip(chunk).filter(|(p, (_, l))| argmax(p) == *l).count();
    }
    Ok(correct as f64 / task.test.len() as f64)
}

/// Fast weights after generating a head from a `k`-shot draw and
/// fine-tuning on it.
pub fn finetune(model: &MetaModel, task: &TargetTask, k: usize, ft: &FinetuneConfig, seed: u64) -> Result<AdaptedState, EvalError> {
    if ft.batch_size == 0 {
        return Err(EvalError::Invalid { task: task.name.clone(), msg: "batch size must be positive".into() });
    }
    let support = task.draw_support(k, seed)?;
    let test_set: HashSet<&[TokenId]> = task.test.iter().map(|(t, _)| t.as_slice()).collect();
    assert!(support.iter().all(|e| !test_set.contains(e.tokens.as_slice())), "support overlaps test split");

    let n_way = task.classes.len();
    let (w, b) = model.generate_softmax(&support, n_way)?;
    let mut state = model.initial_state(w, b, ft.adapt_warp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0f1e_2d3c_4b5a_6978);
    let mut order: Vec<usize> = (0..support.len()).collect();
    for _ in 0..ft.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(ft.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &support[i]).collect();
            model.inner_adapt(&mut state, &batch, true, &mut rng)?;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawResult {
    pub task: String,
    pub k: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub task: String,
    pub k: usize,
    pub mean: f64,
    /// Population standard deviation over the draws.
    pub std: f64,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub draws: Vec<DrawResult>,
    pub summaries: Vec<Summary>,
    pub finetune: FinetuneConfig,
    pub seeds: Vec<u64>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Draw seeds shared by every (task, k) pair.
pub fn draw_seeds(base_seed: u64, draws: usize) -> Vec<u64> {
    (0..draws as u64).map(|i| base_seed.wrapping_add(i)).collect()
}

/// Runs `draws` fine-tuning draws for every task and every `k`, on up to
/// `workers` threads. Results do not depend on the worker count.
pub fn evaluate(
    model: &MetaModel,
    tasks: &[TargetTask],
    k_list: &[usize],
    draws: usize,
    ft: &FinetuneConfig,
    base_seed: u64,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    if draws == 0 || k_list.is_empty() {
        return Err(EvalError::Invalid { task: "*".into(), msg: "need at least one draw and one k".into() });
    }
    let seeds = draw_seeds(base_seed, draws);
    let jobs: Vec<(usize, usize, u64)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(t, _)| {
            let seeds = &seeds;
            k_list.iter().flat_map(move |&k| seeds.iter().map(move |&s| (t, k, s)))
        })
        .collect();
    let run = |&(t, k, s): &(usize, usize, u64)| finetune_and_test(model, &tasks[t], k, ft, s);
    let accs: Vec<Result<f64, EvalError>> = if workers <= 1 || jobs.len() < 2 {
        jobs.iter().map(run).collect()
    } else {
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.chunks(chunk).map(|c| scope.spawn(move || c.iter().map(run).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut results = Vec::with_capacity(jobs.len());
    for (&(t, k, s), acc) in jobs.iter().zip(accs) {
        results.push(DrawResult { task: tasks[t].name.clone(), k, seed: s, accuracy: acc? });
    }
    let summaries = results
        .chunks(draws)
        .map(|c| {
            let accs: Vec<f64> = c.iter().map(|d| d.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            Summary { task: c[0].task.clone(), k: c[0].k, mean, std, draws: c.len() }
        })
        .collect();
    Ok(EvalReport { draws: results, summaries, finetune: *ft, seeds })
}

pub fn write_draws_csv<W: Write>(mut w: W, reports: &[EvalReport]) -> io::Result<()> {
    writeln!(w, "task,k,draw_seed,accuracy")?;
    for d in reports.iter().flat_map(|r| &r.draws) {
        writeln!(w, "{},{},{},{}", d.task, d.k, d.seed, d.accuracy)?;
    }
    Ok(())
}

/// One row per (task, k) with the fine-tuning cell that produced it.
pub fn write_summary_csv<W: Write>(mut w: W, reports: &[EvalReport]) -> io::Result<()> {
    writeln!(w, "task,k,mean,std,draws,epochs,batch_size")?;
    for r in reports {
        for s in &r.summaries {
            writeln!(w, "{},{},{},{},{},{},{}", s.task, s.k, s.mean, s.std, s.draws, r.finetune.epochs, r.finetune.batch_size)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub epochs: usize,
    pub batch_size: usize,
    /// Every cell as (epochs, batch_size, mean validation accuracy).
    pub cells: Vec<(usize, usize, f64)>,
}

/// Picks the (epochs, batch size) cell with the highest mean validation
/// accuracy over `draws` draws of every task; ties go to fewer epochs, then
/// to the smaller batch.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    model: &MetaModel,
    tasks: &[TargetTask],
    epochs_grid: &[usize],
    batch_grid: &[usize],
    k: usize,
    draws: usize,
    base_seed: u64,
    adapt_warp: bool,
    workers: usize,
) -> Result<GridResult, EvalError> {
    if epochs_grid.is_empty() || batch_grid.is_empty() {
        return Err(EvalError::Invalid { task: "*".into(), msg: "empty search grid".into() });
    }
    let mut epochs: Vec<usize> = epochs_grid.to_vec();
    let mut batches: Vec<usize> = batch_grid.to_vec();
    epochs.sort_unstable();
    epochs.dedup();
    batches.sort_unstable();
    batches.dedup();
    let mut cells = Vec::new();
    let mut best: Option<(usize, usize, f64)> = None;
    for &e in &epochs {
        for &b in &batches {
            let ft = FinetuneConfig { epochs: e, batch_size: b, adapt_warp };
            let report = evaluate(model, tasks, &[k], draws, &ft, base_seed, workers)?;
            let accs: Vec<f64> = report.draws.iter().map(|d| d.accuracy).collect();
            let mean = mean_std(&accs).0;
            cells.push((e, b, mean));
            if best.is_none_or(|(_, _, m)| mean > m) {
                best = Some((e, b, mean));
            }
        }
    }
    let (e, b, _) = best.expect("non-empty grid");
    Ok(GridResult { epochs: e, batch_size: b, cells })
}
