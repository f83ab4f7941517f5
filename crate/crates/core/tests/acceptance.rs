//! End-to-end acceptance run. Prints one PASS or FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use smlmt_core::analysis::{cca_similarity, finetune_cca, lr_trajectories, write_cca_csv, RepresentationMatrix, DEFAULT_CCA_REG};
use smlmt_core::autodiff::gradcheck::FD_TOLERANCE;
use smlmt_core::checkpoint::write_checkpoint;
use smlmt_core::corpus::{build_index, build_index_range, ingest_corpus, PipelineConfig, SentenceStore, TokenId, VocabIndex};
use smlmt_core::diagnostics::gradient_suite;
use smlmt_core::encoder::EncoderConfig;
use smlmt_core::eval::{evaluate, grid_search, parse_target_task, write_draws_csv, write_summary_csv, FinetuneConfig, TargetTask};
use smlmt_core::meta::{write_log_header, write_log_row, MetaModel, MetaTrainConfig, MetaTrainer};
use smlmt_core::synthetic::{planted_corpus, supervised_fixture, to_jsonl, topic_task, PlantedConfig, TopicTaskConfig};
use smlmt_core::tasks::{episode_rng, parse_supervised, smlmt_from_words, Provenance, QuerySize, SamplerConfig, SupportSize, TaskSampler};

type Outcome = Result<(bool, String), String>;
type Check = (&'static str, fn() -> Outcome);

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Fixture {
    store: SentenceStore,
    index: VocabIndex,
    held: VocabIndex,
    heldout: Vec<TokenId>,
}

/// Planted corpus: training targets index the training sentences, held-out
/// targets only appear after them.
fn fixture() -> Fixture {
    let corpus = planted_corpus(&PlantedConfig::default());
    let store = ingest_corpus(corpus.text().as_bytes(), &PipelineConfig::default()).unwrap();
    let index = build_index_range(&store, 0..corpus.train_sentences, 10).unwrap();
    let held = build_index_range(&store, corpus.train_sentences..store.len(), 10).unwrap();
    let heldout = corpus.heldout_targets.iter().map(|w| store.token_table().id(w).unwrap()).collect();
    Fixture { store, index, held, heldout }
}

fn smlmt_config(seed: u64) -> SamplerConfig {
    SamplerConfig {
        lambda_mix: 1.0,
        support: SupportSize::PerClass(5),
        query: QuerySize::PerClass(5),
        seed,
        ..Default::default()
    }
}

fn toy_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig { vocab_size: vocab, model_dim: 8, ff_dim: 16, n_layers: 2, n_heads: 2, max_seq_len: 32, dropout: 0.1 }
}

fn topic(store: &SentenceStore) -> TargetTask {
    let text = to_jsonl(&topic_task(&TopicTaskConfig::default()), true);
    parse_target_task(text.as_bytes(), "topic", store.token_table()).unwrap()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports = gradient_suite(5).map_err(err)?;
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ok = reports.iter().all(|r| r.passed(FD_TOLERANCE)) && secs < 60.0;
    Ok((ok, format!("{} graphs, worst {} {:.2e}, {secs:.1}s", reports.len(), worst.name, worst.max_rel_error)))
}

fn episode_invariants() -> Outcome {
    let t = Instant::now();
    let corpus = planted_corpus(&PlantedConfig::default());
    let store = ingest_corpus(corpus.train_text().as_bytes(), &PipelineConfig::default()).map_err(err)?;
    let index = build_index(&store, 10).map_err(err)?;
    let scfg = smlmt_config(2024);
    let sampler = TaskSampler::new(&store, &index, &[], &scfg).map_err(err)?;
    let mut counts = [vec![0u64; 2], vec![0u64; 3], vec![0u64; 4]];
    for i in 0..1000 {
        let ep = sampler.episode(i).map_err(err)?;
        if let Err(v) = ep.check_invariants(store.mask_id()) {
            return Ok((false, format!("episode {i}: {v}")));
        }
        let first = ep.secret_words.as_ref().unwrap()[0];
        let label = ep.support.iter().find(|e| index.contains(first, e.source.unwrap())).map(|e| e.label).unwrap();
        counts[ep.n_way - 2][label] += 1;
    }
    let mut p_min: f64 = 1.0;
    for c in &counts {
        let total: u64 = c.iter().sum();
        let e = total as f64 / c.len() as f64;
        let stat: f64 = c.iter().map(|&x| (x as f64 - e).powi(2) / e).sum();
        p_min = p_min.min(1.0 - ChiSquared::new((c.len() - 1) as f64).unwrap().cdf(stat));
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((p_min > 0.01 && secs < 60.0, format!("1000 episodes, min chi-square p {p_min:.3}, {secs:.1}s")))
}

fn oracles() -> Outcome {
    let inner = common::inner_loop_deviation();
    let outer = common::outer_update_deviation();
    Ok((inner < 1e-10 && outer < 1e-8, format!("inner {inner:.1e}, outer {outer:.1e}")))
}

fn warp_contract() -> Outcome {
    let f = fixture();
    let mut trainer = MetaTrainer::new(MetaModel::new(toy_encoder(f.store.vocab_size()), 4, 3).map_err(err)?);
    let warp: Vec<usize> = (0..trainer.model.params.len()).filter(|&i| trainer.model.params.entry(i).is_warp).collect();
    let snapshot = |t: &MetaTrainer| -> Vec<Vec<u64>> {
        warp.iter().map(|&i| t.model.params.entry(i).tensor.data().iter().map(|x| x.to_bits()).collect()).collect()
    };
    let cfg = MetaTrainConfig { episodes_per_epoch: 4, warmup_fraction: 0.0, ..Default::default() };
    let mut changed = 0;
    for batch in 0..25u64 {
        let scfg = smlmt_config(100 + batch);
        let sampler = TaskSampler::new(&f.store, &f.index, &[], &scfg).map_err(err)?;
        let before = snapshot(&trainer);
        for i in 0..4 {
            let ep = sampler.episode(i).map_err(err)?;
            trainer.model.episode_gradient(&ep, 7, None, &mut episode_rng(batch, i)).map_err(err)?;
            let (state, _) = trainer.model.adapt_and_score(&ep, 7, None, i).map_err(err)?;
            if warp.iter().any(|&w| state.fast(w).is_some()) || snapshot(&trainer) != before {
                return Ok((false, format!("inner loop touched a warp tensor in batch {batch}")));
            }
        }
        trainer.train(&sampler, &cfg, |_| Ok(())).map_err(err)?;
        if snapshot(&trainer) != before {
            changed += 1;
        }
    }
    Ok((changed >= 1, format!("100 episodes, warp changed by {changed}/25 outer updates")))
}

fn hybrid_mixing() -> Outcome {
    let f = fixture();
    let cfg = SamplerConfig { lambda_mix: 0.5, ..smlmt_config(77) };
    let text = to_jsonl(&supervised_fixture(), false);
    let set = parse_supervised(text.as_bytes(), "fixture", f.store.token_table(), cfg.max_class_demand()).map_err(err)?;
    let sets = [set];
    let sampler = TaskSampler::new(&f.store, &f.index, &sets, &cfg).map_err(err)?;
    let mut smlmt = 0;
    for i in 0..10_000 {
        if sampler.episode(i).map_err(err)?.provenance == Provenance::Smlmt {
            smlmt += 1;
        }
    }
    let frac = smlmt as f64 / 1e4;
    Ok(((0.487..=0.513).contains(&frac), format!("SMLMT fraction {frac:.4}")))
}

/// Correct query predictions and query count per N over held-out words.
fn heldout_accuracy(model: &MetaModel, f: &Fixture) -> Result<Vec<(usize, u64, u64)>, String> {
    let mut rng = episode_rng(99, 0);
    let mut out = Vec::new();
    for n in [2, 3, 4] {
        let (mut correct, mut total) = (0u64, 0u64);
        for i in 0..100 {
            let words: Vec<TokenId> = index::sample(&mut rng, f.heldout.len(), n).into_iter().map(|j| f.heldout[j]).collect();
            let ep = smlmt_from_words(&words, &f.held, &f.store, 5, 5, &mut rng).ok_or("held-out words too rare")?;
            let (_, s) = model.adapt_and_score(&ep, 7, None, i).map_err(err)?;
            correct += (s.accuracy * ep.query.len() as f64).round() as u64;
            total += ep.query.len() as u64;
        }
        out.push((n, correct, total));
    }
    Ok(out)
}

fn desk_learning() -> Outcome {
    let t = Instant::now();
    let f = fixture();
    let scfg = smlmt_config(1);
    let sampler = TaskSampler::new(&f.store, &f.index, &[], &scfg).map_err(err)?;
    let model = MetaModel::new(EncoderConfig::desk(f.store.vocab_size()), 32, 3).map_err(err)?;
    let mut trainer = MetaTrainer::new(model);
    let cfg = MetaTrainConfig { episodes_per_epoch: 2000, ..Default::default() };
    trainer.train(&sampler, &cfg, |_| Ok(())).map_err(err)?;
    let train_secs = t.elapsed().as_secs_f64();

    let mut held_ok = true;
    let mut parts = Vec::new();
    for (n, correct, total) in heldout_accuracy(&trainer.model, &f)? {
        let p = if correct == 0 { 1.0 } else { Binomial::new(1.0 / n as f64, total).unwrap().sf(correct - 1) };
        held_ok &= p < 0.01;
        parts.push(format!("{n}-way {:.3} (p {p:.1e})", correct as f64 / total as f64));
    }

    let task = [topic(&f.store)];
    let grid = grid_search(&trainer.model, &task, &[5, 10, 50, 100], &[4, 8], 16, 3, 0x9d1d, false, 1).map_err(err)?;
    let ft = FinetuneConfig { epochs: grid.epochs, batch_size: grid.batch_size, adapt_warp: false };
    let report = evaluate(&trainer.model, &task, &[16], 10, &ft, 0, 1).map_err(err)?;
    let acc = report.summaries[0].mean;
    let secs = t.elapsed().as_secs_f64();
    Ok((
        held_ok && acc >= 0.95 && secs < 1800.0,
        format!(
            "held-out {}; target k=16 {acc:.3} at {}x{}; train {train_secs:.0}s, total {secs:.0}s",
            parts.join(", "),
            grid.epochs,
            grid.batch_size
        ),
    ))
}

fn eval_protocol() -> Outcome {
    let f = fixture();
    let model = MetaModel::new(toy_encoder(f.store.vocab_size()), 4, 9).map_err(err)?;
    let task = [topic(&f.store)];
    let ft = FinetuneConfig { epochs: 1, batch_size: 8, adapt_warp: false };
    let r = evaluate(&model, &task, &[4, 8, 16, 32], 10, &ft, 4, 2).map_err(err)?;
    let mut ok = r.draws.len() == 40 && r.summaries.len() == 4;
    for (s, k) in r.summaries.iter().zip([4, 8, 16, 32]) {
        let accs: Vec<f64> = r.draws.iter().filter(|d| d.k == k).map(|d| d.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
        ok &= s.k == k && s.draws == 10 && accs.len() == 10 && (s.mean - mean).abs() < 1e-12 && (s.std - std).abs() < 1e-12;
    }
    let mut draws = Vec::new();
    let mut summary = Vec::new();
    write_draws_csv(&mut draws, std::slice::from_ref(&r)).map_err(err)?;
    write_summary_csv(&mut summary, std::slice::from_ref(&r)).map_err(err)?;
    let summary = String::from_utf8(summary).map_err(err)?;
    ok &= draws.iter().filter(|&&b| b == b'\n').count() == 41;
    ok &= summary.lines().next() == Some("task,k,mean,std,draws,epochs,batch_size") && summary.lines().count() == 5;
    Ok((ok, format!("{} draws, {} summaries with mean and std", r.draws.len(), r.summaries.len())))
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

fn cca_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, p) = (500, 16);
    let a = RepresentationMatrix::new(n, p, gaussian(n, p, &mut rng), 0, "a").map_err(err)?;
    let m = gaussian(p, p, &mut rng);
    let shift = gaussian(1, p, &mut rng);
    let t: Vec<f64> = (0..n * p)
        .map(|i| {
            let (r, c) = (i / p, i % p);
            (0..p).map(|j| 3.0 * a.data[r * p + j] * m[j * p + c]).sum::<f64>() + shift[c]
        })
        .collect();
    let b = RepresentationMatrix::new(n, p, t, 0, "b").map_err(err)?;
    let g = RepresentationMatrix::new(n, p, gaussian(n, p, &mut rng), 0, "g").map_err(err)?;
    let own = cca_similarity(&a, &a, DEFAULT_CCA_REG).map_err(err)?;
    let affine = cca_similarity(&a, &b, DEFAULT_CCA_REG).map_err(err)?;
    let null = cca_similarity(&a, &g, DEFAULT_CCA_REG).map_err(err)?;
    let ok = (own - 1.0).abs() <= 1e-6 && (affine - 1.0).abs() <= 1e-5 && null < 0.35;
    Ok((ok, format!("self {own:.9}, affine {affine:.7}, null {null:.3}")))
}

/// Every output of one small pipeline run, as bytes.
fn pipeline_bytes(workers: usize) -> Result<Vec<Vec<u8>>, String> {
    let f = fixture();
    let scfg = smlmt_config(42);
    let sampler = TaskSampler::new(&f.store, &f.index, &[], &scfg).map_err(err)?;
    let episodes: Vec<u8> = sampler
        .generate(200, workers)
        .into_iter()
        .map(|e| e.map(|e| e.to_json(true) + "\n"))
        .collect::<Result<String, _>>()
        .map_err(err)?
        .into_bytes();

    let mut trainer = MetaTrainer::new(MetaModel::new(toy_encoder(f.store.vocab_size()), 4, 42).map_err(err)?);
    let cfg = MetaTrainConfig { episodes_per_epoch: 24, workers, seed: 42, ..Default::default() };
    let mut log = Vec::new();
    write_log_header(&mut log, trainer.model.lrs.groups()).map_err(err)?;
    trainer.train(&sampler, &cfg, |r| write_log_row(&mut log, r)).map_err(err)?;
    let mut ckpt = Vec::new();
    write_checkpoint(&mut ckpt, &trainer).map_err(err)?;

    let task = [topic(&f.store)];
    let ft = FinetuneConfig { epochs: 2, batch_size: 4, adapt_warp: false };
    let report = evaluate(&trainer.model, &task, &[4, 8], 3, &ft, 42, workers).map_err(err)?;
    let mut draws = Vec::new();
    write_draws_csv(&mut draws, &[report]).map_err(err)?;

    let mut lr = Vec::new();
    lr_trajectories(log.as_slice()).map_err(err)?.write_csv(&mut lr).map_err(err)?;
    let state = smlmt_core::eval::finetune(&trainer.model, &task[0], 8, &ft, 42).map_err(err)?;
    let inputs: Vec<&[TokenId]> = task[0].test.iter().take(64).map(|(t, _)| t.as_slice()).collect();
    let mut cca = Vec::new();
    write_cca_csv(&mut cca, &finetune_cca(&trainer.model, &state, &inputs, DEFAULT_CCA_REG).map_err(err)?).map_err(err)?;
    Ok(vec![episodes, log, ckpt, draws, lr, cca])
}

fn determinism() -> Outcome {
    let a = pipeline_bytes(1)?;
    let b = pipeline_bytes(1)?;
    let c = pipeline_bytes(4)?;
    let names = ["episodes", "train log", "checkpoint", "evaluation", "lr analysis", "cca"];
    let diff: Vec<&str> = names.iter().zip(a.iter().zip(&b).zip(&c)).filter(|(_, ((x, y), z))| x != y || x != z).map(|(n, _)| *n).collect();
    if diff.is_empty() {
        Ok((true, format!("{} outputs identical across reruns and 1 vs 4 workers", names.len())))
    } else {
        Ok((false, format!("differs: {}", diff.join(", "))))
    }
}

fn loss_sanity() -> Outcome {
    let f = fixture();
    let scfg = smlmt_config(1);
    let sampler = TaskSampler::new(&f.store, &f.index, &[], &scfg).map_err(err)?;
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let model = MetaModel::new(EncoderConfig::desk(f.store.vocab_size()), 32, seed).map_err(err)?;
        let mut dev = 0.0;
        for i in 0..100 {
            let ep = sampler.episode(i).map_err(err)?;
            let (w, b) = model.generate_softmax(&ep.support, ep.n_way).map_err(err)?;
            let state = model.initial_state(w, b, false).map_err(err)?;
            dev += model.score(&state, &ep.query).map_err(err)?.loss - (ep.n_way as f64).ln();
        }
        worst = worst.max((dev / 100.0).abs());
    }
    Ok((worst < 1e-2, format!("largest mean |loss - ln N| over 3 fresh models {worst:.4}")))
}

fn main() -> ExitCode {
    let checks: [Check; 10] = [
        ("1 gradient suite", gradients),
        ("2 episode invariant fuzz", episode_invariants),
        ("3 adaptation oracles", oracles),
        ("4 warp contract", warp_contract),
        ("5 hybrid mixing", hybrid_mixing),
        ("6 desk-scale learning", desk_learning),
        ("7 evaluation protocol", eval_protocol),
        ("8 cca sanity", cca_sanity),
        ("9 determinism", determinism),
        ("- initial loss sanity", loss_sanity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        let took: Duration = t.elapsed();
        println!("{} criterion {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
        if !ok {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
