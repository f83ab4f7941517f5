//! Property suites over the bundled fixtures.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use smlmt_core::analysis::{cca_similarity, RepresentationMatrix};
use smlmt_core::autodiff::gradcheck::FD_TOLERANCE;
use smlmt_core::checkpoint::{read_checkpoint, write_checkpoint};
use smlmt_core::corpus::{build_index, ingest_corpus, PipelineConfig, SentenceStore, VocabIndex};
use smlmt_core::diagnostics::gradient_suite;
use smlmt_core::encoder::EncoderConfig;
use smlmt_core::meta::{MetaModel, MetaTrainConfig, MetaTrainer};
use smlmt_core::tasks::{parse_supervised, Provenance, QuerySize, SamplerConfig, SupportSize, TaskSampler};

use crate::config::RunConfig;
use crate::{fixtures, CliError};

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

type Check = Result<(bool, String), String>;
type Suite = (&'static str, Box<dyn Fn() -> Check>);

fn fixture_corpus() -> Result<(SentenceStore, VocabIndex), String> {
    let store = ingest_corpus(fixtures::PLANTED.as_bytes(), &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let index = build_index(&store, 10).map_err(|e| e.to_string())?;
    Ok((store, index))
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

fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

fn gradients(seed: u64) -> Check {
    let reports = gradient_suite(seed).map_err(|e| e.to_string())?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    Ok((
        reports.iter().all(|r| r.passed(FD_TOLERANCE)),
        format!("{} graphs, worst {} at {:.2e}", reports.len(), worst.name, worst.max_rel_error),
    ))
}

fn index_soundness() -> Check {
    let (store, index) = fixture_corpus()?;
    for w in 4..store.vocab_size() as u32 {
        let brute: Vec<u32> = (0..store.len() as u32)
            .filter(|&s| store.sentence(s as usize).contains(&w))
            .collect();
        if index.postings(w) != brute.as_slice() {
            return Ok((false, format!("postings of word {w} differ from a scan")));
        }
        if (brute.len() >= index.min_freq()) != index.eligible_words().contains(&w) {
            return Ok((false, format!("eligibility of word {w} disagrees with its frequency")));
        }
    }
    Ok((true, format!("{} words, {} eligible", store.vocab_size() - 4, index.eligible_words().len())))
}

fn episode_invariants(seed: u64) -> Check {
    let (store, index) = fixture_corpus()?;
    let cfg = smlmt_config(seed);
    let sampler = TaskSampler::new(&store, &index, &[], &cfg).map_err(|e| e.to_string())?;
    let mut label_counts = [vec![0u64; 2], vec![0u64; 3], vec![0u64; 4]];
    for i in 0..1000 {
        let ep = sampler.episode(i).map_err(|e| format!("episode {i}: {e}"))?;
        if let Err(v) = ep.check_invariants(store.mask_id()) {
            return Ok((false, format!("episode {i}: {v}")));
        }
        let first = ep.secret_words.as_ref().expect("smlmt")[0];
        let label = ep
            .support
            .iter()
            .find(|e| index.contains(first, e.source.expect("smlmt source")))
            .map(|e| e.label)
            .ok_or(format!("episode {i}: first secret word has no class"))?;
        label_counts[ep.n_way - 2][label] += 1;
    }
    let p = label_counts.iter().map(|c| chi_square_uniform(c)).fold(1.0, f64::min);
    Ok((p > 0.01, format!("1000 episodes, smallest label-uniformity p = {p:.3}")))
}

fn hybrid_mixing(seed: u64) -> Check {
    let (store, index) = fixture_corpus()?;
    let cfg = SamplerConfig { lambda_mix: 0.5, ..smlmt_config(seed) };
    let set = parse_supervised(fixtures::SUPERVISED.as_bytes(), "fixture", store.token_table(), cfg.max_class_demand())
        .map_err(|e| e.to_string())?;
    let sets = [set];
    let sampler = TaskSampler::new(&store, &index, &sets, &cfg).map_err(|e| e.to_string())?;
    let n = 10_000;
    let mut smlmt = 0;
    for i in 0..n {
        let ep = sampler.episode(i).map_err(|e| format!("episode {i}: {e}"))?;
        if ep.provenance == Provenance::Smlmt {
            smlmt += 1;
        }
    }
    let f = smlmt as f64 / n as f64;
    Ok(((0.487..=0.513).contains(&f), format!("SMLMT fraction {f:.4} over {n}")))
}

fn parallel_generation(seed: u64) -> Check {
    let (store, index) = fixture_corpus()?;
    let cfg = smlmt_config(seed);
    let sampler = TaskSampler::new(&store, &index, &[], &cfg).map_err(|e| e.to_string())?;
    let render = |w| -> Vec<String> {
        sampler
            .generate(300, w)
            .into_iter()
            .map(|r| r.map(|e| e.to_json(true)).unwrap_or_else(|e| e.to_string()))
            .collect()
    };
    Ok((render(1) == render(4), "300 episodes, 1 vs 4 workers".into()))
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

fn cca_sanity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = |e: smlmt_core::analysis::AnalysisError| e.to_string();
    let (rows, cols) = (500, 16);
    let a = RepresentationMatrix::new(rows, cols, gaussian(rows, cols, &mut rng), 0, "a").map_err(e)?;
    let m = gaussian(cols, cols, &mut rng);
    let shift = gaussian(1, cols, &mut rng);
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[r * cols + c] = (0..cols).map(|j| a.data[r * cols + j] * m[j * cols + c]).sum::<f64>() + shift[c];
        }
    }
    let b = RepresentationMatrix::new(rows, cols, t, 0, "b").map_err(e)?;
    let g = RepresentationMatrix::new(rows, cols, gaussian(rows, cols, &mut rng), 0, "g").map_err(e)?;
    let reg = smlmt_core::analysis::DEFAULT_CCA_REG;
    let own = cca_similarity(&a, &a, reg).map_err(e)?;
    let affine = cca_similarity(&a, &b, reg).map_err(e)?;
    let null = cca_similarity(&a, &g, reg).map_err(e)?;
    let ok = (own - 1.0).abs() < 1e-6 && (affine - 1.0).abs() < 1e-5 && null < 0.35;
    Ok((ok, format!("self {own:.8}, affine {affine:.7}, independent {null:.3}")))
}

fn toy_trainer(vocab: usize, seed: u64) -> Result<MetaTrainer, String> {
    let cfg = EncoderConfig {
        vocab_size: vocab,
        model_dim: 8,
        ff_dim: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 32,
        dropout: 0.1,
    };
    Ok(MetaTrainer::new(MetaModel::new(cfg, 4, seed).map_err(|e| e.to_string())?))
}

fn warp_contract(seed: u64) -> Check {
    let (store, index) = fixture_corpus()?;
    let scfg = smlmt_config(seed);
    let sampler = TaskSampler::new(&store, &index, &[], &scfg).map_err(|e| e.to_string())?;
    let mut trainer = toy_trainer(store.vocab_size(), seed)?;
    let before = trainer.model.params.clone();
    let warp: Vec<usize> = (0..before.len()).filter(|&i| before.entry(i).is_warp).collect();
    for i in 0..8 {
        let ep = sampler.episode(i).map_err(|e| e.to_string())?;
        let (state, _) = trainer.model.adapt_and_score(&ep, 7, None, i).map_err(|e| e.to_string())?;
        if warp.iter().any(|&w| state.fast(w).is_some()) {
            return Ok((false, "an adapted state holds a warp tensor".into()));
        }
    }
    if trainer.model.params != before {
        return Ok((false, "inner adaptation changed the shared parameters".into()));
    }
    let tcfg = MetaTrainConfig { episodes_per_epoch: 8, seed, ..Default::default() };
    trainer.train(&sampler, &tcfg, |_| Ok(())).map_err(|e| e.to_string())?;
    let moved = warp
        .iter()
        .filter(|&&w| trainer.model.params.entry(w).tensor != before.entry(w).tensor)
        .count();
    Ok((moved == warp.len(), format!("{moved}/{} warp tensors moved by 2 outer updates", warp.len())))
}

fn checkpoint_round_trip(seed: u64) -> Check {
    let (store, index) = fixture_corpus()?;
    let scfg = smlmt_config(seed);
    let sampler = TaskSampler::new(&store, &index, &[], &scfg).map_err(|e| e.to_string())?;
    let mut trainer = toy_trainer(store.vocab_size(), seed)?;
    let tcfg = MetaTrainConfig {
        episodes_per_epoch: 4,
        optimizer: smlmt_core::meta::OuterOptimizer::Adam,
        seed,
        ..Default::default()
    };
    trainer.train(&sampler, &tcfg, |_| Ok(())).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &trainer).map_err(|e| e.to_string())?;
    let back = read_checkpoint(buf.as_slice()).map_err(|e| e.to_string())?;
    Ok((back == trainer, format!("{} bytes", buf.len())))
}

fn config_round_trip() -> Check {
    let mut cfg = RunConfig::default();
    cfg.set("beta", "0.003").map_err(|e| e.to_string())?;
    cfg.set("k_list", "4,16").map_err(|e| e.to_string())?;
    let mut back = RunConfig::default();
    back.merge_text(&cfg.render(), "echo").map_err(|e| e.to_string())?;
    let unknown = RunConfig::default().merge_text("no_such_key = 1", "x").is_err();
    Ok((back == cfg && unknown, "echo re-read, unknown key rejected".into()))
}

pub fn run(cfg: RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let seed: u64 = cfg.get("seed")?;
    let suites: Vec<Suite> = vec![
        ("gradients", Box::new(move || gradients(seed))),
        ("index_soundness", Box::new(index_soundness)),
        ("episode_invariants", Box::new(move || episode_invariants(seed))),
        ("hybrid_mixing", Box::new(move || hybrid_mixing(seed))),
        ("parallel_generation", Box::new(move || parallel_generation(seed))),
        ("cca_sanity", Box::new(move || cca_sanity(seed))),
        ("warp_contract", Box::new(move || warp_contract(seed))),
        ("checkpoint_round_trip", Box::new(move || checkpoint_round_trip(seed))),
        ("config_round_trip", Box::new(config_round_trip)),
    ];
    let mut outcomes = Vec::new();
    for (name, f) in suites {
        let t = Instant::now();
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{} {name:<22} {detail} ({:.1}s)", if passed { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        outcomes.push(Outcome { name, passed, detail });
    }
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("selftest.csv");
        let mut w = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut text = String::from("suite,passed,detail\n");
        for o in &outcomes {
            text.push_str(&format!("{},{},\"{}\"\n", o.name, o.passed, o.detail.replace('"', "'")));
        }
        w.write_all(text.as_bytes()).map_err(|e| CliError::io(&path, e))?;
        cfg.write_echo(dir)?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("selftest failed: {}", failed.join(", "))))
    }
}
