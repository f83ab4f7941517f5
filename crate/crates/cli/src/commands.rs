use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use smlmt_core::analysis::{finetune_cca, lr_trajectories, write_cca_csv};
use smlmt_core::checkpoint;
use smlmt_core::corpus::{build_index, ingest_corpus, SentenceStore, VocabIndex};
use smlmt_core::diagnostics::gradient_suite;
use smlmt_core::autodiff::gradcheck::FD_TOLERANCE;
use smlmt_core::eval::{self, grid_search, parse_target_task, write_draws_csv, write_summary_csv, FinetuneConfig, TargetTask};
use smlmt_core::meta::{write_log_header, write_log_row, MetaModel, MetaTrainer};
use smlmt_core::tasks::{load_supervised, normalize_weights, write_episodes, SamplerConfig, SupervisedTaskSet, TaskSampler};

use crate::config::RunConfig;
use crate::{fixtures, AnalyzeArgs, BuildCorpusArgs, CliError, EvaluateArgs, GenTasksArgs, GradcheckArgs, MetaTrainArgs};

const STORE_FILE: &str = "store.txt";
const INDEX_FILE: &str = "index.txt";
/// Seeds for grid-search draws are offset from the reporting draws.
const GRID_SALT: u64 = 0x6772_6964;

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn load_corpus(dir: &Path) -> Result<(SentenceStore, VocabIndex), CliError> {
    let sp = dir.join(STORE_FILE);
    let ip = dir.join(INDEX_FILE);
    let store = SentenceStore::read_from(open(&sp)?).map_err(|e| CliError::from(e).at(sp.display()))?;
    let index = VocabIndex::read_from(open(&ip)?).map_err(|e| CliError::from(e).at(ip.display()))?;
    Ok((store, index))
}

fn load_supervised_sets(paths: &[PathBuf], store: &SentenceStore, cfg: &SamplerConfig) -> Result<Vec<SupervisedTaskSet>, CliError> {
    let mut sets = paths
        .iter()
        .map(|p| load_supervised(p, store.token_table(), cfg).map_err(|e| CliError::from(e).at(p.display())))
        .collect::<Result<Vec<_>, _>>()?;
    normalize_weights(&mut sets);
    Ok(sets)
}

fn load_task(path: &Path, store: &SentenceStore) -> Result<TargetTask, CliError> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("task");
    parse_target_task(open(path)?, name, store.token_table()).map_err(|e| CliError::from(e).at(path.display()))
}

pub fn build_corpus(mut cfg: RunConfig, a: BuildCorpusArgs) -> Result<(), CliError> {
    cfg.flag("min_freq", a.min_freq);
    cfg.flag("max_seq_len", a.max_seq_len);
    cfg.flag("split_mode", a.split_mode);
    let pipeline = cfg.pipeline()?;
    let min_freq: usize = cfg.get("min_freq")?;
    let mut raw = Vec::new();
    if a.fixture {
        raw.extend_from_slice(fixtures::PLANTED.as_bytes());
    }
    for p in &a.input {
        let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
        raw.extend_from_slice(&bytes);
        if !bytes.ends_with(b"\n") {
            raw.push(b'\n');
        }
    }
    let origin = if a.fixture { "bundled fixture".to_string() } else { format!("{:?}", a.input) };
    let store = ingest_corpus(&raw, &pipeline).map_err(|e| CliError::from(e).at(&origin))?;
    let index = build_index(&store, min_freq).map_err(|e| CliError::from(e).at("--min-freq"))?;
    create_out(&a.out)?;
    write_file(&a.out.join(STORE_FILE), |w| store.write_to(w))?;
    write_file(&a.out.join(INDEX_FILE), |w| index.write_to(w))?;
    cfg.write_echo(&a.out)?;
    println!(
        "{} sentences, {} word types, {} eligible words",
        store.len(),
        store.vocab_size(),
        index.eligible_words().len()
    );
    Ok(())
}

pub fn gen_tasks(mut cfg: RunConfig, a: GenTasksArgs) -> Result<(), CliError> {
    cfg.flag("n_episodes", a.n_episodes);
    cfg.flag("lambda", a.lambda);
    cfg.flag("shard_size", a.shard_size);
    let n: u64 = cfg.get("n_episodes")?;
    let shard: u64 = cfg.get("shard_size")?;
    if shard == 0 {
        return Err(CliError::Usage("--shard-size must be positive".into()));
    }
    let workers: usize = cfg.get("workers")?;
    let scfg = cfg.sampler()?;
    let (store, index) = load_corpus(&a.corpus)?;
    let sets = load_supervised_sets(&a.supervised, &store, &scfg)?;
    let sampler = TaskSampler::new(&store, &index, &sets, &scfg).map_err(|e| CliError::from(e).at("--lambda"))?;
    let mut episodes = Vec::with_capacity(n as usize);
    for (i, r) in sampler.generate(n, workers).into_iter().enumerate() {
        match r {
            Ok(ep) => episodes.push(ep),
            Err(e) => log::warn!("episode {i}: skipped ({e})"),
        }
    }
    if episodes.is_empty() && n > 0 {
        return Err(CliError::Data(format!("no feasible episode in {n} attempts; lower the support or query size, or min_freq")));
    }
    create_out(&a.out)?;
    for (s, chunk) in episodes.chunks(shard as usize).enumerate() {
        write_file(&a.out.join(format!("episodes-{s:05}.jsonl")), |w| write_episodes(w, chunk, a.debug_secrets))?;
    }
    cfg.write_echo(&a.out)?;
    println!("{} episodes written ({} skipped)", episodes.len(), n as usize - episodes.len());
    Ok(())
}

pub fn meta_train(mut cfg: RunConfig, a: MetaTrainArgs) -> Result<(), CliError> {
    cfg.flag("lambda", a.lambda);
    cfg.flag("beta", a.beta);
    cfg.flag("episodes_per_epoch", a.episodes);
    cfg.flag("optimizer", a.optimizer);
    let tcfg = cfg.train()?;
    let scfg = cfg.sampler()?;
    let (store, index) = load_corpus(&a.corpus)?;
    let sets = load_supervised_sets(&a.supervised, &store, &scfg)?;
    let sampler = TaskSampler::new(&store, &index, &sets, &scfg).map_err(|e| CliError::from(e).at("--lambda"))?;
    let mut trainer = match &a.init {
        Some(p) => {
            let t = checkpoint::load(p).map_err(|e| CliError::from(e).at(p.display()))?;
            if t.model.encoder.cfg.vocab_size != store.vocab_size() {
                return Err(CliError::Data(format!(
                    "{}: vocabulary of {} does not match the corpus ({})",
                    p.display(),
                    t.model.encoder.cfg.vocab_size,
                    store.vocab_size()
                )));
            }
            t
        }
        None => MetaTrainer::new(MetaModel::new(cfg.encoder(store.vocab_size())?, cfg.get("head_dim")?, tcfg.seed)?),
    };
    create_out(&a.out)?;
    let log_path = a.out.join("train_log.csv");
    let mut log = create(&log_path)?;
    write_log_header(&mut log, trainer.model.lrs.groups()).map_err(|e| CliError::io(&log_path, e))?;
    let total = tcfg.total_episodes();
    let mut seen = 0u64;
    let summary = trainer.train(&sampler, &tcfg, |row| {
        seen += 1;
        if seen.is_multiple_of(100) {
            log::info!("episode {seen}/{total}: val_loss {:.4} val_acc {:.3}", row.val_loss, row.val_acc);
        }
        write_log_row(&mut log, row)
    })?;
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let ckpt = a.out.join("checkpoint.bin");
    checkpoint::save(&ckpt, &trainer).map_err(|e| CliError::io(&ckpt, e))?;
    cfg.write_echo(&a.out)?;
    println!("{} episodes ({} skipped), {} outer updates", summary.episodes, summary.skipped, summary.updates);
    Ok(())
}

pub fn evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<(), CliError> {
    cfg.flag("k_list", a.k);
    cfg.flag("draws", a.draws);
    if a.no_grid {
        cfg.set("grid_search", "false").expect("known key");
    }
    if a.adapt_warp {
        cfg.set("adapt_warp", "true").expect("known key");
    }
    let k_list: Vec<usize> = cfg.list("k_list").map_err(|e| e.at("--k"))?;
    let draws: usize = cfg.get("draws")?;
    if draws == 0 || k_list.contains(&0) {
        return Err(CliError::Usage("--draws and every --k must be positive".into()));
    }
    let seed: u64 = cfg.get("seed")?;
    let workers: usize = cfg.get("workers")?;
    let grid: bool = cfg.get("grid_search")?;
    let epochs_grid: Vec<usize> = cfg.list("epochs_grid")?;
    let batch_grid: Vec<usize> = cfg.list("batch_grid")?;
    let fixed = cfg.finetune()?;

    let model = checkpoint::load(&a.checkpoint).map_err(|e| CliError::from(e).at(a.checkpoint.display()))?.model;
    let (store, _) = load_corpus(&a.corpus)?;
    let tasks = a.task.iter().map(|p| load_task(p, &store)).collect::<Result<Vec<_>, _>>()?;
    for t in &tasks {
        if let Some(&k) = k_list.iter().find(|&&k| k > t.max_k()) {
            return Err(CliError::Data(format!("task {}: k = {k} exceeds the smallest class pool ({})", t.name, t.max_k())));
        }
    }

    let mut reports = Vec::new();
    let mut grid_rows = Vec::new();
    for &k in &k_list {
        let ft = if grid {
            let g = grid_search(&model, &tasks, &epochs_grid, &batch_grid, k, draws, seed ^ GRID_SALT, fixed.adapt_warp, workers)?;
            for &(e, b, m) in &g.cells {
                grid_rows.push((k, e, b, m, e == g.epochs && b == g.batch_size));
            }
            FinetuneConfig { epochs: g.epochs, batch_size: g.batch_size, adapt_warp: fixed.adapt_warp }
        } else {
            fixed
        };
        reports.push(eval::evaluate(&model, &tasks, &[k], draws, &ft, seed, workers)?);
    }
    create_out(&a.out)?;
    write_file(&a.out.join("draws.csv"), |w| write_draws_csv(w, &reports))?;
    write_file(&a.out.join("summary.csv"), |w| write_summary_csv(w, &reports))?;
    if grid {
        write_file(&a.out.join("grid.csv"), |w| {
            writeln!(w, "k,epochs,batch_size,mean_accuracy,selected")?;
            for (k, e, b, m, sel) in &grid_rows {
                writeln!(w, "{k},{e},{b},{m},{sel}")?;
            }
            Ok(())
        })?;
    }
    cfg.write_echo(&a.out)?;
    for r in &reports {
        for s in &r.summaries {
            println!("{} k={}: {:.4} +- {:.4} over {} draws", s.task, s.k, s.mean, s.std, s.draws);
        }
    }
    Ok(())
}

pub fn analyze(cfg: RunConfig, a: AnalyzeArgs) -> Result<(), CliError> {
    if a.log.is_none() && a.checkpoint.is_none() {
        return Err(CliError::Usage("nothing to analyze: pass --log and/or --checkpoint".into()));
    }
    create_out(&a.out)?;
    if let Some(p) = &a.log {
        let traj = lr_trajectories(open(p)?).map_err(|e| CliError::from(e).at(p.display()))?;
        let s = traj.summary(cfg.get("near_zero")?, cfg.get("overfit_fraction")?);
        write_file(&a.out.join("lr_trajectories.csv"), |w| traj.write_csv(w))?;
        write_file(&a.out.join("lr_summary.csv"), |w| {
            writeln!(w, "group,final_abs_alpha")?;
            for (g, v) in &s.final_abs {
                writeln!(w, "{g},{v}")?;
            }
            Ok(())
        })?;
        println!(
            "{} step sizes, {:.2} near zero, meta-overfitting: {}",
            s.final_abs.len(),
            s.near_zero_fraction,
            s.meta_overfitting
        );
    }
    if let (Some(ck), Some(corpus), Some(task)) = (&a.checkpoint, &a.corpus, &a.task) {
        let model = checkpoint::load(ck).map_err(|e| CliError::from(e).at(ck.display()))?.model;
        let (store, _) = load_corpus(corpus)?;
        let task = load_task(task, &store)?;
        let k: usize = cfg.get("cca_k")?;
        if k == 0 || k > task.max_k() {
            return Err(CliError::Usage(format!("cca_k = {k} must lie in 1..={}", task.max_k())));
        }
        let state = eval::finetune(&model, &task, k, &cfg.finetune()?, cfg.get("seed")?)?;
        let inputs: Vec<&[u32]> = task.test.iter().map(|(t, _)| t.as_slice()).collect();
        let rows = finetune_cca(&model, &state, &inputs, cfg.get("cca_reg")?)?;
        write_file(&a.out.join("cca.csv"), |w| write_cca_csv(w, &rows))?;
        for (l, s) in &rows {
            println!("layer {l}: CCA similarity {s:.4}");
        }
    }
    cfg.write_echo(&a.out)
}

pub fn gradcheck(cfg: RunConfig, a: GradcheckArgs) -> Result<(), CliError> {
    let reports = gradient_suite(cfg.get("seed")?).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(FD_TOLERANCE);
        println!("{:<28} {:>10.3e} {:>6} {}", r.name, r.max_rel_error, r.entries, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if let Some(out) = &a.out {
        create_out(out)?;
        write_file(&out.join("gradcheck.csv"), |w| {
            writeln!(w, "graph,max_rel_error,entries,passed")?;
            for r in &reports {
                writeln!(w, "{},{},{},{}", r.name, r.max_rel_error, r.entries, r.passed(FD_TOLERANCE))?;
            }
            Ok(())
        })?;
        cfg.write_echo(out)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}
