//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file may override any subset and
//! command-line flags override the file. Unknown keys are rejected. The
//! resolved set is written to `config.txt` in each output directory and can
//! be fed back with `--config`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use smlmt_core::corpus::{PipelineConfig, SplitMode};
use smlmt_core::encoder::EncoderConfig;
use smlmt_core::eval::FinetuneConfig;
use smlmt_core::meta::{MetaTrainConfig, OuterOptimizer};
use smlmt_core::tasks::{QuerySize, SamplerConfig, SupportSize};

use crate::CliError;

/// Keys, defaults and one-line descriptions, in file order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed (MF_SEED when unset)"),
    ("workers", "1", "threads for episode generation, training batches and evaluation"),
    ("max_seq_len", "32", "token cap per sequence, CLS included"),
    ("split_mode", "lines", "sentence splitting: lines or raw"),
    ("min_freq", "50", "sentence frequency for a word to be maskable"),
    ("lambda", "0.5", "probability of an SMLMT episode in the hybrid stream"),
    ("n_way", "2,3,4", "class counts to sample from"),
    ("support", "budget:80", "support size: per_class:K or budget:B (K = B / N)"),
    ("query", "per_class:10", "query size: per_class:Q or per_task:Q"),
    ("max_retries", "10", "resampling attempts per episode"),
    ("n_episodes", "100", "episodes written by gen-tasks"),
    ("shard_size", "1000", "episodes per gen-tasks shard"),
    ("model_dim", "64", "encoder width"),
    ("ff_dim", "256", "feed-forward width"),
    ("n_layers", "4", "transformer blocks"),
    ("n_heads", "4", "attention heads"),
    ("dropout", "0.1", "dropout during training"),
    ("head_dim", "32", "width d of generated softmax rows"),
    ("tasks_per_batch", "4", "episodes per outer update"),
    ("adaptation_steps", "7", "inner steps G"),
    ("beta", "0.01", "outer learning rate after warmup"),
    ("epochs", "1", "meta-training epochs"),
    ("episodes_per_epoch", "2000", "episodes per epoch"),
    ("warmup_fraction", "0.1", "fraction of outer updates with linear warmup"),
    ("inner_batch", "full", "support examples per inner step, or full"),
    ("optimizer", "sgd", "outer optimizer: sgd or adam"),
    ("k_list", "4,8,16,32", "support sizes per class for evaluation"),
    ("draws", "10", "support draws per (task, k)"),
    ("grid_search", "true", "pick fine-tuning epochs and batch size per k by grid search"),
    ("epochs_grid", "5,10,50,100", "fine-tuning epochs searched"),
    ("batch_grid", "4,8", "fine-tuning batch sizes searched"),
    ("ft_epochs", "10", "fine-tuning epochs without grid search"),
    ("ft_batch", "4", "fine-tuning batch size without grid search"),
    ("adapt_warp", "false", "also adapt warp layers at test time"),
    ("cca_reg", "1e-10", "relative ridge for CCA"),
    ("cca_k", "16", "support size per class for the fine-tuning CCA"),
    ("near_zero", "1e-5", "|alpha| threshold for the meta-overfitting flag"),
    ("overfit_fraction", "0.5", "fraction of near-zero step sizes that flags meta-overfitting"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        Self { values }
    }
}

impl RunConfig {
    /// Defaults overridden by the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            cfg.merge_text(&text, &path.display().to_string())?;
        }
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(format!("unknown config key {key:?}")),
        }
    }

    /// Overrides `key` when `value` is present.
    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, &v.to_string()).expect("flag maps to a known key");
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("config key {key} = {raw:?}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Usage(format!("config key {key}: {s:?}: {e}")))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            out.push_str(&format!("{k} = {}\n", self.values[*k]));
        }
        out
    }

    pub fn write_echo(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("config.txt");
        std::fs::write(&path, self.render()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let mode = match self.raw("split_mode") {
            "lines" => SplitMode::Lines,
            "raw" => SplitMode::Raw,
            other => return Err(CliError::Usage(format!("config key split_mode: {other:?} (expected lines or raw)"))),
        };
        Ok(PipelineConfig { max_seq_len: self.get("max_seq_len")?, mode })
    }

    pub fn sampler(&self) -> Result<SamplerConfig, CliError> {
        let support = match sized(self.raw("support"), "support")? {
            ("per_class", n) => SupportSize::PerClass(n),
            ("budget", n) => SupportSize::Budget(n),
            (kind, _) => return Err(CliError::Usage(format!("config key support: unknown kind {kind:?}"))),
        };
        let query = match sized(self.raw("query"), "query")? {
            ("per_class", n) => QuerySize::PerClass(n),
            ("per_task", n) => QuerySize::PerTask(n),
            (kind, _) => return Err(CliError::Usage(format!("config key query: unknown kind {kind:?}"))),
        };
        let cfg = SamplerConfig {
            lambda_mix: self.get("lambda")?,
            n_way_choices: self.list("n_way")?,
            support,
            query,
            max_retries: self.get("max_retries")?,
            seed: self.get("seed")?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn encoder(&self, vocab_size: usize) -> Result<EncoderConfig, CliError> {
        let cfg = EncoderConfig {
            vocab_size,
            model_dim: self.get("model_dim")?,
            ff_dim: self.get("ff_dim")?,
            n_layers: self.get("n_layers")?,
            n_heads: self.get("n_heads")?,
            max_seq_len: self.get("max_seq_len")?,
            dropout: self.get("dropout")?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<MetaTrainConfig, CliError> {
        let inner_batch = match self.raw("inner_batch") {
            "full" => None,
            _ => Some(self.get("inner_batch")?),
        };
        let cfg = MetaTrainConfig {
            tasks_per_batch: self.get("tasks_per_batch")?,
            adaptation_steps: self.get("adaptation_steps")?,
            outer_lr: self.get("beta")?,
            epochs: self.get("epochs")?,
            episodes_per_epoch: self.get("episodes_per_epoch")?,
            warmup_fraction: self.get("warmup_fraction")?,
            inner_batch,
            optimizer: self.get::<OuterOptimizer>("optimizer")?,
            workers: self.get::<usize>("workers")?.max(1),
            seed: self.get("seed")?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn finetune(&self) -> Result<FinetuneConfig, CliError> {
        Ok(FinetuneConfig {
            epochs: self.get("ft_epochs")?,
            batch_size: self.get("ft_batch")?,
            adapt_warp: self.get("adapt_warp")?,
        })
    }
}

fn sized<'a>(raw: &'a str, key: &str) -> Result<(&'a str, usize), CliError> {
    let (kind, n) = raw
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("config key {key}: expected kind:count, got {raw:?}")))?;
    let n = n
        .trim()
        .parse()
        .map_err(|e| CliError::Usage(format!("config key {key}: {e}")))?;
    Ok((kind.trim(), n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_into_every_config_type() {
        let cfg = RunConfig::default();
        cfg.pipeline().unwrap();
        cfg.sampler().unwrap();
        cfg.encoder(100).unwrap();
        cfg.train().unwrap();
        cfg.finetune().unwrap();
        use smlmt_core::analysis::{DEFAULT_CCA_REG, DEFAULT_NEAR_ZERO, DEFAULT_OVERFIT_FRACTION};
        let d = RunConfig::default();
        assert_eq!(d.raw("cca_reg").parse::<f64>(), Ok(DEFAULT_CCA_REG));
        assert_eq!(d.raw("near_zero").parse::<f64>(), Ok(DEFAULT_NEAR_ZERO));
        assert_eq!(d.raw("overfit_fraction").parse::<f64>(), Ok(DEFAULT_OVERFIT_FRACTION));
        assert_eq!(cfg.train().unwrap(), MetaTrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.merge_text("seed = 3\nbogus = 1\n", "run.cfg").unwrap_err();
        assert!(matches!(err, CliError::Usage(m) if m.contains("run.cfg:2") && m.contains("bogus")));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.merge_text("# comment\nbeta = 0.5  # trailing\nk_list = 4,8\n", "x").unwrap();
        let mut back = RunConfig::default();
        back.merge_text(&cfg.render(), "echo").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.list::<usize>("k_list").unwrap(), vec![4, 8]);
    }

    #[test]
    fn sizes_parse() {
        let mut cfg = RunConfig::default();
        cfg.set("support", "per_class:5").unwrap();
        cfg.set("query", "per_task:12").unwrap();
        let s = cfg.sampler().unwrap();
        assert_eq!(s.support, SupportSize::PerClass(5));
        assert_eq!(s.query, QuerySize::PerTask(12));
        cfg.set("support", "five").unwrap();
        assert!(cfg.sampler().is_err());
    }
}
