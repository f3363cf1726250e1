//! Tunables shared by the subcommands: defaults, `key = value` config files,
//! and command-line overrides.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use clap::Args;
use tdln::datagen::{BenchmarkConfig, DEFAULT_CHANNELS, DEFAULT_RUN_LENGTH};
use tdln::extratrees::ForestConfig;
use tdln::pipeline::{Mode, PipelineConfig};
use tdln::preprocess::WindowSpec;
use tdln::training::TrainConfig;

/// Every tunable as an optional flag. The same names, without the leading
/// dashes, are the keys of a config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Tunables {
    /// Config file of `key = value` lines; flags override it
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Window width
    #[arg(long, global = true)]
    pub w: Option<usize>,
    /// Window stride
    #[arg(long, global = true)]
    pub s: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size", global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long = "blstm-hidden", global = true)]
    pub blstm_hidden: Option<usize>,
    #[arg(long = "lstm-hidden", global = true)]
    pub lstm_hidden: Option<usize>,
    /// Hidden dense widths, comma separated, e.g. 500,180
    #[arg(long = "fcnn-sizes", global = true, value_delimiter = ',')]
    pub fcnn_sizes: Option<Vec<usize>>,
    #[arg(long = "n-estimators", global = true)]
    pub n_estimators: Option<usize>,
    #[arg(long = "max-depth", global = true)]
    pub max_depth: Option<usize>,
    /// Features drawn per tree (default: ceil(sqrt(d)))
    #[arg(long = "subset-size", global = true)]
    pub subset_size: Option<usize>,
    /// Bootstrap the training rows of each tree
    #[arg(long, global = true)]
    pub bootstrap: bool,
    /// full, dl_only or ml_only
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long = "refine-rounds", global = true)]
    pub refine_rounds: Option<usize>,
    /// Classes to remove before training or evaluation, comma separated
    #[arg(long = "drop-classes", global = true, value_delimiter = ',')]
    pub drop_classes: Option<Vec<usize>>,
    /// Worker threads (default: available cores); never changes results
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long = "val-fraction", global = true)]
    pub val_fraction: Option<f64>,
    /// Return the epoch with the best validation accuracy instead of the last
    #[arg(long = "keep-best", global = true)]
    pub keep_best: bool,
    /// Generator: number of classes, normal included
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    /// Generator: channels per row
    #[arg(long, global = true)]
    pub channels: Option<usize>,
    /// Generator: training runs per class
    #[arg(long = "train-runs", global = true)]
    pub train_runs: Option<usize>,
    /// Generator: test runs per class
    #[arg(long = "test-runs", global = true)]
    pub test_runs: Option<usize>,
    /// Generator: rows per run
    #[arg(long = "run-length", global = true)]
    pub run_length: Option<usize>,
}

const KEYS: &[&str] = &[
    "seed",
    "w",
    "s",
    "epochs",
    "batch-size",
    "lr",
    "dropout",
    "blstm-hidden",
    "lstm-hidden",
    "fcnn-sizes",
    "n-estimators",
    "max-depth",
    "subset-size",
    "bootstrap",
    "mode",
    "refine-rounds",
    "drop-classes",
    "threads",
    "val-fraction",
    "keep-best",
    "classes",
    "channels",
    "train-runs",
    "test-runs",
    "run-length",
];

fn parse_value<V: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value
        .parse()
        .ok()
        .with_context(|| format!("config line {line}: bad value '{value}' for {key}"))
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim(), line)).collect()
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("config line {line}: {key} must be true or false, got '{value}'"),
    }
}

impl Tunables {
    /// Parses a config file. Keys may use `-` or `_`; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Tunables> {
        let mut t = Tunables::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .with_context(|| format!("config line {line}: expected 'key = value'"))?;
            let key = key.trim().replace('_', "-");
            let value = value.trim();
            match key.as_str() {
                "seed" => t.seed = Some(parse_value(&key, value, line)?),
                "w" => t.w = Some(parse_value(&key, value, line)?),
                "s" => t.s = Some(parse_value(&key, value, line)?),
                "epochs" => t.epochs = Some(parse_value(&key, value, line)?),
                "batch-size" => t.batch_size = Some(parse_value(&key, value, line)?),
                "lr" => t.lr = Some(parse_value(&key, value, line)?),
                "dropout" => t.dropout = Some(parse_value(&key, value, line)?),
                "blstm-hidden" => t.blstm_hidden = Some(parse_value(&key, value, line)?),
                "lstm-hidden" => t.lstm_hidden = Some(parse_value(&key, value, line)?),
                "fcnn-sizes" => t.fcnn_sizes = Some(parse_list(&key, value, line)?),
                "n-estimators" => t.n_estimators = Some(parse_value(&key, value, line)?),
                "max-depth" => t.max_depth = Some(parse_value(&key, value, line)?),
                "subset-size" => {
                    t.subset_size = if value == "auto" {
                        None
                    } else {
                        Some(parse_value(&key, value, line)?)
                    }
                }
                "bootstrap" => t.bootstrap = parse_bool(&key, value, line)?,
                "mode" => t.mode = Some(value.to_string()),
                "refine-rounds" => t.refine_rounds = Some(parse_value(&key, value, line)?),
                "drop-classes" => t.drop_classes = Some(parse_list(&key, value, line)?),
                "threads" => {
                    t.threads = if value == "auto" {
                        None
                    } else {
                        Some(parse_value(&key, value, line)?)
                    }
                }
                "val-fraction" => t.val_fraction = Some(parse_value(&key, value, line)?),
                "keep-best" => t.keep_best = parse_bool(&key, value, line)?,
                "classes" => t.classes = Some(parse_value(&key, value, line)?),
                "channels" => t.channels = Some(parse_value(&key, value, line)?),
                "train-runs" => t.train_runs = Some(parse_value(&key, value, line)?),
                "test-runs" => t.test_runs = Some(parse_value(&key, value, line)?),
                "run-length" => t.run_length = Some(parse_value(&key, value, line)?),
                other => bail!(
                    "config line {line}: unknown key '{other}' (known keys: {})",
                    KEYS.join(", ")
                ),
            }
        }
        Ok(t)
    }

    /// Flags take precedence over `file`.
    pub fn over(self, file: Tunables) -> Tunables {
        Tunables {
            config: self.config,
            seed: self.seed.or(file.seed),
            w: self.w.or(file.w),
            s: self.s.or(file.s),
            epochs: self.epochs.or(file.epochs),
            batch_size: self.batch_size.or(file.batch_size),
            lr: self.lr.or(file.lr),
            dropout: self.dropout.or(file.dropout),
            blstm_hidden: self.blstm_hidden.or(file.blstm_hidden),
            lstm_hidden: self.lstm_hidden.or(file.lstm_hidden),
            fcnn_sizes: self.fcnn_sizes.or(file.fcnn_sizes),
            n_estimators: self.n_estimators.or(file.n_estimators),
            max_depth: self.max_depth.or(file.max_depth),
            subset_size: self.subset_size.or(file.subset_size),
            bootstrap: self.bootstrap || file.bootstrap,
            mode: self.mode.or(file.mode),
            refine_rounds: self.refine_rounds.or(file.refine_rounds),
            drop_classes: self.drop_classes.or(file.drop_classes),
            threads: self.threads.or(file.threads),
            val_fraction: self.val_fraction.or(file.val_fraction),
            keep_best: self.keep_best || file.keep_best,
            classes: self.classes.or(file.classes),
            channels: self.channels.or(file.channels),
            train_runs: self.train_runs.or(file.train_runs),
            test_runs: self.test_runs.or(file.test_runs),
            run_length: self.run_length.or(file.run_length),
        }
    }

    /// Reads `--config` if given and applies the flags on top.
    pub fn resolve(self) -> Result<Resolved> {
        let merged = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file {}", path.display()))?;
                let file = Tunables::from_text(&text).with_context(|| format!("in {}", path.display()))?;
                self.over(file)
            }
            None => self,
        };
        Resolved::from_tunables(&merged)
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub bench: BenchmarkConfig,
    pub channels: usize,
    pub drop_classes: Vec<usize>,
    pub threads: Option<usize>,
}

impl Resolved {
    fn from_tunables(t: &Tunables) -> Result<Resolved> {
        let base = PipelineConfig::default();
        let seed = t.seed.unwrap_or(0);
        let mode_name = t.mode.as_deref().unwrap_or("full");
        let mode = Mode::parse(mode_name)
            .with_context(|| format!("unknown mode '{mode_name}' (expected full, dl_only or ml_only)"))?;
        let window = WindowSpec::new(t.w.unwrap_or(base.window.width), t.s.unwrap_or(base.window.stride))?;
        let pipeline = PipelineConfig {
            window,
            val_fraction: t.val_fraction.unwrap_or(base.val_fraction),
            blstm_hidden: t.blstm_hidden.unwrap_or(base.blstm_hidden),
            lstm_hidden: t.lstm_hidden.unwrap_or(base.lstm_hidden),
            fcnn: t.fcnn_sizes.clone().unwrap_or(base.fcnn),
            dropout: t.dropout.unwrap_or(base.dropout),
            forget_bias: base.forget_bias,
            train: TrainConfig {
                epochs: t.epochs.unwrap_or(base.train.epochs),
                batch_size: t.batch_size.unwrap_or(base.train.batch_size),
                learning_rate: t.lr.unwrap_or(base.train.learning_rate),
                keep_best: t.keep_best,
                progress: true,
                ..base.train
            },
            forest: ForestConfig {
                n_estimators: t.n_estimators.unwrap_or(base.forest.n_estimators),
                max_depth: t.max_depth.unwrap_or(base.forest.max_depth),
                subset_size: t.subset_size,
                bootstrap: t.bootstrap,
                seed: 0,
            },
            mode,
            refine_rounds: t.refine_rounds.unwrap_or(base.refine_rounds),
            seed,
        };
        pipeline.validate()?;
        let bench_default = BenchmarkConfig::default();
        let bench = BenchmarkConfig {
            class_count: t.classes.unwrap_or(bench_default.class_count),
            train_runs: t.train_runs.unwrap_or(bench_default.train_runs),
            test_runs: t.test_runs.unwrap_or(bench_default.test_runs),
            run_length: t.run_length.unwrap_or(DEFAULT_RUN_LENGTH),
            seed,
        };
        if t.threads == Some(0) {
            bail!("--threads must be at least 1");
        }
        Ok(Resolved {
            pipeline,
            bench,
            channels: t.channels.unwrap_or(DEFAULT_CHANNELS),
            drop_classes: t.drop_classes.clone().unwrap_or_default(),
            threads: t.threads,
        })
    }

    /// Config-file text reproducing these settings.
    pub fn echo(&self) -> String {
        let p = &self.pipeline;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::from("# resolved configuration\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", p.seed.to_string());
        put("w", p.window.width.to_string());
        put("s", p.window.stride.to_string());
        put("epochs", p.train.epochs.to_string());
        put("batch-size", p.train.batch_size.to_string());
        put("lr", p.train.learning_rate.to_string());
        put("dropout", p.dropout.to_string());
        put("blstm-hidden", p.blstm_hidden.to_string());
        put("lstm-hidden", p.lstm_hidden.to_string());
        put("fcnn-sizes", list(&p.fcnn));
        put("n-estimators", p.forest.n_estimators.to_string());
        put("max-depth", p.forest.max_depth.to_string());
        put(
            "subset-size",
            p.forest.subset_size.map_or("auto".into(), |k| k.to_string()),
        );
        put("bootstrap", p.forest.bootstrap.to_string());
        put("mode", p.mode.name().to_string());
        put("refine-rounds", p.refine_rounds.to_string());
        put("drop-classes", list(&self.drop_classes));
        put("threads", self.threads.map_or("auto".into(), |k| k.to_string()));
        put("val-fraction", p.val_fraction.to_string());
        put("keep-best", p.train.keep_best.to_string());
        put("classes", self.bench.class_count.to_string());
        put("channels", self.channels.to_string());
        put("train-runs", self.bench.train_runs.to_string());
        put("test-runs", self.bench.test_runs.to_string());
        put("run-length", self.bench.run_length.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let file = Tunables::from_text("# experiment\nepochs = 7\nbatch_size = 32  # small\nfcnn-sizes = 64,32\n").unwrap();
        let flags = Tunables {
            epochs: Some(9),
            ..Tunables::default()
        };
        let r = Resolved::from_tunables(&flags.over(file)).unwrap();
        assert_eq!(r.pipeline.train.epochs, 9);
        assert_eq!(r.pipeline.train.batch_size, 32);
        assert_eq!(r.pipeline.fcnn, vec![64, 32]);
        assert_eq!(r.pipeline.window, WindowSpec::new(30, 20).unwrap());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = Tunables::from_text("epochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key 'epochz'"));
        assert!(Tunables::from_text("epochs 3\n").is_err());
        assert!(Tunables::from_text("epochs = three\n").is_err());
    }

    #[test]
    fn echo_reparses_to_same_settings() {
        let flags = Tunables {
            seed: Some(5),
            mode: Some("ml_only".into()),
            subset_size: Some(4),
            drop_classes: Some(vec![3]),
            bootstrap: true,
            ..Tunables::default()
        };
        let r = Resolved::from_tunables(&flags).unwrap();
        let again = Resolved::from_tunables(&Tunables::from_text(&r.echo()).unwrap()).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn invalid_settings_rejected() {
        let bad = |t: Tunables| Resolved::from_tunables(&t).is_err();
        assert!(bad(Tunables {
            mode: Some("both".into()),
            ..Tunables::default()
        }));
        assert!(bad(Tunables {
            epochs: Some(0),
            ..Tunables::default()
        }));
        assert!(bad(Tunables {
            s: Some(0),
            ..Tunables::default()
        }));
    }
}
