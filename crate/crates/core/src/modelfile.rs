//! Line-based model file.
//!
//! ```text
//! tdln-model
//! version 1
//! scalar f64
//! mode full|dl_only|ml_only
//! channels <d>
//! classes <n>
//! window <width> <stride>
//! val_fraction <r>
//! blstm_hidden <k>
//! lstm_hidden <k>
//! fcnn <k1> <k2> …
//! dropout <r>
//! forget_bias <r>
//! epochs <k>
//! batch_size <k>
//! learning_rate <r>
//! adam <beta1> <beta2> <epsilon>
//! keep_best 0|1
//! n_estimators <k>
//! max_depth <k>
//! subset_size auto|<k>
//! bootstrap 0|1
//! refine_rounds <k>
//! seed <u64>
//! validation_fdr <r|undefined> … (one per class)
//! norm_epsilon <r>
//! norm_mean <r> … (one per channel)
//! norm_std <r> …
//! deep none | deep <tensor count>
//!   tensor <index> <length>
//!   <values>
//! forest none | forest <trees> <features>
//!   tree <index> <nodes> subset <feature> …
//!   split <feature> <threshold> | leaf <count> …   (nodes in preorder)
//! end
//! sha256 <hex digest of every byte before this line>
//! ```
//!
//! Weights and thresholds are written with 17 significant digits; other reals
//! use shortest round-trip formatting. Tensors follow
//! [`DeepNetParams::tensors`] order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extratrees::{ForestConfig, ForestModel, Tree, TreeNode};
use crate::network::DeepNetParams;
use crate::numerics::Scalar;
use crate::pipeline::{Mode, PipelineConfig, TdlnModel};
use crate::preprocess::{NormStats, WindowSpec};
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "tdln-model";

fn sci<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.to_f64_lossy())
}

fn join<I: IntoIterator<Item = String>>(items: I) -> String {
    items.into_iter().collect::<Vec<_>>().join(" ")
}

fn digest(payload: &[u8]) -> String {
    Sha256::digest(payload).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a model. Output depends only on the model, so equal models give
/// equal bytes.
pub fn model_to_string<T: Scalar>(model: &TdlnModel<T>) -> Result<String> {
    model.validate()?;
    let c = &model.config;
    let t = &c.train;
    let mut s = String::new();
    let mut line = |text: String| {
        s.push_str(&text);
        s.push('\n');
    };
    line(MAGIC.into());
    line(format!("version {FORMAT_VERSION}"));
    line(format!("scalar f{}", std::mem::size_of::<T>() * 8));
    line(format!("mode {}", model.mode.name()));
    line(format!("channels {}", model.channels));
    line(format!("classes {}", model.class_count));
    line(format!("window {} {}", c.window.width, c.window.stride));
    line(format!("val_fraction {}", c.val_fraction));
    line(format!("blstm_hidden {}", c.blstm_hidden));
    line(format!("lstm_hidden {}", c.lstm_hidden));
    line(format!("fcnn {}", join(c.fcnn.iter().map(usize::to_string))));
    line(format!("dropout {}", c.dropout));
    line(format!("forget_bias {}", c.forget_bias));
    line(format!("epochs {}", t.epochs));
    line(format!("batch_size {}", t.batch_size));
    line(format!("learning_rate {}", t.learning_rate));
    line(format!("adam {} {} {}", t.adam_beta1, t.adam_beta2, t.adam_epsilon));
    line(format!("keep_best {}", u8::from(t.keep_best)));
    line(format!("n_estimators {}", c.forest.n_estimators));
    line(format!("max_depth {}", c.forest.max_depth));
    line(format!(
        "subset_size {}",
        c.forest.subset_size.map_or("auto".to_string(), |k| k.to_string())
    ));
    line(format!("bootstrap {}", u8::from(c.forest.bootstrap)));
    line(format!("refine_rounds {}", c.refine_rounds));
    line(format!("seed {}", c.seed));
    line(format!(
        "validation_fdr {}",
        join(
            model
                .validation_fdr
                .iter()
                .map(|v| v.map_or("undefined".to_string(), |x| x.to_string()))
        )
    ));
    line(format!("norm_epsilon {}", sci(model.norm.epsilon)));
    line(format!("norm_mean {}", join(model.norm.mean.iter().map(|&v| sci(v)))));
    line(format!("norm_std {}", join(model.norm.std.iter().map(|&v| sci(v)))));
    match &model.deep {
        None => line("deep none".into()),
        Some(deep) => {
            let tensors = deep.tensors();
            line(format!("deep {}", tensors.len()));
            for (k, tensor) in tensors.iter().enumerate() {
                line(format!("tensor {k} {}", tensor.len()));
                line(join(tensor.iter().map(|&v| sci(v))));
            }
        }
    }
    match &model.forest {
        None => line("forest none".into()),
        Some(f) => {
            line(format!("forest {} {}", f.trees.len(), f.feature_count));
            for (k, (tree, subset)) in f.trees.iter().zip(&f.subsets).enumerate() {
                line(format!(
                    "tree {k} {} subset {}",
                    tree.nodes.len(),
                    join(subset.iter().map(usize::to_string))
                ));
                for node in &tree.nodes {
                    match node {
                        TreeNode::Split { feature, threshold, .. } => line(format!("split {feature} {}", sci(*threshold))),
                        TreeNode::Leaf { counts } => line(format!("leaf {}", join(counts.iter().map(u32::to_string)))),
                    }
                }
            }
        }
    }
    line("end".into());
    let sum = digest(s.as_bytes());
    let _ = writeln!(s, "sha256 {sum}");
    Ok(s)
}

pub fn save_model<T: Scalar>(model: &TdlnModel<T>, path: &Path) -> Result<()> {
    fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<TdlnModel<T>> {
    let bytes = fs::read(path)?;
    model_from_bytes(&bytes)
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::Malformed {
        line,
        reason: reason.into(),
    }
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<TdlnModel<T>> {
    let text = std::str::from_utf8(bytes).map_err(|_| malformed(0, "file is not UTF-8 text"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(malformed(1, "missing tdln-model header"));
    }
    let version_line = lines.next().unwrap_or("");
    let found: u32 = version_line
        .strip_prefix("version ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| malformed(2, "missing version line"))?;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            supported: FORMAT_VERSION,
        });
    }
    let body = text.strip_suffix('\n').ok_or_else(|| malformed(0, "file does not end with a newline"))?;
    let split_at = body.rfind('\n').map_or(0, |i| i + 1);
    let stored = body[split_at..]
        .strip_prefix("sha256 ")
        .filter(|h| h.len() == 64 && h.bytes().all(|b| b.is_ascii_hexdigit()))
        .ok_or_else(|| malformed(body.lines().count(), "missing or incomplete checksum line"))?;
    let computed = digest(&bytes[..split_at]);
    if stored != computed {
        return Err(Error::Checksum {
            stored: stored.to_string(),
            computed,
        });
    }
    Parser {
        lines: body[..split_at].lines().collect(),
        at: 2,
    }
    .model()
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    at: usize,
}

impl<'a> Parser<'a> {
    fn line_no(&self) -> usize {
        self.at
    }

    fn next_line(&mut self) -> Result<&'a str> {
        let l = self
            .lines
            .get(self.at)
            .copied()
            .ok_or_else(|| malformed(self.at + 1, "unexpected end of file"))?;
        self.at += 1;
        Ok(l)
    }

    /// Tokens after `key` on the next line.
    fn field(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let l = self.next_line()?;
        let mut tokens = l.split(' ');
        if tokens.next() != Some(key) {
            return Err(malformed(self.line_no(), format!("expected '{key}'")));
        }
        Ok(tokens.collect())
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        malformed(self.line_no(), reason)
    }

    fn num<V: std::str::FromStr>(&self, token: &str) -> Result<V> {
        token.parse().map_err(|_| self.err(format!("cannot parse '{token}'")))
    }

    fn one<V: std::str::FromStr>(&mut self, key: &str) -> Result<V> {
        let t = self.field(key)?;
        if t.len() != 1 {
            return Err(self.err(format!("'{key}' takes one value")));
        }
        self.num(t[0])
    }

    fn many<V: std::str::FromStr>(&mut self, key: &str, count: Option<usize>) -> Result<Vec<V>> {
        let t = self.field(key)?;
        if count.is_some_and(|c| c != t.len()) {
            return Err(self.err(format!("'{key}' has {} values, expected {}", t.len(), count.unwrap())));
        }
        t.iter().map(|s| self.num(s)).collect()
    }

    fn flag(&mut self, key: &str) -> Result<bool> {
        match self.one::<u8>(key)? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.err(format!("'{key}' must be 0 or 1"))),
        }
    }

    fn scalars<T: Scalar>(&self, tokens: &[&str]) -> Result<Vec<T>> {
        tokens
            .iter()
            .map(|s| {
                let v: f64 = self.num(s)?;
                if v.is_finite() {
                    Ok(T::lit(v))
                } else {
                    Err(self.err("non-finite value"))
                }
            })
            .collect()
    }

    fn model<T: Scalar>(mut self) -> Result<TdlnModel<T>> {
        self.one::<String>("scalar")?;
        let mode_name: String = self.one("mode")?;
        let mode = Mode::parse(&mode_name).ok_or_else(|| self.err(format!("unknown mode '{mode_name}'")))?;
        let channels: usize = self.one("channels")?;
        let class_count: usize = self.one("classes")?;
        let w: Vec<usize> = self.many("window", Some(2))?;
        let window = WindowSpec::new(w[0], w[1]).map_err(|e| self.err(e.to_string()))?;
        let val_fraction = self.one("val_fraction")?;
        let blstm_hidden = self.one("blstm_hidden")?;
        let lstm_hidden = self.one("lstm_hidden")?;
        let fcnn = self.many("fcnn", None)?;
        let dropout = self.one("dropout")?;
        let forget_bias = self.one("forget_bias")?;
        let epochs = self.one("epochs")?;
        let batch_size = self.one("batch_size")?;
        let learning_rate = self.one("learning_rate")?;
        let adam: Vec<f64> = self.many("adam", Some(3))?;
        let keep_best = self.flag("keep_best")?;
        let n_estimators = self.one("n_estimators")?;
        let max_depth = self.one("max_depth")?;
        let subset: String = self.one("subset_size")?;
        let subset_size = if subset == "auto" { None } else { Some(self.num(&subset)?) };
        let bootstrap = self.flag("bootstrap")?;
        let refine_rounds = self.one("refine_rounds")?;
        let seed = self.one("seed")?;
        let fdr_tokens = self.field("validation_fdr")?;
        if fdr_tokens.len() != class_count {
            return Err(self.err("validation_fdr needs one value per class"));
        }
        let validation_fdr = fdr_tokens
            .iter()
            .map(|t| if *t == "undefined" { Ok(None) } else { self.num(t).map(Some) })
            .collect::<Result<Vec<_>>>()?;
        let eps_tok = self.field("norm_epsilon")?;
        let epsilon = self.scalars::<T>(&eps_tok)?;
        if epsilon.len() != 1 {
            return Err(self.err("norm_epsilon takes one value"));
        }
        let mean_tok = self.field("norm_mean")?;
        let mean = self.scalars(&mean_tok)?;
        let std_tok = self.field("norm_std")?;
        let std = self.scalars(&std_tok)?;
        if mean.len() != channels || std.len() != channels {
            return Err(self.err("normalization vectors need one value per channel"));
        }
        let config = PipelineConfig {
            window,
            val_fraction,
            blstm_hidden,
            lstm_hidden,
            fcnn,
            dropout,
            forget_bias,
            train: TrainConfig {
                epochs,
                batch_size,
                learning_rate,
                adam_beta1: adam[0],
                adam_beta2: adam[1],
                adam_epsilon: adam[2],
                keep_best,
                ..TrainConfig::default()
            },
            forest: ForestConfig {
                n_estimators,
                max_depth,
                subset_size,
                bootstrap,
                seed: 0,
            },
            mode,
            refine_rounds,
            seed,
        };
        let deep = self.deep(&config, channels, class_count)?;
        let forest = self.forest(&config, class_count)?;
        if self.next_line()? != "end" {
            return Err(self.err("expected 'end'"));
        }
        if self.at != self.lines.len() {
            return Err(self.err("trailing content before checksum"));
        }
        let model = TdlnModel {
            mode,
            config,
            channels,
            class_count,
            norm: NormStats {
                mean,
                std,
                epsilon: epsilon[0],
            },
            deep,
            forest,
            validation_fdr,
        };
        model.validate().map_err(|e| malformed(self.at, e.to_string()))?;
        Ok(model)
    }

    fn deep<T: Scalar>(&mut self, config: &PipelineConfig, channels: usize, classes: usize) -> Result<Option<DeepNetParams<T>>> {
        let head = self.field("deep")?;
        if head == ["none"] {
            return Ok(None);
        }
        let count: usize = match head.as_slice() {
            [c] => self.num(c)?,
            _ => return Err(self.err("expected 'deep none' or 'deep <count>'")),
        };
        let mut params =
            DeepNetParams::<T>::zeros(&config.net_shape(channels, classes)).map_err(|e| self.err(e.to_string()))?;
        let expected = params.tensors().len();
        if count != expected {
            return Err(self.err(format!("network has {expected} tensors, file lists {count}")));
        }
        let mut values = Vec::with_capacity(count);
        for k in 0..count {
            let spec: Vec<usize> = self.many("tensor", Some(2))?;
            if spec[0] != k {
                return Err(self.err(format!("expected tensor {k}")));
            }
            let line = self.next_line()?;
            let tokens: Vec<&str> = if line.is_empty() { Vec::new() } else { line.split(' ').collect() };
            if tokens.len() != spec[1] {
                return Err(self.err(format!("tensor {k} lists {} values, header says {}", tokens.len(), spec[1])));
            }
            values.push(self.scalars::<T>(&tokens)?);
        }
        for (k, (dst, src)) in params.tensors_mut().into_iter().zip(values).enumerate() {
            if dst.len() != src.len() {
                return Err(self.err(format!("tensor {k} has {} values, network needs {}", src.len(), dst.len())));
            }
            dst.copy_from_slice(&src);
        }
        Ok(Some(params))
    }

    fn forest<T: Scalar>(&mut self, config: &PipelineConfig, classes: usize) -> Result<Option<ForestModel<T>>> {
        let head = self.field("forest")?;
        if head == ["none"] {
            return Ok(None);
        }
        let (n_trees, features): (usize, usize) = match head.as_slice() {
            [a, b] => (self.num(a)?, self.num(b)?),
            _ => return Err(self.err("expected 'forest none' or 'forest <trees> <features>'")),
        };
        let mut trees = Vec::with_capacity(n_trees);
        let mut subsets = Vec::with_capacity(n_trees);
        for k in 0..n_trees {
            let t = self.field("tree")?;
            if t.len() < 3 || t[2] != "subset" || self.num::<usize>(t[0])? != k {
                return Err(self.err(format!("expected 'tree {k} <nodes> subset …'")));
            }
            let n_nodes: usize = self.num(t[1])?;
            let subset = t[3..].iter().map(|s| self.num(s)).collect::<Result<Vec<usize>>>()?;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let l = self.next_line()?;
                let tokens: Vec<&str> = l.split(' ').collect();
                let node = match tokens.as_slice() {
                    ["split", f, thr] => TreeNode::Split {
                        feature: self.num(f)?,
                        threshold: self.scalars::<T>(&[thr])?[0],
                        left: 0,
                        right: 0,
                    },
                    ["leaf", counts @ ..] => TreeNode::Leaf {
                        counts: counts.iter().map(|c| self.num(c)).collect::<Result<_>>()?,
                    },
                    _ => return Err(self.err("expected a split or leaf record")),
                };
                nodes.push(node);
            }
            trees.push(Tree::from_preorder(nodes, classes, features).map_err(|e| self.err(e.to_string()))?);
            subsets.push(subset);
        }
        Ok(Some(ForestModel {
            trees,
            subsets,
            n_estimators: config.forest.n_estimators,
            max_depth: config.forest.max_depth,
            class_count: classes,
            feature_count: features,
            bootstrap: config.forest.bootstrap,
            seed: derive_forest_seed(config),
        }))
    }
}

fn derive_forest_seed(config: &PipelineConfig) -> u64 {
    crate::numerics::derive_seed(config.seed, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_benchmark, BenchmarkConfig, ProcessSpec};
    use crate::numerics::{Matrix, SeededRng};
    use crate::pipeline::{detect_online, fit_offline};

    fn model(mode: Mode) -> TdlnModel<f64> {
        let spec = ProcessSpec::random(3, 1).unwrap();
        let cfg = BenchmarkConfig {
            class_count: 3,
            train_runs: 2,
            test_runs: 1,
            run_length: 60,
            seed: 2,
        };
        let raw = generate_benchmark::<f64>(&spec, &cfg).unwrap().0;
        let pc = PipelineConfig {
            window: WindowSpec::new(8, 4).unwrap(),
            blstm_hidden: 2,
            lstm_hidden: 3,
            fcnn: vec![5, 4],
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
            forest: ForestConfig {
                n_estimators: 4,
                ..ForestConfig::default()
            },
            mode,
            seed: 11,
            ..PipelineConfig::default()
        };
        fit_offline(&raw, &pc).unwrap().model
    }

    #[test]
    fn roundtrip_every_mode() {
        let mut rng = SeededRng::new(5);
        let buffer = Matrix::from_fn(100, 3, |_, _| rng.uniform(-3.0, 3.0));
        for mode in [Mode::Full, Mode::DlOnly, Mode::MlOnly] {
            let m = model(mode);
            let text = model_to_string(&m).unwrap();
            let back: TdlnModel<f64> = model_from_bytes(text.as_bytes()).unwrap();
            assert_eq!(back, m, "{}", mode.name());
            assert_eq!(detect_online(&back, &buffer).unwrap(), detect_online(&m, &buffer).unwrap());
            assert_eq!(model_to_string(&back).unwrap(), text);
            if mode == Mode::DlOnly {
                assert!(text.contains("\nforest none\n"));
            }
        }
    }

    #[test]
    fn distinct_errors() {
        let text = model_to_string(&model(Mode::Full)).unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(model_from_bytes::<f64>(truncated.as_bytes()), Err(Error::Malformed { .. })));
        let future = text.replacen("version 1", "version 7", 1);
        match model_from_bytes::<f64>(future.as_bytes()) {
            Err(e @ Error::Version { found: 7, supported: 1 }) => {
                let msg = e.to_string();
                assert!(msg.contains('7') && msg.contains('1'));
            }
            other => panic!("{other:?}"),
        }
        let tampered = text.replacen("dropout 0.4", "dropout 0.5", 1);
        assert!(matches!(model_from_bytes::<f64>(tampered.as_bytes()), Err(Error::Checksum { .. })));
        assert!(matches!(model_from_bytes::<f64>(b"junk\n"), Err(Error::Malformed { .. })));
    }

    #[test]
    fn structural_damage_with_valid_checksum_is_malformed() {
        let text = model_to_string(&model(Mode::Full)).unwrap();
        let body = &text[..text.rfind("sha256").unwrap()];
        let broken = body.replacen("\nend\n", "\n", 1);
        let resealed = format!("{broken}sha256 {}\n", digest(broken.as_bytes()));
        assert!(matches!(model_from_bytes::<f64>(resealed.as_bytes()), Err(Error::Malformed { .. })));
    }
}
