//! Offline fitting and online detection for the full detector and its two
//! ablations.
//!
//! Seeds for the split, the network and the forest are all derived from
//! `PipelineConfig::seed`; the seeds inside `train` and `forest` are ignored.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::extratrees::{fit_forest, predict_forest, ForestConfig, ForestModel};
use crate::metrics::{report, DetectionReport};
use crate::network::{extract_features, predict_proba, DeepNetParams, NetShape};
use crate::numerics::{argmax, derive_seed, Matrix, Scalar, SeededRng};
use crate::preprocess::{
    apply_norm, extract_windows, fit_norm_stats, split_train_val, NormStats, RawSeries, WindowMode, WindowSpec,
    WindowedDataset,
};
use crate::training::{train, train_from, TrainConfig, TrainingCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Deep features into the forest.
    Full,
    /// Softmax head of the deep network, no forest.
    DlOnly,
    /// Forest on flattened normalized windows, no deep network.
    MlOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::DlOnly => "dl_only",
            Mode::MlOnly => "ml_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Mode::Full),
            "dl_only" => Some(Mode::DlOnly),
            "ml_only" => Some(Mode::MlOnly),
            _ => None,
        }
    }

    fn uses_deep(self) -> bool {
        self != Mode::MlOnly
    }

    fn uses_forest(self) -> bool {
        self != Mode::DlOnly
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window: WindowSpec,
    pub val_fraction: f64,
    pub blstm_hidden: usize,
    pub lstm_hidden: usize,
    pub fcnn: Vec<usize>,
    pub dropout: f64,
    pub forget_bias: f64,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    pub mode: Mode,
    /// Rounds of (DL training, forest fit); round 2 onward continues from the
    /// previous network.
    pub refine_rounds: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let reference = NetShape::reference(0, 0);
        PipelineConfig {
            window: WindowSpec::default(),
            val_fraction: 0.2,
            blstm_hidden: reference.blstm_hidden,
            lstm_hidden: reference.lstm_hidden,
            fcnn: reference.fcnn,
            dropout: reference.dropout,
            forget_bias: reference.forget_bias,
            train: TrainConfig::default(),
            forest: ForestConfig::default(),
            mode: Mode::Full,
            refine_rounds: 1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn net_shape(&self, input: usize, classes: usize) -> NetShape {
        NetShape {
            input,
            blstm_hidden: self.blstm_hidden,
            lstm_hidden: self.lstm_hidden,
            fcnn: self.fcnn.clone(),
            classes,
            dropout: self.dropout,
            forget_bias: self.forget_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.train.validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid("validation fraction must lie in (0, 1)"));
        }
        if self.refine_rounds == 0 {
            return Err(invalid("refine rounds must be at least 1"));
        }
        if self.forest.n_estimators == 0 {
            return Err(invalid("n_estimators must be at least 1"));
        }
        self.net_shape(1, 2).validate()
    }

    fn train_config(&self, round: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, 0x10 + round as u64),
            ..self.train.clone()
        }
    }

    fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            seed: derive_seed(self.seed, 3),
            ..self.forest.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdlnModel<T> {
    pub mode: Mode,
    pub config: PipelineConfig,
    pub channels: usize,
    pub class_count: usize,
    pub norm: NormStats<T>,
    pub deep: Option<DeepNetParams<T>>,
    pub forest: Option<ForestModel<T>>,
    /// Per-class FDR on the validation split at fit time.
    pub validation_fdr: Vec<Option<f64>>,
}

impl<T: Scalar> TdlnModel<T> {
    /// Checks that the parts present match the mode and agree on sizes.
    pub fn validate(&self) -> Result<()> {
        if self.deep.is_some() != self.mode.uses_deep() || self.forest.is_some() != self.mode.uses_forest() {
            return Err(invalid(format!("model parts do not match mode {}", self.mode.name())));
        }
        if self.norm.mean.len() != self.channels || self.norm.std.len() != self.channels {
            return Err(invalid("normalization width differs from channel count"));
        }
        if let Some(deep) = &self.deep {
            deep.validate()?;
            if deep.input_size() != self.channels || deep.class_count() != self.class_count {
                return Err(invalid("network shape disagrees with model channels or classes"));
            }
        }
        if let Some(forest) = &self.forest {
            let want = match &self.deep {
                Some(deep) => deep.feature_size(),
                None => self.config.window.width * self.channels,
            };
            if forest.feature_count != want || forest.class_count != self.class_count {
                return Err(invalid(format!(
                    "forest expects {} features and {} classes, model provides {want} and {}",
                    forest.feature_count, forest.class_count, self.class_count
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub index: usize,
    pub start: usize,
    /// Exclusive; shorter than the window width for a provisional window.
    pub end: usize,
    pub predicted: usize,
    pub probabilities: Vec<T>,
    pub provisional: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub model: TdlnModel<T>,
    /// One curve per refinement round; empty in ml_only mode.
    pub curves: Vec<TrainingCurve>,
    pub validation: DetectionReport,
}

/// Windows, normalization and the stratified split shared by every mode.
struct Prepared<T> {
    norm: NormStats<T>,
    train: WindowedDataset<T>,
    val: WindowedDataset<T>,
    channels: usize,
    classes: usize,
}

fn prepare<T: Scalar>(raw: &RawSeries<T>, config: &PipelineConfig) -> Result<Prepared<T>> {
    config.validate()?;
    let classes = raw.class_count();
    if classes < 2 {
        return Err(invalid("training data needs at least two classes"));
    }
    if !raw.labels().contains(&0) {
        return Err(invalid("training data has no class-0 (normal) rows"));
    }
    let norm = fit_norm_stats(raw)?;
    let windows = extract_windows(raw, config.window, WindowMode::Offline)?.normalized(&norm)?;
    if windows.is_empty() {
        return Err(Error::Empty("training windows (every run is shorter than the window width)"));
    }
    let mut split_rng = SeededRng::new(derive_seed(config.seed, 1));
    let (train, val) = split_train_val(&windows, config.val_fraction, &mut split_rng)?;
    Ok(Prepared {
        norm,
        train,
        val,
        channels: raw.channels(),
        classes,
    })
}

fn deep_feature_matrix<T: Scalar>(deep: &DeepNetParams<T>, ds: &WindowedDataset<T>) -> Result<Matrix<T>> {
    let rows: Vec<Result<Vec<T>>> = ds.features.par_iter().map(|w| extract_features(deep, w)).collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

fn fit_forest_for<T: Scalar>(
    mode: Mode,
    deep: Option<&DeepNetParams<T>>,
    ds: &WindowedDataset<T>,
    classes: usize,
    config: &PipelineConfig,
) -> Result<ForestModel<T>> {
    let x = match (mode, deep) {
        (Mode::Full, Some(deep)) => deep_feature_matrix(deep, ds)?,
        (Mode::MlOnly, _) => ds.flattened()?,
        _ => return Err(invalid("forest requested without its input")),
    };
    fit_forest(&x, &ds.labels, classes, &config.forest_config())
}

fn train_deep<T: Scalar>(
    prep: &Prepared<T>,
    config: &PipelineConfig,
    previous: Option<DeepNetParams<T>>,
    round: usize,
) -> Result<(DeepNetParams<T>, TrainingCurve)> {
    let tc = config.train_config(round);
    match previous {
        None => train(&config.net_shape(prep.channels, prep.classes), &prep.train, &prep.val, &tc),
        Some(p) => train_from(p, &prep.train, &prep.val, &tc),
    }
}

fn assemble<T: Scalar>(
    mode: Mode,
    prep: &Prepared<T>,
    config: &PipelineConfig,
    deep: Option<DeepNetParams<T>>,
    forest: Option<ForestModel<T>>,
    curves: Vec<TrainingCurve>,
) -> Result<FitOutcome<T>> {
    let mut model = TdlnModel {
        mode,
        config: stored_config(config, mode),
        channels: prep.channels,
        class_count: prep.classes,
        norm: prep.norm.clone(),
        deep,
        forest,
        validation_fdr: Vec::new(),
    };
    model.validate()?;
    let validation = evaluate_windows(&model, &prep.val)?;
    model.validation_fdr = validation.fdr.clone();
    Ok(FitOutcome {
        model,
        curves,
        validation,
    })
}

/// The config kept in a model: the derived-seed fields and the progress flag
/// are cleared since they do not affect the fitted model beyond `seed`.
fn stored_config(config: &PipelineConfig, mode: Mode) -> PipelineConfig {
    let mut c = config.clone();
    c.mode = mode;
    c.train.seed = 0;
    c.train.progress = false;
    c.forest.seed = 0;
    c
}

/// Fits a model in `config.mode` on a labeled series.
pub fn fit_offline<T: Scalar>(raw: &RawSeries<T>, config: &PipelineConfig) -> Result<FitOutcome<T>> {
    let prep = prepare(raw, config)?;
    let mode = config.mode;
    let mut deep = None;
    let mut forest = None;
    let mut curves = Vec::new();
    let rounds = if mode == Mode::Full { config.refine_rounds } else { 1 };
    for round in 0..rounds {
        if mode.uses_deep() {
            let (d, curve) = train_deep(&prep, config, deep.take(), round)?;
            deep = Some(d);
            curves.push(curve);
        }
        if mode.uses_forest() {
            forest = Some(fit_forest_for(mode, deep.as_ref(), &prep.train, prep.classes, config)?);
        }
    }
    assemble(mode, &prep, config, deep, forest, curves)
}

/// Full, dl_only and ml_only models from one network training run.
pub struct Ablation<T> {
    pub full: FitOutcome<T>,
    pub dl_only: FitOutcome<T>,
    pub ml_only: FitOutcome<T>,
}

/// Trains the deep network once and derives all three variants from it, so the
/// full and dl_only models share their deep parameters exactly.
pub fn fit_ablation<T: Scalar>(raw: &RawSeries<T>, config: &PipelineConfig) -> Result<Ablation<T>> {
    let prep = prepare(raw, config)?;
    let (deep, curve) = train_deep(&prep, config, None, 0)?;
    let full_forest = fit_forest_for(Mode::Full, Some(&deep), &prep.train, prep.classes, config)?;
    let ml_forest = fit_forest_for::<T>(Mode::MlOnly, None, &prep.train, prep.classes, config)?;
    Ok(Ablation {
        full: assemble(
            Mode::Full,
            &prep,
            config,
            Some(deep.clone()),
            Some(full_forest),
            vec![curve.clone()],
        )?,
        dl_only: assemble(Mode::DlOnly, &prep, config, Some(deep), None, vec![curve])?,
        ml_only: assemble(Mode::MlOnly, &prep, config, None, Some(ml_forest), Vec::new())?,
    })
}

/// Class id and probabilities for one already normalized window.
pub fn classify_window<T: Scalar>(model: &TdlnModel<T>, window: &Matrix<T>) -> Result<(usize, Vec<T>)> {
    match (model.mode, &model.deep, &model.forest) {
        (Mode::Full, Some(deep), Some(forest)) => predict_forest(forest, &extract_features(deep, window)?),
        (Mode::DlOnly, Some(deep), _) => {
            let p = predict_proba(deep, window)?;
            Ok((argmax(&p), p))
        }
        (Mode::MlOnly, _, Some(forest)) => predict_forest(forest, window.data()),
        _ => Err(invalid("model parts do not match its mode")),
    }
}

fn evaluate_windows<T: Scalar>(model: &TdlnModel<T>, ds: &WindowedDataset<T>) -> Result<DetectionReport> {
    let out: Vec<Result<(usize, Vec<T>)>> = ds.features.par_iter().map(|w| classify_window(model, w)).collect();
    let mut predicted = Vec::with_capacity(out.len());
    let mut probs = Vec::with_capacity(out.len());
    for r in out {
        let (c, p) = r?;
        predicted.push(c);
        probs.push(p.iter().map(|v| v.to_f64_lossy()).collect());
    }
    report(&predicted, &probs, &ds.labels, model.class_count)
}

/// Windows an unlabeled buffer with the model's window spec and classifies
/// every window. A buffer shorter than the width gives one provisional window.
pub fn detect_online<T: Scalar>(model: &TdlnModel<T>, buffer: &Matrix<T>) -> Result<Vec<Detection<T>>> {
    if buffer.cols() != model.channels {
        return Err(Error::ChannelMismatch {
            expected: model.channels,
            found: buffer.cols(),
        });
    }
    if buffer.rows() == 0 {
        return Err(Error::Empty("detection buffer"));
    }
    let series = RawSeries::unlabeled(buffer.clone())?;
    let windows = extract_windows(&series, model.config.window, WindowMode::Online)?;
    let width = model.config.window.width;
    let results: Vec<Result<Detection<T>>> = (0..windows.len())
        .into_par_iter()
        .map(|k| {
            let w = apply_norm(&windows.features[k], &model.norm)?;
            let (predicted, probabilities) = classify_window(model, &w)?;
            let start = windows.starts[k];
            Ok(Detection {
                index: k,
                start,
                end: (start + width).min(buffer.rows()),
                predicted,
                probabilities,
                provisional: windows.provisional[k],
            })
        })
        .collect();
    results.into_iter().collect()
}
