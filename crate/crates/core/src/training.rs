//! Mini-batch Adam training of the deep network.
//!
//! Batches are split into at most [`GRADIENT_PARTIALS`] contiguous chunks.
//! Chunks run in parallel, each summing its windows in order, and the chunk
//! sums are then added in chunk order. The reduction order depends only on the
//! batch length, so the thread count never changes the result.

use std::time::Instant;

use rayon::prelude::*;

use crate::dense::DropoutMask;
use crate::error::{invalid, Error, Result, Shape};
use crate::network::{loss_and_gradient, net_forward, DeepNetParams, NetShape};
use crate::numerics::{argmax, Scalar, SeededRng};
use crate::preprocess::WindowedDataset;
use crate::dense::cross_entropy;

pub const GRADIENT_PARTIALS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Return the parameters of the epoch with the best validation accuracy
    /// instead of the last epoch.
    pub keep_best: bool,
    /// Print one tab-separated progress line per epoch to stderr.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 1024,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            keep_best: false,
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) {
            return Err(invalid("learning rate and Adam epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(tensors: &[&[T]]) -> Self {
        AdamState {
            m: tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            v: tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over matching lists of tensors.
pub fn adam_step<T: Scalar>(
    params: Vec<&mut [T]>,
    grads: Vec<&[T]>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            context: "adam_step tensor count",
            left: Shape(params.len(), 1),
            right: Shape(grads.len(), state.m.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::DimensionMismatch {
                context: "adam_step tensor length",
                left: Shape(p.len(), 1),
                right: Shape(g.len(), m.len()),
            });
        }
    }
    state.t += 1;
    let b1 = T::lit(config.adam_beta1);
    let b2 = T::lit(config.adam_beta2);
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.adam_epsilon);
    let one = T::one();
    let t = state.t as i32;
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-epoch accuracy, loss and wall-clock time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub train_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl TrainingCurve {
    pub fn epochs(&self) -> usize {
        self.val_accuracy.len()
    }

    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_acc\ttrain_loss\tval_acc\tval_loss\tseconds\n");
        for e in 0..self.epochs() {
            out.push_str(&progress_line(e + 1, self, e));
            out.push('\n');
        }
        out
    }
}

fn progress_line(epoch: usize, curve: &TrainingCurve, e: usize) -> String {
    format!(
        "{epoch}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
        curve.train_accuracy[e], curve.train_loss[e], curve.val_accuracy[e], curve.val_loss[e], curve.seconds[e]
    )
}

/// Accuracy and mean cross-entropy with dropout disabled.
pub fn evaluate_epoch<T: Scalar>(params: &DeepNetParams<T>, dataset: &WindowedDataset<T>) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let per_window: Vec<Result<(bool, f64)>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let fwd = net_forward(params, &dataset.features[i], None)?;
            let loss = cross_entropy(&fwd.probabilities, &dataset.labels_onehot[i])?;
            let hit = argmax(&fwd.probabilities) == argmax(&dataset.labels_onehot[i]);
            Ok((hit, loss.to_f64_lossy()))
        })
        .collect();
    let mut correct = 0usize;
    let mut total = 0.0;
    for r in per_window {
        let (hit, loss) = r?;
        correct += usize::from(hit);
        total += loss;
    }
    let n = dataset.len() as f64;
    Ok((correct as f64 / n, total / n))
}

fn check_dataset<T: Scalar>(ds: &WindowedDataset<T>, params: &DeepNetParams<T>, what: &'static str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Empty(what));
    }
    for (w, y) in ds.features.iter().zip(&ds.labels_onehot) {
        if w.cols() != params.input_size() || y.len() != params.class_count() {
            return Err(Error::DimensionMismatch {
                context: what,
                left: Shape(params.input_size(), params.class_count()),
                right: Shape(w.cols(), y.len()),
            });
        }
    }
    Ok(())
}

/// Sum of per-window gradients plus loss and hit count for one chunk.
struct ChunkResult<T> {
    grads: DeepNetParams<T>,
    loss: f64,
    correct: usize,
}

fn chunk_gradient<T: Scalar>(
    params: &DeepNetParams<T>,
    data: &WindowedDataset<T>,
    items: &[(usize, DropoutMask<T>)],
) -> Result<ChunkResult<T>> {
    let mut acc = params.zeros_like();
    let mut loss = 0.0;
    let mut correct = 0;
    for (idx, mask) in items {
        let onehot = &data.labels_onehot[*idx];
        let (l, probs, g) = loss_and_gradient(params, &data.features[*idx], onehot, Some(mask))?;
        acc.add_assign(&g);
        loss += l.to_f64_lossy();
        correct += usize::from(argmax(&probs) == argmax(onehot));
    }
    Ok(ChunkResult {
        grads: acc,
        loss,
        correct,
    })
}

/// Initializes a network from `shape` and trains it.
pub fn train<T: Scalar>(
    shape: &NetShape,
    train_set: &WindowedDataset<T>,
    val_set: &WindowedDataset<T>,
    config: &TrainConfig,
) -> Result<(DeepNetParams<T>, TrainingCurve)> {
    config.validate()?;
    let mut init_rng = SeededRng::new(config.seed).fork(1);
    let params = DeepNetParams::init(shape, &mut init_rng)?;
    train_from(params, train_set, val_set, config)
}

/// Continues training from existing parameters with a fresh optimizer state.
pub fn train_from<T: Scalar>(
    mut params: DeepNetParams<T>,
    train_set: &WindowedDataset<T>,
    val_set: &WindowedDataset<T>,
    config: &TrainConfig,
) -> Result<(DeepNetParams<T>, TrainingCurve)> {
    config.validate()?;
    params.validate()?;
    check_dataset(train_set, &params, "training set")?;
    check_dataset(val_set, &params, "validation set")?;

    let base = SeededRng::new(config.seed);
    let mut order_rng = base.fork(2);
    let mut dropout_rng = base.fork(3);
    let mut adam = AdamState::new(&params.tensors());
    let mut curve = TrainingCurve::default();
    let mut best: Option<(f64, DeepNetParams<T>)> = None;
    let first_width = params.hidden[0].output_size();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let mut items = Vec::with_capacity(batch.len());
            for &idx in batch {
                items.push((idx, DropoutMask::draw(first_width, params.dropout, &mut dropout_rng)?));
            }
            let chunk = batch.len().div_ceil(GRADIENT_PARTIALS);
            let partials: Vec<Result<ChunkResult<T>>> = items
                .par_chunks(chunk)
                .map(|c| chunk_gradient(&params, train_set, c))
                .collect();
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for p in partials {
                let p = p?;
                grads.add_assign(&p.grads);
                batch_loss += p.loss;
                epoch_correct += p.correct;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no + 1,
                });
            }
            epoch_loss += batch_loss;
            grads.scale(T::one() / T::from_usize(batch.len()).unwrap());
            adam_step(params.tensors_mut(), grads.tensors(), &mut adam, config)?;
        }
        let (val_acc, val_loss) = evaluate_epoch(&params, val_set)?;
        let n = train_set.len() as f64;
        curve.train_accuracy.push(epoch_correct as f64 / n);
        curve.train_loss.push(epoch_loss / n);
        curve.val_accuracy.push(val_acc);
        curve.val_loss.push(val_loss);
        curve.seconds.push(started.elapsed().as_secs_f64());
        if config.progress {
            eprintln!("epoch\t{}", progress_line(epoch, &curve, epoch - 1));
        }
        if config.keep_best && best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, params.clone()));
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn tiny_shape(input: usize, classes: usize) -> NetShape {
        NetShape {
            input,
            blstm_hidden: 3,
            lstm_hidden: 3,
            fcnn: vec![6, 4],
            classes,
            dropout: 0.0,
            forget_bias: 1.0,
        }
    }

    /// Class 0 drifts down, class 1 drifts up.
    fn separable(n: usize, seed: u64) -> WindowedDataset<f64> {
        let mut rng = SeededRng::new(seed);
        let mut ds = WindowedDataset::empty(2);
        for k in 0..n {
            let label = k % 2;
            let sign = if label == 0 { -1.0 } else { 1.0 };
            let w = Matrix::from_fn(5, 2, |t, _| sign * 0.3 * t as f64 + rng.uniform(-0.1, 0.1));
            ds.push(w, label, k, false).unwrap();
        }
        ds
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut theta = vec![0.5, -1.0];
        let mut state = AdamState::new(&[&theta[..]]);
        adam_step(vec![&mut theta[..]], vec![&[0.0, 0.0][..]], &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(theta, vec![0.5, -1.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_value() {
        let mut theta = vec![0.0f64];
        let mut state = AdamState::new(&[&theta[..]]);
        adam_step(vec![&mut theta[..]], vec![&[1.0][..]], &mut state, &TrainConfig::default()).unwrap();
        // −0.001 / (1 + 1e−8)
        assert!((theta[0] - (-0.000999999990000000099999999)).abs() < 1e-18);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut theta = vec![0.0f64; 2];
        let mut state = AdamState::new(&[&theta[..]]);
        let r = adam_step(vec![&mut theta[..]], vec![&[1.0][..]], &mut state, &TrainConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn rejects_zero_epochs_and_empty_sets() {
        let ds = separable(4, 1);
        let bad = TrainConfig { epochs: 0, ..cfg() };
        assert!(train(&tiny_shape(2, 2), &ds, &ds, &bad).is_err());
        let empty = WindowedDataset::<f64>::empty(2);
        assert!(train(&tiny_shape(2, 2), &empty, &ds, &cfg()).is_err());
    }

    #[test]
    fn learns_separable_toy_problem() {
        let train_set = separable(20, 1);
        let val_set = separable(10, 2);
        let (params, curve) = train(&tiny_shape(2, 2), &train_set, &val_set, &cfg()).unwrap();
        assert_eq!(curve.val_accuracy.len(), 30);
        assert_eq!(*curve.train_accuracy.last().unwrap(), 1.0);
        let (acc, _) = evaluate_epoch(&params, &train_set).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let train_set = separable(12, 3);
        let val_set = separable(6, 4);
        let c = TrainConfig { epochs: 4, ..cfg() };
        let mut shape = tiny_shape(2, 2);
        shape.dropout = 0.4;
        let a = train(&shape, &train_set, &val_set, &c).unwrap();
        let b = train(&shape, &train_set, &val_set, &c).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.val_loss, b.1.val_loss);
        assert_eq!(a.1.train_loss, b.1.train_loss);
    }

    #[test]
    fn overfit_loss_mostly_decreases() {
        let train_set = separable(4, 9);
        let c = TrainConfig {
            epochs: 15,
            batch_size: 4,
            ..cfg()
        };
        let (_, curve) = train(&tiny_shape(2, 2), &train_set, &train_set, &c).unwrap();
        let increases = curve.val_loss[3..].windows(2).filter(|w| w[1] > w[0]).count();
        assert!(increases <= 2, "{:?}", curve.val_loss);
    }

    #[test]
    fn evaluate_recount() {
        let mut rng = SeededRng::new(3);
        let net = DeepNetParams::<f64>::init(&tiny_shape(2, 3), &mut rng).unwrap();
        let mut ds = WindowedDataset::empty(3);
        for k in 0..9 {
            ds.push(Matrix::from_fn(4, 2, |_, _| rng.uniform(-2.0, 2.0)), k % 3, k, false).unwrap();
        }
        let (acc, loss) = evaluate_epoch(&net, &ds).unwrap();
        let mut hits = 0;
        let mut total = 0.0;
        for k in 0..9 {
            let p = crate::network::predict_proba(&net, &ds.features[k]).unwrap();
            let mut best = 0;
            for c in 1..3 {
                if p[c] > p[best] {
                    best = c;
                }
            }
            hits += usize::from(best == ds.labels[k]);
            total += -p[ds.labels[k]].ln();
        }
        assert_eq!(acc, hits as f64 / 9.0);
        assert!((loss - total / 9.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_predictor_loss_is_ln_n() {
        let net = DeepNetParams::<f64>::zeros(&tiny_shape(2, 4)).unwrap();
        let mut ds = WindowedDataset::empty(4);
        for k in 0..4 {
            ds.push(Matrix::from_fn(3, 2, |r, c| (r * c) as f64), k, k, false).unwrap();
        }
        let (_, loss) = evaluate_epoch(&net, &ds).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }
}
