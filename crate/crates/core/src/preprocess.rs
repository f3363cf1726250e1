//! Sliding-window extraction, normal-state normalization and one-hot labels.

use crate::error::{invalid, Error, Result, Shape};
use crate::numerics::{Matrix, Scalar, SeededRng};

/// Labelled multichannel time series: one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries<T> {
    values: Matrix<T>,
    labels: Vec<usize>,
    class_count: usize,
}

impl<T: Scalar> RawSeries<T> {
    pub fn new(values: Matrix<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Empty("raw series"));
        }
        if labels.len() != values.rows() {
            return Err(Error::DimensionMismatch {
                context: "RawSeries labels",
                left: values.shape(),
                right: Shape(labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(invalid(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(RawSeries {
            values,
            labels,
            class_count,
        })
    }

    /// Series with every row labelled 0, used for unlabeled online buffers.
    pub fn unlabeled(values: Matrix<T>) -> Result<Self> {
        let n = values.rows();
        Self::new(values, vec![0; n], 1)
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Appends another series with the same channel count.
    pub fn concat(&self, other: &RawSeries<T>) -> Result<RawSeries<T>> {
        if other.channels() != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                found: other.channels(),
            });
        }
        let mut data = self.values.data().to_vec();
        data.extend_from_slice(other.values.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let values = Matrix::from_vec(labels.len(), self.channels(), data)?;
        RawSeries::new(values, labels, self.class_count.max(other.class_count))
    }
}

/// Window width and stride, both in time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub width: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            width: 30,
            stride: 20,
        }
    }
}

impl WindowSpec {
    pub fn new(width: usize, stride: usize) -> Result<Self> {
        let spec = WindowSpec { width, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.stride == 0 {
            return Err(invalid(format!(
                "window width and stride must be positive (got w={}, s={})",
                self.width, self.stride
            )));
        }
        Ok(())
    }

    /// ⌊(n − w)/s⌋ + 1 for n ≥ w, otherwise 0.
    pub fn window_count(&self, n: usize) -> usize {
        if n < self.width {
            0
        } else {
            (n - self.width) / self.stride + 1
        }
    }
}

/// How runs shorter than the window width are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Short runs are dropped and counted.
    Offline,
    /// A short run yields one provisional window padded by repeating its last row.
    Online,
}

/// Maximal runs of constant label as `(start, len)`.
pub fn label_runs(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            runs.push((start, i - start));
            start = i;
        }
    }
    runs
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset<T> {
    pub features: Vec<Matrix<T>>,
    pub labels_onehot: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    /// Row index in the source series where each window begins.
    pub starts: Vec<usize>,
    pub provisional: Vec<bool>,
    pub class_count: usize,
    /// Offline mode: runs shorter than the width that produced no window.
    pub dropped_short_runs: usize,
}

impl<T: Scalar> WindowedDataset<T> {
    pub fn empty(class_count: usize) -> Self {
        WindowedDataset {
            features: Vec::new(),
            labels_onehot: Vec::new(),
            labels: Vec::new(),
            starts: Vec::new(),
            provisional: Vec::new(),
            class_count,
            dropped_short_runs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn window_count(&self) -> usize {
        self.len()
    }

    pub fn push(&mut self, window: Matrix<T>, label: usize, start: usize, provisional: bool) -> Result<()> {
        self.labels_onehot.push(one_hot(label, self.class_count)?);
        self.features.push(window);
        self.labels.push(label);
        self.starts.push(start);
        self.provisional.push(provisional);
        Ok(())
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = WindowedDataset::empty(self.class_count);
        for &i in indices {
            out.features.push(self.features[i].clone());
            out.labels_onehot.push(self.labels_onehot[i].clone());
            out.labels.push(self.labels[i]);
            out.starts.push(self.starts[i]);
            out.provisional.push(self.provisional[i]);
        }
        out
    }

    pub fn normalized(&self, stats: &NormStats<T>) -> Result<Self> {
        let mut out = self.clone();
        for w in &mut out.features {
            *w = apply_norm(w, stats)?;
        }
        Ok(out)
    }

    /// Windows flattened row-major into one feature row each.
    pub fn flattened(&self) -> Result<Matrix<T>> {
        let width = self.features.first().map_or(0, |w| w.data().len());
        let mut data = Vec::with_capacity(width * self.len());
        for w in &self.features {
            data.extend_from_slice(w.data());
        }
        Matrix::from_vec(self.len(), width, data)
    }
}

/// Start offsets `0, s, 2s, …` of every full window in a run of length `n`.
pub fn window_starts(n: usize, spec: WindowSpec) -> Vec<usize> {
    (0..spec.window_count(n)).map(|k| k * spec.stride).collect()
}

fn copy_rows<T: Scalar>(values: &Matrix<T>, start: usize, len: usize, width: usize) -> Matrix<T> {
    let d = values.cols();
    let mut data = Vec::with_capacity(width * d);
    for r in 0..len {
        data.extend_from_slice(values.row(start + r));
    }
    let last = values.row(start + len - 1);
    for _ in len..width {
        data.extend_from_slice(last);
    }
    Matrix::from_fn(width, d, |r, c| data[r * d + c])
}

/// Cut the series into label-homogeneous windows.
///
/// The series is first split into maximal constant-label runs; windows never
/// cross a run boundary.
pub fn extract_windows<T: Scalar>(
    series: &RawSeries<T>,
    spec: WindowSpec,
    mode: WindowMode,
) -> Result<WindowedDataset<T>> {
    spec.validate()?;
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    let mut ds = WindowedDataset::empty(series.class_count());
    for (run_start, run_len) in label_runs(series.labels()) {
        let label = series.labels()[run_start];
        if run_len < spec.width {
            match mode {
                WindowMode::Offline => ds.dropped_short_runs += 1,
                WindowMode::Online => {
                    let w = copy_rows(series.values(), run_start, run_len, spec.width);
                    ds.push(w, label, run_start, true)?;
                }
            }
            continue;
        }
        for offset in window_starts(run_len, spec) {
            let start = run_start + offset;
            let w = copy_rows(series.values(), start, spec.width, spec.width);
            ds.push(w, label, start, false)?;
        }
    }
    Ok(ds)
}

/// Per-channel normal-state statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub epsilon: T,
}

pub const DEFAULT_NORM_EPSILON: f64 = 1e-8;

/// Mean and population standard deviation over label-0 rows only.
pub fn fit_norm_stats<T: Scalar>(series: &RawSeries<T>) -> Result<NormStats<T>> {
    fit_norm_stats_with(series, T::lit(DEFAULT_NORM_EPSILON))
}

pub fn fit_norm_stats_with<T: Scalar>(series: &RawSeries<T>, epsilon: T) -> Result<NormStats<T>> {
    if !(epsilon > T::zero()) {
        return Err(invalid("normalization epsilon must be positive"));
    }
    let normal: Vec<usize> = (0..series.len()).filter(|&i| series.labels()[i] == 0).collect();
    if normal.len() < 2 {
        return Err(invalid(format!(
            "need at least 2 normal (label 0) rows to fit normalization, found {}",
            normal.len()
        )));
    }
    let d = series.channels();
    let count = T::from_usize(normal.len()).unwrap();
    let mut mean = vec![T::zero(); d];
    for &i in &normal {
        for (m, &v) in mean.iter_mut().zip(series.values().row(i)) {
            *m = *m + v;
        }
    }
    for m in &mut mean {
        *m = *m / count;
    }
    let mut var = vec![T::zero(); d];
    for &i in &normal {
        for ((s, &v), &m) in var.iter_mut().zip(series.values().row(i)).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / count).sqrt()).collect();
    Ok(NormStats { mean, std, epsilon })
}

/// `(x − mean_j) / (std_j + epsilon)` per channel.
pub fn apply_norm<T: Scalar>(window: &Matrix<T>, stats: &NormStats<T>) -> Result<Matrix<T>> {
    check_norm_dims(window, stats)?;
    Ok(Matrix::from_fn(window.rows(), window.cols(), |r, c| {
        (window.get(r, c) - stats.mean[c]) / (stats.std[c] + stats.epsilon)
    }))
}

/// Inverse of [`apply_norm`].
pub fn invert_norm<T: Scalar>(window: &Matrix<T>, stats: &NormStats<T>) -> Result<Matrix<T>> {
    check_norm_dims(window, stats)?;
    Ok(Matrix::from_fn(window.rows(), window.cols(), |r, c| {
        window.get(r, c) * (stats.std[c] + stats.epsilon) + stats.mean[c]
    }))
}

fn check_norm_dims<T: Scalar>(window: &Matrix<T>, stats: &NormStats<T>) -> Result<()> {
    if window.cols() != stats.mean.len() {
        return Err(Error::DimensionMismatch {
            context: "apply_norm",
            left: window.shape(),
            right: Shape(1, stats.mean.len()),
        });
    }
    Ok(())
}

pub fn one_hot<T: Scalar>(label: usize, n: usize) -> Result<Vec<T>> {
    if label >= n {
        return Err(invalid(format!("label {label} out of range for {n} classes")));
    }
    let mut v = vec![T::zero(); n];
    v[label] = T::one();
    Ok(v)
}

/// Stratified shuffle split. Each class keeps `round(count × val_fraction)`
/// windows for validation, clamped so both parts receive at least one.
pub fn split_train_val<T: Scalar>(
    ds: &WindowedDataset<T>,
    val_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(WindowedDataset<T>, WindowedDataset<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(invalid(format!("validation fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..ds.class_count {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(invalid(format!(
                "class {class} has {} window(s); a stratified split needs at least 2",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n_val = ((members.len() as f64 * val_fraction).round() as usize).clamp(1, members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.select(&train), ds.select(&val)))
}
