//! The deep half of the detector: BLSTM → LSTM → SELU dense stack → softmax.
//!
//! Dropout sits after the first dense layer. The feature vector handed to the
//! tree ensemble is the post-activation output of the last hidden dense layer.

use crate::dense::{
    cross_entropy, dense_backward, dense_forward_cached, softmax_cross_entropy_grad, Activation, DenseCache,
    DenseParams, DropoutMask,
};
use crate::error::{invalid, Error, Result, Shape};
use crate::numerics::{softmax, Matrix, Scalar, SeededRng};
use crate::recurrent::{blstm_backward, blstm_forward, lstm_backward, lstm_forward, BlstmCache, BlstmParams, LstmParams, SequenceCache};

/// Layer sizes of the deep network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetShape {
    /// Channels per time step.
    pub input: usize,
    /// Hidden units per BLSTM direction.
    pub blstm_hidden: usize,
    pub lstm_hidden: usize,
    /// Hidden dense layer widths, e.g. `[500, 180]`.
    pub fcnn: Vec<usize>,
    pub classes: usize,
    pub dropout: f64,
    pub forget_bias: f64,
}

impl NetShape {
    /// Full-size layout: 128 per BLSTM direction, LSTM 128, dense 500 → 180.
    pub fn reference(input: usize, classes: usize) -> Self {
        NetShape {
            input,
            blstm_hidden: 128,
            lstm_hidden: 128,
            fcnn: vec![500, 180],
            classes,
            dropout: 0.4,
            forget_bias: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.blstm_hidden == 0 || self.lstm_hidden == 0 || self.classes < 2 {
            return Err(invalid(format!("degenerate network shape {self:?}")));
        }
        if self.fcnn.is_empty() || self.fcnn.contains(&0) {
            return Err(invalid("at least one non-empty hidden dense layer is required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout rate must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        *self.fcnn.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepNetParams<T> {
    pub blstm: BlstmParams<T>,
    pub lstm: LstmParams<T>,
    /// SELU layers; dropout follows the first.
    pub hidden: Vec<DenseParams<T>>,
    /// Linear logits layer feeding softmax.
    pub head: DenseParams<T>,
    pub dropout: f64,
}

impl<T: Scalar> DeepNetParams<T> {
    pub fn init(shape: &NetShape, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let blstm = BlstmParams::init(shape.input, shape.blstm_hidden, shape.forget_bias, rng);
        let lstm = LstmParams::init(2 * shape.blstm_hidden, shape.lstm_hidden, shape.forget_bias, rng);
        let mut hidden = Vec::new();
        let mut prev = shape.lstm_hidden;
        for &units in &shape.fcnn {
            hidden.push(DenseParams::init(prev, units, Activation::Selu, rng));
            prev = units;
        }
        let head = DenseParams::init(prev, shape.classes, Activation::Linear, rng);
        Ok(DeepNetParams {
            blstm,
            lstm,
            hidden,
            head,
            dropout: shape.dropout,
        })
    }

    pub fn zeros(shape: &NetShape) -> Result<Self> {
        shape.validate()?;
        let mut hidden = Vec::new();
        let mut prev = shape.lstm_hidden;
        for &units in &shape.fcnn {
            hidden.push(DenseParams::zeros(prev, units, Activation::Selu));
            prev = units;
        }
        Ok(DeepNetParams {
            blstm: BlstmParams::zeros(shape.input, shape.blstm_hidden),
            lstm: LstmParams::zeros(2 * shape.blstm_hidden, shape.lstm_hidden),
            hidden,
            head: DenseParams::zeros(prev, shape.classes, Activation::Linear),
            dropout: shape.dropout,
        })
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            input: self.blstm.input_size(),
            blstm_hidden: self.blstm.hidden_size(),
            lstm_hidden: self.lstm.hidden_size(),
            fcnn: self.hidden.iter().map(DenseParams::output_size).collect(),
            classes: self.head.output_size(),
            dropout: self.dropout,
            forget_bias: 0.0,
        }
    }

    pub fn input_size(&self) -> usize {
        self.blstm.input_size()
    }

    pub fn class_count(&self) -> usize {
        self.head.output_size()
    }

    pub fn feature_size(&self) -> usize {
        self.hidden.last().map_or(0, DenseParams::output_size)
    }

    /// Checks that consecutive layers agree on their widths.
    pub fn validate(&self) -> Result<()> {
        self.blstm.validate()?;
        self.lstm.validate()?;
        let expect = |what: &'static str, want: usize, got: usize| -> Result<()> {
            if want != got {
                return Err(Error::DimensionMismatch {
                    context: what,
                    left: Shape(want, 1),
                    right: Shape(got, 1),
                });
            }
            Ok(())
        };
        expect("LSTM input vs BLSTM output", 2 * self.blstm.hidden_size(), self.lstm.input_size())?;
        if self.hidden.is_empty() {
            return Err(invalid("network has no hidden dense layer"));
        }
        let mut prev = self.lstm.hidden_size();
        for layer in &self.hidden {
            layer.validate()?;
            expect("dense layer input", prev, layer.input_size())?;
            prev = layer.output_size();
        }
        self.head.validate()?;
        expect("head input", prev, self.head.input_size())?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout rate must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        DeepNetParams {
            blstm: self.blstm.zeros_like(),
            lstm: self.lstm.zeros_like(),
            hidden: self.hidden.iter().map(DenseParams::zeros_like).collect(),
            head: self.head.zeros_like(),
            dropout: self.dropout,
        }
    }

    /// Every parameter tensor in a fixed order: BLSTM forward, BLSTM reverse,
    /// LSTM, hidden dense layers, head.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.blstm.tensors();
        v.extend(self.lstm.tensors());
        for layer in &self.hidden {
            v.extend(layer.tensors());
        }
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.blstm.tensors_mut();
        v.extend(self.lstm.tensors_mut());
        for layer in &mut self.hidden {
            v.extend(layer.tensors_mut());
        }
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x * factor;
            }
        }
    }

    /// Same network in another scalar type, converting through `f64`.
    pub fn cast<U: Scalar>(&self) -> DeepNetParams<U> {
        let mut out = DeepNetParams::<U>::zeros(&self.shape()).expect("shape of a valid network");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.to_f64_lossy());
            }
        }
        out
    }
}

/// Intermediate values from one forward pass.
#[derive(Debug, Clone)]
pub struct NetCache<T> {
    blstm: BlstmCache<T>,
    lstm: SequenceCache<T>,
    hidden: Vec<DenseCache<T>>,
    head: DenseCache<T>,
    mask: DropoutMask<T>,
}

#[derive(Debug, Clone)]
pub struct NetForward<T> {
    pub probabilities: Vec<T>,
    /// Output of the last hidden dense layer.
    pub features: Vec<T>,
    pub cache: NetCache<T>,
}

/// Forward pass. With `mask = None` dropout is disabled (inference).
pub fn net_forward<T: Scalar>(
    params: &DeepNetParams<T>,
    window: &Matrix<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<NetForward<T>> {
    if window.cols() != params.input_size() {
        return Err(Error::DimensionMismatch {
            context: "network input window",
            left: Shape(window.rows(), params.input_size()),
            right: window.shape(),
        });
    }
    let (seq, blstm) = blstm_forward(&params.blstm, window)?;
    let (last, lstm) = lstm_forward(&params.lstm, &seq, false)?;
    let mut x = last.into_data();
    let mut hidden = Vec::with_capacity(params.hidden.len());
    let first_width = params.hidden[0].output_size();
    let mask = match mask {
        Some(m) if m.mask.len() != first_width => {
            return Err(Error::DimensionMismatch {
                context: "dropout mask",
                left: Shape(first_width, 1),
                right: Shape(m.mask.len(), 1),
            })
        }
        Some(m) => m.clone(),
        None => DropoutMask::identity(first_width),
    };
    let mut features = Vec::new();
    for (k, layer) in params.hidden.iter().enumerate() {
        let (out, cache) = dense_forward_cached(layer, &x)?;
        hidden.push(cache);
        x = if k == 0 { mask.apply(&out) } else { out };
        if k + 1 == params.hidden.len() {
            features = x.clone();
        }
    }
    let (logits, head) = dense_forward_cached(&params.head, &x)?;
    let probabilities = softmax(&logits)?;
    Ok(NetForward {
        probabilities,
        features,
        cache: NetCache {
            blstm,
            lstm,
            hidden,
            head,
            mask,
        },
    })
}

/// Gradient of the cross-entropy loss for one window.
pub fn net_backward<T: Scalar>(
    params: &DeepNetParams<T>,
    forward: &NetForward<T>,
    onehot: &[T],
) -> Result<DeepNetParams<T>> {
    if onehot.len() != params.class_count() {
        return Err(Error::DimensionMismatch {
            context: "one-hot target",
            left: Shape(params.class_count(), 1),
            right: Shape(onehot.len(), 1),
        });
    }
    let cache = &forward.cache;
    let dlogits = softmax_cross_entropy_grad(&forward.probabilities, onehot);
    let (head, mut g) = dense_backward(&params.head, &cache.head, &dlogits)?;
    let mut hidden_grads = vec![None; params.hidden.len()];
    for k in (0..params.hidden.len()).rev() {
        if k == 0 {
            g = cache.mask.backward(&g);
        }
        let (lg, dx) = dense_backward(&params.hidden[k], &cache.hidden[k], &g)?;
        hidden_grads[k] = Some(lg);
        g = dx;
    }
    let g_last = Matrix::from_vec(1, g.len(), g)?;
    let (lstm, d_seq) = lstm_backward(&cache.lstm, &params.lstm, &g_last)?;
    let (blstm, _) = blstm_backward(&cache.blstm, &params.blstm, &d_seq)?;
    Ok(DeepNetParams {
        blstm,
        lstm,
        hidden: hidden_grads.into_iter().map(Option::unwrap).collect(),
        head,
        dropout: params.dropout,
    })
}

/// Loss, class probabilities and parameter gradients for one window.
pub fn loss_and_gradient<T: Scalar>(
    params: &DeepNetParams<T>,
    window: &Matrix<T>,
    onehot: &[T],
    mask: Option<&DropoutMask<T>>,
) -> Result<(T, Vec<T>, DeepNetParams<T>)> {
    let fwd = net_forward(params, window, mask)?;
    let loss = cross_entropy(&fwd.probabilities, onehot)?;
    let grads = net_backward(params, &fwd, onehot)?;
    Ok((loss, fwd.probabilities, grads))
}

/// Cross-entropy of one window with dropout disabled.
pub fn window_loss<T: Scalar>(params: &DeepNetParams<T>, window: &Matrix<T>, onehot: &[T]) -> Result<T> {
    cross_entropy(&net_forward(params, window, None)?.probabilities, onehot)
}

/// Class probabilities with dropout disabled.
pub fn predict_proba<T: Scalar>(params: &DeepNetParams<T>, window: &Matrix<T>) -> Result<Vec<T>> {
    Ok(net_forward(params, window, None)?.probabilities)
}

/// Last hidden dense layer output with dropout disabled.
pub fn extract_features<T: Scalar>(params: &DeepNetParams<T>, window: &Matrix<T>) -> Result<Vec<T>> {
    Ok(net_forward(params, window, None)?.features)
}
