//! LSTM cell, unidirectional LSTM layer and bidirectional LSTM layer, with
//! backpropagation through time.
//!
//! Every gate sees the concatenation `[x_t, h_{t-1}]`, input first. Initial
//! hidden and cell states are zero.

use crate::error::{invalid, Error, Result, Shape};
use crate::numerics::{sigmoid, Matrix, Scalar, SeededRng};

/// Weights and biases of one LSTM direction. Each weight matrix is
/// `hidden × (input + hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub w_f: Matrix<T>,
    pub w_i: Matrix<T>,
    pub w_s: Matrix<T>,
    pub w_o: Matrix<T>,
    pub b_f: Vec<T>,
    pub b_i: Vec<T>,
    pub b_s: Vec<T>,
    pub b_o: Vec<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Matrix::zeros(hidden, input + hidden);
        LstmParams {
            w_f: w.clone(),
            w_i: w.clone(),
            w_s: w.clone(),
            w_o: w,
            b_f: vec![T::zero(); hidden],
            b_i: vec![T::zero(); hidden],
            b_s: vec![T::zero(); hidden],
            b_o: vec![T::zero(); hidden],
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate.
    pub fn init(input: usize, hidden: usize, forget_bias: f64, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / ((input + hidden) + hidden) as f64).sqrt();
        let mut draw = || Matrix::from_fn(hidden, input + hidden, |_, _| T::lit(rng.uniform(-limit, limit)));
        let (w_f, w_i, w_s, w_o) = (draw(), draw(), draw(), draw());
        LstmParams {
            w_f,
            w_i,
            w_s,
            w_o,
            b_f: vec![T::lit(forget_bias); hidden],
            b_i: vec![T::zero(); hidden],
            b_s: vec![T::zero(); hidden],
            b_o: vec![T::zero(); hidden],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.b_f.len()
    }

    pub fn input_size(&self) -> usize {
        self.w_f.cols() - self.hidden_size()
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = self.hidden_size();
        let shape = self.w_f.shape();
        if shape.0 != hidden || shape.1 < hidden {
            return Err(invalid(format!("LSTM forget weights {shape} do not fit hidden size {hidden}")));
        }
        for w in [&self.w_i, &self.w_s, &self.w_o] {
            if w.shape() != shape {
                return Err(Error::DimensionMismatch {
                    context: "LSTM gate weights",
                    left: shape,
                    right: w.shape(),
                });
            }
        }
        for b in [&self.b_i, &self.b_s, &self.b_o] {
            if b.len() != hidden {
                return Err(Error::DimensionMismatch {
                    context: "LSTM gate biases",
                    left: Shape(hidden, 1),
                    right: Shape(b.len(), 1),
                });
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size(), self.hidden_size())
    }

    /// Fixed tensor order: W_f, W_i, W_S, W_o, b_f, b_i, b_S, b_o.
    pub fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.w_f.data(),
            self.w_i.data(),
            self.w_s.data(),
            self.w_o.data(),
            &self.b_f,
            &self.b_i,
            &self.b_s,
            &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w_f.data_mut(),
            self.w_i.data_mut(),
            self.w_s.data_mut(),
            self.w_o.data_mut(),
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_s,
            &mut self.b_o,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

/// Everything one time step needs for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord<T> {
    /// `[x_t, h_{t-1}]`
    pub z: Vec<T>,
    pub c_prev: Vec<T>,
    pub f: Vec<T>,
    pub i: Vec<T>,
    pub s: Vec<T>,
    pub o: Vec<T>,
    pub c: Vec<T>,
    pub tanh_c: Vec<T>,
    pub h: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCache<T> {
    pub steps: Vec<GateRecord<T>>,
    pub input_size: usize,
    pub hidden_size: usize,
    pub return_sequence: bool,
}

fn affine<T: Scalar>(w: &Matrix<T>, b: &[T], z: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    w.data()
        .chunks_exact(w.cols())
        .zip(b)
        .map(|(row, &bias)| f(crate::numerics::dot(row, z) + bias))
        .collect()
}

pub fn lstm_cell_forward<T: Scalar>(
    params: &LstmParams<T>,
    x: &[T],
    prev: &LstmState<T>,
) -> Result<(LstmState<T>, GateRecord<T>)> {
    let hidden = params.hidden_size();
    if x.len() != params.input_size() {
        return Err(Error::DimensionMismatch {
            context: "lstm_cell_forward input",
            left: Shape(params.input_size(), 1),
            right: Shape(x.len(), 1),
        });
    }
    if prev.h.len() != hidden || prev.c.len() != hidden {
        return Err(Error::DimensionMismatch {
            context: "lstm_cell_forward state",
            left: Shape(hidden, 1),
            right: Shape(prev.h.len(), prev.c.len()),
        });
    }
    let mut z = Vec::with_capacity(x.len() + hidden);
    z.extend_from_slice(x);
    z.extend_from_slice(&prev.h);

    let f = affine(&params.w_f, &params.b_f, &z, sigmoid);
    let i = affine(&params.w_i, &params.b_i, &z, sigmoid);
    let s = affine(&params.w_s, &params.b_s, &z, T::tanh);
    let o = affine(&params.w_o, &params.b_o, &z, sigmoid);
    let c: Vec<T> = (0..hidden).map(|k| f[k] * prev.c[k] + i[k] * s[k]).collect();
    let tanh_c: Vec<T> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<T> = o.iter().zip(&tanh_c).map(|(&o, &t)| o * t).collect();

    let record = GateRecord {
        z,
        c_prev: prev.c.clone(),
        f,
        i,
        s,
        o,
        c: c.clone(),
        tanh_c,
        h: h.clone(),
    };
    Ok((LstmState { h, c }, record))
}

/// Runs the cell over every row of `seq` from zero state.
///
/// Returns all hidden states (`w × hidden`) when `return_sequence` is set,
/// otherwise only the last one as a `1 × hidden` matrix.
pub fn lstm_forward<T: Scalar>(
    params: &LstmParams<T>,
    seq: &Matrix<T>,
    return_sequence: bool,
) -> Result<(Matrix<T>, SequenceCache<T>)> {
    if seq.rows() == 0 {
        return Err(Error::Empty("LSTM input sequence"));
    }
    let hidden = params.hidden_size();
    let mut state = LstmState::zeros(hidden);
    let mut steps = Vec::with_capacity(seq.rows());
    for t in 0..seq.rows() {
        let (next, rec) = lstm_cell_forward(params, seq.row(t), &state)?;
        state = next;
        steps.push(rec);
    }
    let out = if return_sequence {
        let mut data = Vec::with_capacity(seq.rows() * hidden);
        for rec in &steps {
            data.extend_from_slice(&rec.h);
        }
        Matrix::from_vec(seq.rows(), hidden, data)?
    } else {
        Matrix::from_vec(1, hidden, state.h)?
    };
    let cache = SequenceCache {
        steps,
        input_size: params.input_size(),
        hidden_size: hidden,
        return_sequence,
    };
    Ok((out, cache))
}

/// Backpropagation through time.
///
/// `grad_out` holds the loss gradient with respect to the layer output: one
/// row per step for sequence output, or a single row for final-state output.
/// Returns parameter gradients and the gradient with respect to every input row.
pub fn lstm_backward<T: Scalar>(
    cache: &SequenceCache<T>,
    params: &LstmParams<T>,
    grad_out: &Matrix<T>,
) -> Result<(LstmParams<T>, Matrix<T>)> {
    let hidden = params.hidden_size();
    let input = params.input_size();
    if cache.hidden_size != hidden || cache.input_size != input {
        return Err(Error::DimensionMismatch {
            context: "lstm_backward cache vs params",
            left: Shape(cache.input_size, cache.hidden_size),
            right: Shape(input, hidden),
        });
    }
    let steps = cache.steps.len();
    let expected_rows = if cache.return_sequence { steps } else { 1 };
    if grad_out.rows() != expected_rows || grad_out.cols() != hidden {
        return Err(Error::DimensionMismatch {
            context: "lstm_backward upstream gradient",
            left: Shape(expected_rows, hidden),
            right: grad_out.shape(),
        });
    }

    let mut grads = params.zeros_like();
    let mut dx = Matrix::zeros(steps, input);
    let mut dh_next = vec![T::zero(); hidden];
    let mut dc_next = vec![T::zero(); hidden];
    let one = T::one();
    let mut da_f = vec![T::zero(); hidden];
    let mut da_i = vec![T::zero(); hidden];
    let mut da_s = vec![T::zero(); hidden];
    let mut da_o = vec![T::zero(); hidden];
    let mut dz = vec![T::zero(); input + hidden];

    for t in (0..steps).rev() {
        let rec = &cache.steps[t];
        let upstream: Option<&[T]> = if cache.return_sequence {
            Some(grad_out.row(t))
        } else if t == steps - 1 {
            Some(grad_out.row(0))
        } else {
            None
        };
        for k in 0..hidden {
            let dh = dh_next[k] + upstream.map_or(T::zero(), |g| g[k]);
            let dc = dc_next[k] + dh * rec.o[k] * (one - rec.tanh_c[k] * rec.tanh_c[k]);
            let d_o = dh * rec.tanh_c[k];
            let d_f = dc * rec.c_prev[k];
            let d_i = dc * rec.s[k];
            let d_s = dc * rec.i[k];
            da_f[k] = d_f * rec.f[k] * (one - rec.f[k]);
            da_i[k] = d_i * rec.i[k] * (one - rec.i[k]);
            da_s[k] = d_s * (one - rec.s[k] * rec.s[k]);
            da_o[k] = d_o * rec.o[k] * (one - rec.o[k]);
            dc_next[k] = dc * rec.f[k];
        }
        grads.w_f.add_outer(&da_f, &rec.z);
        grads.w_i.add_outer(&da_i, &rec.z);
        grads.w_s.add_outer(&da_s, &rec.z);
        grads.w_o.add_outer(&da_o, &rec.z);
        for k in 0..hidden {
            grads.b_f[k] = grads.b_f[k] + da_f[k];
            grads.b_i[k] = grads.b_i[k] + da_i[k];
            grads.b_s[k] = grads.b_s[k] + da_s[k];
            grads.b_o[k] = grads.b_o[k] + da_o[k];
        }
        dz.iter_mut().for_each(|v| *v = T::zero());
        params.w_f.add_transpose_matvec(&da_f, &mut dz);
        params.w_i.add_transpose_matvec(&da_i, &mut dz);
        params.w_s.add_transpose_matvec(&da_s, &mut dz);
        params.w_o.add_transpose_matvec(&da_o, &mut dz);
        dx.row_mut(t).copy_from_slice(&dz[..input]);
        dh_next.copy_from_slice(&dz[input..]);
    }
    Ok((grads, dx))
}

/// Forward and reverse directions with equal hidden sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmParams<T> {
    pub forward: LstmParams<T>,
    pub reverse: LstmParams<T>,
}

impl<T: Scalar> BlstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        BlstmParams {
            forward: LstmParams::zeros(input, hidden),
            reverse: LstmParams::zeros(input, hidden),
        }
    }

    pub fn init(input: usize, hidden: usize, forget_bias: f64, rng: &mut SeededRng) -> Self {
        let forward = LstmParams::init(input, hidden, forget_bias, rng);
        let reverse = LstmParams::init(input, hidden, forget_bias, rng);
        BlstmParams { forward, reverse }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.forward.input_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.forward.validate()?;
        self.reverse.validate()?;
        if self.forward.w_f.shape() != self.reverse.w_f.shape() {
            return Err(Error::DimensionMismatch {
                context: "BLSTM directions",
                left: self.forward.w_f.shape(),
                right: self.reverse.w_f.shape(),
            });
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size(), self.hidden_size())
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.forward.tensors();
        v.extend(self.reverse.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.forward.tensors_mut();
        v.extend(self.reverse.tensors_mut());
        v
    }
}

/// Caches of both directions; the reverse cache is in reversed time order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmCache<T> {
    pub forward: SequenceCache<T>,
    pub reverse: SequenceCache<T>,
}

fn reverse_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let n = m.rows();
    Matrix::from_fn(n, m.cols(), |r, c| m.get(n - 1 - r, c))
}

/// Output row `t` is `[h_t^F, h_t^R]`, forward half first.
pub fn blstm_forward<T: Scalar>(
    params: &BlstmParams<T>,
    seq: &Matrix<T>,
) -> Result<(Matrix<T>, BlstmCache<T>)> {
    if seq.cols() != params.input_size() {
        return Err(Error::DimensionMismatch {
            context: "blstm_forward input",
            left: Shape(seq.rows(), params.input_size()),
            right: seq.shape(),
        });
    }
    let (fwd, fcache) = lstm_forward(&params.forward, seq, true)?;
    let (rev, rcache) = lstm_forward(&params.reverse, &reverse_rows(seq), true)?;
    let w = seq.rows();
    let hidden = params.hidden_size();
    let out = Matrix::from_fn(w, 2 * hidden, |t, c| {
        if c < hidden {
            fwd.get(t, c)
        } else {
            rev.get(w - 1 - t, c - hidden)
        }
    });
    Ok((
        out,
        BlstmCache {
            forward: fcache,
            reverse: rcache,
        },
    ))
}

pub fn blstm_backward<T: Scalar>(
    cache: &BlstmCache<T>,
    params: &BlstmParams<T>,
    grad_out: &Matrix<T>,
) -> Result<(BlstmParams<T>, Matrix<T>)> {
    let hidden = params.hidden_size();
    let w = cache.forward.steps.len();
    if grad_out.rows() != w || grad_out.cols() != 2 * hidden {
        return Err(Error::DimensionMismatch {
            context: "blstm_backward upstream gradient",
            left: Shape(w, 2 * hidden),
            right: grad_out.shape(),
        });
    }
    let g_fwd = Matrix::from_fn(w, hidden, |t, c| grad_out.get(t, c));
    let g_rev = Matrix::from_fn(w, hidden, |t, c| grad_out.get(w - 1 - t, hidden + c));
    let (gf, dx_f) = lstm_backward(&cache.forward, &params.forward, &g_fwd)?;
    let (gr, dx_r) = lstm_backward(&cache.reverse, &params.reverse, &g_rev)?;
    let dx = Matrix::from_fn(w, params.input_size(), |t, c| dx_f.get(t, c) + dx_r.get(w - 1 - t, c));
    Ok((
        BlstmParams {
            forward: gf,
            reverse: gr,
        },
        dx,
    ))
}
