#![allow(dead_code)]

pub mod dd;

use dd::Dd;
use tdln::dense::{cross_entropy, DropoutMask};
use tdln::network::{loss_and_gradient, net_forward, DeepNetParams, NetShape};
use tdln::numerics::{Matrix, SeededRng};

pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub shape: NetShape,
    pub width: usize,
    pub parameters: usize,
    pub max_relative: f64,
    pub worst: String,
}

/// Random small network: input <= 4, hidden <= 3, w <= 5, dense <= 6 units.
pub fn random_shape(rng: &mut SeededRng) -> (NetShape, usize) {
    let layers = 1 + rng.below(2);
    let shape = NetShape {
        input: 1 + rng.below(4),
        blstm_hidden: 1 + rng.below(3),
        lstm_hidden: 1 + rng.below(3),
        fcnn: (0..layers).map(|_| 1 + rng.below(6)).collect(),
        classes: 2 + rng.below(3),
        dropout: 0.4,
        forget_bias: 1.0,
    };
    (shape, 1 + rng.below(5))
}

fn to_dd(m: &Matrix<f64>) -> Matrix<Dd> {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| Dd::new(m.get(r, c)))
}

/// Analytic gradient in `f64` against central differences of the loss
/// evaluated in double-double, where rounding is far below the step's
/// truncation error. Half the cases run with a drawn dropout mask.
pub fn gradient_check(seed: u64) -> GradCheck {
    let mut rng = SeededRng::new(seed);
    let (shape, width) = random_shape(&mut rng);
    let net = DeepNetParams::<f64>::init(&shape, &mut rng).unwrap();
    let window = Matrix::from_fn(width, shape.input, |_, _| rng.uniform(-2.0, 2.0));
    let class = rng.below(shape.classes);
    let onehot: Vec<f64> = (0..shape.classes).map(|c| if c == class { 1.0 } else { 0.0 }).collect();
    let mask = (seed % 2 == 1).then(|| DropoutMask::<f64>::draw(shape.fcnn[0], 0.4, &mut rng).unwrap());
    let (_, _, grad) = loss_and_gradient(&net, &window, &onehot, mask.as_ref()).unwrap();

    let net_dd = net.cast::<Dd>();
    let window_dd = to_dd(&window);
    let onehot_dd: Vec<Dd> = onehot.iter().map(|&v| Dd::new(v)).collect();
    let mask_dd = mask.as_ref().map(|m| DropoutMask {
        keep_probability: Dd::new(m.keep_probability),
        mask: m.mask.iter().map(|&v| Dd::new(v)).collect(),
    });
    let loss = |p: &DeepNetParams<Dd>| {
        let fwd = net_forward(p, &window_dd, mask_dd.as_ref()).unwrap();
        cross_entropy(&fwd.probabilities, &onehot_dd).unwrap()
    };
    let h = Dd::new(FD_STEP);
    let mut max_relative: f64 = 0.0;
    let mut worst = String::new();
    let mut parameters = 0;
    for (ti, g) in grad.tensors().into_iter().enumerate() {
        for (j, &an) in g.iter().enumerate() {
            let mut plus = net_dd.clone();
            plus.tensors_mut()[ti][j] = plus.tensors()[ti][j] + h;
            let mut minus = net_dd.clone();
            minus.tensors_mut()[ti][j] = minus.tensors()[ti][j] - h;
            let fd = ((loss(&plus) - loss(&minus)) / (h + h)).value();
            let scale = an.abs().max(fd.abs());
            let rel = if scale == 0.0 { 0.0 } else { (an - fd).abs() / scale };
            parameters += 1;
            if rel > max_relative {
                max_relative = rel;
                worst = format!("tensor {ti}[{j}]: analytic {an:e}, fd {fd:e}");
            }
        }
    }
    GradCheck {
        shape,
        width,
        parameters,
        max_relative,
        worst,
    }
}
