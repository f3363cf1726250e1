mod common;

use common::{gradient_check, GradCheck};

#[test]
fn full_stack_gradients_match_central_differences() {
    let checks: Vec<GradCheck> = (0..24).map(gradient_check).collect();
    for (seed, c) in checks.iter().enumerate() {
        println!(
            "seed {seed}: input {} blstm {} lstm {} fcnn {:?} classes {} w {}: {} params, max rel {:.3e} ({})",
            c.shape.input, c.shape.blstm_hidden, c.shape.lstm_hidden, c.shape.fcnn, c.shape.classes, c.width,
            c.parameters, c.max_relative, c.worst
        );
    }
    for (seed, c) in checks.iter().enumerate() {
        assert!(c.max_relative < 1e-6, "seed {seed}: {}", c.worst);
    }
}
