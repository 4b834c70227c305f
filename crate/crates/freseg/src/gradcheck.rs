//! Central finite-difference gradient checking.
//!
//! The checker never looks at an op's backward rule: it rebuilds the forward
//! pass from scratch around perturbed inputs and compares the analytic
//! gradient against `(f(x+h) - f(x-h)) / 2h` in 64-bit arithmetic.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub struct CheckSettings {
    pub step: f64,
    pub tolerance: f64,
    pub coords_per_input: usize,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            step: 1e-3,
            tolerance: 1e-3,
            coords_per_input: 10,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Check d(loss)/d(inputs) for a scalar-valued computation.
///
/// `build` receives a fresh graph plus one trainable leaf per input tensor
/// and must return the scalar loss node. Returns the worst relative error
/// over the sampled coordinates, or an error string when it exceeds the
/// tolerance.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    build: F,
    settings: &CheckSettings,
) -> Result<CheckReport, String>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let forward = |values: &[Tensor<f64>]| -> f64 {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| graph.param(t.clone())).collect();
        graph.freeze_leaves();
        let loss = build(&mut graph, &ids);
        graph.value(loss).item()
    };

    // analytic gradients
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    graph.freeze_leaves();
    let loss = build(&mut graph, &ids);
    graph
        .backward(loss)
        .map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| graph.grad(id).expect("param grad").to_vec())
        .collect();

    let mut rng = StdRng::seed_from_u64(settings.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    let mut checked = 0usize;

    for (i, input) in inputs.iter().enumerate() {
        let n = input.shape().numel();
        if n == 0 {
            continue;
        }
        let coords: Vec<usize> = if n <= settings.coords_per_input {
            (0..n).collect()
        } else {
            (0..settings.coords_per_input)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for &c in &coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + settings.step;
            let up = forward(&work);
            work[i].data_mut()[c] = orig - settings.step;
            let down = forward(&work);
            work[i].data_mut()[c] = orig;

            let fd = (up - down) / (2.0 * settings.step);
            let an = analytic[i][c];
            let err = rel_error(an, fd);
            if err > max_err {
                max_err = err;
            }
            checked += 1;
            if err > settings.tolerance {
                return Err(format!(
                    "gradient mismatch on input {i} coord {c}: analytic {an:.6e} vs finite-diff {fd:.6e} (rel err {err:.3e})"
                ));
            }
        }
    }

    Ok(CheckReport {
        max_rel_error: max_err,
        coords_checked: checked,
    })
}

/// Random tensor with entries in (-1, 1), for building check cases.
pub fn random_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let shape = crate::tensor::Shape::from_dims(dims).unwrap();
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}
