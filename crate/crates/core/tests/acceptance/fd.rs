//! Independent finite-difference gradient oracle for the acceptance suite.
//!
//! Rebuilds each op's scalarized loss from plain data and compares central
//! differences against the engine's backward pass. Shares no code with the
//! backward implementations it audits.

use dmoe_numeric::{backward, ops, Rng, Result, Tensor};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;

/// Weighted sum with fixed non-uniform weights, so upstream gradients vary
/// per coordinate.
fn scalarize(y: &Tensor) -> Tensor {
    let n = y.numel();
    let w: Vec<f64> = (0..n).map(|i| 0.25 + 0.055 * ((i * 7 + 3) % 13) as f64).collect();
    let w = Tensor::constant(w, y.shape().to_vec()).unwrap();
    ops::sum(&ops::mul(y, &w).unwrap()).unwrap()
}

pub struct Instance {
    pub inputs: Vec<(Vec<f64>, Vec<usize>)>,
}

/// Max relative error of d(loss)/d(inputs[target]) vs central differences.
pub fn max_rel_err(
    instance: &Instance,
    target: usize,
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
) -> f64 {
    let build = |values: &[Vec<f64>]| -> Vec<Tensor> {
        values
            .iter()
            .zip(&instance.inputs)
            .map(|(v, (_, shape))| Tensor::leaf(v.clone(), shape.clone(), true).unwrap())
            .collect()
    };
    let eval = |values: &[Vec<f64>]| -> f64 {
        let ts = build(values);
        scalarize(&f(&ts).unwrap()).item()
    };
    let values: Vec<Vec<f64>> = instance.inputs.iter().map(|(v, _)| v.clone()).collect();
    let tensors = build(&values);
    let loss = scalarize(&f(&tensors).unwrap());
    backward(&loss).unwrap();
    let grad = tensors[target].grad().expect("gradient populated");

    let mut worst = 0.0f64;
    for i in 0..values[target].len() {
        let mut plus = values.clone();
        plus[target][i] += H;
        let mut minus = values.clone();
        minus[target][i] -= H;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
        let denom = fd.abs().max(grad[i].abs()).max(1e-4);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    worst
}

/// Direct-loss variant for ops that already produce scalars.
pub fn max_rel_err_scalar(
    instance: &Instance,
    target: usize,
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
) -> f64 {
    let build = |values: &[Vec<f64>]| -> Vec<Tensor> {
        values
            .iter()
            .zip(&instance.inputs)
            .map(|(v, (_, shape))| Tensor::leaf(v.clone(), shape.clone(), true).unwrap())
            .collect()
    };
    let eval = |values: &[Vec<f64>]| -> f64 {
        let ts = build(values);
        f(&ts).unwrap().item()
    };
    let values: Vec<Vec<f64>> = instance.inputs.iter().map(|(v, _)| v.clone()).collect();
    let tensors = build(&values);
    let loss = f(&tensors).unwrap();
    backward(&loss).unwrap();
    let grad = tensors[target].grad().expect("gradient populated");

    let mut worst = 0.0f64;
    for i in 0..values[target].len() {
        let mut plus = values.clone();
        plus[target][i] += H;
        let mut minus = values.clone();
        minus[target][i] -= H;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
        let denom = fd.abs().max(grad[i].abs()).max(1e-4);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    worst
}

pub fn tensor_values(rng: &mut Rng, shape: &[usize], spread: f64) -> (Vec<f64>, Vec<usize>) {
    let n: usize = shape.iter().product();
    ((0..n).map(|_| (rng.next_f64() - 0.5) * 2.0 * spread).collect(), shape.to_vec())
}
