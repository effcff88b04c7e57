#![allow(dead_code)]

use harpeft_core::model::{Module, ModelConfig};
use harpeft_core::numerics::{Matrix, Rng, Tape, Var};
use harpeft_core::Result;

pub fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        window_len: 32,
        channels: 3,
        patch_len: 8,
        embed_dim: 16,
        ffn_hidden: 24,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 1,
        mask_ratio: 0.5,
        n_classes: 3,
        head_hidden: 8,
        dropout: 0.1,
        ln_eps: 1e-5,
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`. The floor keeps gradients that are
/// exactly zero (e.g. a bias cancelled by batch normalization) from turning
/// difference noise into a large relative error.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-6)
}

/// Projects an op's output to a scalar with fixed random weights so every
/// output entry contributes to the checked gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(out).shape();
    if (r, c) == (1, 1) {
        return Ok(out);
    }
    let mut rng = Rng::new(seed);
    let w = tape.constant(random(r, c, &mut rng))?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Relative error of the tape gradient against central differences for
/// each input of `f`.
pub fn fd_check(inputs: &[Matrix], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Vec<f64> {
    let eval = |vals: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone(), true).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = project(&mut tape, out, 99).unwrap();
        tape.value(loss).get(0, 0)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, 99).unwrap();
    tape.backward(loss).unwrap();

    let h = 1e-5;
    inputs
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let analytic = tape
                .grad(vars[k])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            let mut numeric = Vec::with_capacity(m.len());
            for i in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[k].as_mut_slice()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].as_mut_slice()[i] -= h;
                numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            }
            rel_err(analytic.as_slice(), &numeric)
        })
        .collect()
}

/// Central-difference check of every trainable parameter of a module.
/// `loss` must be a pure function of the module. At most `per_param`
/// entries of each parameter are probed. Returns `(name, rel_err)`.
pub fn param_fd<M: Module + Clone>(
    model: &M,
    per_param: usize,
    loss: impl Fn(&M) -> f64,
    analytic: impl Fn(&M) -> M,
) -> Vec<(String, f64)> {
    let with_grads = analytic(model);
    let mut grads = Vec::new();
    with_grads.visit(&mut |p| {
        if p.trainable {
            grads.push((p.name.clone(), p.grad.clone()))
        }
    });
    let h = 1e-5;
    let mut rng = Rng::new(17);
    grads
        .into_iter()
        .map(|(name, g)| {
            let n = g.len();
            let picks: Vec<usize> = if n <= per_param {
                (0..n).collect()
            } else {
                rng.sample_indices(n, per_param)
            };
            let shifted = |i: usize, delta: f64| {
                let mut m = model.clone();
                m.visit_mut(&mut |p| {
                    if p.name == name {
                        p.value.as_mut_slice()[i] += delta;
                    }
                });
                loss(&m)
            };
            let numeric: Vec<f64> = picks
                .iter()
                .map(|&i| (shifted(i, h) - shifted(i, -h)) / (2.0 * h))
                .collect();
            let a: Vec<f64> = picks.iter().map(|&i| g.as_slice()[i]).collect();
            (name, rel_err(&a, &numeric))
        })
        .collect()
}
