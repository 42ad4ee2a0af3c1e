//! Central finite-difference gradient checks in double precision.
//!
//! The checker only evaluates the forward pass; it never looks at backward
//! rules, so it serves as an independent oracle for them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::Tensor;
use crate::error::Result;
use crate::tape::{OpKind, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Relative error with a small absolute floor so that vanishing components
/// are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

fn analytic_gradients<F>(inputs: &[Tensor<f64>], sign_flip: Option<OpKind>, f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = sign_flip {
        tape.inject_sign_flip(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect())
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let loss = f(&mut t, &vars)?;
    Ok(t.value(loss).item())
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input. Returns the maximum relative error.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], step: f64, sign_flip: Option<OpKind>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, sign_flip, &f)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Directional variant for large graphs. Each of `directions` random sign
/// vectors shifts every element of every input by `±step` at once; the
/// central difference along it is compared with the gradient's projection.
pub fn max_directional_error<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    sign_flip: Option<OpKind>,
    directions: usize,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, sign_flip, &f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let signs: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| (0..t.numel()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect();
        let shifted = |sign: f64| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .zip(&signs)
                .map(|(t, u)| Tensor::from_fn(t.shape().to_vec(), |j| t.data()[j] + sign * step * u[j]))
                .collect()
        };
        let plus = evaluate(&shifted(1.0), &f)?;
        let minus = evaluate(&shifted(-1.0), &f)?;
        let numeric = (plus - minus) / (2.0 * step);
        let projected: f64 = analytic
            .iter()
            .zip(&signs)
            .flat_map(|(g, u)| g.iter().zip(u).map(|(a, b)| a * b))
            .sum();
        worst = worst.max(relative_error(projected, numeric));
    }
    Ok(worst)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Reduces a tensor-valued output to a scalar through a fixed random
/// projection, so the check exercises the full vector-Jacobian product.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random_tensor(&mut rng, &shape, 1.0));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Tape<f64>, &[Var], u64) -> Result<Var>);

/// One case per differentiable op of the engine.
fn cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v, s| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v, s| {
            let y = t.add(v[0], v[1])?;
            project(t, y, s)
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v, s| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, s)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v, s| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, s)
        }),
        ("scale", vec![vec![5]], |t, v, s| {
            let y = t.scale(v[0], -1.7);
            project(t, y, s)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v, s| {
            let y = t.add_row(v[0], v[1])?;
            project(t, y, s)
        }),
        ("scale_rows", vec![vec![3, 4], vec![3, 1]], |t, v, s| {
            let y = t.scale_rows(v[0], v[1])?;
            project(t, y, s)
        }),
        ("silu", vec![vec![6]], |t, v, s| {
            let y = t.silu(v[0]);
            project(t, y, s)
        }),
        ("sigmoid", vec![vec![6]], |t, v, s| {
            let y = t.sigmoid(v[0]);
            project(t, y, s)
        }),
        ("sum", vec![vec![2, 2]], |t, v, _| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }),
        ("mean", vec![vec![2, 3]], |t, v, _| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        }),
        ("reshape", vec![vec![2, 6]], |t, v, s| {
            let y = t.reshape(v[0], &[3, 4])?;
            project(t, y, s)
        }),
        ("transpose", vec![vec![2, 5]], |t, v, s| {
            let y = t.transpose(v[0])?;
            project(t, y, s)
        }),
        ("softmax", vec![vec![2, 3, 4]], |t, v, s| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, s)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v, s| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, s)
        }),
        ("conv2d", vec![vec![2, 4, 4], vec![3, 2, 3, 3], vec![3]], |t, v, s| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, s)
        }),
        ("transposed_conv2d", vec![vec![2, 3, 3], vec![2, 3, 2, 2]], |t, v, s| {
            let y = t.conv_transpose2d(v[0], v[1], 2)?;
            project(t, y, s)
        }),
        ("attention", vec![vec![2, 4], vec![3, 4], vec![3, 4]], |t, v, s| {
            let y = t.attention(v[0], v[1], v[2], 2)?;
            project(t, y, s)
        }),
        ("rope", vec![vec![3, 8]], |t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s.wrapping_add(17));
            let table: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = t.rope(v[0], table.into(), 4)?;
            project(t, y, s)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, v, s| {
            let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
            project(t, y, s)
        }),
        ("scatter_rows", vec![vec![3, 2]], |t, v, s| {
            let y = t.scatter_rows(v[0], &[4, 0, 4], 5)?;
            project(t, y, s)
        }),
        ("concat_rows", vec![vec![1, 3], vec![2, 3]], |t, v, s| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            project(t, y, s)
        }),
        ("gather_elems", vec![vec![2, 3]], |t, v, s| {
            let y = t.gather_elems(v[0], &[5, 0, 2, 2])?;
            project(t, y, s)
        }),
        ("focal_loss", vec![vec![6]], |t, v, _| {
            let target = [1.0, 0.0, 0.3, 0.9, 1.0, 0.0];
            t.focal_loss(v[0], &target, 2.0, 4.0)
        }),
        ("bce_with_logits", vec![vec![5]], |t, v, _| {
            let target = [1.0, 0.0, 0.5, 1.0, 0.0];
            t.bce_with_logits(v[0], &target)
        }),
        ("l1_loss", vec![vec![5]], |t, v, _| {
            // targets far from the sampled inputs keep the kink out of reach
            let target = [3.0, -3.0, 3.0, -3.0, 3.0];
            t.l1_loss(v[0], &target)
        }),
    ]
}

/// Runs every op case for one seed.
pub fn op_suite(seed: u64, sign_flip: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, shapes, f) in cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(name.len() as u64));
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect();
        let err = max_relative_error(&inputs, DEFAULT_STEP, sign_flip, |t, v| f(t, v, seed))?;
        out.push(CheckResult {
            name: name.to_string(),
            seed,
            max_rel_err: err,
            passed: err <= DEFAULT_TOLERANCE,
        });
    }
    Ok(out)
}
