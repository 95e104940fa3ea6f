//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that gradients that are both essentially zero do
/// not produce a meaningless ratio.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Reduces a non-scalar output to a scalar with fixed, uneven weights so
/// every output element gets a distinct upstream gradient.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 && g.value(out).ndim() == 0 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let w = (0..n).map(|i| 1.0 + 0.5 * (1.3 * i as f64 + 0.2).sin()).collect();
    let w = g.input(Tensor::new(&shape, w)?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Checks d(loss)/d(input) for every element of every input.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let l = project(&mut g, out)?;
        Ok(g.value(l).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

/// Checks d(loss)/d(param) for every element of every trainable parameter.
pub fn check_params<F>(name: &str, store: &ParamStore, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let l = project(&mut g, out)?;
        Ok(g.value(l).data()[0])
    };

    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let loss = project(&mut g, out)?;
    g.backward(loss)?;
    let grads = g.param_grads();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut s = store.clone();
    for (id, p) in store.iter() {
        if !p.requires_grad {
            continue;
        }
        let analytic = grads
            .entries
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; p.value.len()]);
        for j in 0..p.value.len() {
            let orig = p.value.data()[j];
            s.value_mut(id).data_mut()[j] = orig + STEP;
            let up = eval(&s)?;
            s.value_mut(id).data_mut()[j] = orig - STEP;
            let down = eval(&s)?;
            s.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Finite-difference checks for every primitive op on small random tensors.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random(&mut rng, shape);
    let mut out = Vec::new();

    out.push(check_inputs("matmul", &[r(&[2, 3]), r(&[3, 2])], |g, v| g.matmul(v[0], v[1]))?);
    out.push(check_inputs("matmul_bt", &[r(&[2, 3]), r(&[2, 3])], |g, v| g.matmul_bt(v[0], v[1]))?);
    out.push(check_inputs("transpose", &[r(&[2, 3])], |g, v| g.transpose(v[0]))?);
    out.push(check_inputs("add", &[r(&[4]), r(&[4])], |g, v| g.add(v[0], v[1]))?);
    out.push(check_inputs("add_row", &[r(&[2, 3]), r(&[3])], |g, v| g.add_row(v[0], v[1]))?);
    out.push(check_inputs("mul", &[r(&[5]), r(&[5])], |g, v| g.mul(v[0], v[1]))?);
    out.push(check_inputs("scale", &[r(&[3])], |g, v| Ok(g.scale(v[0], -2.5)))?);
    out.push(check_inputs("embedding", &[r(&[4, 2])], |g, v| g.embedding(v[0], &[0, 2, 2, 3]))?);
    out.push(check_inputs(
        "conv2d",
        &[r(&[1, 2, 4, 5]), r(&[2, 2, 3, 3]), r(&[2])],
        |g, v| g.conv2d(v[0], v[1], v[2]),
    )?);
    out.push(check_inputs("max_pool2d", &[r(&[1, 2, 3, 5])], |g, v| g.max_pool2d(v[0]))?);
    out.push(check_inputs("sigmoid", &[r(&[6])], |g, v| Ok(g.sigmoid(v[0])))?);
    out.push(check_inputs("tanh", &[r(&[6])], |g, v| Ok(g.tanh(v[0])))?);
    out.push(check_inputs("relu", &[r(&[8])], |g, v| Ok(g.relu(v[0])))?);
    out.push(check_inputs("softmax", &[r(&[2, 4])], |g, v| Ok(g.softmax(v[0])))?);
    out.push(check_inputs("causal_softmax", &[r(&[2, 4])], |g, v| g.causal_softmax(v[0]))?);
    out.push(check_inputs(
        "layer_norm",
        &[r(&[2, 4]), r(&[4]), r(&[4])],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    )?);
    out.push(check_inputs("concat_rows", &[r(&[1, 3]), r(&[2, 3])], |g, v| g.concat(&[v[0], v[1]], 0))?);
    out.push(check_inputs("concat_cols", &[r(&[2, 1]), r(&[2, 3])], |g, v| g.concat(&[v[0], v[1]], 1))?);
    out.push(check_inputs("slice", &[r(&[2, 4])], |g, v| g.slice(v[0], 1, 1, 2))?);
    out.push(check_inputs("reshape", &[r(&[2, 3])], |g, v| g.reshape(v[0], &[3, 2]))?);
    out.push(check_inputs("cross_entropy", &[r(&[3, 4])], |g, v| g.cross_entropy(v[0], &[2, 0, 3]))?);
    out.push(check_inputs("cross_entropy_masked", &[r(&[3, 4])], |g, v| {
        g.cross_entropy_masked(v[0], &[1, 1, 3], &[true, false, true])
    })?);
    out.push(check_inputs("sum", &[r(&[5])], |g, v| Ok(g.sum(v[0])))?);
    out.push(check_inputs("mean", &[r(&[5])], |g, v| Ok(g.mean(v[0])))?);
    out.push(check_inputs(
        "mlp3",
        &[r(&[2, 3]), r(&[4, 3]), r(&[4]), r(&[4, 4]), r(&[4]), r(&[3, 4]), r(&[3])],
        |g, v| {
            let h = g.matmul_bt(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.tanh(h);
            let h = g.matmul_bt(h, v[3])?;
            let h = g.add_row(h, v[4])?;
            let h = g.sigmoid(h);
            let z = g.matmul_bt(h, v[5])?;
            let z = g.add_row(z, v[6])?;
            g.cross_entropy(z, &[0, 2])
        },
    )?);
    Ok(out)
}
