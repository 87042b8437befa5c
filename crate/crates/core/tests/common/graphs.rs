//! Random computation graphs for finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidexplain::autodiff::{Graph, Var};
use sidexplain::Tensor;

/// Distinct step kinds a recipe can draw.
pub const STEP_KINDS: usize = 20;

#[derive(Clone, Debug)]
pub enum Step {
    MatMul(usize),
    Add(usize),
    Sub(usize),
    Mul(usize),
    Gelu,
    LayerNorm(usize, usize),
    Softmax,
    LogSoftmax,
    LogOfSoftmax,
    ScaledExp,
    HalfSquare,
    AddBias(usize),
    AddTiled(usize),
    Attention { proj: usize, heads: usize, keep: Vec<bool> },
    Normalize(Tensor<f64>),
    MaskedFill(Vec<bool>),
    SelectRows(Vec<usize>),
    ConcatSelf,
    ClassToken(usize),
    Flip,
}

pub struct Recipe {
    pub inputs: Vec<Tensor<f64>>,
    pub steps: Vec<Step>,
    pub weights: Tensor<f64>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

pub fn recipe(seed: u64) -> Recipe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut r, mut c) = (rng.random_range(2..5usize), rng.random_range(2..6usize));
    let mut inputs = vec![random_tensor(&mut rng, &[r, c], 1.0)];
    let mut steps = Vec::new();
    let n_steps = rng.random_range(3..7);
    for _ in 0..n_steps {
        let mut add_input = |rng: &mut ChaCha8Rng, shape: &[usize], scale: f64| {
            inputs.push(random_tensor(rng, shape, scale));
            inputs.len() - 1
        };
        let step = match rng.random_range(0..20) {
            0 => {
                let c2 = rng.random_range(2..6);
                let w = add_input(&mut rng, &[c, c2], 0.7);
                c = c2;
                Step::MatMul(w)
            }
            1 => Step::Add(add_input(&mut rng, &[r, c], 1.0)),
            2 => Step::Sub(add_input(&mut rng, &[r, c], 1.0)),
            3 => Step::Mul(add_input(&mut rng, &[r, c], 1.0)),
            4 => Step::Gelu,
            5 => {
                let g = add_input(&mut rng, &[c], 1.0);
                let b = add_input(&mut rng, &[c], 1.0);
                Step::LayerNorm(g, b)
            }
            6 => Step::Softmax,
            7 => Step::LogSoftmax,
            8 => Step::LogOfSoftmax,
            9 => Step::ScaledExp,
            10 => Step::HalfSquare,
            11 => Step::AddBias(add_input(&mut rng, &[c], 1.0)),
            12 => {
                let p = if r % 2 == 0 { 2 } else { 1 };
                Step::AddTiled(add_input(&mut rng, &[p, c], 1.0))
            }
            13 => {
                let heads = rng.random_range(1..3);
                let h = heads * rng.random_range(1..3);
                let proj = add_input(&mut rng, &[c, 3 * h], 0.8);
                let mut keep: Vec<bool> = (0..r).map(|_| rng.random_bool(0.7)).collect();
                keep[0] = true;
                c = h;
                Step::Attention { proj, heads, keep }
            }
            14 => Step::Normalize(random_tensor(&mut rng, &[1, c], 1.0)),
            15 => Step::MaskedFill((0..r * c).map(|_| rng.random_bool(0.3)).collect()),
            16 => {
                let k = rng.random_range(1..5);
                let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
                r = k;
                Step::SelectRows(rows)
            }
            17 => {
                r *= 2;
                Step::ConcatSelf
            }
            18 => {
                let cls = add_input(&mut rng, &[c], 1.0);
                r += 1;
                Step::ClassToken(cls)
            }
            _ => {
                std::mem::swap(&mut r, &mut c);
                Step::Flip
            }
        };
        steps.push(step);
    }
    let weights = random_tensor(&mut rng, &[r, c], 1.0);
    Recipe { inputs, steps, weights }
}

fn build(g: &mut Graph<f64>, rec: &Recipe, values: &[Tensor<f64>]) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
    let mut x = vars[0];
    for step in &rec.steps {
        x = match step {
            Step::MatMul(w) => g.matmul(x, vars[*w]).unwrap(),
            Step::Add(i) => g.add(x, vars[*i]).unwrap(),
            Step::Sub(i) => g.sub(x, vars[*i]).unwrap(),
            Step::Mul(i) => g.mul(x, vars[*i]).unwrap(),
            Step::Gelu => g.gelu(x).unwrap(),
            Step::LayerNorm(a, b) => g.layer_norm(x, vars[*a], vars[*b], 1e-5).unwrap(),
            Step::Softmax => g.softmax(x).unwrap(),
            Step::LogSoftmax => g.log_softmax(x).unwrap(),
            Step::LogOfSoftmax => {
                let p = g.softmax(x).unwrap();
                g.log(p).unwrap()
            }
            Step::ScaledExp => {
                let s = g.scale(x, 0.3).unwrap();
                g.exp(s).unwrap()
            }
            Step::HalfSquare => {
                let s = g.square(x).unwrap();
                g.scale(s, 0.5).unwrap()
            }
            Step::AddBias(b) => g.add_bias(x, vars[*b]).unwrap(),
            Step::AddTiled(t) => g.add_tiled(x, vars[*t]).unwrap(),
            Step::Attention { proj, heads, keep } => {
                let seq = keep.len();
                let qkv = g.matmul(x, vars[*proj]).unwrap();
                g.attention(qkv, Some(keep), 1, seq, *heads).unwrap()
            }
            Step::Normalize(gap) => {
                let players = g.shape(x)[0];
                g.efficiency_normalize(x, gap, 1, players).unwrap()
            }
            Step::MaskedFill(m) => g.masked_fill(x, m, -0.5).unwrap(),
            Step::SelectRows(rows) => g.select_rows(x, rows).unwrap(),
            Step::ConcatSelf => g.concat_rows(&[x, x]).unwrap(),
            Step::ClassToken(cls) => {
                let seq = g.shape(x)[0];
                g.with_class_token(x, vars[*cls], 1, seq).unwrap()
            }
            Step::Flip => {
                let s = g.shape(x).to_vec();
                g.reshape(x, &[s[1], s[0]]).unwrap()
            }
        };
    }
    let w = g.constant(rec.weights.clone());
    let p = g.mul(x, w).unwrap();
    (g.sum(p).unwrap(), vars)
}

fn loss_at(rec: &Recipe, values: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::inference();
    let (loss, _) = build(&mut g, rec, values);
    g.value(loss).data()[0]
}

/// Largest over inputs of `‖g − fd‖ / √(‖g‖² + ‖fd‖²)` with central differences.
pub fn relative_error(seed: u64) -> f64 {
    let rec = recipe(seed);
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, &rec, &rec.inputs);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; rec.inputs[k].numel()]);
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..rec.inputs[k].numel() {
            let mut plus = rec.inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = rec.inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (loss_at(&rec, &plus) - loss_at(&rec, &minus)) / (2.0 * h);
            diff += (analytic[i] - fd).powi(2);
            norm += analytic[i].powi(2) + fd.powi(2);
        }
        if norm > 1e-16 {
            worst = worst.max(diff.sqrt() / norm.sqrt());
        }
    }
    worst
}
