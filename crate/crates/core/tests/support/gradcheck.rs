//! Backprop against central finite differences (h = 1e-5) and against the
//! hand-written pairwise-loss gradients. Each check returns the number of
//! gradient entries compared, or a description of the first mismatch.

#![allow(dead_code)]

use archrank_core::losses::{
    batch_loss, closed_form_grads, filter_pairs, l2_loss, linear_rank_loss, pair_indices, quadratic_rank_loss,
    LossConfig, LossKind, Reduction,
};
use archrank_core::numerics::{Activation, Dense, Matrix, Tape, Var};
use archrank_core::ranker::{InitScheme, MetaFeatures, RankerConfig, RankerWeights};
use archrank_core::seed::{rng_from, Rng};
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
pub const CLOSED_FORM_TOL: f64 = 1e-10;
/// Gradient magnitudes below this are compared absolutely: central
/// differences carry ~1e-11 of rounding noise, which is not a relative
/// error of the adjoint.
pub const SCALE_FLOOR: f64 = 1e-2;
/// Configurations with any ReLU or hinge input closer than this to its
/// kink are redrawn; central differences are meaningless across a kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub type Checked = Result<usize, String>;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(SCALE_FLOOR)
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn compare(what: impl Fn() -> String, fd: f64, bp: f64) -> Result<(), String> {
    if rel_err(fd, bp) < REL_TOL {
        Ok(())
    } else {
        Err(format!("{}: finite difference {fd} vs backprop {bp}", what()))
    }
}

// ---------------------------------------------------------------- tape ops

/// Checks `d/dx sum(op(x) ⊙ R)` for every input of one op, with `R` random.
fn check_op(name: &str, inputs: &[Matrix], build: &dyn Fn(&mut Tape, &[Var]) -> Var, rng: &mut Rng) -> Checked {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape()
    };
    let r = random_matrix(out_shape.0, out_shape.1, 1.0, rng);
    let eval = |vals: &[Matrix]| -> (f64, Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let rv = tape.leaf(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        let s = tape.sum(prod);
        (tape.scalar(s), tape, vars, s)
    };
    let (_, tape, vars, s) = eval(inputs);
    let grads = tape.backward(s).map_err(|e| e.to_string())?;
    let mut n = 0;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v, &inputs[k]);
        for e in 0..inputs[k].len() {
            let mut up = inputs.to_vec();
            let mut dn = inputs.to_vec();
            up[k].data_mut()[e] += H;
            dn[k].data_mut()[e] -= H;
            let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * H);
            compare(|| format!("{name}: input {k} entry {e}"), fd, g.data()[e])?;
            n += 1;
        }
    }
    Ok(n)
}

fn away_from_zero(m: Matrix) -> Matrix {
    m.map(|x| if x.abs() < 0.05 { x + 0.1f64.copysign(x) } else { x })
}

/// Every differentiable tape op over `trials` random shapes and inputs.
pub fn tape_ops(seed: u64, trials: usize) -> Checked {
    let mut rng = rng_from(seed, &[]);
    let mut n = 0;
    for trial in 0..trials {
        let (rows, k, m) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let x = random_matrix(rows, k, 1.5, &mut rng);
        let y = random_matrix(rows, k, 1.5, &mut rng);
        let w = random_matrix(m, k, 1.5, &mut rng);
        let row = random_matrix(1, k, 1.5, &mut rng);
        let other = random_matrix(rows, m, 1.0, &mut rng);
        let cols = rng.random_range(2..7);
        let split = rng.random_range(1..cols);
        let segs = vec![split, cols - split];
        let logits = random_matrix(rows, cols, 2.0, &mut rng);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
        let col = random_matrix(5, 1, 1.0, &mut rng);
        let pairs: Vec<(usize, usize)> = (0..4).map(|_| (rng.random_range(0..5), rng.random_range(0..5))).collect();

        type Build<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Var + 'a>;
        let cases: Vec<(&str, Vec<Matrix>, Build)> = vec![
            ("matmul_t", vec![x.clone(), w.clone()], Box::new(|tp, v| tp.matmul_t(v[0], v[1]).unwrap())),
            ("add_row", vec![x.clone(), row.clone()], Box::new(|tp, v| tp.add_row(v[0], v[1]).unwrap())),
            ("add", vec![x.clone(), y.clone()], Box::new(|tp, v| tp.add(v[0], v[1]).unwrap())),
            ("sub", vec![x.clone(), y.clone()], Box::new(|tp, v| tp.sub(v[0], v[1]).unwrap())),
            ("mul", vec![x.clone(), y.clone()], Box::new(|tp, v| tp.mul(v[0], v[1]).unwrap())),
            ("scale", vec![x.clone()], Box::new(|tp, v| tp.scale(v[0], -0.7))),
            ("offset", vec![x.clone()], Box::new(|tp, v| tp.offset(v[0], 0.3))),
            ("relu", vec![away_from_zero(x.clone())], Box::new(|tp, v| tp.relu(v[0]))),
            ("tanh", vec![x.clone()], Box::new(|tp, v| tp.tanh(v[0]))),
            ("exp", vec![x.clone()], Box::new(|tp, v| tp.exp(v[0]))),
            ("square", vec![x.clone()], Box::new(|tp, v| tp.square(v[0]))),
            ("mean_rows", vec![x.clone()], Box::new(|tp, v| tp.mean_rows(v[0]))),
            ("broadcast_rows", vec![row.clone()], Box::new(|tp, v| tp.broadcast_rows(v[0], 3).unwrap())),
            ("concat_cols", vec![x.clone(), other], Box::new(|tp, v| tp.concat_cols(v[0], v[1]).unwrap())),
            ("segment_softmax", vec![logits.clone()], Box::new(|tp, v| tp.segment_softmax(v[0], &segs).unwrap())),
            ("sum", vec![x.clone()], Box::new(|tp, v| tp.sum(v[0]))),
            ("mean", vec![x.clone()], Box::new(|tp, v| tp.mean(v[0]))),
            ("pair_diff", vec![col], Box::new(|tp, v| tp.pair_diff(v[0], &pairs).unwrap())),
            (
                "softmax_cross_entropy",
                vec![logits],
                Box::new(|tp, v| tp.softmax_cross_entropy(v[0], &labels).unwrap()),
            ),
        ];
        for (name, inputs, build) in cases {
            n += check_op(&format!("{name} (trial {trial})"), &inputs, &*build, &mut rng)?;
        }
    }
    Ok(n)
}

// ------------------------------------------------------------ ranker + loss

pub struct Config {
    pub weights: RankerWeights,
    pub x: Matrix,
    pub u: Matrix,
    pub perf: Vec<f64>,
    pub loss: LossConfig,
}

fn pre_activations(layers: &[Dense], input: &Matrix) -> (Vec<Matrix>, Matrix) {
    let mut pres = Vec::new();
    let mut h = input.clone();
    for l in layers {
        let mut lin = l.clone();
        lin.activation = Activation::Identity;
        let pre = lin.forward(&h).unwrap();
        h = pre.map(|v| l.activation.apply(v));
        pres.push(pre);
    }
    (pres, h)
}

/// Plain forward pass of the batch loss, independent of the tape.
fn plain_loss(w: &RankerWeights, x: &Matrix, u: &Matrix, perf: &[f64], loss: &LossConfig) -> f64 {
    let z = w.meta_features_of(x).unwrap();
    let scores = w.score_batch(u, &z).unwrap();
    match loss.kind {
        LossKind::L2 => scores.iter().zip(perf).map(|(v, p)| l2_loss(*v, *p)).sum::<f64>() / perf.len() as f64,
        kind => {
            let recs: Vec<(f64, f64)> = scores.iter().copied().zip(perf.iter().copied()).collect();
            let pairs = filter_pairs(&recs, loss.gap);
            pairs
                .iter()
                .map(|p| match kind {
                    LossKind::LinearRank => linear_rank_loss(p, loss.margin),
                    _ => quadratic_rank_loss(p, loss.margin).unwrap(),
                })
                .sum::<f64>()
                / pairs.len() as f64
        }
    }
}

/// Whether every ReLU and hinge input sits at least `KINK_MARGIN` from 0.
fn clear_of_kinks(c: &Config) -> bool {
    let (phi_pre, hx) = pre_activations(&c.weights.phi, &c.x);
    let n = hx.rows() as f64;
    let z: Vec<f64> = (0..hx.cols()).map(|j| (0..hx.rows()).map(|r| hx.get(r, j)).sum::<f64>() / n).collect();
    let mut cat = Matrix::zeros(c.u.rows(), c.u.cols() + z.len());
    for r in 0..c.u.rows() {
        cat.row_mut(r)[..c.u.cols()].copy_from_slice(c.u.row(r));
        cat.row_mut(r)[c.u.cols()..].copy_from_slice(&z);
    }
    let (rho_pre, scores) = pre_activations(&c.weights.rho, &cat);
    let relu_inputs = phi_pre.iter().chain(&rho_pre[..rho_pre.len() - 1]);
    if relu_inputs.flat_map(|m| m.data().iter()).any(|v| v.abs() < KINK_MARGIN) {
        return false;
    }
    if c.loss.kind != LossKind::L2 {
        for (i, j) in pair_indices(&c.perf, c.loss.gap) {
            let d = scores.get(i, 0) - scores.get(j, 0);
            if (c.loss.margin - d).abs() < KINK_MARGIN {
                return false;
            }
        }
    }
    true
}

/// A random ranker, sample batch, record batch and loss, redrawn until
/// no ReLU or hinge sits at a kink.
pub fn random_config(kind: LossKind, rng: &mut Rng) -> Config {
    loop {
        let d_in = rng.random_range(2..6);
        let cfg = RankerConfig {
            init: InitScheme::Glorot { bias: 0.0 },
            ..RankerConfig::default()
        };
        let mut weights = RankerWeights::init(d_in, 21, &cfg, rng).unwrap();
        for t in weights.tensors_mut() {
            if t.rows() == 1 {
                t.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
            }
        }
        let n = rng.random_range(2..6);
        let k = rng.random_range(3..7);
        let perf: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let c = Config {
            weights,
            x: random_matrix(n, d_in, 2.0, rng),
            u: random_matrix(k, 21, 2.0, rng),
            perf,
            loss: LossConfig {
                margin: rng.random_range(0.05..1.0),
                ..LossConfig::new(kind)
            },
        };
        if (kind == LossKind::L2 || !pair_indices(&c.perf, c.loss.gap).is_empty()) && clear_of_kinks(&c) {
            return c;
        }
    }
}

fn tape_grads(c: &Config) -> (f64, Vec<Matrix>) {
    let mut tape = Tape::new();
    let bound = c.weights.bind(&mut tape);
    let xv = tape.leaf(c.x.clone());
    let uv = tape.leaf(c.u.clone());
    let z = bound.meta_features(&mut tape, xv).unwrap();
    let s = bound.scores(&mut tape, uv, z).unwrap();
    let (l, _) = batch_loss(&mut tape, s, &c.perf, &c.loss, Reduction::Mean).unwrap().unwrap();
    let g = tape.backward(l).unwrap();
    let grads = bound.vars().iter().map(|&v| g.wrt(v, tape.value(v))).collect();
    (tape.scalar(l), grads)
}

/// Mean-reduced training losses (cycling linear, quadratic, l2) against
/// central differences in every bias entry and up to 25 random entries of
/// each weight matrix, over `configs` configurations.
pub fn training_losses(seed: u64, configs: usize) -> Checked {
    let mut rng = rng_from(seed, &[]);
    let mut n = 0;
    for trial in 0..configs {
        let kind = [LossKind::LinearRank, LossKind::QuadraticRank, LossKind::L2][trial % 3];
        let c = random_config(kind, &mut rng);
        let (value, grads) = tape_grads(&c);
        let plain = plain_loss(&c.weights, &c.x, &c.u, &c.perf, &c.loss);
        if (value - plain).abs() >= 1e-12 {
            return Err(format!("trial {trial}: tape loss {value} vs plain {plain}"));
        }
        let names = c.weights.tensor_names();
        for (t, name) in names.iter().enumerate() {
            let len = grads[t].len();
            let entries: Vec<usize> = if len <= 60 {
                (0..len).collect()
            } else {
                (0..25).map(|_| rng.random_range(0..len)).collect()
            };
            for e in entries {
                let mut w = c.weights.clone();
                w.tensors_mut()[t].data_mut()[e] += H;
                let up = plain_loss(&w, &c.x, &c.u, &c.perf, &c.loss);
                w.tensors_mut()[t].data_mut()[e] -= 2.0 * H;
                let dn = plain_loss(&w, &c.x, &c.u, &c.perf, &c.loss);
                compare(|| format!("trial {trial} {kind}: {name}[{e}]"), (up - dn) / (2.0 * H), grads[t].data()[e])?;
                n += 1;
            }
        }
    }
    Ok(n)
}

/// `∂v/∂u` from the ranker against central differences of `score`.
pub fn score_in_encoding(seed: u64, configs: usize) -> Checked {
    let mut rng = rng_from(seed, &[]);
    let mut n = 0;
    for trial in 0..configs {
        let c = random_config(LossKind::L2, &mut rng);
        let z: MetaFeatures = c.weights.meta_features_of(&c.x).unwrap();
        let u = c.u.row(0).to_vec();
        let (_, g) = c.weights.score_and_grad_u(&u, &z).unwrap();
        for k in 0..u.len() {
            let (mut up, mut dn) = (u.clone(), u.clone());
            up[k] += H;
            dn[k] -= H;
            let fd = (c.weights.score(&up, &z).unwrap() - c.weights.score(&dn, &z).unwrap()) / (2.0 * H);
            compare(|| format!("trial {trial}: u[{k}]"), fd, g[k])?;
            n += 1;
        }
    }
    Ok(n)
}

/// `∂v/∂w` for every φ and ρ parameter against central differences.
pub fn score_in_weights(seed: u64, configs: usize) -> Checked {
    let mut rng = rng_from(seed, &[]);
    let mut n = 0;
    for trial in 0..configs {
        let c = random_config(LossKind::L2, &mut rng);
        let u = Matrix::row_vector(c.u.row(0).to_vec()).unwrap();
        let mut tape = Tape::new();
        let bound = c.weights.bind(&mut tape);
        let xv = tape.leaf(c.x.clone());
        let uv = tape.leaf(u.clone());
        let z = bound.meta_features(&mut tape, xv).unwrap();
        let v = bound.scores(&mut tape, uv, z).unwrap();
        let g = tape.backward(v).unwrap();
        let plain = |w: &RankerWeights| w.score_batch(&u, &w.meta_features_of(&c.x).unwrap()).unwrap()[0];
        if (tape.scalar(v) - plain(&c.weights)).abs() >= 1e-12 {
            return Err(format!("trial {trial}: tape and plain scores differ"));
        }
        let names = c.weights.tensor_names();
        for (t, var) in bound.vars().into_iter().enumerate() {
            let grad = g.wrt(var, tape.value(var));
            for e in 0..grad.len() {
                let mut w = c.weights.clone();
                w.tensors_mut()[t].data_mut()[e] += H;
                let up = plain(&w);
                w.tensors_mut()[t].data_mut()[e] -= 2.0 * H;
                let fd = (up - plain(&w)) / (2.0 * H);
                compare(|| format!("trial {trial}: {}[{e}]", names[t]), fd, grad.data()[e])?;
                n += 1;
            }
        }
    }
    Ok(n)
}

// ------------------------------------------------ closed-form pair oracle

/// Backprop of the summed ranking losses against the closed-form
/// per-score gradients over `batches` random batches; returns the number
/// of batches with at least one pair.
pub fn closed_form_pairs(seed: u64, batches: usize) -> Checked {
    let mut rng = rng_from(seed, &[]);
    let mut used = 0;
    for trial in 0..batches {
        let n = rng.random_range(2..33);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Coarse grid so some pairs tie and fall inside the gap.
        let perf: Vec<f64> = (0..n).map(|_| (rng.random_range(0..40) as f64) / 40.0).collect();
        let margin = rng.random_range(0.05..1.0);
        let mut any = false;
        for kind in [LossKind::LinearRank, LossKind::QuadraticRank] {
            let cfg = LossConfig { kind, margin, gap: 0.01 };
            let mut tape = Tape::new();
            let v = tape.leaf(Matrix::column_vector(scores.clone()).unwrap());
            let Some((loss, _)) = batch_loss(&mut tape, v, &perf, &cfg, Reduction::Sum).unwrap() else {
                continue;
            };
            any = true;
            let g = tape.backward(loss).unwrap().wrt(v, tape.value(v));
            let pairs = pair_indices(&perf, cfg.gap);
            let want = closed_form_grads(&scores, &pairs, margin, kind).unwrap();
            for (k, (a, b)) in g.data().iter().zip(&want).enumerate() {
                if (a - b).abs() >= CLOSED_FORM_TOL {
                    return Err(format!("batch {trial} {kind}: score {k} backprop {a} vs closed form {b}"));
                }
            }
        }
        used += any as usize;
    }
    Ok(used)
}
