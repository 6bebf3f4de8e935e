//! Finite-difference checks of every differentiable operation and of a whole
//! residual block, on small seeded random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::ResidualBlock;
use crate::tensor::{
    grad_check, grad_check_with_fault, Element, GradCheckReport, Graph, Objective, OpKind, Padding, PoolIndices,
    Tensor, Var,
};

/// Step for the central differences, small enough that no ReLU or max-pool
/// decision flips between the two evaluations.
pub const EPS: f64 = 1e-6;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive dims")
}

/// Values bounded away from zero, for ReLU.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// A shuffled ladder of distinct values, so no pooling window has a tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / n as f32).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("positive dims")
}

fn weights<T: Element>(w: &[f32]) -> Vec<T> {
    w.iter().map(|&v| T::from_single(v)).collect()
}

/// Reduces an op's output to a scalar with fixed random weights, so every
/// output element contributes a distinct upstream gradient.
struct Reduce<F> {
    w: Vec<f32>,
    op: F,
}

trait OpFn {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var>;
}

impl<F: OpFn> Objective for Reduce<F> {
    fn eval<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let y = self.op.apply(g, p)?;
        g.weighted_sum(y, weights(&self.w))
    }
}

struct Conv {
    stride: usize,
    padding: Padding,
}
impl OpFn for Conv {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        g.conv2d(p[0], p[1], p[2], self.stride, self.padding)
    }
}

struct ConvT;
impl OpFn for ConvT {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        g.conv2d_transpose(p[0], p[1], p[2], 2)
    }
}

struct Pool;
impl OpFn for Pool {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        Ok(g.maxpool2d(p[0])?.0)
    }
}

/// Unpools `p[0]` with the argmax positions of a fixed tensor.
struct Unpool(PoolIndices);
impl OpFn for Unpool {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let hw = self.0.source_hw();
        g.max_unpool2d(p[0], &self.0, hw)
    }
}

/// Pool then unpool the same input.
struct PoolUnpool;
impl OpFn for PoolUnpool {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let hw = (g.shape(p[0])[2], g.shape(p[0])[3]);
        let (y, idx) = g.maxpool2d(p[0])?;
        g.max_unpool2d(y, &idx, hw)
    }
}

struct Relu;
impl OpFn for Relu {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        Ok(g.relu(p[0]))
    }
}

struct Sigmoid;
impl OpFn for Sigmoid {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        Ok(g.sigmoid(p[0]))
    }
}

struct Concat;
impl OpFn for Concat {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        g.concat_channels(p[0], p[1])
    }
}

struct Add;
impl OpFn for Add {
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        g.add(p[0], p[1])
    }
}

struct Bce {
    target: Tensor<f32>,
}
impl Objective for Bce {
    fn eval<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let t = g.constant(self.target.shape().to_vec(), weights(self.target.data()))?;
        g.bce_loss(p[0], t)
    }
}

/// `p[0]` is the block input, the rest its parameters in store order.
struct Block {
    block: ResidualBlock,
    w: Vec<f32>,
}
impl Objective for Block {
    fn eval<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let overrides: Vec<(String, Var)> = self
            .block
            .params
            .names()
            .zip(&p[1..])
            .map(|(n, v)| (n.to_string(), *v))
            .collect();
        let scope = crate::nn::Scope::with_overrides(&self.block.params, "", &overrides);
        let y = self.block.block.forward(g, &scope, p[0])?;
        g.weighted_sum(y, weights(&self.w))
    }
}

fn check<O: Objective>(obj: &O, params: &[Tensor<f32>], fault: Option<OpKind>) -> Result<GradCheckReport> {
    match fault {
        Some(kind) => grad_check_with_fault(obj, params, EPS, kind),
        None => grad_check(obj, params, EPS),
    }
}

fn reduce<F: OpFn>(
    rng: &mut ChaCha8Rng,
    op: F,
    out_len: usize,
    params: &[Tensor<f32>],
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let w = uniform(rng, &[out_len], -1.0, 1.0).into_data();
    check(&Reduce { w, op }, params, fault)
}

/// Names of the checks, in the order [`run_suite`] reports them.
pub const CHECKS: [&str; 12] = [
    "conv2d",
    "conv2d_strided",
    "conv2d_transpose",
    "maxpool2d",
    "max_unpool2d",
    "maxpool_unpool",
    "relu",
    "sigmoid",
    "concat",
    "add",
    "bce_loss",
    "residual_block",
];

/// Runs every check with inputs drawn from `seed`. With `fault` set, that
/// op's backward rule is deliberately corrupted.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut push = |name, report| out.push(CheckOutcome { name, report });

    let conv = [uniform(r, &[2, 3, 6, 6], -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -0.5, 0.5), uniform(r, &[4], -0.5, 0.5)];
    push("conv2d", reduce(r, Conv { stride: 1, padding: Padding::Same }, 2 * 4 * 36, &conv, fault)?);

    let strided = [uniform(r, &[1, 2, 7, 7], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5)];
    push(
        "conv2d_strided",
        reduce(r, Conv { stride: 2, padding: Padding::Explicit(1) }, 3 * 16, &strided, fault)?,
    );

    let up = [uniform(r, &[2, 3, 3, 3], -1.0, 1.0), uniform(r, &[3, 2, 2, 2], -0.5, 0.5), uniform(r, &[2], -0.5, 0.5)];
    push("conv2d_transpose", reduce(r, ConvT, 2 * 2 * 36, &up, fault)?);

    let x = distinct(r, &[2, 2, 6, 6]);
    push("maxpool2d", reduce(r, Pool, 2 * 2 * 9, &[x.clone()], fault)?);

    let idx = {
        let mut g = Graph::<f32>::inference();
        let v = g.leaf(&x);
        g.maxpool2d(v)?.1
    };
    let y = uniform(r, &[2, 2, 3, 3], -1.0, 1.0);
    push("max_unpool2d", reduce(r, Unpool(idx), 2 * 2 * 36, &[y], fault)?);

    let x = distinct(r, &[1, 3, 4, 6]);
    push("maxpool_unpool", reduce(r, PoolUnpool, 3 * 24, &[x], fault)?);

    let x = off_kink(r, &[3, 5]);
    push("relu", reduce(r, Relu, 15, &[x], fault)?);

    let x = uniform(r, &[3, 5], -4.0, 4.0);
    push("sigmoid", reduce(r, Sigmoid, 15, &[x], fault)?);

    let cat = [uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)];
    push("concat", reduce(r, Concat, 2 * 5 * 9, &cat, fault)?);

    let sum = [uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 4], -1.0, 1.0)];
    push("add", reduce(r, Add, 24, &sum, fault)?);

    let pred = uniform(r, &[2, 1, 4, 4], 0.05, 0.95);
    let target = uniform(r, &[2, 1, 4, 4], 0.0, 1.0);
    push("bce_loss", check(&Bce { target }, &[pred], fault)?);

    let block = ResidualBlock::new(2, 3, 3, r.random())?;
    let mut params = vec![uniform(r, &[1, 2, 6, 6], -1.0, 1.0)];
    params.extend(block.params.iter().map(|(_, t)| {
        // nonzero biases so the bias path is exercised
        let mut t = t.clone();
        for v in t.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
        t
    }));
    let w = uniform(r, &[3 * 36], -1.0, 1.0).into_data();
    push("residual_block", check(&Block { block, w }, &params, fault)?);

    Ok(out)
}
