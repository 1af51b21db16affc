#![allow(dead_code)]

pub mod algebra;
pub mod oracles;
pub mod synthetic;
pub mod toy;

use dmhsa::model::{pooling, ModelConfig, PoolingKind, SpeakerNet, VggConfig};
use dmhsa::tensor::{Mode, ParamStore, Tape, Tensor, Var};
use dmhsa::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in ±[0.1, 1], kept away from the ReLU kink.
pub fn away_from_zero(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Denominator floor for the relative error. Central differences of the
/// end-to-end loss carry roundoff of about 1e-9, so exactly-zero gradients
/// (dead ReLU channels) would otherwise read as large relative errors; with
/// this floor, entries below it must agree to 1e-8 absolute.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Scalarizes an op output with a fixed random projection.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).numel();
    let mut r = rng(seed ^ 0xA5A5);
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let shape = tape.shape(out).to_vec();
    let w = tape.input(Tensor::new(&shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Max relative error between tape gradients and central differences for
/// every element of every input. `f` maps the input vars to any output; the
/// output is reduced with a fixed random projection.
pub fn check_op<F>(seed: u64, inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let t = t.clone();
                tape.input(if grad { t.with_grad() } else { t })
            })
            .collect();
        let out = f(&mut tape, &vars).expect("op");
        let loss = project(&mut tape, out, seed).expect("projection");
        let value = tape.value(loss).item();
        if !grad {
            return (value, Vec::new());
        }
        tape.backward(loss, &mut ParamStore::new()).expect("backward");
        let grads = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, away_from_zero(n, rng)).unwrap()
}

/// Gradient checks for every differentiable tape op and pooling composite.
pub fn op_gradient_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(2024);
    let mut t = |shape: &[usize]| tensor(shape, &mut r);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| {
        out.push((name, check_op(name.len() as u64, &inputs, f)));
    };

    run("matmul", vec![t(&[3, 4]), t(&[4, 5])], &|tp, v| tp.matmul(v[0], v[1]));
    run("linear", vec![t(&[3, 4]), t(&[4, 2]), t(&[2])], &|tp, v| tp.linear(v[0], v[1], v[2]));
    run("add", vec![t(&[2, 3]), t(&[2, 3])], &|tp, v| tp.add(v[0], v[1]));
    run("mul", vec![t(&[2, 3]), t(&[2, 3])], &|tp, v| tp.mul(v[0], v[1]));
    run("scale", vec![t(&[5])], &|tp, v| Ok(tp.scale(v[0], -1.7)));
    run("sum", vec![t(&[2, 2])], &|tp, v| Ok(tp.sum(v[0])));
    run("reshape", vec![t(&[2, 6])], &|tp, v| tp.reshape(v[0], &[3, 4]));
    run("transpose", vec![t(&[2, 5])], &|tp, v| tp.transpose(v[0]));
    run("swap_leading", vec![t(&[2, 3, 4])], &|tp, v| tp.swap_leading(v[0]));
    run("relu", vec![t(&[4, 4])], &|tp, v| Ok(tp.relu(v[0])));
    run("conv2d_same3x3", vec![t(&[2, 5, 4]), t(&[3, 2, 3, 3]), t(&[3])], &|tp, v| {
        tp.conv2d_same3x3(v[0], v[1], v[2])
    });
    run("maxpool2x2", vec![t(&[2, 5, 6])], &|tp, v| tp.maxpool2x2(v[0]));
    run("batchnorm_batch", vec![t(&[4, 3]), t(&[3]), t(&[3])], &|tp, v| {
        Ok(tp.batchnorm_batch(v[0], v[1], v[2], 1e-5)?.0)
    });
    run("batchnorm_running", vec![t(&[3, 3]), t(&[3]), t(&[3])], &|tp, v| {
        tp.batchnorm_running(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
    });
    run("softmax_axis0", vec![t(&[4, 3])], &|tp, v| tp.softmax(v[0], 0));
    run("softmax_axis1", vec![t(&[2, 3, 4])], &|tp, v| tp.softmax(v[0], 1));
    run("dropout", vec![t(&[3, 4])], &|tp, v| tp.dropout(v[0], 0.4, &mut rng(5), Mode::Train));
    run("cross_entropy", vec![t(&[3, 4])], &|tp, v| tp.cross_entropy(v[0], &[0, 3, 1], None));
    run("cross_entropy_weighted", vec![t(&[3, 4])], &|tp, v| {
        tp.cross_entropy(v[0], &[0, 3, 3], Some(&[0.5, 1.0, 1.5, 2.5]))
    });
    run("head_scores", vec![t(&[5, 6]), t(&[3, 2])], &|tp, v| tp.head_scores(v[0], v[1], 3, 0.7));
    run("head_contexts", vec![t(&[5, 6]), t(&[5, 3])], &|tp, v| tp.head_contexts(v[0], v[1], 3));
    run("mask_renorm", vec![t(&[5, 1])], &|tp, v| {
        let w = tp.softmax(v[0], 0)?;
        tp.mask_renorm(w, &[true, false, true, true, false])
    });
    run("stat_pool", vec![t(&[5, 4])], &|tp, v| tp.stat_pool(v[0], 1e-9));
    run("concat_rows", vec![t(&[1, 3]), t(&[2, 3])], &|tp, v| tp.concat_rows(&[v[0], v[1]]));
    run("attention_weights", vec![t(&[6, 8]), t(&[4, 2])], &|tp, v| {
        pooling::attention_weights(tp, v[0], v[1], 4)
    });
    run("mhsa_pool", vec![t(&[6, 8]), t(&[2, 4])], &|tp, v| Ok(pooling::mhsa_pool(tp, v[0], v[1], 2)?.0));
    run("double_attention", vec![t(&[4, 3]), t(&[3])], &|tp, v| {
        Ok(pooling::double_attention(tp, v[0], v[1], Some(&[true, true, false, true]))?.0)
    });
    run("dmhsa_pool", vec![t(&[6, 8]), t(&[4, 2]), t(&[2])], &|tp, v| {
        let w = pooling::attention_weights(tp, v[0], v[1], 4)?;
        let c = pooling::head_contexts(tp, v[0], w, 4)?;
        Ok(pooling::double_attention(tp, c, v[2], None)?.0)
    });
    out
}

/// Coordinates sampled per parameter tensor in the end-to-end check.
pub const GRADCHECK_COORDS: usize = 8;

/// Pooling variants covered by the end-to-end check.
pub const GRADCHECK_POOLINGS: [PoolingKind; 5] = [
    PoolingKind::Statistical,
    PoolingKind::SelfAttention,
    PoolingKind::Mhsa { heads: 2 },
    PoolingKind::Mhsa { heads: 4 },
    PoolingKind::Dmhsa { heads: 4, head_drop: 0.3 },
];

pub fn tiny_config(pooling: PoolingKind) -> ModelConfig {
    ModelConfig {
        vgg: VggConfig {
            channels: vec![4, 8, 16],
        },
        pooling,
        fc1: 16,
        embed_dim: 8,
        fc3: 8,
        n_classes: 3,
    }
}

/// Finite-difference check of a tiny f64 network (channels 4/8/16, 32–48
/// frames, train mode, class-weighted loss) over a sample of coordinates of
/// every parameter tensor.
pub fn end_to_end_gradient_check(pooling: PoolingKind, coords_per_param: usize) -> f64 {
    let mut net = SpeakerNet::<f64>::new(tiny_config(pooling), 11).unwrap();
    let mut r = rng(12);
    let batch: Vec<Tensor<f64>> = [32, 40, 48]
        .iter()
        .map(|&n| Tensor::new(&[1, n, 80], away_from_zero(n * 80, &mut r)).unwrap())
        .collect();
    let targets = [0, 2, 1];
    let weights = [0.7, 1.2, 1.9];
    let loss_of = |net: &mut SpeakerNet<f64>, grad: bool| -> f64 {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &batch, &mut rng(13)).unwrap();
        let loss = tape.cross_entropy(out.logits, &targets, Some(&weights)).unwrap();
        if grad {
            net.store_mut().zero_grad();
            tape.backward(loss, net.store_mut()).unwrap();
        }
        tape.value(loss).item()
    };
    loss_of(&mut net, true);
    let ids: Vec<_> = net.store().ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = net.store().get(id).tensor.numel();
        let grad = net.store().get(id).tensor.grad.clone().expect("every parameter is reachable");
        for _ in 0..coords_per_param.min(n) {
            let j = r.random_range(0..n);
            let orig = net.store().get(id).tensor.data()[j];
            net.store_mut().get_mut(id).tensor.data_mut()[j] = orig + FD_STEP;
            let plus = loss_of(&mut net, false);
            net.store_mut().get_mut(id).tensor.data_mut()[j] = orig - FD_STEP;
            let minus = loss_of(&mut net, false);
            net.store_mut().get_mut(id).tensor.data_mut()[j] = orig;
            let e = rel_err(grad[j], (plus - minus) / (2.0 * FD_STEP));
            worst = worst.max(e);
        }
    }
    worst
}

/// Builds a network with the given front-end widths and runs one utterance of
/// `n_frames` frames through it. Returns the hidden sequence shape `[T, D]`
/// and the logits and embedding shapes.
pub fn front_end_shapes(channels: &[usize], n_frames: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let cfg = ModelConfig {
        vgg: VggConfig {
            channels: channels.to_vec(),
        },
        pooling: PoolingKind::Dmhsa {
            heads: 8,
            head_drop: 0.01,
        },
        fc1: 64,
        embed_dim: 32,
        fc3: 32,
        n_classes: 5,
    };
    let mut net = SpeakerNet::<f32>::new(cfg, 1)?;
    net.eval();
    let mut r = rng(3);
    let x = Tensor::new(&[1, n_frames, 80], (0..n_frames * 80).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let h = net.vgg_forward(&mut tape, input)?;
    let out = net.forward_eval(&mut tape, &[x])?;
    Ok((
        tape.shape(h).to_vec(),
        tape.shape(out.logits).to_vec(),
        tape.shape(out.embeddings).to_vec(),
    ))
}
