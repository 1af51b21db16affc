use dmhsa::model::pooling::{attention_weights, double_attention, head_contexts, head_drop, mhsa_pool, statistical_pool};
use dmhsa::tensor::{Mode, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SUM_TOL: f64 = 1e-6;
pub const PERMUTATION_TOL: f64 = 1e-6;

struct Instance {
    t: usize,
    heads: usize,
    d_h: usize,
    h: Vec<f64>,
    u: Vec<f64>,
    u_prime: Vec<f64>,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let t = rng.random_range(1..=40);
    let heads = [1, 2, 3, 4, 8][rng.random_range(0..5)];
    let d_h = rng.random_range(1..=8);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
    Instance {
        t,
        heads,
        d_h,
        h: draw(t * heads * d_h),
        u: draw(heads * d_h),
        u_prime: draw(d_h),
    }
}

pub fn leaf<T: Real>(tape: &mut Tape<T>, shape: &[usize], data: &[f64]) -> Var {
    tape.input(Tensor::from_f64(shape, data).unwrap())
}

struct Pooled {
    weights: Vec<f64>,
    head_weights: Vec<f64>,
    mhsa: Vec<f64>,
    dmhsa: Vec<f64>,
    stats: Vec<f64>,
}

fn pool<T: Real>(x: &Instance, h: &[f64]) -> Pooled {
    let d = x.heads * x.d_h;
    let mut tape = Tape::<T>::new();
    let hv = leaf(&mut tape, &[x.t, d], h);
    let u = leaf(&mut tape, &[x.heads, x.d_h], &x.u);
    let up = leaf(&mut tape, &[x.d_h], &x.u_prime);
    let w = attention_weights(&mut tape, hv, u, x.heads).unwrap();
    let (mhsa, _) = mhsa_pool(&mut tape, hv, u, x.heads).unwrap();
    let c = head_contexts(&mut tape, hv, w, x.heads).unwrap();
    let (dmhsa, hw) = double_attention(&mut tape, c, up, None).unwrap();
    let stats = statistical_pool(&mut tape, hv).unwrap();
    let f = |v: Var| tape.value(v).to_f64();
    Pooled {
        weights: f(w),
        head_weights: f(hw),
        mhsa: f(mhsa),
        dmhsa: f(dmhsa),
        stats: f(stats),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation from 1 of the first-stage column sums and the head
/// weight sum.
fn sum_error(p: &Pooled, t: usize, heads: usize) -> f64 {
    let mut worst: f64 = (p.head_weights.iter().sum::<f64>() - 1.0).abs();
    for j in 0..heads {
        let col: f64 = (0..t).map(|i| p.weights[i * heads + j]).sum();
        worst = worst.max((col - 1.0).abs());
    }
    worst
}

/// Runs the attention algebra checks over `n` random instances in precision
/// `T`; returns the worst sum error and the worst permutation error.
pub fn algebra_sweep<T: Real>(n: usize, seed: u64) -> (f64, f64) {
    let mut rng = super::rng(seed);
    let (mut sums, mut perm): (f64, f64) = (0.0, 0.0);
    for _ in 0..n {
        let x = instance(&mut rng);
        let d = x.heads * x.d_h;
        let base = pool::<T>(&x, &x.h);
        sums = sums.max(sum_error(&base, x.t, x.heads));

        let mut order: Vec<usize> = (0..x.t).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<f64> = order.iter().flat_map(|&r| x.h[r * d..(r + 1) * d].iter().copied()).collect();
        let p = pool::<T>(&x, &shuffled);
        perm = perm
            .max(max_diff(&base.mhsa, &p.mhsa))
            .max(max_diff(&base.dmhsa, &p.dmhsa))
            .max(max_diff(&base.stats, &p.stats));
    }
    (sums, perm)
}

/// DMHSA, MHSA and self-attention outputs for a single head.
pub fn single_head_outputs<T: Real>(t: usize, d: usize, rng: &mut ChaCha8Rng) -> [Vec<T>; 3] {
    let normal = Normal::new(0.0, 2.0).unwrap();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
    let (h, u, up) = (draw(t * d), draw(d), draw(d));
    let mut tape = Tape::<T>::new();
    let hv = leaf(&mut tape, &[t, d], &h);
    let uv = leaf(&mut tape, &[1, d], &u);
    let upv = leaf(&mut tape, &[d], &up);
    let (mhsa, _) = mhsa_pool(&mut tape, hv, uv, 1).unwrap();
    // Self-attention written out directly: softmax over time of h_t·u/√D.
    let query = tape.reshape(uv, &[d, 1]).unwrap();
    let scores = tape.matmul(hv, query).unwrap();
    let scaled = tape.scale(scores, T::one() / T::c(d as f64).sqrt());
    let w = tape.softmax(scaled, 0).unwrap();
    let wt = tape.transpose(w).unwrap();
    let sa = tape.matmul(wt, hv).unwrap();
    let aw = attention_weights(&mut tape, hv, uv, 1).unwrap();
    let c = head_contexts(&mut tape, hv, aw, 1).unwrap();
    let (dmhsa, _) = double_attention(&mut tape, c, upv, None).unwrap();
    [tape.data(dmhsa).to_vec(), tape.data(mhsa).to_vec(), tape.data(sa).to_vec()]
}

/// Largest deviation of `w′` from uniform when every head context is equal.
pub fn equal_contexts_head_weight_error(n: usize, seed: u64) -> f64 {
    let mut rng = super::rng(seed);
    let normal = Normal::new(0.0, 3.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(1..=32);
        let d_h = rng.random_range(1..=16);
        let c: Vec<f64> = (0..d_h).map(|_| normal.sample(&mut rng)).collect();
        let up: Vec<f64> = (0..d_h).map(|_| normal.sample(&mut rng)).collect();
        let mut tape = Tape::<f64>::new();
        let cv = leaf(&mut tape, &[k, d_h], &c.repeat(k));
        let upv = leaf(&mut tape, &[d_h], &up);
        let (_, w) = double_attention(&mut tape, cv, upv, None).unwrap();
        worst = tape
            .data(w)
            .iter()
            .fold(worst, |m, &x| m.max((x - 1.0 / k as f64).abs()));
    }
    worst
}

/// Per-head empirical drop rate over `draws` masks and the worst deviation
/// of renormalized weights from summing to one.
pub fn head_drop_statistics(heads: usize, p: f64, draws: usize, seed: u64) -> (Vec<f64>, f64) {
    let mut rng = super::rng(seed);
    let mut dropped = vec![0usize; heads];
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let raw: Vec<f64> = (0..heads).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let out = head_drop(&w, p, &mut rng, Mode::Train).unwrap();
        for (j, &v) in out.iter().enumerate() {
            if v == 0.0 {
                dropped[j] += 1;
            }
        }
        worst = worst.max((out.iter().sum::<f64>() - 1.0).abs());
    }
    (dropped.iter().map(|&c| c as f64 / draws as f64).collect(), worst)
}

