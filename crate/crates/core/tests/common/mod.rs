//! Independent reference implementations used as oracles by the integration
//! tests. None of these call into the library code they check.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;

use gqa_core::tensor::Tensor;

fn rational_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite input")
}

fn floor_to_usize(q: &BigRational) -> usize {
    let f: BigInt = q.floor().to_integer();
    f.to_string().parse().expect("nonnegative quota")
}

/// Exact-arithmetic proportional split with largest-remainder leftover
/// (ties to lower index) and the one-query-minimum repair.
pub fn split_exact(weights: &[BigRational], n_q: usize) -> Vec<usize> {
    let g = weights.len();
    let zero = BigRational::from_integer(BigInt::from(0));
    let total = weights.iter().fold(zero.clone(), |acc, w| acc + w);
    if total == zero {
        return (0..g).map(|i| n_q / g + usize::from(i < n_q % g)).collect();
    }
    let n = BigRational::from_integer(BigInt::from(n_q));
    let quotas: Vec<BigRational> = weights.iter().map(|w| w * &n / &total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(floor_to_usize).collect();
    let rems: Vec<BigRational> = quotas
        .iter()
        .zip(&counts)
        .map(|(q, &c)| q - BigRational::from_integer(BigInt::from(c)))
        .collect();
    let leftover = n_q - counts.iter().sum::<usize>();
    // selection by repeated scan for the largest remainder, lowest index first
    let mut taken = vec![false; g];
    for _ in 0..leftover {
        let mut best: Option<usize> = None;
        for i in 0..g {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if rems[i] > rems[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.expect("leftover below group count");
        taken[b] = true;
        counts[b] += 1;
    }
    loop {
        let Some(zero_at) = (0..g).find(|&i| counts[i] == 0) else {
            break;
        };
        let mut donor = 0;
        for i in 0..g {
            if counts[i] > counts[donor] {
                donor = i;
            }
        }
        counts[donor] -= 1;
        counts[zero_at] += 1;
    }
    counts
}

pub fn split_exact_f64(weights: &[f64], n_q: usize) -> Vec<usize> {
    let w: Vec<BigRational> = weights.iter().map(|&x| rational_from_f64(x)).collect();
    split_exact(&w, n_q)
}

pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Row-major 2-D matmul by triple loop.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Per-head attention where query head `h` reads key/value head `kv_of[h]`.
/// Inputs are `[B, T, heads, d]`; the result is `[B, H, T, d]`.
pub fn attention_naive(q: &Tensor, k: &Tensor, v: &Tensor, kv_of: &[usize]) -> Vec<f64> {
    let (b, t, h, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let g = k.shape()[2];
    let qa =
        |bi: usize, ti: usize, hi: usize, di: usize| q.data()[((bi * t + ti) * h + hi) * d + di];
    let ka =
        |bi: usize, ti: usize, gi: usize, di: usize| k.data()[((bi * t + ti) * g + gi) * d + di];
    let va =
        |bi: usize, ti: usize, gi: usize, di: usize| v.data()[((bi * t + ti) * g + gi) * d + di];
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; b * h * t * d];
    for bi in 0..b {
        for hi in 0..h {
            let gi = kv_of[hi];
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..d)
                            .map(|x| qa(bi, i, hi, x) * ka(bi, j, gi, x))
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for x in 0..d {
                    out[((bi * h + hi) * t + i) * d + x] =
                        (0..t).map(|j| exps[j] / z * va(bi, j, gi, x)).sum::<f64>();
                }
            }
        }
    }
    out
}

/// Averages column blocks: column block `g` of the output is the mean of
/// input column blocks `g*r .. (g+1)*r` where `r = heads / groups`.
pub fn column_block_mean(
    w: &[f64],
    rows: usize,
    heads: usize,
    groups: usize,
    d: usize,
) -> Vec<f64> {
    let r = heads / groups;
    let mut out = Vec::with_capacity(rows * groups * d);
    for row in 0..rows {
        for g in 0..groups {
            for j in 0..d {
                let mut s = 0.0;
                for member in g * r..(g + 1) * r {
                    s += w[row * heads * d + member * d + j];
                }
                out.push(s / r as f64);
            }
        }
    }
    out
}

/// Parameter count obtained by listing every weight's shape and summing
/// products.
#[allow(clippy::too_many_arguments)]
pub fn count_by_shapes(
    image: usize,
    patch: usize,
    channels: usize,
    d: usize,
    depth: usize,
    heads: usize,
    kv: usize,
    mlp_ratio: usize,
    classes: usize,
) -> usize {
    let dk = d / heads;
    let tokens = (image / patch) * (image / patch) + 1;
    let mut shapes: Vec<Vec<usize>> = vec![
        vec![channels * patch * patch, d],
        vec![d],
        vec![d],
        vec![tokens, d],
    ];
    for _ in 0..depth {
        shapes.extend([
            vec![d],
            vec![d],
            vec![d, heads * dk],
            vec![heads * dk],
            vec![d, kv * dk],
            vec![kv * dk],
            vec![d, kv * dk],
            vec![kv * dk],
            vec![heads * dk, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, d * mlp_ratio],
            vec![d * mlp_ratio],
            vec![d * mlp_ratio, d],
            vec![d],
        ]);
    }
    shapes.extend([vec![d], vec![d], vec![d, classes], vec![classes]]);
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

/// Scalar AdamW iterated by hand.
pub fn adamw_scalar(
    mut w: f64,
    grads: &[f64],
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    wd: f64,
) -> f64 {
    let (mut m, mut v) = (0.0, 0.0);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        w *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    w
}
