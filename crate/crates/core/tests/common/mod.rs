//! Random network generators and independent reference evaluators.
#![allow(dead_code)]

use linrestrict::{Dense, Layer, LineQuery, Network, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain multilayer perceptron: ReLU after every layer except the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// `(weights[out][in], bias)` per layer.
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl Mlp {
    pub fn random(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], output: usize) -> Mlp {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let scale = (2.0 / w[0] as f64).sqrt();
                let weights = (0..w[1])
                    .map(|_| (0..w[0]).map(|_| rng.gen_range(-1.0..1.0) * scale).collect())
                    .collect();
                let bias = (0..w[1]).map(|_| rng.gen_range(-0.5..0.5)).collect();
                (weights, bias)
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].0[0].len()
    }

    pub fn network(&self) -> Network {
        let mut layers = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                layers.push(Layer::Relu);
            }
            layers.push(Layer::Dense(Dense::from_rows(w.clone(), b.clone()).unwrap()));
        }
        Network::new(vec![self.input_len()], layers).unwrap()
    }

    /// Output and activation pattern (one bool per hidden unit, active iff > 0).
    pub fn eval(&self, x: &[f64], pattern: &mut Vec<bool>) -> Vec<f64> {
        pattern.clear();
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut z: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, bi)| row.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>() + bi)
                .collect();
            if i < last {
                for v in &mut z {
                    let on = *v > 0.0;
                    pattern.push(on);
                    if !on {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        h
    }

    /// Activation pattern as packed words, for fast comparison in scans.
    pub fn pattern_bits(&self, x: &[f64], scratch: &mut [Vec<f64>; 2], bits: &mut Vec<u64>) {
        bits.clear();
        let mut count = 0usize;
        let last = self.layers.len() - 1;
        scratch[0].clear();
        scratch[0].extend_from_slice(x);
        for (w, b) in self.layers.iter().take(last) {
            let (src, dst) = {
                let (a, c) = scratch.split_at_mut(1);
                (&a[0], &mut c[0])
            };
            dst.clear();
            for (row, bi) in w.iter().zip(b) {
                let mut z = *bi;
                for (a, v) in row.iter().zip(src.iter()) {
                    z += a * v;
                }
                let on = z > 0.0;
                if count.is_multiple_of(64) {
                    bits.push(0);
                }
                if on {
                    *bits.last_mut().unwrap() |= 1 << (count % 64);
                }
                count += 1;
                dst.push(if on { z } else { 0.0 });
            }
            scratch.swap(0, 1);
        }
    }
}

pub fn random_point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn vector(v: Vec<f64>) -> Tensor {
    Tensor::vector(v).unwrap()
}

pub fn random_query(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> LineQuery {
    LineQuery::new(vector(random_point(rng, dim, scale)), vector(random_point(rng, dim, scale))).unwrap()
}

/// Random ReLU MLP with `hidden_layers` layers of width in `widths`.
pub fn random_mlp(
    rng: &mut ChaCha8Rng,
    input: std::ops::RangeInclusive<usize>,
    hidden_layers: std::ops::RangeInclusive<usize>,
    widths: std::ops::RangeInclusive<usize>,
    output: std::ops::RangeInclusive<usize>,
) -> Mlp {
    let input = rng.gen_range(input);
    let depth = rng.gen_range(hidden_layers);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(widths.clone())).collect();
    let output = rng.gen_range(output);
    Mlp::random(rng, input, &hidden, output)
}

pub fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Lowest index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut m = 0;
    for i in 1..v.len() {
        if v[i] > v[m] {
            m = i;
        }
    }
    m
}

/// Sorted ratios `[k/n, (k+1)/n]` across which `piece` changes.
pub fn scan_changes<P: PartialEq>(n: usize, mut piece: impl FnMut(f64) -> P) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut prev = piece(0.0);
    for k in 1..=n {
        let t = k as f64 / n as f64;
        let cur = piece(t);
        if cur != prev {
            out.push(((k - 1) as f64 / n as f64, t));
        }
        prev = cur;
    }
    out
}
