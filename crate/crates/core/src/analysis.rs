//! Line-level analyses built on the partition: class segments, partition
//! density, gradient deviation, and FGSM / random perturbation directions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{canonicalize, exactline_network, maxpool_window_crossings, LineQuery};
use crate::error::{Error, Result};
use crate::network::{GradientEvaluator, Network};
use crate::tensor::Tensor;

/// Maximal interval of constant predicted class. A boundary ratio belongs to
/// the segment on its right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSegment {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub class_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub partition_count: usize,
    pub length: f64,
    pub density: f64,
    pub gradient_deviation: Option<f64>,
}

fn argmax(values: &[f64]) -> usize {
    let mut m = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[m] {
            m = i;
        }
    }
    m
}

/// Splits the query into maximal intervals of constant argmax output.
pub fn decision_segments(net: &Network, query: &LineQuery) -> Result<Vec<ClassSegment>> {
    if net.output_len() < 2 {
        return Err(Error::Dimension(format!(
            "class segmentation needs at least 2 outputs, network has {}",
            net.output_len()
        )));
    }
    let line = exactline_network(net, query)?;
    let mut bounds = vec![0.0];
    for w in line.endpoints().windows(2) {
        let (a, b) = (&w[0], &w[1]);
        for beta in maxpool_window_crossings(a.postimage.data(), b.postimage.data()) {
            bounds.push(a.alpha + beta * (b.alpha - a.alpha));
        }
        bounds.push(b.alpha);
    }

    let mut segments: Vec<ClassSegment> = Vec::new();
    for w in bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let mid = crate::engine::interpolate_output(&line, 0.5 * (lo + hi))?;
        let class_index = argmax(mid.data());
        match segments.last_mut() {
            Some(last) if last.class_index == class_index => last.alpha_hi = hi,
            _ => segments.push(ClassSegment { alpha_lo: lo, alpha_hi: hi, class_index }),
        }
    }
    Ok(segments)
}

/// Canonical partition count per unit of input-space length.
pub fn partition_density(net: &Network, query: &LineQuery) -> Result<DensityReport> {
    let line = canonicalize(&exactline_network(net, query)?);
    let length = query.length();
    let partition_count = line.partition_count();
    Ok(DensityReport {
        partition_count,
        length,
        density: partition_count as f64 / length,
        gradient_deviation: None,
    })
}

/// Partition-length-weighted mean of `||g_r - g_0||_1 / ||g_0||_1`, where
/// `g_0` is the gradient at the query start and `g_r` the gradient inside
/// partition `r`.
pub fn gradient_deviation(net: &Network, query: &LineQuery, output_index: usize) -> Result<f64> {
    net.require_relu_affine("gradient deviation")?;
    net.check_output_index(output_index)?;
    let line = exactline_network(net, query)?;
    let mut eval = GradientEvaluator::new(net);
    let base = eval.gradient(query.start().data(), output_index).to_vec();
    let base_norm: f64 = base.iter().map(|g| g.abs()).sum();
    if base_norm == 0.0 {
        return Err(Error::Undefined("gradient at the line start is zero".into()));
    }
    let mut total = 0.0;
    for w in line.endpoints().windows(2) {
        let weight = w[1].alpha - w[0].alpha;
        let g = eval.gradient(&query.point_at(0.5 * (w[0].alpha + w[1].alpha)), output_index);
        let diff: f64 = g.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
        total += weight * diff / base_norm;
    }
    Ok(total)
}

/// Density report with the gradient deviation filled in.
pub fn density_with_deviation(net: &Network, query: &LineQuery, output_index: usize) -> Result<DensityReport> {
    let mut report = partition_density(net, query)?;
    report.gradient_deviation = Some(gradient_deviation(net, query, output_index)?);
    Ok(report)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step of size `epsilon` that decreases output `label`.
pub fn fgsm_direction(net: &Network, x: &Tensor, epsilon: f64, label: usize) -> Result<Tensor> {
    let g = net.gradient(x, label)?;
    let data = x.data().iter().zip(g.data()).map(|(v, gi)| v - epsilon * sign(*gi)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `x + epsilon * s` for a uniformly random sign vector `s` drawn from `seed`.
pub fn random_direction(x: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x
        .data()
        .iter()
        .map(|v| if rng.gen::<bool>() { v + epsilon } else { v - epsilon })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Dense, Layer};

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn loan() -> Network {
        let dense = Dense::from_rows(vec![vec![-1.7, 1.0], vec![2.0, -1.3]], vec![3.0, 3.0]).unwrap();
        Network::new(vec![2], vec![Layer::Dense(dense), Layer::Relu]).unwrap()
    }

    fn loan_query() -> LineQuery {
        LineQuery::new(t(&[20.0, 30.0]), t(&[30.0, 50.0])).unwrap()
    }

    #[test]
    fn affine_two_class_split() {
        // outputs (1 - a, a) along a in [0, 1]
        let d = Dense::from_rows(vec![vec![-1.0], vec![1.0]], vec![1.0, 0.0]).unwrap();
        let net = Network::new(vec![1], vec![Layer::Dense(d)]).unwrap();
        let q = LineQuery::new(t(&[0.0]), t(&[1.0])).unwrap();
        let segs = decision_segments(&net, &q).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].alpha_lo, segs[0].class_index), (0.0, 0));
        assert!((segs[0].alpha_hi - 0.5).abs() < 1e-15);
        assert_eq!((segs[1].alpha_hi, segs[1].class_index), (1.0, 1));
    }

    #[test]
    fn loan_boundary_at_five_ninths() {
        let segs = decision_segments(&loan(), &loan_query()).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].class_index, 1);
        assert_eq!(segs[1].class_index, 0);
        assert!((segs[0].alpha_hi - 5.0 / 9.0).abs() < 1e-12);
        assert_eq!(segs[0].alpha_hi, segs[1].alpha_lo);
    }

    #[test]
    fn constant_network_single_segment() {
        let d = Dense::from_rows(vec![vec![0.0], vec![0.0]], vec![1.0, 2.0]).unwrap();
        let net = Network::new(vec![1], vec![Layer::Dense(d)]).unwrap();
        let q = LineQuery::new(t(&[0.0]), t(&[1.0])).unwrap();
        let segs = decision_segments(&net, &q).unwrap();
        assert_eq!(segs, vec![ClassSegment { alpha_lo: 0.0, alpha_hi: 1.0, class_index: 1 }]);
    }

    #[test]
    fn single_output_rejected() {
        let net = Network::new(vec![1], vec![Layer::Relu]).unwrap();
        let q = LineQuery::new(t(&[0.0]), t(&[1.0])).unwrap();
        assert_eq!(decision_segments(&net, &q).unwrap_err().code(), "dimension-error");
    }

    #[test]
    fn loan_density() {
        let r = partition_density(&loan(), &loan_query()).unwrap();
        assert_eq!(r.partition_count, 3);
        assert!((r.length - 500f64.sqrt()).abs() < 1e-12);
        assert!((r.density - 3.0 / 500f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn affine_density_is_inverse_length() {
        let d = Dense::from_rows(vec![vec![1.0, 2.0]], vec![0.0]).unwrap();
        let net = Network::new(vec![2], vec![Layer::Dense(d)]).unwrap();
        let q = LineQuery::new(t(&[0.0, 0.0]), t(&[3.0, 4.0])).unwrap();
        assert_eq!(partition_density(&net, &q).unwrap().density, 0.2);
        assert_eq!(gradient_deviation(&net, &q, 0).unwrap(), 0.0);
    }

    #[test]
    fn loan_gradient_deviation() {
        let dev = gradient_deviation(&loan(), &loan_query(), 1).unwrap();
        assert!((dev - 1.0 / 3.0).abs() < 1e-12);
        let err = gradient_deviation(&loan(), &loan_query(), 0).unwrap_err();
        assert_eq!(err.code(), "undefined-error");
    }

    #[test]
    fn fgsm_loan_step() {
        let x = fgsm_direction(&loan(), &t(&[20.0, 30.0]), 0.1, 1).unwrap();
        assert_eq!(x.data(), &[19.9, 30.1]);
        let same = fgsm_direction(&loan(), &t(&[20.0, 30.0]), 0.0, 1).unwrap();
        assert_eq!(same.data(), &[20.0, 30.0]);
        // output 0 is inactive at this point: zero gradient leaves x unchanged
        let flat = fgsm_direction(&loan(), &t(&[20.0, 30.0]), 0.1, 0).unwrap();
        assert_eq!(flat.data(), &[20.0, 30.0]);
    }

    #[test]
    fn random_direction_is_seeded_sign_step() {
        let x = t(&[0.5, -1.0, 2.0, 0.0, 3.0]);
        let a = random_direction(&x, 0.1, 7);
        assert_eq!(a, random_direction(&x, 0.1, 7));
        assert_eq!(random_direction(&x, 0.0, 7), x);
        for (v, base) in a.data().iter().zip(x.data()) {
            let d = (v - base).abs();
            assert!((d - 0.1).abs() < 1e-15, "{d}");
        }
    }
}
