use crate::error::{Error, Result};
use crate::tensor::{lerp, Tensor};

use super::{sort_dedup, RATIO_TOLERANCE};

/// Ratios in `(0, 1)` at which the segment `start -> end` crosses an orthant
/// boundary, sorted and de-duplicated.
pub fn relu_crossings(start: &[f64], end: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    relu_crossings_into(start, end, &mut out);
    out
}

pub(crate) fn relu_crossings_into(start: &[f64], end: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for (&s, &e) in start.iter().zip(end) {
        // Opposite strict signs is equivalent to -s / (e - s) lying in (0, 1).
        if (s < 0.0 && e > 0.0) || (s > 0.0 && e < 0.0) {
            let delta = e - s;
            if delta.abs() > RATIO_TOLERANCE {
                out.push(-s / delta);
            }
        }
    }
    sort_dedup(out);
}

/// Single-layer ReLU restriction between two pre-activation images.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluRestriction {
    /// Interior crossing ratios.
    pub crossings: Vec<f64>,
    /// ReLU images at ratio 0, each crossing, and ratio 1.
    pub images: Vec<Tensor>,
}

pub fn exactline_relu(start: &Tensor, end: &Tensor) -> Result<ReluRestriction> {
    if start.shape() != end.shape() {
        return Err(Error::shape(
            None,
            format!("{:?}", start.shape()),
            format!("{:?}", end.shape()),
        ));
    }
    let crossings = relu_crossings(start.data(), end.data());
    let relu = |v: Vec<f64>| {
        Tensor::from_parts(start.shape().to_vec(), v.into_iter().map(|x| x.max(0.0)).collect())
    };
    let mut images = vec![relu(start.data().to_vec())];
    images.extend(crossings.iter().map(|&t| relu(lerp(start.data(), end.data(), t))));
    images.push(relu(end.data().to_vec()));
    Ok(ReluRestriction { crossings, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loan_preactivations_cross_at_thirds() {
        let c = relu_crossings(&[-1.0, 4.0], &[2.0, -2.0]);
        assert_eq!(c.len(), 2);
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((c[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_orthant_has_no_crossings() {
        assert!(relu_crossings(&[1.0, 2.0], &[3.0, 4.0]).is_empty());
    }

    #[test]
    fn boundary_and_constant_components_ignored() {
        assert!(relu_crossings(&[0.0, 1.0], &[1.0, 1.0]).is_empty());
        assert!(relu_crossings(&[-1.0, 0.0], &[0.0, 0.0]).is_empty());
    }

    #[test]
    fn duplicate_ratios_merge() {
        let c = relu_crossings(&[-1.0, -2.0, -1.0], &[1.0, 2.0, 3.0]);
        assert_eq!(c, vec![0.25, 0.5]);
    }

    #[test]
    fn images_include_both_ends() {
        let q = Tensor::vector(vec![-1.0, 4.0]).unwrap();
        let r = Tensor::vector(vec![2.0, -2.0]).unwrap();
        let res = exactline_relu(&q, &r).unwrap();
        assert_eq!(res.images.len(), 4);
        assert_eq!(res.images[0].data(), &[0.0, 4.0]);
        assert_eq!(res.images[3].data(), &[2.0, 0.0]);
        let mid = res.images[1].data();
        assert!(mid[0].abs() < 1e-15 && (mid[1] - 2.0).abs() < 1e-12);
    }
}
