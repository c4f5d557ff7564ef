//! Restriction of a general piecewise-linear layer given the hyperplanes that
//! bound its affine regions.

use super::{sort_dedup, RATIO_TOLERANCE};

/// The hyperplane `normal . x = offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Hyperplane {
    fn signed(&self, x: &[f64]) -> f64 {
        self.normal.iter().zip(x).map(|(n, v)| n * v).sum::<f64>() - self.offset
    }
}

/// Ratios in `(0, 1)` at which `start -> end` strictly crosses any hyperplane.
pub fn exactline_pwl_hyperplanes(hyperplanes: &[Hyperplane], start: &[f64], end: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for h in hyperplanes {
        let s = h.signed(start);
        let e = h.signed(end);
        if s.abs() > RATIO_TOLERANCE && e.abs() > RATIO_TOLERANCE && (s < 0.0) != (e < 0.0) {
            out.push(s / (s - e));
        }
    }
    sort_dedup(&mut out);
    out
}

fn axis(dim: usize, i: usize, scale: f64) -> Vec<f64> {
    let mut n = vec![0.0; dim];
    n[i] = scale;
    n
}

/// Faces of the orthants: `x_i = 0` for every coordinate.
pub fn orthant_faces(dim: usize) -> Vec<Hyperplane> {
    (0..dim)
        .map(|i| Hyperplane { normal: axis(dim, i, 1.0), offset: 0.0 })
        .collect()
}

/// Faces of the regions where one window component is the maximum:
/// `x_i - x_j = 0` for every pair in the window.
pub fn max_faces(window: &[usize], dim: usize) -> Vec<Hyperplane> {
    let mut out = Vec::new();
    for (a, &i) in window.iter().enumerate() {
        for &j in &window[a + 1..] {
            let mut normal = axis(dim, i, 1.0);
            normal[j] = -1.0;
            out.push(Hyperplane { normal, offset: 0.0 });
        }
    }
    out
}

/// Faces for ReLU of a window maximum: pairwise faces plus `x_i = 0`.
pub fn relu_max_faces(window: &[usize], dim: usize) -> Vec<Hyperplane> {
    let mut out = max_faces(window, dim);
    out.extend(window.iter().map(|&i| Hyperplane { normal: axis(dim, i, 1.0), offset: 0.0 }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::relu::relu_crossings;

    #[test]
    fn orthant_faces_reproduce_relu() {
        let (q, r) = ([-1.0, 4.0], [2.0, -2.0]);
        let c = exactline_pwl_hyperplanes(&orthant_faces(2), &q, &r);
        assert_eq!(c, relu_crossings(&q, &r));
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-15 && (c[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uncrossed_plane_is_empty() {
        let h = Hyperplane { normal: vec![1.0, 1.0], offset: 10.0 };
        assert!(exactline_pwl_hyperplanes(&[h], &[0.0, 0.0], &[1.0, 2.0]).is_empty());
    }

    #[test]
    fn symmetric_crossing_at_half() {
        assert_eq!(exactline_pwl_hyperplanes(&orthant_faces(1), &[-1.0], &[1.0]), vec![0.5]);
    }

    #[test]
    fn max_faces_count() {
        assert_eq!(max_faces(&[0, 1, 2, 3], 4).len(), 6);
        assert_eq!(relu_max_faces(&[0, 1, 2, 3], 4).len(), 10);
    }
}
