//! Integrated gradients: exact values from the line partition, uniform Riemann
//! approximations, and searches for the sample count an approximation needs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::{exactline_network, LineQuery, PartitionedLine, RATIO_TOLERANCE};
use crate::error::{Error, Result};
use crate::network::{GradientEvaluator, Network};
use crate::tensor::Tensor;

/// Relative slack applied when comparing an error against a tolerance, so that
/// values equal to the tolerance in exact arithmetic are accepted.
const TOLERANCE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Left,
    Right,
    Trapezoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Left,
    Right,
    Trapezoid,
}

impl From<Scheme> for Method {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Left => Method::Left,
            Scheme::Right => Method::Right,
            Scheme::Trapezoid => Method::Trapezoid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletenessGap {
    /// `|sum(values) - (F(x) - F(x'))|`
    pub absolute: f64,
    /// `absolute / |F(x) - F(x')|`, absent when the output difference is zero.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub method: Method,
    pub samples: Option<usize>,
    pub values: Vec<f64>,
    pub completeness_gap: CompletenessGap,
    pub partitions_used: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSearchResult {
    pub m: Option<usize>,
    pub tolerance: f64,
    pub stability_window: usize,
    pub cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub tolerance: f64,
    /// Additional sample counts that must also meet the tolerance.
    pub stability: usize,
    pub cap: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams { tolerance: 0.05, stability: 5, cap: 1000 }
    }
}

fn within(err: f64, tolerance: f64) -> bool {
    err <= tolerance * (1.0 + TOLERANCE_SLACK)
}

fn output_difference(net: &Network, query: &LineQuery, output_index: usize) -> f64 {
    let fx = net.forward_slice(query.end().data())[output_index];
    let fb = net.forward_slice(query.start().data())[output_index];
    fx - fb
}

fn completeness(values: &[f64], delta: f64) -> CompletenessGap {
    let absolute = (values.iter().sum::<f64>() - delta).abs();
    CompletenessGap {
        absolute,
        relative: (delta != 0.0).then(|| absolute / delta.abs()),
    }
}

fn setup(net: &Network, baseline: &Tensor, input: &Tensor, output_index: usize) -> Result<LineQuery> {
    net.check_input(baseline)?;
    net.check_input(input)?;
    net.check_output_index(output_index)?;
    LineQuery::new(baseline.clone(), input.clone())
}

/// Partition of `query` with the gradient at each partition midpoint.
fn partition_gradients(
    net: &Network,
    query: &LineQuery,
    output_index: usize,
) -> Result<(PartitionedLine, Vec<Vec<f64>>)> {
    let line = exactline_network(net, query)?;
    let mut eval = GradientEvaluator::new(net);
    let grads = line
        .endpoints()
        .windows(2)
        .map(|w| {
            let mid = query.point_at(0.5 * (w[0].alpha + w[1].alpha));
            eval.gradient(&mid, output_index).to_vec()
        })
        .collect();
    Ok((line, grads))
}

/// Exact integrated gradients of output `output_index` from `baseline` to `input`.
///
/// Only ReLU/affine networks are accepted: their gradient is constant inside
/// every partition, so one midpoint gradient per partition integrates exactly.
pub fn exact_ig(
    net: &Network,
    baseline: &Tensor,
    input: &Tensor,
    output_index: usize,
) -> Result<AttributionReport> {
    net.require_relu_affine("exact integrated gradients")?;
    let query = setup(net, baseline, input, output_index)?;
    let (line, grads) = partition_gradients(net, &query, output_index)?;
    let mut values = vec![0.0; net.input_len()];
    let mut lo = query.point_at(0.0);
    for (w, g) in line.endpoints().windows(2).zip(&grads) {
        let hi = query.point_at(w[1].alpha);
        for (((v, a), b), gi) in values.iter_mut().zip(&lo).zip(&hi).zip(g) {
            *v += (b - a) * gi;
        }
        lo = hi;
    }
    let delta = output_difference(net, &query, output_index);
    Ok(AttributionReport {
        method: Method::Exact,
        samples: None,
        completeness_gap: completeness(&values, delta),
        values,
        partitions_used: Some(line.partition_count()),
    })
}

trait GradientSource {
    fn gradient_at(&mut self, alpha: f64) -> &[f64];
}

/// Backward pass at every requested point.
struct Direct<'a> {
    eval: GradientEvaluator<'a>,
    query: &'a LineQuery,
    output_index: usize,
}

impl GradientSource for Direct<'_> {
    fn gradient_at(&mut self, alpha: f64) -> &[f64] {
        let x = self.query.point_at(alpha);
        self.eval.gradient(&x, self.output_index)
    }
}

/// Looks up the constant gradient of the partition containing the point;
/// points on a partition boundary fall back to a direct evaluation.
struct Piecewise<'a> {
    alphas: Vec<f64>,
    grads: Vec<Vec<f64>>,
    boundary: HashMap<u64, Vec<f64>>,
    direct: Direct<'a>,
}

impl GradientSource for Piecewise<'_> {
    fn gradient_at(&mut self, alpha: f64) -> &[f64] {
        let hi = self.alphas.partition_point(|&a| a < alpha).min(self.alphas.len() - 1);
        let near = |i: usize| (self.alphas[i] - alpha).abs() <= RATIO_TOLERANCE;
        if near(hi) || (hi > 0 && near(hi - 1)) {
            let direct = &mut self.direct;
            return self
                .boundary
                .entry(alpha.to_bits())
                .or_insert_with(|| direct.gradient_at(alpha).to_vec());
        }
        &self.grads[hi.max(1) - 1]
    }
}

/// Weighted gradient sum for `m` uniform samples, divided by `m`.
fn riemann_average(src: &mut dyn GradientSource, dim: usize, m: usize, scheme: Scheme) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let (first, last) = match scheme {
        Scheme::Left => (0, m - 1),
        Scheme::Right => (1, m),
        Scheme::Trapezoid => (0, m),
    };
    for k in first..=last {
        let w = if scheme == Scheme::Trapezoid && (k == 0 || k == m) { 0.5 } else { 1.0 };
        let g = src.gradient_at(k as f64 / m as f64);
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += w * gi;
        }
    }
    acc.iter_mut().for_each(|a| *a /= m as f64);
    acc
}

fn scale_by_displacement(avg: Vec<f64>, query: &LineQuery) -> Vec<f64> {
    avg.into_iter()
        .zip(query.start().data().iter().zip(query.end().data()))
        .map(|(g, (b, x))| (x - b) * g)
        .collect()
}

/// Riemann-sum approximation of integrated gradients with `m` uniform samples.
pub fn riemann_ig(
    net: &Network,
    baseline: &Tensor,
    input: &Tensor,
    output_index: usize,
    m: usize,
    scheme: Scheme,
) -> Result<AttributionReport> {
    if m == 0 {
        return Err(Error::Count);
    }
    let query = setup(net, baseline, input, output_index)?;
    let mut src = Direct { eval: GradientEvaluator::new(net), query: &query, output_index };
    let values = scale_by_displacement(riemann_average(&mut src, net.input_len(), m, scheme), &query);
    let delta = output_difference(net, &query, output_index);
    Ok(AttributionReport {
        method: scheme.into(),
        samples: Some(m),
        completeness_gap: completeness(&values, delta),
        values,
        partitions_used: None,
    })
}

fn l1_relative(approx: &[f64], exact: &[f64]) -> Result<f64> {
    if approx.len() != exact.len() {
        return Err(Error::Dimension(format!(
            "attribution lengths differ: {} vs {}",
            approx.len(),
            exact.len()
        )));
    }
    let norm: f64 = exact.iter().map(|v| v.abs()).sum();
    if norm == 0.0 {
        return Err(Error::Undefined("exact attributions are all zero".into()));
    }
    let diff: f64 = approx.iter().zip(exact).map(|(a, e)| (a - e).abs()).sum();
    Ok(diff / norm)
}

/// `||approx - exact||_1 / ||exact||_1`.
pub fn relative_error(approx: &AttributionReport, exact: &AttributionReport) -> Result<f64> {
    l1_relative(&approx.values, &exact.values)
}

fn gradient_source<'a>(
    net: &'a Network,
    query: &'a LineQuery,
    output_index: usize,
) -> Result<Box<dyn GradientSource + 'a>> {
    let direct = Direct { eval: GradientEvaluator::new(net), query, output_index };
    if net.first_non_relu_affine().is_some() {
        return Ok(Box::new(direct));
    }
    let (line, grads) = partition_gradients(net, query, output_index)?;
    Ok(Box::new(Piecewise {
        alphas: line.alphas(),
        grads,
        boundary: HashMap::new(),
        direct,
    }))
}

/// Smallest left-sum sample count whose attributions sum to within
/// `tolerance * |F(x) - F(x')|` of `F(x) - F(x')`. Ignores `params.stability`.
pub fn find_m_tilde(
    net: &Network,
    baseline: &Tensor,
    input: &Tensor,
    output_index: usize,
    params: SearchParams,
) -> Result<SampleSearchResult> {
    let query = setup(net, baseline, input, output_index)?;
    let delta = output_difference(net, &query, output_index);
    if delta == 0.0 {
        return Err(Error::Degenerate("F(x) equals F(x') for the selected output".into()));
    }
    let mut src = gradient_source(net, &query, output_index)?;
    let dim = net.input_len();
    let m = (1..=params.cap).find(|&m| {
        let values = scale_by_displacement(riemann_average(src.as_mut(), dim, m, Scheme::Left), &query);
        within((values.iter().sum::<f64>() - delta).abs(), params.tolerance * delta.abs())
    });
    Ok(SampleSearchResult {
        m,
        tolerance: params.tolerance,
        stability_window: 0,
        cap: params.cap,
    })
}

/// Smallest `m <= cap` such that the `scheme` approximation is within
/// `tolerance` relative error of the exact attributions for every sample count
/// in `m ..= m + stability`.
pub fn samples_to_tolerance(
    net: &Network,
    baseline: &Tensor,
    input: &Tensor,
    output_index: usize,
    scheme: Scheme,
    params: SearchParams,
) -> Result<SampleSearchResult> {
    let exact = exact_ig(net, baseline, input, output_index)?;
    let query = setup(net, baseline, input, output_index)?;
    let mut src = gradient_source(net, &query, output_index)?;
    let dim = net.input_len();
    let mut run = 0;
    let mut found = None;
    for m in 1..=params.cap + params.stability {
        let values = scale_by_displacement(riemann_average(src.as_mut(), dim, m, scheme), &query);
        if within(l1_relative(&values, &exact.values)?, params.tolerance) {
            run += 1;
        } else {
            run = 0;
        }
        if run > params.stability {
            found = Some(m - params.stability);
            break;
        }
    }
    Ok(SampleSearchResult {
        m: found,
        tolerance: params.tolerance,
        stability_window: params.stability,
        cap: params.cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Dense, Layer};

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn relu_1d() -> Network {
        Network::new(vec![1], vec![Layer::Relu]).unwrap()
    }

    fn affine() -> Network {
        let d = Dense::from_rows(vec![vec![1.5, -2.0, 0.5]], vec![0.25]).unwrap();
        Network::new(vec![3], vec![Layer::Dense(d)]).unwrap()
    }

    /// Closed-form Riemann sums of relu on [-1, 1] as exact rationals (num, den):
    /// the gradient at sample k of m is 1 exactly when 2k > m.
    fn relu_sum(m: i64, scheme: Scheme) -> (i64, i64) {
        let active = |k: i64| (2 * k > m) as i64;
        match scheme {
            Scheme::Left => ((0..m).map(active).sum::<i64>() * 2, m),
            Scheme::Right => ((1..=m).map(active).sum::<i64>() * 2, m),
            Scheme::Trapezoid => {
                let interior: i64 = (1..m).map(active).sum();
                (2 * interior + active(0) + active(m), m)
            }
        }
    }

    /// Exact-arithmetic oracle for the sample searches on the 1-D example
    /// (exact IG = 1, tolerance 1/20).
    fn oracle_search(scheme: Scheme, stability: i64) -> i64 {
        let ok = |m: i64| {
            let (num, den) = relu_sum(m, scheme);
            20 * (num - den).abs() <= den
        };
        (1..=1000).find(|&m| (m..=m + stability).all(ok)).unwrap()
    }

    #[test]
    fn relu_exact_ig_is_one() {
        let r = exact_ig(&relu_1d(), &t(&[-1.0]), &t(&[1.0]), 0).unwrap();
        assert_eq!(r.values, vec![1.0]);
        assert_eq!(r.partitions_used, Some(2));
        assert_eq!(r.completeness_gap.absolute, 0.0);
    }

    #[test]
    fn affine_exact_ig_is_displacement_times_weights() {
        let (b, x) = (t(&[1.0, 2.0, 3.0]), t(&[-1.0, 0.5, 4.0]));
        let r = exact_ig(&affine(), &b, &x, 0).unwrap();
        assert_eq!(r.partitions_used, Some(1));
        assert_eq!(r.values, vec![-2.0 * 1.5, -1.5 * -2.0, 1.0 * 0.5]);
    }

    #[test]
    fn exact_ig_errors() {
        let net = relu_1d();
        assert_eq!(exact_ig(&net, &t(&[1.0]), &t(&[1.0]), 0).unwrap_err().code(), "query-error");
        assert_eq!(exact_ig(&net, &t(&[0.0]), &t(&[1.0]), 3).unwrap_err().code(), "index-error");
        let pool = Network::new(vec![1, 2, 2], vec![Layer::MaxPool { window: (2, 2), stride: (2, 2) }]).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(exact_ig(&pool, &b, &x, 0).unwrap_err().code(), "unsupported-layer");
    }

    #[test]
    fn riemann_hand_values() {
        let net = relu_1d();
        let (b, x) = (t(&[-1.0]), t(&[1.0]));
        assert_eq!(riemann_ig(&net, &b, &x, 0, 2, Scheme::Left).unwrap().values, vec![0.0]);
        assert_eq!(riemann_ig(&net, &b, &x, 0, 2, Scheme::Right).unwrap().values, vec![1.0]);
        assert_eq!(riemann_ig(&net, &b, &x, 0, 2, Scheme::Trapezoid).unwrap().values, vec![0.5]);
        assert_eq!(riemann_ig(&net, &b, &x, 0, 0, Scheme::Left).unwrap_err().code(), "count-error");
    }

    #[test]
    fn riemann_matches_closed_form() {
        let net = relu_1d();
        let (b, x) = (t(&[-1.0]), t(&[1.0]));
        for scheme in [Scheme::Left, Scheme::Right, Scheme::Trapezoid] {
            for m in 1..60 {
                let (num, den) = relu_sum(m, scheme);
                let got = riemann_ig(&net, &b, &x, 0, m as usize, scheme).unwrap().values[0];
                assert!((got - num as f64 / den as f64).abs() < 1e-14, "{scheme:?} m={m}");
            }
        }
    }

    #[test]
    fn relative_error_cases() {
        let exact = exact_ig(&affine(), &t(&[0.0; 3]), &t(&[1.0, 1.0, 1.0]), 0).unwrap();
        assert_eq!(relative_error(&exact, &exact).unwrap(), 0.0);
        let mut doubled = exact.clone();
        doubled.values.iter_mut().for_each(|v| *v *= 2.0);
        assert_eq!(relative_error(&doubled, &exact).unwrap(), 1.0);
        let mut zero = exact.clone();
        zero.values = vec![0.0; 3];
        assert_eq!(relative_error(&exact, &zero).unwrap_err().code(), "undefined-error");
        zero.values = vec![0.0; 2];
        assert_eq!(relative_error(&exact, &zero).unwrap_err().code(), "dimension-error");
    }

    #[test]
    fn m_tilde_affine_is_one() {
        let r = find_m_tilde(&affine(), &t(&[0.0; 3]), &t(&[1.0, 2.0, 3.0]), 0, SearchParams::default()).unwrap();
        assert_eq!(r.m, Some(1));
    }

    #[test]
    fn m_tilde_relu_matches_oracle() {
        let r = find_m_tilde(&relu_1d(), &t(&[-1.0]), &t(&[1.0]), 0, SearchParams::default()).unwrap();
        let expected = oracle_search(Scheme::Left, 0);
        assert_eq!(expected, 21);
        assert_eq!(r.m, Some(expected as usize));
    }

    #[test]
    fn m_tilde_narrow_bump_exceeds_cap() {
        // Gradient is 1 only on (1e-4, 9e-4); no left sample k/m with m <= 1000 lands there.
        let h = Dense::from_rows(vec![vec![1.0], vec![1.0]], vec![-1e-4, -9e-4]).unwrap();
        let o = Dense::from_rows(vec![vec![1.0, -1.0]], vec![0.0]).unwrap();
        let net = Network::new(vec![1], vec![Layer::Dense(h), Layer::Relu, Layer::Dense(o)]).unwrap();
        let r = find_m_tilde(&net, &t(&[0.0]), &t(&[1.0]), 0, SearchParams::default()).unwrap();
        assert_eq!(r.m, None);
    }

    #[test]
    fn m_tilde_degenerate() {
        let err = find_m_tilde(&relu_1d(), &t(&[-2.0]), &t(&[-1.0]), 0, SearchParams::default()).unwrap_err();
        assert_eq!(err.code(), "degenerate-error");
    }

    #[test]
    fn samples_to_tolerance_relu_matches_oracle() {
        let (b, x) = (t(&[-1.0]), t(&[1.0]));
        for scheme in [Scheme::Left, Scheme::Right, Scheme::Trapezoid] {
            let r = samples_to_tolerance(&relu_1d(), &b, &x, 0, scheme, SearchParams::default()).unwrap();
            assert_eq!(r.m, Some(oracle_search(scheme, 5) as usize), "{scheme:?}");
        }
        assert_eq!(oracle_search(Scheme::Left, 5), 39);
        assert_eq!(oracle_search(Scheme::Trapezoid, 5), 19);
    }

    #[test]
    fn samples_to_tolerance_affine_is_one() {
        for scheme in [Scheme::Left, Scheme::Right, Scheme::Trapezoid] {
            let r = samples_to_tolerance(&affine(), &t(&[0.0; 3]), &t(&[1.0, 2.0, 3.0]), 0, scheme, SearchParams::default())
                .unwrap();
            assert_eq!(r.m, Some(1));
        }
    }
}
