//! Exact linear restriction of a network to a line segment.
//!
//! A [`PartitionedLine`] stores endpoints by their ratio `alpha` along the
//! original query `Q -> R` together with their image under the layers applied
//! so far. Layers are applied as a streaming pipeline: each piecewise-linear
//! stage looks at one pair of consecutive endpoints at a time, inserts the
//! ratios at which that pair crosses an activation boundary, and passes the
//! points on. Only the final images are kept, so memory stays proportional to
//! the endpoint count times the output width.

mod hyperplane;
mod maxpool;
mod relu;

pub use hyperplane::{exactline_pwl_hyperplanes, max_faces, orthant_faces, relu_max_faces, Hyperplane};
pub use maxpool::{
    exactline_maxpool, exactline_relu_maxpool, maxpool_window_crossings, relu_maxpool_window_crossings,
};
pub use relu::{exactline_relu, relu_crossings, ReluRestriction};

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network, PoolGeometry};
use crate::tensor::{lerp_into, Tensor};

/// Minimum separation between distinct ratios; also the guard below which a
/// component difference is treated as constant.
pub const RATIO_TOLERANCE: f64 = 1e-12;

/// Relative tolerance used when deciding that an endpoint is redundant.
pub const COLLINEAR_TOLERANCE: f64 = 1e-9;

/// Sorts ratios, drops those within tolerance of 0 or 1, and merges near-duplicates.
pub(crate) fn sort_dedup(ratios: &mut Vec<f64>) {
    ratios.sort_by(f64::total_cmp);
    let mut last = 0.0;
    ratios.retain(|&r| {
        if r - last > RATIO_TOLERANCE && r < 1.0 - RATIO_TOLERANCE {
            last = r;
            true
        } else {
            false
        }
    });
}

/// The segment from `start` (ratio 0) to `end` (ratio 1) in input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineQuery {
    start: Tensor,
    end: Tensor,
}

impl LineQuery {
    pub fn new(start: Tensor, end: Tensor) -> Result<Self> {
        if start.shape() != end.shape() {
            return Err(Error::Query(format!(
                "endpoint shapes differ: {:?} vs {:?}",
                start.shape(),
                end.shape()
            )));
        }
        if start.data() == end.data() {
            return Err(Error::Query("start and end points coincide".into()));
        }
        Ok(LineQuery { start, end })
    }

    pub fn start(&self) -> &Tensor {
        &self.start
    }

    pub fn end(&self) -> &Tensor {
        &self.end
    }

    /// `start + alpha * (end - start)`; exact at `alpha` 0 and 1.
    pub fn point_at(&self, alpha: f64) -> Vec<f64> {
        if alpha == 1.0 {
            return self.end.data().to_vec();
        }
        self.start
            .data()
            .iter()
            .zip(self.end.data())
            .map(|(&q, &r)| q + alpha * (r - q))
            .collect()
    }

    /// Euclidean length of `end - start`.
    pub fn length(&self) -> f64 {
        self.start
            .data()
            .iter()
            .zip(self.end.data())
            .map(|(q, r)| (r - q) * (r - q))
            .sum::<f64>()
            .sqrt()
    }

    pub fn reversed(&self) -> LineQuery {
        LineQuery {
            start: self.end.clone(),
            end: self.start.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub alpha: f64,
    pub postimage: Tensor,
    /// Layer that introduced the endpoint; `None` for the query endpoints.
    pub origin_layer: Option<usize>,
}

/// Sorted endpoints such that the function is affine between each consecutive pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedLine {
    query: LineQuery,
    endpoints: Vec<Endpoint>,
}

impl PartitionedLine {
    /// Builds a partition from parts, checking the ordering invariants.
    pub fn new(query: LineQuery, endpoints: Vec<Endpoint>) -> Result<Self> {
        let p = PartitionedLine { query, endpoints };
        p.check_invariants()?;
        Ok(p)
    }

    pub fn query(&self) -> &LineQuery {
        &self.query
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.endpoints.iter().map(|e| e.alpha).collect()
    }

    /// Number of affine pieces (endpoints minus one).
    pub fn partition_count(&self) -> usize {
        self.endpoints.len() - 1
    }

    /// Input-space position of endpoint `i`.
    pub fn preimage(&self, i: usize) -> Tensor {
        Tensor::from_parts(
            self.query.start.shape().to_vec(),
            self.query.point_at(self.endpoints[i].alpha),
        )
    }

    pub fn check_invariants(&self) -> Result<()> {
        let eps = &self.endpoints;
        if eps.len() < 2 {
            return Err(Error::Query("a partition needs at least two endpoints".into()));
        }
        if eps[0].alpha != 0.0 || eps[eps.len() - 1].alpha != 1.0 {
            return Err(Error::Query("endpoints must start at ratio 0 and end at ratio 1".into()));
        }
        for w in eps.windows(2) {
            if w[1].alpha - w[0].alpha < RATIO_TOLERANCE || w[1].alpha.is_nan() {
                return Err(Error::Query(format!(
                    "ratios {} and {} are not strictly increasing",
                    w[0].alpha, w[1].alpha
                )));
            }
            if w[0].postimage.shape() != w[1].postimage.shape() {
                return Err(Error::Query("postimage shapes differ".into()));
            }
        }
        Ok(())
    }
}

/// Engine switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    /// Treat ReLU next to MaxPool as one step, skipping argmax changes below zero.
    pub fuse_relu_maxpool: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { fuse_relu_maxpool: true }
    }
}

/// Restriction of an affine-only network: the two query endpoints.
pub fn exactline_affine(net: &Network, query: &LineQuery) -> Result<PartitionedLine> {
    if let Some((layer, l)) = net.layers().iter().enumerate().find(|(_, l)| !l.is_affine()) {
        return Err(Error::UnsupportedLayer {
            layer,
            kind: l.kind(),
            operation: "exactline_affine",
        });
    }
    exactline_network(net, query)
}

pub fn exactline_network(net: &Network, query: &LineQuery) -> Result<PartitionedLine> {
    exactline_prefix(net, query, net.layers().len(), EngineOptions::default())
}

pub fn exactline_network_with(
    net: &Network,
    query: &LineQuery,
    options: EngineOptions,
) -> Result<PartitionedLine> {
    exactline_prefix(net, query, net.layers().len(), options)
}

/// Restriction of the first `layers` layers of `net`.
pub fn exactline_prefix(
    net: &Network,
    query: &LineQuery,
    layers: usize,
    options: EngineOptions,
) -> Result<PartitionedLine> {
    net.check_input(&query.start)?;
    assert!(layers <= net.layers().len(), "prefix longer than network");

    let source = Source {
        points: vec![
            Point { alpha: 0.0, values: query.start.data().to_vec(), origin: None },
            Point { alpha: 1.0, values: query.end.data().to_vec(), origin: None },
        ]
        .into_iter(),
    };
    let mut stage: Box<dyn Stage + '_> = Box::new(source);
    for step in plan(net, layers, options) {
        stage = match step {
            Step::Affine(range) => Box::new(AffineStage { up: stage, net, range }),
            Step::Split(range, kernel) => Box::new(SplitStage::new(stage, net, range, kernel)),
        };
    }

    let shape = net.shape_at(layers).to_vec();
    let mut endpoints = Vec::new();
    while let Some(p) = stage.pull() {
        endpoints.push(Endpoint {
            alpha: p.alpha,
            postimage: Tensor::from_parts(shape.clone(), p.values),
            origin_layer: p.origin,
        });
    }
    Ok(PartitionedLine { query: query.clone(), endpoints })
}

enum Kernel {
    Relu,
    MaxPool { windows: Vec<Vec<usize>>, fused: bool },
}

enum Step {
    Affine(Range<usize>),
    Split(Range<usize>, Kernel),
}

fn plan(net: &Network, layers: usize, options: EngineOptions) -> Vec<Step> {
    let all = &net.layers()[..layers];
    let pool_windows = |i: usize| {
        PoolGeometry::for_layer(&all[i], net.shape_at(i))
            .expect("validated maxpool")
            .windows()
    };
    let mut steps = Vec::new();
    let mut i = 0;
    while i < all.len() {
        if all[i].is_affine() {
            let start = i;
            while i < all.len() && all[i].is_affine() {
                i += 1;
            }
            steps.push(Step::Affine(start..i));
            continue;
        }
        let next = all.get(i + 1);
        match (&all[i], next) {
            (Layer::Relu, Some(Layer::MaxPool { .. })) if options.fuse_relu_maxpool => {
                steps.push(Step::Split(i..i + 2, Kernel::MaxPool { windows: pool_windows(i + 1), fused: true }));
                i += 2;
            }
            (Layer::MaxPool { .. }, Some(Layer::Relu)) if options.fuse_relu_maxpool => {
                steps.push(Step::Split(i..i + 2, Kernel::MaxPool { windows: pool_windows(i), fused: true }));
                i += 2;
            }
            (Layer::MaxPool { .. }, _) => {
                steps.push(Step::Split(i..i + 1, Kernel::MaxPool { windows: pool_windows(i), fused: false }));
                i += 1;
            }
            (Layer::Relu, _) => {
                steps.push(Step::Split(i..i + 1, Kernel::Relu));
                i += 1;
            }
            _ => unreachable!("non-affine layers are relu or maxpool"),
        }
    }
    steps
}

struct Point {
    alpha: f64,
    values: Vec<f64>,
    origin: Option<usize>,
}

trait Stage {
    fn pull(&mut self) -> Option<Point>;
}

struct Source {
    points: std::vec::IntoIter<Point>,
}

impl Stage for Source {
    fn pull(&mut self) -> Option<Point> {
        self.points.next()
    }
}

struct AffineStage<'a> {
    up: Box<dyn Stage + 'a>,
    net: &'a Network,
    range: Range<usize>,
}

impl Stage for AffineStage<'_> {
    fn pull(&mut self) -> Option<Point> {
        let mut p = self.up.pull()?;
        p.values = self.net.forward_range(&p.values, self.range.start, self.range.end);
        Some(p)
    }
}

/// Inserts crossing points between consecutive incoming points, then applies
/// the piecewise-linear layer(s) to every point.
struct SplitStage<'a> {
    up: Box<dyn Stage + 'a>,
    net: &'a Network,
    range: Range<usize>,
    kernel: Kernel,
    started: bool,
    /// Pre-activation point already emitted; left end of the current pair.
    left: Option<Point>,
    /// Right end of the current pair, emitted after `pending` drains.
    right: Option<Point>,
    /// `(alpha, local ratio)` of crossings inside the current pair.
    pending: VecDeque<(f64, f64)>,
    ratios: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> SplitStage<'a> {
    fn new(up: Box<dyn Stage + 'a>, net: &'a Network, range: Range<usize>, kernel: Kernel) -> Self {
        SplitStage {
            up,
            net,
            range,
            kernel,
            started: false,
            left: None,
            right: None,
            pending: VecDeque::new(),
            ratios: Vec::new(),
            scratch: Vec::new(),
        }
    }

    fn transform(&self, values: &[f64]) -> Vec<f64> {
        self.net.forward_range(values, self.range.start, self.range.end)
    }

    fn queue_crossings(&mut self, left: &Point, right: &Point) {
        match &self.kernel {
            Kernel::Relu => relu::relu_crossings_into(&left.values, &right.values, &mut self.ratios),
            Kernel::MaxPool { windows, fused } => {
                maxpool::pooled_crossings_into(&left.values, &right.values, windows, *fused, &mut self.ratios)
            }
        }
        let (lo, hi) = (left.alpha, right.alpha);
        let mut last = lo;
        for &beta in &self.ratios {
            let alpha = lo + beta * (hi - lo);
            if alpha - last >= RATIO_TOLERANCE && hi - alpha >= RATIO_TOLERANCE {
                self.pending.push_back((alpha, beta));
                last = alpha;
            }
        }
    }
}

impl Stage for SplitStage<'_> {
    fn pull(&mut self) -> Option<Point> {
        if !self.started {
            self.started = true;
            let p = self.up.pull()?;
            let out = Point { alpha: p.alpha, values: self.transform(&p.values), origin: p.origin };
            self.left = Some(p);
            return Some(out);
        }
        loop {
            if let Some((alpha, beta)) = self.pending.pop_front() {
                let left = self.left.as_ref().unwrap();
                let right = self.right.as_ref().unwrap();
                let mut buf = std::mem::take(&mut self.scratch);
                lerp_into(&left.values, &right.values, beta, &mut buf);
                let values = self.transform(&buf);
                self.scratch = buf;
                return Some(Point { alpha, values, origin: Some(self.range.start) });
            }
            if let Some(right) = self.right.take() {
                let out = Point {
                    alpha: right.alpha,
                    values: self.transform(&right.values),
                    origin: right.origin,
                };
                self.left = Some(right);
                return Some(out);
            }
            let next = self.up.pull()?;
            let left = self.left.take().unwrap();
            self.queue_crossings(&left, &next);
            self.left = Some(left);
            self.right = Some(next);
        }
    }
}

fn collinear(a: &Endpoint, b: &Endpoint, c: &Endpoint) -> bool {
    let t = (b.alpha - a.alpha) / (c.alpha - a.alpha);
    let (pa, pb, pc) = (a.postimage.data(), b.postimage.data(), c.postimage.data());
    let mut scale = 0.0f64;
    let mut dev = 0.0f64;
    for ((&x, &y), &z) in pa.iter().zip(pb).zip(pc) {
        scale = scale.max(x.abs()).max(y.abs()).max(z.abs());
        dev = dev.max((y - (x + t * (z - x))).abs());
    }
    dev <= COLLINEAR_TOLERANCE * (1.0 + scale)
}

/// Removes interior endpoints whose image is collinear with their neighbours,
/// until none remain.
pub fn canonicalize(p: &PartitionedLine) -> PartitionedLine {
    let mut endpoints = p.endpoints.clone();
    loop {
        let n = endpoints.len();
        let mut kept: Vec<Endpoint> = Vec::with_capacity(n);
        let mut removed = false;
        for i in 0..n {
            if i > 0 && i + 1 < n && collinear(kept.last().unwrap(), &endpoints[i], &endpoints[i + 1]) {
                removed = true;
                continue;
            }
            kept.push(endpoints[i].clone());
        }
        endpoints = kept;
        if !removed {
            break;
        }
    }
    PartitionedLine { query: p.query.clone(), endpoints }
}

/// Image at ratio `alpha`, interpolated within the bracketing partition.
pub fn interpolate_output(p: &PartitionedLine, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(alpha));
    }
    let eps = &p.endpoints;
    let hi = eps.partition_point(|e| e.alpha < alpha);
    if eps[hi].alpha == alpha {
        return Ok(eps[hi].postimage.clone());
    }
    let (a, b) = (&eps[hi - 1], &eps[hi]);
    let t = (alpha - a.alpha) / (b.alpha - a.alpha);
    let mut out = Vec::new();
    lerp_into(a.postimage.data(), b.postimage.data(), t, &mut out);
    Ok(Tensor::from_parts(a.postimage.shape().to_vec(), out))
}
