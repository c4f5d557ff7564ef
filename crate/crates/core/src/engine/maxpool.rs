//! MaxPool restriction: follow the window argmax along the segment and record
//! every ratio at which it changes.

use crate::error::{Error, Result};
use crate::network::PoolGeometry;
use crate::tensor::Tensor;

use super::{sort_dedup, RATIO_TOLERANCE};

/// Index of the maximum of `start`, preferring the larger slope and then the
/// lower index among ties.
fn initial_argmax(start: &[f64], end: &[f64]) -> usize {
    let mut m = 0;
    for i in 1..start.len() {
        let better = start[i] > start[m]
            || (start[i] == start[m] && end[i] - start[i] > end[m] - start[m]);
        if better {
            m = i;
        }
    }
    m
}

fn lowest_argmax(values: &[f64]) -> usize {
    let mut m = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[m] {
            m = i;
        }
    }
    m
}

/// Follows the window maximum from ratio 0 and calls `visit(ratio, new_argmax)`
/// each time another component overtakes it. Returns the initial argmax.
fn follow_argmax(start: &[f64], end: &[f64], mut visit: impl FnMut(f64, usize)) -> usize {
    let first = initial_argmax(start, end);
    let target = lowest_argmax(end);
    let mut m = first;
    let mut alpha = 0.0;
    while m != target {
        let slope_m = end[m] - start[m];
        let mut best: Option<(f64, usize)> = None;
        for i in 0..start.len() {
            let slope_i = end[i] - start[i];
            // Only a steeper component can overtake the current maximum.
            if i == m || slope_i <= slope_m {
                continue;
            }
            let denom = slope_m - slope_i;
            if denom.abs() <= RATIO_TOLERANCE {
                continue;
            }
            let a = (start[i] - start[m]) / denom;
            if !(a > alpha && a < 1.0) {
                continue;
            }
            best = match best {
                None => Some((a, i)),
                Some((b, j)) => {
                    let tie = (a - b).abs() <= RATIO_TOLERANCE;
                    if a < b && !tie || tie && slope_i > end[j] - start[j] {
                        Some((a, i))
                    } else {
                        Some((b, j))
                    }
                }
            };
        }
        let Some((a, i)) = best else { break };
        alpha = a;
        m = i;
        visit(a, i);
    }
    first
}

/// Ratios in `(0, 1)` at which the argmax of one pooling window changes.
pub fn maxpool_window_crossings(start: &[f64], end: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    follow_argmax(start, end, |a, _| out.push(a));
    sort_dedup(&mut out);
    out
}

/// Which affine piece of `relu(max(window))` is active at ratio `t`.
fn relu_max_piece(start: &[f64], end: &[f64], t: f64) -> Option<usize> {
    let mut m = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, (&s, &e)) in start.iter().zip(end).enumerate() {
        let v = s + t * (e - s);
        if v > best {
            best = v;
            m = i;
        }
    }
    (best > 0.0).then_some(m)
}

/// Ratios in `(0, 1)` at which `relu(max(window))` changes affine piece.
///
/// Argmax changes are suppressed while the maximum is non-positive; ratios at
/// which the maximum passes through zero are added.
pub fn relu_maxpool_window_crossings(start: &[f64], end: &[f64]) -> Vec<f64> {
    let mut kinks = Vec::new();
    let first = follow_argmax(start, end, |a, i| kinks.push((a, i)));

    let mut candidates = Vec::with_capacity(2 * kinks.len() + 1);
    let mut piece_start = 0.0;
    let mut m = first;
    for k in 0..=kinks.len() {
        let piece_end = kinks.get(k).map_or(1.0, |&(a, _)| a);
        let slope = end[m] - start[m];
        if slope.abs() > RATIO_TOLERANCE {
            let z = -start[m] / slope;
            if z >= piece_start && z <= piece_end {
                candidates.push(z);
            }
        }
        if let Some(&(a, i)) = kinks.get(k) {
            candidates.push(a);
            piece_start = a;
            m = i;
        }
    }
    sort_dedup(&mut candidates);

    let mut out = Vec::with_capacity(candidates.len());
    for (k, &c) in candidates.iter().enumerate() {
        let lo = if k == 0 { 0.0 } else { candidates[k - 1] };
        let hi = candidates.get(k + 1).copied().unwrap_or(1.0);
        if relu_max_piece(start, end, 0.5 * (lo + c)) != relu_max_piece(start, end, 0.5 * (c + hi)) {
            out.push(c);
        }
    }
    out
}

/// Crossings of every window in `windows`, unioned, sorted and de-duplicated.
pub(crate) fn pooled_crossings_into(
    start: &[f64],
    end: &[f64],
    windows: &[Vec<usize>],
    fused: bool,
    out: &mut Vec<f64>,
) {
    out.clear();
    let mut ws = Vec::new();
    let mut we = Vec::new();
    for idx in windows {
        ws.clear();
        we.clear();
        ws.extend(idx.iter().map(|&i| start[i]));
        we.extend(idx.iter().map(|&i| end[i]));
        if fused {
            out.extend(relu_maxpool_window_crossings(&ws, &we));
        } else {
            out.extend(maxpool_window_crossings(&ws, &we));
        }
    }
    sort_dedup(out);
}

fn check_pool_inputs(start: &Tensor, end: &Tensor, geometry: &PoolGeometry) -> Result<()> {
    let expected = [geometry.channels, geometry.height, geometry.width];
    for t in [start, end] {
        if t.shape() != expected {
            return Err(Error::shape(None, format!("{expected:?}"), format!("{:?}", t.shape())));
        }
    }
    Ok(())
}

/// Argmax-change ratios of a MaxPool layer along `start -> end`.
pub fn exactline_maxpool(start: &Tensor, end: &Tensor, geometry: &PoolGeometry) -> Result<Vec<f64>> {
    check_pool_inputs(start, end, geometry)?;
    let mut out = Vec::new();
    pooled_crossings_into(start.data(), end.data(), &geometry.windows(), false, &mut out);
    Ok(out)
}

/// Breakpoint ratios of ReLU composed with MaxPool along `start -> end`.
pub fn exactline_relu_maxpool(
    start: &Tensor,
    end: &Tensor,
    geometry: &PoolGeometry,
) -> Result<Vec<f64>> {
    check_pool_inputs(start, end, geometry)?;
    let mut out = Vec::new();
    pooled_crossings_into(start.data(), end.data(), &geometry.windows(), true, &mut out);
    Ok(out)
}
