//! Verified over-approximation of the worst-case confidence discrepancy:
//! interval propagation, backward linear (CROWN-style) bound propagation
//! with the triangle ReLU relaxation, pairwise logit-difference bounds,
//! analytic softmax bounding, the FaithUB combination, and an exhaustive
//! grid oracle for low-dimensional validation.
//!
//! Backward bounds are intersected with the interval bound of the same
//! objective, so they are sound and never looser than interval propagation.

use serde::{Deserialize, Serialize};

use crate::attacks::InputRegion;
use crate::error::{Error, Result};
use crate::network::{FeedForwardNetwork, TeacherStudentPair};
use crate::tensor::Tensor;

/// How intermediate pre-activation bounds are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    /// Interval arithmetic through every layer (fast, default).
    #[default]
    Interval,
    /// A full backward pass per intermediate neuron (tighter, slower).
    Backward,
}

/// Per-neuron lower/upper bounds for one pre-activation layer.
#[derive(Debug, Clone)]
pub struct LayerBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl LayerBounds {
    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lo[i] - slack && v <= self.hi[i] + slack)
    }
}

/// Linear enclosure of ReLU on an interval:
/// `alpha_l (z + beta_l) <= relu(z) <= alpha_u (z + beta_u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluRelaxation {
    pub alpha_l: f64,
    pub beta_l: f64,
    pub alpha_u: f64,
    pub beta_u: f64,
}

/// Triangle relaxation parameters for a pre-activation interval `[lo, hi]`.
///
/// Stable-active neurons get the identity, stable-inactive the zero map.
/// Unstable neurons get the chord `hi/(hi-lo) (z - lo)` above and the line
/// `alpha z` with `alpha in {0, 1}` below, choosing `alpha = 1` when
/// `hi >= |lo|`.
pub fn relu_relaxation(lo: f64, hi: f64) -> Result<ReluRelaxation> {
    if lo > hi {
        return Err(Error::Validation(format!("relu relaxation needs lo <= hi, got [{lo}, {hi}]")));
    }
    if lo >= 0.0 {
        Ok(ReluRelaxation { alpha_l: 1.0, beta_l: 0.0, alpha_u: 1.0, beta_u: 0.0 })
    } else if hi <= 0.0 {
        Ok(ReluRelaxation { alpha_l: 0.0, beta_l: 0.0, alpha_u: 0.0, beta_u: 0.0 })
    } else {
        let alpha_u = hi / (hi - lo);
        let alpha_l = if hi >= -lo { 1.0 } else { 0.0 };
        Ok(ReluRelaxation { alpha_l, beta_l: 0.0, alpha_u, beta_u: -lo })
    }
}

/// Interval bound propagation. Entry 0 is the effective input box; entry k
/// bounds the pre-activation of layer k.
pub fn interval_propagate(net: &FeedForwardNetwork, region: &InputRegion) -> Result<Vec<LayerBounds>> {
    if region.dim() != net.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "interval_propagate",
            detail: format!("region dim {} vs network input dim {}", region.dim(), net.input_dim()),
        });
    }
    let mut bounds = vec![LayerBounds { lo: region.effective_lo(), hi: region.effective_hi() }];
    let mut act_lo = bounds[0].lo.clone();
    let mut act_hi = bounds[0].hi.clone();
    for (k, layer) in net.layers().iter().enumerate() {
        let (m, n) = (layer.weight.rows(), layer.weight.cols());
        let wd = layer.weight.data();
        let mut lo = vec![0.0; m];
        let mut hi = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut l = layer.bias.get(i);
            let mut h = l;
            for j in 0..n {
                let w = row[j];
                if w >= 0.0 {
                    l += w * act_lo[j];
                    h += w * act_hi[j];
                } else {
                    l += w * act_hi[j];
                    h += w * act_lo[j];
                }
            }
            lo[i] = l;
            hi[i] = h;
        }
        bounds.push(LayerBounds { lo: lo.clone(), hi: hi.clone() });
        if k + 1 < net.depth() {
            act_lo = lo.into_iter().map(|v| v.max(0.0)).collect();
            act_hi = hi.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    Ok(bounds)
}

/// One backward pass: bound `coeff . z^(layer)` over the region, where
/// `pre[k]` bounds the pre-activation of layer k. `upper` picks the side.
fn backward_bound(
    net: &FeedForwardNetwork,
    region: &InputRegion,
    layer: usize,
    coeff: &[f64],
    pre: &[LayerBounds],
    upper: bool,
) -> f64 {
    let mut a = coeff.to_vec();
    let mut offset = 0.0;
    // Walk from `layer` down to 1, turning a linear function of z^(k) into a
    // linear function of z^(k-1) via the ReLU relaxation.
    for k in (1..=layer).rev() {
        let l = &net.layers()[k - 1];
        let (m, n) = (l.weight.rows(), l.weight.cols());
        let wd = l.weight.data();
        for i in 0..m {
            offset += a[i] * l.bias.get(i);
        }
        let mut a_prev = vec![0.0; n];
        for i in 0..m {
            let ai = a[i];
            if ai != 0.0 {
                let row = &wd[i * n..(i + 1) * n];
                for j in 0..n {
                    a_prev[j] += ai * row[j];
                }
            }
        }
        if k == 1 {
            a = a_prev;
            break;
        }
        // Relax the ReLU between z^(k-1) and its activation.
        let lb = &pre[k - 1];
        for j in 0..a_prev.len() {
            let r = relu_relaxation(lb.lo[j], lb.hi[j]).expect("lo <= hi");
            let aj = a_prev[j];
            let take_upper_line = (aj >= 0.0) == upper;
            if take_upper_line {
                offset += aj * r.alpha_u * r.beta_u;
                a_prev[j] = aj * r.alpha_u;
            } else {
                offset += aj * r.alpha_l * r.beta_l;
                a_prev[j] = aj * r.alpha_l;
            }
        }
        a = a_prev;
    }
    // Concretize over the input box.
    let lo = region.effective_lo();
    let hi = region.effective_hi();
    let mut value = offset;
    for j in 0..a.len() {
        let aj = a[j];
        if (aj >= 0.0) == upper {
            value += aj * hi[j];
        } else {
            value += aj * lo[j];
        }
    }
    value
}

/// Intermediate pre-activation bounds via the selected method.
pub fn preactivation_bounds(
    net: &FeedForwardNetwork,
    region: &InputRegion,
    method: BoundMethod,
) -> Result<Vec<LayerBounds>> {
    let interval = interval_propagate(net, region)?;
    match method {
        BoundMethod::Interval => Ok(interval),
        BoundMethod::Backward => {
            let mut pre = vec![interval[0].clone(), interval[1].clone()];
            for k in 2..=net.depth() {
                let width = net.layers()[k - 1].weight.rows();
                let mut lo = Vec::with_capacity(width);
                let mut hi = Vec::with_capacity(width);
                for i in 0..width {
                    let mut coeff = vec![0.0; width];
                    coeff[i] = 1.0;
                    let l = backward_bound(net, region, k, &coeff, &pre, false)
                        .max(interval[k].lo[i]);
                    let h = backward_bound(net, region, k, &coeff, &pre, true)
                        .min(interval[k].hi[i]);
                    lo.push(l);
                    hi.push(h);
                }
                pre.push(LayerBounds { lo, hi });
            }
            Ok(pre)
        }
    }
}

/// Bounds a linear functional `coeff . logits` over the region by backward
/// substitution, intersected with the interval bound of the same objective.
pub fn crown_logit_bounds(
    net: &FeedForwardNetwork,
    region: &InputRegion,
    coeff: &Tensor,
) -> Result<(f64, f64)> {
    let pre = preactivation_bounds(net, region, BoundMethod::Interval)?;
    crown_logit_bounds_with(net, region, coeff, &pre)
}

/// As [`crown_logit_bounds`], reusing precomputed pre-activation bounds.
pub fn crown_logit_bounds_with(
    net: &FeedForwardNetwork,
    region: &InputRegion,
    coeff: &Tensor,
    pre: &[LayerBounds],
) -> Result<(f64, f64)> {
    if coeff.len() != net.class_count() {
        return Err(Error::ShapeMismatch {
            op: "crown_logit_bounds",
            detail: format!("coefficient has {} entries for {} classes", coeff.len(), net.class_count()),
        });
    }
    let depth = net.depth();
    let lo = backward_bound(net, region, depth, coeff.data(), pre, false);
    let hi = backward_bound(net, region, depth, coeff.data(), pre, true);

    // Interval bound of the same objective from the logit box.
    let logits = &pre[depth];
    let mut ilo = 0.0;
    let mut ihi = 0.0;
    for (i, &c) in coeff.data().iter().enumerate() {
        if c >= 0.0 {
            ilo += c * logits.lo[i];
            ihi += c * logits.hi[i];
        } else {
            ilo += c * logits.hi[i];
            ihi += c * logits.lo[i];
        }
    }
    Ok((lo.max(ilo), hi.min(ihi)))
}

/// Bounds on every pairwise logit difference `z_j - z_i` over the region.
#[derive(Debug, Clone)]
pub struct LogitDiffBounds {
    pub d_lo: Vec<Vec<f64>>,
    pub d_hi: Vec<Vec<f64>>,
}

impl LogitDiffBounds {
    pub fn class_count(&self) -> usize {
        self.d_lo.len()
    }
}

/// Joint bounds on `z_j - z_i` via one backward pass per unordered pair,
/// which is tighter than subtracting independent logit intervals.
pub fn logit_diff_bounds(
    net: &FeedForwardNetwork,
    region: &InputRegion,
    method: BoundMethod,
) -> Result<LogitDiffBounds> {
    let pre = preactivation_bounds(net, region, method)?;
    let c = net.class_count();
    let mut d_lo = vec![vec![0.0; c]; c];
    let mut d_hi = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in (i + 1)..c {
            let mut coeff = vec![0.0; c];
            coeff[j] = 1.0;
            coeff[i] = -1.0;
            let (lo, hi) =
                crown_logit_bounds_with(net, region, &Tensor::from_raw(vec![c], coeff), &pre)?;
            d_lo[i][j] = lo;
            d_hi[i][j] = hi;
            d_lo[j][i] = -hi;
            d_hi[j][i] = -lo;
        }
    }
    Ok(LogitDiffBounds { d_lo, d_hi })
}

/// Per-class softmax output bounds.
#[derive(Debug, Clone)]
pub struct SoftmaxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SoftmaxBounds {
    pub fn contains(&self, probs: &[f64], slack: f64) -> bool {
        probs
            .iter()
            .enumerate()
            .all(|(i, &p)| p >= self.lo[i] - slack && p <= self.hi[i] + slack)
    }
}

// exp saturates to +inf from here; treat the resulting sigma bound as 0.
const EXP_SATURATION: f64 = 709.0;

/// Propagates logit-difference bounds through the softmax:
/// `sigma_i^lb = 1 / (1 + sum_{j != i} exp(d_hi[i][j]))` and the mirrored
/// expression with `d_lo` for the upper bound.
pub fn softmax_bounds(d: &LogitDiffBounds) -> SoftmaxBounds {
    let c = d.class_count();
    let bound = |row: &[f64], i: usize| -> f64 {
        if row.iter().enumerate().any(|(j, &v)| j != i && v >= EXP_SATURATION) {
            return 0.0;
        }
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v.exp())
            .sum();
        1.0 / (1.0 + sum)
    };
    let mut lo = Vec::with_capacity(c);
    let mut hi = Vec::with_capacity(c);
    for i in 0..c {
        lo.push(bound(&d.d_hi[i], i));
        hi.push(bound(&d.d_lo[i], i));
    }
    SoftmaxBounds { lo, hi }
}

/// Certified upper bound on the maximum confidence discrepancy between the
/// pair over the region: both networks are bounded over the same box and the
/// result is the larger of the two one-sided sup-norm bounds.
pub fn faith_ub(pair: &TeacherStudentPair, region: &InputRegion) -> Result<f64> {
    faith_ub_with(pair, region, BoundMethod::Interval)
}

pub fn faith_ub_with(
    pair: &TeacherStudentPair,
    region: &InputRegion,
    method: BoundMethod,
) -> Result<f64> {
    let st = softmax_bounds(&logit_diff_bounds(&pair.teacher, region, method)?);
    let ss = softmax_bounds(&logit_diff_bounds(&pair.student, region, method)?);
    let mut delta: f64 = 0.0;
    for c in 0..pair.class_count() {
        delta = delta.max(st.hi[c] - ss.lo[c]).max(ss.hi[c] - st.lo[c]);
    }
    Ok(delta.clamp(0.0, 1.0))
}

/// Exhaustive grid estimate of the maximum confidence gap, for inputs of
/// dimension at most 2. The requested resolution is rounded up to the next
/// `2^m + 1` grid so that finer grids nest within coarser ones, making the
/// coarse scan monotone nondecreasing in `resolution`. The scan is followed
/// by a deterministic local zoom around the best cell, which resolves the
/// attained local maximum to near machine precision; the result stays a
/// lower bound on the true maximum.
pub fn oracle_delta_grid(
    pair: &TeacherStudentPair,
    region: &InputRegion,
    resolution: usize,
) -> Result<f64> {
    if region.dim() > 2 {
        return Err(Error::UnsupportedDimension { dim: region.dim(), max: 2 });
    }
    if resolution < 2 {
        return Err(Error::InvalidParameter("grid resolution must be at least 2".into()));
    }
    let points = (resolution - 1).next_power_of_two() + 1;
    let lo = region.effective_lo();
    let hi = region.effective_hi();
    let axis = |d: usize| -> Vec<f64> {
        if hi[d] <= lo[d] {
            vec![lo[d]]
        } else {
            (0..points)
                .map(|i| lo[d] + (hi[d] - lo[d]) * i as f64 / (points - 1) as f64)
                .collect()
        }
    };

    let gap = |x: &Tensor| -> Result<f64> {
        let ft = pair.teacher.confidences(x, 1.0)?;
        let fs = pair.student.confidences(x, 1.0)?;
        Ok(ft.linf_distance(&fs))
    };

    let dim = region.dim();
    let mut best: f64 = 0.0;
    let mut best_point = lo.clone();
    let consider = |point: Vec<f64>, best: &mut f64, best_point: &mut Vec<f64>| -> Result<()> {
        let v = gap(&Tensor::from_raw(vec![dim], point.clone()))?;
        if v > *best {
            *best = v;
            *best_point = point;
        }
        Ok(())
    };
    match dim {
        1 => {
            for &x in &axis(0) {
                consider(vec![x], &mut best, &mut best_point)?;
            }
        }
        _ => {
            let xs = axis(0);
            let ys = axis(1);
            for &x in &xs {
                for &y in &ys {
                    consider(vec![x, y], &mut best, &mut best_point)?;
                }
            }
        }
    }

    // Zoom: rescan a shrinking window (one coarse cell wide) around the best
    // point until the window is negligible. Every probe stays inside the
    // effective box, so the estimate remains a lower bound.
    let mut half: Vec<f64> = (0..dim)
        .map(|d| {
            if hi[d] <= lo[d] {
                0.0
            } else {
                (hi[d] - lo[d]) / (points - 1) as f64
            }
        })
        .collect();
    const ZOOM_POINTS: usize = 9;
    while half.iter().any(|&h| h > 1e-10) {
        let local_axis = |d: usize| -> Vec<f64> {
            if half[d] == 0.0 {
                return vec![best_point[d]];
            }
            let a = (best_point[d] - half[d]).max(lo[d]);
            let b = (best_point[d] + half[d]).min(hi[d]);
            (0..ZOOM_POINTS)
                .map(|i| a + (b - a) * i as f64 / (ZOOM_POINTS - 1) as f64)
                .collect()
        };
        match dim {
            1 => {
                for &x in &local_axis(0) {
                    consider(vec![x], &mut best, &mut best_point)?;
                }
            }
            _ => {
                let xs = local_axis(0);
                let ys = local_axis(1);
                for &x in &xs {
                    for &y in &ys {
                        consider(vec![x, y], &mut best, &mut best_point)?;
                    }
                }
            }
        }
        for h in &mut half {
            *h *= 0.5;
        }
    }
    Ok(best)
}

/// Per-example faithfulness measurements gathered by the experiment runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaithfulnessRecord {
    pub example_id: usize,
    pub epsilon: f64,
    pub emp_lb: f64,
    pub faith_ub: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_delta: Option<f64>,
}

impl FaithfulnessRecord {
    /// Lower bound must not exceed the certified upper bound, and the grid
    /// oracle (when present) must sit between them.
    pub fn validate(&self) -> Result<()> {
        if self.emp_lb > self.faith_ub + 1e-9 {
            return Err(Error::Validation(format!(
                "example {}: emp_lb {} exceeds faith_ub {}",
                self.example_id, self.emp_lb, self.faith_ub
            )));
        }
        if let Some(oracle) = self.oracle_delta {
            if self.emp_lb - 1e-6 > oracle || oracle > self.faith_ub + 1e-9 {
                return Err(Error::Validation(format!(
                    "example {}: oracle {} outside [{} - 1e-6, {} + 1e-9]",
                    self.example_id, oracle, self.emp_lb, self.faith_ub
                )));
            }
        }
        Ok(())
    }
}
