//! Projected gradient ascent over an l-infinity input ball, plus the four
//! concrete attack objectives: confidence-gap maximisation (the empirical
//! lower bound on the worst-case teacher/student discrepancy), prediction
//! disagreement, robust-accuracy, and the inner attack of the FD loss.
//!
//! Attacks are pure given (networks, region, config, seed). Per-restart RNG
//! streams are derived from the seed and restart index, so results do not
//! depend on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::network::{FeedForwardNetwork, TeacherStudentPair};
use crate::tensor::Tensor;

/// An l-infinity ball around `center`, intersected with per-coordinate
/// domain bounds (default `[0, 1]` for image data).
#[derive(Debug, Clone)]
pub struct InputRegion {
    center: Tensor,
    epsilon: f64,
    domain_lo: Vec<f64>,
    domain_hi: Vec<f64>,
}

impl InputRegion {
    pub fn new(center: Tensor, epsilon: f64, domain_lo: Vec<f64>, domain_hi: Vec<f64>) -> Result<Self> {
        if epsilon < 0.0 || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be nonnegative, got {epsilon}")));
        }
        if domain_lo.len() != center.len() || domain_hi.len() != center.len() {
            return Err(Error::ShapeMismatch {
                op: "InputRegion::new",
                detail: "domain bounds must match the center dimension".into(),
            });
        }
        for i in 0..center.len() {
            if !(domain_lo[i] <= center.get(i) && center.get(i) <= domain_hi[i]) {
                return Err(Error::Validation(format!(
                    "center coordinate {i} = {} outside domain [{}, {}]",
                    center.get(i),
                    domain_lo[i],
                    domain_hi[i]
                )));
            }
        }
        Ok(Self { center, epsilon, domain_lo, domain_hi })
    }

    /// Ball clipped to the unit box, for image-like data.
    pub fn unit_box(center: Tensor, epsilon: f64) -> Result<Self> {
        let n = center.len();
        Self::new(center, epsilon, vec![0.0; n], vec![1.0; n])
    }

    /// Ball with no domain clipping, for synthetic data.
    pub fn unbounded(center: Tensor, epsilon: f64) -> Result<Self> {
        let n = center.len();
        Self::new(center, epsilon, vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    pub fn center(&self) -> &Tensor {
        &self.center
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Same ball around a different center.
    pub fn recentred(&self, center: Tensor) -> Result<Self> {
        Self::new(center, self.epsilon, self.domain_lo.clone(), self.domain_hi.clone())
    }

    /// Same center with a different radius.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.center.clone(), epsilon, self.domain_lo.clone(), self.domain_hi.clone())
    }

    /// Coordinate-wise `max(x0 - eps, lo)`.
    pub fn effective_lo(&self) -> Vec<f64> {
        self.center
            .data()
            .iter()
            .zip(&self.domain_lo)
            .map(|(&c, &lo)| (c - self.epsilon).max(lo))
            .collect()
    }

    /// Coordinate-wise `min(x0 + eps, hi)`.
    pub fn effective_hi(&self) -> Vec<f64> {
        self.center
            .data()
            .iter()
            .zip(&self.domain_hi)
            .map(|(&c, &hi)| (c + self.epsilon).min(hi))
            .collect()
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        let lo = self.effective_lo();
        let hi = self.effective_hi();
        x.iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(lo[i], hi[i]))
            .collect()
    }

    pub fn contains(&self, x: &Tensor, tol: f64) -> bool {
        let lo = self.effective_lo();
        let hi = self.effective_hi();
        x.data()
            .iter()
            .enumerate()
            .all(|(i, &v)| v >= lo[i] - tol && v <= hi[i] + tol)
    }

    fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let lo = self.effective_lo();
        let hi = self.effective_hi();
        lo.iter()
            .zip(&hi)
            .map(|(&l, &h)| if h > l { rng.gen_range(l..=h) } else { l })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed: u64,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn new(steps: usize, step_size: f64, restarts: usize, seed: u64, random_start: bool) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidParameter("attack needs at least 1 step".into()));
        }
        if restarts < 1 {
            return Err(Error::InvalidParameter("attack needs at least 1 restart".into()));
        }
        if step_size <= 0.0 {
            return Err(Error::InvalidParameter("step size must be positive".into()));
        }
        Ok(Self { steps, step_size, restarts, seed, random_start })
    }

    /// The 50-step schedule with step size `2.5 eps / 50`.
    pub fn fifty_step(epsilon: f64, seed: u64) -> Self {
        let step = if epsilon > 0.0 { 2.5 * epsilon / 50.0 } else { 1e-3 };
        Self { steps: 50, step_size: step, restarts: 1, seed, random_start: true }
    }

    /// Derives an independent config for a per-example attack.
    pub fn for_example(&self, example_index: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = mix(self.seed, example_index);
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub witness: Tensor,
    pub objective_value: f64,
    pub restart_index: usize,
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 step over seed + stream
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maximises a differentiable objective by sign-gradient ascent with
/// projection to the effective box. The best value over every visited
/// iterate of every restart is returned, and the center is always a
/// candidate, so the result never falls below `objective(x0)`.
pub fn pgd_maximize<F>(mut objective: F, region: &InputRegion, cfg: &AttackConfig) -> Result<AttackResult>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let x0 = Tensor::vector(region.clamp(region.center().data()))
        .map_err(|e| Error::Attack(format!("invalid center: {e}")))?;
    let (v0, _) = objective(&x0)?;
    if !v0.is_finite() {
        return Err(Error::Attack(format!("objective non-finite at the center: {v0}")));
    }
    let mut best = AttackResult { witness: x0.clone(), objective_value: v0, restart_index: 0 };
    let mut any_restart_ok = false;

    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, restart as u64));
        let start = if restart == 0 && !cfg.random_start {
            x0.data().to_vec()
        } else {
            region.sample_uniform(&mut rng)
        };
        match ascend(&mut objective, region, cfg, start, restart, &mut best) {
            Ok(()) => any_restart_ok = true,
            Err(_) => continue, // non-finite restart aborted; others continue
        }
    }

    if !any_restart_ok && cfg.restarts > 0 {
        // All ascents aborted; the center evaluation still stands as a valid
        // (if weak) result only when it was finite, which we checked above.
        return Err(Error::Attack("every PGD restart produced non-finite gradients".into()));
    }
    Ok(best)
}

fn ascend<F>(
    objective: &mut F,
    region: &InputRegion,
    cfg: &AttackConfig,
    start: Vec<f64>,
    restart: usize,
    best: &mut AttackResult,
) -> Result<()>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let mut x = region.clamp(&start);
    for _ in 0..cfg.steps {
        let xt = Tensor::from_raw(vec![x.len()], x.clone());
        let (value, grad) = objective(&xt)?;
        if !value.is_finite() || grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::Attack("non-finite objective or gradient".into()));
        }
        if value > best.objective_value {
            *best = AttackResult { witness: xt.clone(), objective_value: value, restart_index: restart };
        }
        for (xi, g) in x.iter_mut().zip(grad.data()) {
            *xi += cfg.step_size * g.signum();
        }
        x = region.clamp(&x);
    }
    // Final iterate.
    let xt = Tensor::from_raw(vec![x.len()], x);
    let (value, _) = objective(&xt)?;
    if !value.is_finite() {
        return Err(Error::Attack("non-finite objective at final iterate".into()));
    }
    if value > best.objective_value {
        *best = AttackResult { witness: xt, objective_value: value, restart_index: restart };
    }
    Ok(())
}

/// Confidence gap `max_c |f_t^c(x) - f_s^c(x)|` at T=1, with its subgradient
/// taken through the currently maximal coordinate.
fn confidence_gap_objective(pair: &TeacherStudentPair, x: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let tv = pair.teacher.constants_on(&mut tape);
    let sv = pair.student.constants_on(&mut tape);
    let zt = pair.teacher.forward_on(&mut tape, &tv, xv)?;
    let zs = pair.student.forward_on(&mut tape, &sv, xv)?;
    let ft = tape.softmax_t(zt, 1.0)?;
    let fs = tape.softmax_t(zs, 1.0)?;

    let diff: Vec<f64> = tape
        .value(ft)
        .data()
        .iter()
        .zip(tape.value(fs).data())
        .map(|(t, s)| t - s)
        .collect();
    let (mut c, mut mag) = (0usize, 0.0f64);
    for (i, d) in diff.iter().enumerate() {
        if d.abs() > mag {
            mag = d.abs();
            c = i;
        }
    }
    let sign = if diff[c] >= 0.0 { 1.0 } else { -1.0 };

    let ftc = tape.index(ft, c)?;
    let fsc = tape.index(fs, c)?;
    let gap = tape.sub(ftc, fsc)?;
    let signed = tape.scale(gap, sign);
    let grads = tape.gradients(signed, &[xv])?;
    Ok((mag, grads[&xv].clone()))
}

/// PGD ascent on the confidence gap: an empirical lower bound on the true
/// maximum discrepancy over the region.
pub fn emp_lb(pair: &TeacherStudentPair, region: &InputRegion, cfg: &AttackConfig) -> Result<AttackResult> {
    pgd_maximize(|x| confidence_gap_objective(pair, x), region, cfg)
}

/// Inner attack of the FD loss: maximises `KL(f_s(x; T), f_t(x; T))` with
/// both networks perturbed by the same input.
pub fn fd_inner_attack(
    pair: &TeacherStudentPair,
    region: &InputRegion,
    cfg: &AttackConfig,
    inner_temperature: f64,
) -> Result<AttackResult> {
    if inner_temperature <= 0.0 {
        return Err(Error::InvalidParameter("inner attack temperature must be positive".into()));
    }
    pgd_maximize(
        |x| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let tv = pair.teacher.constants_on(&mut tape);
            let sv = pair.student.constants_on(&mut tape);
            let zt = pair.teacher.forward_on(&mut tape, &tv, xv)?;
            let zs = pair.student.forward_on(&mut tape, &sv, xv)?;
            let ft = tape.softmax_t(zt, inner_temperature)?;
            let fs = tape.softmax_t(zs, inner_temperature)?;
            let kl = tape.kl_divergence(fs, ft)?;
            let value = tape.value(kl).get(0);
            let grads = tape.gradients(kl, &[xv])?;
            Ok((value, grads[&xv].clone()))
        },
        region,
        cfg,
    )
}

pub(crate) fn ce_input_gradient(net: &FeedForwardNetwork, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let nv = net.constants_on(&mut tape);
    let z = net.forward_on(&mut tape, &nv, xv)?;
    let loss = tape.cross_entropy(z, label)?;
    let value = tape.value(loss).get(0);
    let grads = tape.gradients(loss, &[xv])?;
    Ok((value, grads[&xv].clone()))
}

/// Searches for a point where the teacher and student predictions differ, by
/// ascending the student's cross entropy against the teacher's hard label,
/// re-derived at every iterate. Stops at the first disagreement found.
///
/// `init` optionally seeds the first iterate (used by the runner to nest
/// witnesses across a growing epsilon grid).
pub fn disagreement_attack(
    pair: &TeacherStudentPair,
    region: &InputRegion,
    cfg: &AttackConfig,
    init: Option<&Tensor>,
) -> Result<(bool, Tensor)> {
    let check = |x: &Tensor| -> Result<bool> {
        Ok(pair.teacher.predict(x)? != pair.student.predict(x)?)
    };

    let x0 = Tensor::vector(region.clamp(region.center().data()))?;
    if check(&x0)? {
        return Ok((true, x0));
    }
    if let Some(start) = init {
        let clamped = Tensor::from_raw(vec![start.len()], region.clamp(start.data()));
        if check(&clamped)? {
            return Ok((true, clamped));
        }
    }

    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, restart as u64));
        let start = if restart == 0 {
            match init {
                Some(s) => region.clamp(s.data()),
                None if cfg.random_start => region.sample_uniform(&mut rng),
                None => x0.data().to_vec(),
            }
        } else {
            region.sample_uniform(&mut rng)
        };
        let mut x = region.clamp(&start);
        for _ in 0..=cfg.steps {
            let xt = Tensor::from_raw(vec![x.len()], x.clone());
            if check(&xt)? {
                return Ok((true, xt));
            }
            let teacher_label = pair.teacher.predict(&xt)?;
            let (_, grad) = ce_input_gradient(&pair.student, &xt, teacher_label)?;
            if grad.data().iter().any(|g| !g.is_finite()) {
                break;
            }
            for (xi, g) in x.iter_mut().zip(grad.data()) {
                *xi += cfg.step_size * g.signum();
            }
            x = region.clamp(&x);
        }
    }
    Ok((false, x0))
}

/// PGD attack on a single network's classification of `region.center()`
/// against label `y`. Returns whether any visited iterate is misclassified.
pub fn robust_accuracy_attack(
    net: &FeedForwardNetwork,
    y: usize,
    region: &InputRegion,
    cfg: &AttackConfig,
) -> Result<(bool, Tensor)> {
    if y >= net.class_count() {
        return Err(Error::IndexOutOfRange { index: y, len: net.class_count() });
    }
    let x0 = Tensor::vector(region.clamp(region.center().data()))?;
    if net.predict(&x0)? != y {
        return Ok((true, x0));
    }

    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, restart as u64));
        let start = if restart == 0 && !cfg.random_start {
            x0.data().to_vec()
        } else {
            region.sample_uniform(&mut rng)
        };
        let mut x = region.clamp(&start);
        for _ in 0..=cfg.steps {
            let xt = Tensor::from_raw(vec![x.len()], x.clone());
            if net.predict(&xt)? != y {
                return Ok((true, xt));
            }
            let (_, grad) = ce_input_gradient(net, &xt, y)?;
            if grad.data().iter().any(|g| !g.is_finite()) {
                break;
            }
            for (xi, g) in x.iter_mut().zip(grad.data()) {
                *xi += cfg.step_size * g.signum();
            }
            x = region.clamp(&x);
        }
    }
    Ok((false, x0))
}
