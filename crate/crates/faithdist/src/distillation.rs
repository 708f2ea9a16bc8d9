//! Distillation losses (SD, ARD, RSLAD, FD), PGD adversarial teacher
//! training, and the SGD-with-momentum training loop with cosine-annealed
//! learning rates and early stopping on clean test accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{ce_input_gradient, fd_inner_attack, pgd_maximize, AttackConfig, InputRegion};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ArchPreset, FeedForwardNetwork, TeacherStudentPair};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Standard distillation on clean inputs.
    Sd,
    /// Adversarially robust distillation: perturbed student vs clean teacher.
    Ard,
    /// RSLAD: ARD with the hard-label term replaced by a clean soft-label KL.
    Rslad,
    /// Faithful distillation: teacher and student perturbed by the same input.
    Fd,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Method::Sd => "sd",
            Method::Ard => "ard",
            Method::Rslad => "rslad",
            Method::Fd => "fd",
        };
        f.write_str(name)
    }
}

/// SGD schedule shared by teacher training and distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Cosine annealing from `lr_start` to `lr_end`; constant `lr_start`
    /// otherwise.
    pub cosine_schedule: bool,
    /// Global-norm clip applied to each batch's mean gradient; `None`
    /// disables clipping. Large adversarial gradients early in training can
    /// otherwise drive every first-layer unit permanently inactive.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Ramp the training perturbation radius linearly from `epsilon / n` to
    /// `epsilon` over the first `n` epochs. Attacking at the full radius
    /// from a random initialisation can collapse the network to uniform
    /// outputs before it learns any signal; zero disables the ramp.
    #[serde(default)]
    pub epsilon_warmup: usize,
}

impl TrainingRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidParameter("momentum must lie in [0,1) and weight decay be nonnegative".into()));
        }
        if self.early_stop_patience > self.epochs {
            return Err(Error::InvalidParameter("patience cannot exceed the epoch budget".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) || !clip.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "gradient clip must be finite and positive, got {clip}"
                )));
            }
        }
        Ok(())
    }

    /// Training perturbation radius at the given epoch under the warmup
    /// ramp.
    pub fn epsilon_at(&self, epoch: usize, epsilon: f64) -> f64 {
        if self.epsilon_warmup == 0 || epoch + 1 >= self.epsilon_warmup {
            epsilon
        } else {
            epsilon * (epoch + 1) as f64 / self.epsilon_warmup as f64
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.cosine_schedule || self.epochs <= 1 {
            return self.lr_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Configuration of one distillation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub method: Method,
    pub temperature: f64,
    pub alpha: f64,
    /// Inner-attack schedule for ARD/RSLAD/FD; ignored by SD.
    pub inner_attack: AttackConfig,
    /// Perturbation radius of the inner attack; ignored by SD.
    pub epsilon: f64,
    /// Temperature of the FD inner maximisation (the outer loss keeps
    /// `temperature`).
    pub fd_inner_temperature: f64,
    pub optimizer: TrainingRecipe,
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || self.fd_inner_temperature <= 0.0 {
            return Err(Error::InvalidParameter("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be finite and nonnegative, got {}", self.epsilon)));
        }
        self.optimizer.validate()
    }
}

fn base_recipe(seed: u64) -> TrainingRecipe {
    TrainingRecipe {
        epochs: 64,
        batch_size: 128,
        lr_start: 0.04,
        lr_end: 0.04 / 32.0,
        momentum: 0.9,
        weight_decay: 0.002,
        early_stop_patience: 8,
        seed,
        cosine_schedule: true,
        grad_clip: Some(5.0),
        epsilon_warmup: 8,
    }
}

/// Teacher adversarial-training preset for 784-dimensional image data:
/// PGD with radius 0.2, step 0.05, 10 iterations; SGD momentum 0.9, weight
/// decay 0.002, learning rate 0.04 annealed to 0.04/32.
pub fn mnist_teacher_preset(seed: u64) -> (TrainingRecipe, f64, AttackConfig) {
    (base_recipe(seed), 0.2, AttackConfig::new(10, 0.05, 1, seed, true).expect("valid attack config"))
}

/// Student presets for 784-dimensional image data. SD uses temperature 4 and
/// learning rate 0.04 to 0.04/16; ARD/RSLAD use temperature 2 and 0.04 to
/// 0.04/32; FD uses temperature 2 and 0.04 to 0.04/16. All use alpha 0.5,
/// weight decay 0.001, and (for the adversarial methods) the same PGD
/// schedule as the teacher.
pub fn mnist_distill_preset(method: Method, seed: u64) -> DistillationConfig {
    let mut recipe = base_recipe(seed);
    recipe.weight_decay = 0.001;
    // The teacher's soft labels anchor the student early on, so distillation
    // tolerates a shorter perturbation ramp than cold-start teacher training.
    recipe.epsilon_warmup = 4;
    let (temperature, epsilon, lr_end_div) = match method {
        Method::Sd => (4.0, 0.0, 16.0),
        Method::Ard | Method::Rslad => (2.0, 0.2, 32.0),
        Method::Fd => (2.0, 0.2, 16.0),
    };
    recipe.lr_end = 0.04 / lr_end_div;
    DistillationConfig {
        method,
        temperature,
        alpha: 0.5,
        inner_attack: AttackConfig::new(10, 0.05, 1, seed, true).expect("valid attack config"),
        epsilon,
        fd_inner_temperature: 1.0,
        optimizer: recipe,
    }
}

/// Small-scale presets for the 2-D synthetic corpus: the same shape as the
/// image presets with a shorter budget and radius 0.1 / step 0.025.
pub fn synthetic2d_teacher_preset(seed: u64) -> (TrainingRecipe, f64, AttackConfig) {
    let mut recipe = base_recipe(seed);
    recipe.epochs = 32;
    recipe.batch_size = 64;
    (recipe, 0.1, AttackConfig::new(10, 0.025, 1, seed, true).expect("valid attack config"))
}

pub fn synthetic2d_distill_preset(method: Method, seed: u64) -> DistillationConfig {
    let mut cfg = mnist_distill_preset(method, seed);
    cfg.optimizer.epochs = 32;
    cfg.optimizer.batch_size = 64;
    if cfg.epsilon > 0.0 {
        cfg.epsilon = 0.1;
        cfg.inner_attack = AttackConfig::new(10, 0.025, 1, seed, true).expect("valid attack config");
    }
    cfg
}

/// Computes the loss method's inner-attack witness, or `None` when the
/// method needs no attack (SD, or a zero radius).
pub fn inner_witness(
    pair: &TeacherStudentPair,
    x: &Tensor,
    cfg: &DistillationConfig,
    attack: &AttackConfig,
) -> Result<Option<Tensor>> {
    if cfg.epsilon == 0.0 || cfg.method == Method::Sd {
        return Ok(None);
    }
    let region = InputRegion::unit_box(x.clone(), cfg.epsilon)?;
    match cfg.method {
        Method::Sd => unreachable!(),
        Method::Fd => Ok(Some(
            fd_inner_attack(pair, &region, attack, cfg.fd_inner_temperature)?.witness,
        )),
        Method::Ard | Method::Rslad => {
            // Maximise KL(f_s(x'; T), f_t(x; T)): the teacher stays clean.
            let ft_clean = pair.teacher.confidences(x, cfg.temperature)?;
            let result = pgd_maximize(
                |xp| {
                    let mut tape = Tape::new();
                    let xv = tape.input(xp.clone());
                    let sv = pair.student.constants_on(&mut tape);
                    let zs = pair.student.forward_on(&mut tape, &sv, xv)?;
                    let fs = tape.softmax_t(zs, cfg.temperature)?;
                    let ftv = tape.input(ft_clean.clone());
                    let kl = tape.kl_divergence(fs, ftv)?;
                    let value = tape.value(kl).get(0);
                    let grads = tape.gradients(kl, &[xv])?;
                    Ok((value, grads[&xv].clone()))
                },
                &region,
                attack,
            )?;
            Ok(Some(result.witness))
        }
    }
}

/// Records the loss for one example on a tape. The teacher's weights are
/// untracked constants; only the student's handles are returned for
/// differentiation.
fn loss_on_tape(
    pair: &TeacherStudentPair,
    x: &Tensor,
    y: usize,
    cfg: &DistillationConfig,
    witness: Option<&Tensor>,
) -> Result<(Tape, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let adv = match witness {
        Some(w) => tape.input(w.clone()),
        None => xv,
    };
    let sv = pair.student.constants_on(&mut tape);
    let tv = pair.teacher.constants_on(&mut tape);
    let t = cfg.temperature;
    let kl_weight = cfg.alpha * t * t;

    let loss = match cfg.method {
        Method::Sd => {
            let zs = pair.student.forward_on(&mut tape, &sv, xv)?;
            let zt = pair.teacher.forward_on(&mut tape, &tv, xv)?;
            let fs = tape.softmax_t(zs, t)?;
            let ft = tape.softmax_t(zt, t)?;
            let kl = tape.kl_divergence(fs, ft)?;
            let ce = tape.cross_entropy(zs, y)?;
            let a = tape.scale(kl, kl_weight);
            let b = tape.scale(ce, 1.0 - cfg.alpha);
            tape.add(a, b)?
        }
        Method::Ard => {
            let zs_adv = pair.student.forward_on(&mut tape, &sv, adv)?;
            let zs_clean = pair.student.forward_on(&mut tape, &sv, xv)?;
            let zt = pair.teacher.forward_on(&mut tape, &tv, xv)?;
            let fs_adv = tape.softmax_t(zs_adv, t)?;
            let ft = tape.softmax_t(zt, t)?;
            let kl = tape.kl_divergence(fs_adv, ft)?;
            let ce = tape.cross_entropy(zs_clean, y)?;
            let a = tape.scale(kl, kl_weight);
            let b = tape.scale(ce, 1.0 - cfg.alpha);
            tape.add(a, b)?
        }
        Method::Rslad => {
            let zs_adv = pair.student.forward_on(&mut tape, &sv, adv)?;
            let zs_clean = pair.student.forward_on(&mut tape, &sv, xv)?;
            let zt = pair.teacher.forward_on(&mut tape, &tv, xv)?;
            let fs_adv = tape.softmax_t(zs_adv, t)?;
            let fs_clean = tape.softmax_t(zs_clean, t)?;
            let ft = tape.softmax_t(zt, t)?;
            let kl_adv = tape.kl_divergence(fs_adv, ft)?;
            let kl_clean = tape.kl_divergence(fs_clean, ft)?;
            let a = tape.scale(kl_adv, kl_weight);
            let b = tape.scale(kl_clean, 1.0 - cfg.alpha);
            tape.add(a, b)?
        }
        Method::Fd => {
            let zs_adv = pair.student.forward_on(&mut tape, &sv, adv)?;
            let zs_clean = pair.student.forward_on(&mut tape, &sv, xv)?;
            let zt_adv = pair.teacher.forward_on(&mut tape, &tv, adv)?;
            let fs_adv = tape.softmax_t(zs_adv, t)?;
            let ft_adv = tape.softmax_t(zt_adv, t)?;
            let kl = tape.kl_divergence(fs_adv, ft_adv)?;
            let ce = tape.cross_entropy(zs_clean, y)?;
            let a = tape.scale(kl, kl_weight);
            let b = tape.scale(ce, 1.0 - cfg.alpha);
            tape.add(a, b)?
        }
    };

    let tracked: Vec<Var> = sv.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
    Ok((tape, loss, tracked))
}

/// Loss value with an explicitly held inner-attack witness (pass `None` to
/// evaluate at the clean input). Exposed so gradient checks can freeze the
/// witness while probing the weights.
pub fn loss_value_with_witness(
    pair: &TeacherStudentPair,
    x: &Tensor,
    y: usize,
    cfg: &DistillationConfig,
    witness: Option<&Tensor>,
) -> Result<f64> {
    let (tape, loss, _) = loss_on_tape(pair, x, y, cfg, witness)?;
    Ok(tape.value(loss).get(0))
}

/// Loss value and per-layer `(d_weight, d_bias)` gradients of the student.
pub fn loss_gradient_with_witness(
    pair: &TeacherStudentPair,
    x: &Tensor,
    y: usize,
    cfg: &DistillationConfig,
    witness: Option<&Tensor>,
) -> Result<(f64, Vec<(Tensor, Tensor)>)> {
    let (tape, loss, tracked) = loss_on_tape(pair, x, y, cfg, witness)?;
    let value = tape.value(loss).get(0);
    let grads = tape.gradients(loss, &tracked)?;
    let per_layer = tracked
        .chunks(2)
        .map(|pair| (grads[&pair[0]].clone(), grads[&pair[1]].clone()))
        .collect();
    Ok((value, per_layer))
}

fn method_loss(pair: &TeacherStudentPair, x: &Tensor, y: usize, cfg: &DistillationConfig) -> Result<f64> {
    cfg.validate()?;
    let witness = inner_witness(pair, x, cfg, &cfg.inner_attack)?;
    loss_value_with_witness(pair, x, y, cfg, witness.as_ref())
}

/// Standard distillation loss
/// `alpha T^2 KL(f_s(x;T), f_t(x;T)) + (1-alpha) CE(z_s(x), y)`.
pub fn sd_loss(pair: &TeacherStudentPair, x: &Tensor, y: usize, temperature: f64, alpha: f64) -> Result<f64> {
    let cfg = DistillationConfig {
        method: Method::Sd,
        temperature,
        alpha,
        inner_attack: AttackConfig::new(1, 1.0, 1, 0, false)?,
        epsilon: 0.0,
        fd_inner_temperature: 1.0,
        optimizer: base_recipe(0),
    };
    method_loss(pair, x, y, &cfg)
}

pub fn ard_loss(pair: &TeacherStudentPair, x: &Tensor, y: usize, cfg: &DistillationConfig) -> Result<f64> {
    method_loss(pair, x, y, &DistillationConfig { method: Method::Ard, ..cfg.clone() })
}

pub fn rslad_loss(pair: &TeacherStudentPair, x: &Tensor, y: usize, cfg: &DistillationConfig) -> Result<f64> {
    method_loss(pair, x, y, &DistillationConfig { method: Method::Rslad, ..cfg.clone() })
}

pub fn fd_loss(pair: &TeacherStudentPair, x: &Tensor, y: usize, cfg: &DistillationConfig) -> Result<f64> {
    method_loss(pair, x, y, &DistillationConfig { method: Method::Fd, ..cfg.clone() })
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub clean_acc: f64,
    pub lr: f64,
}

/// A trained network, its per-epoch log, and the epoch of the returned
/// checkpoint.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: FeedForwardNetwork,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn accuracy(net: &FeedForwardNetwork, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("accuracy over an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        if net.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Generic SGD loop: momentum, weight decay, the recipe's learning-rate
/// schedule, early stopping on clean test accuracy (ties keep the earlier
/// epoch), and best-checkpoint return.
fn train_loop<G>(
    mut net: FeedForwardNetwork,
    train: &Dataset,
    test: &Dataset,
    recipe: &TrainingRecipe,
    stage: &'static str,
    mut grad_fn: G,
) -> Result<TrainOutcome>
where
    G: FnMut(&FeedForwardNetwork, &Tensor, usize, u64) -> Result<(f64, Vec<(Tensor, Tensor)>)>,
{
    recipe.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Usage("training requires nonempty train and test splits".into()));
    }

    let mut velocity: Vec<(Tensor, Tensor)> = net
        .layers()
        .iter()
        .map(|l| (Tensor::zeros(vec![l.weight.rows(), l.weight.cols()]), Tensor::zeros(vec![l.bias.len()])))
        .collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, FeedForwardNetwork)> = None;
    let mut last_strict_improvement = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..recipe.epochs {
        let lr = recipe.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch_index, batch) in order.chunks(recipe.batch_size).enumerate() {
            let mut sums: Vec<(Tensor, Tensor)> = velocity
                .iter()
                .map(|(w, b)| (Tensor::zeros(w.shape().to_vec()), Tensor::zeros(b.shape().to_vec())))
                .collect();
            for &i in batch {
                let stream = (epoch * train.len() + i) as u64;
                let (value, grads) = grad_fn(&net, &train.inputs[i], train.labels[i], stream)?;
                if !value.is_finite() {
                    return Err(Error::Stage {
                        stage: stage.to_string(),
                        detail: format!(
                            "non-finite loss {value} at epoch {epoch}, batch {batch_index}, lr {lr}"
                        ),
                    });
                }
                epoch_loss += value;
                for (sum, g) in sums.iter_mut().zip(&grads) {
                    add_scaled(&mut sum.0, &g.0, 1.0);
                    add_scaled(&mut sum.1, &g.1, 1.0);
                }
            }
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(clip) = recipe.grad_clip {
                let norm_sq: f64 = sums
                    .iter()
                    .flat_map(|(w, b)| w.data().iter().chain(b.data()))
                    .map(|g| (g * scale).powi(2))
                    .sum();
                let norm = norm_sq.sqrt();
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            for ((layer, v), sum) in net.layers_mut().iter_mut().zip(&mut velocity).zip(&sums) {
                step_param(&mut layer.weight, &mut v.0, &sum.0, scale, recipe, lr);
                step_param(&mut layer.bias, &mut v.1, &sum.1, scale, recipe, lr);
            }
        }

        let clean_acc = accuracy(&net, test)?;
        log.push(EpochRecord { epoch, loss: epoch_loss / train.len() as f64, clean_acc, lr });

        // Ties checkpoint the later epoch (distillation keeps refining the
        // teacher match after accuracy saturates) but do not reset the
        // early-stopping patience, which counts strict improvements only.
        let improved = best.as_ref().is_none_or(|(acc, _, _)| clean_acc > *acc);
        let tied = best.as_ref().is_some_and(|(acc, _, _)| clean_acc == *acc);
        if improved {
            last_strict_improvement = epoch;
        }
        if improved || tied {
            best = Some((clean_acc, epoch, net.clone()));
        }
        if epoch - last_strict_improvement >= recipe.early_stop_patience {
            break;
        }
    }

    let (_, best_epoch, network) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { network, log, best_epoch })
}

fn add_scaled(target: &mut Tensor, source: &Tensor, factor: f64) {
    for (t, &s) in target.data_mut().iter_mut().zip(source.data()) {
        *t += factor * s;
    }
}

/// v = momentum v + (mean gradient + weight decay * p); p -= lr v.
fn step_param(
    param: &mut Tensor,
    velocity: &mut Tensor,
    grad_sum: &Tensor,
    scale: f64,
    recipe: &TrainingRecipe,
    lr: f64,
) {
    for ((v, &g), p) in velocity
        .data_mut()
        .iter_mut()
        .zip(grad_sum.data())
        .zip(param.data_mut().iter_mut())
    {
        *v = recipe.momentum * *v + g * scale + recipe.weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Adversarial training: each example is replaced by the strongest visited
/// PGD iterate of the cross entropy against its true label before the SGD
/// step.
pub fn adversarial_train(
    net: FeedForwardNetwork,
    train: &Dataset,
    test: &Dataset,
    recipe: &TrainingRecipe,
    epsilon: f64,
    attack: &AttackConfig,
) -> Result<TrainOutcome> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("epsilon must be finite and nonnegative, got {epsilon}")));
    }
    let len = train.len();
    train_loop(net, train, test, recipe, "adversarial-train", |net, x, y, stream| {
        let epsilon = recipe.epsilon_at(stream as usize / len, epsilon);
        let x_adv = if epsilon > 0.0 {
            let region = InputRegion::unit_box(x.clone(), epsilon)?;
            pgd_maximize(|xp| ce_input_gradient(net, xp, y), &region, &attack.for_example(stream))?
                .witness
        } else {
            x.clone()
        };
        weight_gradient_ce(net, &x_adv, y)
    })
}

fn weight_gradient_ce(net: &FeedForwardNetwork, x: &Tensor, y: usize) -> Result<(f64, Vec<(Tensor, Tensor)>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let nv = net.constants_on(&mut tape);
    let z = net.forward_on(&mut tape, &nv, xv)?;
    let loss = tape.cross_entropy(z, y)?;
    let value = tape.value(loss).get(0);
    let tracked: Vec<Var> = nv.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
    let grads = tape.gradients(loss, &tracked)?;
    let per_layer = tracked
        .chunks(2)
        .map(|pair| (grads[&pair[0]].clone(), grads[&pair[1]].clone()))
        .collect();
    Ok((value, per_layer))
}

/// Trains a fresh student against a frozen teacher with the configured loss.
pub fn distill(
    teacher: &FeedForwardNetwork,
    student_arch: &ArchPreset,
    train: &Dataset,
    test: &Dataset,
    cfg: &DistillationConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let student = FeedForwardNetwork::init(student_arch, cfg.optimizer.seed)?;
    TeacherStudentPair::new(teacher.clone(), student.clone())?;
    let len = train.len();
    train_loop(student, train, test, &cfg.optimizer, "distill", |student, x, y, stream| {
        let pair = TeacherStudentPair::new(teacher.clone(), student.clone())?;
        let mut epoch_cfg = cfg.clone();
        epoch_cfg.epsilon = cfg.optimizer.epsilon_at(stream as usize / len, cfg.epsilon);
        let witness = inner_witness(&pair, x, &epoch_cfg, &cfg.inner_attack.for_example(stream))?;
        loss_gradient_with_witness(&pair, x, y, &epoch_cfg, witness.as_ref())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic2d, Synthetic2dSpec};
    use crate::network::Layer;
    use approx::assert_relative_eq;

    fn constant_net(biases: Vec<f64>, input_dim: usize) -> FeedForwardNetwork {
        let c = biases.len();
        FeedForwardNetwork::new(vec![Layer {
            weight: Tensor::zeros(vec![c, input_dim]),
            bias: Tensor::vector(biases).unwrap(),
        }])
        .unwrap()
    }

    fn random_pair(seed: u64) -> TeacherStudentPair {
        let arch_t = ArchPreset::new(2, vec![6, 5, 3]);
        let arch_s = ArchPreset::new(2, vec![4, 3]);
        TeacherStudentPair::new(
            FeedForwardNetwork::init(&arch_t, seed).unwrap(),
            FeedForwardNetwork::init(&arch_s, seed + 1).unwrap(),
        )
        .unwrap()
    }

    fn test_cfg(method: Method, epsilon: f64) -> DistillationConfig {
        DistillationConfig {
            method,
            temperature: 2.0,
            alpha: 0.5,
            inner_attack: AttackConfig::new(5, 0.02, 1, 9, true).unwrap(),
            epsilon,
            fd_inner_temperature: 1.0,
            optimizer: base_recipe(0),
        }
    }

    fn x0() -> Tensor {
        Tensor::vector(vec![0.4, 0.6]).unwrap()
    }

    #[test]
    fn sd_loss_identical_networks_alpha_one_is_zero() {
        let net = FeedForwardNetwork::init(&ArchPreset::new(2, vec![4, 3]), 3).unwrap();
        let pair = TeacherStudentPair::new(net.clone(), net).unwrap();
        let loss = sd_loss(&pair, &x0(), 0, 4.0, 1.0).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn sd_loss_alpha_zero_is_cross_entropy() {
        let pair = random_pair(21);
        let loss = sd_loss(&pair, &x0(), 1, 4.0, 0.0).unwrap();
        let z = pair.student.logits(&x0()).unwrap();
        let ce = crate::tensor::cross_entropy(&z, 1).unwrap();
        assert_relative_eq!(loss, ce, epsilon = 1e-12);
    }

    #[test]
    fn sd_loss_hand_example_is_ln2() {
        // Teacher outputs exactly (1, 0); student exactly (0.5, 0.5).
        // 0.5 * KL + 0.5 * CE = 0.5 ln2 + 0.5 ln2 = ln2 at T=1, y=0.
        let teacher = constant_net(vec![0.0, -800.0], 2);
        let student = constant_net(vec![0.0, 0.0], 2);
        let pair = TeacherStudentPair::new(teacher, student).unwrap();
        let loss = sd_loss(&pair, &x0(), 0, 1.0, 0.5).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn ard_loss_zero_epsilon_equals_sd() {
        let pair = random_pair(33);
        let cfg = test_cfg(Method::Ard, 0.0);
        let ard = ard_loss(&pair, &x0(), 1, &cfg).unwrap();
        let sd = sd_loss(&pair, &x0(), 1, cfg.temperature, cfg.alpha).unwrap();
        assert_relative_eq!(ard, sd, epsilon = 1e-12);
    }

    #[test]
    fn ard_loss_dominates_sd_at_alpha_one() {
        let pair = random_pair(35);
        let mut cfg = test_cfg(Method::Ard, 0.08);
        cfg.alpha = 1.0;
        let ard = ard_loss(&pair, &x0(), 1, &cfg).unwrap();
        let sd = sd_loss(&pair, &x0(), 1, cfg.temperature, 1.0).unwrap();
        assert!(ard >= sd - 1e-12, "ard {ard} < sd {sd}");
    }

    #[test]
    fn rslad_loss_zero_epsilon_closed_form() {
        let pair = random_pair(37);
        let cfg = test_cfg(Method::Rslad, 0.0);
        let loss = rslad_loss(&pair, &x0(), 0, &cfg).unwrap();
        let fs = pair.student.confidences(&x0(), cfg.temperature).unwrap();
        let ft = pair.teacher.confidences(&x0(), cfg.temperature).unwrap();
        let kl = crate::tensor::kl_divergence(&fs, &ft).unwrap();
        let t2 = cfg.temperature * cfg.temperature;
        assert_relative_eq!(loss, (cfg.alpha * t2 + 1.0 - cfg.alpha) * kl, epsilon = 1e-10);
    }

    #[test]
    fn rslad_identical_networks_zero_epsilon_is_zero() {
        let net = FeedForwardNetwork::init(&ArchPreset::new(2, vec![4, 3]), 5).unwrap();
        let pair = TeacherStudentPair::new(net.clone(), net).unwrap();
        for alpha in [0.0, 0.5, 1.0] {
            let mut cfg = test_cfg(Method::Rslad, 0.0);
            cfg.alpha = alpha;
            assert!(rslad_loss(&pair, &x0(), 0, &cfg).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn fd_loss_zero_epsilon_equals_sd() {
        let pair = random_pair(41);
        let cfg = test_cfg(Method::Fd, 0.0);
        let fd = fd_loss(&pair, &x0(), 1, &cfg).unwrap();
        let sd = sd_loss(&pair, &x0(), 1, cfg.temperature, cfg.alpha).unwrap();
        assert_relative_eq!(fd, sd, epsilon = 1e-12);
    }

    #[test]
    fn fd_loss_identical_networks_is_weighted_ce() {
        let net = FeedForwardNetwork::init(&ArchPreset::new(2, vec![4, 3]), 7).unwrap();
        let pair = TeacherStudentPair::new(net.clone(), net).unwrap();
        let cfg = test_cfg(Method::Fd, 0.05);
        let loss = fd_loss(&pair, &x0(), 2, &cfg).unwrap();
        let z = pair.student.logits(&x0()).unwrap();
        let ce = crate::tensor::cross_entropy(&z, 2).unwrap();
        assert_relative_eq!(loss, (1.0 - cfg.alpha) * ce, epsilon = 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences_with_frozen_witness() {
        let x = x0();
        for (inst, method) in [Method::Sd, Method::Ard, Method::Rslad, Method::Fd]
            .into_iter()
            .enumerate()
        {
            let pair = random_pair(50 + inst as u64);
            let cfg = test_cfg(method, 0.05);
            let witness = inner_witness(&pair, &x, &cfg, &cfg.inner_attack).unwrap();
            let (_, grads) = loss_gradient_with_witness(&pair, &x, 1, &cfg, witness.as_ref()).unwrap();

            let h = 1e-5;
            for (layer_idx, (dw, _)) in grads.iter().enumerate() {
                for flat in [0usize, dw.len() / 2] {
                    let probe = |delta: f64| {
                        let mut student = pair.student.clone();
                        student.layers_mut()[layer_idx].weight.data_mut()[flat] += delta;
                        let probed = TeacherStudentPair::new(pair.teacher.clone(), student).unwrap();
                        loss_value_with_witness(&probed, &x, 1, &cfg, witness.as_ref()).unwrap()
                    };
                    let fd = (probe(h) - probe(-h)) / (2.0 * h);
                    let ad = dw.data()[flat];
                    let scale = fd.abs().max(ad.abs()).max(1e-6);
                    assert!(
                        (fd - ad).abs() / scale < 1e-3,
                        "{method}: layer {layer_idx} entry {flat}: fd {fd} vs ad {ad}"
                    );
                }
            }
        }
    }

    fn tiny_splits() -> (Dataset, Dataset) {
        let spec = Synthetic2dSpec { train_count: 60, test_count: 20, noise: 0.05, ..Default::default() };
        generate_synthetic2d(&spec, 77).unwrap()
    }

    fn tiny_recipe() -> TrainingRecipe {
        TrainingRecipe {
            epochs: 4,
            batch_size: 16,
            lr_start: 0.05,
            lr_end: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            early_stop_patience: 4,
            seed: 5,
            cosine_schedule: true,
            grad_clip: None,
            epsilon_warmup: 0,
        }
    }

    #[test]
    fn adversarial_train_loss_decreases_early() {
        let (train, test) = tiny_splits();
        let net = FeedForwardNetwork::init(&ArchPreset::new(2, vec![8, 2]), 1).unwrap();
        let attack = AttackConfig::new(5, 0.025, 1, 1, true).unwrap();
        let mut recipe = tiny_recipe();
        recipe.epochs = 6;
        recipe.early_stop_patience = 6;
        let out = adversarial_train(net, &train, &test, &recipe, 0.05, &attack).unwrap();
        assert!(out.log.len() >= 3);
        assert!(out.log[2].loss < out.log[0].loss);
    }

    #[test]
    fn adversarial_train_zero_epsilon_matches_clean_sgd() {
        let (train, test) = tiny_splits();
        let init = FeedForwardNetwork::init(&ArchPreset::new(2, vec![6, 2]), 2).unwrap();
        let attack = AttackConfig::new(5, 0.025, 1, 1, true).unwrap();
        let recipe = tiny_recipe();
        let adv = adversarial_train(init.clone(), &train, &test, &recipe, 0.0, &attack).unwrap();
        // Clean SGD on the same recipe, written directly against the loop.
        let clean = train_loop(init, &train, &test, &recipe, "clean", |net, x, y, _| {
            weight_gradient_ce(net, x, y)
        })
        .unwrap();
        for (a, b) in adv.network.layers().iter().zip(clean.network.layers()) {
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.bias.data(), b.bias.data());
        }
    }

    #[test]
    fn distill_is_deterministic_and_freezes_teacher() {
        let (train, test) = tiny_splits();
        let teacher = FeedForwardNetwork::init(&ArchPreset::new(2, vec![8, 2]), 3).unwrap();
        let before: Vec<Vec<f64>> = teacher.layers().iter().map(|l| l.weight.data().to_vec()).collect();
        let mut cfg = test_cfg(Method::Fd, 0.05);
        cfg.optimizer = tiny_recipe();
        let arch = ArchPreset::new(2, vec![4, 2]);
        let a = distill(&teacher, &arch, &train, &test, &cfg).unwrap();
        let b = distill(&teacher, &arch, &train, &test, &cfg).unwrap();
        for (la, lb) in a.network.layers().iter().zip(b.network.layers()) {
            assert_eq!(la.weight.data(), lb.weight.data());
            assert_eq!(la.bias.data(), lb.bias.data());
        }
        let after: Vec<Vec<f64>> = teacher.layers().iter().map(|l| l.weight.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn early_stopping_returns_best_checkpoint() {
        let (train, test) = tiny_splits();
        let net = FeedForwardNetwork::init(&ArchPreset::new(2, vec![8, 2]), 4).unwrap();
        let mut recipe = tiny_recipe();
        recipe.epochs = 10;
        recipe.early_stop_patience = 2;
        let out = train_loop(net, &train, &test, &recipe, "clean", |net, x, y, _| {
            weight_gradient_ce(net, x, y)
        })
        .unwrap();
        let best_logged = out
            .log
            .iter()
            .map(|r| r.clean_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(accuracy(&out.network, &test).unwrap(), best_logged, epsilon = 1e-12);
        assert_eq!(out.log[out.best_epoch].clean_acc, best_logged);
    }

    #[test]
    fn recipe_validation_rejects_bad_schedules() {
        let mut r = tiny_recipe();
        r.lr_end = 1.0; // above lr_start
        assert!(r.validate().is_err());
        let mut r = tiny_recipe();
        r.early_stop_patience = 100;
        assert!(r.validate().is_err());
        let mut cfg = test_cfg(Method::Fd, 0.05);
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cosine_schedule_hits_endpoints() {
        let mut r = tiny_recipe();
        r.epochs = 64;
        r.lr_start = 0.04;
        r.lr_end = 0.04 / 32.0;
        assert_relative_eq!(r.lr_at(0), 0.04, epsilon = 1e-12);
        assert_relative_eq!(r.lr_at(63), 0.04 / 32.0, epsilon = 1e-12);
        assert!(r.lr_at(31) < r.lr_at(0) && r.lr_at(31) > r.lr_at(63));
    }
}
