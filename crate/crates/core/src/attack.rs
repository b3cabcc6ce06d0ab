//! Single-model L-infinity attacks: FGSM, R+FGSM, PGD and momentum PGD.
//!
//! Inputs live in `[0, 1]`; every iterate is projected back onto the box
//! `[max(0, x - eps), min(1, x + eps)]` around the natural sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};
use crate::nn::loss::{check_labels, CrossEntropy};
use crate::nn::model::Classifier;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackVariant {
    Fgsm,
    RFgsm,
    Pgd,
    MomentumPgd,
    Diva,
    DivaTargeted,
}

/// What the DIVA loss reads from each model's output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Post-softmax probability of the true class.
    #[default]
    Probability,
    /// Raw logit of the true class.
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L-infinity budget in `[0, 1]` pixel units.
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    pub momentum_mu: f32,
    pub random_start: bool,
    /// Radius of the R+FGSM random start.
    pub sigma: f32,
    /// Weight of the adapted-model term in the DIVA loss.
    pub c: f32,
    pub variant: AttackVariant,
    pub stop_on_success: bool,
    pub record_iterates: bool,
    pub seed: u64,
    pub score: ScoreMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 1.0 / 255.0,
            steps: 20,
            momentum_mu: 0.5,
            random_start: false,
            sigma: 4.0 / 255.0,
            c: 1.0,
            variant: AttackVariant::Pgd,
            stop_on_success: false,
            record_iterates: false,
            seed: 0,
            score: ScoreMode::Probability,
        }
    }
}

impl AttackConfig {
    pub fn with_variant(mut self, variant: AttackVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(DivaError::InvalidArgument(format!(
                "epsilon must be in (0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(DivaError::InvalidArgument(format!(
                "alpha must be in (0, epsilon], got {}",
                self.alpha
            )));
        }
        if !(self.momentum_mu >= 0.0 && self.momentum_mu.is_finite()) {
            return Err(DivaError::InvalidArgument("momentum must be >= 0".into()));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(DivaError::InvalidArgument("c must be >= 0".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma < self.epsilon) {
            return Err(DivaError::InvalidArgument(
                "sigma must be in [0, epsilon)".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a single-model attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub adversarial: Tensor,
    /// Loss at each iterate before its update; one entry per executed step.
    pub loss_trace: Vec<f32>,
    /// Every post-projection iterate, when requested.
    pub iterates: Vec<Tensor>,
    pub prediction: usize,
    pub success: bool,
}

/// Projected iterate sequence shared by all gradient-sign attacks.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Trajectory {
    pub adversarial: Tensor,
    pub loss_trace: Vec<f32>,
    pub iterates: Vec<Tensor>,
}

/// Clamps `xt` elementwise to `[max(0, x0 - eps), min(1, x0 + eps)]`.
pub fn clip_project(xt: &Tensor, x0: &Tensor, epsilon: f32) -> Result<Tensor> {
    x0.ensure_same_shape(xt, "clip_project")?;
    let data = xt
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&v, &o)| {
            let lo = (o - epsilon).max(0.0);
            let hi = (o + epsilon).min(1.0);
            v.max(lo).min(hi)
        })
        .collect();
    Tensor::new(xt.shape().to_vec(), data)
}

pub(crate) fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn signed_step(x: &Tensor, dir: &[f32], alpha: f32) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dir)
        .map(|(&v, &d)| v + alpha * sign(d))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn uniform_start(x0: &Tensor, radius: f32, seed: u64) -> Result<Tensor> {
    if radius == 0.0 {
        return Ok(x0.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = Tensor::from_fn(x0.shape(), |i| x0.data()[i] + rng.gen_range(-radius..radius));
    clip_project(&noisy, x0, radius)
}

/// Iterated sign-gradient ascent with projection.
///
/// With `momentum = Some(mu)` the step direction is the sign of
/// `g_{t+1} = mu * g_t + grad / ||grad||_1`.
pub(crate) fn ascend<G, S>(
    x0: &Tensor,
    start: Tensor,
    cfg: &AttackConfig,
    momentum: Option<f32>,
    mut grad: G,
    mut succeeded: S,
) -> Result<Trajectory>
where
    G: FnMut(&Tensor) -> Result<(f32, Tensor)>,
    S: FnMut(&Tensor) -> Result<bool>,
{
    let mut xt = start;
    let mut velocity = vec![0.0f32; x0.len()];
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    let mut iterates = Vec::new();
    for _ in 0..cfg.steps {
        let (loss, g) = grad(&xt)?;
        if !g.all_finite() {
            return Err(DivaError::Numerical("non-finite input gradient".into()));
        }
        loss_trace.push(loss);
        let dir: Vec<f32> = match momentum {
            None => g.into_data(),
            Some(mu) => {
                let l1: f64 = g.data().iter().map(|v| v.abs() as f64).sum();
                for (v, &gi) in velocity.iter_mut().zip(g.data()) {
                    let normalized = if l1 > 0.0 {
                        (gi as f64 / l1) as f32
                    } else {
                        0.0
                    };
                    *v = mu * *v + normalized;
                }
                velocity.clone()
            }
        };
        xt = clip_project(&signed_step(&xt, &dir, cfg.alpha), x0, cfg.epsilon)?;
        if cfg.record_iterates {
            iterates.push(xt.clone());
        }
        if cfg.stop_on_success && succeeded(&xt)? {
            break;
        }
    }
    Ok(Trajectory {
        adversarial: xt,
        loss_trace,
        iterates,
    })
}

pub(crate) fn check_sample(net: &dyn Classifier, x: &Tensor, y: usize) -> Result<()> {
    if x.batch_size() != 1 {
        return Err(DivaError::InvalidArgument(format!(
            "attacks take one sample at a time, got a batch of {}",
            x.batch_size()
        )));
    }
    check_labels(&[y], net.num_classes())
}

fn ce_gradient(net: &dyn Classifier, x: &Tensor, y: usize) -> Result<(f32, Tensor)> {
    let labels = [y];
    net.input_gradient(x, &CrossEntropy { labels: &labels })
}

fn finish(net: &dyn Classifier, y: usize, t: Trajectory) -> Result<AttackResult> {
    let prediction = net.predict(&t.adversarial)?[0];
    Ok(AttackResult {
        adversarial: t.adversarial,
        loss_trace: t.loss_trace,
        iterates: t.iterates,
        prediction,
        success: prediction != y,
    })
}

/// One signed-gradient step of size `epsilon` on the cross-entropy loss.
pub fn fgsm(net: &dyn Classifier, x: &Tensor, y: usize, epsilon: f32) -> Result<Tensor> {
    check_sample(net, x, y)?;
    let (_, g) = ce_gradient(net, x, y)?;
    clip_project(&signed_step(x, g.data(), epsilon), x, epsilon)
}

/// FGSM taken from a uniformly perturbed start, projected to the ball of `x`.
pub fn rfgsm(
    net: &dyn Classifier,
    x: &Tensor,
    y: usize,
    epsilon: f32,
    sigma: f32,
    seed: u64,
) -> Result<Tensor> {
    check_sample(net, x, y)?;
    if !(sigma >= 0.0 && sigma < epsilon) {
        return Err(DivaError::InvalidArgument(
            "R+FGSM needs 0 <= sigma < epsilon".into(),
        ));
    }
    let start = uniform_start(x, sigma, seed)?;
    let (_, g) = ce_gradient(net, &start, y)?;
    clip_project(&signed_step(&start, g.data(), epsilon), x, epsilon)
}

fn starting_point(x: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.random_start {
        uniform_start(x, cfg.epsilon, cfg.seed)
    } else {
        Ok(x.clone())
    }
}

/// Projected gradient descent on the cross-entropy of `net`.
pub fn pgd(net: &dyn Classifier, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_sample(net, x, y)?;
    let t = ascend(
        x,
        starting_point(x, cfg)?,
        cfg,
        None,
        |xt| ce_gradient(net, xt, y),
        |xt| Ok(net.predict(xt)?[0] != y),
    )?;
    finish(net, y, t)
}

/// PGD with an L1-normalised gradient momentum accumulator.
pub fn momentum_pgd(
    net: &dyn Classifier,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_sample(net, x, y)?;
    let t = ascend(
        x,
        starting_point(x, cfg)?,
        cfg,
        Some(cfg.momentum_mu),
        |xt| ce_gradient(net, xt, y),
        |xt| Ok(net.predict(xt)?[0] != y),
    )?;
    finish(net, y, t)
}

/// Runs the single-model attack selected by `cfg.variant`.
pub fn run_single(
    net: &dyn Classifier,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    match cfg.variant {
        AttackVariant::Pgd => pgd(net, x, y, cfg),
        AttackVariant::MomentumPgd => momentum_pgd(net, x, y, cfg),
        AttackVariant::Fgsm | AttackVariant::RFgsm => {
            cfg.validate()?;
            let adv = if cfg.variant == AttackVariant::Fgsm {
                fgsm(net, x, y, cfg.epsilon)?
            } else {
                rfgsm(net, x, y, cfg.epsilon, cfg.sigma, cfg.seed)?
            };
            let labels = [y];
            let loss = crate::nn::loss::cross_entropy(&net.logits(x)?, &labels)?;
            finish(
                net,
                y,
                Trajectory {
                    iterates: if cfg.record_iterates {
                        vec![adv.clone()]
                    } else {
                        Vec::new()
                    },
                    adversarial: adv,
                    loss_trace: vec![loss],
                },
            )
        }
        AttackVariant::Diva | AttackVariant::DivaTargeted => Err(DivaError::InvalidArgument(
            "DIVA variants need a model pair".into(),
        )),
    }
}
