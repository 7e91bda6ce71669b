//! White-box attack generators: PGD and FGSM inside an l-infinity ball, and
//! the penalty-based WRM perturbation. Used both inside adversarial training
//! and for evaluation.
//!
//! All deltas and step sizes are in normalized pixel units (the CLI converts
//! from the 0-255 scale once, centrally). Attacks are pure functions of
//! (target, x, y, config): no internal randomness, iteration starts from the
//! clean input.

use crate::error::{AtmcError, Result};
use crate::graph::{Graph, Reduction};
use crate::model::ModelParams;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackFamily {
    None,
    Pgd,
    Fgsm,
    Wrm,
}

/// Per-step direction for PGD: the sign of the gradient (standard) or the
/// raw gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Sign,
    Raw,
}

/// Attack family, l-infinity budget, iteration schedule, and clamp range.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// l-infinity budget in normalized pixel units.
    pub delta: f64,
    pub n_steps: usize,
    /// Per-step size in normalized units.
    pub alpha: f64,
    /// Quadratic transport penalty for WRM.
    pub wrm_gamma: f64,
    pub pixel_min: f64,
    pub pixel_max: f64,
    pub grad_mode: GradMode,
}

impl AttackConfig {
    pub fn none() -> Self {
        AttackConfig {
            family: AttackFamily::None,
            delta: 0.0,
            n_steps: 0,
            alpha: 0.0,
            wrm_gamma: 0.0,
            pixel_min: 0.0,
            pixel_max: 1.0,
            grad_mode: GradMode::Sign,
        }
    }

    /// PGD with the customary step size min(delta + 4/255, 1.25*delta) / n
    /// (the "+4" is on the 0-255 scale).
    pub fn pgd(delta: f64, n_steps: usize) -> Self {
        let alpha = (delta + 4.0 / 255.0).min(1.25 * delta) / n_steps.max(1) as f64;
        AttackConfig {
            family: AttackFamily::Pgd,
            delta,
            n_steps,
            alpha,
            wrm_gamma: 0.0,
            pixel_min: 0.0,
            pixel_max: 1.0,
            grad_mode: GradMode::Sign,
        }
    }

    /// PGD with the simplified step size 1.25 * delta / n.
    pub fn pgd_simplified(delta: f64, n_steps: usize) -> Self {
        let mut cfg = Self::pgd(delta, n_steps);
        cfg.alpha = 1.25 * delta / n_steps.max(1) as f64;
        cfg
    }

    pub fn fgsm(delta: f64) -> Self {
        AttackConfig {
            family: AttackFamily::Fgsm,
            delta,
            n_steps: 1,
            alpha: delta,
            wrm_gamma: 0.0,
            pixel_min: 0.0,
            pixel_max: 1.0,
            grad_mode: GradMode::Sign,
        }
    }

    /// WRM ascends f - (gamma/2)*||x' - x||^2 with plain gradient steps of
    /// size 0.1 * delta / n by default.
    pub fn wrm(delta: f64, gamma: f64, n_steps: usize) -> Self {
        AttackConfig {
            family: AttackFamily::Wrm,
            delta,
            n_steps,
            alpha: 0.1 * delta / n_steps.max(1) as f64,
            wrm_gamma: gamma,
            pixel_min: 0.0,
            pixel_max: 1.0,
            grad_mode: GradMode::Raw,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_grad_mode(mut self, mode: GradMode) -> Self {
        self.grad_mode = mode;
        self
    }

    pub fn with_pixel_range(mut self, lo: f64, hi: f64) -> Self {
        self.pixel_min = lo;
        self.pixel_max = hi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta < 0.0 {
            return Err(AtmcError::InvalidConfig(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.pixel_min >= self.pixel_max {
            return Err(AtmcError::InvalidConfig("empty pixel range".into()));
        }
        match self.family {
            AttackFamily::None => Ok(()),
            AttackFamily::Fgsm => Ok(()),
            AttackFamily::Pgd | AttackFamily::Wrm => {
                if self.n_steps < 1 {
                    return Err(AtmcError::InvalidConfig("n_steps must be >= 1".into()));
                }
                if self.alpha < 0.0 || (self.alpha == 0.0 && self.delta > 0.0) {
                    return Err(AtmcError::InvalidConfig(format!(
                        "alpha must be positive, got {}",
                        self.alpha
                    )));
                }
                if self.family == AttackFamily::Wrm && self.wrm_gamma <= 0.0 {
                    return Err(AtmcError::InvalidConfig("wrm_gamma must be > 0".into()));
                }
                Ok(())
            }
        }
    }
}

/// Anything an attack can ascend: batch loss plus its gradient w.r.t. the
/// input. For a classifier the loss is summed (not averaged) over the batch
/// so per-sample gradients stay uncoupled.
pub trait AttackTarget<E: Element> {
    fn loss_and_input_grad(&self, x: &Tensor<E>, y: &[usize]) -> Result<(f64, Tensor<E>)>;
}

/// [`AttackTarget`] view of a model snapshot under summed cross-entropy.
pub struct ModelTarget<'a, E>(pub &'a ModelParams<E>);

impl<E: Element> AttackTarget<E> for ModelTarget<'_, E> {
    fn loss_and_input_grad(&self, x: &Tensor<E>, y: &[usize]) -> Result<(f64, Tensor<E>)> {
        let mut g: Graph<E> = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let (logits, _) = self.0.forward_graph(&mut g, xv, false)?;
        let loss = g.softmax_cross_entropy(logits, y, Reduction::Sum)?;
        let loss_val = g.value(loss).item().as_f64();
        g.backward(loss)?;
        let grad = g.take_grad(xv).expect("input gradient");
        Ok((loss_val, grad))
    }
}

/// Clamp `x_cand` into the l-infinity ball of radius `delta` around `x`,
/// then into the pixel range. Values already inside pass through bit-exactly.
pub fn project_linf<E: Element>(
    x_cand: &Tensor<E>,
    x: &Tensor<E>,
    delta: f64,
    pixel_min: f64,
    pixel_max: f64,
) -> Tensor<E> {
    assert_eq!(x_cand.shape(), x.shape(), "project_linf shape mismatch");
    let d = E::from_f64(delta);
    let (mn, mx) = (E::from_f64(pixel_min), E::from_f64(pixel_max));
    let mut out = x_cand.clone();
    for (o, &xc) in out.data_mut().iter_mut().zip(x.data().iter()) {
        let lo = xc - d;
        let hi = xc + d;
        let mut v = *o;
        if v < lo {
            v = lo;
        }
        if v > hi {
            v = hi;
        }
        if v < mn {
            v = mn;
        }
        if v > mx {
            v = mx;
        }
        *o = v;
    }
    out
}

fn sign<E: Element>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

/// Iterated ascent with per-step projection back into the ball.
pub fn pgd_attack<E: Element>(
    target: &impl AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<E>> {
    let alpha = E::from_f64(cfg.alpha);
    let mut x_adv = x.clone();
    for step in 0..cfg.n_steps {
        let (_, grad) = target.loss_and_input_grad(&x_adv, y)?;
        grad.assert_finite("attack gradient", step)?;
        for (v, &g) in x_adv.data_mut().iter_mut().zip(grad.data().iter()) {
            let dir = match cfg.grad_mode {
                GradMode::Sign => sign(g),
                GradMode::Raw => g,
            };
            *v = *v + alpha * dir;
        }
        x_adv = project_linf(&x_adv, x, cfg.delta, cfg.pixel_min, cfg.pixel_max);
    }
    Ok(x_adv)
}

/// Single signed step of size delta, clamped to the pixel range.
pub fn fgsm_attack<E: Element>(
    target: &impl AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<E>> {
    let (_, grad) = target.loss_and_input_grad(x, y)?;
    grad.assert_finite("attack gradient", 0)?;
    let d = E::from_f64(cfg.delta);
    let (mn, mx) = (E::from_f64(cfg.pixel_min), E::from_f64(cfg.pixel_max));
    let mut x_adv = x.clone();
    for (v, &g) in x_adv.data_mut().iter_mut().zip(grad.data().iter()) {
        let mut t = *v + d * sign(g);
        if t < mn {
            t = mn;
        }
        if t > mx {
            t = mx;
        }
        *v = t;
    }
    Ok(x_adv)
}

/// Penalty-based perturbation: ascends f(x') - (gamma/2)*||x' - x||^2 with
/// raw-gradient steps; no ball projection, one final pixel clamp.
pub fn wrm_attack<E: Element>(
    target: &impl AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<E>> {
    let alpha = E::from_f64(cfg.alpha);
    let gamma = E::from_f64(cfg.wrm_gamma);
    let mut x_adv = x.clone();
    for step in 0..cfg.n_steps {
        let (_, grad) = target.loss_and_input_grad(&x_adv, y)?;
        grad.assert_finite("attack gradient", step)?;
        for ((v, &g), &xc) in x_adv
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
            .zip(x.data().iter())
        {
            *v = *v + alpha * (g - gamma * (*v - xc));
        }
    }
    let (mn, mx) = (E::from_f64(cfg.pixel_min), E::from_f64(cfg.pixel_max));
    for v in x_adv.data_mut().iter_mut() {
        if *v < mn {
            *v = mn;
        }
        if *v > mx {
            *v = mx;
        }
    }
    Ok(x_adv)
}

/// Dispatch on the configured family; `None` returns the clean input.
pub fn run_attack<E: Element>(
    target: &impl AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<E>> {
    match cfg.family {
        AttackFamily::None => Ok(x.clone()),
        AttackFamily::Pgd => pgd_attack(target, x, y, cfg),
        AttackFamily::Fgsm => fgsm_attack(target, x, y, cfg),
        AttackFamily::Wrm => wrm_attack(target, x, y, cfg),
    }
}
