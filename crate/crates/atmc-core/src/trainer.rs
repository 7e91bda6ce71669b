//! Training loops: the ADMM min-max loop that maintains (theta, theta',
//! dual), plain adversarial SGD, and support-constrained fine-tuning.
//!
//! The ADMM step order is: generate adversarial examples against the current
//! theta; take one proximal SGD step on the data loss plus
//! (rho/2)*||theta - theta' + u||_F^2 followed by the global top-k
//! projection; refresh the quantization-feasible mirror theta' by
//! zero-anchored k-means on theta + u (optionally throttled); and ascend the
//! scaled dual u += theta - theta'. The proximal gradient rho*(theta -
//! theta' + u) is added analytically, not autodiffed.
//!
//! Every loop here shuffles with the same seeded generator, so runs are
//! reproducible per (config, seed) and reductions of the ADMM loop (rho = 0,
//! unbounded k, 32-bit codebooks, no attack) reproduce plain SGD bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::attacks::{run_attack, AttackConfig, ModelTarget};
use crate::error::{AtmcError, Result};
use crate::graph::{Graph, Reduction};
use crate::model::{count_distinct_nonzero, ModelParams};
use crate::projections::{
    mix_seed, project_topk_global, zero_kmeans, CompressionConfig,
};
use crate::tensor::{Element, Tensor};

/// Step-decay learning rate: base * factor^(number of milestones passed).
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub base: f64,
    /// Milestones as fractions of the total epoch budget.
    pub decay_at: Vec<f64>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            decay_at: Vec::new(),
            factor: 1.0,
        }
    }

    /// The default: x0.1 at 50% and 75% of the epoch budget.
    pub fn step_decay(base: f64) -> Self {
        LrSchedule {
            base,
            decay_at: vec![0.5, 0.75],
            factor: 0.1,
        }
    }

    pub fn at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let mut lr = self.base;
        for &p in &self.decay_at {
            if (epoch as f64) >= p * total_epochs as f64 {
                lr *= self.factor;
            }
        }
        lr
    }
}

/// Stop fine-tuning when the epoch-mean loss has not improved by `min_delta`
/// for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub attack: AttackConfig,
    pub compression: CompressionConfig,
    /// Run the k-means mirror refresh every this many steps (1 = every step,
    /// matching the unthrottled loop). The dual update always runs.
    pub mirror_period: usize,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            lr: LrSchedule::step_decay(0.05),
            seed: 0,
            attack: AttackConfig::none(),
            compression: CompressionConfig::default(),
            mirror_period: 1,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AtmcError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if self.lr.base <= 0.0 {
            return Err(AtmcError::InvalidConfig("learning rate must be > 0".into()));
        }
        if self.mirror_period == 0 {
            return Err(AtmcError::InvalidConfig("mirror_period must be >= 1".into()));
        }
        self.attack.validate()?;
        self.compression.validate()
    }
}

/// Borrowed training split: images [N,C,H,W] plus labels.
#[derive(Clone, Copy)]
pub struct TrainData<'a, E> {
    pub x: &'a Tensor<E>,
    pub y: &'a [usize],
}

impl<'a, E: Element> TrainData<'a, E> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// ADMM variables: primal theta, quantization-feasible mirror theta', scaled
/// dual u, and the step counter.
#[derive(Debug, Clone)]
pub struct AdmmState<E> {
    pub theta: ModelParams<E>,
    pub theta_prime: ModelParams<E>,
    pub dual: ModelParams<E>,
    pub t: usize,
}

impl<E: Element> AdmmState<E> {
    pub fn new(theta: ModelParams<E>) -> Self {
        let theta_prime = theta.clone();
        let dual = theta.zeros_like();
        AdmmState {
            theta,
            theta_prime,
            dual,
            t: 0,
        }
    }

    /// ||theta - theta'||_F over all U, V, C matrices.
    pub fn primal_residual(&self) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.theta.matrices().zip(self.theta_prime.matrices()) {
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                let d = x.as_f64() - y.as_f64();
                acc += d * d;
            }
        }
        acc.sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Loss on the (possibly adversarial) batch before the parameter update.
    pub data_loss: f64,
    /// ||theta - theta'||_F after the update.
    pub residual: f64,
    pub mirror_updated: bool,
}

/// One per-epoch log record emitted to the harness.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub primal_residual: f64,
    pub nnz: usize,
    pub distinct_per_matrix: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<TrainLogRow>,
    /// Data loss of every step, in order.
    pub step_losses: Vec<f64>,
    /// Primal residual after every step (ADMM runs only).
    pub step_residuals: Vec<f64>,
}

/// Projection applied after each SGD step of [`train_with_projection`].
pub enum ProjectionMode {
    None,
    /// Global top-k across all U, V, C after every step.
    GlobalTopK(usize),
    /// Keep the support fixed: entries outside the mask stay zero.
    FrozenSupport(SupportMask),
}

/// Boolean support of every matrix in canonical order.
pub struct SupportMask {
    masks: Vec<Vec<bool>>,
}

impl SupportMask {
    pub fn from_model<E: Element>(model: &ModelParams<E>) -> Self {
        SupportMask {
            masks: model
                .matrices()
                .map(|m| m.data().iter().map(|&v| v != E::zero()).collect())
                .collect(),
        }
    }

    pub fn apply<E: Element>(&self, model: &mut ModelParams<E>) {
        for (m, mask) in model.matrices_mut().zip(self.masks.iter()) {
            for (v, &keep) in m.data_mut().iter_mut().zip(mask.iter()) {
                if !keep {
                    *v = E::zero();
                }
            }
        }
    }

    /// True if the model's support is contained in the mask.
    pub fn contains<E: Element>(&self, model: &ModelParams<E>) -> bool {
        model
            .matrices()
            .zip(self.masks.iter())
            .all(|(m, mask)| {
                m.data()
                    .iter()
                    .zip(mask.iter())
                    .all(|(&v, &keep)| keep || v == E::zero())
            })
    }
}

pub(crate) struct LayerGrads<E> {
    pub u: Option<Tensor<E>>,
    pub v: Option<Tensor<E>>,
    pub c: Tensor<E>,
    pub bias: Tensor<E>,
}

pub(crate) type ModelGrads<E> = Vec<LayerGrads<E>>;

/// Mean adversarial loss of a batch: attack the current snapshot, then score
/// the perturbed batch. Gradients (when taken) flow to the parameters only.
pub fn adv_loss<E: Element>(
    model: &ModelParams<E>,
    x: &Tensor<E>,
    y: &[usize],
    attack: &AttackConfig,
) -> Result<f64> {
    let x_adv = run_attack(&ModelTarget(model), x, y, attack)?;
    model.mean_loss(&x_adv, y)
}

/// Mean-loss gradient of the batch w.r.t. every parameter.
pub(crate) fn data_grads<E: Element>(
    model: &ModelParams<E>,
    x: &Tensor<E>,
    y: &[usize],
) -> Result<(f64, ModelGrads<E>)> {
    let mut g: Graph<E> = Graph::new();
    let xv = g.constant(x.clone());
    let (logits, vars) = model.forward_graph(&mut g, xv, true)?;
    let loss = g.softmax_cross_entropy(logits, y, Reduction::Mean)?;
    let loss_val = g.value(loss).item().as_f64();
    g.backward(loss)?;
    let grads = vars
        .into_iter()
        .map(|lv| LayerGrads {
            u: lv.u.map(|v| g.take_grad(v).expect("u grad")),
            v: lv.v.map(|v| g.take_grad(v).expect("v grad")),
            c: g.take_grad(lv.c).expect("c grad"),
            bias: g.take_grad(lv.bias).expect("bias grad"),
        })
        .collect();
    Ok((loss_val, grads))
}

fn sgd_apply<E: Element>(model: &mut ModelParams<E>, grads: &ModelGrads<E>, lr: f64) {
    let step = E::from_f64(-lr);
    for (t, g) in model.layers.iter_mut().zip(grads.iter()) {
        if let Some(gu) = &g.u {
            t.u.axpy(step, gu);
        }
        if let Some(gv) = &g.v {
            t.v.axpy(step, gv);
        }
        t.c.axpy(step, &g.c);
        t.bias.axpy(step, &g.bias);
    }
}

fn gather_batch<E: Element>(x: &Tensor<E>, y: &[usize], idx: &[u32]) -> (Tensor<E>, Vec<usize>) {
    let n = x.shape()[0];
    let sample = x.numel() / n;
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    let mut bx = Tensor::zeros(&shape);
    for (row, &i) in idx.iter().enumerate() {
        let src = &x.data()[i as usize * sample..(i as usize + 1) * sample];
        bx.data_mut()[row * sample..(row + 1) * sample].copy_from_slice(src);
    }
    let by = idx.iter().map(|&i| y[i as usize]).collect();
    (bx, by)
}

fn epoch_log_row<E: Element>(
    model: &ModelParams<E>,
    epoch: usize,
    step: usize,
    clean_loss: f64,
    adv_loss: f64,
    residual: f64,
) -> TrainLogRow {
    TrainLogRow {
        epoch,
        step,
        clean_loss,
        adv_loss,
        primal_residual: residual,
        nnz: model.total_nnz(),
        distinct_per_matrix: model.matrices().map(count_distinct_nonzero).collect(),
    }
}

/// Minibatch SGD on the adversarial loss with an optional per-step
/// projection. `ProjectionMode::None` with an attack config of `none` is
/// plain training; with an attack it is dense adversarial training.
pub fn train_with_projection<E: Element>(
    model: &mut ModelParams<E>,
    data: TrainData<'_, E>,
    cfg: &TrainConfig,
    mode: &ProjectionMode,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<u32> = (0..data.len() as u32).collect();
    let mut report = TrainReport::default();
    let mut step = 0usize;
    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        let mut last_clean: Option<(Tensor<E>, Vec<usize>)> = None;
        for idx in order.chunks(cfg.batch_size) {
            let (bx, by) = gather_batch(data.x, data.y, idx);
            let x_adv = run_attack(&ModelTarget(&*model), &bx, &by, &cfg.attack)?;
            let (loss, grads) = data_grads(model, &x_adv, &by)?;
            if !loss.is_finite() {
                return Err(AtmcError::NonFinite {
                    context: "training loss",
                    step,
                });
            }
            sgd_apply(model, &grads, lr);
            match mode {
                ProjectionMode::None => {}
                ProjectionMode::GlobalTopK(k) => project_topk_global(model, *k),
                ProjectionMode::FrozenSupport(mask) => mask.apply(model),
            }
            report.step_losses.push(loss);
            epoch_loss_sum += loss;
            epoch_batches += 1;
            step += 1;
            last_clean = Some((bx, by));
        }
        let mean_loss = epoch_loss_sum / epoch_batches.max(1) as f64;
        let clean = match &last_clean {
            Some((bx, by)) => model.mean_loss(bx, by)?,
            None => f64::NAN,
        };
        report
            .rows
            .push(epoch_log_row(model, epoch, step, clean, mean_loss, 0.0));
        if let Some(es) = &cfg.early_stop {
            if mean_loss < best - es.min_delta {
                best = mean_loss;
                stall = 0;
            } else {
                stall += 1;
                if stall >= es.patience {
                    break;
                }
            }
        }
    }
    Ok(report)
}

/// Standard adversarial training (no projections); plain training when the
/// attack family is `None`.
pub fn train_adversarial<E: Element>(
    model: &mut ModelParams<E>,
    data: TrainData<'_, E>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_projection(model, data, cfg, &ProjectionMode::None)
}

/// Core ADMM update given precomputed data-loss gradients. Returns the
/// primal residual after the update and whether the mirror was refreshed.
fn admm_apply_update<E: Element>(
    state: &mut AdmmState<E>,
    grads: &mut ModelGrads<E>,
    lr: f64,
    cfg: &TrainConfig,
) -> (f64, bool) {
    let comp = &cfg.compression;
    // Proximal term rho*(theta - theta' + u), added analytically.
    if comp.rho > 0.0 {
        let rho = E::from_f64(comp.rho);
        for ((t, tp), (d, g)) in state
            .theta
            .layers
            .iter()
            .zip(state.theta_prime.layers.iter())
            .zip(state.dual.layers.iter().zip(grads.iter_mut()))
        {
            let mats = [(&t.u, &tp.u, &d.u), (&t.v, &tp.v, &d.v), (&t.c, &tp.c, &d.c)];
            let gm = [g.u.as_mut(), g.v.as_mut(), Some(&mut g.c)];
            for ((tm, tpm, dm), gslot) in mats.into_iter().zip(gm) {
                if let Some(gt) = gslot {
                    for (((gv, &tv), &tpv), &dv) in gt
                        .data_mut()
                        .iter_mut()
                        .zip(tm.data().iter())
                        .zip(tpm.data().iter())
                        .zip(dm.data().iter())
                    {
                        *gv = *gv + rho * (tv - tpv + dv);
                    }
                }
            }
        }
    }

    sgd_apply(&mut state.theta, grads, lr);
    project_topk_global(&mut state.theta, comp.k);

    let mirror_updated = (state.t + 1) % cfg.mirror_period == 0;
    if mirror_updated {
        let opts = comp.zk_options();
        let clusters = comp.clusters();
        let mut mi = 0u64;
        for (tp, (t, d)) in state
            .theta_prime
            .layers
            .iter_mut()
            .zip(state.theta.layers.iter().zip(state.dual.layers.iter()))
        {
            for (tpm, (tm, dm)) in [&mut tp.u, &mut tp.v, &mut tp.c]
                .into_iter()
                .zip([&t.u, &t.v, &t.c].into_iter().zip([&d.u, &d.v, &d.c]))
            {
                let mut input = tm.clone();
                input.axpy(E::one(), dm);
                *tpm = if comp.bits >= 32 {
                    input
                } else {
                    zero_kmeans(
                        &input,
                        clusters,
                        &opts,
                        mix_seed(cfg.seed, state.t as u64, mi),
                    )
                    .1
                };
                mi += 1;
            }
            tp.bias = t.bias.clone();
        }
    }

    // Dual ascent on the scaled dual.
    for (d, (t, tp)) in state
        .dual
        .layers
        .iter_mut()
        .zip(state.theta.layers.iter().zip(state.theta_prime.layers.iter()))
    {
        for (dm, (tm, tpm)) in [&mut d.u, &mut d.v, &mut d.c]
            .into_iter()
            .zip([&t.u, &t.v, &t.c].into_iter().zip([&tp.u, &tp.v, &tp.c]))
        {
            for ((dv, &tv), &tpv) in dm
                .data_mut()
                .iter_mut()
                .zip(tm.data().iter())
                .zip(tpm.data().iter())
            {
                *dv = *dv + (tv - tpv);
            }
        }
    }

    state.t += 1;
    (state.primal_residual(), mirror_updated)
}

/// One ADMM step on a batch: adversarial example generation, proximal
/// projected SGD on theta, mirror refresh, dual ascent.
pub fn admm_step<E: Element>(
    state: &mut AdmmState<E>,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepStats> {
    let x_adv = run_attack(&ModelTarget(&state.theta), x, y, &cfg.attack)?;
    let (loss, mut grads) = data_grads(&state.theta, &x_adv, y)?;
    if !loss.is_finite() {
        return Err(AtmcError::NonFinite {
            context: "admm data loss",
            step: state.t,
        });
    }
    let (residual, mirror_updated) = admm_apply_update(state, &mut grads, lr, cfg);
    Ok(StepStats {
        data_loss: loss,
        residual,
        mirror_updated,
    })
}

/// Drive the full ADMM loop over the dataset, calling `observer` after every
/// step.
pub fn train_atmc_observed<E: Element>(
    model: ModelParams<E>,
    data: TrainData<'_, E>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&AdmmState<E>, &StepStats),
) -> Result<(AdmmState<E>, TrainReport)> {
    cfg.validate()?;
    let mut state = AdmmState::new(model);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<u32> = (0..data.len() as u32).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        let mut last_clean: Option<(Tensor<E>, Vec<usize>)> = None;
        for idx in order.chunks(cfg.batch_size) {
            let (bx, by) = gather_batch(data.x, data.y, idx);
            let stats = admm_step(&mut state, &bx, &by, cfg, lr)?;
            observer(&state, &stats);
            report.step_losses.push(stats.data_loss);
            report.step_residuals.push(stats.residual);
            epoch_loss_sum += stats.data_loss;
            epoch_batches += 1;
            last_clean = Some((bx, by));
        }
        let mean_loss = epoch_loss_sum / epoch_batches.max(1) as f64;
        let clean = match &last_clean {
            Some((bx, by)) => state.theta.mean_loss(bx, by)?,
            None => f64::NAN,
        };
        let step = state.t;
        report.rows.push(epoch_log_row(
            &state.theta,
            epoch,
            step,
            clean,
            mean_loss,
            state.primal_residual(),
        ));
    }
    Ok((state, report))
}

pub fn train_atmc<E: Element>(
    model: ModelParams<E>,
    data: TrainData<'_, E>,
    cfg: &TrainConfig,
) -> Result<(AdmmState<E>, TrainReport)> {
    train_atmc_observed(model, data, cfg, |_, _| {})
}

/// Deliverable model: theta projected to the sparsity budget, then quantized
/// per matrix, so the result is feasible for both constraints. Sparsify-then-
/// quantize, applied to theta (which carries the sparsity guarantee).
pub fn finalize<E: Element>(
    state: &AdmmState<E>,
    comp: &CompressionConfig,
    seed: u64,
) -> ModelParams<E> {
    let mut out = state.theta.clone();
    project_topk_global(&mut out, comp.k);
    if comp.bits < 32 {
        let opts = comp.zk_options();
        let clusters = comp.clusters();
        for (mi, m) in out.matrices_mut().enumerate() {
            let (_, q) = zero_kmeans(m, clusters, &opts, mix_seed(seed, u64::MAX, mi as u64));
            *m = q;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchitectureSpec, Block};
    use crate::projections::{is_feasible_quant, is_feasible_sparsity};

    fn two_param_model() -> ModelParams<f64> {
        let arch = ArchitectureSpec {
            name: "toy".into(),
            input: (1, 1, 1),
            classes: 2,
            blocks: vec![Block::Fc { out: 2, relu: false }],
        };
        let mut m = ModelParams::init_dense(&arch, 0).unwrap();
        m.layers[0].c = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        m
    }

    #[test]
    fn admm_on_quadratic_matches_grid_search() {
        // loss(theta) = (t0 - 0.7)^2 + (t1 - 0.3)^2, k = 1, bits = 1.
        // Exhaustive search over 1-sparse quantized points finds (0.7, 0).
        let target = [0.7f64, 0.3f64];
        let mut grid_best = (f64::INFINITY, [0.0, 0.0]);
        let mut a = -1.0f64;
        while a <= 1.0 {
            for slot in 0..2 {
                let mut th = [0.0, 0.0];
                th[slot] = a;
                let f = (th[0] - target[0]).powi(2) + (th[1] - target[1]).powi(2);
                if f < grid_best.0 {
                    grid_best = (f, th);
                }
            }
            a += 0.001;
        }

        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: LrSchedule::constant(0.2),
            seed: 1,
            attack: AttackConfig::none(),
            compression: CompressionConfig {
                k: 1,
                bits: 1,
                rho: 0.1,
                ..Default::default()
            },
            mirror_period: 1,
            early_stop: None,
        };
        let mut state = AdmmState::new(two_param_model());
        for _ in 0..300 {
            let th = &state.theta.layers[0].c;
            let mut grads: ModelGrads<f64> = vec![LayerGrads {
                u: None,
                v: None,
                c: Tensor::new(
                    vec![2, 1],
                    vec![
                        2.0 * (th.data()[0] - target[0]),
                        2.0 * (th.data()[1] - target[1]),
                    ],
                )
                .unwrap(),
                bias: Tensor::zeros(&[2]),
            }];
            admm_apply_update(&mut state, &mut grads, 0.2, &cfg);
            assert!(is_feasible_sparsity(&state.theta, 1));
            assert!(is_feasible_quant(&state.theta_prime, 1));
        }
        let th = state.theta.layers[0].c.data();
        let f = (th[0] - target[0]).powi(2) + (th[1] - target[1]).powi(2);
        assert!(
            (th[0] - grid_best.1[0]).abs() < 1e-3 && (th[1] - grid_best.1[1]).abs() < 1e-3,
            "iterate ({}, {}) vs grid best {:?}",
            th[0],
            th[1],
            grid_best
        );
        assert!(f <= grid_best.0 + 1e-3);
    }

    #[test]
    fn lr_schedule_decays_at_milestones() {
        let lr = LrSchedule::step_decay(1.0);
        assert_eq!(lr.at(0, 10), 1.0);
        assert_eq!(lr.at(4, 10), 1.0);
        assert!((lr.at(5, 10) - 0.1).abs() < 1e-12);
        assert!((lr.at(8, 10) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn support_mask_freezes_zeros() {
        let mut m = two_param_model();
        m.layers[0].c = Tensor::new(vec![2, 1], vec![0.5, 0.0]).unwrap();
        let mask = SupportMask::from_model(&m);
        m.layers[0].c = Tensor::new(vec![2, 1], vec![0.9, 0.9]).unwrap();
        mask.apply(&mut m);
        assert_eq!(m.layers[0].c.data(), &[0.9, 0.0]);
        assert!(mask.contains(&m));
    }
}
