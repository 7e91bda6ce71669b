//! Comparison pipelines, all assembled from the same trainer and projection
//! primitives so trade-off curves are apples-to-apples:
//!
//! - NAP: plain training, global magnitude prune, support-frozen fine-tune.
//! - DA: dense adversarial training, no compression.
//! - AP: adversarial pre-train, prune, adversarial support-frozen fine-tune.
//! - Al0: from the adversarial dense model, adversarial training with the
//!   global top-k projection after every step (support free to move).
//! - ALR: adversarial pre-train, per-layer truncated SVD into the U*V slots,
//!   adversarial fine-tune of the factors with the zero blocks frozen.
//! - ATMC: the ADMM loop plus finalize.
//! - ATMC uniform post-quantization: ATMC at 32 bits, then uniform
//!   quantization per matrix, no re-training.

use nalgebra::DMatrix;

use crate::error::{AtmcError, Result};
use crate::harness::dataset::Dataset;
use crate::model::{ArchitectureSpec, ModelParams};
use crate::projections::{project_topk_global, uniform_quantize};
use crate::tensor::{Element, Tensor};
use crate::trainer::{
    finalize, train_atmc, train_with_projection, EarlyStop, ProjectionMode, SupportMask,
    TrainConfig, TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    Nap,
    Da,
    Ap,
    Al0,
    Alr,
    Atmc,
    AtmcUniformPq,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Nap => "nap",
            PipelineKind::Da => "da",
            PipelineKind::Ap => "ap",
            PipelineKind::Al0 => "al0",
            PipelineKind::Alr => "alr",
            PipelineKind::Atmc => "atmc",
            PipelineKind::AtmcUniformPq => "atmc-uniform-pq",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "nap" => Some(PipelineKind::Nap),
            "da" => Some(PipelineKind::Da),
            "ap" => Some(PipelineKind::Ap),
            "al0" => Some(PipelineKind::Al0),
            "alr" => Some(PipelineKind::Alr),
            "atmc" => Some(PipelineKind::Atmc),
            "atmc-uniform-pq" => Some(PipelineKind::AtmcUniformPq),
            _ => None,
        }
    }
}

/// Which pipeline to run and its compression knob (pruning ratio for the
/// pruning family, rank fraction for ALR; ATMC takes k from the train
/// config's compression settings).
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub kind: PipelineKind,
    pub pruning_ratio: f64,
    pub rank_fraction: f64,
    /// Fine-tune budget; defaults to half the pre-train epochs.
    pub fine_tune_epochs: Option<usize>,
}

impl PipelineSpec {
    pub fn new(kind: PipelineKind) -> Self {
        PipelineSpec {
            kind,
            pruning_ratio: 1.0,
            rank_fraction: 1.0,
            fine_tune_epochs: None,
        }
    }

    pub fn with_pruning_ratio(mut self, r: f64) -> Self {
        self.pruning_ratio = r;
        self
    }

    pub fn with_rank_fraction(mut self, f: f64) -> Self {
        self.rank_fraction = f;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pruning_ratio > 0.0 && self.pruning_ratio <= 1.0) {
            return Err(AtmcError::InvalidConfig(format!(
                "pruning ratio must be in (0, 1], got {}",
                self.pruning_ratio
            )));
        }
        if !(self.rank_fraction > 0.0 && self.rank_fraction <= 1.0) {
            return Err(AtmcError::InvalidConfig(format!(
                "rank fraction must be in (0, 1], got {}",
                self.rank_fraction
            )));
        }
        Ok(())
    }
}

/// Finished pipeline: the deliverable model, the bit width its size should be
/// accounted at, and the per-phase training reports.
pub struct PipelineOutput<E> {
    pub model: ModelParams<E>,
    pub bits: u8,
    pub reports: Vec<TrainReport>,
}

/// Nonzero budget from a pruning ratio of the plain dense parameter count.
pub fn budget_from_ratio(arch: &ArchitectureSpec, ratio: f64) -> Result<usize> {
    let dense = arch.dense_param_count()?;
    if ratio >= 1.0 {
        return Ok(dense);
    }
    Ok((ratio * dense as f64).floor() as usize)
}

fn fine_tune_cfg(cfg: &TrainConfig, spec: &PipelineSpec) -> TrainConfig {
    let mut ft = cfg.clone();
    ft.epochs = spec.fine_tune_epochs.unwrap_or(cfg.epochs.div_ceil(2)).max(1);
    ft.early_stop = Some(EarlyStop::default());
    ft
}

fn plain_cfg(cfg: &TrainConfig) -> TrainConfig {
    let mut plain = cfg.clone();
    plain.attack = crate::attacks::AttackConfig::none();
    plain
}

/// Plain train, magnitude-prune to the budget, fine-tune with the pruned
/// support frozen. No adversarial component anywhere.
pub fn run_nap<E: Element>(
    spec: &PipelineSpec,
    arch: &ArchitectureSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    spec.validate()?;
    let cfg_plain = plain_cfg(cfg);
    let mut model = ModelParams::init_dense(arch, cfg.seed)?;
    let r1 = train_with_projection(&mut model, data.train_view(), &cfg_plain, &ProjectionMode::None)?;
    let k = budget_from_ratio(arch, spec.pruning_ratio)?;
    project_topk_global(&mut model, k);
    let mask = SupportMask::from_model(&model);
    let r2 = train_with_projection(
        &mut model,
        data.train_view(),
        &fine_tune_cfg(&cfg_plain, spec),
        &ProjectionMode::FrozenSupport(mask),
    )?;
    Ok(PipelineOutput {
        model,
        bits: 32,
        reports: vec![r1, r2],
    })
}

/// Dense adversarial training; the shared pre-train for AP, Al0, and ALR.
pub fn run_da<E: Element>(
    arch: &ArchitectureSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    let mut model = ModelParams::init_dense(arch, cfg.seed)?;
    let report =
        train_with_projection(&mut model, data.train_view(), cfg, &ProjectionMode::None)?;
    Ok(PipelineOutput {
        model,
        bits: 32,
        reports: vec![report],
    })
}

/// AP continuation from an adversarially pre-trained dense model.
pub fn run_ap_from<E: Element>(
    pretrained: &ModelParams<E>,
    spec: &PipelineSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    spec.validate()?;
    let mut model = pretrained.clone();
    let k = budget_from_ratio(&model.arch, spec.pruning_ratio)?;
    project_topk_global(&mut model, k);
    let mask = SupportMask::from_model(&model);
    let report = train_with_projection(
        &mut model,
        data.train_view(),
        &fine_tune_cfg(cfg, spec),
        &ProjectionMode::FrozenSupport(mask),
    )?;
    Ok(PipelineOutput {
        model,
        bits: 32,
        reports: vec![report],
    })
}

pub fn run_ap<E: Element>(
    spec: &PipelineSpec,
    arch: &ArchitectureSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    let pre = run_da(arch, data, cfg)?;
    let mut out = run_ap_from(&pre.model, spec, data, cfg)?;
    out.reports.insert(0, pre.reports.into_iter().next().unwrap());
    Ok(out)
}

/// Al0 continuation: adversarial training with the global top-k projection
/// after every step, starting from the adversarial dense model.
pub fn run_al0_from<E: Element>(
    pretrained: &ModelParams<E>,
    spec: &PipelineSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    spec.validate()?;
    let mut model = pretrained.clone();
    let k = budget_from_ratio(&model.arch, spec.pruning_ratio)?;
    project_topk_global(&mut model, k);
    let report = train_with_projection(
        &mut model,
        data.train_view(),
        &fine_tune_cfg(cfg, spec),
        &ProjectionMode::GlobalTopK(k),
    )?;
    Ok(PipelineOutput {
        model,
        bits: 32,
        reports: vec![report],
    })
}

pub fn run_al0<E: Element>(
    spec: &PipelineSpec,
    arch: &ArchitectureSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    let pre = run_da(arch, data, cfg)?;
    let mut out = run_al0_from(&pre.model, spec, data, cfg)?;
    out.reports.insert(0, pre.reports.into_iter().next().unwrap());
    Ok(out)
}

/// Truncated SVD of one stored (m >= n) dense matrix into rank-r factors
/// embedded in the U/V slots.
fn svd_factorize<E: Element>(
    stored: &Tensor<E>,
    rank: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (m, n) = (stored.shape()[0], stored.shape()[1]);
    let data: Vec<f64> = stored.data().iter().map(|v| v.as_f64()).collect();
    let mat = DMatrix::from_row_slice(m, n, &data);
    let svd = mat
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or(AtmcError::SvdFailure { rows: m, cols: n })?;
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let sv = &svd.singular_values;
    // nalgebra does not guarantee ordering; sort descending ourselves.
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap());
    let r = rank.min(sv.len());
    let mut u_emb = Tensor::zeros(&[m, m]);
    let mut v_emb = Tensor::zeros(&[m, n]);
    for (slot, &si) in order.iter().take(r).enumerate() {
        let s = sv[si];
        for row in 0..m {
            u_emb.data_mut()[row * m + slot] = E::from_f64(u[(row, si)] * s);
        }
        for col in 0..n {
            v_emb.data_mut()[slot * n + col] = E::from_f64(vt[(si, col)]);
        }
    }
    Ok((u_emb, v_emb))
}

/// ALR continuation: factorize each layer of the adversarial dense model to
/// rank ceil(fraction * n), then adversarially fine-tune the factors.
pub fn run_alr_from<E: Element>(
    pretrained: &ModelParams<E>,
    spec: &PipelineSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    spec.validate()?;
    let mut model = pretrained.clone();
    for t in model.layers.iter_mut() {
        let dense = t.effective_weight();
        let n = dense.shape()[1];
        let rank = ((spec.rank_fraction * n as f64).ceil() as usize).clamp(1, n);
        let (u_emb, v_emb) = svd_factorize(&dense, rank)?;
        t.u = u_emb;
        t.v = v_emb;
        t.c = Tensor::zeros(dense.shape());
        t.uses_factors = true;
    }
    let mask = SupportMask::from_model(&model);
    let report = train_with_projection(
        &mut model,
        data.train_view(),
        &fine_tune_cfg(cfg, spec),
        &ProjectionMode::FrozenSupport(mask),
    )?;
    Ok(PipelineOutput {
        model,
        bits: 32,
        reports: vec![report],
    })
}

pub fn run_alr<E: Element>(
    spec: &PipelineSpec,
    arch: &ArchitectureSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    let pre = run_da(arch, data, cfg)?;
    let mut out = run_alr_from(&pre.model, spec, data, cfg)?;
    out.reports.insert(0, pre.reports.into_iter().next().unwrap());
    Ok(out)
}

/// The ADMM pipeline: factorized init, ADMM loop, finalize to a point
/// feasible for both constraints.
pub fn run_atmc<E: Element>(
    arch: &ArchitectureSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    let model = ModelParams::init_factorized(arch, cfg.seed)?;
    let (state, report) = train_atmc(model, data.train_view(), cfg)?;
    let model = finalize(&state, &cfg.compression, cfg.seed);
    Ok(PipelineOutput {
        model,
        bits: cfg.compression.bits,
        reports: vec![report],
    })
}

/// ATMC at 32 bits followed by uniform quantization to the configured width,
/// with no re-training.
pub fn run_atmc_uniform_pq<E: Element>(
    arch: &ArchitectureSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    let target_bits = cfg.compression.bits;
    if target_bits >= 32 {
        return Err(AtmcError::InvalidConfig(
            "atmc-uniform-pq needs a target bit width below 32".into(),
        ));
    }
    let mut cfg32 = cfg.clone();
    cfg32.compression.bits = 32;
    let mut out = run_atmc(arch, data, &cfg32)?;
    for m in out.model.matrices_mut() {
        *m = uniform_quantize(m, target_bits);
    }
    out.bits = target_bits;
    Ok(out)
}

/// Dispatch a pipeline by kind.
pub fn run_pipeline<E: Element>(
    spec: &PipelineSpec,
    arch: &ArchitectureSpec,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<PipelineOutput<E>> {
    match spec.kind {
        PipelineKind::Nap => run_nap(spec, arch, data, cfg),
        PipelineKind::Da => run_da(arch, data, cfg),
        PipelineKind::Ap => run_ap(spec, arch, data, cfg),
        PipelineKind::Al0 => run_al0(spec, arch, data, cfg),
        PipelineKind::Alr => run_alr(spec, arch, data, cfg),
        PipelineKind::Atmc => run_atmc(arch, data, cfg),
        PipelineKind::AtmcUniformPq => run_atmc_uniform_pq(arch, data, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_arithmetic() {
        let arch = ArchitectureSpec::lenet();
        assert_eq!(budget_from_ratio(&arch, 1.0).unwrap(), 430_500);
        assert_eq!(budget_from_ratio(&arch, 0.05).unwrap(), 21_525);
    }

    #[test]
    fn svd_factorize_full_rank_reconstructs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let w: Tensor<f64> = Tensor::random_uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let (u, v) = svd_factorize(&w, 4).unwrap();
        let mut rec = Tensor::zeros(&[6, 4]);
        crate::kernels::mm_nn_acc(u.data(), v.data(), rec.data_mut(), 6, 6, 4);
        assert!(w.max_abs_diff(&rec) < 1e-10);
    }

    #[test]
    fn svd_factorize_truncation_error_matches_tail_energy() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let w: Tensor<f64> = Tensor::random_uniform(&[8, 5], -1.0, 1.0, &mut rng);
        // Independent route: compare ||W - W_r||_F^2 against the tail
        // singular-value energy.
        let data: Vec<f64> = w.data().to_vec();
        let mat = DMatrix::from_row_slice(8, 5, &data);
        let mut sv: Vec<f64> = mat
            .clone()
            .try_svd(false, false, f64::EPSILON, 0)
            .unwrap()
            .singular_values
            .iter()
            .cloned()
            .collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for rank in 1..5 {
            let (u, v) = svd_factorize(&w, rank).unwrap();
            let mut rec = Tensor::zeros(&[8, 5]);
            crate::kernels::mm_nn_acc(u.data(), v.data(), rec.data_mut(), 8, 8, 5);
            let err: f64 = w
                .data()
                .iter()
                .zip(rec.data().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let tail: f64 = sv[rank..].iter().map(|s| s * s).sum();
            assert!((err - tail).abs() < 1e-9, "rank {}: {} vs {}", rank, err, tail);
        }
    }

    #[test]
    fn svd_factor_param_count_is_r_times_m_plus_n() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
        let (m, n, r) = (7, 4, 2);
        let w: Tensor<f64> = Tensor::random_uniform(&[m, n], -1.0, 1.0, &mut rng);
        let (u, v) = svd_factorize(&w, r).unwrap();
        assert_eq!(crate::model::count_l0(&u), m * r);
        assert_eq!(crate::model::count_l0(&v), r * n);
    }
}
