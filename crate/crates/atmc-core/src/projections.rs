//! Constraint projections: global top-k magnitude selection over all U, V, C
//! matrices, and zero-anchored 1-D k-means (Lloyd with a frozen cluster at 0)
//! used as the projection onto the bounded-distinct-values set. Also the
//! uniform post-quantization baseline and the two feasibility predicates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{AtmcError, Result};
use crate::model::{count_distinct_nonzero, ModelParams};
use crate::tensor::{Element, Tensor};

/// Compression hyper-parameters: global nonzero budget k, bit width b
/// (codebook size 2^b per matrix), ADMM penalty rho, and the clustering
/// stopping rule.
#[derive(Debug, Clone)]
pub struct CompressionConfig {
    /// Global nonzero budget over every U, V, C. `usize::MAX` = unbounded.
    pub k: usize,
    /// Bits per stored nonzero; each matrix may hold at most 2^bits distinct
    /// nonzero values. 32 disables the quantization constraint.
    pub bits: u8,
    /// ADMM penalty. Zero is accepted and turns the consensus terms off,
    /// reducing the ADMM loop to projected SGD.
    pub rho: f64,
    pub zk_max_iters: usize,
    /// Optional relative objective-improvement stop; 0 relies on assignment
    /// stability alone.
    pub zk_tol: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            k: usize::MAX,
            bits: 32,
            rho: 1e-2,
            zk_max_iters: 100,
            zk_tol: 0.0,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 32 {
            return Err(AtmcError::InvalidConfig(format!(
                "bits must be in 1..=32, got {}",
                self.bits
            )));
        }
        if !(self.rho >= 0.0) {
            return Err(AtmcError::InvalidConfig(format!("rho must be >= 0, got {}", self.rho)));
        }
        if self.zk_max_iters == 0 {
            return Err(AtmcError::InvalidConfig("zk_max_iters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn zk_options(&self) -> ZkOptions {
        ZkOptions {
            max_iters: self.zk_max_iters,
            tol: self.zk_tol,
        }
    }

    /// Codebook size 2^bits, saturating for bits = 32 on small matrices.
    pub fn clusters(&self) -> usize {
        1usize << self.bits.min(63)
    }
}

/// Stopping rule for [`zero_kmeans`].
#[derive(Debug, Clone, Copy)]
pub struct ZkOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ZkOptions {
    fn default() -> Self {
        ZkOptions {
            max_iters: 100,
            tol: 0.0,
        }
    }
}

/// Quantization codebook: distinct nonzero values plus a per-entry index.
/// Index 0 is zero (never stored in `values`); index i > 0 is `values[i-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<E> {
    pub values: Vec<E>,
    pub assignment: Vec<u32>,
}

impl<E: Element> Codebook<E> {
    pub fn value_of(&self, idx: u32) -> E {
        if idx == 0 {
            E::zero()
        } else {
            self.values[(idx - 1) as usize]
        }
    }
}

pub(crate) fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keep the k entries of largest absolute value across *all* matrices of all
/// layers; zero the rest. Ties at the threshold break by the canonical
/// traversal order (layer ascending, then U < V < C, then row-major), earlier
/// entries winning. Exactly idempotent.
pub fn project_topk_global<E: Element>(model: &mut ModelParams<E>, k: usize) {
    let nnz = model.total_nnz();
    if k >= nnz {
        return;
    }
    if k == 0 {
        for m in model.matrices_mut() {
            for v in m.data_mut().iter_mut() {
                *v = E::zero();
            }
        }
        return;
    }
    let total: usize = model.matrices().map(Tensor::numel).sum();
    // Only nonzeros compete: any nonzero outranks every zero.
    let mut entries: Vec<(E, usize)> = Vec::with_capacity(nnz);
    let mut offset = 0usize;
    for m in model.matrices() {
        for (i, &v) in m.data().iter().enumerate() {
            if v != E::zero() {
                entries.push((v.abs(), offset + i));
            }
        }
        offset += m.numel();
    }
    debug_assert_eq!(offset, total);
    entries.select_nth_unstable_by(k - 1, |a, b| {
        b.0.partial_cmp(&a.0)
            .expect("non-finite magnitude in top-k projection")
            .then(a.1.cmp(&b.1))
    });
    let mut keep = vec![false; total];
    for &(_, idx) in entries.iter().take(k) {
        keep[idx] = true;
    }
    let mut offset = 0usize;
    for m in model.matrices_mut() {
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            if *v != E::zero() && !keep[offset + i] {
                *v = E::zero();
            }
        }
        offset += m.numel();
    }
}

/// `total_nnz <= k`.
pub fn is_feasible_sparsity<E: Element>(model: &ModelParams<E>, k: usize) -> bool {
    model.total_nnz() <= k
}

/// Every matrix holds at most 2^bits distinct nonzero values.
pub fn is_feasible_quant<E: Element>(model: &ModelParams<E>, bits: u8) -> bool {
    let cap = 1u128 << bits.min(127);
    model
        .matrices()
        .all(|m| (count_distinct_nonzero(m) as u128) <= cap)
}

/// Zero-anchored 1-D k-means: clusters the entries of `m` around
/// {0, a_1, ..., a_B} where the zero centroid is frozen and the a_j are
/// learned by Lloyd iteration. Zero entries always map to the zero cluster,
/// and nonzero entries may be captured by it (quantization can increase
/// sparsity). Assignment ties go to the lowest cluster index, i.e. zero
/// first, then codebook order.
pub fn zero_kmeans<E: Element>(
    m: &Tensor<E>,
    clusters: usize,
    opts: &ZkOptions,
    seed: u64,
) -> (Codebook<E>, Tensor<E>) {
    let (cb, out, _) = zero_kmeans_trace(m, clusters, opts, seed);
    (cb, out)
}

/// [`zero_kmeans`] plus the within-cluster squared-error objective after each
/// Lloyd iteration (non-increasing).
pub fn zero_kmeans_trace<E: Element>(
    m: &Tensor<E>,
    clusters: usize,
    opts: &ZkOptions,
    seed: u64,
) -> (Codebook<E>, Tensor<E>, Vec<f64>) {
    assert!(clusters >= 1, "zero_kmeans needs at least one cluster");
    let mut nz_idx: Vec<usize> = Vec::new();
    let mut nz_val: Vec<f64> = Vec::new();
    for (i, &v) in m.data().iter().enumerate() {
        if v != E::zero() {
            nz_idx.push(i);
            nz_val.push(v.as_f64());
        }
    }
    if nz_val.is_empty() {
        return (
            Codebook {
                values: Vec::new(),
                assignment: vec![0; m.numel()],
            },
            Tensor::zeros(m.shape()),
            Vec::new(),
        );
    }

    let mut distinct: Vec<f64> = nz_val.clone();
    distinct.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite value in zero_kmeans"));
    distinct.dedup();

    if distinct.len() <= clusters {
        // Enough clusters for every distinct value: exact reproduction.
        let assignment = build_assignment(m, &distinct);
        return (
            Codebook {
                values: distinct.iter().map(|&v| E::from_f64(v)).collect(),
                assignment,
            },
            m.clone(),
            vec![0.0],
        );
    }

    // Init: `clusters` distinct nonzero values, sampled without replacement.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pool = distinct.clone();
    for i in 0..clusters {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut centroids: Vec<f64> = pool[..clusters].to_vec();

    let nnz = nz_val.len();
    let mut assign: Vec<u32> = vec![u32::MAX; nnz];
    let mut trace: Vec<f64> = Vec::new();

    for _iter in 0..opts.max_iters {
        // Assignment: argmin over {0} + centroids, first index wins ties.
        // One-dimensional nearest search over sorted centroid values; exact
        // distance comparison among the bracketing candidates keeps the
        // semantics identical to the linear argmin scan.
        let index = NearestIndex::build(&centroids);
        let next: Vec<u32> = if nnz >= 1 << 15 {
            nz_val.par_iter().map(|&v| index.nearest(v)).collect()
        } else {
            nz_val.iter().map(|&v| index.nearest(v)).collect()
        };
        let changed = next != assign;
        assign = next;

        // Centroid update: mean of assigned entries; cluster 0 stays at 0.
        let mut sums = vec![0.0f64; clusters];
        let mut counts = vec![0usize; clusters];
        for (&v, &a) in nz_val.iter().zip(assign.iter()) {
            if a > 0 {
                sums[(a - 1) as usize] += v;
                counts[(a - 1) as usize] += 1;
            }
        }
        for j in 0..clusters {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }

        // Re-seed empty clusters to the entry farthest from its centroid.
        let mut reseeded = false;
        let empties: Vec<usize> = (0..clusters).filter(|&j| counts[j] == 0).collect();
        if !empties.is_empty() {
            let mut taken = vec![false; nnz];
            for &j in &empties {
                let mut best: Option<(f64, usize)> = None;
                for (i, (&v, &a)) in nz_val.iter().zip(assign.iter()).enumerate() {
                    if taken[i] {
                        continue;
                    }
                    let q = if a == 0 { 0.0 } else { centroids[(a - 1) as usize] };
                    let d = (v - q) * (v - q);
                    if best.map_or(true, |(bd, _)| d > bd) {
                        best = Some((d, i));
                    }
                }
                if let Some((_, i)) = best {
                    centroids[j] = nz_val[i];
                    taken[i] = true;
                    reseeded = true;
                }
            }
        }

        let obj: f64 = nz_val
            .iter()
            .zip(assign.iter())
            .map(|(&v, &a)| {
                let q = if a == 0 { 0.0 } else { centroids[(a - 1) as usize] };
                (v - q) * (v - q)
            })
            .sum();
        if let Some(&prev) = trace.last() {
            debug_assert!(
                obj <= prev + 1e-9 * (1.0 + prev),
                "clustering objective increased: {} -> {}",
                prev,
                obj
            );
            if opts.tol > 0.0 && prev - obj <= opts.tol * prev.max(1.0) && !reseeded {
                trace.push(obj);
                break;
            }
        }
        trace.push(obj);
        if !changed && !reseeded {
            break;
        }
    }

    // Compact the codebook: drop unused or zero-valued clusters, merge
    // duplicates, and rebuild the reconstruction.
    let mut remap: Vec<u32> = vec![0; clusters + 1];
    let mut values: Vec<E> = Vec::new();
    let mut used = vec![false; clusters];
    for &a in assign.iter() {
        if a > 0 {
            used[(a - 1) as usize] = true;
        }
    }
    for j in 0..clusters {
        if !used[j] || centroids[j] == 0.0 {
            continue;
        }
        let ev = E::from_f64(centroids[j]);
        match values.iter().position(|&x| x == ev) {
            Some(pos) => remap[j + 1] = (pos + 1) as u32,
            None => {
                values.push(ev);
                remap[j + 1] = values.len() as u32;
            }
        }
    }

    let mut out = Tensor::zeros(m.shape());
    let mut assignment = vec![0u32; m.numel()];
    for (slot, (&i, &a)) in nz_idx.iter().zip(assign.iter()).enumerate() {
        let _ = slot;
        let idx = remap[a as usize];
        assignment[i] = idx;
        out.data_mut()[i] = if idx == 0 { E::zero() } else { values[(idx - 1) as usize] };
    }

    (Codebook { values, assignment }, out, trace)
}

/// Literal argmin over {0} + centroids with first-index tie-breaking.
#[cfg(test)]
fn nearest_cluster(v: f64, centroids: &[f64]) -> u32 {
    let mut best_j = 0u32;
    let mut best_d = v * v; // distance to the frozen zero cluster
    for (j, &c) in centroids.iter().enumerate() {
        let d = (v - c) * (v - c);
        if d < best_d {
            best_d = d;
            best_j = (j + 1) as u32;
        }
    }
    best_j
}

/// Sorted view of {0} + centroids for O(log B) nearest-cluster queries.
/// Duplicate values collapse to the lowest cluster index so results match
/// the linear argmin (which keeps the first minimizer) exactly.
struct NearestIndex {
    /// (value, cluster index), sorted by value, values distinct.
    sorted: Vec<(f64, u32)>,
}

impl NearestIndex {
    fn build(centroids: &[f64]) -> Self {
        let mut sorted: Vec<(f64, u32)> = Vec::with_capacity(centroids.len() + 1);
        sorted.push((0.0, 0));
        for (j, &c) in centroids.iter().enumerate() {
            sorted.push((c, (j + 1) as u32));
        }
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        sorted.dedup_by(|next, first| {
            if next.0 == first.0 {
                first.1 = first.1.min(next.1);
                true
            } else {
                false
            }
        });
        NearestIndex { sorted }
    }

    fn nearest(&self, v: f64) -> u32 {
        let pos = self.sorted.partition_point(|&(val, _)| val < v);
        let mut best_d = f64::INFINITY;
        let mut best_j = u32::MAX;
        let lo = pos.saturating_sub(1);
        let hi = (pos + 1).min(self.sorted.len());
        for &(val, j) in &self.sorted[lo..hi] {
            let d = (v - val) * (v - val);
            if d < best_d || (d == best_d && j < best_j) {
                best_d = d;
                best_j = j;
            }
        }
        best_j
    }
}

/// Exact assignment of every entry to its own value (values sorted ascending).
fn build_assignment<E: Element>(m: &Tensor<E>, sorted_distinct: &[f64]) -> Vec<u32> {
    m.data()
        .iter()
        .map(|&v| {
            if v == E::zero() {
                0
            } else {
                let f = v.as_f64();
                let pos = sorted_distinct
                    .binary_search_by(|x| x.partial_cmp(&f).unwrap())
                    .expect("value missing from its own distinct set");
                (pos + 1) as u32
            }
        })
        .collect()
}

/// Uniform post-quantization: 2^bits evenly spaced levels spanning
/// [min nonzero, max nonzero]; zeros preserved; nearest level wins with
/// halfway ties rounding up.
pub fn uniform_quantize<E: Element>(m: &Tensor<E>, bits: u8) -> Tensor<E> {
    assert!(bits >= 1, "uniform_quantize needs bits >= 1");
    if bits >= 32 {
        return m.clone();
    }
    let nonzeros: Vec<f64> = m
        .data()
        .iter()
        .filter(|&&v| v != E::zero())
        .map(|&v| v.as_f64())
        .collect();
    if nonzeros.is_empty() {
        return m.clone();
    }
    let mn = nonzeros.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = nonzeros.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mn == mx {
        return m.clone();
    }
    let levels = (1usize << bits) as f64;
    let step = (mx - mn) / (levels - 1.0);
    m.map(|v| {
        if v == E::zero() {
            v
        } else {
            let idx = ((v.as_f64() - mn) / step).round().clamp(0.0, levels - 1.0);
            E::from_f64(mn + idx * step)
        }
    })
}

/// Apply zero-anchored k-means to every U, V, C matrix of a model in place,
/// with per-matrix seeds derived from `seed`.
pub fn quantize_model<E: Element>(
    model: &mut ModelParams<E>,
    bits: u8,
    opts: &ZkOptions,
    seed: u64,
) {
    if bits >= 32 {
        return;
    }
    let clusters = 1usize << bits;
    for (mi, m) in model.matrices_mut().enumerate() {
        let (_, q) = zero_kmeans(m, clusters, opts, mix_seed(seed, mi as u64, 0));
        *m = q;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_l0, ArchitectureSpec};

    fn vec_model(vals: &[f64]) -> ModelParams<f64> {
        // Small dense mlp model whose C matrix we overwrite for vector tests.
        let arch = ArchitectureSpec {
            name: "probe".into(),
            input: (1, 1, vals.len()),
            classes: 1,
            blocks: vec![crate::model::Block::Fc { out: 1, relu: false }],
        };
        let mut m = ModelParams::init_dense(&arch, 0).unwrap();
        let shape = m.layers[0].c.shape().to_vec();
        m.layers[0].c = Tensor::new(shape, vals.to_vec()).unwrap();
        m
    }

    #[test]
    fn topk_keeps_largest_magnitudes() {
        let mut m = vec_model(&[3.0, -1.0, 0.5, -4.0]);
        project_topk_global(&mut m, 2);
        assert_eq!(m.layers[0].c.data(), &[3.0, 0.0, 0.0, -4.0]);
    }

    #[test]
    fn topk_noop_when_budget_large() {
        let mut m = vec_model(&[3.0, -1.0, 0.5, -4.0]);
        let before = m.clone();
        project_topk_global(&mut m, 100);
        assert_eq!(m, before);
    }

    #[test]
    fn topk_zero_budget() {
        let mut m = vec_model(&[3.0, -1.0]);
        project_topk_global(&mut m, 0);
        assert_eq!(m.total_nnz(), 0);
    }

    #[test]
    fn topk_is_idempotent_and_breaks_ties_by_order() {
        let mut m = vec_model(&[2.0, -2.0, 2.0, 1.0]);
        project_topk_global(&mut m, 2);
        // Tie at |2.0|: earlier traversal positions win.
        assert_eq!(m.layers[0].c.data(), &[2.0, -2.0, 0.0, 0.0]);
        let once = m.clone();
        project_topk_global(&mut m, 2);
        assert_eq!(m, once);
    }

    #[test]
    fn zero_kmeans_exact_when_clusters_suffice() {
        let m = Tensor::from_vec(vec![0.0, 1.0, 4.0, 1.0]);
        let (cb, q) = zero_kmeans(&m, 2, &ZkOptions::default(), 7);
        assert!(q.bits_eq(&m));
        assert_eq!(cb.values.len(), 2);
        assert_eq!(count_l0(&q), 3);
    }

    #[test]
    fn zero_kmeans_prefers_zero_cluster_capture() {
        // [1,1,4] with one learned cluster: optimum sends 1,1 to zero.
        for seed in 0..10 {
            let m = Tensor::from_vec(vec![1.0, 1.0, 4.0]);
            let (cb, q) = zero_kmeans(&m, 1, &ZkOptions::default(), seed);
            assert_eq!(q.data(), &[0.0, 0.0, 4.0], "seed {}", seed);
            assert_eq!(cb.values, vec![4.0]);
        }
    }

    #[test]
    fn zero_kmeans_all_zero_input() {
        let m: Tensor<f64> = Tensor::zeros(&[3, 3]);
        let (cb, q) = zero_kmeans(&m, 4, &ZkOptions::default(), 0);
        assert!(cb.values.is_empty());
        assert_eq!(count_l0(&q), 0);
    }

    #[test]
    fn zero_kmeans_objective_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let m = Tensor::from_vec(data);
        let (_, q, trace) = zero_kmeans_trace(&m, 4, &ZkOptions::default(), 3);
        assert!(trace.len() >= 1);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0]));
        }
        // Support can only shrink.
        for (a, b) in m.data().iter().zip(q.data().iter()) {
            if *a == 0.0 {
                assert_eq!(*b, 0.0);
            }
        }
        assert!(crate::model::count_distinct_nonzero(&q) <= 4);
    }

    #[test]
    fn nearest_index_matches_linear_argmin() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(12);
        for trial in 0..200 {
            let b = 1 + (trial % 7);
            let centroids: Vec<f64> = (0..b)
                .map(|_| {
                    // Coarse grid so exact ties and duplicate centroids occur.
                    (rng.random::<f64>() * 8.0 - 4.0).round() * 0.25
                })
                .collect();
            let index = NearestIndex::build(&centroids);
            for _ in 0..50 {
                let v = (rng.random::<f64>() * 8.0 - 4.0).round() * 0.125;
                assert_eq!(
                    index.nearest(v),
                    nearest_cluster(v, &centroids),
                    "v={} centroids={:?}",
                    v,
                    centroids
                );
            }
        }
    }

    #[test]
    fn uniform_quantize_two_levels() {
        let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let q = uniform_quantize(&m, 1);
        assert_eq!(q.data(), &[1.0, 1.0, 4.0, 4.0]);
    }

    #[test]
    fn uniform_quantize_identity_cases() {
        let m = Tensor::from_vec(vec![0.0, 2.5, 2.5]);
        assert!(uniform_quantize(&m, 3).bits_eq(&m));
        let z: Tensor<f64> = Tensor::zeros(&[4]);
        assert!(uniform_quantize(&z, 2).bits_eq(&z));
    }

    #[test]
    fn feasibility_predicates() {
        let mut m = vec_model(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(!is_feasible_sparsity(&m, 4));
        project_topk_global(&mut m, 4);
        assert!(is_feasible_sparsity(&m, 4));
        // 4 distinct nonzeros need bits >= 2.
        assert!(is_feasible_quant(&m, 2));
        m.layers[0].c = Tensor::new(
            m.layers[0].c.shape().to_vec(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
        )
        .unwrap();
        assert!(!is_feasible_quant(&m, 2));
        assert!(is_feasible_quant(&m, 3));
        assert!(is_feasible_quant(&m, 32));
    }
}
