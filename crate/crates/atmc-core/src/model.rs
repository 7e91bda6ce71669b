//! Networks whose weight matrices carry a compound factorized structure
//! W = U*V + C, with U square.
//!
//! Every layer (conv or fully-connected) is treated as a single weight matrix
//! acting on its input; conv weights are the [F, C*kh*kw] im2col matrix.
//! Storage is orientation-normalized so the stored matrix is m x n with
//! m >= n (transposing when the raw layer is wider than tall), which keeps U
//! the square factor on the larger side.
//!
//! Two storage modes exist:
//! - factorized (`uses_factors = true`): U, V, C all live; W = U*V + C.
//! - plain dense (`uses_factors = false`): U and V are all-zero and skipped
//!   in the forward pass; the dense weight is carried entirely in C. This is
//!   what the unfactorized training pipelines use, and it makes parameter
//!   accounting identical across pipelines (biases are never counted).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtmcError, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::kernels;
use crate::tensor::{Element, Tensor};

/// One architectural block. Conv blocks may attach a max-pool and ReLU;
/// the weight matrix of a conv is its im2col form [out_channels, C*k*k].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
        pool: Option<(usize, usize)>,
    },
    Fc {
        out: usize,
        relu: bool,
    },
}

/// Network shape: input planes and the block list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub blocks: Vec<Block>,
}

/// Raw (unnormalized) shape of one layer's weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawShape {
    pub rows: usize,
    pub cols: usize,
}

impl ArchitectureSpec {
    /// Classic 4-layer LeNet: conv 20@5, pool 2; conv 50@5, pool 2;
    /// fc 800-500 with ReLU; fc 500-10. 430,500 weights.
    pub fn lenet() -> Self {
        ArchitectureSpec {
            name: "lenet".to_string(),
            input: (1, 28, 28),
            classes: 10,
            blocks: vec![
                Block::Conv {
                    out_channels: 20,
                    kernel: 5,
                    stride: 1,
                    pad: 0,
                    relu: false,
                    pool: Some((2, 2)),
                },
                Block::Conv {
                    out_channels: 50,
                    kernel: 5,
                    stride: 1,
                    pad: 0,
                    relu: false,
                    pool: Some((2, 2)),
                },
                Block::Fc { out: 500, relu: true },
                Block::Fc { out: 10, relu: false },
            ],
        }
    }

    /// Two-layer MLP on 8x8 inputs, for fast tests.
    pub fn mlp_small() -> Self {
        ArchitectureSpec {
            name: "mlp-small".to_string(),
            input: (1, 8, 8),
            classes: 4,
            blocks: vec![
                Block::Fc { out: 32, relu: true },
                Block::Fc { out: 4, relu: false },
            ],
        }
    }

    /// Small conv net on 28x28 inputs.
    pub fn conv_small() -> Self {
        ArchitectureSpec {
            name: "conv-small".to_string(),
            input: (1, 28, 28),
            classes: 10,
            blocks: vec![
                Block::Conv {
                    out_channels: 6,
                    kernel: 5,
                    stride: 2,
                    pad: 0,
                    relu: false,
                    pool: Some((2, 2)),
                },
                Block::Fc { out: 32, relu: true },
                Block::Fc { out: 10, relu: false },
            ],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "lenet" => Some(Self::lenet()),
            "mlp-small" => Some(Self::mlp_small()),
            "conv-small" => Some(Self::conv_small()),
            _ => None,
        }
    }

    /// Raw weight shapes per layer, validating the geometry along the way.
    pub fn layer_shapes(&self) -> Result<Vec<RawShape>> {
        let (mut c, mut h, mut w) = self.input;
        let mut flat: Option<usize> = None;
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            match *block {
                Block::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    pool,
                    ..
                } => {
                    if flat.is_some() {
                        return Err(AtmcError::InvalidConfig(format!(
                            "block {}: conv after fc is unsupported",
                            bi
                        )));
                    }
                    let oh = kernels::conv_out_size(h, kernel, stride, pad).ok_or(
                        AtmcError::BadConvGeometry {
                            h,
                            w,
                            k: kernel,
                            stride,
                            pad,
                        },
                    )?;
                    let ow = kernels::conv_out_size(w, kernel, stride, pad).ok_or(
                        AtmcError::BadConvGeometry {
                            h,
                            w,
                            k: kernel,
                            stride,
                            pad,
                        },
                    )?;
                    shapes.push(RawShape {
                        rows: out_channels,
                        cols: c * kernel * kernel,
                    });
                    c = out_channels;
                    h = oh;
                    w = ow;
                    if let Some((pk, ps)) = pool {
                        h = kernels::conv_out_size(h, pk, ps, 0).ok_or(
                            AtmcError::BadConvGeometry {
                                h,
                                w,
                                k: pk,
                                stride: ps,
                                pad: 0,
                            },
                        )?;
                        w = kernels::conv_out_size(w, pk, ps, 0).ok_or(
                            AtmcError::BadConvGeometry {
                                h,
                                w,
                                k: pk,
                                stride: ps,
                                pad: 0,
                            },
                        )?;
                    }
                }
                Block::Fc { out, .. } => {
                    let in_dim = flat.unwrap_or(c * h * w);
                    shapes.push(RawShape { rows: out, cols: in_dim });
                    flat = Some(out);
                }
            }
        }
        match self.blocks.last() {
            Some(Block::Fc { out, .. }) if *out == self.classes => Ok(shapes),
            _ => Err(AtmcError::InvalidConfig(format!(
                "architecture {:?} must end in an fc block with out == classes",
                self.name
            ))),
        }
    }

    /// Total weight count of the plain dense network (biases excluded).
    pub fn dense_param_count(&self) -> Result<usize> {
        Ok(self
            .layer_shapes()?
            .iter()
            .map(|s| s.rows * s.cols)
            .sum())
    }
}

/// One layer's parameters: square factor U [m,m], V [m,n], additive C [m,n],
/// and an uncompressed bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTriple<E> {
    pub u: Tensor<E>,
    pub v: Tensor<E>,
    pub c: Tensor<E>,
    pub bias: Tensor<E>,
    /// Storage holds the transpose of the raw [rows, cols] layer matrix.
    pub transposed: bool,
    /// When false, U and V are all-zero and the dense weight lives in C.
    pub uses_factors: bool,
}

impl<E: Element> ParamTriple<E> {
    pub fn m(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.c.shape()[1]
    }

    /// U*V + C in storage orientation (just C for plain dense layers).
    pub fn effective_weight(&self) -> Tensor<E> {
        if !self.uses_factors {
            return self.c.clone();
        }
        let (m, n) = (self.m(), self.n());
        let mut out = self.c.clone();
        kernels::mm_nn_acc(self.u.data(), self.v.data(), out.data_mut(), m, m, n);
        out
    }

    /// Effective weight in raw [rows, cols] orientation.
    pub fn raw_weight(&self) -> Tensor<E> {
        let w = self.effective_weight();
        if self.transposed {
            w.transpose2d()
        } else {
            w
        }
    }

    pub fn nnz(&self) -> usize {
        count_l0(&self.u) + count_l0(&self.v) + count_l0(&self.c)
    }
}

/// Number of nonzero entries (negative zero counts as zero).
pub fn count_l0<E: Element>(m: &Tensor<E>) -> usize {
    m.data().iter().filter(|&&v| v != E::zero()).count()
}

/// Number of distinct nonzero values, compared by exact bit pattern.
pub fn count_distinct_nonzero<E: Element>(m: &Tensor<E>) -> usize {
    let mut bits: Vec<u64> = m
        .data()
        .iter()
        .filter(|&&v| v != E::zero())
        .map(|&v| v.as_f64().to_bits())
        .collect();
    bits.sort_unstable();
    bits.dedup();
    bits.len()
}

/// Per-layer graph handles for gradient extraction after backward.
pub struct LayerVars {
    pub u: Option<Var>,
    pub v: Option<Var>,
    pub c: Var,
    pub bias: Var,
}

/// Ordered layer parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<E> {
    pub arch: ArchitectureSpec,
    pub layers: Vec<ParamTriple<E>>,
}

impl<E: Element> ModelParams<E> {
    /// Factorized init: U = I, V = W0, C = 0, so the initial network computes
    /// exactly the same function as a conventionally initialized dense one.
    pub fn init_factorized(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::init_with(arch, seed, true)
    }

    /// Plain dense init: the weight lives in C, U and V stay zero.
    pub fn init_dense(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::init_with(arch, seed, false)
    }

    fn init_with(arch: &ArchitectureSpec, seed: u64, factorized: bool) -> Result<Self> {
        let shapes = arch.layer_shapes()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(shapes.len());
        for s in &shapes {
            // Fan-in scaled uniform init, drawn in raw orientation.
            let bound = 1.0 / (s.cols as f64).sqrt();
            let w0: Tensor<E> =
                Tensor::random_uniform(&[s.rows, s.cols], -bound, bound, &mut rng);
            let transposed = s.rows < s.cols;
            let stored = if transposed { w0.transpose2d() } else { w0 };
            let (m, n) = (stored.shape()[0], stored.shape()[1]);
            let layer = if factorized {
                ParamTriple {
                    u: Tensor::eye(m),
                    v: stored,
                    c: Tensor::zeros(&[m, n]),
                    bias: Tensor::zeros(&[s.rows]),
                    transposed,
                    uses_factors: true,
                }
            } else {
                ParamTriple {
                    u: Tensor::zeros(&[m, m]),
                    v: Tensor::zeros(&[m, n]),
                    c: stored,
                    bias: Tensor::zeros(&[s.rows]),
                    transposed,
                    uses_factors: false,
                }
            };
            layers.push(layer);
        }
        Ok(ModelParams {
            arch: arch.clone(),
            layers,
        })
    }

    /// Same shapes, all matrices and biases zero (used for ADMM duals).
    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|t| ParamTriple {
                u: Tensor::zeros(t.u.shape()),
                v: Tensor::zeros(t.v.shape()),
                c: Tensor::zeros(t.c.shape()),
                bias: Tensor::zeros(t.bias.shape()),
                transposed: t.transposed,
                uses_factors: t.uses_factors,
            })
            .collect();
        ModelParams {
            arch: self.arch.clone(),
            layers,
        }
    }

    /// Sum of nonzero counts over every U, V, C (biases excluded).
    pub fn total_nnz(&self) -> usize {
        self.layers.iter().map(|t| t.nnz()).sum()
    }

    /// All compressible matrices in canonical order: layer ascending, U, V, C.
    pub fn matrices(&self) -> impl Iterator<Item = &Tensor<E>> {
        self.layers.iter().flat_map(|t| [&t.u, &t.v, &t.c])
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Tensor<E>> {
        self.layers.iter_mut().flat_map(|t| [&mut t.u, &mut t.v, &mut t.c])
    }

    pub fn matrix_count(&self) -> usize {
        self.layers.len() * 3
    }

    /// Record the forward pass on `g` starting from the already-inserted
    /// input var. When `train_params` is set, every parameter leaf requires
    /// gradients and the returned handles can be used to read them back.
    pub fn forward_graph(
        &self,
        g: &mut Graph<E>,
        x: Var,
        train_params: bool,
    ) -> Result<(Var, Vec<LayerVars>)> {
        let mut cur = x;
        let mut flat = false;
        let mut vars = Vec::with_capacity(self.layers.len());
        for (block, t) in self.arch.blocks.iter().zip(self.layers.iter()) {
            // Stored-orientation weight, with gradients flowing to the factors.
            let (w_stored, lv_partial) = if t.uses_factors {
                let u = g.leaf(t.u.clone(), train_params);
                let v = g.leaf(t.v.clone(), train_params);
                let c = g.leaf(t.c.clone(), train_params);
                let uv = g.matmul(u, v)?;
                let w = g.add(uv, c)?;
                (w, (Some(u), Some(v), c))
            } else {
                let c = g.leaf(t.c.clone(), train_params);
                (c, (None, None, c))
            };
            let bias = g.leaf(t.bias.clone(), train_params);
            vars.push(LayerVars {
                u: lv_partial.0,
                v: lv_partial.1,
                c: lv_partial.2,
                bias,
            });
            match *block {
                Block::Conv {
                    kernel,
                    stride,
                    pad,
                    relu,
                    pool,
                    ..
                } => {
                    let w_raw = if t.transposed { g.transpose(w_stored) } else { w_stored };
                    cur = g.conv2d(cur, w_raw, kernel, kernel, stride, pad)?;
                    cur = g.add_bias(cur, bias)?;
                    if relu {
                        cur = g.relu(cur);
                    }
                    if let Some((pk, ps)) = pool {
                        cur = g.maxpool2d(cur, pk, ps)?;
                    }
                }
                Block::Fc { relu, .. } => {
                    if !flat {
                        let n = g.value(cur).shape()[0];
                        let d: usize = g.value(cur).shape()[1..].iter().product();
                        cur = g.reshape(cur, &[n, d])?;
                        flat = true;
                    }
                    // Need [in, out] for x * W^T; stored orientation already
                    // is that when the raw layer was wider than tall.
                    let w_mm = if t.transposed { w_stored } else { g.transpose(w_stored) };
                    cur = g.matmul(cur, w_mm)?;
                    cur = g.add_bias(cur, bias)?;
                    if relu {
                        cur = g.relu(cur);
                    }
                }
            }
        }
        Ok((cur, vars))
    }

    /// Logits for a batch, no gradient bookkeeping.
    pub fn logits(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_graph(&mut g, xv, false)?;
        Ok(g.value(out).clone())
    }

    /// Mean cross-entropy of a batch under the current parameters.
    pub fn mean_loss(&self, x: &Tensor<E>, y: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (logits, _) = self.forward_graph(&mut g, xv, false)?;
        let loss = g.softmax_cross_entropy(logits, y, Reduction::Mean)?;
        Ok(g.value(loss).item().as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_dense_count_matches_known_figure() {
        let arch = ArchitectureSpec::lenet();
        assert_eq!(arch.dense_param_count().unwrap(), 430_500);
    }

    #[test]
    fn count_semantics() {
        let m = Tensor::from_vec(vec![0.0, 1.0, 4.0, 1.0]);
        assert_eq!(count_l0(&m), 3);
        assert_eq!(count_distinct_nonzero(&m), 2);

        let z: Tensor<f64> = Tensor::zeros(&[4]);
        assert_eq!(count_l0(&z), 0);
        assert_eq!(count_distinct_nonzero(&z), 0);

        // Distinctness is exact bit equality: adjacent representable values
        // stay distinct, no tolerance is applied.
        let close = Tensor::from_vec(vec![2.0, f64::from_bits(2.0f64.to_bits() + 1)]);
        assert_eq!(count_distinct_nonzero(&close), 2);

        // Negative zero counts as zero.
        let nz = Tensor::from_vec(vec![-0.0, 3.0]);
        assert_eq!(count_l0(&nz), 1);
    }

    #[test]
    fn effective_weight_identity_factorization() {
        let arch = ArchitectureSpec::mlp_small();
        let model: ModelParams<f64> = ModelParams::init_factorized(&arch, 1).unwrap();
        for t in &model.layers {
            // U = I, C = 0 at init, so W == V exactly.
            assert!(t.effective_weight().bits_eq(&t.v));
        }
    }

    #[test]
    fn effective_weight_zero_u_returns_c() {
        let mut t = ParamTriple {
            u: Tensor::<f64>::zeros(&[2, 2]),
            v: Tensor::from_vec(vec![9.0, 9.0, 9.0, 9.0]).reshape(&[2, 2]).unwrap(),
            c: Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]).reshape(&[2, 2]).unwrap(),
            bias: Tensor::zeros(&[2]),
            transposed: false,
            uses_factors: true,
        };
        assert!(t.effective_weight().bits_eq(&t.c));
        t.uses_factors = false;
        assert!(t.effective_weight().bits_eq(&t.c));
    }

    #[test]
    fn effective_weight_matches_dense_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let (m, n) = (5, 3);
        let u: Tensor<f64> = Tensor::random_uniform(&[m, m], -1.0, 1.0, &mut rng);
        let v: Tensor<f64> = Tensor::random_uniform(&[m, n], -1.0, 1.0, &mut rng);
        let c: Tensor<f64> = Tensor::random_uniform(&[m, n], -1.0, 1.0, &mut rng);
        let t = ParamTriple {
            u: u.clone(),
            v: v.clone(),
            c: c.clone(),
            bias: Tensor::zeros(&[n]),
            transposed: false,
            uses_factors: true,
        };
        let w = t.effective_weight();
        for i in 0..m {
            for j in 0..n {
                let mut want = c.data()[i * n + j];
                for l in 0..m {
                    want += u.data()[i * m + l] * v.data()[l * n + j];
                }
                assert_eq!(w.data()[i * n + j], want);
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = ArchitectureSpec::mlp_small();
        let a: ModelParams<f64> = ModelParams::init_factorized(&arch, 42).unwrap();
        let b: ModelParams<f64> = ModelParams::init_factorized(&arch, 42).unwrap();
        let c: ModelParams<f64> = ModelParams::init_factorized(&arch, 43).unwrap();
        for (ta, tb) in a.layers.iter().zip(b.layers.iter()) {
            assert!(ta.v.bits_eq(&tb.v));
        }
        assert!(a.layers.iter().zip(c.layers.iter()).any(|(ta, tc)| !ta.v.bits_eq(&tc.v)));
    }

    #[test]
    fn orientation_is_normalized() {
        let arch = ArchitectureSpec::lenet();
        let model: ModelParams<f64> = ModelParams::init_factorized(&arch, 0).unwrap();
        for t in &model.layers {
            assert!(t.m() >= t.n());
        }
        // conv1 raw is [20, 25]: stored transposed as [25, 20].
        assert!(model.layers[0].transposed);
        assert_eq!(model.layers[0].c.shape(), &[25, 20]);
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = ArchitectureSpec::conv_small();
        let model: ModelParams<f64> = ModelParams::init_factorized(&arch, 5).unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let x: Tensor<f64> = Tensor::random_uniform(&[2, 1, 28, 28], 0.0, 1.0, &mut rng);
        let a = model.logits(&x).unwrap();
        let b = model.logits(&x).unwrap();
        assert!(a.bits_eq(&b));
        assert_eq!(a.shape(), &[2, 10]);
    }

    #[test]
    fn total_nnz_sums_per_matrix_counts() {
        let arch = ArchitectureSpec::mlp_small();
        let model: ModelParams<f64> = ModelParams::init_factorized(&arch, 3).unwrap();
        let direct: usize = model.matrices().map(count_l0).sum();
        assert_eq!(model.total_nnz(), direct);
        // U = I contributes m per layer; V is dense; C is zero.
        let shapes = arch.layer_shapes().unwrap();
        let expect: usize = shapes
            .iter()
            .map(|s| s.rows.max(s.cols) + s.rows * s.cols)
            .sum();
        assert_eq!(model.total_nnz(), expect);
    }
}
