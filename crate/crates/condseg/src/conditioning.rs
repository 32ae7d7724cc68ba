//! Channel-modulation conditioning blocks.
//!
//! All four blocks share one skeleton: a two-layer bottleneck (ReLU after
//! the first layer) whose output recalibrates the feature maps
//! channel-wise. They differ only in what feeds the bottleneck and how
//! its output is applied:
//!
//! - **SE**: input is the globally average-pooled channel vector; output
//!   goes through a sigmoid and multiplies the channels. Metadata-free.
//! - **ME**: the pooled vector is replaced entirely by the encoded
//!   metadata vector; the gate is a function of metadata alone.
//! - **SME**: pooled vector and metadata are concatenated (pooled part
//!   first), letting the network weigh both sources.
//! - **FiLM**: metadata predicts a per-channel affine `gamma * x + beta`
//!   with no sigmoid, applied at the same network positions as the
//!   gating blocks so the comparison isolates the mechanism.
//!
//! Hidden width is `max(1, channels / 4)` (integer division).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::ops;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningKind {
    None,
    Se,
    Me,
    Sme,
    Film,
}

impl ConditioningKind {
    /// Whether the block consumes a metadata vector.
    pub fn uses_metadata(self) -> bool {
        matches!(
            self,
            ConditioningKind::Me | ConditioningKind::Sme | ConditioningKind::Film
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningKind::None => "none",
            ConditioningKind::Se => "se",
            ConditioningKind::Me => "me",
            ConditioningKind::Sme => "sme",
            ConditioningKind::Film => "film",
        }
    }
}

impl std::fmt::Display for ConditioningKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConditioningKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ConditioningKind::None),
            "se" => Ok(ConditioningKind::Se),
            "me" => Ok(ConditioningKind::Me),
            "sme" => Ok(ConditioningKind::Sme),
            "film" => Ok(ConditioningKind::Film),
            other => Err(Error::InvalidConfig(format!(
                "unknown conditioning kind {other:?} (expected none|se|me|sme|film)"
            ))),
        }
    }
}

/// Hidden width rule shared by every block: a quarter of the channel
/// count, floored at 1 for tiny stages.
pub fn hidden_width(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// One conditioning block instance bound to a channel width.
///
/// `ConditioningKind::None` carries no parameters and passes inputs
/// through unchanged.
#[derive(Debug, Clone)]
pub struct ConditioningBlock {
    pub kind: ConditioningKind,
    pub channels: usize,
    pub meta_dim: usize,
    pub hidden: usize,
    fc: Option<BlockParams>,
}

#[derive(Debug, Clone)]
struct BlockParams {
    fc1_weight: ParamId,
    fc1_bias: ParamId,
    fc2_weight: ParamId,
    fc2_bias: ParamId,
}

impl ConditioningBlock {
    /// Build and register a block's parameters under `prefix`.
    ///
    /// fc1 input width: SE -> C, ME -> M, SME -> C + M, FiLM -> M.
    /// fc2 output width: C for the gating kinds, 2C for FiLM.
    /// Initialization: Kaiming-uniform fc1, Xavier-uniform fc2, zero
    /// biases; FiLM fc2 is zero with bias `[1,...,1, 0,...,0]` so that it
    /// starts as the identity transform.
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        kind: ConditioningKind,
        channels: usize,
        meta_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kind.uses_metadata() && meta_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "conditioning kind {kind} requires meta_dim > 0"
            )));
        }
        let hidden = hidden_width(channels);
        let fc = match kind {
            ConditioningKind::None => None,
            _ => {
                let in_dim = match kind {
                    ConditioningKind::Se => channels,
                    ConditioningKind::Me | ConditioningKind::Film => meta_dim,
                    ConditioningKind::Sme => channels + meta_dim,
                    ConditioningKind::None => unreachable!(),
                };
                let out_dim = match kind {
                    ConditioningKind::Film => 2 * channels,
                    _ => channels,
                };
                let mut fc1_value: Tensor<S> = init::kaiming_uniform(rng, &[hidden, in_dim], in_dim);
                if kind == ConditioningKind::Sme {
                    // Start the metadata columns small: the squeeze
                    // pathway carries the majority behaviour from the
                    // first steps, and metadata influence grows only
                    // where gradients call for it. Keeps the dummy
                    // (all-zeros) mode close to the dominant task.
                    let scale = S::from_f64(0.1);
                    for row in 0..hidden {
                        for col in channels..in_dim {
                            let v = &mut fc1_value.data_mut()[row * in_dim + col];
                            *v = *v * scale;
                        }
                    }
                }
                let fc1_weight = params.add(format!("{prefix}.fc1.weight"), fc1_value);
                let fc1_bias = params.add(format!("{prefix}.fc1.bias"), Tensor::zeros(&[hidden]));
                let fc2_value = if kind == ConditioningKind::Film {
                    Tensor::zeros(&[out_dim, hidden])
                } else {
                    init::xavier_uniform(rng, &[out_dim, hidden], hidden, out_dim)
                };
                let fc2_weight = params.add(format!("{prefix}.fc2.weight"), fc2_value);
                let fc2_bias_value = if kind == ConditioningKind::Film {
                    let mut v = Tensor::zeros(&[out_dim]);
                    v.data_mut()[..channels].fill(S::one());
                    v
                } else {
                    Tensor::zeros(&[out_dim])
                };
                let fc2_bias = params.add(format!("{prefix}.fc2.bias"), fc2_bias_value);
                Some(BlockParams {
                    fc1_weight,
                    fc1_bias,
                    fc2_weight,
                    fc2_bias,
                })
            }
        };
        Ok(ConditioningBlock {
            kind,
            channels,
            meta_dim,
            hidden,
            fc,
        })
    }

    /// Scalar parameters contributed by one block of this configuration
    /// (used by the closed-form model-size oracle).
    pub fn param_count(kind: ConditioningKind, channels: usize, meta_dim: usize) -> usize {
        let hidden = hidden_width(channels);
        let in_dim = match kind {
            ConditioningKind::None => return 0,
            ConditioningKind::Se => channels,
            ConditioningKind::Me | ConditioningKind::Film => meta_dim,
            ConditioningKind::Sme => channels + meta_dim,
        };
        let out_dim = match kind {
            ConditioningKind::Film => 2 * channels,
            _ => channels,
        };
        hidden * in_dim + hidden + out_dim * hidden + out_dim
    }

    fn check_inputs<S: Scalar>(
        &self,
        tape: &Tape<S>,
        x: NodeId,
        meta: Option<NodeId>,
    ) -> Result<()> {
        let xs = tape.value(x).shape();
        if xs.len() != 4 || xs[1] != self.channels {
            return Err(Error::shape(
                "conditioning",
                format!("expected [B, {}, H, W] input, got {:?}", self.channels, xs),
            ));
        }
        match (self.kind.uses_metadata(), meta) {
            (true, None) => Err(Error::invalid(
                "conditioning",
                format!("kind {} requires a metadata vector", self.kind),
            )),
            (false, Some(_)) => Err(Error::invalid(
                "conditioning",
                format!("kind {} does not accept metadata", self.kind),
            )),
            (true, Some(m)) => {
                let batch = xs[0];
                let ms = tape.value(m).shape();
                if ms.len() != 2 || ms[1] != self.meta_dim {
                    return Err(Error::shape(
                        "conditioning",
                        format!("expected [B, {}] metadata, got {:?}", self.meta_dim, ms),
                    ));
                }
                if ms[0] != batch {
                    return Err(Error::shape(
                        "conditioning",
                        format!("metadata batch {} != input batch {}", ms[0], batch),
                    ));
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }

    /// Bottleneck input per kind: pooled channels, metadata, or their
    /// concatenation (pooled part first).
    fn bottleneck_input<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        meta: Option<NodeId>,
    ) -> Result<NodeId> {
        match self.kind {
            ConditioningKind::Se => ops::global_avg_pool(tape, x),
            ConditioningKind::Me | ConditioningKind::Film => Ok(meta.expect("checked")),
            ConditioningKind::Sme => {
                let squeezed = ops::global_avg_pool(tape, x)?;
                ops::concat_vec(tape, squeezed, meta.expect("checked"))
            }
            ConditioningKind::None => unreachable!(),
        }
    }

    fn bottleneck<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        input: NodeId,
    ) -> Result<NodeId> {
        let fc = self.fc.as_ref().expect("parameterized kind");
        let w1 = tape.param(params, fc.fc1_weight);
        let b1 = tape.param(params, fc.fc1_bias);
        let h = ops::linear(tape, input, w1, b1)?;
        let h = ops::relu(tape, h);
        let w2 = tape.param(params, fc.fc2_weight);
        let b2 = tape.param(params, fc.fc2_bias);
        ops::linear(tape, h, w2, b2)
    }

    /// Sigmoid gate vector `[B, C]` for the gating kinds (SE/ME/SME).
    pub fn gate<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        x: NodeId,
        meta: Option<NodeId>,
    ) -> Result<NodeId> {
        assert!(
            matches!(
                self.kind,
                ConditioningKind::Se | ConditioningKind::Me | ConditioningKind::Sme
            ),
            "gate() is defined for the gating kinds only"
        );
        self.check_inputs(tape, x, meta)?;
        let input = self.bottleneck_input(tape, x, meta)?;
        let raw = self.bottleneck(tape, params, input)?;
        Ok(ops::sigmoid(tape, raw))
    }

    /// FiLM affine coefficients `(gamma, beta)`, each `[B, C]`, with no
    /// sigmoid applied.
    pub fn film_coefficients<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        meta: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        assert_eq!(self.kind, ConditioningKind::Film);
        let raw = self.bottleneck(tape, params, meta)?;
        let gamma = ops::slice_cols(tape, raw, 0, self.channels)?;
        let beta = ops::slice_cols(tape, raw, self.channels, 2 * self.channels)?;
        Ok((gamma, beta))
    }

    /// Apply the block to feature maps `x: [B, C, H, W]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        x: NodeId,
        meta: Option<NodeId>,
    ) -> Result<NodeId> {
        self.check_inputs(tape, x, meta)?;
        match self.kind {
            ConditioningKind::None => Ok(x),
            ConditioningKind::Se | ConditioningKind::Me | ConditioningKind::Sme => {
                let gate = self.gate(tape, params, x, meta)?;
                ops::channel_scale(tape, x, gate)
            }
            ConditioningKind::Film => {
                let (gamma, beta) =
                    self.film_coefficients(tape, params, meta.expect("checked"))?;
                let scaled = ops::channel_scale(tape, x, gamma)?;
                ops::channel_bias(tape, scaled, beta)
            }
        }
    }
}
