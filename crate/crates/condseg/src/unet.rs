//! Conditioned U-Net: encoder-decoder segmentation with one conditioning
//! block per stage.
//!
//! Stage layout for `depth = 3`, `base_channels = 16`:
//!
//! ```text
//! enc0  in -> 16   double conv, cond, maxpool   -- skip 0
//! enc1  16 -> 32   double conv, cond, maxpool   -- skip 1
//! enc2  32 -> 64   double conv, cond, maxpool   -- skip 2
//! bott  64 -> 128  double conv, cond
//! dec2  up, 3x3 conv 128 -> 64, concat skip 2, double conv, cond
//! dec1  up, 3x3 conv 64 -> 32,  concat skip 1, double conv, cond
//! dec0  up, 3x3 conv 32 -> 16,  concat skip 0, double conv, cond
//! head  1x1 conv 16 -> out_channels (logits, no activation)
//! ```
//!
//! Upsampling is nearest-neighbour followed by a 3x3 convolution; there
//! is no normalization anywhere. Every conditioning block receives the
//! same metadata vector. Skip connections take the conditioned stage
//! output (pre-pool); decoder concatenation is up-path first, skip
//! second.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningBlock, ConditioningKind};
use crate::error::{Error, Result};
use crate::init;
use crate::ops::{self, Padding};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conditioning: ConditioningKind,
    pub meta_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 16,
            in_channels: 1,
            out_channels: 1,
            conditioning: ConditioningKind::None,
            meta_dim: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::InvalidConfig("base_channels must be >= 4".into()));
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::InvalidConfig(
                "in_channels and out_channels must be >= 1".into(),
            ));
        }
        if self.conditioning.uses_metadata() {
            if self.meta_dim == 0 {
                return Err(Error::InvalidConfig(format!(
                    "conditioning {} requires meta_dim > 0",
                    self.conditioning
                )));
            }
        } else if self.meta_dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "conditioning {} is metadata-free; set meta_dim = 0",
                self.conditioning
            )));
        }
        Ok(())
    }

    /// Channel width of encoder/decoder stage `i` (0-based).
    fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    /// Closed-form scalar parameter count for this configuration,
    /// independent of construction (model-size oracle).
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let cond = |c: usize| {
            ConditioningBlock::param_count(self.conditioning, c, self.meta_dim)
        };
        let mut total = 0;
        for i in 0..self.depth {
            let cin = if i == 0 {
                self.in_channels
            } else {
                self.stage_channels(i - 1)
            };
            let c = self.stage_channels(i);
            total += conv(cin, c, 3) + conv(c, c, 3) + cond(c);
        }
        let cb = self.bottleneck_channels();
        total += conv(self.stage_channels(self.depth - 1), cb, 3) + conv(cb, cb, 3) + cond(cb);
        for i in (0..self.depth).rev() {
            let c = self.stage_channels(i);
            let deeper = if i + 1 == self.depth {
                cb
            } else {
                self.stage_channels(i + 1)
            };
            total += conv(deeper, c, 3); // up conv
            total += conv(2 * c, c, 3) + conv(c, c, 3) + cond(c);
        }
        total += conv(self.base_channels, self.out_channels, 1);
        total
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
        head: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight_value = if head {
            init::xavier_uniform(rng, &[cout, cin, k, k], fan_in, cout)
        } else {
            init::kaiming_uniform(rng, &[cout, cin, k, k], fan_in)
        };
        let weight = params.add(format!("{prefix}.weight"), weight_value);
        let bias = params.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
        ConvLayer { weight, bias }
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        ops::conv2d(tape, x, w, b, Padding::Same, 1)
    }
}

/// Double conv + conditioning.
#[derive(Debug, Clone)]
struct Stage {
    conv1: ConvLayer,
    conv2: ConvLayer,
    cond: ConditioningBlock,
}

impl Stage {
    fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        cin: usize,
        cout: usize,
        cfg: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Stage {
            conv1: ConvLayer::new(params, &format!("{prefix}.conv1"), cin, cout, 3, rng, false),
            conv2: ConvLayer::new(params, &format!("{prefix}.conv2"), cout, cout, 3, rng, false),
            cond: ConditioningBlock::new(
                params,
                &format!("{prefix}.cond"),
                cfg.conditioning,
                cout,
                cfg.meta_dim,
                rng,
            )?,
        })
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        x: NodeId,
        meta: Option<NodeId>,
    ) -> Result<NodeId> {
        let x = self.conv1.forward(tape, params, x)?;
        let x = ops::relu(tape, x);
        let x = self.conv2.forward(tape, params, x)?;
        let x = ops::relu(tape, x);
        self.cond.forward(tape, params, x, meta)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up_conv: ConvLayer,
    stage: Stage,
}

/// The network. Owns its parameters; the structure only holds ids.
#[derive(Debug, Clone)]
pub struct ConditionedUNet<S: Scalar> {
    config: UNetConfig,
    params: ParamSet<S>,
    encoder: Vec<Stage>,
    bottleneck: Stage,
    decoder: Vec<DecoderStage>,
    head: ConvLayer,
}

impl<S: Scalar> ConditionedUNet<S> {
    /// Deterministic construction: the same seed yields bit-identical
    /// initial parameters and stable parameter names.
    pub fn build(config: UNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut encoder = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let cin = if i == 0 {
                config.in_channels
            } else {
                config.stage_channels(i - 1)
            };
            encoder.push(Stage::new(
                &mut params,
                &format!("enc{i}"),
                cin,
                config.stage_channels(i),
                &config,
                rng,
            )?);
        }
        let bottleneck = Stage::new(
            &mut params,
            "bottleneck",
            config.stage_channels(config.depth - 1),
            config.bottleneck_channels(),
            &config,
            rng,
        )?;
        let mut decoder = Vec::with_capacity(config.depth);
        for i in (0..config.depth).rev() {
            let c = config.stage_channels(i);
            let deeper = if i + 1 == config.depth {
                config.bottleneck_channels()
            } else {
                config.stage_channels(i + 1)
            };
            decoder.push(DecoderStage {
                up_conv: ConvLayer::new(
                    &mut params,
                    &format!("dec{i}.up"),
                    deeper,
                    c,
                    3,
                    rng,
                    false,
                ),
                stage: Stage::new(&mut params, &format!("dec{i}"), 2 * c, c, &config, rng)?,
            });
        }
        let head = ConvLayer::new(
            &mut params,
            "head",
            config.base_channels,
            config.out_channels,
            1,
            rng,
            true,
        );
        Ok(ConditionedUNet {
            config,
            params,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Every conditioning block, encoder first, then bottleneck, then
    /// decoder in application order.
    pub fn conditioning_blocks(&self) -> Vec<&ConditioningBlock> {
        let mut blocks: Vec<_> = self.encoder.iter().map(|s| &s.cond).collect();
        blocks.push(&self.bottleneck.cond);
        blocks.extend(self.decoder.iter().map(|d| &d.stage.cond));
        blocks
    }

    /// Rebuild this model with `f64` parameters (gradient checking).
    pub fn cast<T: Scalar>(&self) -> ConditionedUNet<T> {
        ConditionedUNet {
            config: self.config,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    fn check_forward_inputs(&self, image: &Tensor<S>, meta: Option<&Tensor<S>>) -> Result<()> {
        image.expect_rank("unet_forward", 4)?;
        let (b, c, h, w) = (
            image.shape()[0],
            image.shape()[1],
            image.shape()[2],
            image.shape()[3],
        );
        if c != self.config.in_channels {
            return Err(Error::shape(
                "unet_forward",
                format!("expected {} input channels, got {c}", self.config.in_channels),
            ));
        }
        let div = 1 << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "unet_forward",
                format!("spatial size {h}x{w} not divisible by 2^depth = {div}"),
            ));
        }
        match (self.config.conditioning.uses_metadata(), meta) {
            (true, None) => Err(Error::invalid(
                "unet_forward",
                format!("conditioning {} requires metadata", self.config.conditioning),
            )),
            (false, Some(_)) => Err(Error::invalid(
                "unet_forward",
                format!(
                    "conditioning {} rejects metadata at the interface",
                    self.config.conditioning
                ),
            )),
            (true, Some(m)) => {
                if m.shape() != [b, self.config.meta_dim] {
                    return Err(Error::shape(
                        "unet_forward",
                        format!(
                            "expected metadata [{}fields, {}], got {:?}",
                            b,
                            self.config.meta_dim,
                            m.shape()
                        ),
                    ));
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }

    /// Forward pass producing logits `[B, out_channels, H, W]` on the
    /// given tape. All conditioning blocks see the same metadata node.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        image: &Tensor<S>,
        meta: Option<&Tensor<S>>,
    ) -> Result<NodeId> {
        self.check_forward_inputs(image, meta)?;
        let x = tape.leaf(image.clone());
        let meta_node = meta.map(|m| tape.leaf(m.clone()));
        self.forward_from(tape, x, meta_node)
    }

    /// Forward from nodes already on the tape (gradient checks perturb
    /// the image or metadata leaf directly).
    pub fn forward_from(
        &self,
        tape: &mut Tape<S>,
        image: NodeId,
        meta: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut x = image;
        let mut skips = Vec::with_capacity(self.config.depth);
        for stage in &self.encoder {
            let conditioned = stage.forward(tape, &self.params, x, meta)?;
            skips.push(conditioned);
            x = ops::maxpool2(tape, conditioned)?;
        }
        x = self.bottleneck.forward(tape, &self.params, x, meta)?;
        for (d, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = ops::upsample_nearest2(tape, x)?;
            let up = d.up_conv.forward(tape, &self.params, up)?;
            let up = ops::relu(tape, up);
            let merged = ops::concat_channels(tape, up, *skip)?;
            x = d.stage.forward(tape, &self.params, merged, meta)?;
        }
        self.head.forward(tape, &self.params, x)
    }

    /// Forward pass returning the logits tensor (inference).
    pub fn logits(&self, image: &Tensor<S>, meta: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, image, meta)?;
        Ok(tape.value(out).clone())
    }

    /// Binary mask: `sigmoid(logit) >= threshold` per pixel (ties count
    /// as positive).
    pub fn predict_mask(
        &self,
        image: &Tensor<S>,
        meta: Option<&Tensor<S>>,
        threshold: f64,
    ) -> Result<Tensor<S>> {
        let logits = self.logits(image, meta)?;
        Ok(binarize_logits(&logits, threshold))
    }
}

/// `sigmoid(logit) >= threshold` elementwise, as a 0/1 tensor.
pub fn binarize_logits<S: Scalar>(logits: &Tensor<S>, threshold: f64) -> Tensor<S> {
    let t = S::from_f64(threshold);
    logits.map(|v| {
        if crate::ops::sigmoid_scalar(v) >= t {
            S::one()
        } else {
            S::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn config(kind: ConditioningKind, meta_dim: usize) -> UNetConfig {
        UNetConfig {
            conditioning: kind,
            meta_dim,
            ..UNetConfig::default()
        }
    }

    #[test]
    fn param_count_difference_equals_se_block_sum() {
        let none = ConditionedUNet::<f32>::build(config(ConditioningKind::None, 0), &mut rng(1))
            .unwrap();
        let se =
            ConditionedUNet::<f32>::build(config(ConditioningKind::Se, 0), &mut rng(1)).unwrap();
        // Stage widths for depth 3, base 16: enc 16/32/64, bottleneck
        // 128, dec 64/32/16.
        let widths = [16, 32, 64, 128, 64, 32, 16];
        let block_sum: usize = widths
            .iter()
            .map(|&c| ConditioningBlock::param_count(ConditioningKind::Se, c, 0))
            .sum();
        let none_n = none.params().total_len();
        let se_n = se.params().total_len();
        assert_eq!(se_n - none_n, block_sum);
        // And both match the closed-form oracle.
        assert_eq!(none_n, none.config().param_count());
        assert_eq!(se_n, se.config().param_count());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = ConditionedUNet::<f32>::build(config(ConditioningKind::Sme, 7), &mut rng(9))
            .unwrap();
        let b = ConditionedUNet::<f32>::build(config(ConditioningKind::Sme, 7), &mut rng(9))
            .unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.1.name, pb.1.name);
            assert_eq!(pa.1.value.data(), pb.1.value.data());
        }
    }

    #[test]
    fn sme_blocks_see_stage_channels_plus_meta() {
        let model =
            ConditionedUNet::<f32>::build(config(ConditioningKind::Sme, 7), &mut rng(2)).unwrap();
        for block in model.conditioning_blocks() {
            assert_eq!(block.meta_dim, 7);
            // fc1 input width = C + M, encoded in the registered shape.
            let fc1 = model
                .params()
                .iter()
                .find(|(_, p)| p.name.contains("cond.fc1.weight") && {
                    p.value.shape()[1] == block.channels + 7
                        && p.value.shape()[0] == block.hidden
                });
            assert!(fc1.is_some(), "stage with {} channels", block.channels);
        }
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let model =
            ConditionedUNet::<f32>::build(config(ConditioningKind::None, 0), &mut rng(3)).unwrap();
        let image = Tensor::random(&mut rng(4), &[1, 1, 64, 64], 0.0, 1.0);
        let logits = model.logits(&image, None).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 64, 64]);
    }

    #[test]
    fn indivisible_spatial_size_is_rejected() {
        let model =
            ConditionedUNet::<f32>::build(config(ConditioningKind::None, 0), &mut rng(3)).unwrap();
        let image = Tensor::random(&mut rng(4), &[1, 1, 60, 60], 0.0, 1.0);
        assert!(model.logits(&image, None).is_err());
    }

    #[test]
    fn metadata_interface_contract() {
        let none_model =
            ConditionedUNet::<f32>::build(config(ConditioningKind::None, 0), &mut rng(5)).unwrap();
        let se_model =
            ConditionedUNet::<f32>::build(config(ConditioningKind::Se, 0), &mut rng(5)).unwrap();
        let me_model =
            ConditionedUNet::<f32>::build(config(ConditioningKind::Me, 3), &mut rng(5)).unwrap();
        let image = Tensor::random(&mut rng(6), &[1, 1, 16, 16], 0.0, 1.0);
        let meta = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 0.0]);

        assert!(none_model.logits(&image, Some(&meta)).is_err());
        assert!(se_model.logits(&image, Some(&meta)).is_err());
        assert!(me_model.logits(&image, None).is_err());
        assert!(me_model.logits(&image, Some(&meta)).is_ok());
    }

    #[test]
    fn me_forward_is_a_pure_function() {
        let model =
            ConditionedUNet::<f32>::build(config(ConditioningKind::Me, 3), &mut rng(7)).unwrap();
        let image = Tensor::random(&mut rng(8), &[1, 1, 16, 16], 0.0, 1.0);
        let meta = Tensor::from_vec(vec![1, 3], vec![0.0, 1.0, 0.0]);
        let a = model.logits(&image, Some(&meta)).unwrap();
        let b = model.logits(&image, Some(&meta)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn predict_mask_thresholding() {
        let logits = Tensor::from_vec(vec![1, 1, 1, 3], vec![-10.0f32, 10.0, 0.0]);
        let mask = binarize_logits(&logits, 0.5);
        // sigmoid(0) = 0.5 ties count as positive.
        assert_eq!(mask.data(), &[0.0, 1.0, 1.0]);
        let empty = binarize_logits(&Tensor::full(&[1, 1, 2, 2], -10.0f32), 0.5);
        assert_eq!(empty.count_nonzero(), 0);
        let full = binarize_logits(&Tensor::full(&[1, 1, 2, 2], 10.0f32), 0.5);
        assert_eq!(full.count_nonzero(), 4);
    }

    #[test]
    fn tiny_unet_passes_end_to_end_gradient_check() {
        let cfg = UNetConfig {
            depth: 1,
            base_channels: 4,
            in_channels: 1,
            out_channels: 1,
            conditioning: ConditioningKind::Sme,
            meta_dim: 2,
        };
        let mut model = ConditionedUNet::<f64>::build(cfg, &mut rng(11)).unwrap();
        // Check at a general-position point: with exactly-zero biases,
        // fully ReLU-clamped receptive fields make conv outputs equal the
        // bias, parking the evaluation on the relu kink where a central
        // difference and relu'(0) = 0 legitimately disagree. The jitter
        // seed is fixed to keep every kink well outside the eps window.
        let mut jitter = rng(31);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            use rand::Rng;
            for v in model.params_mut().value_mut(id).data_mut() {
                *v += jitter.gen_range(-0.05..0.05);
            }
        }
        let image = Tensor::random(&mut rng(12), &[1, 1, 8, 8], 0.0, 1.0);
        let meta = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]);
        let target = Tensor::<f64>::from_vec(
            vec![1, 1, 8, 8],
            (0..64).map(|i| f64::from(i % 2 == 0)).collect(),
        );

        let mut params = model.params().clone();
        let f = {
            let model = model.clone();
            let image = image.clone();
            let meta = meta.clone();
            let target = target.clone();
            move |tape: &mut Tape<f64>, ps: &ParamSet<f64>| {
                let mut m = model.clone();
                *m.params_mut() = ps.clone();
                let x = tape.leaf(image.clone());
                let mn = tape.leaf(meta.clone());
                let logits = m.forward_from(tape, x, Some(mn))?;
                let t = tape.leaf(target.clone());
                crate::ops::bce_with_logits(tape, logits, t, None)
            }
        };
        let err = crate::grad_check::finite_diff_check_params(&f, &mut params, 1e-4).unwrap();
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn distinct_metadata_changes_logits_after_one_step() {
        for kind in [
            ConditioningKind::Me,
            ConditioningKind::Sme,
            ConditioningKind::Film,
        ] {
            let cfg = UNetConfig {
                depth: 2,
                base_channels: 8,
                conditioning: kind,
                meta_dim: 2,
                ..UNetConfig::default()
            };
            let mut model = ConditionedUNet::<f64>::build(cfg, &mut rng(13)).unwrap();
            let image = Tensor::random(&mut rng(14), &[1, 1, 16, 16], 0.0, 1.0);
            let target =
                Tensor::<f64>::from_vec(vec![1, 1, 16, 16], vec![1.0; 256]);
            let meta_a = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]);
            let meta_b = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]);

            // One plain gradient step so FiLM leaves its identity init.
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &image, Some(&meta_a)).unwrap();
            let t = tape.leaf(target.clone());
            let loss = crate::ops::bce_with_logits(&mut tape, out, t, None).unwrap();
            let grads = tape.backward(loss).unwrap();
            let ids: Vec<_> = model.params().ids().collect();
            for id in ids {
                if let Some(g) = grads.param(id) {
                    let g = g.clone();
                    let value = model.params_mut().value_mut(id);
                    for (v, gv) in value.data_mut().iter_mut().zip(g.data()) {
                        *v -= 0.05 * gv;
                    }
                }
            }

            let la = model.logits(&image, Some(&meta_a)).unwrap();
            let lb = model.logits(&image, Some(&meta_b)).unwrap();
            let max_diff = la
                .data()
                .iter()
                .zip(lb.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff > 0.0, "{kind}: metadata has no effect on logits");
        }
    }
}
