//! Two-branch convolutional embedding network.
//!
//! Layout (each block is `convs_per_block` x [3x3 conv, batch norm,
//! leaky ReLU(0.1)] wrapped by an additive skip, 1x1-projected when the
//! channel count changes):
//!
//! ```text
//! image -> block1 -> pool -> block2 -> pool ----> block3 -> block4 -----------> local
//!                                           \--> pool -> block5 -> pool -> gap -> global
//! features = l2norm_per_channel(concat(local, replicate(global)))
//! ```
//!
//! Blocks 3 and 4 use dilated convolutions and keep the output stride at 4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnBatchStats, BnMode, Conv2dOpts, PoolMode, Tape, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    OneWay,
    KWay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub block_channels: [usize; 5],
    pub convs_per_block: usize,
    pub dilations_block3: Vec<usize>,
    pub dilations_block4: Vec<usize>,
    pub input_channels: usize,
    pub gc_branch_enabled: bool,
    pub setting: Setting,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EmbedConfig {
    /// Narrow widths sized for CPU training on 32x32 images.
    pub fn desk() -> Self {
        Self::with_channels([16, 32, 64, 64, 64], Setting::KWay)
    }

    /// Block widths 64/128/256/512/512 with the dilation schedule of `setting`.
    pub fn full(setting: Setting) -> Self {
        Self::with_channels([64, 128, 256, 512, 512], setting)
    }

    pub fn with_channels(block_channels: [usize; 5], setting: Setting) -> Self {
        let (d3, d4) = match setting {
            Setting::KWay => (vec![1, 2, 4], vec![8, 16, 32]),
            Setting::OneWay => (vec![1, 1, 1], vec![2, 4, 8]),
        };
        Self {
            block_channels,
            convs_per_block: 3,
            dilations_block3: d3,
            dilations_block4: d4,
            input_channels: 3,
            gc_branch_enabled: true,
            setting,
        }
    }

    /// Every block `channels` wide; used for gradient verification.
    pub fn micro(channels: usize) -> Self {
        Self::with_channels([channels; 5], Setting::KWay)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.contains(&0) || self.input_channels == 0 {
            return Err(Error::Config(format!(
                "channel counts must be positive: input {} blocks {:?}",
                self.input_channels, self.block_channels
            )));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be at least 1".into()));
        }
        for (name, d) in [("block3", &self.dilations_block3), ("block4", &self.dilations_block4)] {
            if d.len() != self.convs_per_block {
                return Err(Error::Config(format!(
                    "{name} lists {} dilations for {} convs per block",
                    d.len(),
                    self.convs_per_block
                )));
            }
            if d.contains(&0) {
                return Err(Error::Config(format!("{name} dilations must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the fused per-pixel feature.
    pub fn feature_width(&self) -> usize {
        self.block_channels[3] + if self.gc_branch_enabled { self.block_channels[4] } else { 0 }
    }

    fn dilations(&self, block: usize) -> Vec<usize> {
        match block {
            3 => self.dilations_block3.clone(),
            4 => self.dilations_block4.clone(),
            _ => vec![1; self.convs_per_block],
        }
    }

    /// (block number, input channels, output channels) in build order.
    fn block_plan(&self) -> Vec<(usize, usize, usize)> {
        let c = self.block_channels;
        let mut plan = vec![
            (1, self.input_channels, c[0]),
            (2, c[0], c[1]),
            (3, c[1], c[2]),
            (4, c[2], c[3]),
        ];
        if self.gc_branch_enabled {
            plan.push((5, c[1], c[4]));
        }
        plan
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub index: usize,
    pub units: Vec<ConvUnit<T>>,
    /// 1x1 projection (weight, bias) on the skip path.
    pub projection: Option<(Tensor<T>, Tensor<T>)>,
}

/// Parameters of the embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<T> {
    pub config: EmbedConfig,
    pub blocks: Vec<ResBlock<T>>,
}

fn he_normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// Build freshly initialized parameters; deterministic in `seed`.
pub fn build_embedding<T: Real>(config: &EmbedConfig, seed: u64) -> Result<EmbeddingParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    for (index, cin, cout) in config.block_plan() {
        let mut units = Vec::with_capacity(config.convs_per_block);
        for (u, dilation) in config.dilations(index).into_iter().enumerate() {
            let unit_in = if u == 0 { cin } else { cout };
            units.push(ConvUnit {
                weight: he_normal(&mut rng, &[cout, unit_in, 3, 3]),
                bias: Tensor::zeros(&[cout]),
                gamma: Tensor::ones(&[cout]),
                beta: Tensor::zeros(&[cout]),
                running_mean: Tensor::zeros(&[cout]),
                running_var: Tensor::ones(&[cout]),
                dilation,
            });
        }
        let projection = (cin != cout).then(|| (he_normal(&mut rng, &[cout, cin, 1, 1]), Tensor::zeros(&[cout])));
        blocks.push(ResBlock {
            index,
            units,
            projection,
        });
    }
    Ok(EmbeddingParams {
        config: config.clone(),
        blocks,
    })
}

/// Per-pixel features of a batch of images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelFeatures {
    /// `(images * height * width) x width` matrix on the tape, rows ordered
    /// image-major then row-major over the feature map.
    pub matrix: Var,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PixelFeatures {
    pub fn rows(&self) -> usize {
        self.images * self.height * self.width
    }
}

/// Tape handles for every trainable tensor, in [`EmbeddingParams::named_params`] order.
#[derive(Debug, Clone)]
pub struct BoundEmbedding {
    vars: Vec<Var>,
}

impl BoundEmbedding {
    /// Wrap handles that are already on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<T: Real> EmbeddingParams<T> {
    /// Trainable tensors with stable names, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for (u, unit) in b.units.iter().enumerate() {
                let p = format!("block{}.unit{}", b.index, u);
                out.push((format!("{p}.conv.weight"), &unit.weight));
                out.push((format!("{p}.conv.bias"), &unit.bias));
                out.push((format!("{p}.bn.gamma"), &unit.gamma));
                out.push((format!("{p}.bn.beta"), &unit.beta));
            }
            if let Some((w, bias)) = &b.projection {
                out.push((format!("block{}.proj.weight", b.index), w));
                out.push((format!("block{}.proj.bias", b.index), bias));
            }
        }
        out
    }

    /// Mutable access in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for unit in &mut b.units {
                out.push(&mut unit.weight);
                out.push(&mut unit.bias);
                out.push(&mut unit.gamma);
                out.push(&mut unit.beta);
            }
            if let Some((w, bias)) = &mut b.projection {
                out.push(w);
                out.push(bias);
            }
        }
        out
    }

    /// Batch-norm running statistics, named.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for (u, unit) in b.units.iter().enumerate() {
                let p = format!("block{}.unit{}.bn", b.index, u);
                out.push((format!("{p}.running_mean"), &unit.running_mean));
                out.push((format!("{p}.running_var"), &unit.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for unit in &mut b.units {
                out.push(&mut unit.running_mean);
                out.push(&mut unit.running_var);
            }
        }
        out
    }

    /// Total trainable scalars (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Put every trainable tensor on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundEmbedding {
        BoundEmbedding {
            vars: self
                .named_params()
                .into_iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        }
    }

    /// Put every parameter on the tape as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundEmbedding {
        BoundEmbedding {
            vars: self
                .named_params()
                .into_iter()
                .map(|(_, t)| tape.constant(t.clone()))
                .collect(),
        }
    }

    /// Run the network on `images` (N x C x H x W) and fuse the branches into
    /// a pixel feature matrix. Train mode also returns the batch statistics of
    /// every batch norm, in unit order, for [`update_running_stats`](Self::update_running_stats).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundEmbedding,
        images: Var,
        mode: Mode,
    ) -> Result<(PixelFeatures, Vec<BnBatchStats<T>>)> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::Shape(format!(
                "embedding expects N x {} x H x W images, got {shape:?}",
                self.config.input_channels
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image extent {h}x{w} must be a positive multiple of 4"
            )));
        }
        if bound.vars.len() != self.named_params().len() {
            return Err(Error::InvalidArgument(
                "bound parameters do not belong to this network".into(),
            ));
        }
        let mut cursor = 0usize;
        let mut stats = Vec::new();
        let mut run = |tape: &mut Tape<T>, block: &ResBlock<T>, x: Var, cursor: &mut usize| {
            self.block_forward(tape, &bound.vars, cursor, block, x, mode, &mut stats)
        };

        let b1 = run(tape, &self.blocks[0], images, &mut cursor)?;
        let p1 = tape.pool2d(b1, PoolMode::Max2x2)?;
        let b2 = run(tape, &self.blocks[1], p1, &mut cursor)?;
        let trunk = tape.pool2d(b2, PoolMode::Max2x2)?;
        let b3 = run(tape, &self.blocks[2], trunk, &mut cursor)?;
        let local = run(tape, &self.blocks[3], b3, &mut cursor)?;
        let (fh, fw) = (h / 4, w / 4);

        let fused = if self.config.gc_branch_enabled {
            let g0 = tape.pool2d(trunk, PoolMode::Max2x2)?;
            let g1 = run(tape, &self.blocks[4], g0, &mut cursor)?;
            let g2 = tape.pool2d(g1, PoolMode::Max2x2)?;
            let g3 = tape.pool2d(g2, PoolMode::GlobalAvg)?;
            let global = tape.replicate_upsample(g3, fh, fw)?;
            tape.concat_channels(local, global)?
        } else {
            local
        };
        let normed = tape.l2_normalize_channels(fused)?;
        let matrix = tape.pixel_rows(normed)?;
        Ok((
            PixelFeatures {
                matrix,
                images: n,
                height: fh,
                width: fw,
                channels: self.config.feature_width(),
            },
            stats,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        cursor: &mut usize,
        block: &ResBlock<T>,
        input: Var,
        mode: Mode,
        stats: &mut Vec<BnBatchStats<T>>,
    ) -> Result<Var> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        };
        let mut x = input;
        for unit in &block.units {
            let [w, b, g, beta] = [vars[*cursor], vars[*cursor + 1], vars[*cursor + 2], vars[*cursor + 3]];
            *cursor += 4;
            let opts = Conv2dOpts {
                stride: 1,
                padding: unit.dilation,
                dilation: unit.dilation,
            };
            let y = tape.conv2d(x, w, Some(b), opts)?;
            let (y, s) = tape.batchnorm2d(
                y,
                g,
                beta,
                bn_mode,
                (unit.running_mean.data(), unit.running_var.data()),
            )?;
            stats.extend(s);
            x = tape.leaky_relu(y, slope);
        }
        let skip = if block.projection.is_some() {
            let (w, b) = (vars[*cursor], vars[*cursor + 1]);
            *cursor += 2;
            tape.conv2d(input, w, Some(b), Conv2dOpts::default())?
        } else {
            input
        };
        tape.add(x, skip)
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats<T>]) -> Result<()> {
        let units: Vec<&mut ConvUnit<T>> = self.blocks.iter_mut().flat_map(|b| b.units.iter_mut()).collect();
        if units.len() != stats.len() {
            return Err(Error::InvalidArgument(format!(
                "{} batch-norm statistics for {} units",
                stats.len(),
                units.len()
            )));
        }
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (unit, s) in units.into_iter().zip(stats) {
            for (r, &v) in unit.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in unit.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * v;
            }
        }
        Ok(())
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> EmbeddingParams<U> {
        EmbeddingParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    index: b.index,
                    units: b
                        .units
                        .iter()
                        .map(|u| ConvUnit {
                            weight: u.weight.cast(),
                            bias: u.bias.cast(),
                            gamma: u.gamma.cast(),
                            beta: u.beta.cast(),
                            running_mean: u.running_mean.cast(),
                            running_var: u.running_var.cast(),
                            dilation: u.dilation,
                        })
                        .collect(),
                    projection: b.projection.as_ref().map(|(w, bias)| (w.cast(), bias.cast())),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * h * w).map(|_| rng.random::<f64>()).collect();
        Tensor::new(&[n, 3, h, w], data).unwrap()
    }

    fn run(params: &EmbeddingParams<f64>, imgs: Tensor<f64>, mode: Mode) -> (Tape<f64>, PixelFeatures) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(imgs);
        let (f, _) = params.forward(&mut tape, &bound, x, mode).unwrap();
        (tape, f)
    }

    #[test]
    fn single_conv_param_count() {
        // 3*3*3*64 weights + 64 biases
        let mut cfg = EmbedConfig::micro(4);
        cfg.convs_per_block = 1;
        cfg.dilations_block3 = vec![1];
        cfg.dilations_block4 = vec![1];
        cfg.block_channels = [64, 64, 64, 64, 64];
        let p = build_embedding::<f32>(&cfg, 0).unwrap();
        let first = &p.blocks[0].units[0];
        assert_eq!(first.weight.len() + first.bias.len(), 1792);
    }

    #[test]
    fn micro_param_count_matches_layer_formulas() {
        let c = 4;
        let cfg = EmbedConfig::micro(c);
        let p = build_embedding::<f64>(&cfg, 1).unwrap();
        // block1: first conv 3->4, two 4->4 convs, bn per conv, 1x1 projection 3->4
        let conv = |i: usize, o: usize| i * o * 9 + o;
        let bn = 2 * c;
        let block1 = conv(3, c) + 2 * conv(c, c) + 3 * bn + (3 * c + c);
        let block_same = 3 * conv(c, c) + 3 * bn;
        assert_eq!(p.count_params(), block1 + 4 * block_same);
    }

    #[test]
    fn param_count_grows_with_depth() {
        let cfg = EmbedConfig::micro(4);
        let mut deeper = cfg.clone();
        deeper.convs_per_block = 6;
        deeper.dilations_block3 = vec![1, 2, 4, 1, 2, 4];
        deeper.dilations_block4 = vec![8, 16, 32, 8, 16, 32];
        let a = build_embedding::<f32>(&cfg, 0).unwrap().count_params();
        let b = build_embedding::<f32>(&deeper, 0).unwrap().count_params();
        assert!(b > a);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = EmbedConfig::micro(6);
        let a = build_embedding::<f32>(&cfg, 9).unwrap();
        let b = build_embedding::<f32>(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = build_embedding::<f32>(&cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = EmbedConfig::micro(4);
        cfg.dilations_block4 = vec![1, 2];
        assert!(build_embedding::<f32>(&cfg, 0).is_err());
        cfg = EmbedConfig::micro(4);
        cfg.block_channels[2] = 0;
        assert!(build_embedding::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn presets_follow_dilation_schedule() {
        let k = EmbedConfig::full(Setting::KWay);
        assert_eq!(k.block_channels, [64, 128, 256, 512, 512]);
        assert_eq!(k.dilations_block3, vec![1, 2, 4]);
        assert_eq!(k.dilations_block4, vec![8, 16, 32]);
        let one = EmbedConfig::full(Setting::OneWay);
        assert_eq!(one.dilations_block4, vec![2, 4, 8]);
    }

    #[test]
    fn feature_matrix_shape_and_stride() {
        let cfg = EmbedConfig::with_channels([4, 6, 6, 8, 5], Setting::KWay);
        let p = build_embedding::<f64>(&cfg, 2).unwrap();
        for (h, w) in [(16, 16), (8, 12), (4, 4)] {
            let (tape, f) = run(&p, images(2, h, w, 3), Mode::Train);
            assert_eq!((f.height, f.width), (h / 4, w / 4));
            assert_eq!(tape.shape(f.matrix), &[2 * (h / 4) * (w / 4), 8 + 5]);
        }
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(images(1, 10, 12, 0));
        assert!(p.forward(&mut tape, &bound, x, Mode::Eval).is_err());
    }

    #[test]
    fn global_columns_are_constant_per_image_and_unit_norm() {
        let cfg = EmbedConfig::with_channels([4, 4, 4, 4, 3], Setting::KWay);
        let p = build_embedding::<f64>(&cfg, 5).unwrap();
        let (tape, f) = run(&p, images(2, 16, 16, 4), Mode::Train);
        let m = tape.value(f.matrix);
        let px = 16;
        for img in 0..2 {
            for c in 0..7 {
                let col: Vec<f64> = (0..px).map(|r| m.at2(img * px + r, c)).collect();
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm > 1.0 - 1e-3 && norm <= 1.0 + 1e-12, "norm {norm}");
                if c >= 4 {
                    assert!(col.iter().all(|&v| v == col[0]));
                }
            }
        }
    }

    #[test]
    fn no_global_branch_means_local_features_only() {
        let mut cfg = EmbedConfig::with_channels([4, 4, 4, 6, 3], Setting::KWay);
        cfg.gc_branch_enabled = false;
        let p = build_embedding::<f64>(&cfg, 5).unwrap();
        assert!(p.blocks.iter().all(|b| b.index != 5));
        let (tape, f) = run(&p, images(2, 8, 8, 4), Mode::Train);
        assert_eq!(tape.shape(f.matrix), &[8, 6]);

        // identical to the local features of the full network built from the same blocks
        let mut with_gc = cfg.clone();
        with_gc.gc_branch_enabled = true;
        let mut full = build_embedding::<f64>(&with_gc, 77).unwrap();
        full.blocks[..4].clone_from_slice(&p.blocks);
        let (tape2, f2) = run(&full, images(2, 8, 8, 4), Mode::Train);
        let a = tape.value(f.matrix);
        let b = tape2.value(f2.matrix);
        for r in 0..8 {
            for c in 0..6 {
                assert_eq!(a.at2(r, c), b.at2(r, c));
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_row_blocks_in_eval_mode() {
        let cfg = EmbedConfig::micro(4);
        let p = build_embedding::<f64>(&cfg, 8).unwrap();
        let imgs = images(3, 8, 8, 1);
        let per = 3 * 8 * 8;
        let mut swapped = imgs.data()[per..2 * per].to_vec();
        swapped.extend_from_slice(&imgs.data()[..per]);
        swapped.extend_from_slice(&imgs.data()[2 * per..]);
        let swapped = Tensor::new(&[3, 3, 8, 8], swapped).unwrap();
        let (t1, f1) = run(&p, imgs.clone(), Mode::Eval);
        let (t2, f2) = run(&p, swapped, Mode::Eval);
        let (a, b) = (t1.value(f1.matrix), t2.value(f2.matrix));
        let rows = 4 * f1.channels;
        assert_eq!(&a.data()[..rows], &b.data()[rows..2 * rows]);
        assert_eq!(&a.data()[rows..2 * rows], &b.data()[..rows]);
        assert_eq!(&a.data()[2 * rows..], &b.data()[2 * rows..]);

        // eval output of one image does not depend on the rest of the batch
        let single = Tensor::new(&[1, 3, 8, 8], imgs.data()[..per].to_vec()).unwrap();
        let (t3, f3) = run(&p, single, Mode::Eval);
        assert_eq!(&t3.value(f3.matrix).data()[..], &a.data()[..rows]);
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let cfg = EmbedConfig::micro(4);
        let mut p = build_embedding::<f64>(&cfg, 8).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(images(2, 8, 8, 1));
        let (_, stats) = p.forward(&mut tape, &bound, x, Mode::Train).unwrap();
        assert_eq!(stats.len(), 15);
        let m0 = stats[0].mean[0];
        p.update_running_stats(&stats).unwrap();
        let r = p.blocks[0].units[0].running_mean.data()[0];
        assert!((r - BN_MOMENTUM * m0).abs() < 1e-15);
        assert!(p.update_running_stats(&stats[..3]).is_err());
    }
}
