//! Fully convolutional DenseNet for 2D slice segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::NetScalar;
use crate::layers::{
    dropout_backward, dropout_train, maxpool_backward, maxpool_forward, softmax, softmax_backward, BatchNorm,
    BnCache, Conv1x1, Conv3x3, ConvTranspose3x3, Param,
};
use crate::tensor::Act;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One input channel: the target slice alone.
    Static,
    /// Two input channels: the registered other-timepoint slice, then the target slice.
    Longitudinal,
}

impl Variant {
    pub fn in_channels(self) -> usize {
        match self {
            Variant::Static => 1,
            Variant::Longitudinal => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub n_classes: usize,
    pub first_conv_filters: usize,
    pub growth_rate: usize,
    /// Dense layers per encoder block, top to bottom.
    pub down_blocks: Vec<usize>,
    /// Dense layers per decoder block, bottom to top.
    pub up_blocks: Vec<usize>,
    pub bottleneck_layers: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            in_channels: variant.in_channels(),
            n_classes: longct_core::N_CLASSES,
            first_conv_filters: 48,
            growth_rate: 12,
            down_blocks: vec![4; 5],
            up_blocks: vec![4; 5],
            bottleneck_layers: 4,
            dropout: 0.2,
        }
    }

    /// Checks internal consistency. Reduced depths and widths are allowed for
    /// tests; [`ModelConfig::is_reference_shape`] tells the full layout apart.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels != self.variant.in_channels() {
            return fail(format!("{:?} variant needs {} input channels, got {}", self.variant, self.variant.in_channels(), self.in_channels));
        }
        if self.n_classes != longct_core::N_CLASSES {
            return fail(format!("n_classes must be {}", longct_core::N_CLASSES));
        }
        if self.first_conv_filters == 0 || self.growth_rate == 0 {
            return fail("first_conv_filters and growth_rate must be positive".into());
        }
        if self.down_blocks.is_empty() || self.down_blocks.len() != self.up_blocks.len() {
            return fail("down_blocks and up_blocks must be non-empty and equally long".into());
        }
        if self.down_blocks.iter().chain(&self.up_blocks).any(|&l| l == 0) || self.bottleneck_layers == 0 {
            return fail("every dense block needs at least one layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Five encoder and five decoder blocks of four layers each.
    pub fn is_reference_shape(&self) -> bool {
        self.down_blocks == [4; 5] && self.up_blocks == [4; 5]
    }

    pub fn n_pools(&self) -> usize {
        self.down_blocks.len()
    }

    /// Spatial sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.n_pools()
    }
}

/// A batch of 2D slices in `(batch, channel, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch<T> {
    pub images: Vec<T>,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: NetScalar> SliceBatch<T> {
    pub fn new(images: Vec<T>, batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if images.len() != batch * channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {batch}x{channels}x{height}x{width} batch",
                images.len()
            )));
        }
        Ok(Self { images, batch, channels, height, width })
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer<T> {
    pub bn: BatchNorm<T>,
    pub conv: Conv3x3<T>,
}

#[derive(Debug, Clone)]
pub struct DenseBlock<T> {
    pub layers: Vec<DenseLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct TransitionDown<T> {
    pub bn: BatchNorm<T>,
    pub conv: Conv1x1<T>,
}

#[derive(Debug, Clone)]
pub struct FcDenseNet<T> {
    pub config: ModelConfig,
    pub first: Conv3x3<T>,
    pub down: Vec<DenseBlock<T>>,
    pub transitions_down: Vec<TransitionDown<T>>,
    pub bottleneck: DenseBlock<T>,
    pub transitions_up: Vec<ConvTranspose3x3<T>>,
    pub up: Vec<DenseBlock<T>>,
    pub last: Conv1x1<T>,
}

struct LayerTape<T> {
    bn: BnCache<T>,
    mask: Option<Vec<bool>>,
}

struct BlockTape<T> {
    layers: Vec<LayerTape<T>>,
    in_channels: usize,
}

struct TdTape<T> {
    bn: BnCache<T>,
    mask: Option<Vec<bool>>,
    shape: Act<T>,
    arg: Vec<u32>,
}

/// Intermediate values kept by a training forward pass.
pub struct Tape<T> {
    input: Act<T>,
    down: Vec<BlockTape<T>>,
    td: Vec<TdTape<T>>,
    bottleneck: BlockTape<T>,
    tu_inputs: Vec<Act<T>>,
    up: Vec<BlockTape<T>>,
    last_input: Act<T>,
    pub probs: Act<T>,
}

struct TrainCtx<'a, R> {
    rng: &'a mut R,
    stats: Vec<(Vec<f64>, Vec<f64>)>,
}

fn shape_of<T: NetScalar>(a: &Act<T>) -> Act<T> {
    Act { c: a.c, n: a.n, h: a.h, w: a.w, data: Vec::new() }
}

impl<T: NetScalar> DenseBlock<T> {
    fn new(in_channels: usize, n_layers: usize, growth: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let c = in_channels + l * growth;
                DenseLayer { bn: BatchNorm::new(c), conv: Conv3x3::new(c, growth, rng) }
            })
            .collect();
        Self { layers }
    }

    /// Appends every layer's new features to `stack`.
    fn forward<R: Rng>(
        &self,
        stack: &mut Act<T>,
        p: f64,
        mut train: Option<&mut TrainCtx<'_, R>>,
    ) -> Option<BlockTape<T>> {
        let in_channels = stack.c;
        let mut tapes = Vec::new();
        for layer in &self.layers {
            let (xhat, bn_cache) = match train.as_deref_mut() {
                Some(ctx) => {
                    let (cache, mean, var) = layer.bn.normalize_batch(stack);
                    ctx.stats.push((to_f64(&mean), to_f64(&var)));
                    (None, Some(cache))
                }
                None => (Some(layer.bn.normalize_eval(stack)), None),
            };
            let a = layer.bn.affine(xhat.as_ref().unwrap_or_else(|| &bn_cache.as_ref().unwrap().xhat), true);
            let mut z = layer.conv.forward(&a);
            if let Some(ctx) = train.as_deref_mut() {
                let mask = dropout_train(&mut z, p, ctx.rng);
                tapes.push(LayerTape { bn: bn_cache.unwrap(), mask });
            }
            stack.extend(&z);
        }
        train.map(|_| BlockTape { layers: tapes, in_channels })
    }

    /// Takes the gradient for the whole output stack and returns the gradient
    /// for the block input.
    fn backward(&mut self, tape: &BlockTape<T>, mut d_stack: Act<T>, p: f64) -> Act<T> {
        for (layer, lt) in self.layers.iter_mut().zip(&tape.layers).rev() {
            let c = layer.bn.gamma.len();
            let g = layer.conv.weight.shape[0];
            let mut d_new = d_stack.channels(c..c + g);
            dropout_backward(&mut d_new, &lt.mask, p);
            let a = layer.bn.affine(&lt.bn.xhat, true);
            let da = layer.conv.backward(&a, &d_new, true).expect("input gradient requested");
            let dx = layer.bn.backward(&lt.bn, &da, true);
            d_stack.data.truncate(c * d_stack.row_len());
            d_stack.c = c;
            for (d, v) in d_stack.data.iter_mut().zip(&dx.data) {
                *d += *v;
            }
        }
        debug_assert_eq!(d_stack.c, tape.in_channels);
        d_stack
    }

    fn new_features(&self) -> usize {
        self.layers.iter().map(|l| l.conv.weight.shape[0]).sum()
    }
}

fn to_f64<T: NetScalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

impl<T: NetScalar> FcDenseNet<T> {
    /// Builds a network with fan-in scaled uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = config.growth_rate;
        let mut c = config.first_conv_filters;
        let first = Conv3x3::new(config.in_channels, c, &mut rng);
        let mut down = Vec::new();
        let mut transitions_down = Vec::new();
        let mut skips = Vec::new();
        for &n in &config.down_blocks {
            down.push(DenseBlock::new(c, n, g, &mut rng));
            c += n * g;
            skips.push(c);
            transitions_down.push(TransitionDown { bn: BatchNorm::new(c), conv: Conv1x1::new(c, c, &mut rng) });
        }
        let bottleneck = DenseBlock::new(c, config.bottleneck_layers, g, &mut rng);
        let mut prev_new = config.bottleneck_layers * g;
        let mut transitions_up = Vec::new();
        let mut up = Vec::new();
        for (i, &n) in config.up_blocks.iter().enumerate() {
            transitions_up.push(ConvTranspose3x3::new(prev_new, prev_new, &mut rng));
            let skip = skips[skips.len() - 1 - i];
            up.push(DenseBlock::new(prev_new + skip, n, g, &mut rng));
            c = prev_new + skip + n * g;
            prev_new = n * g;
        }
        let last = Conv1x1::new(c, config.n_classes, &mut rng);
        Ok(Self { config, first, down, transitions_down, bottleneck, transitions_up, up, last })
    }

    /// Named trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name, p)), &mut |_, _| {});
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, p| out.push((name, p)), &mut |_, _| {});
        out
    }

    /// Named batch-norm running statistics in a fixed order.
    pub fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |_, _| {}, &mut |name, b| out.push((name, b)));
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, _| {}, &mut |name, b| out.push((name, b)));
        out
    }

    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn visit<'a>(&'a self, param: &mut dyn FnMut(String, &'a Param<T>), buffer: &mut dyn FnMut(String, &'a Vec<T>)) {
        fn bn<'a, T>(
            prefix: &str,
            b: &'a BatchNorm<T>,
            param: &mut dyn FnMut(String, &'a Param<T>),
            buffer: &mut dyn FnMut(String, &'a Vec<T>),
        ) {
            param(format!("{prefix}.bn.gamma"), &b.gamma);
            param(format!("{prefix}.bn.beta"), &b.beta);
            buffer(format!("{prefix}.bn.running_mean"), &b.running_mean);
            buffer(format!("{prefix}.bn.running_var"), &b.running_var);
        }
        fn block<'a, T>(
            prefix: &str,
            blk: &'a DenseBlock<T>,
            param: &mut dyn FnMut(String, &'a Param<T>),
            buffer: &mut dyn FnMut(String, &'a Vec<T>),
        ) {
            for (j, l) in blk.layers.iter().enumerate() {
                let p = format!("{prefix}.layer{j}");
                bn(&p, &l.bn, param, buffer);
                param(format!("{p}.conv.weight"), &l.conv.weight);
                param(format!("{p}.conv.bias"), &l.conv.bias);
            }
        }
        param("first.weight".into(), &self.first.weight);
        param("first.bias".into(), &self.first.bias);
        for (i, (blk, td)) in self.down.iter().zip(&self.transitions_down).enumerate() {
            block(&format!("down{i}"), blk, param, buffer);
            bn(&format!("td{i}"), &td.bn, param, buffer);
            param(format!("td{i}.conv.weight"), &td.conv.weight);
            param(format!("td{i}.conv.bias"), &td.conv.bias);
        }
        block("bottleneck", &self.bottleneck, param, buffer);
        for (i, (tu, blk)) in self.transitions_up.iter().zip(&self.up).enumerate() {
            param(format!("tu{i}.weight"), &tu.weight);
            param(format!("tu{i}.bias"), &tu.bias);
            block(&format!("up{i}"), blk, param, buffer);
        }
        param("last.weight".into(), &self.last.weight);
        param("last.bias".into(), &self.last.bias);
    }

    fn visit_mut<'a>(
        &'a mut self,
        param: &mut dyn FnMut(String, &'a mut Param<T>),
        buffer: &mut dyn FnMut(String, &'a mut Vec<T>),
    ) {
        fn bn<'a, T>(
            prefix: &str,
            b: &'a mut BatchNorm<T>,
            param: &mut dyn FnMut(String, &'a mut Param<T>),
            buffer: &mut dyn FnMut(String, &'a mut Vec<T>),
        ) {
            param(format!("{prefix}.bn.gamma"), &mut b.gamma);
            param(format!("{prefix}.bn.beta"), &mut b.beta);
            buffer(format!("{prefix}.bn.running_mean"), &mut b.running_mean);
            buffer(format!("{prefix}.bn.running_var"), &mut b.running_var);
        }
        fn block<'a, T>(
            prefix: &str,
            blk: &'a mut DenseBlock<T>,
            param: &mut dyn FnMut(String, &'a mut Param<T>),
            buffer: &mut dyn FnMut(String, &'a mut Vec<T>),
        ) {
            for (j, l) in blk.layers.iter_mut().enumerate() {
                let p = format!("{prefix}.layer{j}");
                bn(&p, &mut l.bn, param, buffer);
                param(format!("{p}.conv.weight"), &mut l.conv.weight);
                param(format!("{p}.conv.bias"), &mut l.conv.bias);
            }
        }
        param("first.weight".into(), &mut self.first.weight);
        param("first.bias".into(), &mut self.first.bias);
        for (i, (blk, td)) in self.down.iter_mut().zip(&mut self.transitions_down).enumerate() {
            block(&format!("down{i}"), blk, param, buffer);
            bn(&format!("td{i}"), &mut td.bn, param, buffer);
            param(format!("td{i}.conv.weight"), &mut td.conv.weight);
            param(format!("td{i}.conv.bias"), &mut td.conv.bias);
        }
        block("bottleneck", &mut self.bottleneck, param, buffer);
        for (i, (tu, blk)) in self.transitions_up.iter_mut().zip(&mut self.up).enumerate() {
            param(format!("tu{i}.weight"), &mut tu.weight);
            param(format!("tu{i}.bias"), &mut tu.bias);
            block(&format!("up{i}"), blk, param, buffer);
        }
        param("last.weight".into(), &mut self.last.weight);
        param("last.bias".into(), &mut self.last.bias);
    }

    fn check_input(&self, x: &Act<T>) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!("model expects {} input channels, got {}", self.config.in_channels, x.c)));
        }
        let m = self.config.size_multiple();
        if x.h % m != 0 || x.w % m != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Shape(format!("spatial size {}x{} is not a positive multiple of {m}", x.h, x.w)));
        }
        Ok(())
    }

    fn run<R: Rng>(&self, x: &Act<T>, mut train: Option<&mut TrainCtx<'_, R>>) -> (Act<T>, Option<Tape<T>>) {
        let p = self.config.dropout;
        let mut stack = self.first.forward(x);
        let mut down_tapes = Vec::new();
        let mut td_tapes = Vec::new();
        let mut skips = Vec::new();
        for (blk, td) in self.down.iter().zip(&self.transitions_down) {
            if let Some(t) = blk.forward(&mut stack, p, train.as_deref_mut()) {
                down_tapes.push(t);
            }
            let (a, bn_cache) = match train.as_deref_mut() {
                Some(ctx) => {
                    let (cache, mean, var) = td.bn.normalize_batch(&stack);
                    ctx.stats.push((to_f64(&mean), to_f64(&var)));
                    (td.bn.affine(&cache.xhat, true), Some(cache))
                }
                None => (td.bn.affine(&td.bn.normalize_eval(&stack), true), None),
            };
            let mut z = td.conv.forward(&a);
            let mask = match train.as_deref_mut() {
                Some(ctx) => dropout_train(&mut z, p, ctx.rng),
                None => None,
            };
            let (pooled, arg) = maxpool_forward(&z);
            if let Some(cache) = bn_cache {
                td_tapes.push(TdTape { bn: cache, mask, shape: shape_of(&z), arg });
            }
            skips.push(std::mem::replace(&mut stack, pooled));
        }
        let bottleneck_tape = self.bottleneck.forward(&mut stack, p, train.as_deref_mut());
        let bottleneck_in = stack.c - self.bottleneck.new_features();
        let mut new = stack.channels(bottleneck_in..stack.c);
        let mut tu_inputs = Vec::new();
        let mut up_tapes = Vec::new();
        let n_up = self.up.len();
        for (i, (tu, blk)) in self.transitions_up.iter().zip(&self.up).enumerate() {
            let upsampled = tu.forward(&new);
            let skip = skips.pop().expect("one skip per level");
            let mut stack = Act::concat(&[&upsampled, &skip]);
            if let Some(t) = blk.forward(&mut stack, p, train.as_deref_mut()) {
                up_tapes.push(t);
            }
            let prev = std::mem::replace(&mut new, if i + 1 == n_up {
                stack
            } else {
                let k = blk.new_features();
                stack.channels(stack.c - k..stack.c)
            });
            if train.is_some() {
                tu_inputs.push(prev);
            }
        }
        let logits = self.last.forward(&new);
        let probs = softmax(&logits);
        let tape = match train {
            Some(_) => Some(Tape {
                input: x.clone(),
                down: down_tapes,
                td: td_tapes,
                bottleneck: bottleneck_tape.expect("training tape"),
                tu_inputs,
                up: up_tapes,
                last_input: new,
                probs: probs.clone(),
            }),
            None => None,
        };
        (probs, tape)
    }

    /// Inference pass using running batch-norm statistics and no dropout.
    pub fn forward_eval(&self, x: &Act<T>) -> Result<Act<T>> {
        self.check_input(x)?;
        Ok(self.run::<ChaCha8Rng>(x, None).0)
    }

    /// Training pass: batch statistics, dropout from `rng`, running statistics
    /// updated. Returns the class probabilities and the tape for [`Self::backward`].
    pub fn forward_train(&mut self, x: &Act<T>, rng: &mut impl Rng) -> Result<Tape<T>> {
        self.check_input(x)?;
        let mut ctx = TrainCtx { rng, stats: Vec::new() };
        let (_, tape) = self.run(x, Some(&mut ctx));
        let mom = T::of(BatchNorm::<T>::MOMENTUM);
        let mut buffers = self.buffers_mut();
        // Buffers come in (mean, var) pairs in forward order.
        for (pair, (mean, var)) in buffers.chunks_mut(2).zip(ctx.stats) {
            for (b, m) in pair[0].1.iter_mut().zip(&mean) {
                *b = (T::one() - mom) * *b + mom * T::of(*m);
            }
            for (b, v) in pair[1].1.iter_mut().zip(&var) {
                *b = (T::one() - mom) * *b + mom * T::of(*v);
            }
        }
        Ok(tape.expect("training tape"))
    }

    /// Accumulates parameter gradients given `dL/dprobs`.
    pub fn backward(&mut self, tape: &Tape<T>, d_probs: &Act<T>) {
        let p = self.config.dropout;
        let d_logits = softmax_backward(&tape.probs, d_probs);
        let mut d_new = self.last.backward(&tape.last_input, &d_logits);
        let n_up = self.up.len();
        let mut d_skips: Vec<Act<T>> = Vec::with_capacity(n_up);
        for i in (0..n_up).rev() {
            let blk = &mut self.up[i];
            let bt = &tape.up[i];
            let d_stack = if i + 1 == n_up {
                d_new
            } else {
                let k = blk.new_features();
                let mut full = Act::zeros(bt.in_channels + k, d_new.n, d_new.h, d_new.w);
                let off = bt.in_channels * full.row_len();
                full.data[off..].copy_from_slice(&d_new.data);
                full
            };
            let d_in = blk.backward(bt, d_stack, p);
            let tu = &mut self.transitions_up[i];
            let tu_c = tu.weight.shape[1];
            let d_up = d_in.channels(0..tu_c);
            d_skips.push(d_in.channels(tu_c..d_in.c));
            d_new = tu.backward(&tape.tu_inputs[i], &d_up);
        }
        // d_new now refers to the bottleneck's new features.
        let bt = &tape.bottleneck;
        let k = self.bottleneck.new_features();
        let mut d_stack = Act::zeros(bt.in_channels + k, d_new.n, d_new.h, d_new.w);
        let off = bt.in_channels * d_stack.row_len();
        d_stack.data[off..].copy_from_slice(&d_new.data);
        let mut d_pooled = self.bottleneck.backward(bt, d_stack, p);
        // d_skips holds the top level first; walk the encoder bottom-up.
        for i in (0..self.down.len()).rev() {
            let td = &mut self.transitions_down[i];
            let tt = &tape.td[i];
            let mut dz = maxpool_backward(&tt.shape, &d_pooled, &tt.arg);
            dropout_backward(&mut dz, &tt.mask, p);
            let a = td.bn.affine(&tt.bn.xhat, true);
            let da = td.conv.backward(&a, &dz);
            let mut d_stack = td.bn.backward(&tt.bn, &da, true);
            let skip_grad = &d_skips[i];
            for (d, v) in d_stack.data.iter_mut().zip(&skip_grad.data) {
                *d += *v;
            }
            d_pooled = self.down[i].backward(&tape.down[i], d_stack, p);
        }
        self.first.backward(&tape.input, &d_pooled, false);
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random_input(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Act<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Act::from_nchw(n, c, h, w, &dense)
    }

    pub(crate) fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            first_conv_filters: 4,
            growth_rate: 3,
            down_blocks: vec![1, 1],
            up_blocks: vec![1, 1],
            bottleneck_layers: 1,
            dropout: 0.0,
            ..ModelConfig::new(variant)
        }
    }

    #[test]
    fn reference_parameter_counts() {
        let s = FcDenseNet::<f32>::new(ModelConfig::new(Variant::Static), 0).unwrap().count_parameters();
        let l = FcDenseNet::<f32>::new(ModelConfig::new(Variant::Longitudinal), 0).unwrap().count_parameters();
        assert_eq!(s, 1_374_773);
        assert_eq!(l, 1_375_205);
        assert_eq!(l - s, 3 * 3 * 48);
    }

    #[test]
    fn count_ignores_seed_and_variant_only_touches_first_conv() {
        let a = FcDenseNet::<f32>::new(ModelConfig::new(Variant::Static), 1).unwrap();
        let b = FcDenseNet::<f32>::new(ModelConfig::new(Variant::Static), 2).unwrap();
        assert_eq!(a.count_parameters(), b.count_parameters());
        let l = FcDenseNet::<f32>::new(ModelConfig::new(Variant::Longitudinal), 1).unwrap();
        for ((na, pa), (nl, pl)) in a.params().iter().zip(l.params()) {
            assert_eq!(na, &nl);
            if na != "first.weight" {
                assert_eq!(pa.shape, pl.shape, "{na}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(Variant::Static).validate().is_ok());
        assert!(ModelConfig::new(Variant::Static).is_reference_shape());
        let mut c = ModelConfig::new(Variant::Static);
        c.in_channels = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Variant::Longitudinal);
        c.up_blocks.pop();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Variant::Longitudinal);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_matches_input_size_and_is_a_distribution() {
        let model = FcDenseNet::<f64>::new(tiny(Variant::Longitudinal), 3).unwrap();
        for (h, w) in [(4, 4), (8, 12), (16, 4)] {
            let x = random_input(2, 2, h, w, 5);
            let p = model.forward_eval(&x).unwrap();
            assert_eq!((p.c, p.n, p.h, p.w), (5, 2, h, w));
            let dense = p.to_nchw();
            for n in 0..2 {
                for k in 0..h * w {
                    let s: f64 = (0..5).map(|c| dense[(n * 5 + c) * h * w + k]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
            assert_eq!(model.forward_eval(&x).unwrap().data, p.data);
        }
        assert!(model.forward_eval(&random_input(1, 1, 8, 8, 0)).is_err());
        assert!(model.forward_eval(&random_input(2, 1, 6, 8, 0)).is_err());
    }

    #[test]
    fn reference_model_restores_resolution() {
        let model = FcDenseNet::<f32>::new(ModelConfig::new(Variant::Static), 0).unwrap();
        let x = Act::<f32>::zeros(1, 1, 32, 64);
        let p = model.forward_eval(&x).unwrap();
        assert_eq!((p.c, p.h, p.w), (5, 32, 64));
    }

    #[test]
    fn training_updates_running_statistics() {
        let mut model = FcDenseNet::<f64>::new(tiny(Variant::Static), 3).unwrap();
        let x = random_input(1, 2, 8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.forward_train(&x, &mut rng).unwrap();
        let b = model.buffers();
        assert!(b[0].0.ends_with("running_mean") && b[0].1.iter().any(|&v| v != 0.0));
        assert!(b[1].0.ends_with("running_var") && b[1].1.iter().any(|&v| v != 1.0));
    }

    /// Full-network gradient of `Σ r ⊙ probs` against central differences.
    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut model = FcDenseNet::<f64>::new(tiny(Variant::Longitudinal), 11).unwrap();
        let x = random_input(2, 2, 8, 8, 2);
        let r = random_input(5, 2, 8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = |m: &FcDenseNet<f64>| {
            let mut m = m.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let t = m.forward_train(&x, &mut rng).unwrap();
            t.probs.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = model.forward_train(&x, &mut rng).unwrap();
        model.zero_grad();
        model.backward(&tape, &r);
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        let mut checked = 0;
        for (pi, name) in names.iter().enumerate() {
            let len = model.params()[pi].1.len();
            for k in [0, len / 2, len - 1] {
                let analytic = model.params()[pi].1.grad[k];
                let mut plus = model.clone();
                plus.params_mut()[pi].1.value[k] += 1e-5;
                let mut minus = model.clone();
                minus.params_mut()[pi].1.value[k] -= 1e-5;
                let fd = (loss(&plus) - loss(&minus)) / 2e-5;
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{k}]: fd {fd} analytic {analytic}");
                checked += 1;
            }
        }
        assert!(checked > 30);
    }
}
