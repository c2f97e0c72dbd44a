//! The 23-layer salt-segmentation auto-encoder: declarative layer list,
//! seeded initialization, and whole-network forward/backward execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Result, SaltError};
use crate::ops::{
    conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu, relu_backward,
    resize_nearest_backward, resize_nearest_forward, ConvKernel,
};
use crate::tensor::{PoolIndices, Tensor};

pub const INPUT_HW: usize = 128;
pub const OUTPUT_HW: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { filters: usize, activation: Activation },
    MaxPool,
    Upsample { h: usize, w: usize },
    Downsample { h: usize, w: usize },
    /// Marker for the sigmoid output stage. The sigmoid itself is folded
    /// into the loss during training and applied explicitly at prediction.
    Output,
}

/// The canonical 23-layer list. With `faithful_table1` the final conv keeps
/// its stated ReLU; the default replaces it with a linear layer so the
/// network can emit logits below zero (a ReLU feeding a sigmoid pins every
/// output probability to [0.5, 1), which makes class-0 prediction
/// impossible at the 0.5 threshold).
pub fn canonical_specs(faithful_table1: bool) -> Vec<LayerSpec> {
    use Activation::*;
    use LayerSpec::*;
    let final_act = if faithful_table1 { Relu } else { Linear };
    vec![
        Conv { filters: 8, activation: Relu },
        MaxPool,
        Conv { filters: 8, activation: Relu },
        MaxPool,
        Conv { filters: 16, activation: Relu },
        MaxPool,
        Conv { filters: 16, activation: Relu },
        MaxPool,
        Conv { filters: 8, activation: Relu },
        MaxPool,
        Upsample { h: 8, w: 8 },
        Conv { filters: 8, activation: Relu },
        Upsample { h: 16, w: 16 },
        Conv { filters: 16, activation: Relu },
        Upsample { h: 32, w: 32 },
        Conv { filters: 16, activation: Relu },
        Upsample { h: 64, w: 64 },
        Conv { filters: 8, activation: Relu },
        Upsample { h: 128, w: 128 },
        Conv { filters: 8, activation: Relu },
        Downsample { h: 101, w: 101 },
        Conv { filters: 1, activation: final_act },
        Output,
    ]
}

/// FNV-1a hash of the canonical layer description; stored in checkpoints so
/// incompatible parameter sets are rejected on load.
pub fn spec_hash(specs: &[LayerSpec], in_channels: usize) -> u64 {
    let mut desc = format!("in={in_channels};");
    for s in specs {
        match s {
            LayerSpec::Conv { filters, activation } => {
                desc.push_str(&format!("conv{filters}:{activation:?};"))
            }
            LayerSpec::MaxPool => desc.push_str("pool;"),
            LayerSpec::Upsample { h, w } => desc.push_str(&format!("up{h}x{w};")),
            LayerSpec::Downsample { h, w } => desc.push_str(&format!("down{h}x{w};")),
            LayerSpec::Output => desc.push_str("output;"),
        }
    }
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in desc.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv { input: Tensor, preact: Tensor },
    Pool { indices: PoolIndices },
    Resize { in_h: usize, in_w: usize },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct Model {
    specs: Vec<LayerSpec>,
    in_channels: usize,
    pub params: Vec<ConvKernel>,
    cache: Option<Vec<LayerCache>>,
}

impl Model {
    /// Instantiate parameters for an arbitrary layer list with fan-balanced
    /// uniform initialization (|w| <= sqrt(6/(fan_in+fan_out))), biases zero,
    /// from a seeded generator. Identical seed, identical model.
    pub fn from_specs(specs: Vec<LayerSpec>, in_channels: usize, seed: u64) -> Model {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut cur_c = in_channels;
        for spec in &specs {
            if let LayerSpec::Conv { filters, .. } = spec {
                let (kh, kw) = (3, 3);
                let fan_in = cur_c * kh * kw;
                let fan_out = filters * kh * kw;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = filters * cur_c * kh * kw;
                let data: Vec<f64> = (0..n)
                    .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
                    .collect();
                let weights = Tensor::new(vec![*filters, cur_c, kh, kw], data).unwrap();
                params.push(ConvKernel::new(weights, Tensor::zeros(&[*filters])).unwrap());
                cur_c = *filters;
            }
        }
        Model {
            specs,
            in_channels,
            params,
            cache: None,
        }
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn spec_hash(&self) -> u64 {
        spec_hash(&self.specs, self.in_channels)
    }

    /// Flat list of parameter tensors in optimizer order:
    /// weights then bias per conv layer.
    pub fn param_dims(&self) -> Vec<Vec<usize>> {
        let mut dims = Vec::new();
        for k in &self.params {
            dims.push(k.weights.dims().to_vec());
            dims.push(k.bias.dims().to_vec());
        }
        dims
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for k in &self.params {
            out.push(&k.weights);
            out.push(&k.bias);
        }
        out
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 4 || batch.dims()[1] != self.in_channels {
            return Err(SaltError::Shape(format!(
                "expected rank-4 input with {} channels, got {:?}",
                self.in_channels,
                batch.dims()
            )));
        }
        Ok(())
    }

    /// Run layers 1..=22, producing pre-sigmoid logits. In train mode the
    /// per-layer activations and pool indices are retained for `backward`.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_traced(batch, mode)?.0)
    }

    /// As `forward`, additionally returning every layer's output dims in
    /// layer order (the Output marker contributes no entry).
    pub fn forward_traced(
        &mut self,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Vec<Vec<usize>>)> {
        self.check_input(batch)?;
        let train = mode == Mode::Train;
        let mut cache = Vec::with_capacity(self.specs.len());
        let mut shapes = Vec::new();
        let mut cur = batch.clone();
        let mut conv_idx = 0;
        for spec in &self.specs {
            match spec {
                LayerSpec::Conv { activation, .. } => {
                    let preact = conv2d_forward(&cur, &self.params[conv_idx])?;
                    conv_idx += 1;
                    let out = match activation {
                        Activation::Relu => relu(&preact),
                        Activation::Linear => preact.clone(),
                        Activation::Sigmoid => crate::ops::sigmoid(&preact),
                    };
                    if train {
                        cache.push(LayerCache::Conv { input: cur, preact });
                    } else {
                        cache.push(LayerCache::None);
                    }
                    cur = out;
                }
                LayerSpec::MaxPool => {
                    let (out, indices) = maxpool2x2_forward(&cur)?;
                    cache.push(if train {
                        LayerCache::Pool { indices }
                    } else {
                        LayerCache::None
                    });
                    cur = out;
                }
                LayerSpec::Upsample { h, w } | LayerSpec::Downsample { h, w } => {
                    let (in_h, in_w) = (cur.dims()[2], cur.dims()[3]);
                    let out = resize_nearest_forward(&cur, *h, *w)?;
                    cache.push(if train {
                        LayerCache::Resize { in_h, in_w }
                    } else {
                        LayerCache::None
                    });
                    cur = out;
                }
                LayerSpec::Output => {
                    cache.push(LayerCache::None);
                    continue;
                }
            }
            shapes.push(cur.dims().to_vec());
        }
        self.cache = if train { Some(cache) } else { None };
        Ok((cur, shapes))
    }

    /// Reverse-mode gradients for every conv kernel, in parameter order
    /// (weights, bias per layer). Requires a prior train-mode forward.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| SaltError::State("backward without a train-mode forward".into()))?;
        let mut grad = grad_logits.clone();
        let mut grads_rev = Vec::new();
        let mut conv_idx = self.params.len();
        for (spec, layer_cache) in self.specs.iter().zip(cache.iter()).rev() {
            match (spec, layer_cache) {
                (LayerSpec::Conv { activation, .. }, LayerCache::Conv { input, preact }) => {
                    conv_idx -= 1;
                    let grad_pre = match activation {
                        Activation::Relu => relu_backward(preact, &grad)?,
                        Activation::Linear => grad,
                        Activation::Sigmoid => {
                            let s = crate::ops::sigmoid(preact);
                            let data = s
                                .data()
                                .iter()
                                .zip(grad.data())
                                .map(|(&p, &g)| g * p * (1.0 - p))
                                .collect();
                            Tensor::new(preact.dims().to_vec(), data)?
                        }
                    };
                    let (gi, gw, gb) = conv2d_backward(input, &self.params[conv_idx], &grad_pre)?;
                    grads_rev.push((gw, gb));
                    grad = gi;
                }
                (LayerSpec::MaxPool, LayerCache::Pool { indices }) => {
                    grad = maxpool2x2_backward(indices, &grad)?;
                }
                (
                    LayerSpec::Upsample { .. } | LayerSpec::Downsample { .. },
                    LayerCache::Resize { in_h, in_w },
                ) => {
                    grad = resize_nearest_backward(*in_h, *in_w, &grad)?;
                }
                (LayerSpec::Output, LayerCache::None) => {}
                _ => {
                    return Err(SaltError::State(
                        "cached activations do not match the layer list".into(),
                    ))
                }
            }
        }
        grads_rev.reverse();
        Ok(grads_rev)
    }
}

/// Build the canonical Table-driven model for single-channel 128x128 input.
pub fn build_model(seed: u64, faithful_table1: bool) -> Model {
    Model::from_specs(canonical_specs(faithful_table1), 1, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_builds_are_identical() {
        let a = build_model(42, false);
        let b = build_model(42, false);
        for (ka, kb) in a.params.iter().zip(&b.params) {
            assert_eq!(ka.weights, kb.weights);
            assert_eq!(ka.bias, kb.bias);
        }
    }

    #[test]
    fn first_and_last_kernel_dims() {
        let m = build_model(1, false);
        assert_eq!(m.params.len(), 11);
        assert_eq!(m.params[0].weights.dims(), &[8, 1, 3, 3]);
        assert_eq!(m.params[10].weights.dims(), &[1, 8, 3, 3]);
    }

    #[test]
    fn filter_counts_match_table() {
        let m = build_model(1, false);
        let filters: Vec<usize> = m.params.iter().map(|k| k.out_channels()).collect();
        assert_eq!(filters, vec![8, 8, 16, 16, 8, 8, 16, 16, 8, 8, 1]);
    }

    #[test]
    fn init_respects_fan_bound() {
        let m = build_model(9, false);
        for k in &m.params {
            let fan_in = k.in_channels() * 9;
            let fan_out = k.out_channels() * 9;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            assert!(k.weights.data().iter().all(|w| w.abs() <= bound));
            assert!(k.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn forward_output_shape() {
        let mut m = build_model(3, false);
        let out = m
            .forward(&Tensor::zeros(&[1, 1, 128, 128]), Mode::Infer)
            .unwrap();
        assert_eq!(out.dims(), &[1, 1, 101, 101]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let mut m = build_model(3, false);
        assert!(m.forward(&Tensor::zeros(&[1, 2, 128, 128]), Mode::Infer).is_err());
    }

    #[test]
    fn train_and_infer_agree() {
        let mut m = build_model(7, false);
        let input = Tensor::new(
            vec![1, 1, 128, 128],
            (0..128 * 128).map(|i| (i % 97) as f64 / 97.0).collect(),
        )
        .unwrap();
        let a = m.forward(&input, Mode::Train).unwrap();
        let b = m.forward(&input, Mode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_needs_forward() {
        let mut m = build_model(3, false);
        assert!(m.backward(&Tensor::zeros(&[1, 1, 101, 101])).is_err());
    }

    #[test]
    fn zero_grad_gives_zero_param_grads() {
        let mut m = build_model(3, false);
        m.forward(&Tensor::zeros(&[1, 1, 128, 128]), Mode::Train).unwrap();
        let grads = m.backward(&Tensor::zeros(&[1, 1, 101, 101])).unwrap();
        assert_eq!(grads.len(), 11);
        for (gw, gb) in grads {
            assert!(gw.data().iter().all(|&v| v == 0.0));
            assert!(gb.data().iter().all(|&v| v == 0.0));
        }
    }
}
