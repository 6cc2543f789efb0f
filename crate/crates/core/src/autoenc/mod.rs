//! Convolutional autoencoder for 100x100 spectrograms.
//!
//! Ten layers, stride 2 everywhere, no padding:
//!
//! ```text
//! encoder  100x100x1 -conv4-> 49x49x32 -conv4-> 23x23x64 -conv4-> 10x10x128
//!          -conv4-> 4x4x256 -flatten-> 4096 -fc-> 128
//! decoder  128 -fc-> 4096 (1x1x4096) -tconv7-> 7x7x128 -tconv8-> 20x20x64
//!          -tconv9-> 47x47x32 -tconv8-> 100x100x1 (sigmoid)
//! ```
//!
//! The 128-wide bottleneck output is the embedding. Gradients are computed
//! analytically; see [`gradcheck`] for the finite-difference cross-check.

mod checkpoint;
pub mod gradcheck;
mod layers;
mod scalar;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::SPEC_SIZE;
use crate::error::{Error, Result};

pub use checkpoint::CHECKPOINT_MAGIC;
pub use layers::{conv_out, tconv_out, Activation, LayerSpec, OpKind, Shape, STRIDE};
pub use scalar::Scalar;
pub use train::{adam_step, train, AdamState, TrainConfig, TrainReport};

/// Index of the bottleneck layer (0-based): layers `0..=ENCODER_LAST` encode.
pub const ENCODER_LAST: usize = 4;
pub const LAYER_COUNT: usize = 10;
const KERNELS: [usize; LAYER_COUNT] = [4, 4, 4, 4, 0, 0, 7, 8, 9, 8];

/// Channel widths of the network; [`Arch::FULL`] is the production model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub channels: [usize; 4],
    pub bottleneck: usize,
}

impl Arch {
    pub const FULL: Arch = Arch {
        channels: [32, 64, 128, 256],
        bottleneck: 128,
    };

    /// Every width divided by `div` (spatial sizes are unchanged).
    pub fn reduced(div: usize) -> Arch {
        let d = |v: usize| (v / div).max(1);
        Arch {
            channels: Self::FULL.channels.map(d),
            bottleneck: d(Self::FULL.bottleneck),
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn flat(&self) -> usize {
        let s = self.spatial_encoder()[3];
        s * s * self.channels[3]
    }

    fn spatial_encoder(&self) -> [usize; 4] {
        let mut s = SPEC_SIZE;
        [0, 1, 2, 3].map(|i| {
            s = conv_out(s, KERNELS[i]);
            s
        })
    }

    /// Layer-by-layer shapes.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        use Activation::*;
        let [c1, c2, c3, c4] = self.channels;
        let enc = self.spatial_encoder();
        let flat = self.flat();
        let d7 = tconv_out(1, KERNELS[6]);
        let d8 = tconv_out(d7, KERNELS[7]);
        let d9 = tconv_out(d8, KERNELS[8]);
        vec![
            LayerSpec::conv(SPEC_SIZE, 1, c1, KERNELS[0], Relu),
            LayerSpec::conv(enc[0], c1, c2, KERNELS[1], Relu),
            LayerSpec::conv(enc[1], c2, c3, KERNELS[2], Relu),
            LayerSpec::conv(enc[2], c3, c4, KERNELS[3], Relu),
            LayerSpec::dense(flat, self.bottleneck, None),
            LayerSpec::dense(self.bottleneck, flat, None),
            LayerSpec::tconv(1, flat, c3, KERNELS[6], Relu),
            LayerSpec::tconv(d7, c3, c2, KERNELS[7], Relu),
            LayerSpec::tconv(d8, c2, c1, KERNELS[8], Relu),
            LayerSpec::tconv(d9, c1, 1, KERNELS[9], Sigmoid),
        ]
    }

    /// Checks the chain is consistent and reproduces the 100x100 image.
    pub fn validate(&self) -> Result<Vec<LayerSpec>> {
        let specs = self.layer_specs();
        for pair in specs.windows(2) {
            if pair[0].out_shape.len() != pair[1].in_shape.len() {
                return Err(Error::shape(pair[1].in_shape, pair[0].out_shape));
            }
        }
        let out = specs[LAYER_COUNT - 1].out_shape;
        let image = Shape::Spatial {
            h: SPEC_SIZE,
            w: SPEC_SIZE,
            c: 1,
        };
        if out != image || specs[0].in_shape != image {
            return Err(Error::shape(image, out));
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weight: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Autoencoder<T>) -> Self {
        Self {
            weight: net.layers.iter().map(|l| vec![T::ZERO; l.weight.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![T::ZERO; l.bias.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<T> {
    arch: Arch,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Autoencoder<T> {
    /// He-uniform weights for ReLU layers, Glorot-uniform for the linear and
    /// sigmoid layers, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        let specs = arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let (fan_in, fan_out) = spec.fans();
                let limit = match spec.activation {
                    Activation::Relu => (6.0 / fan_in).sqrt(),
                    Activation::Sigmoid | Activation::None => (6.0 / (fan_in + fan_out)).sqrt(),
                };
                let weight = (0..spec.weight_len())
                    .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                    .collect();
                Layer {
                    spec,
                    weight,
                    bias: vec![T::ZERO; spec.bias_len()],
                }
            })
            .collect();
        Ok(Self { arch, layers })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        let layers = arch
            .validate()?
            .into_iter()
            .map(|spec| Layer {
                spec,
                weight: vec![T::ZERO; spec.weight_len()],
                bias: vec![T::ZERO; spec.bias_len()],
            })
            .collect();
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Autoencoder<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        Autoencoder {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    /// Runs layers `range` and returns every activation, starting with the input.
    fn forward_range(&self, input: Vec<T>, batch: usize, range: std::ops::Range<usize>) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(range.len() + 1);
        acts.push(input);
        for l in &self.layers[range] {
            let next = layers::forward(&l.spec, &l.weight, &l.bias, acts.last().expect("input"), batch);
            acts.push(next);
        }
        acts
    }

    fn stack(items: &[&[T]], width: usize, what: &str) -> Result<Vec<T>> {
        let mut flat = Vec::with_capacity(items.len() * width);
        for item in items {
            if item.len() != width {
                return Err(Error::shape(format!("{what} of {width} values"), item.len()));
            }
            flat.extend_from_slice(item);
        }
        Ok(flat)
    }

    /// Bottleneck codes for a batch of 100x100 images, `N x bottleneck` flat.
    pub fn encode_batch(&self, images: &[&[T]]) -> Result<Vec<T>> {
        let input = Self::stack(images, SPEC_SIZE * SPEC_SIZE, "image")?;
        let mut acts = self.forward_range(input, images.len(), 0..ENCODER_LAST + 1);
        Ok(acts.pop().expect("bottleneck"))
    }

    pub fn encode(&self, image: &[T]) -> Result<Vec<T>> {
        self.encode_batch(&[image])
    }

    /// Decoded images for a batch of codes, `N x 10000` flat.
    pub fn decode_batch(&self, codes: &[&[T]]) -> Result<Vec<T>> {
        let input = Self::stack(codes, self.arch.bottleneck, "embedding")?;
        let mut acts = self.forward_range(input, codes.len(), ENCODER_LAST + 1..LAYER_COUNT);
        Ok(acts.pop().expect("image"))
    }

    pub fn decode(&self, code: &[T]) -> Result<Vec<T>> {
        self.decode_batch(&[code])
    }

    pub fn reconstruct_batch(&self, images: &[&[T]]) -> Result<Vec<T>> {
        let input = Self::stack(images, SPEC_SIZE * SPEC_SIZE, "image")?;
        let mut acts = self.forward_range(input, images.len(), 0..LAYER_COUNT);
        Ok(acts.pop().expect("image"))
    }

    /// Shapes of every intermediate activation for one sample.
    pub fn shape_chain(&self) -> Vec<Shape> {
        std::iter::once(self.layers[0].spec.in_shape)
            .chain(self.layers.iter().map(|l| l.spec.out_shape))
            .collect()
    }

    /// Mean squared reconstruction error over pixels and batch.
    pub fn loss(&self, images: &[&[T]]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::invalid("loss of an empty batch"));
        }
        let input = Self::stack(images, SPEC_SIZE * SPEC_SIZE, "image")?;
        let recon = self.reconstruct_batch(images)?;
        Ok(mse(&recon, &input))
    }

    /// Loss and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, images: &[&[T]]) -> Result<(f64, Gradients<T>)> {
        if images.is_empty() {
            return Err(Error::invalid("gradient of an empty batch"));
        }
        let batch = images.len();
        let input = Self::stack(images, SPEC_SIZE * SPEC_SIZE, "image")?;
        let acts = self.forward_range(input, batch, 0..LAYER_COUNT);
        let (target, recon) = (&acts[0], &acts[LAYER_COUNT]);
        let loss = mse(recon, target);

        let scale = T::from_f64(2.0 / recon.len() as f64);
        let mut grad: Vec<T> = recon.iter().zip(target).map(|(&y, &x)| scale * (y - x)).collect();
        let mut grads = Gradients::zeros_like(self);
        for (i, l) in self.layers.iter().enumerate().rev() {
            let dx = layers::backward(
                &l.spec,
                &l.weight,
                &acts[i],
                &acts[i + 1],
                &grad,
                batch,
                &mut grads.weight[i],
                &mut grads.bias[i],
                i > 0,
            );
            match dx {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        Ok((loss, grads))
    }
}

fn mse<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    sum / a.len() as f64
}
