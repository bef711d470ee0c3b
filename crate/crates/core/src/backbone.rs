//! Convolutional feature extractor shared by target images and template crops.
//!
//! Three blocks of `[conv3×3 stride 2 → ReLU → conv3×3 stride 1 → ReLU]`, so
//! the total stride is 8 and a `96×96` image becomes a `12×12` token grid.

use crate::image::Image;
use crate::ndgrad::{NdError, Real, Var};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::rng::DetRng;

pub const TOTAL_STRIDE: usize = 8;

/// Spatial token grid produced by the backbone, row-major over `height×width`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    /// `S×d` tokens with `S = height·width`.
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<ConvLayer>,
    in_channels: usize,
    d: usize,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, in_channels: usize, d: usize, rng: &mut DetRng) -> Self {
        let widths = [32, 48, d];
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (b, &w) in widths.iter().enumerate() {
            for (j, stride) in [2, 1].into_iter().enumerate() {
                let name = format!("backbone.{b}.{j}");
                layers.push(ConvLayer {
                    kernel: store.add(format!("{name}.kernel"), &[w, cin, 3, 3], Init::Kaiming, rng),
                    bias: store.add(format!("{name}.bias"), &[w], Init::Zeros, rng),
                    stride,
                });
                cin = w;
            }
        }
        Self {
            layers,
            in_channels,
            d,
        }
    }

    pub fn width(&self) -> usize {
        self.d
    }

    fn run<T: Real>(&self, s: &mut Session<T>, image: &Image) -> Result<FeatureMap, NdError> {
        if image.channels != self.in_channels {
            return Err(NdError::Shape(format!(
                "backbone expects {} channels, got {}",
                self.in_channels, image.channels
            )));
        }
        if !image.height.is_multiple_of(TOTAL_STRIDE) || !image.width.is_multiple_of(TOTAL_STRIDE) || image.height == 0 || image.width == 0 {
            return Err(NdError::Config(format!(
                "input {}×{} is not divisible by the total stride {TOTAL_STRIDE}",
                image.height, image.width
            )));
        }
        let mut x = s.g.constant(image.to_tensor());
        for l in &self.layers {
            let (k, b) = (s.p(l.kernel), s.p(l.bias));
            x = s.g.conv2d(x, k, Some(b), l.stride, 1)?;
            x = s.g.relu(x)?;
        }
        let (h, w) = (image.height / TOTAL_STRIDE, image.width / TOTAL_STRIDE);
        let flat = s.g.reshape(x, &[self.d, h * w])?;
        let tokens = s.g.transpose(flat)?;
        Ok(FeatureMap {
            tokens,
            height: h,
            width: w,
        })
    }

    /// Token grid of a target image.
    pub fn encode_image<T: Real>(&self, s: &mut Session<T>, image: &Image) -> Result<FeatureMap, NdError> {
        self.run(s, image)
    }

    /// Spatial tokens (`s×d`, before pooling) of one template patch.
    pub fn encode_patch<T: Real>(&self, s: &mut Session<T>, patch: &Image) -> Result<Var, NdError> {
        Ok(self.run(s, patch)?.tokens)
    }
}
