//! Patch discriminator: each output logit judges one receptive-field patch.
//!
//! Three stride-2 4×4 convolutions then a stride-1 3×3 head, so a H×W input
//! yields an (H/8)×(W/8) logit grid. Receptive field grows as
//! rf ← rf + (k−1)·jump with jump doubling at each stride-2 layer:
//! 4 → 10 → 22 → 38 pixels for the default depth.

use crate::nn::gradcheck::HasParams;
use crate::nn::layers::{leaky_relu, leaky_relu_backward, Conv2d, ConvCtx, Init, Param};
use crate::nn::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

pub const DISC_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T> {
    pub base_width: usize,
    convs: Vec<Conv2d<T>>,
    head: Conv2d<T>,
}

pub struct DiscCtx<T> {
    convs: Vec<ConvCtx<T>>,
    masks: Vec<Vec<bool>>,
    head: ConvCtx<T>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(in_c: usize, base_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let b = base_width;
        let convs = vec![
            Conv2d::new(in_c, b, 4, 2, 1, Init::Normal(0.02), rng),
            Conv2d::new(b, 2 * b, 4, 2, 1, Init::Normal(0.02), rng),
            Conv2d::new(2 * b, 4 * b, 4, 2, 1, Init::Normal(0.02), rng),
        ];
        let head = Conv2d::new(4 * b, 1, 3, 1, 1, Init::Normal(0.02), rng);
        Self {
            base_width,
            convs,
            head,
        }
    }

    /// Logit grid spatial size for an H×W input.
    pub fn logit_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h / 8, w / 8)
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, DiscCtx<T>) {
        let mut cur = x.clone();
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut masks = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (y, ctx) = conv.forward(&cur);
            let (a, mask) = leaky_relu(&y, DISC_LEAKY_SLOPE);
            convs.push(ctx);
            masks.push(mask);
            cur = a;
        }
        let (logits, head) = self.head.forward(&cur);
        (logits, DiscCtx { convs, masks, head })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, ctx: &DiscCtx<T>, dlogits: &Tensor<T>) -> Tensor<T> {
        let mut d = self.head.backward(&ctx.head, dlogits);
        for i in (0..self.convs.len()).rev() {
            let dpre = leaky_relu_backward(&d, &ctx.masks[i], DISC_LEAKY_SLOPE);
            d = self.convs[i].backward(&ctx.convs[i], &dpre);
        }
        d
    }
}

impl<T: Scalar> HasParams<T> for PatchDiscriminator<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        for c in &mut self.convs {
            ps.extend(c.params_mut());
        }
        ps.extend(self.head.params_mut());
        ps
    }
}
