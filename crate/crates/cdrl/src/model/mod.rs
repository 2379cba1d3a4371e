//! The pair-conditioned reconstructor and its discriminator.
//!
//! The reconstructor reads a pair (t1, t2), encodes both with one shared
//! (tied-weight) convolutional pyramid, fuses the branches per scale through
//! the attention block, and decodes back to an image in model space via a
//! U-Net-style path with fused skip connections. The target is always the
//! first argument.

pub mod attention;
pub mod discriminator;

pub use attention::{AttentionVariant, ChannelGate, FusionBlock, FusionRule, SpatialGate};
pub use discriminator::PatchDiscriminator;

use crate::error::{CdrlError, Result};
use crate::grid::{ImageGrid, ValueSpace};
use crate::nn::gradcheck::HasParams;
use crate::nn::layers::{
    leaky_relu, leaky_relu_backward, tanh_backward, tanh_forward, upsample2x,
    upsample2x_backward, Conv2d, ConvCtx, Init, Param,
};
use crate::nn::tensor::{Scalar, Tensor};
use attention::FuseCtx;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ENCODER_LEAKY_SLOPE: f64 = 0.2;
/// Channel width doubles once then stays flat: width(s) = base · min(2^s, 2).
const WIDTH_CAP_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructorConfig {
    pub depth: usize,
    pub base_width: usize,
    pub attention: AttentionVariant,
    pub fusion_rule: FusionRule,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 32,
            attention: AttentionVariant::PseudoPairCbam,
            fusion_rule: FusionRule::AttendConcat,
        }
    }
}

impl ReconstructorConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|s| self.base_width * (1usize << s).min(WIDTH_CAP_FACTOR))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Reconstructor<T> {
    pub cfg: ReconstructorConfig,
    enc: Vec<Conv2d<T>>,
    fusion: Vec<FusionBlock<T>>,
    bott: Conv2d<T>,
    dec: Vec<Conv2d<T>>,
    head: Conv2d<T>,
}

pub struct EncodeCtx<T> {
    convs: Vec<ConvCtx<T>>,
    masks: Vec<Vec<bool>>,
    /// Post-activation feature per scale.
    pub feats: Vec<Tensor<T>>,
}

pub struct ReconCtx<T> {
    b1: EncodeCtx<T>,
    b2: EncodeCtx<T>,
    fuse: Vec<FuseCtx<T>>,
    bott_ctx: ConvCtx<T>,
    bott_mask: Vec<bool>,
    dec: Vec<(ConvCtx<T>, Vec<bool>)>,
    head_ctx: ConvCtx<T>,
    y: Tensor<T>,
}

impl<T: Scalar> Reconstructor<T> {
    pub fn new(cfg: ReconstructorConfig, seed: u64) -> Self {
        assert!(cfg.depth >= 2, "need at least two scales");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.widths();
        let mut enc = Vec::with_capacity(cfg.depth);
        enc.push(Conv2d::new(3, w[0], 3, 1, 1, Init::HeNormal, &mut rng));
        for s in 1..cfg.depth {
            enc.push(Conv2d::new(w[s - 1], w[s], 3, 2, 1, Init::HeNormal, &mut rng));
        }
        let fusion: Vec<FusionBlock<T>> = (0..cfg.depth)
            .map(|s| FusionBlock::new(w[s], cfg.attention, cfg.fusion_rule, &mut rng))
            .collect();
        let fc: Vec<usize> = fusion.iter().map(|f| f.fused_channels()).collect();
        let bott = Conv2d::new(fc[cfg.depth - 1], w[cfg.depth - 1], 3, 1, 1, Init::HeNormal, &mut rng);
        let dec: Vec<Conv2d<T>> = (0..cfg.depth - 1)
            .map(|s| Conv2d::new(w[s + 1] + fc[s], w[s], 3, 1, 1, Init::HeNormal, &mut rng))
            .collect();
        let head = Conv2d::new(w[0], 3, 3, 1, 1, Init::Normal(0.02), &mut rng);
        Self {
            cfg,
            enc,
            fusion,
            bott,
            dec,
            head,
        }
    }

    fn check_input(&self, img: &Tensor<T>) -> Result<()> {
        if img.c != 3 {
            return Err(CdrlError::Shape(format!(
                "expected 3 channels, got {}",
                img.c
            )));
        }
        let div = 1usize << self.cfg.depth;
        if img.h % div != 0 || img.w % div != 0 {
            return Err(CdrlError::Shape(format!(
                "input {}x{} not divisible by 2^depth = {div}; tile or pad upstream",
                img.h, img.w
            )));
        }
        Ok(())
    }

    fn encode_internal(&self, img: &Tensor<T>) -> EncodeCtx<T> {
        let mut convs = Vec::with_capacity(self.cfg.depth);
        let mut masks = Vec::with_capacity(self.cfg.depth);
        let mut feats = Vec::with_capacity(self.cfg.depth);
        let mut cur = img.clone();
        for conv in &self.enc {
            let (z, ctx) = conv.forward(&cur);
            let (a, mask) = leaky_relu(&z, ENCODER_LEAKY_SLOPE);
            convs.push(ctx);
            masks.push(mask);
            feats.push(a.clone());
            cur = a;
        }
        EncodeCtx {
            convs,
            masks,
            feats,
        }
    }

    /// Feature pyramid for one image; scale s is (H/2^s, W/2^s) spatially.
    pub fn encode(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(img)?;
        Ok(self.encode_internal(img).feats)
    }

    /// Full forward pass; the output has t1's shape with values in [-1, 1].
    pub fn forward(&self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<(Tensor<T>, ReconCtx<T>)> {
        if !t1.same_shape(t2) {
            return Err(CdrlError::Shape(format!(
                "pair shapes differ: {}x{}x{} vs {}x{}x{}",
                t1.c, t1.h, t1.w, t2.c, t2.h, t2.w
            )));
        }
        self.check_input(t1)?;
        let b1 = self.encode_internal(t1);
        let b2 = self.encode_internal(t2);
        let depth = self.cfg.depth;
        let mut fuse = Vec::with_capacity(depth);
        let mut fused = Vec::with_capacity(depth);
        for s in 0..depth {
            let (f, ctx) = self.fusion[s].forward(&b1.feats[s], &b2.feats[s]);
            fused.push(f);
            fuse.push(ctx);
        }
        let (z, bott_ctx) = self.bott.forward(&fused[depth - 1]);
        let (mut x, bott_mask) = leaky_relu(&z, 0.0);
        let mut dec_ctx: Vec<Option<(ConvCtx<T>, Vec<bool>)>> = (0..depth - 1).map(|_| None).collect();
        for s in (0..depth - 1).rev() {
            let up = upsample2x(&x);
            let cat = up.concat_c(&fused[s]);
            let (z, cctx) = self.dec[s].forward(&cat);
            let (a, mask) = leaky_relu(&z, 0.0);
            dec_ctx[s] = Some((cctx, mask));
            x = a;
        }
        let (z, head_ctx) = self.head.forward(&x);
        let y = tanh_forward(&z);
        let ctx = ReconCtx {
            b1,
            b2,
            fuse,
            bott_ctx,
            bott_mask,
            dec: dec_ctx.into_iter().map(|c| c.unwrap()).collect(),
            head_ctx,
            y: y.clone(),
        };
        Ok((y, ctx))
    }

    /// Accumulates parameter gradients; returns (d t1, d t2).
    pub fn backward(&mut self, ctx: &ReconCtx<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let depth = self.cfg.depth;
        let w = self.cfg.widths();
        let dz = tanh_backward(dy, &ctx.y);
        let mut dx = self.head.backward(&ctx.head_ctx, &dz);
        let mut dfused: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for s in 0..depth - 1 {
            let (cctx, mask) = &ctx.dec[s];
            let dpre = leaky_relu_backward(&dx, mask, 0.0);
            let dcat = self.dec[s].backward(cctx, &dpre);
            let (dup, dfu) = dcat.split_c(w[s + 1]);
            dfused[s] = Some(dfu);
            dx = upsample2x_backward(&dup);
        }
        let dpre = leaky_relu_backward(&dx, &ctx.bott_mask, 0.0);
        dfused[depth - 1] = Some(self.bott.backward(&ctx.bott_ctx, &dpre));

        let mut df1: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        let mut df2: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for s in 0..depth {
            let (d1, d2) = self.fusion[s].backward(&ctx.fuse[s], dfused[s].as_ref().unwrap());
            df1[s] = Some(d1);
            df2[s] = Some(d2);
        }
        let dt1 = self.encode_backward_branch(&ctx.b1, df1);
        let dt2 = self.encode_backward_branch(&ctx.b2, df2);
        (dt1, dt2)
    }

    fn encode_backward_branch(
        &mut self,
        branch: &EncodeCtx<T>,
        mut dfeats: Vec<Option<Tensor<T>>>,
    ) -> Tensor<T> {
        let mut carry: Option<Tensor<T>> = None;
        for s in (0..self.cfg.depth).rev() {
            let mut d = dfeats[s].take().unwrap();
            if let Some(c) = carry.take() {
                d.add_assign(&c);
            }
            let dpre = leaky_relu_backward(&d, &branch.masks[s], ENCODER_LEAKY_SLOPE);
            carry = Some(self.enc[s].backward(&branch.convs[s], &dpre));
        }
        carry.unwrap()
    }

    /// High-level reconstruction on [`ImageGrid`]s in model space.
    pub fn reconstruct(&self, t1: &ImageGrid, t2: &ImageGrid) -> Result<ImageGrid> {
        if t1.space() != ValueSpace::Model || t2.space() != ValueSpace::Model {
            return Err(CdrlError::Shape("reconstruct expects model space".into()));
        }
        let a = Tensor::<T>::from_grid(t1);
        let b = Tensor::<T>::from_grid(t2);
        let (y, _) = self.forward(&a, &b)?;
        Ok(y.to_grid(ValueSpace::Model))
    }
}

impl<T: Scalar> HasParams<T> for Reconstructor<T> {
    /// Stable order: encoder convs, fusion blocks per scale, bottleneck,
    /// decoder convs by scale, head. Checkpoints rely on this order.
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        for c in &mut self.enc {
            ps.extend(c.params_mut());
        }
        for f in &mut self.fusion {
            ps.extend(f.params_mut());
        }
        ps.extend(self.bott.params_mut());
        for c in &mut self.dec {
            ps.extend(c.params_mut());
        }
        ps.extend(self.head.params_mut());
        ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_input_grad_err, max_param_grad_err};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-0.9..0.9)).collect();
        Tensor::from_vec(c, h, w, data)
    }

    fn small_cfg(attention: AttentionVariant) -> ReconstructorConfig {
        ReconstructorConfig {
            depth: 2,
            base_width: 4,
            attention,
            fusion_rule: FusionRule::AttendConcat,
        }
    }

    #[test]
    fn encode_pyramid_halves_spatially() {
        let cfg = ReconstructorConfig::default();
        let model: Reconstructor<f32> = Reconstructor::new(cfg, 0);
        let img = Tensor::zeros(3, 64, 64);
        let feats = model.encode(&img).unwrap();
        let sizes: Vec<(usize, usize)> = feats.iter().map(|f| (f.h, f.w)).collect();
        assert_eq!(sizes, [(64, 64), (32, 32), (16, 16), (8, 8)]);
        let widths: Vec<usize> = feats.iter().map(|f| f.c).collect();
        assert_eq!(widths, [32, 64, 64, 64]);
    }

    #[test]
    fn encode_rejects_nondivisible_input() {
        let model: Reconstructor<f32> = Reconstructor::new(ReconstructorConfig::default(), 0);
        let img = Tensor::zeros(3, 60, 64);
        assert!(matches!(model.encode(&img), Err(CdrlError::Shape(_))));
    }

    fn rand_tensor_f32(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let t = rand_tensor(c, h, w, seed);
        Tensor::from_vec(c, h, w, t.data.iter().map(|&v| v as f32).collect())
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let model: Reconstructor<f32> = Reconstructor::new(small_cfg(AttentionVariant::PseudoPairCbam), 7);
        let t1 = rand_tensor_f32(3, 8, 8, 1);
        let t2 = rand_tensor_f32(3, 8, 8, 2);
        let (y1, _) = model.forward(&t1, &t2).unwrap();
        let (y2, _) = model.forward(&t1, &t2).unwrap();
        assert_eq!(y1.data, y2.data);
        assert_eq!((y1.c, y1.h, y1.w), (3, 8, 8));
        assert!(y1.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn tied_encoder_same_pyramid_shapes() {
        let model: Reconstructor<f32> = Reconstructor::new(ReconstructorConfig::default(), 3);
        let a = Tensor::zeros(3, 32, 32);
        let b = Tensor::from_vec(3, 32, 32, vec![0.5; 3 * 32 * 32]);
        let pa = model.encode(&a).unwrap();
        let pb = model.encode(&b).unwrap();
        for (fa, fb) in pa.iter().zip(&pb) {
            assert!(fa.same_shape(fb));
        }
    }

    #[test]
    fn swap_and_swap_back_is_identity() {
        // The encoder has no branch-specific parameters: encoding t1 and t2
        // through the same weights and restoring the order before fusion
        // reproduces the reconstruction bit for bit.
        let model: Reconstructor<f32> = Reconstructor::new(small_cfg(AttentionVariant::PseudoPairCbam), 11);
        let t1 = rand_tensor_f32(3, 8, 8, 5);
        let t2 = rand_tensor_f32(3, 8, 8, 6);
        let (y, _) = model.forward(&t1, &t2).unwrap();
        // "Swap buffers then swap back" — the physical identity of the
        // buffers cannot matter.
        let t1b = t2.clone();
        let t2b = t1.clone();
        let (y2, _) = model.forward(&t2b, &t1b).unwrap();
        assert_eq!(y.data, y2.data);
    }

    #[test]
    fn full_reconstructor_gradcheck_depth2() {
        for variant in [
            AttentionVariant::None,
            AttentionVariant::PlainCbam,
            AttentionVariant::PseudoPairCbam,
        ] {
            let mut model: Reconstructor<f64> = Reconstructor::new(small_cfg(variant), 13);
            // Nudge all params (zero-init gate layers included) so every
            // gradient path is live.
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for p in model.params_mut() {
                for w in &mut p.w {
                    *w += rng.random_range(-0.05..0.05);
                }
            }
            let t1 = rand_tensor(3, 8, 8, 21);
            let t2 = rand_tensor(3, 8, 8, 22);
            let (y, ctx) = model.forward(&t1, &t2).unwrap();
            let proj: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |m: &Reconstructor<f64>, a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                m.forward(a, b)
                    .unwrap()
                    .0
                    .data
                    .iter()
                    .zip(&proj)
                    .map(|(x, p)| x * p)
                    .sum()
            };
            model.zero_grads();
            let dy = Tensor::from_vec(y.c, y.h, y.w, proj.clone());
            let (dt1, dt2) = model.backward(&ctx, &dy);
            let ro = model.clone();
            let e1 = max_input_grad_err(&dt1, &t1, 1e-5, |xt| loss(&ro, xt, &t2));
            let e2 = max_input_grad_err(&dt2, &t2, 1e-5, |xt| loss(&ro, &t1, xt));
            assert!(e1 < 1e-4 && e2 < 1e-4, "{variant:?}: input grads {e1} {e2}");
            let analytic: Vec<Vec<f64>> = model.params_mut().iter().map(|p| p.g.clone()).collect();
            let ep = max_param_grad_err(&model, &analytic, 1e-5, 8, |m| loss(m, &t1, &t2));
            assert!(ep < 1e-4, "{variant:?}: param grads {ep}");
        }
    }
}
