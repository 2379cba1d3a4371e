//! Learned photometric transform: a reduced single-domain CycleGAN.
//!
//! One image collection is split into two disjoint halves standing in for
//! the two acquisition "times"; G maps t1-style to t2-style and F back.
//! Generators are top-level residual — `clamp(x + body(x), -1, 1)` — so the
//! identity-initialized variant (zero final conv) is exactly the identity
//! map, and outputs stay bounded without a tanh head. The adversarial terms
//! use the least-squares form; the objective is the two GAN terms plus
//! `cycle_lambda` times the L1 cycle-consistency error.

use crate::error::{CdrlError, Result};
use crate::grid::{ImageGrid, ValueSpace};
use crate::model::PatchDiscriminator;
use crate::nn::gradcheck::HasParams;
use crate::nn::layers::{
    clamp_backward, clamp_forward, leaky_relu, leaky_relu_backward, mae_grad, mae_tensor,
    upsample2x, upsample2x_backward, Conv2d, ConvCtx, InCtx, Init, InstanceNorm, PadMode, Param,
};
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::{Adam, AdamConfig};
use crate::pseudopair::DomainSplit;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const RES_BLOCKS: usize = 3;

/// Style training settings; these are exactly the config-file keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_cycle_lambda")]
    pub cycle_lambda: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    5
}
fn default_base_width() -> usize {
    64
}
fn default_cycle_lambda() -> f64 {
    10.0
}
fn default_lr() -> f64 {
    2e-4
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            base_width: default_base_width(),
            cycle_lambda: default_cycle_lambda(),
            lr: default_lr(),
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Residual generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResBlock<T> {
    c1: Conv2d<T>,
    n1: InstanceNorm<T>,
    c2: Conv2d<T>,
    n2: InstanceNorm<T>,
}

struct ResBlockCtx<T> {
    c1: ConvCtx<T>,
    n1: InCtx<T>,
    mask: Vec<bool>,
    c2: ConvCtx<T>,
    n2: InCtx<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(c, c, 3, 1, 1, Init::Normal(0.02), rng),
            n1: InstanceNorm::new(c),
            c2: Conv2d::new(c, c, 3, 1, 1, Init::Normal(0.02), rng),
            n2: InstanceNorm::new(c),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ResBlockCtx<T>) {
        let (h1, c1) = self.c1.forward(x);
        let (h2, n1) = self.n1.forward(&h1);
        let (h3, mask) = leaky_relu(&h2, 0.0);
        let (h4, c2) = self.c2.forward(&h3);
        let (h5, n2) = self.n2.forward(&h4);
        (
            x.add(&h5),
            ResBlockCtx {
                c1,
                n1,
                mask,
                c2,
                n2,
            },
        )
    }

    fn backward(&mut self, ctx: &ResBlockCtx<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dh4 = self.n2.backward(&ctx.n2, dy);
        let dh3 = self.c2.backward(&ctx.c2, &dh4);
        let dh2 = leaky_relu_backward(&dh3, &ctx.mask, 0.0);
        let dh1 = self.n1.backward(&ctx.n1, &dh2);
        let dx_body = self.c1.backward(&ctx.c1, &dh1);
        dy.add(&dx_body)
    }
}

impl<T: Scalar> HasParams<T> for ResBlock<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = self.c1.params_mut();
        ps.extend(self.n1.params_mut());
        ps.extend(self.c2.params_mut());
        ps.extend(self.n2.params_mut());
        ps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorInit {
    /// Final body conv randomly initialized; the map starts noisy.
    Random,
    /// Final body conv zero-initialized; the map starts as the identity.
    Identity,
}

#[derive(Debug, Clone)]
pub struct StyleGenerator<T> {
    pub base_width: usize,
    stem: Conv2d<T>,
    n_stem: InstanceNorm<T>,
    d1: Conv2d<T>,
    n_d1: InstanceNorm<T>,
    d2: Conv2d<T>,
    n_d2: InstanceNorm<T>,
    res: Vec<ResBlock<T>>,
    u1: Conv2d<T>,
    n_u1: InstanceNorm<T>,
    u2: Conv2d<T>,
    n_u2: InstanceNorm<T>,
    out: Conv2d<T>,
}

pub struct GenCtx<T> {
    stem: (ConvCtx<T>, InCtx<T>, Vec<bool>),
    d1: (ConvCtx<T>, InCtx<T>, Vec<bool>),
    d2: (ConvCtx<T>, InCtx<T>, Vec<bool>),
    res: Vec<ResBlockCtx<T>>,
    u1: (ConvCtx<T>, InCtx<T>, Vec<bool>),
    u2: (ConvCtx<T>, InCtx<T>, Vec<bool>),
    out: ConvCtx<T>,
    clamp_mask: Vec<bool>,
}

impl<T: Scalar> StyleGenerator<T> {
    pub fn new(base_width: usize, init: GeneratorInit, rng: &mut ChaCha8Rng) -> Self {
        let b = base_width;
        let out_init = match init {
            GeneratorInit::Random => Init::Normal(0.02),
            GeneratorInit::Identity => Init::Zero,
        };
        Self {
            base_width: b,
            stem: Conv2d::with_pad_mode(3, b, 7, 1, 3, PadMode::Replicate, Init::Normal(0.02), rng),
            n_stem: InstanceNorm::new(b),
            d1: Conv2d::new(b, 2 * b, 3, 2, 1, Init::Normal(0.02), rng),
            n_d1: InstanceNorm::new(2 * b),
            d2: Conv2d::new(2 * b, 2 * b, 3, 2, 1, Init::Normal(0.02), rng),
            n_d2: InstanceNorm::new(2 * b),
            res: (0..RES_BLOCKS).map(|_| ResBlock::new(2 * b, rng)).collect(),
            u1: Conv2d::new(2 * b, b, 3, 1, 1, Init::Normal(0.02), rng),
            n_u1: InstanceNorm::new(b),
            u2: Conv2d::new(b, b, 3, 1, 1, Init::Normal(0.02), rng),
            n_u2: InstanceNorm::new(b),
            out: Conv2d::with_pad_mode(b, 3, 7, 1, 3, PadMode::Replicate, out_init, rng),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != 3 {
            return Err(CdrlError::Shape(format!("expected 3 channels, got {}", x.c)));
        }
        if x.h % 4 != 0 || x.w % 4 != 0 {
            return Err(CdrlError::Shape(format!(
                "style generator needs H, W divisible by 4, got {}x{}",
                x.h, x.w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GenCtx<T>)> {
        self.check_input(x)?;
        let stage = |conv: &Conv2d<T>, norm: &InstanceNorm<T>, input: &Tensor<T>| {
            let (z, cctx) = conv.forward(input);
            let (n, nctx) = norm.forward(&z);
            let (a, mask) = leaky_relu(&n, 0.0);
            (a, (cctx, nctx, mask))
        };
        let (a0, stem) = stage(&self.stem, &self.n_stem, x);
        let (a1, d1) = stage(&self.d1, &self.n_d1, &a0);
        let (a2, d2) = stage(&self.d2, &self.n_d2, &a1);
        let mut r = a2;
        let mut res_ctx = Vec::with_capacity(self.res.len());
        for rb in &self.res {
            let (next, ctx) = rb.forward(&r);
            res_ctx.push(ctx);
            r = next;
        }
        let (au1, u1) = stage(&self.u1, &self.n_u1, &upsample2x(&r));
        let (au2, u2) = stage(&self.u2, &self.n_u2, &upsample2x(&au1));
        let (body, out) = self.out.forward(&au2);
        let (y, clamp_mask) = clamp_forward(&x.add(&body), -1.0, 1.0);
        Ok((
            y,
            GenCtx {
                stem,
                d1,
                d2,
                res: res_ctx,
                u1,
                u2,
                out,
                clamp_mask,
            },
        ))
    }

    pub fn backward(&mut self, ctx: &GenCtx<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dpre = clamp_backward(dy, &ctx.clamp_mask);
        let dau2 = self.out.backward(&ctx.out, &dpre);
        let unstage = |conv: &mut Conv2d<T>,
                       norm: &mut InstanceNorm<T>,
                       st: &(ConvCtx<T>, InCtx<T>, Vec<bool>),
                       d: &Tensor<T>| {
            let dn = leaky_relu_backward(d, &st.2, 0.0);
            let dz = norm.backward(&st.1, &dn);
            conv.backward(&st.0, &dz)
        };
        let dup2 = unstage(&mut self.u2, &mut self.n_u2, &ctx.u2, &dau2);
        let dau1 = upsample2x_backward(&dup2);
        let dup1 = unstage(&mut self.u1, &mut self.n_u1, &ctx.u1, &dau1);
        let mut dr = upsample2x_backward(&dup1);
        for (rb, rctx) in self.res.iter_mut().zip(&ctx.res).rev() {
            dr = rb.backward(rctx, &dr);
        }
        let da1 = unstage(&mut self.d2, &mut self.n_d2, &ctx.d2, &dr);
        let da0 = unstage(&mut self.d1, &mut self.n_d1, &ctx.d1, &da1);
        let dx_body = unstage(&mut self.stem, &mut self.n_stem, &ctx.stem, &da0);
        // Top-level residual: the input also feeds the output directly.
        dpre.add(&dx_body)
    }
}

impl<T: Scalar> HasParams<T> for StyleGenerator<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        ps.extend(self.stem.params_mut());
        ps.extend(self.n_stem.params_mut());
        ps.extend(self.d1.params_mut());
        ps.extend(self.n_d1.params_mut());
        ps.extend(self.d2.params_mut());
        ps.extend(self.n_d2.params_mut());
        for rb in &mut self.res {
            ps.extend(rb.params_mut());
        }
        ps.extend(self.u1.params_mut());
        ps.extend(self.n_u1.params_mut());
        ps.extend(self.u2.params_mut());
        ps.extend(self.n_u2.params_mut());
        ps.extend(self.out.params_mut());
        ps
    }
}

// ---------------------------------------------------------------------------
// The full style model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StyleModel<T> {
    /// t1-style → t2-style; the generator used to build pseudo pairs.
    pub g: StyleGenerator<T>,
    /// t2-style → t1-style.
    pub f: StyleGenerator<T>,
    pub d_t1: PatchDiscriminator<T>,
    pub d_t2: PatchDiscriminator<T>,
    pub cycle_lambda: f64,
    pub base_width: usize,
}

impl<T: Scalar> StyleModel<T> {
    pub fn new(base_width: usize, cycle_lambda: f64, init: GeneratorInit, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = StyleGenerator::new(base_width, init, &mut rng);
        let f = StyleGenerator::new(base_width, init, &mut rng);
        let d_t1 = PatchDiscriminator::new(3, base_width.min(32), &mut rng);
        let d_t2 = PatchDiscriminator::new(3, base_width.min(32), &mut rng);
        Self {
            g,
            f,
            d_t1,
            d_t2,
            cycle_lambda,
            base_width,
        }
    }

    /// Applies G to a model-space grid; output keeps shape and stays in
    /// [-1, 1].
    pub fn apply(&self, img: &ImageGrid) -> Result<ImageGrid> {
        if img.space() != ValueSpace::Model {
            return Err(CdrlError::Shape("apply_style expects model space".into()));
        }
        let x = Tensor::<T>::from_grid(img);
        let (y, _) = self.g.forward(&x)?;
        Ok(y.to_grid(ValueSpace::Model))
    }
}

impl<T: Scalar> HasParams<T> for StyleModel<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = self.g.params_mut();
        ps.extend(self.f.params_mut());
        ps.extend(self.d_t1.params_mut());
        ps.extend(self.d_t2.params_mut());
        ps
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One logged step; `l_total` is recorded as the exact float sum
/// `l_gan_g + l_gan_f + cycle_lambda · l_cyc`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StyleLossRecord {
    pub step: usize,
    pub l_gan_g: f64,
    pub l_gan_f: f64,
    pub l_cyc: f64,
    pub l_total: f64,
}

/// Least-squares adversarial loss: mean((logits − target)²).
fn lsgan_loss<T: Scalar>(logits: &Tensor<T>, target: f64) -> f64 {
    let mut s = 0.0f64;
    for &l in &logits.data {
        let d = l.to_f64_c() - target;
        s += d * d;
    }
    s / logits.len() as f64
}

fn lsgan_grad<T: Scalar>(logits: &Tensor<T>, target: f64, scale: f64) -> Tensor<T> {
    let n = logits.len() as f64;
    let data = logits
        .data
        .iter()
        .map(|&l| T::from_f64_c(scale * 2.0 * (l.to_f64_c() - target) / n))
        .collect();
    Tensor {
        c: logits.c,
        h: logits.h,
        w: logits.w,
        data,
    }
}

/// Trains the reduced style model on the two domain sides of `split`.
///
/// `sources` are unit-space single images; both sides must be nonempty.
/// Returns the trained model and the per-step loss history.
pub fn train_style_model(
    sources: &[ImageGrid],
    split: &DomainSplit,
    cfg: &StyleConfig,
) -> Result<(StyleModel<f32>, Vec<StyleLossRecord>)> {
    if split.t1_ids.is_empty() {
        return Err(CdrlError::EmptyDomain("t1 side of the split".into()));
    }
    if split.t2_ids.is_empty() {
        return Err(CdrlError::EmptyDomain("t2 side of the split".into()));
    }
    let to_model = |ids: &[usize]| -> Result<Vec<Tensor<f32>>> {
        ids.iter()
            .map(|&i| Ok(Tensor::from_grid(&sources[i].to_model()?)))
            .collect()
    };
    let xs = to_model(&split.t1_ids)?;
    let ys = to_model(&split.t2_ids)?;

    let mut model = StyleModel::<f32>::new(
        cfg.base_width,
        cfg.cycle_lambda,
        GeneratorInit::Random,
        cfg.seed,
    );
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut opt_gen = Adam::new(adam_cfg);
    let mut opt_disc = Adam::new(adam_cfg);

    let steps_per_epoch = xs.len().min(ys.len());
    let mut history = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order_x: Vec<usize> = (0..xs.len()).collect();
        let mut order_y: Vec<usize> = (0..ys.len()).collect();
        order_x.shuffle(&mut ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        ));
        order_y.shuffle(&mut ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1,
        ));
        for i in 0..steps_per_epoch {
            let x = &xs[order_x[i]];
            let y = &ys[order_y[i]];
            let rec = style_train_step(&mut model, &mut opt_gen, &mut opt_disc, x, y, step)?;
            if !rec.l_total.is_finite() {
                return Err(CdrlError::TrainingDiverged {
                    step,
                    last_checkpoint: None,
                });
            }
            history.push(rec);
            step += 1;
        }
    }
    Ok((model, history))
}

/// One generator update then one update of both domain discriminators.
/// Losses are recorded at the pre-update parameters.
fn style_train_step(
    model: &mut StyleModel<f32>,
    opt_gen: &mut Adam,
    opt_disc: &mut Adam,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    step: usize,
) -> Result<StyleLossRecord> {
    let lambda = model.cycle_lambda;

    // Forward all four translation paths.
    let (fake_y, g_ctx1) = model.g.forward(x)?;
    let (rec_x, f_ctx1) = model.f.forward(&fake_y)?;
    let (fake_x, f_ctx2) = model.f.forward(y)?;
    let (rec_y, g_ctx2) = model.g.forward(&fake_x)?;

    let (logits_fake_y, d2_fake_ctx) = model.d_t2.forward(&fake_y);
    let (logits_fake_x, d1_fake_ctx) = model.d_t1.forward(&fake_x);

    let l_gan_g = lsgan_loss(&logits_fake_y, 1.0);
    let l_gan_f = lsgan_loss(&logits_fake_x, 1.0);
    let l_cyc = mae_tensor(&rec_x, x) + mae_tensor(&rec_y, y);
    let l_total = l_gan_g + l_gan_f + lambda * l_cyc;

    // Generator update.
    model.g.zero_grads();
    model.f.zero_grads();
    let dlogits_fy = lsgan_grad(&logits_fake_y, 1.0, 1.0);
    let mut dfake_y = model.d_t2.backward(&d2_fake_ctx, &dlogits_fy);
    let drec_x = mae_grad(&rec_x, x, lambda);
    dfake_y.add_assign(&model.f.backward(&f_ctx1, &drec_x));
    model.g.backward(&g_ctx1, &dfake_y);

    let dlogits_fx = lsgan_grad(&logits_fake_x, 1.0, 1.0);
    let mut dfake_x = model.d_t1.backward(&d1_fake_ctx, &dlogits_fx);
    let drec_y = mae_grad(&rec_y, y, lambda);
    dfake_x.add_assign(&model.g.backward(&g_ctx2, &drec_y));
    model.f.backward(&f_ctx2, &dfake_x);

    let mut gen_params = model.g.params_mut();
    gen_params.extend(model.f.params_mut());
    opt_gen.step(&mut gen_params);

    // The generator pass polluted the discriminator gradients; discard.
    model.d_t1.zero_grads();
    model.d_t2.zero_grads();

    // Discriminator update on real vs the (pre-update-G) fakes. The cached
    // discriminator contexts are still valid: only generator parameters
    // changed above.
    let (logits_real_y, d2_real_ctx) = model.d_t2.forward(y);
    model
        .d_t2
        .backward(&d2_real_ctx, &lsgan_grad(&logits_real_y, 1.0, 0.5));
    model
        .d_t2
        .backward(&d2_fake_ctx, &lsgan_grad(&logits_fake_y, 0.0, 0.5));

    let (logits_real_x, d1_real_ctx) = model.d_t1.forward(x);
    model
        .d_t1
        .backward(&d1_real_ctx, &lsgan_grad(&logits_real_x, 1.0, 0.5));
    model
        .d_t1
        .backward(&d1_fake_ctx, &lsgan_grad(&logits_fake_x, 0.0, 0.5));

    let mut disc_params = model.d_t1.params_mut();
    disc_params.extend(model.d_t2.params_mut());
    opt_disc.step(&mut disc_params);

    Ok(StyleLossRecord {
        step,
        l_gan_g,
        l_gan_f,
        l_cyc,
        l_total,
    })
}

/// Mean cycle loss per epoch from a step history.
pub fn epoch_cycle_means(history: &[StyleLossRecord], steps_per_epoch: usize) -> Vec<f64> {
    history
        .chunks(steps_per_epoch)
        .map(|chunk| chunk.iter().map(|r| r.l_cyc).sum::<f64>() / chunk.len() as f64)
        .collect()
}
