//! Losses and the adversarial optimization loop.
//!
//! The objective is `l_total = l_gan_g + lambda_mae · l_mae`: the mean
//! absolute reconstruction error against the source image plus a
//! non-saturating adversarial term. Each step runs one discriminator update
//! then one generator update; the recorded breakdown is always evaluated at
//! the pre-update parameters, and `l_total` is stored as the exact float sum
//! of its recorded components.

use crate::checkpoint;
use crate::error::{CdrlError, Result};
use crate::grid::{ImageGrid, PairSample, Provenance, ValueSpace};
use crate::model::{AttentionVariant, PatchDiscriminator, Reconstructor, ReconstructorConfig};
use crate::nn::layers::{mae_grad, mae_tensor};
use crate::nn::{Adam, AdamConfig, HasParams, Scalar, Tensor};
use crate::pseudopair::augment_pair;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Deterministic seed derivation (splitmix64 over the parts).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn default_lr() -> f64 {
    2e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_batch() -> usize {
    1
}
fn default_lambda() -> f64 {
    100.0
}
fn default_epochs() -> usize {
    4
}
fn default_attention() -> AttentionVariant {
    AttentionVariant::PseudoPairCbam
}
fn default_use_disc() -> bool {
    true
}

/// Reconstructor training settings; these are exactly the config-file keys
/// and unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda_mae: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_attention")]
    pub attention_variant: AttentionVariant,
    #[serde(default = "default_use_disc")]
    pub use_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            batch_size: default_batch(),
            lambda_mae: default_lambda(),
            epochs: default_epochs(),
            seed: 0,
            attention_variant: default_attention(),
            use_discriminator: default_use_disc(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(CdrlError::Param("lr must be > 0".into()));
        }
        if self.lambda_mae < 0.0 {
            return Err(CdrlError::Param("lambda_mae must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(CdrlError::Param("batch_size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CdrlError::Param(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| CdrlError::NotFound(path.to_path_buf()))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// One optimization step's losses; `l_total = l_gan_g + lambda_mae · l_mae`
/// with the recorded floats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_mae: f64,
    pub l_gan_g: f64,
    pub l_gan_d: f64,
    pub l_total: f64,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean absolute error between two grids of identical shape.
pub fn mae_loss(recon: &ImageGrid, target: &ImageGrid) -> Result<f64> {
    if !recon.same_shape(target) {
        return Err(CdrlError::Shape("mae_loss shapes differ".into()));
    }
    let mut s = 0.0f64;
    for (a, b) in recon.data().iter().zip(target.data()) {
        s += (*a as f64 - *b as f64).abs();
    }
    Ok(s / recon.data().len() as f64)
}

/// ln(1 + e^x) evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Discriminator loss −mean log σ(real) − mean log (1 − σ(fake)) in its
/// logit-stable softplus form.
pub fn stable_d_loss(logits_real: &[f64], logits_fake: &[f64]) -> f64 {
    let r: f64 = logits_real.iter().map(|&l| softplus(-l)).sum::<f64>() / logits_real.len() as f64;
    let f: f64 = logits_fake.iter().map(|&l| softplus(l)).sum::<f64>() / logits_fake.len() as f64;
    r + f
}

/// Non-saturating generator loss −mean log σ(fake).
pub fn stable_g_loss(logits_fake: &[f64]) -> f64 {
    logits_fake.iter().map(|&l| softplus(-l)).sum::<f64>() / logits_fake.len() as f64
}

fn logits_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data.iter().map(|v| v.to_f64_c()).collect()
}

/// d stable_d_loss / d logits_real = −σ(−l)/n (times `scale`).
fn d_loss_grad_real<T: Scalar>(logits: &Tensor<T>, scale: f64) -> Tensor<T> {
    let n = logits.len() as f64;
    logits.map(|l| T::from_f64_c(-sigmoid(-l.to_f64_c()) * scale / n))
}

/// d stable_d_loss / d logits_fake = σ(l)/n.
fn d_loss_grad_fake<T: Scalar>(logits: &Tensor<T>, scale: f64) -> Tensor<T> {
    let n = logits.len() as f64;
    logits.map(|l| T::from_f64_c(sigmoid(l.to_f64_c()) * scale / n))
}

/// d stable_g_loss / d logits_fake = −σ(−l)/n.
fn g_loss_grad<T: Scalar>(logits: &Tensor<T>, scale: f64) -> Tensor<T> {
    let n = logits.len() as f64;
    logits.map(|l| T::from_f64_c(-sigmoid(-l.to_f64_c()) * scale / n))
}

/// Evaluates both adversarial losses for a (real, fake) pair of images.
pub fn gan_losses(
    disc: &PatchDiscriminator<f32>,
    real: &ImageGrid,
    fake: &ImageGrid,
) -> Result<(f64, f64)> {
    if !real.same_shape(fake) {
        return Err(CdrlError::Shape("gan_losses shapes differ".into()));
    }
    let (lr, _) = disc.forward(&Tensor::<f32>::from_grid(real));
    let (lf, _) = disc.forward(&Tensor::<f32>::from_grid(fake));
    let (lr, lf) = (logits_f64(&lr), logits_f64(&lf));
    Ok((stable_d_loss(&lr, &lf), stable_g_loss(&lf)))
}

/// `l_gan_g + lambda_mae · l_mae`.
pub fn total_loss(l_gan_g: f64, l_mae: f64, lambda_mae: f64) -> f64 {
    l_gan_g + lambda_mae * l_mae
}

// ---------------------------------------------------------------------------
// Training state and step
// ---------------------------------------------------------------------------

pub const DEFAULT_DISC_BASE_WIDTH: usize = 32;
/// Fraction of the pseudo pairs held out for checkpoint selection.
const VAL_FRACTION: f64 = 0.1;

pub struct TrainState {
    pub recon: Reconstructor<f32>,
    pub disc: PatchDiscriminator<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub global_step: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, model_cfg: &ReconstructorConfig, disc_base: usize) -> Self {
        let recon = Reconstructor::new(*model_cfg, derive_seed(cfg.seed, &[1]));
        let disc = PatchDiscriminator::new(
            3,
            disc_base,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2])),
        );
        Self {
            recon,
            disc,
            opt_g: Adam::new(cfg.adam()),
            opt_d: Adam::new(cfg.adam()),
            global_step: 0,
        }
    }

    fn from_bundle(b: checkpoint::Bundle, cfg: &TrainConfig) -> Self {
        let mut opt_g = b.opt_g;
        let mut opt_d = b.opt_d;
        opt_g.cfg = cfg.adam();
        opt_d.cfg = cfg.adam();
        Self {
            recon: b.recon,
            disc: b.disc,
            opt_g,
            opt_d,
            global_step: b.global_step,
        }
    }
}

fn pair_to_model_tensors(pair: &PairSample) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let t1 = match pair.t1.space() {
        ValueSpace::Model => Tensor::from_grid(&pair.t1),
        ValueSpace::Unit => Tensor::from_grid(&pair.t1.to_model()?),
        ValueSpace::Nonneg => return Err(CdrlError::Shape("nonneg grid in training".into())),
    };
    let t2 = match pair.t2.space() {
        ValueSpace::Model => Tensor::from_grid(&pair.t2),
        ValueSpace::Unit => Tensor::from_grid(&pair.t2.to_model()?),
        ValueSpace::Nonneg => return Err(CdrlError::Shape("nonneg grid in training".into())),
    };
    Ok((t1, t2))
}

/// One optimization step over a batch of pseudo pairs: a discriminator
/// update, then a generator update. Real or synthetic pairs are refused.
pub fn train_step(
    state: &mut TrainState,
    batch: &[PairSample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    assert!(!batch.is_empty());
    for p in batch {
        if p.provenance != Provenance::Pseudo {
            return Err(CdrlError::Provenance(p.provenance.to_string()));
        }
    }
    let b = batch.len() as f64;
    let inv_b = 1.0 / b;

    let mut fwd = Vec::with_capacity(batch.len());
    let mut l_mae_sum = 0.0f64;
    for pair in batch {
        let (t1, t2) = pair_to_model_tensors(pair)?;
        let (out, ctx) = state.recon.forward(&t1, &t2)?;
        l_mae_sum += mae_tensor(&out, &t1);
        fwd.push((t1, out, ctx));
    }
    let l_mae = l_mae_sum * inv_b;

    let mut l_gan_g = 0.0f64;
    let mut l_gan_d = 0.0f64;
    if cfg.use_discriminator {
        // Discriminator phase: one update on (real = t1, fake = recon),
        // with the reconstruction detached from the generator.
        state.disc.zero_grads();
        for (t1, out, _) in &fwd {
            let (lr, ctx_r) = state.disc.forward(t1);
            let (lf, ctx_f) = state.disc.forward(out);
            l_gan_d += stable_d_loss(&logits_f64(&lr), &logits_f64(&lf)) * inv_b;
            l_gan_g += stable_g_loss(&logits_f64(&lf)) * inv_b;
            state
                .disc
                .backward(&ctx_r, &d_loss_grad_real(&lr, inv_b));
            state
                .disc
                .backward(&ctx_f, &d_loss_grad_fake(&lf, inv_b));
        }
        let mut dp = state.disc.params_mut();
        state.opt_d.step(&mut dp);
    }

    // Generator phase. The adversarial gradient flows through the updated
    // discriminator (fresh forward); the recorded l_gan_g above is the
    // pre-update value.
    state.recon.zero_grads();
    for (t1, out, ctx) in &fwd {
        let mut dout = mae_grad(out, t1, cfg.lambda_mae * inv_b);
        if cfg.use_discriminator {
            let (lf, ctx_f) = state.disc.forward(out);
            let dfake = state.disc.backward(&ctx_f, &g_loss_grad(&lf, inv_b));
            dout.add_assign(&dfake);
        }
        state.recon.backward(ctx, &dout);
    }
    if cfg.use_discriminator {
        // The generator pass above polluted the discriminator gradients.
        state.disc.zero_grads();
    }
    let mut gp = state.recon.params_mut();
    state.opt_g.step(&mut gp);

    state.global_step += 1;
    Ok(LossBreakdown {
        step: state.global_step,
        l_mae,
        l_gan_g,
        l_gan_d,
        l_total: total_loss(l_gan_g, l_mae, cfg.lambda_mae),
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<LossBreakdown>,
    /// (epoch, mean validation l_mae) per epoch.
    pub val_history: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
}

/// Deterministic train/validation carve-out of the pair indices.
fn split_train_val(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3])));
    if n < 2 {
        return (order.clone(), order);
    }
    let val_n = ((n as f64 * VAL_FRACTION) as usize).max(1);
    let (val, train) = order.split_at(val_n);
    (train.to_vec(), val.to_vec())
}

fn validation_mae(state: &Reconstructor<f32>, pairs: &[PairSample], idx: &[usize]) -> Result<f64> {
    let mut sum = 0.0f64;
    for &i in idx {
        let (t1, t2) = pair_to_model_tensors(&pairs[i])?;
        let (out, _) = state.forward(&t1, &t2)?;
        sum += mae_tensor(&out, &t1);
    }
    Ok(sum / idx.len() as f64)
}

/// Trains on a stream of pseudo pairs with per-step joint augmentation.
///
/// A seed-derived 10% holdout picks the best checkpoint by validation MAE.
/// When `out_dir` is set, per-epoch checkpoints, `best.cdrl` and
/// `history.csv` are written there. `resume_from` continues a bundle exactly
/// (data order and augmentation derive from (seed, epoch), not history).
pub fn train_loop(
    pairs: &[PairSample],
    cfg: &TrainConfig,
    model_cfg: &ReconstructorConfig,
    disc_base: usize,
    out_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(CdrlError::EmptyDataset);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let (train_idx, val_idx) = split_train_val(pairs.len(), cfg.seed);

    let (mut state, start_epoch) = match resume_from {
        None => (TrainState::new(cfg, model_cfg, disc_base), 0),
        Some(path) => {
            let bundle = checkpoint::read_bundle(path, Some(model_cfg))?;
            if bundle.use_discriminator != cfg.use_discriminator {
                return Err(CdrlError::Format(
                    "checkpoint discriminator flag does not match the config".into(),
                ));
            }
            let epoch = bundle.epochs_completed;
            (TrainState::from_bundle(bundle, cfg), epoch)
        }
    };

    let mut history = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut last_ckpt: Option<PathBuf> = None;

    for epoch in start_epoch..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[4, epoch as u64],
        )));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PairSample> = chunk
                .iter()
                .map(|&i| augment_pair(&pairs[i], derive_seed(cfg.seed, &[5, epoch as u64, i as u64])))
                .collect::<Result<_>>()?;
            let rec = train_step(&mut state, &batch, cfg)?;
            if !rec.l_total.is_finite() {
                return Err(CdrlError::TrainingDiverged {
                    step: rec.step,
                    last_checkpoint: last_ckpt,
                });
            }
            history.push(rec);
        }
        let val_mae = validation_mae(&state.recon, pairs, &val_idx)?;
        val_history.push((epoch, val_mae));
        if best.map_or(true, |(_, b)| val_mae < b) {
            best = Some((epoch, val_mae));
        }
        if let Some(dir) = out_dir {
            let path = dir.join(format!("ckpt_epoch_{epoch:03}.cdrl"));
            checkpoint::write_bundle(
                &path,
                &mut state.recon,
                &mut state.disc,
                &state.opt_g,
                &state.opt_d,
                cfg.use_discriminator,
                epoch + 1,
                state.global_step,
            )?;
            last_ckpt = Some(path);
        }
    }

    let best_epoch = best.map(|(e, _)| e).unwrap_or(0);
    let best_checkpoint = match out_dir {
        Some(dir) => {
            let src = dir.join(format!("ckpt_epoch_{best_epoch:03}.cdrl"));
            let dst = dir.join("best.cdrl");
            if src.exists() {
                std::fs::copy(&src, &dst)?;
                Some(dst)
            } else {
                None
            }
        }
        None => None,
    };
    if let Some(dir) = out_dir {
        write_history_csv(&dir.join("history.csv"), &history)?;
    }
    Ok(TrainOutcome {
        state,
        history,
        val_history,
        best_epoch,
        best_checkpoint,
    })
}

/// CSV with columns step,l_mae,l_gan_g,l_gan_d,l_total. Floats are written
/// in shortest round-trip form, so reading back reproduces exact values.
pub fn write_history_csv(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,l_mae,l_gan_g,l_gan_d,l_total")?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.step, r.l_mae, r.l_gan_g, r.l_gan_d, r.l_total
        )?;
    }
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let mut parts = line.split(',');
        let mut next = || -> Result<&str> {
            parts
                .next()
                .ok_or_else(|| CdrlError::Format(format!("short CSV row {i}")))
        };
        let step: usize = next()?.parse().map_err(|_| CdrlError::Format("bad step".into()))?;
        let mut f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| CdrlError::Format("bad float".into()))
        };
        out.push(LossBreakdown {
            step,
            l_mae: f(next()?)?,
            l_gan_g: f(next()?)?,
            l_gan_d: f(next()?)?,
            l_total: f(next()?)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Provenance;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_grid(h: usize, w: usize, c: usize, seed: u64, space: ValueSpace) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * c)
            .map(|_| match space {
                ValueSpace::Unit => rng.random_range(0.0..1.0),
                ValueSpace::Model => rng.random_range(-1.0..1.0),
                ValueSpace::Nonneg => rng.random_range(0.0..2.0),
            })
            .collect();
        ImageGrid::new(h, w, c, space, data).unwrap()
    }

    fn pseudo_pair(seed: u64) -> PairSample {
        let t1 = rand_grid(8, 8, 3, seed, ValueSpace::Unit);
        let t2 = rand_grid(8, 8, 3, seed + 1000, ValueSpace::Unit);
        PairSample::new(t1, t2, None, Provenance::Pseudo, format!("p{seed}")).unwrap()
    }

    fn tiny_cfg() -> (TrainConfig, ReconstructorConfig) {
        (
            TrainConfig {
                epochs: 2,
                seed: 3,
                ..Default::default()
            },
            ReconstructorConfig {
                depth: 2,
                base_width: 4,
                ..Default::default()
            },
        )
    }

    #[test]
    fn defaults_match_published_settings() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!((cfg.beta1, cfg.beta2), (0.5, 0.999));
        assert_eq!(cfg.batch_size, 1);
        assert_eq!(cfg.lambda_mae, 100.0);
        assert!(cfg.use_discriminator);
        assert_eq!(cfg.attention_variant, AttentionVariant::PseudoPairCbam);
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"lr": 0.001, "bogus": 1}"#).unwrap();
        assert!(TrainConfig::from_json_file(&path).is_err());
        std::fs::write(&path, r#"{"lr": 0.001}"#).unwrap();
        let cfg = TrainConfig::from_json_file(&path).unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.lambda_mae, 100.0);
    }

    #[test]
    fn mae_examples() {
        let a = ImageGrid::zeros(3, 3, 3, ValueSpace::Model);
        assert_eq!(mae_loss(&a, &a).unwrap(), 0.0);
        let b = ImageGrid::splat(3, 3, 3, ValueSpace::Model, 0.5);
        assert!((mae_loss(&b, &a).unwrap() - 0.5).abs() < 1e-12);

        // Brute-force oracle on a random 2×3×3 tensor pair (18 elements).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut acc = 0.0f64;
        for i in 0..18 {
            acc += (xs[i] - ys[i]).abs();
        }
        let oracle = acc / 18.0;
        let tx = Tensor::from_vec(2, 3, 3, xs);
        let ty = Tensor::from_vec(2, 3, 3, ys);
        assert!((mae_tensor(&tx, &ty) - oracle).abs() < 1e-15);
    }

    #[test]
    fn gan_loss_reference_points() {
        // Zero logits: d = 2·ln 2, g = ln 2.
        let zeros = vec![0.0; 16];
        assert!((stable_d_loss(&zeros, &zeros) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((stable_g_loss(&zeros) - std::f64::consts::LN_2).abs() < 1e-12);
        // Near-perfect discriminator at logit ±20.
        let real = vec![20.0; 8];
        let fake = vec![-20.0; 8];
        assert!(stable_d_loss(&real, &fake) < 1e-8);
    }

    #[test]
    fn gan_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let lr: Vec<f64> = (0..12).map(|_| rng.random_range(-6.0..6.0)).collect();
            let lf: Vec<f64> = (0..12).map(|_| rng.random_range(-6.0..6.0)).collect();
            // Direct (unstabilized) evaluation is fine in this range.
            let d_ref = lr.iter().map(|&l| -(sigmoid(l)).ln()).sum::<f64>() / 12.0
                + lf.iter().map(|&l| -(1.0 - sigmoid(l)).ln()).sum::<f64>() / 12.0;
            let g_ref = lf.iter().map(|&l| -(sigmoid(l)).ln()).sum::<f64>() / 12.0;
            assert!((stable_d_loss(&lr, &lf) - d_ref).abs() < 1e-6);
            assert!((stable_g_loss(&lf) - g_ref).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(0.6931, 0.5, 100.0) - 50.6931).abs() < 1e-12);
        assert_eq!(total_loss(1.25, 0.5, 0.0), 1.25);
        assert_eq!(total_loss(0.0, 0.5, 100.0), 50.0);
    }

    #[test]
    fn train_step_rejects_non_pseudo() {
        let (cfg, mcfg) = tiny_cfg();
        let mut state = TrainState::new(&cfg, &mcfg, 4);
        let mut pair = pseudo_pair(0);
        pair.provenance = Provenance::Real;
        assert!(matches!(
            train_step(&mut state, &[pair], &cfg),
            Err(CdrlError::Provenance(_))
        ));
    }

    #[test]
    fn train_step_is_deterministic() {
        let (cfg, mcfg) = tiny_cfg();
        let pair = pseudo_pair(1);
        let mut s1 = TrainState::new(&cfg, &mcfg, 4);
        let mut s2 = TrainState::new(&cfg, &mcfg, 4);
        let r1 = train_step(&mut s1, &[pair.clone()], &cfg).unwrap();
        let r2 = train_step(&mut s2, &[pair], &cfg).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn no_discriminator_zeroes_gan_terms() {
        let (mut cfg, mcfg) = tiny_cfg();
        cfg.use_discriminator = false;
        let mut state = TrainState::new(&cfg, &mcfg, 4);
        let rec = train_step(&mut state, &[pseudo_pair(2)], &cfg).unwrap();
        assert_eq!(rec.l_gan_g, 0.0);
        assert_eq!(rec.l_gan_d, 0.0);
        assert_eq!(rec.l_total, 100.0 * rec.l_mae);
    }

    #[test]
    fn updates_do_not_cross_models() {
        let (cfg, mcfg) = tiny_cfg();
        let mut state = TrainState::new(&cfg, &mcfg, 4);
        // Hash discriminator weights, run only the generator phase portion by
        // doing a full step and comparing: D changed in D phase only, R in G
        // phase only. We verify indirectly: a no-disc config leaves D frozen.
        let mut cfg_nod = cfg.clone();
        cfg_nod.use_discriminator = false;
        let d_before: Vec<Vec<f32>> = state.disc.params_mut().iter().map(|p| p.w.clone()).collect();
        train_step(&mut state, &[pseudo_pair(4)], &cfg_nod).unwrap();
        let d_after: Vec<Vec<f32>> = state.disc.params_mut().iter().map(|p| p.w.clone()).collect();
        assert_eq!(d_before, d_after);
    }

    #[test]
    fn loop_bookkeeping_and_identity() {
        let (cfg, mcfg) = tiny_cfg();
        let pairs: Vec<PairSample> = (0..5).map(pseudo_pair).collect();
        let out = train_loop(&pairs, &cfg, &mcfg, 4, None, None).unwrap();
        // 5 pairs → 1 val, 4 train; batch 1 → 4 steps/epoch × 2 epochs.
        assert_eq!(out.history.len(), 8);
        for r in &out.history {
            let recon = r.l_gan_g + cfg.lambda_mae * r.l_mae;
            assert_eq!(recon.to_bits(), r.l_total.to_bits());
        }
        assert_eq!(out.val_history.len(), 2);
    }

    #[test]
    fn resume_reproduces_next_step_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, mcfg) = tiny_cfg();
        cfg.epochs = 2;
        let pairs: Vec<PairSample> = (0..5).map(pseudo_pair).collect();
        let full = train_loop(&pairs, &cfg, &mcfg, 4, Some(dir.path()), None).unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg1 = cfg.clone();
        cfg1.epochs = 1;
        let _ = train_loop(&pairs, &cfg1, &mcfg, 4, Some(dir2.path()), None).unwrap();
        let resumed = train_loop(
            &pairs,
            &cfg,
            &mcfg,
            4,
            None,
            Some(&dir2.path().join("ckpt_epoch_000.cdrl")),
        )
        .unwrap();
        // The resumed run starts at epoch 1; its records must equal the tail
        // of the continuous run exactly.
        let tail = &full.history[4..];
        assert_eq!(resumed.history.len(), 4);
        for (a, b) in resumed.history.iter().zip(tail) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn history_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let rows = vec![
            LossBreakdown {
                step: 1,
                l_mae: 0.123456789012345,
                l_gan_g: std::f64::consts::LN_2,
                l_gan_d: 1.3862943611198906,
                l_total: 12.41003958911832,
            },
            LossBreakdown {
                step: 2,
                l_mae: 1e-17,
                l_gan_g: 0.0,
                l_gan_d: 2.0,
                l_total: 1e-15,
            },
        ];
        write_history_csv(&path, &rows).unwrap();
        let back = read_history_csv(&path).unwrap();
        assert_eq!(back, rows);
    }

    proptest! {
        #[test]
        fn mae_is_symmetric_nonneg_triangle(
            a in proptest::collection::vec(-1.0f32..1.0, 27),
            b in proptest::collection::vec(-1.0f32..1.0, 27),
            c in proptest::collection::vec(-1.0f32..1.0, 27),
        ) {
            let g = |v: Vec<f32>| ImageGrid::new(3, 3, 3, ValueSpace::Model, v).unwrap();
            let (ga, gb, gc) = (g(a), g(b), g(c));
            let ab = mae_loss(&ga, &gb).unwrap();
            let ba = mae_loss(&gb, &ga).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ab >= 0.0);
            let ac = mae_loss(&ga, &gc).unwrap();
            let cb = mae_loss(&gc, &gb).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }
}
