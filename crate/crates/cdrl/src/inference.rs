//! From a trained reconstructor and a bi-temporal pair to an error map, a
//! binary change mask, and a patch-level decision/score.

use crate::error::{CdrlError, Result};
use crate::grid::{ImageGrid, ValueSpace};
use crate::model::Reconstructor;
use serde::{Deserialize, Serialize};

/// Per-pixel nonnegative reconstruction error with cached statistics.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub grid: ImageGrid,
    pub min: f32,
    pub max: f32,
    pub mean: f64,
}

impl ErrorMap {
    pub fn from_grid(grid: ImageGrid) -> Result<Self> {
        if grid.channels() != 1 || grid.space() != ValueSpace::Nonneg {
            return Err(CdrlError::Shape(
                "error map must be single-channel nonneg".into(),
            ));
        }
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &v in grid.data() {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        let mean = sum / grid.data().len() as f64;
        Ok(Self {
            grid,
            min,
            max,
            mean,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "param")]
pub enum ThresholdMethod {
    Fixed(f64),
    Quantile(f64),
    Otsu,
}

impl std::str::FromStr for ThresholdMethod {
    type Err = String;
    /// Accepts `otsu`, `fixed:τ`, `quantile:q`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "otsu" {
            return Ok(ThresholdMethod::Otsu);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            return v
                .parse()
                .map(ThresholdMethod::Fixed)
                .map_err(|_| format!("bad fixed threshold '{v}'"));
        }
        if let Some(v) = s.strip_prefix("quantile:") {
            return v
                .parse()
                .map(ThresholdMethod::Quantile)
                .map_err(|_| format!("bad quantile '{v}'"));
        }
        Err(format!(
            "unknown threshold '{s}' (otsu|fixed:τ|quantile:q)"
        ))
    }
}

/// Binary change mask plus the threshold that produced it.
#[derive(Debug, Clone)]
pub struct ChangeMask {
    pub grid: ImageGrid,
    pub threshold_used: f64,
    pub method: ThresholdMethod,
}

/// Separable Gaussian blur with clamp-to-edge, radius ⌈3σ⌉.
fn gaussian_blur(map: &ImageGrid, sigma: f64) -> ImageGrid {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for t in -radius..=radius {
        kernel.push((-((t * t) as f64) / denom).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|&v| (v / norm) as f32).collect();

    let (h, w) = (map.height(), map.width());
    let mut tmp = map.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &kv) in kernel.iter().enumerate() {
                let xi = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * map.get(0, y, xi);
            }
            tmp.set(0, y, x, acc);
        }
    }
    let mut out = map.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &kv) in kernel.iter().enumerate() {
                let yi = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp.get(0, yi, x);
            }
            out.set(0, y, x, acc.max(0.0));
        }
    }
    out
}

/// Per-pixel mean-over-channels |R(t1,t2) − t1|, optionally Gaussian-smoothed
/// (σ = 0 disables smoothing; with smoothing off, mean(map) equals the MAE
/// loss of the reconstruction).
pub fn error_map(
    model: &Reconstructor<f32>,
    t1: &ImageGrid,
    t2: &ImageGrid,
    smooth_sigma: f64,
) -> Result<ErrorMap> {
    let recon = model.reconstruct(t1, t2)?;
    error_map_from_recon(&recon, t1, smooth_sigma)
}

/// Same as [`error_map`] but with the reconstruction already in hand.
pub fn error_map_from_recon(
    recon: &ImageGrid,
    t1: &ImageGrid,
    smooth_sigma: f64,
) -> Result<ErrorMap> {
    if !recon.same_shape(t1) {
        return Err(CdrlError::Shape("error_map shapes differ".into()));
    }
    let (h, w, c) = (t1.height(), t1.width(), t1.channels());
    let mut map = ImageGrid::zeros(h, w, 1, ValueSpace::Nonneg);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for ch in 0..c {
                acc += (recon.get(ch, y, x) - t1.get(ch, y, x)).abs();
            }
            map.set(0, y, x, acc / c as f32);
        }
    }
    let map = if smooth_sigma > 0.0 {
        gaussian_blur(&map, smooth_sigma)
    } else {
        map
    };
    ErrorMap::from_grid(map)
}

/// 256-bin Otsu threshold on the min-max-normalized map, mapped back to raw
/// scale. A constant map yields its maximum (nothing above → empty mask).
fn otsu_threshold(map: &ImageGrid, min: f32, max: f32) -> f64 {
    if max <= min {
        return max as f64;
    }
    const BINS: usize = 256;
    let scale = (BINS as f32 - 1.0) / (max - min);
    let mut hist = [0usize; BINS];
    for &v in map.data() {
        let b = (((v - min) * scale) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = map.data().len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum::<f64>()
        / total;
    let mut best_bin = 0usize;
    let mut best_var = -1.0f64;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for (i, &n) in hist.iter().enumerate().take(BINS - 1) {
        w0 += n as f64 / total;
        sum0 += i as f64 * n as f64 / total;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let w1 = 1.0 - w0;
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best_var {
            best_var = between;
            best_bin = i;
        }
    }
    min as f64 + (best_bin as f64 + 0.5) / (BINS as f64 - 1.0) * (max - min) as f64
}

/// Binarizes an error map; the mask records the threshold actually used.
pub fn threshold_map(map: &ErrorMap, method: ThresholdMethod) -> Result<ChangeMask> {
    let threshold = match method {
        ThresholdMethod::Fixed(t) => t,
        ThresholdMethod::Quantile(q) => {
            if !(0.0..1.0).contains(&q) || q == 0.0 {
                return Err(CdrlError::Param(format!("quantile {q} outside (0, 1)")));
            }
            let mut vals: Vec<f32> = map.grid.data().to_vec();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = ((q * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
            vals[k - 1] as f64
        }
        ThresholdMethod::Otsu => otsu_threshold(&map.grid, map.min, map.max),
    };
    let data: Vec<f32> = map
        .grid
        .data()
        .iter()
        .map(|&v| if (v as f64) > threshold { 1.0 } else { 0.0 })
        .collect();
    let grid = ImageGrid::new(
        map.grid.height(),
        map.grid.width(),
        1,
        ValueSpace::Unit,
        data,
    )?;
    Ok(ChangeMask {
        grid,
        threshold_used: threshold,
        method,
    })
}

/// Changed iff any mask pixel is 1.
pub fn patch_decision(mask: &ChangeMask) -> bool {
    mask.grid.data().iter().any(|&v| v == 1.0)
}

/// Mean of the top ⌈fraction·HW⌉ error values; a continuous change score.
pub fn patch_score(map: &ErrorMap, top_fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&top_fraction) || top_fraction == 0.0 {
        return Err(CdrlError::Param(format!(
            "top_fraction {top_fraction} outside (0, 1]"
        )));
    }
    let n = map.grid.data().len();
    let k = ((top_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut vals: Vec<f32> = map.grid.data().to_vec();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sum: f64 = vals[..k].iter().map(|&v| v as f64).sum();
    Ok(sum / k as f64)
}

pub const DEFAULT_TOP_FRACTION: f64 = 0.01;
pub const DEFAULT_SMOOTH_SIGMA: f64 = 2.0;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from(vals: Vec<f32>, h: usize, w: usize) -> ErrorMap {
        ErrorMap::from_grid(ImageGrid::new(h, w, 1, ValueSpace::Nonneg, vals).unwrap()).unwrap()
    }

    #[test]
    fn zero_map_fixed_threshold_is_empty() {
        let m = map_from(vec![0.0; 16], 4, 4);
        let mask = threshold_map(&m, ThresholdMethod::Fixed(0.1)).unwrap();
        assert!(mask.grid.data().iter().all(|&v| v == 0.0));
        assert!(!patch_decision(&mask));
    }

    #[test]
    fn otsu_separates_bimodal_halves() {
        let mut vals = vec![0.1f32; 32];
        vals.extend(vec![0.9f32; 32]);
        let m = map_from(vals, 8, 8);
        let mask = threshold_map(&m, ThresholdMethod::Otsu).unwrap();
        // Right half (the 0.9s) above threshold, left half below.
        let ones: usize = mask.grid.data().iter().map(|&v| v as usize).sum();
        assert_eq!(ones, 32);
        assert!(mask.grid.data()[..32].iter().all(|&v| v == 0.0));
        assert!(mask.grid.data()[32..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quantile_mask_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vals: Vec<f32> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = map_from(vals, 10, 10);
        let mask = threshold_map(&m, ThresholdMethod::Quantile(0.95)).unwrap();
        let ones: usize = mask.grid.data().iter().map(|&v| v as usize).sum();
        assert!(ones == 5, "density 5% on distinct values, got {ones}");
        assert!(matches!(
            threshold_map(&m, ThresholdMethod::Quantile(1.5)),
            Err(CdrlError::Param(_))
        ));
    }

    #[test]
    fn patch_decision_any_rule() {
        let m = map_from(vec![0.0; 16], 4, 4);
        let mut mask = threshold_map(&m, ThresholdMethod::Fixed(0.5)).unwrap();
        assert!(!patch_decision(&mask));
        mask.grid.set(0, 2, 2, 1.0);
        assert!(patch_decision(&mask));
        let all = ChangeMask {
            grid: ImageGrid::splat(4, 4, 1, ValueSpace::Unit, 1.0),
            threshold_used: 0.0,
            method: ThresholdMethod::Fixed(0.0),
        };
        assert!(patch_decision(&all));
    }

    #[test]
    fn patch_score_reference_points() {
        let m = map_from(vec![0.75; 64], 8, 8);
        assert!((patch_score(&m, 0.01).unwrap() - 0.75).abs() < 1e-12);
        assert!((patch_score(&m, 0.5).unwrap() - 0.75).abs() < 1e-12);
        // top_fraction = 1 → plain mean.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..2.0)).collect();
        let m = map_from(vals.clone(), 8, 8);
        let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        assert!((patch_score(&m, 1.0).unwrap() - mean).abs() < 1e-9);
        // Single hot pixel on a 10×10 map at fraction 0.01 → that pixel.
        let mut vals = vec![0.0f32; 100];
        vals[37] = 5.0;
        let m = map_from(vals, 10, 10);
        assert_eq!(patch_score(&m, 0.01).unwrap(), 5.0);
        assert!(patch_score(&m, 0.0).is_err());
    }

    #[test]
    fn score_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut shuffled = vals.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let a = patch_score(&map_from(vals, 8, 8), 0.1).unwrap();
        let b = patch_score(&map_from(shuffled, 8, 8), 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_threshold_masks_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = map_from(vals, 8, 8);
        let low = threshold_map(&m, ThresholdMethod::Fixed(0.3)).unwrap();
        let high = threshold_map(&m, ThresholdMethod::Fixed(0.7)).unwrap();
        for (l, h) in low.grid.data().iter().zip(high.grid.data()) {
            assert!(h <= l, "higher threshold must give a subset mask");
        }
        // And the patch decision is monotone nonincreasing in τ.
        assert!(patch_decision(&low) || !patch_decision(&high));
    }

    #[test]
    fn smoothing_preserves_mass_roughly_and_mean_matches_mae() {
        use crate::model::{Reconstructor, ReconstructorConfig};
        let model: Reconstructor<f32> = Reconstructor::new(
            ReconstructorConfig {
                depth: 2,
                base_width: 4,
                ..Default::default()
            },
            3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            ImageGrid::new(8, 8, 3, ValueSpace::Model, data).unwrap()
        };
        let t1 = mk(&mut rng);
        let t2 = mk(&mut rng);
        let recon = model.reconstruct(&t1, &t2).unwrap();
        let m = error_map(&model, &t1, &t2, 0.0).unwrap();
        let mae = crate::training::mae_loss(&recon, &t1).unwrap();
        assert!(
            (m.mean - mae).abs() < 1e-6,
            "map mean {} vs mae {mae}",
            m.mean
        );
        // Identity reconstruction → all-zero map.
        let z = error_map_from_recon(&t1, &t1, 0.0).unwrap();
        assert!(z.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn error_map_is_flip_equivariant() {
        use crate::model::{Reconstructor, ReconstructorConfig};
        let model: Reconstructor<f32> = Reconstructor::new(
            ReconstructorConfig {
                depth: 2,
                base_width: 4,
                ..Default::default()
            },
            11,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            ImageGrid::new(8, 8, 3, ValueSpace::Model, data).unwrap()
        };
        let t1 = mk(&mut rng);
        let t2 = mk(&mut rng);
        // Identity reconstruction path: use recon-from-grids so the model
        // nonlinearity is out of the picture and equivariance is exact.
        let m = error_map_from_recon(&t2, &t1, 0.0).unwrap();
        let mf = error_map_from_recon(&t2.flip_h(), &t1.flip_h(), 0.0).unwrap();
        assert_eq!(mf.grid.data(), m.grid.flip_h().data());
        // Through the model it holds to float accuracy only in expectation;
        // check shape plumbing works at least.
        let a = error_map(&model, &t1, &t2, 0.0).unwrap();
        assert_eq!((a.grid.height(), a.grid.width()), (8, 8));
    }
}
