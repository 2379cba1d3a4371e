//! Versioned binary checkpoint containers.
//!
//! Layout: 8-byte magic `CDRLCKPT`, u32-le format version, u32-le header
//! length, a JSON header with the architecture hyperparameters, then raw
//! float32-le parameter payload. Loading validates the hyperparameters
//! against the expected configuration before touching any weights.
//!
//! A reconstructor bundle stores weights *and* Adam moments for both the
//! reconstructor and the discriminator, plus the optimizer step counters, so
//! a resumed run reproduces the next step bit for bit.

use crate::error::{CdrlError, Result};
use crate::model::{
    AttentionVariant, FusionRule, PatchDiscriminator, Reconstructor, ReconstructorConfig,
};
use crate::nn::{Adam, AdamConfig, HasParams, Param};
use crate::style::{GeneratorInit, StyleModel};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"CDRLCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    kind: String,
    depth: usize,
    base_width: usize,
    attention: AttentionVariant,
    fusion_rule: FusionRule,
    disc_base_width: usize,
    use_discriminator: bool,
    epochs_completed: usize,
    global_step: usize,
    opt_g_t: u64,
    opt_d_t: u64,
    recon_param_lens: Vec<usize>,
    disc_param_lens: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StyleHeader {
    kind: String,
    base_width: usize,
    cycle_lambda: f64,
    g_param_lens: Vec<usize>,
    f_param_lens: Vec<usize>,
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8], off: &mut usize, n: usize, dst: &mut [f32]) -> Result<()> {
    let need = n * 4;
    if *off + need > bytes.len() {
        return Err(CdrlError::Format("checkpoint payload truncated".into()));
    }
    for (i, d) in dst.iter_mut().enumerate().take(n) {
        let o = *off + i * 4;
        *d = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    }
    *off += need;
    Ok(())
}

fn write_container(path: &Path, header_json: Vec<u8>, payload: Vec<u8>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if !path.exists() {
        return Err(CdrlError::NotFound(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(CdrlError::Format(format!(
            "bad checkpoint magic in {}",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(CdrlError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if 16 + hlen > bytes.len() {
        return Err(CdrlError::Format("checkpoint header truncated".into()));
    }
    let header = bytes[16..16 + hlen].to_vec();
    let payload = bytes[16 + hlen..].to_vec();
    Ok((header, payload))
}

fn param_lens<T: crate::nn::Scalar, M: HasParams<T>>(m: &mut M) -> Vec<usize> {
    m.params_mut().iter().map(|p| p.len()).collect()
}

fn dump_params_with_moments(out: &mut Vec<u8>, params: Vec<&mut Param<f32>>) {
    for p in params {
        push_f32s(out, &p.w);
        push_f32s(out, &p.m);
        push_f32s(out, &p.v);
    }
}

fn load_params_with_moments(
    bytes: &[u8],
    off: &mut usize,
    params: Vec<&mut Param<f32>>,
) -> Result<()> {
    for p in params {
        let n = p.len();
        read_f32s(bytes, off, n, &mut p.w)?;
        read_f32s(bytes, off, n, &mut p.m)?;
        read_f32s(bytes, off, n, &mut p.v)?;
    }
    Ok(())
}

/// Everything needed to resume reconstructor training exactly.
pub struct Bundle {
    pub recon: Reconstructor<f32>,
    pub disc: PatchDiscriminator<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub use_discriminator: bool,
    pub epochs_completed: usize,
    pub global_step: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn write_bundle(
    path: &Path,
    recon: &mut Reconstructor<f32>,
    disc: &mut PatchDiscriminator<f32>,
    opt_g: &Adam,
    opt_d: &Adam,
    use_discriminator: bool,
    epochs_completed: usize,
    global_step: usize,
) -> Result<()> {
    let header = BundleHeader {
        kind: "reconstructor_bundle".into(),
        depth: recon.cfg.depth,
        base_width: recon.cfg.base_width,
        attention: recon.cfg.attention,
        fusion_rule: recon.cfg.fusion_rule,
        disc_base_width: disc.base_width,
        use_discriminator,
        epochs_completed,
        global_step,
        opt_g_t: opt_g.t,
        opt_d_t: opt_d.t,
        recon_param_lens: param_lens(recon),
        disc_param_lens: param_lens(disc),
    };
    let mut payload = Vec::new();
    dump_params_with_moments(&mut payload, recon.params_mut());
    dump_params_with_moments(&mut payload, disc.params_mut());
    write_container(path, serde_json::to_vec(&header)?, payload)
}

/// Loads a bundle; when `expected` is given the stored hyperparameters must
/// match it exactly (validated before any weight is read).
pub fn read_bundle(path: &Path, expected: Option<&ReconstructorConfig>) -> Result<Bundle> {
    let (header, payload) = read_container(path)?;
    let header: BundleHeader = serde_json::from_slice(&header)?;
    if header.kind != "reconstructor_bundle" {
        return Err(CdrlError::Format(format!(
            "checkpoint kind '{}' is not a reconstructor bundle",
            header.kind
        )));
    }
    let cfg = ReconstructorConfig {
        depth: header.depth,
        base_width: header.base_width,
        attention: header.attention,
        fusion_rule: header.fusion_rule,
    };
    if let Some(exp) = expected {
        if *exp != cfg {
            return Err(CdrlError::Format(format!(
                "checkpoint hyperparameters {cfg:?} do not match expected {exp:?}"
            )));
        }
    }
    let mut recon: Reconstructor<f32> = Reconstructor::new(cfg, 0);
    let mut disc: PatchDiscriminator<f32> = PatchDiscriminator::new(
        3,
        header.disc_base_width,
        &mut rand::SeedableRng::seed_from_u64(0),
    );
    if param_lens(&mut recon) != header.recon_param_lens
        || param_lens(&mut disc) != header.disc_param_lens
    {
        return Err(CdrlError::Format(
            "checkpoint parameter table does not match the architecture".into(),
        ));
    }
    let mut off = 0usize;
    load_params_with_moments(&payload, &mut off, recon.params_mut())?;
    load_params_with_moments(&payload, &mut off, disc.params_mut())?;
    if off != payload.len() {
        return Err(CdrlError::Format("trailing bytes in checkpoint".into()));
    }
    let adam = |t: u64| {
        let mut a = Adam::new(AdamConfig::default());
        a.t = t;
        a
    };
    Ok(Bundle {
        recon,
        disc,
        opt_g: adam(header.opt_g_t),
        opt_d: adam(header.opt_d_t),
        use_discriminator: header.use_discriminator,
        epochs_completed: header.epochs_completed,
        global_step: header.global_step,
    })
}

pub fn write_style(path: &Path, model: &mut StyleModel<f32>) -> Result<()> {
    let header = StyleHeader {
        kind: "style".into(),
        base_width: model.base_width,
        cycle_lambda: model.cycle_lambda,
        g_param_lens: param_lens(&mut model.g),
        f_param_lens: param_lens(&mut model.f),
    };
    let mut payload = Vec::new();
    for p in model.g.params_mut() {
        push_f32s(&mut payload, &p.w);
    }
    for p in model.f.params_mut() {
        push_f32s(&mut payload, &p.w);
    }
    write_container(path, serde_json::to_vec(&header)?, payload)
}

pub fn read_style(path: &Path) -> Result<StyleModel<f32>> {
    let (header, payload) = read_container(path)?;
    let header: StyleHeader = serde_json::from_slice(&header)?;
    if header.kind != "style" {
        return Err(CdrlError::Format(format!(
            "checkpoint kind '{}' is not a style model",
            header.kind
        )));
    }
    let mut model =
        StyleModel::<f32>::new(header.base_width, header.cycle_lambda, GeneratorInit::Identity, 0);
    if param_lens(&mut model.g) != header.g_param_lens
        || param_lens(&mut model.f) != header.f_param_lens
    {
        return Err(CdrlError::Format(
            "style checkpoint parameter table mismatch".into(),
        ));
    }
    let mut off = 0usize;
    for p in model.g.params_mut() {
        let n = p.len();
        read_f32s(&payload, &mut off, n, &mut p.w)?;
    }
    for p in model.f.params_mut() {
        let n = p.len();
        read_f32s(&payload, &mut off, n, &mut p.w)?;
    }
    if off != payload.len() {
        return Err(CdrlError::Format("trailing bytes in style checkpoint".into()));
    }
    Ok(model)
}
