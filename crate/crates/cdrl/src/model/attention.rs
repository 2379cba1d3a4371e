//! Channel and spatial attention gates and the per-scale fusion block.
//!
//! The fusion is deliberately asymmetric: channel attention gates the source
//! branch (style), spatial attention gates the transformed branch
//! (structure). Gate layers are zero-initialized so every gate starts at the
//! neutral σ(0) = 0.5.

use crate::nn::gradcheck::HasParams;
use crate::nn::layers::{
    channel_avg_pool, channel_max_pool, sigmoid_scalar, spatial_avg_pool, spatial_max_pool,
    Conv2d, ConvCtx, Init, Linear, LinearCtx, PadMode, Param,
};
use crate::nn::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHANNEL_GATE_RATIO: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    None,
    PlainCbam,
    PseudoPairCbam,
}

impl AttentionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::None => "none",
            AttentionVariant::PlainCbam => "plain_cbam",
            AttentionVariant::PseudoPairCbam => "pseudo_pair_cbam",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(AttentionVariant::None),
            "plain_cbam" => Ok(AttentionVariant::PlainCbam),
            "pseudo_pair_cbam" => Ok(AttentionVariant::PseudoPairCbam),
            other => Err(format!(
                "unknown attention variant '{other}' (none|plain_cbam|pseudo_pair_cbam)"
            )),
        }
    }
}

/// How the two attended branches are combined before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// Residual-attend each branch, then concatenate (2C channels).
    AttendConcat,
    /// Sum the attended branches into one C-channel map.
    SumOnly,
}

impl FusionRule {
    pub fn fused_channels(self, c: usize) -> usize {
        match self {
            FusionRule::AttendConcat => 2 * c,
            FusionRule::SumOnly => c,
        }
    }
    pub fn as_str(self) -> &'static str {
        match self {
            FusionRule::AttendConcat => "attend_concat",
            FusionRule::SumOnly => "sum_only",
        }
    }
}

impl std::str::FromStr for FusionRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "attend_concat" => Ok(FusionRule::AttendConcat),
            "sum_only" => Ok(FusionRule::SumOnly),
            other => Err(format!(
                "unknown fusion rule '{other}' (attend_concat|sum_only)"
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Channel gate: σ(MLP(avgpool) + MLP(maxpool)), shared bottleneck, ratio 8
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ChannelGate<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug)]
pub struct ChannelGateCtx<T> {
    f: Tensor<T>,
    gate: Vec<T>,
    avg_c1: LinearCtx<T>,
    avg_mask: Vec<bool>,
    avg_c2: LinearCtx<T>,
    max_c1: LinearCtx<T>,
    max_mask: Vec<bool>,
    max_c2: LinearCtx<T>,
    max_arg: Vec<usize>,
}

impl<T> ChannelGateCtx<T> {
    pub fn gate(&self) -> &[T] {
        &self.gate
    }
}

fn relu_vec<T: Scalar>(x: &[T]) -> (Vec<T>, Vec<bool>) {
    let mask: Vec<bool> = x.iter().map(|&v| v > T::zero()).collect();
    let y = x
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    (y, mask)
}

impl<T: Scalar> ChannelGate<T> {
    pub fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (c / CHANNEL_GATE_RATIO).max(1);
        // Final layer zero-initialized: gates start neutral at 0.5.
        Self {
            fc1: Linear::new(c, hidden, Init::HeNormal, rng),
            fc2: Linear::new(hidden, c, Init::Zero, rng),
        }
    }

    /// Returns (gate ⊙ f, gate, ctx).
    pub fn forward(&self, f: &Tensor<T>) -> (Tensor<T>, Vec<T>, ChannelGateCtx<T>) {
        let plane = f.h * f.w;
        let avg = spatial_avg_pool(f);
        let (h_avg, avg_c1) = self.fc1.forward(&avg);
        let (h_avg_r, avg_mask) = relu_vec(&h_avg);
        let (z_avg, avg_c2) = self.fc2.forward(&h_avg_r);

        let (mx, max_arg) = spatial_max_pool(f);
        let (h_max, max_c1) = self.fc1.forward(&mx);
        let (h_max_r, max_mask) = relu_vec(&h_max);
        let (z_max, max_c2) = self.fc2.forward(&h_max_r);

        let gate: Vec<T> = z_avg
            .iter()
            .zip(&z_max)
            .map(|(&a, &b)| sigmoid_scalar(a + b))
            .collect();
        let mut out = f.clone();
        for c in 0..f.c {
            let g = gate[c];
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v = *v * g;
            }
        }
        let ctx = ChannelGateCtx {
            f: f.clone(),
            gate: gate.clone(),
            avg_c1,
            avg_mask,
            avg_c2,
            max_c1,
            max_mask,
            max_c2,
            max_arg,
        };
        (out, gate, ctx)
    }

    pub fn backward(&mut self, ctx: &ChannelGateCtx<T>, dout: &Tensor<T>) -> Tensor<T> {
        let f = &ctx.f;
        let plane = f.h * f.w;
        let mut df = Tensor::zeros(f.c, f.h, f.w);
        let mut dgate = vec![T::zero(); f.c];
        for c in 0..f.c {
            let g = ctx.gate[c];
            let mut acc = T::zero();
            for i in 0..plane {
                let idx = c * plane + i;
                acc = acc + dout.data[idx] * f.data[idx];
                df.data[idx] = dout.data[idx] * g;
            }
            dgate[c] = acc;
        }
        // σ'(z) = g(1−g); the same dz feeds both pooled branches.
        let dz: Vec<T> = dgate
            .iter()
            .zip(&ctx.gate)
            .map(|(&d, &g)| d * g * (T::one() - g))
            .collect();

        let dh_avg = self.fc2.backward(&ctx.avg_c2, &dz);
        let dh_avg: Vec<T> = dh_avg
            .iter()
            .zip(&ctx.avg_mask)
            .map(|(&d, &m)| if m { d } else { T::zero() })
            .collect();
        let davg = self.fc1.backward(&ctx.avg_c1, &dh_avg);

        let dh_max = self.fc2.backward(&ctx.max_c2, &dz);
        let dh_max: Vec<T> = dh_max
            .iter()
            .zip(&ctx.max_mask)
            .map(|(&d, &m)| if m { d } else { T::zero() })
            .collect();
        let dmax = self.fc1.backward(&ctx.max_c1, &dh_max);

        let nf = T::from_f64_c(plane as f64);
        for c in 0..f.c {
            let spread = davg[c] / nf;
            for i in 0..plane {
                let idx = c * plane + i;
                df.data[idx] = df.data[idx] + spread;
            }
            df.data[ctx.max_arg[c]] = df.data[ctx.max_arg[c]] + dmax[c];
        }
        df
    }
}

impl<T: Scalar> HasParams<T> for ChannelGate<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = self.fc1.params_mut();
        ps.extend(self.fc2.params_mut());
        ps
    }
}

// ---------------------------------------------------------------------------
// Spatial gate: σ(conv7×7([avgpool_c; maxpool_c]))
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpatialGate<T> {
    pub conv: Conv2d<T>,
}

#[derive(Debug)]
pub struct SpatialGateCtx<T> {
    f: Tensor<T>,
    gate: Tensor<T>,
    conv_ctx: ConvCtx<T>,
    max_arg: Vec<usize>,
}

impl<T> SpatialGateCtx<T> {
    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }
}

impl<T: Scalar> SpatialGate<T> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        // Zero init: the gate map starts at 0.5 everywhere. Replicate padding
        // keeps the gate spatially uniform on constant inputs.
        Self {
            conv: Conv2d::with_pad_mode(2, 1, 7, 1, 3, PadMode::Replicate, Init::Zero, rng),
        }
    }

    /// Returns (f ⊙ gate, gate map, ctx).
    pub fn forward(&self, f: &Tensor<T>) -> (Tensor<T>, Tensor<T>, SpatialGateCtx<T>) {
        let plane = f.h * f.w;
        let avg = channel_avg_pool(f);
        let (mx, max_arg) = channel_max_pool(f);
        let stack = avg.concat_c(&mx);
        let (z, conv_ctx) = self.conv.forward(&stack);
        let gate = z.map(sigmoid_scalar);
        let mut out = f.clone();
        for c in 0..f.c {
            for i in 0..plane {
                out.data[c * plane + i] = out.data[c * plane + i] * gate.data[i];
            }
        }
        let ctx = SpatialGateCtx {
            f: f.clone(),
            gate: gate.clone(),
            conv_ctx,
            max_arg,
        };
        (out, gate, ctx)
    }

    pub fn backward(&mut self, ctx: &SpatialGateCtx<T>, dout: &Tensor<T>) -> Tensor<T> {
        let f = &ctx.f;
        let plane = f.h * f.w;
        let mut df = Tensor::zeros(f.c, f.h, f.w);
        let mut dgate: Tensor<T> = Tensor::zeros(1, f.h, f.w);
        for c in 0..f.c {
            for i in 0..plane {
                let idx = c * plane + i;
                dgate.data[i] = dgate.data[i] + dout.data[idx] * f.data[idx];
                df.data[idx] = dout.data[idx] * ctx.gate.data[i];
            }
        }
        let dz = Tensor::from_vec(
            1,
            f.h,
            f.w,
            dgate
                .data
                .iter()
                .zip(&ctx.gate.data)
                .map(|(&d, &g)| d * g * (T::one() - g))
                .collect(),
        );
        let dstack = self.conv.backward(&ctx.conv_ctx, &dz);
        let (davg, dmax) = dstack.split_c(1);
        let cf = T::from_f64_c(f.c as f64);
        for i in 0..plane {
            let spread = davg.data[i] / cf;
            for c in 0..f.c {
                df.data[c * plane + i] = df.data[c * plane + i] + spread;
            }
            let win = ctx.max_arg[i] * plane + i;
            df.data[win] = df.data[win] + dmax.data[i];
        }
        df
    }
}

impl<T: Scalar> HasParams<T> for SpatialGate<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.conv.params_mut()
    }
}

// ---------------------------------------------------------------------------
// Per-scale fusion of the two encoder branches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FusionBlock<T> {
    pub variant: AttentionVariant,
    pub rule: FusionRule,
    pub channels: usize,
    /// Channel gate on the source (t1) branch.
    pub ca1: Option<ChannelGate<T>>,
    /// Spatial gate on the t1 branch (plain CBAM only).
    pub sa1: Option<SpatialGate<T>>,
    /// Channel gate on the t2 branch (plain CBAM only).
    pub ca2: Option<ChannelGate<T>>,
    /// Spatial gate on the transformed (t2) branch.
    pub sa2: Option<SpatialGate<T>>,
}

pub struct FuseCtx<T> {
    ca1: Option<ChannelGateCtx<T>>,
    sa1: Option<SpatialGateCtx<T>>,
    ca2: Option<ChannelGateCtx<T>>,
    sa2: Option<SpatialGateCtx<T>>,
}

impl<T: Scalar> FusionBlock<T> {
    pub fn new(
        channels: usize,
        variant: AttentionVariant,
        rule: FusionRule,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Construction order is fixed; it defines the parameter order.
        let (ca1, sa1, ca2, sa2) = match variant {
            AttentionVariant::None => (None, None, None, None),
            AttentionVariant::PseudoPairCbam => (
                Some(ChannelGate::new(channels, rng)),
                None,
                None,
                Some(SpatialGate::new(rng)),
            ),
            AttentionVariant::PlainCbam => (
                Some(ChannelGate::new(channels, rng)),
                Some(SpatialGate::new(rng)),
                Some(ChannelGate::new(channels, rng)),
                Some(SpatialGate::new(rng)),
            ),
        };
        Self {
            variant,
            rule,
            channels,
            ca1,
            sa1,
            ca2,
            sa2,
        }
    }

    pub fn fused_channels(&self) -> usize {
        self.rule.fused_channels(self.channels)
    }

    fn combine(&self, a1: Tensor<T>, a2: Tensor<T>) -> Tensor<T> {
        match self.rule {
            FusionRule::AttendConcat => a1.concat_c(&a2),
            FusionRule::SumOnly => a1.add(&a2),
        }
    }

    pub fn forward(&self, f1: &Tensor<T>, f2: &Tensor<T>) -> (Tensor<T>, FuseCtx<T>) {
        debug_assert!(f1.same_shape(f2));
        match self.variant {
            AttentionVariant::None => (
                self.combine(f1.clone(), f2.clone()),
                FuseCtx {
                    ca1: None,
                    sa1: None,
                    ca2: None,
                    sa2: None,
                },
            ),
            AttentionVariant::PseudoPairCbam => {
                let (c1, _, ca1_ctx) = self.ca1.as_ref().unwrap().forward(f1);
                let a1 = f1.add(&c1);
                let (s2, _, sa2_ctx) = self.sa2.as_ref().unwrap().forward(f2);
                let a2 = f2.add(&s2);
                (
                    self.combine(a1, a2),
                    FuseCtx {
                        ca1: Some(ca1_ctx),
                        sa1: None,
                        ca2: None,
                        sa2: Some(sa2_ctx),
                    },
                )
            }
            AttentionVariant::PlainCbam => {
                let (u1, _, ca1_ctx) = self.ca1.as_ref().unwrap().forward(f1);
                let (v1, _, sa1_ctx) = self.sa1.as_ref().unwrap().forward(&u1);
                let (u2, _, ca2_ctx) = self.ca2.as_ref().unwrap().forward(f2);
                let (v2, _, sa2_ctx) = self.sa2.as_ref().unwrap().forward(&u2);
                (
                    self.combine(v1, v2),
                    FuseCtx {
                        ca1: Some(ca1_ctx),
                        sa1: Some(sa1_ctx),
                        ca2: Some(ca2_ctx),
                        sa2: Some(sa2_ctx),
                    },
                )
            }
        }
    }

    pub fn backward(&mut self, ctx: &FuseCtx<T>, dfused: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (da1, da2) = match self.rule {
            FusionRule::AttendConcat => dfused.split_c(self.channels),
            FusionRule::SumOnly => (dfused.clone(), dfused.clone()),
        };
        match self.variant {
            AttentionVariant::None => (da1, da2),
            AttentionVariant::PseudoPairCbam => {
                let mut df1 = self
                    .ca1
                    .as_mut()
                    .unwrap()
                    .backward(ctx.ca1.as_ref().unwrap(), &da1);
                df1.add_assign(&da1);
                let mut df2 = self
                    .sa2
                    .as_mut()
                    .unwrap()
                    .backward(ctx.sa2.as_ref().unwrap(), &da2);
                df2.add_assign(&da2);
                (df1, df2)
            }
            AttentionVariant::PlainCbam => {
                let du1 = self
                    .sa1
                    .as_mut()
                    .unwrap()
                    .backward(ctx.sa1.as_ref().unwrap(), &da1);
                let df1 = self
                    .ca1
                    .as_mut()
                    .unwrap()
                    .backward(ctx.ca1.as_ref().unwrap(), &du1);
                let du2 = self
                    .sa2
                    .as_mut()
                    .unwrap()
                    .backward(ctx.sa2.as_ref().unwrap(), &da2);
                let df2 = self
                    .ca2
                    .as_mut()
                    .unwrap()
                    .backward(ctx.ca2.as_ref().unwrap(), &du2);
                (df1, df2)
            }
        }
    }
}

impl<T: Scalar> HasParams<T> for FusionBlock<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        if let Some(g) = &mut self.ca1 {
            ps.extend(g.params_mut());
        }
        if let Some(g) = &mut self.sa1 {
            ps.extend(g.params_mut());
        }
        if let Some(g) = &mut self.ca2 {
            ps.extend(g.params_mut());
        }
        if let Some(g) = &mut self.sa2 {
            ps.extend(g.params_mut());
        }
        ps
    }
}
