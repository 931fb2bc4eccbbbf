//! Grouped attention module: a channel gate computed from globally pooled
//! grouped features, followed by a spatial gate computed from the
//! channel-refined map, both applied multiplicatively.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::dataio::write_pgm;
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, Binding, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const SPATIAL_KERNEL: usize = 7;

/// `A_c = sigmoid(W pool(F) + b)` with a square `C x C` weight.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

/// `A_s = sigmoid(conv7x7(mean_c(F')) + b)`, one input and one output channel.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct GroupedAttentionModule {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

/// Output of a GAM pass, including both attention maps.
#[derive(Clone, Copy, Debug)]
pub struct GamOutput {
    pub output: Var,
    /// `[N, C]`
    pub channel_map: Var,
    /// `[N, 1, H, W]`
    pub spatial_map: Var,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ChannelAttention {
            channels,
            fc_weight: store.add(
                format!("{name}.fc.weight"),
                kaiming_uniform(&[channels, channels], channels, rng),
            ),
            fc_bias: store.add(format!("{name}.fc.bias"), Tensor::zeros(&[channels])),
        }
    }

    /// Parameter count: `C^2 + C`.
    pub fn num_params(channels: usize) -> usize {
        channels * channels + channels
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, features: Var) -> Result<Var> {
        let shape = tape.value(features).shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "channel attention configured for {} channels, got input {shape:?}",
                self.channels
            )));
        }
        let pooled = tape.global_avg_pool(features)?;
        let w = bind.var(tape, self.fc_weight);
        let b = bind.var(tape, self.fc_bias);
        let logits = tape.linear(pooled, w, Some(b))?;
        Ok(tape.sigmoid(logits))
    }
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let k = SPATIAL_KERNEL;
        SpatialAttention {
            conv_weight: store.add(format!("{name}.conv.weight"), kaiming_uniform(&[1, 1, k, k], k * k, rng)),
            conv_bias: store.add(format!("{name}.conv.bias"), Tensor::zeros(&[1])),
        }
    }

    pub fn num_params() -> usize {
        SPATIAL_KERNEL * SPATIAL_KERNEL + 1
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, refined: Var) -> Result<Var> {
        let pooled = tape.channel_avg_pool(refined)?;
        let w = bind.var(tape, self.conv_weight);
        let b = bind.var(tape, self.conv_bias);
        let logits = tape.conv2d(pooled, w, Some(b), 1, 1, SPATIAL_KERNEL / 2)?;
        Ok(tape.sigmoid(logits))
    }
}

impl GroupedAttentionModule {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        GroupedAttentionModule {
            channel: ChannelAttention::new(store, &format!("{name}.channel"), channels, rng),
            spatial: SpatialAttention::new(store, &format!("{name}.spatial"), rng),
        }
    }

    pub fn num_params(channels: usize) -> usize {
        ChannelAttention::num_params(channels) + SpatialAttention::num_params()
    }

    /// `A_s ⊗ (A_c ⊗ F_G)`.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, features: Var) -> Result<GamOutput> {
        let channel_map = self.channel.forward(tape, bind, features)?;
        let [n, c] = [tape.value(channel_map).shape()[0], tape.value(channel_map).shape()[1]];
        let gate = tape.reshape(channel_map, &[n, c, 1, 1])?;
        let refined = tape.mul(gate, features)?;
        let spatial_map = self.spatial.forward(tape, bind, refined)?;
        let output = tape.mul(spatial_map, refined)?;
        Ok(GamOutput { output, channel_map, spatial_map })
    }
}

/// Min-max normalise map `index` of an `[N,1,H,W]` spatial attention tensor
/// to 0..=255 (floor rounding). A constant map becomes all zeros.
pub fn attention_map_pixels(maps: &Tensor, index: usize) -> Result<(usize, usize, Vec<u8>)> {
    let &[n, one, h, w] = maps.shape() else {
        return Err(Error::shape(format!("attention maps must be [N,1,H,W], got {:?}", maps.shape())));
    };
    if one != 1 {
        return Err(Error::shape("attention maps must have a single channel"));
    }
    if index >= n {
        return Err(Error::usage(format!("map index {index} out of range for {n} maps")));
    }
    let values = &maps.data()[index * h * w..(index + 1) * h * w];
    if values.is_empty() {
        return Err(Error::usage("empty attention map"));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        values
            .iter()
            .map(|v| (((v - lo) / (hi - lo)) * 255.0).floor().clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        vec![0; values.len()]
    };
    Ok((h, w, pixels))
}

/// Write one spatial attention map as a binary PGM (P5) file.
pub fn export_attention_map(maps: &Tensor, index: usize, path: &Path) -> Result<()> {
    let (h, w, pixels) = attention_map_pixels(maps, index)?;
    write_pgm(path, w, h, &pixels)
}
