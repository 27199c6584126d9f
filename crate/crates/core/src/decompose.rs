//! Multi-level noise decomposition.
//!
//! The initial noise of every view and frame is split at two levels. At the
//! scene level a binary background mask selects, per pixel, whether the
//! noise comes from the background field or the foreground field. At the
//! individual level each field is the sum of a shared component (variance
//! `η²/(η²+1)` for background, `λ²/(λ²+1)` for foreground) and an
//! independently drawn residual carrying the remaining variance, so every
//! composed pixel is marginally `N(0, 1)`.

use std::ops::{Index, IndexMut};

use crate::error::{param_err, shape_err, Error, Result};
use crate::rng::{gaussian_sample, ChannelTag, Component, StreamKey};
use crate::tensor::Tensor;

/// Number of cameras in the rig.
pub const VIEWS: usize = 6;

/// The two scene-level noise channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SceneChannel {
    Background,
    Foreground,
}

impl SceneChannel {
    pub const BOTH: [SceneChannel; 2] = [SceneChannel::Background, SceneChannel::Foreground];

    pub fn index(self) -> usize {
        match self {
            SceneChannel::Background => 0,
            SceneChannel::Foreground => 1,
        }
    }

    pub fn tag(self) -> ChannelTag {
        match self {
            SceneChannel::Background => ChannelTag::Background,
            SceneChannel::Foreground => ChannelTag::Foreground,
        }
    }

    pub fn other(self) -> SceneChannel {
        match self {
            SceneChannel::Background => SceneChannel::Foreground,
            SceneChannel::Foreground => SceneChannel::Background,
        }
    }
}

/// A value per scene channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPair<T> {
    pub background: T,
    pub foreground: T,
}

impl<T> ChannelPair<T> {
    pub fn new(background: T, foreground: T) -> Self {
        Self { background, foreground }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(SceneChannel) -> Result<T, E>) -> Result<Self, E> {
        Ok(Self {
            background: f(SceneChannel::Background)?,
            foreground: f(SceneChannel::Foreground)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(SceneChannel, &T) -> U) -> ChannelPair<U> {
        ChannelPair {
            background: f(SceneChannel::Background, &self.background),
            foreground: f(SceneChannel::Foreground, &self.foreground),
        }
    }
}

impl<T> Index<SceneChannel> for ChannelPair<T> {
    type Output = T;
    fn index(&self, c: SceneChannel) -> &T {
        match c {
            SceneChannel::Background => &self.background,
            SceneChannel::Foreground => &self.foreground,
        }
    }
}

impl<T> IndexMut<SceneChannel> for ChannelPair<T> {
    fn index_mut(&mut self, c: SceneChannel) -> &mut T {
        match c {
            SceneChannel::Background => &mut self.background,
            SceneChannel::Foreground => &mut self.foreground,
        }
    }
}

impl ChannelPair<Tensor> {
    pub fn add(&self, other: &ChannelPair<Tensor>) -> Result<ChannelPair<Tensor>> {
        ChannelPair::try_from_fn(|c| self[c].add(&other[c]))
    }
}

/// Shared/residual variance split, parameterised by `η` (background) and
/// `λ` (foreground).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompParams {
    eta: f64,
    lambda: f64,
}

impl Default for DecompParams {
    fn default() -> Self {
        Self { eta: 1.0, lambda: 1.0 }
    }
}

impl DecompParams {
    pub fn new(eta: f64, lambda: f64) -> Result<Self> {
        for (name, v) in [("eta", eta), ("lambda", lambda)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(param_err!("{name} must be positive and finite, got {v}"));
            }
        }
        Ok(Self { eta, lambda })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn weight(&self, channel: SceneChannel) -> f64 {
        match channel {
            SceneChannel::Background => self.eta,
            SceneChannel::Foreground => self.lambda,
        }
    }

    /// `w²/(w²+1)`.
    pub fn shared_variance(&self, channel: SceneChannel) -> f64 {
        let w2 = self.weight(channel).powi(2);
        w2 / (w2 + 1.0)
    }

    /// `1/(w²+1)`, computed as the complement of the shared variance so the
    /// pair sums to exactly one.
    pub fn residual_variance(&self, channel: SceneChannel) -> f64 {
        1.0 - self.shared_variance(channel)
    }
}

/// Binary background masks `[6, N, 1, H, W]`; the foreground mask is the
/// pointwise complement.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    mask_b: Tensor,
}

impl MaskVolume {
    pub fn new(mask_b: Tensor) -> Result<Self> {
        let d = mask_b.dims();
        if d.len() != 5 || d[0] != VIEWS || d[2] != 1 {
            return Err(shape_err!("mask volume must be [6, N, 1, H, W], got {d:?}"));
        }
        if let Some(v) = mask_b.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Ok(Self { mask_b })
    }

    /// Everything background.
    pub fn all_background(frames: usize, h: usize, w: usize) -> Self {
        Self { mask_b: Tensor::ones(&[VIEWS, frames, 1, h, w]) }
    }

    pub fn frames(&self) -> usize {
        self.mask_b.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.mask_b.dims()[3]
    }

    pub fn width(&self) -> usize {
        self.mask_b.dims()[4]
    }

    pub fn background(&self) -> &Tensor {
        &self.mask_b
    }

    pub fn foreground(&self) -> Tensor {
        self.mask_b.map(|v| 1.0 - v)
    }

    pub fn get(&self, channel: SceneChannel) -> Tensor {
        match channel {
            SceneChannel::Background => self.mask_b.clone(),
            SceneChannel::Foreground => self.foreground(),
        }
    }

    /// Mask for `channel` broadcast over `channels` data channels, i.e.
    /// `[6, N, channels, H, W]`.
    pub fn expanded(&self, channel: SceneChannel, channels: usize) -> Tensor {
        let m = self.get(channel);
        if channels == 1 {
            return m;
        }
        let d = m.dims().to_vec();
        let plane = d[3] * d[4];
        let mut out = Tensor::zeros(&[d[0], d[1], channels, d[3], d[4]]);
        let (src, dst) = (m.data(), out.data_mut());
        for vf in 0..d[0] * d[1] {
            for c in 0..channels {
                dst[(vf * channels + c) * plane..(vf * channels + c + 1) * plane]
                    .copy_from_slice(&src[vf * plane..(vf + 1) * plane]);
            }
        }
        out
    }

    /// Apply the channel's mask to a `[6, N, C, H, W]` volume.
    pub fn apply(&self, channel: SceneChannel, volume: &Tensor) -> Result<Tensor> {
        let d = volume.dims();
        if d.len() != 5 {
            return Err(shape_err!("masked volume must be rank 5, got {d:?}"));
        }
        volume.hadamard(&self.expanded(channel, d[2]))
    }

    /// Keep only frames `[start, start + count)`.
    pub fn frames_range(&self, start: usize, count: usize) -> Result<MaskVolume> {
        let parts = (start..start + count)
            .map(|n| self.mask_b.select(1, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mask_b: Tensor::stack(&parts, 1)? })
    }
}

/// Shared and residual components of both scene-level channels, each
/// `[6, N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneNoise {
    pub shared: ChannelPair<Tensor>,
    pub residual: ChannelPair<Tensor>,
}

impl SceneNoise {
    /// `shared + residual` for both channels.
    pub fn full(&self) -> Result<ChannelPair<Tensor>> {
        self.shared.add(&self.residual)
    }
}

/// Masked scene-level noises and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Composed {
    pub masked_b: Tensor,
    pub masked_f: Tensor,
    pub eps: Tensor,
}

fn per_view(
    grid: &[usize],
    variance: f64,
    key: StreamKey,
    frame: usize,
    channel: SceneChannel,
    component: Component,
) -> Result<Tensor> {
    let views = (0..VIEWS)
        .map(|m| {
            let mut k = key.view(m).frame(frame).channel(channel.tag());
            k.component = component;
            gaussian_sample(grid, variance, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&views, 0)
}

/// First-frame shared components, `[6, C, H, W]` per channel. Each view is
/// an independent draw. `key` supplies the seed and draw counter; the lane's
/// view, frame and channel fields are filled in here.
pub fn sample_first_frame_shared(
    p: &DecompParams,
    grid: &[usize],
    key: StreamKey,
) -> Result<ChannelPair<Tensor>> {
    ChannelPair::try_from_fn(|c| per_view(grid, p.shared_variance(c), key, 0, c, Component::Shared))
}

/// Fresh shared components for `frame`, used when collaboration is off.
pub fn sample_shared(
    p: &DecompParams,
    frame: usize,
    grid: &[usize],
    key: StreamKey,
) -> Result<ChannelPair<Tensor>> {
    ChannelPair::try_from_fn(|c| per_view(grid, p.shared_variance(c), key, frame, c, Component::Shared))
}

/// Independent residual components for `frame`, `[6, C, H, W]` per channel.
pub fn sample_residual(
    p: &DecompParams,
    frame: usize,
    grid: &[usize],
    key: StreamKey,
) -> Result<ChannelPair<Tensor>> {
    ChannelPair::try_from_fn(|c| {
        per_view(grid, p.residual_variance(c), key, frame, c, Component::Residual)
    })
}

/// `N^B = (shared^B + residual^B) ⊙ M^B`, `N^F = (shared^F + residual^F) ⊙ M^F`,
/// `ε = N^B + N^F`, on `[6, N, C, H, W]` volumes.
pub fn compose_initial(
    shared: &ChannelPair<Tensor>,
    residual: &ChannelPair<Tensor>,
    masks: &MaskVolume,
) -> Result<Composed> {
    compose(&shared.add(residual)?, masks)
}

/// Mask two full scene-level fields and sum them.
pub fn compose(full: &ChannelPair<Tensor>, masks: &MaskVolume) -> Result<Composed> {
    let masked_b = masks.apply(SceneChannel::Background, &full.background)?;
    let masked_f = masks.apply(SceneChannel::Foreground, &full.foreground)?;
    let eps = masked_b.add(&masked_f)?;
    Ok(Composed { masked_b, masked_f, eps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(seed: u64) -> StreamKey {
        StreamKey::new(seed, Component::Shared)
    }

    #[test]
    fn variance_split_values() {
        let p = DecompParams::new(1.0, 3.0).unwrap();
        assert_eq!(p.shared_variance(SceneChannel::Background), 0.5);
        assert_eq!(p.residual_variance(SceneChannel::Background), 0.5);
        assert!((p.residual_variance(SceneChannel::Foreground) - 0.1).abs() < 1e-15);
        let big = DecompParams::new(1e6, 1.0).unwrap();
        assert!(big.shared_variance(SceneChannel::Background) > 1.0 - 1e-11);
    }

    #[test]
    fn rejects_nonpositive_weights() {
        assert!(DecompParams::new(0.0, 1.0).is_err());
        assert!(DecompParams::new(1.0, -2.0).is_err());
        assert!(DecompParams::new(f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn mask_volume_validates() {
        assert!(MaskVolume::new(Tensor::full(&[6, 2, 1, 3, 3], 0.5)).is_err());
        assert!(MaskVolume::new(Tensor::ones(&[5, 2, 1, 3, 3])).is_err());
        let m = MaskVolume::new(Tensor::from_fn(&[6, 2, 1, 3, 3], |i| (i % 2) as f64)).unwrap();
        let prod = m.background().hadamard(&m.foreground()).unwrap();
        assert_eq!(prod.max_abs(), 0.0);
        assert_eq!(m.expanded(SceneChannel::Foreground, 3).dims(), &[6, 2, 3, 3, 3]);
    }

    #[test]
    fn shared_variance_at_eta_two() {
        let p = DecompParams::new(2.0, 1.0).unwrap();
        let s = sample_first_frame_shared(&p, &[1, 200, 850], key(3)).unwrap();
        let m = s.background.moments().unwrap();
        assert!((m.variance - 0.8).abs() < 0.01, "{m:?}");
    }

    #[test]
    fn residual_frames_uncorrelated() {
        let p = DecompParams::default();
        let a = sample_residual(&p, 1, &[1, 400, 420], key(9)).unwrap();
        let b = sample_residual(&p, 2, &[1, 400, 420], key(9)).unwrap();
        let rho = crate::tensor::correlation(a.background.data(), b.background.data()).unwrap();
        assert!(rho.abs() < 0.01, "rho = {rho}");
    }

    #[test]
    fn full_background_mask_passes_background_through() {
        let p = DecompParams::default();
        let grid = [1, 4, 5];
        let sh = sample_first_frame_shared(&p, &grid, key(1)).unwrap();
        let re = sample_residual(&p, 0, &grid, key(1)).unwrap();
        let vol = |t: &Tensor| t.clone().reshape(vec![6, 1, 1, 4, 5]).unwrap();
        let sh = sh.map(|_, t| vol(t));
        let re = re.map(|_, t| vol(t));
        let c = compose_initial(&sh, &re, &MaskVolume::all_background(1, 4, 5)).unwrap();
        assert_eq!(c.eps, sh.background.add(&re.background).unwrap());
        assert_eq!(c.masked_f.max_abs(), 0.0);
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let full = ChannelPair::new(Tensor::zeros(&[6, 2, 1, 3, 3]), Tensor::zeros(&[6, 2, 1, 3, 3]));
        let masks = MaskVolume::all_background(2, 3, 4);
        assert!(compose(&full, &masks).is_err());
    }
}
