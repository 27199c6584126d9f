//! Whole-video noise priors: the full decomposed and collaborated prior
//! plus the ablation variants it is compared against.

use std::fmt;
use std::str::FromStr;

use crate::collab::{first_frame_base_mode, roll_sequence, stack_frames, unstack_frames, CollabParams};
use crate::decompose::{
    compose, sample_first_frame_shared, sample_residual, sample_shared, ChannelPair, Composed,
    DecompParams, MaskVolume, SceneNoise, VIEWS,
};
use crate::error::{Error, Result};
use crate::rng::{gaussian_sample, Component, StreamKey};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseMode {
    /// Scene-level split, shared/residual split and multi-frame collaboration.
    Full,
    /// Window `K = 0`: shared components are sampled afresh every frame.
    NoCollab,
    /// Shared components of every frame are scaled copies of the frame-0 noise.
    FirstFrameBase,
    /// Single-level split: one noise field, no background/foreground masks.
    NoDecomp,
    /// Plain i.i.d. `N(0, I)` noise.
    Baseline,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 5] = [
        NoiseMode::Full,
        NoiseMode::NoCollab,
        NoiseMode::FirstFrameBase,
        NoiseMode::NoDecomp,
        NoiseMode::Baseline,
    ];

    pub fn uses_collab(self) -> bool {
        matches!(self, NoiseMode::Full | NoiseMode::NoDecomp)
    }

    pub fn uses_masks(self) -> bool {
        !matches!(self, NoiseMode::NoDecomp | NoiseMode::Baseline)
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Full => "full",
            NoiseMode::NoCollab => "nocollab",
            NoiseMode::FirstFrameBase => "firstframe",
            NoiseMode::NoDecomp => "nodecomp",
            NoiseMode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NoiseMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePrior {
    pub decomp: DecompParams,
    pub mode: NoiseMode,
    /// Required by the collaborating modes.
    pub collab: Option<CollabParams>,
    pub renormalize: bool,
}

/// One draw from a prior over a whole `[6, N, C, H, W]` video.
#[derive(Clone, Debug)]
pub struct PriorSample {
    pub noise: SceneNoise,
    pub full: ChannelPair<Tensor>,
    /// Masks actually used (all background for the unmasked modes).
    pub masks: MaskVolume,
    pub composed: Composed,
}

impl NoisePrior {
    pub fn new(decomp: DecompParams, mode: NoiseMode, collab: Option<CollabParams>) -> Result<Self> {
        if mode.uses_collab() && collab.is_none() {
            return Err(Error::Config(format!("mode {mode} needs collaboration parameters")));
        }
        Ok(Self { decomp, mode, collab, renormalize: false })
    }

    pub fn effective_masks(&self, masks: &MaskVolume) -> MaskVolume {
        if self.mode.uses_masks() {
            masks.clone()
        } else {
            MaskVolume::all_background(masks.frames(), masks.height(), masks.width())
        }
    }

    /// Draw a video's worth of noise. `key` supplies seed and draw counter.
    pub fn sample(&self, masks: &MaskVolume, channels: usize, key: StreamKey) -> Result<PriorSample> {
        let frames = masks.frames();
        let grid = [channels, masks.height(), masks.width()];
        let p = &self.decomp;
        let noise = match self.mode {
            NoiseMode::Full | NoiseMode::NoDecomp => {
                let c = self.collab.as_ref().expect("checked in new");
                let c = if self.mode == NoiseMode::NoDecomp { c.clone().without_cross_channel() } else { c.clone() };
                let first = sample_first_frame_shared(p, &grid, key)?;
                roll_sequence(&first, p, &c, frames, key, self.renormalize)?
            }
            NoiseMode::NoCollab => {
                let shared = (0..frames).map(|n| sample_shared(p, n, &grid, key)).collect::<Result<Vec<_>>>()?;
                let residual = (0..frames).map(|n| sample_residual(p, n, &grid, key)).collect::<Result<Vec<_>>>()?;
                SceneNoise { shared: stack_frames(&shared)?, residual: stack_frames(&residual)? }
            }
            NoiseMode::FirstFrameBase => {
                let first = sample_first_frame_shared(p, &grid, key)?;
                let residual = (0..frames).map(|n| sample_residual(p, n, &grid, key)).collect::<Result<Vec<_>>>()?;
                let full0 = stack_frames(&[first.add(&residual[0])?])?;
                let eps0 = compose(&full0, &masks.frames_range(0, 1)?)?.eps.select(1, 0)?;
                let mut shared = vec![first];
                if frames > 1 {
                    shared.extend(unstack_frames(&first_frame_base_mode(&eps0, p, frames - 1)?)?);
                }
                SceneNoise { shared: stack_frames(&shared)?, residual: stack_frames(&residual)? }
            }
            NoiseMode::Baseline => {
                let per_channel = ChannelPair::try_from_fn(|ch| {
                    let frames = (0..frames)
                        .map(|n| {
                            let views = (0..VIEWS)
                                .map(|m| {
                                    let mut k = key.view(m).frame(n).channel(ch.tag());
                                    k.component = Component::Plain;
                                    gaussian_sample(&grid, 1.0, k)
                                })
                                .collect::<Result<Vec<_>>>()?;
                            Tensor::stack(&views, 0)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Tensor::stack(&frames, 1)
                })?;
                let zeros = per_channel.map(|_, t| Tensor::zeros(t.dims()));
                SceneNoise { shared: zeros, residual: per_channel }
            }
        };
        let full = noise.full()?;
        let masks = self.effective_masks(masks);
        let composed = compose(&full, &masks)?;
        Ok(PriorSample { noise, full, masks, composed })
    }
}

/// Disjoint draw counters for the different consumers of one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Noise = 0,
    Generate = 1,
    TrainDenoiser = 2,
    FitCollab = 3,
    Evaluate = 4,
}

pub fn draw_id(purpose: Purpose, index: u64) -> u64 {
    ((purpose as u64) << 56) | (index & ((1 << 56) - 1))
}

/// Base key for `purpose`'s `index`-th draw under `seed`.
pub fn purpose_key(seed: u64, purpose: Purpose, index: u64) -> StreamKey {
    StreamKey::new(seed, Component::Aux).draw(draw_id(purpose, index))
}
