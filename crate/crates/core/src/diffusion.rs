//! Forward noising, the masked joint denoiser wiring and reverse sampling.

use std::str::FromStr;

use crate::decompose::{compose, ChannelPair, Composed, MaskVolume, VIEWS};
use crate::error::{param_err, shape_err, Error, Result};
use crate::prior::{draw_id, NoisePrior, Purpose};
use crate::rng::{gaussian_sample, Component, StreamKey};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub const DEFAULT_STEPS: usize = 100;

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(param_err!("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(param_err!("beta {b} outside (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Betas spaced evenly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(param_err!("schedule needs at least one step"));
        }
        let betas = (0..steps)
            .map(|i| if steps == 1 { start } else { start + (end - start) * i as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(param_err!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(Self::DEFAULT_STEPS, 1e-4, 0.02).expect("valid default schedule")
    }
}

/// `z_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn noisify(x0: &Tensor, eps: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_with(eps, "noisify", |x, e| a * x + b * e)
}

/// Ground-truth masked channel noises for a pair of full fields.
pub fn masked_gt_noise(full: &ChannelPair<Tensor>, masks: &MaskVolume) -> Result<Composed> {
    compose(full, masks)
}

/// Something that predicts the noise in a `[6, N, C, H, W]` volume `z_t`.
pub trait Denoiser: Sync {
    fn predict(&self, z: &Tensor, t: usize, steps: usize) -> Result<Tensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, z: &Tensor, t: usize, steps: usize) -> Result<Tensor> {
        (**self).predict(z, t, steps)
    }
}

/// Predicts exactly the noise that turns `x0` into the given `z_t`.
#[derive(Clone, Debug)]
pub struct NoiseOracle {
    pub x0: Tensor,
    pub schedule: DiffusionSchedule,
}

impl Denoiser for NoiseOracle {
    fn predict(&self, z: &Tensor, t: usize, _steps: usize) -> Result<Tensor> {
        self.schedule.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z.zip_with(&self.x0, "noise oracle", |z, x| (z - a * x) / b)
    }
}

/// Returns a fixed tensor whatever the input.
#[derive(Clone, Debug)]
pub struct FixedDenoiser(pub Tensor);

impl Denoiser for FixedDenoiser {
    fn predict(&self, z: &Tensor, _t: usize, _steps: usize) -> Result<Tensor> {
        if z.dims() != self.0.dims() {
            return Err(shape_err!("fixed prediction {:?} vs input {:?}", self.0.dims(), z.dims()));
        }
        Ok(self.0.clone())
    }
}

/// Raw and masked channel predictions and their sum `ε'_t`.
#[derive(Clone, Debug)]
pub struct JointPrediction {
    pub raw: ChannelPair<Tensor>,
    pub masked: ChannelPair<Tensor>,
    pub eps: Tensor,
}

/// Run both channel denoisers on the same `z_t` and merge
/// `ε'_t = M^B ⊙ ε̃^B + M^F ⊙ ε̃^F`.
pub fn predict_joint(
    z: &Tensor,
    masks: &MaskVolume,
    den_b: &dyn Denoiser,
    den_f: &dyn Denoiser,
    t: usize,
    steps: usize,
) -> Result<JointPrediction> {
    let raw = ChannelPair::new(den_b.predict(z, t, steps)?, den_f.predict(z, t, steps)?);
    let masked = ChannelPair::try_from_fn(|ch| masks.apply(ch, &raw[ch]))?;
    let eps = masked.background.add(&masked.foreground)?;
    Ok(JointPrediction { raw, masked, eps })
}

/// Which noise drives the stochastic part of each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReverseNoise {
    /// A fresh draw from the same structured prior as the initial noise.
    #[default]
    Prior,
    /// Independent `N(0, I)` per element.
    Iid,
}

impl FromStr for ReverseNoise {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(ReverseNoise::Prior),
            "iid" => Ok(ReverseNoise::Iid),
            _ => Err(Error::Config(format!("unknown reverse noise {s:?}"))),
        }
    }
}

/// One ancestral step `z_t → z_{t−1}` given the predicted noise.
pub fn reverse_step(
    z: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let c_z = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z.zip_with(eps_pred, "reverse step", |z, e| {
        let x0 = (z - sb * e) / sa;
        c_x0 * x0 + c_z * z
    })?;
    let var = beta * (1.0 - ab_prev) / (1.0 - ab);
    if let (Some(n), true) = (noise, var > 0.0) {
        out.add_scaled(var.sqrt(), n)?;
    }
    Ok(out)
}

/// Reverse-process configuration.
#[derive(Clone, Debug)]
pub struct Sampler<'a> {
    pub prior: &'a NoisePrior,
    pub schedule: &'a DiffusionSchedule,
    pub reverse_noise: ReverseNoise,
    pub channels: usize,
    pub seed: u64,
    /// Distinguishes videos generated under one seed.
    pub index: u64,
}

impl Sampler<'_> {
    fn step_key(&self, step: usize) -> StreamKey {
        let id = (self.index << 16) | step as u64;
        StreamKey::new(self.seed, Component::Reverse).draw(draw_id(Purpose::Generate, id))
    }

    fn step_noise(&self, masks: &MaskVolume, step: usize) -> Result<Tensor> {
        let key = self.step_key(step);
        match self.reverse_noise {
            ReverseNoise::Prior => Ok(self.prior.sample(masks, self.channels, key)?.composed.eps),
            ReverseNoise::Iid => {
                let grid = [self.channels, masks.height(), masks.width()];
                let views = (0..VIEWS)
                    .map(|m| {
                        let frames = (0..masks.frames())
                            .map(|n| gaussian_sample(&grid, 1.0, key.view(m).frame(n)))
                            .collect::<Result<Vec<_>>>()?;
                        Tensor::stack(&frames, 0)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack(&views, 0)
            }
        }
    }

    /// The structured initial noise `z_T`.
    pub fn initial_noise(&self, masks: &MaskVolume) -> Result<Tensor> {
        let key = self.step_key(0);
        Ok(self.prior.sample(masks, self.channels, key)?.composed.eps)
    }

    /// Run the reverse chain from `z_T` down to `x_0`.
    pub fn run(&self, z_t: Tensor, masks: &MaskVolume, den_b: &dyn Denoiser, den_f: &dyn Denoiser) -> Result<Tensor> {
        let masks = self.prior.effective_masks(masks);
        let steps = self.schedule.steps();
        let mut z = z_t;
        for t in (1..=steps).rev() {
            let pred = predict_joint(&z, &masks, den_b, den_f, t, steps)?;
            let noise = if t > 1 { Some(self.step_noise(&masks, t)?) } else { None };
            z = reverse_step(&z, &pred.eps, t, self.schedule, noise.as_ref())?;
        }
        Ok(z)
    }

    /// Generate a `[6, N, C, H, W]` video.
    pub fn sample_video(&self, masks: &MaskVolume, den_b: &dyn Denoiser, den_f: &dyn Denoiser) -> Result<Tensor> {
        let z = self.initial_noise(masks)?;
        self.run(z, masks, den_b, den_f)
    }
}
