//! Losses, analytic gradients and the two training loops: fitting the
//! collaboration matrices and training the denoiser pair.

use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::collab::{roll_sequence, unstack_frames, window_frames, CollabParams, MatrixRole};
use crate::decompose::{sample_first_frame_shared, ChannelPair, DecompParams, MaskVolume, SceneChannel, VIEWS};
use crate::denoiser::{Arch, ConvDenoiser};
use crate::diffusion::{noisify, DiffusionSchedule};
use crate::error::{param_err, shape_err, Error, Result};
use crate::prior::{purpose_key, NoisePrior, Purpose};
use crate::rng::{Component, StreamKey};
use crate::scene::SceneDataset;
use crate::tensor::Tensor;

/// Target coefficient plane: `v_D` for every view and frame, `[2, 6, N]`.
pub fn coefficient_targets(p: &DecompParams, frames: usize) -> Tensor {
    Tensor::from_fn(&[2, VIEWS, frames], |i| {
        let ch = if i < VIEWS * frames { SceneChannel::Background } else { SceneChannel::Foreground };
        p.shared_variance(ch)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoeffLoss {
    pub background: f64,
    pub foreground: f64,
    /// Estimated coefficients `[2, 6, N]`.
    pub coefficients: Tensor,
}

impl CoeffLoss {
    pub fn total(&self) -> f64 {
        self.background + self.foreground
    }
}

/// Gradients with respect to `S` and `I`, shaped like them.
#[derive(Clone, Debug, PartialEq)]
pub struct CollabGrad {
    pub inter_view: Tensor,
    pub impact: Tensor,
}

/// A sampled noise history: `N` frames of full channel noises, `[6, ...]` each.
pub type History = Vec<ChannelPair<Tensor>>;

/// Histories rolled forward with the current parameters. Each one is an
/// independent draw; the result is used as fixed input to the coefficient
/// loss.
pub fn sample_histories(
    c: &CollabParams,
    p: &DecompParams,
    grid: &[usize],
    count: usize,
    seed: u64,
    purpose: Purpose,
    offset: u64,
) -> Result<Vec<History>> {
    (0..count as u64)
        .into_par_iter()
        .map(|b| {
            let key = purpose_key(seed, purpose, offset + b);
            let first = sample_first_frame_shared(p, grid, key)?;
            let noise = roll_sequence(&first, p, c, c.frames(), key, false)?;
            unstack_frames(&noise.full()?)
        })
        .collect()
}

fn check_histories(c: &CollabParams, histories: &[History]) -> Result<usize> {
    let first = histories
        .first()
        .ok_or_else(|| param_err!("coefficient loss needs a nonempty batch"))?;
    let dims = first
        .first()
        .map(|f| f.background.dims().to_vec())
        .ok_or_else(|| param_err!("histories must hold at least one frame"))?;
    if dims[0] != VIEWS {
        return Err(shape_err!("history frames must be [6, ...], got {dims:?}"));
    }
    for h in histories {
        if h.len() != c.frames() {
            return Err(shape_err!("history has {} frames, parameters cover {}", h.len(), c.frames()));
        }
        if h.iter().any(|f| f.background.dims() != dims || f.foreground.dims() != dims) {
            return Err(shape_err!("history frames disagree in shape"));
        }
    }
    Ok(dims.iter().skip(1).product())
}

fn mix_views(s: &[f64], src: &[f64], pix: usize) -> Vec<f64> {
    let mut out = vec![0.0; VIEWS * pix];
    for p in 0..VIEWS {
        let dst = &mut out[p * pix..(p + 1) * pix];
        for q in 0..VIEWS {
            let w = s[p * VIEWS + q];
            if w == 0.0 {
                continue;
            }
            for (o, v) in dst.iter_mut().zip(&src[q * pix..(q + 1) * pix]) {
                *o += w * v;
            }
        }
    }
    out
}

struct Rolled {
    /// `[frame][channel]` view-mixed history, `6·pix` each.
    mixed: Vec<[Vec<f64>; 2]>,
    /// `[target][channel]` collaborated output.
    outs: Vec<[Vec<f64>; 2]>,
}

fn roll_outputs(c: &CollabParams, h: &History, pix: usize) -> Rolled {
    let (n_frames, k) = (c.frames(), c.window());
    let s = c.inter_view().data();
    let imp = c.impact().data();
    let mixed: Vec<[Vec<f64>; 2]> = (0..n_frames)
        .map(|i| {
            SceneChannel::BOTH.map(|d| {
                let off = (i * 2 + d.index()) * VIEWS * VIEWS;
                mix_views(&s[off..off + VIEWS * VIEWS], h[i][d].data(), pix)
            })
        })
        .collect();
    let outs = (0..n_frames)
        .map(|n| {
            SceneChannel::BOTH.map(|target| {
                let mut out = vec![0.0; VIEWS * pix];
                for (i, slot) in window_frames(n + 1, k) {
                    for d in SceneChannel::BOTH {
                        for p in 0..VIEWS {
                            let w = imp[((slot * 2 + d.index()) * 2 + target.index()) * VIEWS + p];
                            let r = p * pix..(p + 1) * pix;
                            for (o, v) in out[r.clone()].iter_mut().zip(&mixed[i][d.index()][r]) {
                                *o += w * v;
                            }
                        }
                    }
                }
                out
            })
        })
        .collect();
    Rolled { mixed, outs }
}

fn coeff_pass(
    c: &CollabParams,
    p: &DecompParams,
    histories: &[History],
    want_grad: bool,
) -> Result<(CoeffLoss, Option<CollabGrad>)> {
    let pix = check_histories(c, histories)?;
    let (n_frames, k) = (c.frames(), c.window());
    let elems = (histories.len() * pix) as f64;
    let rolled: Vec<Rolled> = histories.par_iter().map(|h| roll_outputs(c, h, pix)).collect();

    let mut coef = Tensor::zeros(&[2, VIEWS, n_frames]);
    {
        let cd = coef.data_mut();
        for r in &rolled {
            for (n, outs) in r.outs.iter().enumerate() {
                for ch in SceneChannel::BOTH {
                    for v in 0..VIEWS {
                        let sq: f64 = outs[ch.index()][v * pix..(v + 1) * pix].iter().map(|x| x * x).sum();
                        cd[(ch.index() * VIEWS + v) * n_frames + n] += sq;
                    }
                }
            }
        }
        for x in cd.iter_mut() {
            *x /= elems;
        }
    }
    let targets = coefficient_targets(p, n_frames);
    let half = VIEWS * n_frames;
    let dist = |range: std::ops::Range<usize>| -> f64 {
        range.map(|i| (targets.data()[i] - coef.data()[i]).abs()).sum()
    };
    let loss = CoeffLoss { background: dist(0..half), foreground: dist(half..2 * half), coefficients: coef.clone() };
    if !want_grad {
        return Ok((loss, None));
    }

    // d|v - c|/dc, with 0 at the kink.
    let sign: Vec<f64> = coef
        .data()
        .iter()
        .zip(targets.data())
        .map(|(c, v)| if c > v { 1.0 } else if c < v { -1.0 } else { 0.0 })
        .collect();
    let s = c.inter_view().data();
    let imp = c.impact().data();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = rolled
        .par_iter()
        .zip(histories.par_iter())
        .map(|(r, h)| {
            let mut ds = vec![0.0; s.len()];
            let mut di = vec![0.0; imp.len()];
            let mut dmixed: Vec<[Vec<f64>; 2]> =
                (0..n_frames).map(|_| [vec![0.0; VIEWS * pix], vec![0.0; VIEWS * pix]]).collect();
            for n in 0..n_frames {
                for target in SceneChannel::BOTH {
                    let out = &r.outs[n][target.index()];
                    for (i, slot) in window_frames(n + 1, k) {
                        for d in SceneChannel::BOTH {
                            for v in 0..VIEWS {
                                let g = sign[(target.index() * VIEWS + v) * n_frames + n] * 2.0 / elems;
                                if g == 0.0 {
                                    continue;
                                }
                                let ii = ((slot * 2 + d.index()) * 2 + target.index()) * VIEWS + v;
                                let w = imp[ii];
                                let rg = v * pix..(v + 1) * pix;
                                let mixed = &r.mixed[i][d.index()][rg.clone()];
                                let dm = &mut dmixed[i][d.index()][rg.clone()];
                                let mut acc = 0.0;
                                for ((o, m), dmx) in out[rg].iter().zip(mixed).zip(dm.iter_mut()) {
                                    let go = g * o;
                                    acc += go * m;
                                    *dmx += w * go;
                                }
                                di[ii] += acc;
                            }
                        }
                    }
                }
            }
            for (i, dm) in dmixed.iter().enumerate() {
                for d in SceneChannel::BOTH {
                    let src = h[i][d].data();
                    let off = (i * 2 + d.index()) * VIEWS * VIEWS;
                    for pv in 0..VIEWS {
                        let g = &dm[d.index()][pv * pix..(pv + 1) * pix];
                        for q in 0..VIEWS {
                            ds[off + pv * VIEWS + q] +=
                                g.iter().zip(&src[q * pix..(q + 1) * pix]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            (ds, di)
        })
        .collect();
    let mut ds = Tensor::zeros(c.inter_view().dims());
    let mut di = Tensor::zeros(c.impact().dims());
    for (a, b) in &partials {
        for (x, y) in ds.data_mut().iter_mut().zip(a) {
            *x += y;
        }
        for (x, y) in di.data_mut().iter_mut().zip(b) {
            *x += y;
        }
    }
    Ok((loss, Some(CollabGrad { inter_view: ds, impact: di })))
}

/// `L^C = L^B + L^F`. Entry `(v, n)` of each channel's coefficient plane is
/// the empirical second moment, over the batch and spatial positions, of the
/// collaborated shared component that view `v` of frame `n + 1` would get
/// from the history ending at frame `n`.
pub fn coefficient_loss(c: &CollabParams, p: &DecompParams, histories: &[History]) -> Result<CoeffLoss> {
    Ok(coeff_pass(c, p, histories, false)?.0)
}

/// [`coefficient_loss`] and its gradient with the histories held fixed.
pub fn coefficient_loss_grad(
    c: &CollabParams,
    p: &DecompParams,
    histories: &[History],
) -> Result<(CoeffLoss, CollabGrad)> {
    let (l, g) = coeff_pass(c, p, histories, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn transpose6(s: &Tensor) -> Tensor {
    let d = s.data();
    Tensor::from_fn(&[VIEWS, VIEWS], |i| d[(i % VIEWS) * VIEWS + i / VIEWS])
}

fn frame_range(volume: &Tensor, n: usize) -> Result<Tensor> {
    volume.select(1, n)
}

/// Residual `M_n ⊙ (N_n − estimate)` of the scene-level loss for channel
/// `channel` at frame `n`, plus the collaboration window used.
fn scene_residual(
    channel: SceneChannel,
    n: usize,
    masks: &MaskVolume,
    gt: &Tensor,
    pred: &ChannelPair<Tensor>,
    c: Option<&CollabParams>,
) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let frames = gt.dims().get(1).copied().unwrap_or(0);
    if gt.rank() != 5 || n >= frames {
        return Err(shape_err!("ground truth {:?} has no frame {n}", gt.dims()));
    }
    if pred.background.rank() != 5 || pred.background.dims() != pred.foreground.dims() {
        return Err(shape_err!("predictions must be two [6, N, C, H, W] volumes"));
    }
    let have = pred.background.dims()[1];
    let mask = masks.frames_range(n, 1)?.expanded(channel, gt.dims()[2]).select(1, 0)?;
    let target = frame_range(gt, n)?;
    if n == 0 {
        if have == 0 {
            return Err(Error::State("missing prediction for frame 0".into()));
        }
        let est = frame_range(&pred[channel], 0)?;
        return Ok((mask.hadamard(&target.sub(&est)?)?, Vec::new()));
    }
    let c = c.ok_or_else(|| Error::State(format!("frame {n} needs collaboration parameters")))?;
    if have < n {
        return Err(Error::State(format!("frame {n} needs predictions for frames 0..{n}, have {have}")));
    }
    let window: Vec<_> = window_frames(n, c.window()).collect();
    let mut est = Tensor::zeros(target.dims());
    for &(i, slot) in &window {
        let s = c.s_frame(i)?;
        let imp = c.i_slot(slot)?.data().to_vec();
        for d in SceneChannel::BOTH {
            let mixed = Tensor::view_mix(&s.select(0, d.index())?, &frame_range(&pred[d], i)?)?;
            let inner = mixed.len() / VIEWS;
            let e = est.data_mut();
            for v in 0..VIEWS {
                let w = imp[(d.index() * 2 + channel.index()) * VIEWS + v];
                for (o, x) in e[v * inner..(v + 1) * inner].iter_mut().zip(&mixed.data()[v * inner..(v + 1) * inner]) {
                    *o += w * x;
                }
            }
        }
    }
    Ok((mask.hadamard(&target.sub(&est)?)?, window))
}

/// Scene-level noise loss `L_t^{D_n}` for 0-based frame `n`: the L2 norm of
/// the masked difference between the ground truth `gt` (`N_t^D`, a
/// `[6, N, C, H, W]` volume) and either the frame's own masked prediction
/// (`n = 0`) or the collaboration of the predictions of the preceding window.
pub fn scene_noise_loss(
    channel: SceneChannel,
    n: usize,
    masks: &MaskVolume,
    gt: &Tensor,
    pred: &ChannelPair<Tensor>,
    c: Option<&CollabParams>,
) -> Result<f64> {
    Ok(scene_residual(channel, n, masks, gt, pred, c)?.0.sum_sq().sqrt())
}

/// [`scene_noise_loss`] and its gradient with respect to both prediction
/// volumes.
pub fn scene_noise_loss_grad(
    channel: SceneChannel,
    n: usize,
    masks: &MaskVolume,
    gt: &Tensor,
    pred: &ChannelPair<Tensor>,
    c: Option<&CollabParams>,
) -> Result<(f64, ChannelPair<Tensor>)> {
    let (r, window) = scene_residual(channel, n, masks, gt, pred, c)?;
    let loss = r.sum_sq().sqrt();
    let mut grad = pred.map(|_, t| Tensor::zeros(t.dims()));
    if loss == 0.0 {
        return Ok((loss, grad));
    }
    let mask = masks.frames_range(n, 1)?.expanded(channel, gt.dims()[2]).select(1, 0)?;
    // ∂L/∂estimate = −M ⊙ r / L
    let up = mask.hadamard(&r)?.scale(-1.0 / loss);
    let dims = pred.background.dims().to_vec();
    let frame_len: usize = dims[2..].iter().product();
    let frames = dims[1];
    let put = |vol: &mut Tensor, frame: usize, vals: &Tensor| {
        let d = vol.data_mut();
        for v in 0..VIEWS {
            let dst = &mut d[(v * frames + frame) * frame_len..(v * frames + frame + 1) * frame_len];
            for (o, x) in dst.iter_mut().zip(&vals.data()[v * frame_len..(v + 1) * frame_len]) {
                *o += x;
            }
        }
    };
    if n == 0 {
        put(&mut grad[channel], 0, &up);
        return Ok((loss, grad));
    }
    let c = c.expect("checked by scene_residual");
    for (i, slot) in window {
        let s = c.s_frame(i)?;
        let imp = c.i_slot(slot)?.data().to_vec();
        for d in SceneChannel::BOTH {
            let mut weighted = up.clone();
            let wd = weighted.data_mut();
            for v in 0..VIEWS {
                let w = imp[(d.index() * 2 + channel.index()) * VIEWS + v];
                for x in &mut wd[v * frame_len..(v + 1) * frame_len] {
                    *x *= w;
                }
            }
            let back = Tensor::view_mix(&transpose6(&s.select(0, d.index())?), &weighted)?;
            put(&mut grad[d], i, &back);
        }
    }
    Ok((loss, grad))
}

/// `L = L^C + Σ_n L_t^{B_n} + Σ_n L_t^{F_n}`.
pub fn total_loss(coeff: f64, background: &[f64], foreground: &[f64]) -> f64 {
    coeff + background.iter().sum::<f64>() + foreground.iter().sum::<f64>()
}

/// Largest relative error between `grad` and central differences of `f`
/// (step `1e-5`) over `probes` coordinates drawn with `seed`.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], probes: usize, seed: u64) -> Result<f64> {
    if x.len() != grad.len() || x.is_empty() {
        return Err(shape_err!("point has {} coordinates, gradient {}", x.len(), grad.len()));
    }
    const STEP: f64 = 1e-5;
    let mut rng = StreamKey::new(seed, Component::Aux).rng();
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for _ in 0..probes {
        let i = rng.random_range(0..x.len());
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * STEP);
        let scale = fd.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    Ok(worst)
}

/// Step size over the course of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to zero at the last step.
    Linear,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - step as f64 / steps as f64),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" => Ok(LrSchedule::Linear),
            _ => Err(Error::Config(format!("unknown learning-rate schedule {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub frames: usize,
    pub window: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Independent noise histories per step.
    pub batch: usize,
    /// Per-view `[C, H, W]` grid of the sampled histories.
    pub grid: [usize; 3],
    /// Histories used to measure the loss before and after fitting.
    pub eval_batch: usize,
    pub seed: u64,
    pub s_role: MatrixRole,
    pub i_role: MatrixRole,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            window: 5,
            steps: 2000,
            lr: 1e-2,
            lr_schedule: LrSchedule::Linear,
            batch: 8,
            grid: [1, 8, 8],
            eval_batch: 256,
            seed: 0,
            s_role: MatrixRole::Learnable,
            i_role: MatrixRole::Learnable,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.batch == 0 || self.eval_batch == 0 || self.grid.contains(&0) {
            return Err(param_err!("fit sizes must be positive: {self:?}"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param_err!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitStep {
    pub step: usize,
    pub background: f64,
    pub foreground: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: CollabParams,
    pub trace: Vec<FitStep>,
    /// Loss on the evaluation histories before and after fitting.
    pub initial: CoeffLoss,
    pub fitted: CoeffLoss,
}

impl FitResult {
    pub fn reduction(&self) -> f64 {
        self.fitted.total() / self.initial.total()
    }
}

pub fn evaluate_collab(c: &CollabParams, p: &DecompParams, grid: &[usize], batch: usize, seed: u64) -> Result<CoeffLoss> {
    let h = sample_histories(c, p, grid, batch, seed, Purpose::Evaluate, 0)?;
    coefficient_loss(c, p, &h)
}

/// Gradient descent on `L^C` over the learnable matrices, starting from
/// [`CollabParams::initial`]. Each step draws fresh histories with the
/// current parameters.
pub fn fit_collab(cfg: &FitConfig, p: &DecompParams) -> Result<FitResult> {
    cfg.validate()?;
    let mut c = CollabParams::initial(cfg.frames, cfg.window)?.with_roles(cfg.s_role, cfg.i_role);
    let initial = evaluate_collab(&c, p, &cfg.grid, cfg.eval_batch, cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let offset = (step * cfg.batch) as u64;
        let h = sample_histories(&c, p, &cfg.grid, cfg.batch, cfg.seed, Purpose::FitCollab, offset)?;
        let (loss, grad) = coefficient_loss_grad(&c, p, &h)?;
        trace.push(FitStep { step, background: loss.background, foreground: loss.foreground });
        let lr = cfg.lr_schedule.rate(cfg.lr, step, cfg.steps);
        if cfg.s_role == MatrixRole::Learnable {
            c.inter_view_mut().add_scaled(-lr, &grad.inter_view)?;
        }
        if cfg.i_role == MatrixRole::Learnable {
            c.impact_mut().add_scaled(-lr, &grad.impact)?;
        }
        if !c.inter_view().all_finite() || !c.impact().all_finite() {
            return Err(Error::State(format!("collaboration fit diverged at step {step}")));
        }
    }
    let fitted = evaluate_collab(&c, p, &cfg.grid, cfg.eval_batch, cfg.seed)?;
    Ok(FitResult { params: c, trace, initial, fitted })
}

/// How the per-frame denoiser loss is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    /// Mean squared error of each frame's masked prediction against its own
    /// masked target.
    #[default]
    Mse,
    /// [`scene_noise_loss`] summed over frames: later frames are compared
    /// with the collaboration of earlier frames' predictions.
    Collaborated,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Objective::Mse),
            "collaborated" => Ok(Objective::Collaborated),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

struct OptState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self { kind, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (w, g) in w.iter_mut().zip(g) {
                    *w -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..w.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
                    w[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Frames (all six views each) per step.
    pub batch_frames: usize,
    pub seed: u64,
    pub arch: Arch,
    pub optimizer: Optimizer,
    pub objective: Objective,
    /// Timesteps, evenly spaced over `1..=T`, in the fixed evaluation set.
    pub eval_timesteps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            batch_frames: 2,
            seed: 0,
            arch: Arch::default(),
            optimizer: Optimizer::adam(),
            objective: Objective::Mse,
            eval_timesteps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_frames == 0 || self.eval_timesteps == 0 {
            return Err(param_err!("training sizes must be positive: {self:?}"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param_err!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStep {
    pub step: usize,
    pub t: usize,
    pub coeff: f64,
    pub background: f64,
    pub foreground: f64,
}

impl TrainStep {
    pub fn total(&self) -> f64 {
        total_loss(self.coeff, &[self.background], &[self.foreground])
    }
}

#[derive(Clone, Debug)]
pub struct TrainedPair {
    pub background: ConvDenoiser,
    pub foreground: ConvDenoiser,
    pub trace: Vec<TrainStep>,
    /// Denoiser loss on the fixed evaluation set before and after training.
    pub initial_eval: f64,
    pub final_eval: f64,
}

impl TrainedPair {
    pub fn reduction(&self) -> f64 {
        self.final_eval / self.initial_eval
    }
}

struct StepEval {
    background: f64,
    foreground: f64,
    grads: Option<ChannelPair<Vec<f64>>>,
}

fn image_slice(volume: &Tensor, view: usize, frame: usize) -> &[f64] {
    let d = volume.dims();
    let per: usize = d[2..].iter().product();
    let start = (view * d[1] + frame) * per;
    &volume.data()[start..start + per]
}

/// One denoiser-objective evaluation at timestep `t` on `frames`.
#[allow(clippy::too_many_arguments)]
fn objective_eval(
    nets: &ChannelPair<ConvDenoiser>,
    latents: &Tensor,
    prior_sample: &crate::prior::PriorSample,
    c: Option<&CollabParams>,
    schedule: &DiffusionSchedule,
    t: usize,
    frames: &[usize],
    objective: Objective,
    want_grad: bool,
) -> Result<StepEval> {
    let z = noisify(latents, &prior_sample.composed.eps, t, schedule)?;
    let masks = &prior_sample.masks;
    let d = latents.dims();
    let (n_frames, ch, h, w) = (d[1], d[2], d[3], d[4]);
    let per = ch * h * w;
    let gt = ChannelPair::new(&prior_sample.composed.masked_b, &prior_sample.composed.masked_f);
    let mask_vol = ChannelPair::new(masks.expanded(SceneChannel::Background, ch), masks.expanded(SceneChannel::Foreground, ch));
    let time = t as f64 / schedule.steps() as f64;
    let n_params = nets.background.weights().len();

    // Images whose predictions the objective needs.
    let mut needed = vec![false; n_frames];
    for &n in frames {
        match objective {
            Objective::Mse => needed[n] = true,
            Objective::Collaborated => {
                if n == 0 {
                    needed[0] = true;
                } else {
                    let k = c.map(|c| c.window()).unwrap_or(0);
                    for (i, _) in window_frames(n, k) {
                        needed[i] = true;
                    }
                }
            }
        }
    }
    let images: Vec<(usize, usize)> =
        (0..n_frames).filter(|&n| needed[n]).flat_map(|n| (0..VIEWS).map(move |v| (v, n))).collect();
    let caches: Vec<ChannelPair<crate::denoiser::ForwardCache>> = images
        .par_iter()
        .map(|&(v, n)| {
            let img = image_slice(&z, v, n);
            ChannelPair::new(nets.background.forward_image(img, h, w, time), nets.foreground.forward_image(img, h, w, time))
        })
        .collect();

    // Upstream gradients with respect to the raw outputs, per image.
    let (lb, lf, upstream): (f64, f64, Vec<ChannelPair<Vec<f64>>>) = match objective {
        Objective::Mse => {
            let count = (frames.len() * VIEWS * per) as f64;
            let mut loss = [0.0; 2];
            let mut ups = Vec::with_capacity(images.len());
            for (&(v, n), cache) in images.iter().zip(&caches) {
                let selected = frames.contains(&n);
                let up = ChannelPair::try_from_fn(|dch| -> Result<Vec<f64>> {
                    let m = image_slice(&mask_vol[dch], v, n);
                    let target = image_slice(gt[dch], v, n);
                    let out = &cache[dch].output;
                    let mut g = vec![0.0; per];
                    if selected {
                        for i in 0..per {
                            let r = m[i] * (target[i] - m[i] * out[i]);
                            loss[dch.index()] += r * r / count;
                            g[i] = -2.0 * m[i] * r / count;
                        }
                    }
                    Ok(g)
                })?;
                ups.push(up);
            }
            (loss[0], loss[1], ups)
        }
        Objective::Collaborated => {
            let mut pred = ChannelPair::new(Tensor::zeros(latents.dims()), Tensor::zeros(latents.dims()));
            for (&(v, n), cache) in images.iter().zip(&caches) {
                for dch in SceneChannel::BOTH {
                    let m = image_slice(&mask_vol[dch], v, n).to_vec();
                    let start = (v * n_frames + n) * per;
                    let dst = &mut pred[dch].data_mut()[start..start + per];
                    for ((o, x), m) in dst.iter_mut().zip(&cache[dch].output).zip(&m) {
                        *o = m * x;
                    }
                }
            }
            let mut loss = [0.0; 2];
            let mut gpred = ChannelPair::new(Tensor::zeros(latents.dims()), Tensor::zeros(latents.dims()));
            for &n in frames {
                for dch in SceneChannel::BOTH {
                    let (l, g) = scene_noise_loss_grad(dch, n, masks, gt[dch], &pred, c)?;
                    loss[dch.index()] += l;
                    if want_grad {
                        for s in SceneChannel::BOTH {
                            gpred[s].add_scaled(1.0, &g[s])?;
                        }
                    }
                }
            }
            let ups = images
                .iter()
                .map(|&(v, n)| {
                    ChannelPair::try_from_fn(|dch| -> Result<Vec<f64>> {
                        let m = image_slice(&mask_vol[dch], v, n);
                        Ok(image_slice(&gpred[dch], v, n).iter().zip(m).map(|(g, m)| g * m).collect())
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (loss[0], loss[1], ups)
        }
    };
    if !want_grad {
        return Ok(StepEval { background: lb, foreground: lf, grads: None });
    }
    let partial: Vec<ChannelPair<Vec<f64>>> = caches
        .par_iter()
        .zip(upstream.par_iter())
        .map(|(cache, up)| {
            ChannelPair::try_from_fn(|dch| -> Result<Vec<f64>> {
                let mut g = vec![0.0; n_params];
                if up[dch].iter().any(|x| *x != 0.0) {
                    nets[dch].backward_image(&cache[dch], &up[dch], &mut g);
                }
                Ok(g)
            })
            .expect("infallible")
        })
        .collect();
    let mut grads = ChannelPair::new(vec![0.0; n_params], vec![0.0; n_params]);
    for p in &partial {
        for dch in SceneChannel::BOTH {
            for (a, b) in grads[dch].iter_mut().zip(&p[dch]) {
                *a += b;
            }
        }
    }
    Ok(StepEval { background: lb, foreground: lf, grads: Some(grads) })
}

/// Denoiser objective on the fixed evaluation set: `eval_timesteps` evenly
/// spaced timesteps, every frame, noise from the evaluation stream.
pub fn evaluate_denoisers(
    background: &ConvDenoiser,
    foreground: &ConvDenoiser,
    dataset: &SceneDataset,
    prior: &NoisePrior,
    schedule: &DiffusionSchedule,
    objective: Objective,
    timesteps: usize,
    seed: u64,
) -> Result<f64> {
    let nets = ChannelPair::new(background.clone(), foreground.clone());
    let frames: Vec<usize> = (0..dataset.masks.frames()).collect();
    let big_t = schedule.steps();
    let mut total = 0.0;
    for j in 0..timesteps {
        let t = 1 + (j * (big_t - 1)) / (timesteps - 1).max(1);
        let sample = prior.sample(&dataset.masks, dataset.latents.dims()[2], purpose_key(seed, Purpose::Evaluate, t as u64))?;
        let e = objective_eval(&nets, &dataset.latents, &sample, prior.collab.as_ref(), schedule, t, &frames, objective, false)?;
        total += e.background + e.foreground;
    }
    Ok(total / timesteps as f64)
}

/// Train the background/foreground denoiser pair on one dataset with noise
/// drawn from `prior`. `L^C` enters the trace as a constant since the
/// collaboration matrices are not updated here.
pub fn train_denoisers(
    dataset: &SceneDataset,
    prior: &NoisePrior,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<TrainedPair> {
    cfg.validate()?;
    let d = dataset.latents.dims();
    if d.len() != 5 || d[0] != VIEWS || d[1] == 0 {
        return Err(shape_err!("latents must be a nonempty [6, N, C, H, W] volume, got {d:?}"));
    }
    if cfg.arch.channels != d[2] {
        return Err(param_err!("denoiser has {} channels, latents {}", cfg.arch.channels, d[2]));
    }
    let n_frames = d[1];
    let batch = cfg.batch_frames.min(n_frames);
    let c = prior.collab.as_ref();
    if cfg.objective == Objective::Collaborated && c.is_none() && n_frames > 1 {
        return Err(Error::Config("the collaborated objective needs collaboration parameters".into()));
    }
    let coeff = match c {
        Some(c) if c.frames() <= n_frames => {
            let grid = [d[2], d[3], d[4]];
            evaluate_collab(c, &prior.decomp, &grid, 4, cfg.seed)?.total()
        }
        _ => 0.0,
    };
    let init = |ch: SceneChannel| {
        ConvDenoiser::init(cfg.arch, StreamKey::new(cfg.seed, Component::Init).channel(ch.tag()))
    };
    let mut nets = ChannelPair::new(init(SceneChannel::Background)?, init(SceneChannel::Foreground)?);
    let eval = |nets: &ChannelPair<ConvDenoiser>| {
        evaluate_denoisers(&nets.background, &nets.foreground, dataset, prior, schedule, cfg.objective, cfg.eval_timesteps, cfg.seed)
    };
    let initial_eval = eval(&nets)?;
    let n_params = cfg.arch.param_count();
    let mut opt = ChannelPair::new(OptState::new(cfg.optimizer, n_params), OptState::new(cfg.optimizer, n_params));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = StreamKey::new(cfg.seed, Component::Batch).draw(step as u64).rng();
        let t = rng.random_range(1..=schedule.steps());
        let mut frames = index::sample(&mut rng, n_frames, batch).into_vec();
        frames.sort_unstable();
        let sample = prior.sample(&dataset.masks, d[2], purpose_key(cfg.seed, Purpose::TrainDenoiser, step as u64))?;
        let e = objective_eval(&nets, &dataset.latents, &sample, c, schedule, t, &frames, cfg.objective, true)?;
        trace.push(TrainStep { step, t, coeff, background: e.background, foreground: e.foreground });
        let grads = e.grads.expect("gradient requested");
        let lr = cfg.lr_schedule.rate(cfg.lr, step, cfg.steps);
        for ch in SceneChannel::BOTH {
            opt[ch].step(nets[ch].weights_mut(), &grads[ch], lr);
        }
        if !nets.background.weights().iter().chain(nets.foreground.weights()).all(|w| w.is_finite()) {
            return Err(Error::State(format!("denoiser training diverged at step {step}")));
        }
    }
    let final_eval = eval(&nets)?;
    Ok(TrainedPair { background: nets.background, foreground: nets.foreground, trace, initial_eval, final_eval })
}

/// Gradient of the denoiser objective for one prior draw, exposed for
/// finite-difference checks. Returns the loss and both weight gradients.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_objective_grad(
    background: &ConvDenoiser,
    foreground: &ConvDenoiser,
    latents: &Tensor,
    sample: &crate::prior::PriorSample,
    c: Option<&CollabParams>,
    schedule: &DiffusionSchedule,
    t: usize,
    frames: &[usize],
    objective: Objective,
) -> Result<(f64, ChannelPair<Vec<f64>>)> {
    let nets = ChannelPair::new(background.clone(), foreground.clone());
    let e = objective_eval(&nets, latents, sample, c, schedule, t, frames, objective, true)?;
    Ok((e.background + e.foreground, e.grads.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::CollabParams;

    fn pair(dims: &[usize], seed: u64) -> ChannelPair<Tensor> {
        let mut k = 0.0;
        ChannelPair::try_from_fn(|_| -> Result<Tensor> {
            k += 1.0;
            Ok(Tensor::from_fn(dims, |i| ((i as f64 + 0.3) * (1.7 + k) + seed as f64).sin()))
        })
        .unwrap()
    }

    #[test]
    fn zero_s_gives_full_target_mass() {
        let p = DecompParams::default();
        let c = CollabParams::new(Tensor::zeros(&[16, 2, 6, 6]), Tensor::ones(&[5, 2, 2, 6])).unwrap();
        let h: History = (0..16).map(|i| pair(&[6, 1, 2, 2], i)).collect();
        let l = coefficient_loss(&c, &p, &[h]).unwrap();
        assert_eq!(l.background, 48.0);
        assert_eq!(l.foreground, 48.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let c = CollabParams::initial(4, 2).unwrap();
        assert!(coefficient_loss(&c, &DecompParams::default(), &[]).is_err());
    }

    #[test]
    fn coefficient_gradient_matches_differences() {
        let p = DecompParams::default();
        let c = CollabParams::initial(4, 2).unwrap();
        let hs: Vec<History> = (0..2).map(|b| (0..4).map(|i| pair(&[6, 1, 2, 3], b * 10 + i)).collect()).collect();
        let (_, g) = coefficient_loss_grad(&c, &p, &hs).unwrap();
        let s_len = c.inter_view().len();
        let mut x = c.inter_view().data().to_vec();
        x.extend_from_slice(c.impact().data());
        let mut gv = g.inter_view.data().to_vec();
        gv.extend_from_slice(g.impact.data());
        let f = |x: &[f64]| {
            let s = Tensor::new(c.inter_view().dims().to_vec(), x[..s_len].to_vec()).unwrap();
            let i = Tensor::new(c.impact().dims().to_vec(), x[s_len..].to_vec()).unwrap();
            coefficient_loss(&CollabParams::new(s, i).unwrap(), &p, &hs).unwrap().total()
        };
        assert!(grad_check(f, &x, &gv, 60, 1).unwrap() < 1e-5);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let f = |x: &[f64]| x.iter().map(|v| 3.0 * v * v).sum::<f64>();
        let x = [0.5, -1.5, 2.0];
        let g: Vec<f64> = x.iter().map(|v| 6.0 * v).collect();
        assert!(grad_check(f, &x, &g, 10, 0).unwrap() < 1e-8);
    }

    fn small_masks(frames: usize) -> MaskVolume {
        MaskVolume::new(Tensor::from_fn(&[6, frames, 1, 2, 2], |i| if i % 5 == 1 { 0.0 } else { 1.0 })).unwrap()
    }

    #[test]
    fn scene_loss_first_frame_exact_match_is_zero() {
        let masks = small_masks(2);
        let gt = Tensor::from_fn(&[6, 2, 1, 2, 2], |i| i as f64);
        let pred = ChannelPair::new(gt.clone(), gt.scale(2.0));
        assert_eq!(scene_noise_loss(SceneChannel::Background, 0, &masks, &gt, &pred, None).unwrap(), 0.0);
    }

    #[test]
    fn scene_loss_zero_s_is_masked_gt_norm() {
        let masks = small_masks(3);
        let gt = Tensor::from_fn(&[6, 3, 1, 2, 2], |i| (i as f64).cos());
        let c = CollabParams::new(Tensor::zeros(&[3, 2, 6, 6]), Tensor::ones(&[2, 2, 2, 6])).unwrap();
        let pred = ChannelPair::new(gt.clone(), gt.clone());
        let l = scene_noise_loss(SceneChannel::Background, 1, &masks, &gt, &pred, Some(&c)).unwrap();
        let m = masks.frames_range(1, 1).unwrap().background().select(1, 0).unwrap();
        let want = m.hadamard(&gt.select(1, 1).unwrap()).unwrap().sum_sq().sqrt();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn scene_loss_needs_earlier_predictions() {
        let masks = small_masks(3);
        let gt = Tensor::zeros(&[6, 3, 1, 2, 2]);
        let pred = ChannelPair::new(Tensor::zeros(&[6, 1, 1, 2, 2]), Tensor::zeros(&[6, 1, 1, 2, 2]));
        let c = CollabParams::initial(3, 2).unwrap();
        assert!(scene_noise_loss(SceneChannel::Foreground, 2, &masks, &gt, &pred, Some(&c)).is_err());
        assert!(scene_noise_loss(SceneChannel::Foreground, 1, &masks, &gt, &pred, None).is_err());
    }

    #[test]
    fn scene_loss_gradient_matches_differences() {
        let masks = small_masks(3);
        let gt = Tensor::from_fn(&[6, 3, 1, 2, 2], |i| (i as f64 * 0.7).sin());
        let c = CollabParams::initial(3, 2).unwrap();
        let pred = pair(&[6, 3, 1, 2, 2], 4);
        for n in 0..3 {
            for ch in SceneChannel::BOTH {
                let (_, g) = scene_noise_loss_grad(ch, n, &masks, &gt, &pred, Some(&c)).unwrap();
                let len = pred.background.len();
                let mut x = pred.background.data().to_vec();
                x.extend_from_slice(pred.foreground.data());
                let mut gv = g.background.data().to_vec();
                gv.extend_from_slice(g.foreground.data());
                let f = |x: &[f64]| {
                    let dims = pred.background.dims().to_vec();
                    let p = ChannelPair::new(
                        Tensor::new(dims.clone(), x[..len].to_vec()).unwrap(),
                        Tensor::new(dims, x[len..].to_vec()).unwrap(),
                    );
                    scene_noise_loss(ch, n, &masks, &gt, &p, Some(&c)).unwrap()
                };
                assert!(grad_check(f, &x, &gv, 40, n as u64).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_is_plain_sum() {
        assert_eq!(total_loss(0.0, &[0.0], &[0.0]), 0.0);
        assert_eq!(total_loss(1.0, &[2.0, 3.0], &[4.0]), 10.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut s = OptState::new(Optimizer::adam(), 2);
        let mut w = [1.0, -1.0];
        s.step(&mut w, &[2.0, -0.5], 0.1);
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
