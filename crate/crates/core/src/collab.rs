//! Multi-frame noise collaboration.
//!
//! The shared component of frame `n+1` is built from the full scene-level
//! noises of the preceding `K` frames. Each source frame `i` is mixed across
//! views by its inter-view matrix `S_i` (one 6×6 matrix per channel) and
//! across channels, per view, by the window slot's impact block `I_k`:
//!
//! ```text
//! out^D[p] = Σ_d I_k[d][D][p] · Σ_q S_i[d][p][q] · ε_i^d[q]
//! ```
//!
//! `d` is the source channel and `D` the target channel. At the start of a
//! sequence the window is clamped to the frames that exist, and slots are
//! numbered from the clamped start.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::decompose::{
    sample_residual, ChannelPair, DecompParams, SceneChannel, SceneNoise, VIEWS,
};
use crate::error::{param_err, shape_err, Error, Result};
use crate::rng::StreamKey;
use crate::tensor::Tensor;

const HEADER: &str = "NCCOLLAB 1";

/// How a collaboration matrix takes part in fitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixRole {
    Learnable,
    /// Filled with ones and frozen.
    Fixed,
    /// Replaced by the identity action and frozen.
    Disabled,
}

impl std::str::FromStr for MatrixRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(MatrixRole::Learnable),
            "fixed" => Ok(MatrixRole::Fixed),
            "disabled" => Ok(MatrixRole::Disabled),
            _ => Err(Error::Config(format!("unknown matrix role {s:?}"))),
        }
    }
}

/// Inter-view matrices `S` `[N, 2, 6, 6]` and impact blocks `I` `[K, 2, 2, 6]`
/// (slot, source channel, target channel, view).
#[derive(Clone, Debug, PartialEq)]
pub struct CollabParams {
    inter_view: Tensor,
    impact: Tensor,
}

impl CollabParams {
    pub fn new(inter_view: Tensor, impact: Tensor) -> Result<Self> {
        let s = inter_view.dims();
        if s.len() != 4 || s[1] != 2 || s[2] != VIEWS || s[3] != VIEWS {
            return Err(shape_err!("S must be [N, 2, 6, 6], got {s:?}"));
        }
        let i = impact.dims();
        if i.len() != 4 || i[1] != 2 || i[2] != 2 || i[3] != VIEWS {
            return Err(shape_err!("I must be [K, 2, 2, 6], got {i:?}"));
        }
        if i[0] > s[0] {
            return Err(param_err!("window K = {} exceeds frame count N = {}", i[0], s[0]));
        }
        if !inter_view.all_finite() || !impact.all_finite() {
            return Err(param_err!("collaboration matrices must be finite"));
        }
        Ok(Self { inter_view, impact })
    }

    /// Untrained starting point: `S_i = I/K` per channel, impact 1 within a
    /// channel and 0 across channels. Collaboration then averages the
    /// view-aligned history.
    pub fn initial(frames: usize, window: usize) -> Result<Self> {
        if window == 0 || window > frames {
            return Err(param_err!("window must be in 1..={frames}, got {window}"));
        }
        let s = diagonal_s(frames, 1.0 / window as f64);
        let i = channel_identity_i(window);
        Self::new(s, i)
    }

    /// Apply the fixed/disabled roles; learnable matrices are left untouched.
    pub fn with_roles(mut self, s_role: MatrixRole, i_role: MatrixRole) -> Self {
        let (n, k) = (self.frames(), self.window());
        match s_role {
            MatrixRole::Learnable => {}
            MatrixRole::Fixed => self.inter_view = Tensor::ones(&[n, 2, VIEWS, VIEWS]),
            MatrixRole::Disabled => self.inter_view = diagonal_s(n, 1.0),
        }
        match i_role {
            MatrixRole::Learnable => {}
            MatrixRole::Fixed => self.impact = Tensor::ones(&[k, 2, 2, VIEWS]),
            MatrixRole::Disabled => self.impact = channel_identity_i(k),
        }
        self
    }

    pub fn frames(&self) -> usize {
        self.inter_view.dims()[0]
    }

    /// Sliding window length `K`.
    pub fn window(&self) -> usize {
        self.impact.dims()[0]
    }

    pub fn inter_view(&self) -> &Tensor {
        &self.inter_view
    }

    pub fn impact(&self) -> &Tensor {
        &self.impact
    }

    pub fn inter_view_mut(&mut self) -> &mut Tensor {
        &mut self.inter_view
    }

    pub fn impact_mut(&mut self) -> &mut Tensor {
        &mut self.impact
    }

    /// `S_i` for source frame `frame`, `[2, 6, 6]`.
    pub fn s_frame(&self, frame: usize) -> Result<Tensor> {
        self.inter_view.select(0, frame)
    }

    /// `I_k` for window slot `slot`, `[2, 2, 6]`.
    pub fn i_slot(&self, slot: usize) -> Result<Tensor> {
        self.impact.select(0, slot)
    }

    /// Zero every cross-channel impact entry (single-level operation).
    pub fn without_cross_channel(mut self) -> Self {
        let k = self.window();
        let data = self.impact.data_mut();
        for slot in 0..k {
            for (d, t) in [(0, 1), (1, 0)] {
                for p in 0..VIEWS {
                    data[((slot * 2 + d) * 2 + t) * VIEWS + p] = 0.0;
                }
            }
        }
        self
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "{HEADER}\nK={}\nN={}\n\n", self.window(), self.frames())?;
        self.inter_view.write_nct(&mut w)?;
        self.impact.write_nct(&mut w)
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let header = read_header(&mut r, HEADER)?;
        let s = Tensor::read_nct(&mut r)?;
        let i = Tensor::read_nct(&mut r)?;
        let c = Self::new(s, i)?;
        let want = [("K", c.window()), ("N", c.frames())];
        for (key, value) in want {
            let found = header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
            if found != Some(value.to_string().as_str()) {
                return Err(Error::Format(format!("header {key} does not match the tensors")));
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Read a `MAGIC\nkey=value...\n\n` header, returning the key/value lines.
pub(crate) fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<Vec<(String, String)>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != magic {
        return Err(Error::Format(format!("expected header {magic:?}, found {:?}", line.trim_end())));
    }
    let mut fields = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("header is not terminated".into()));
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line {l:?}")))?;
        fields.push((k.to_string(), v.to_string()));
    }
    Ok(fields)
}

fn diagonal_s(frames: usize, value: f64) -> Tensor {
    Tensor::from_fn(&[frames, 2, VIEWS, VIEWS], |idx| {
        let q = idx % VIEWS;
        let p = (idx / VIEWS) % VIEWS;
        if p == q {
            value
        } else {
            0.0
        }
    })
}

fn channel_identity_i(window: usize) -> Tensor {
    Tensor::from_fn(&[window, 2, 2, VIEWS], |idx| {
        let target = (idx / VIEWS) % 2;
        let source = (idx / (2 * VIEWS)) % 2;
        if source == target {
            1.0
        } else {
            0.0
        }
    })
}

/// Collaborative contribution of one source frame. `s_i` is `[2, 6, 6]`,
/// `i_k` is `[2, 2, 6]`, and each channel of `eps` is `[6, ...]`.
pub fn contribution(
    s_i: &Tensor,
    i_k: &Tensor,
    eps: &ChannelPair<Tensor>,
) -> Result<ChannelPair<Tensor>> {
    if s_i.dims() != [2, VIEWS, VIEWS] {
        return Err(shape_err!("S_i must be [2, 6, 6], got {:?}", s_i.dims()));
    }
    if i_k.dims() != [2, 2, VIEWS] {
        return Err(shape_err!("I_k must be [2, 2, 6], got {:?}", i_k.dims()));
    }
    if eps.background.dims() != eps.foreground.dims() || eps.background.dims()[0] != VIEWS {
        return Err(shape_err!(
            "channel noises must share a [6, ...] shape, got {:?} and {:?}",
            eps.background.dims(),
            eps.foreground.dims()
        ));
    }
    let mixed = ChannelPair::try_from_fn(|d| Tensor::view_mix(&s_i.select(0, d.index())?, &eps[d]))?;
    let inner = eps.background.len() / VIEWS;
    let imp = i_k.data();
    ChannelPair::try_from_fn(|target| {
        let mut out = Tensor::zeros(eps.background.dims());
        let dst = out.data_mut();
        for source in SceneChannel::BOTH {
            let src = mixed[source].data();
            for p in 0..VIEWS {
                let w = imp[(source.index() * 2 + target.index()) * VIEWS + p];
                if w == 0.0 {
                    continue;
                }
                let range = p * inner..(p + 1) * inner;
                for (o, s) in dst[range.clone()].iter_mut().zip(&src[range]) {
                    *o += w * s;
                }
            }
        }
        Ok(out)
    })
}

/// Window of source frames `(frame, slot)` for the frame that follows a
/// history of `len` frames.
pub fn window_frames(len: usize, window: usize) -> impl Iterator<Item = (usize, usize)> {
    let start = len.saturating_sub(window);
    (start..len).map(move |i| (i, i - start))
}

/// Shared components of the frame following `history`. `history[i]` holds
/// the full (shared + residual) channel noises of frame `i`, each `[6, ...]`;
/// only the last `K` entries are used.
pub fn shared_next(history: &[ChannelPair<Tensor>], c: &CollabParams) -> Result<ChannelPair<Tensor>> {
    let last = history
        .last()
        .ok_or_else(|| Error::State("shared_next needs at least one history frame".into()))?;
    if history.len() > c.frames() {
        return Err(Error::State(format!(
            "history of {} frames exceeds the {} inter-view matrices",
            history.len(),
            c.frames()
        )));
    }
    let mut acc = last.map(|_, t| Tensor::zeros(t.dims()));
    for (i, slot) in window_frames(history.len(), c.window()) {
        let part = contribution(&c.s_frame(i)?, &c.i_slot(slot)?, &history[i])?;
        for ch in SceneChannel::BOTH {
            acc[ch].add_scaled(1.0, &part[ch])?;
        }
    }
    Ok(acc)
}

/// Reference implementation of [`shared_next`] written as plain nested
/// loops over raw buffers. Used only to cross-check the vectorised path.
pub fn oracle_shared_next(
    history: &[ChannelPair<Tensor>],
    c: &CollabParams,
) -> Result<ChannelPair<Tensor>> {
    if history.is_empty() {
        return Err(Error::State("oracle needs at least one history frame".into()));
    }
    let dims = history[0].background.dims().to_vec();
    let pixels: usize = dims[1..].iter().product();
    let n = history.len();
    let k = c.window();
    let start = n.saturating_sub(k);
    let s = c.inter_view().data();
    let imp = c.impact().data();
    let mut out_b = vec![0.0; VIEWS * pixels];
    let mut out_f = vec![0.0; VIEWS * pixels];
    for target in 0..2 {
        let out = if target == 0 { &mut out_b } else { &mut out_f };
        for p in 0..VIEWS {
            for q in 0..VIEWS {
                for source in 0..2 {
                    for i in start..n {
                        let slot = i - start;
                        let src = if source == 0 {
                            history[i].background.data()
                        } else {
                            history[i].foreground.data()
                        };
                        let s_val = s[i * 2 * VIEWS * VIEWS + source * VIEWS * VIEWS + p * VIEWS + q];
                        let i_val = imp[slot * 2 * 2 * VIEWS + source * 2 * VIEWS + target * VIEWS + p];
                        for x in 0..pixels {
                            out[p * pixels + x] += i_val * s_val * src[q * pixels + x];
                        }
                    }
                }
            }
        }
    }
    Ok(ChannelPair::new(Tensor::new(dims.clone(), out_b)?, Tensor::new(dims, out_f)?))
}

/// Rescale each view of each channel so its mean square equals the
/// prescribed shared variance.
fn renormalize(shared: &mut ChannelPair<Tensor>, p: &DecompParams) {
    for ch in SceneChannel::BOTH {
        let target = p.shared_variance(ch);
        let t = &mut shared[ch];
        let inner = t.len() / VIEWS;
        for view in t.data_mut().chunks_mut(inner) {
            let ms = view.iter().map(|v| v * v).sum::<f64>() / inner as f64;
            if ms > 0.0 {
                let g = (target / ms).sqrt();
                view.iter_mut().for_each(|v| *v *= g);
            }
        }
    }
}

/// Roll the decomposed noise forward over `frames` frames. Frame 0 uses
/// `first_shared`; each later frame's shared component comes from
/// [`shared_next`] over the clamped window, and every frame gets a fresh
/// residual. Output volumes are `[6, N, C, H, W]`.
pub fn roll_sequence(
    first_shared: &ChannelPair<Tensor>,
    p: &DecompParams,
    c: &CollabParams,
    frames: usize,
    key: StreamKey,
    renormalize_shared: bool,
) -> Result<SceneNoise> {
    if frames == 0 {
        return Err(param_err!("roll_sequence needs at least one frame"));
    }
    if frames > c.frames() + 1 {
        return Err(param_err!(
            "{frames} frames need at least {} inter-view matrices, have {}",
            frames - 1,
            c.frames()
        ));
    }
    let grid = first_shared.background.dims()[1..].to_vec();
    let mut shared = vec![first_shared.clone()];
    let mut residual = vec![sample_residual(p, 0, &grid, key)?];
    let mut history = vec![first_shared.add(&residual[0])?];
    for n in 1..frames {
        let mut s = shared_next(&history, c)?;
        if renormalize_shared {
            renormalize(&mut s, p);
        }
        let r = sample_residual(p, n, &grid, key)?;
        history.push(s.add(&r)?);
        shared.push(s);
        residual.push(r);
    }
    Ok(SceneNoise { shared: stack_frames(&shared)?, residual: stack_frames(&residual)? })
}

/// Stack per-frame `[6, ...]` channel pairs into `[6, N, ...]` volumes.
pub fn stack_frames(frames: &[ChannelPair<Tensor>]) -> Result<ChannelPair<Tensor>> {
    ChannelPair::try_from_fn(|ch| {
        let parts: Vec<Tensor> = frames.iter().map(|f| f[ch].clone()).collect();
        Tensor::stack(&parts, 1)
    })
}

/// Split `[6, N, ...]` volumes back into per-frame pairs.
pub fn unstack_frames(volume: &ChannelPair<Tensor>) -> Result<Vec<ChannelPair<Tensor>>> {
    (0..volume.background.dims()[1])
        .map(|n| ChannelPair::try_from_fn(|ch| volume[ch].select(1, n)))
        .collect()
}

/// First-frame-base ablation: every frame's shared components are fixed
/// multiples of the composed frame-0 noise `eps_first` (`[6, C, H, W]`),
/// `η²/(η²+1)·ε_1` for background and `λ²/(λ²+1)·ε_1` for foreground.
pub fn first_frame_base_mode(
    eps_first: &Tensor,
    p: &DecompParams,
    frames: usize,
) -> Result<ChannelPair<Tensor>> {
    if frames == 0 {
        return Err(param_err!("first_frame_base_mode needs at least one frame"));
    }
    ChannelPair::try_from_fn(|ch| {
        let scaled = eps_first.scale(p.shared_variance(ch));
        Tensor::stack(&vec![scaled; frames], 1)
    })
}

/// Read just the header fields of a collaboration file.
pub fn peek_header(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    read_header(&mut BufReader::new(File::open(path)?), HEADER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_sample, Component};

    fn pair(dims: &[usize], seed: u64, frame: usize) -> ChannelPair<Tensor> {
        let k = StreamKey::new(seed, Component::Aux).frame(frame);
        ChannelPair::new(
            gaussian_sample(dims, 1.0, k.draw(0)).unwrap(),
            gaussian_sample(dims, 1.0, k.draw(1)).unwrap(),
        )
    }

    #[test]
    fn identity_configuration_returns_input() {
        let c = CollabParams::initial(3, 1).unwrap().with_roles(MatrixRole::Disabled, MatrixRole::Disabled);
        let eps = pair(&[6, 1, 2, 2], 1, 0);
        let out = contribution(&c.s_frame(0).unwrap(), &c.i_slot(0).unwrap(), &eps).unwrap();
        assert_eq!(out, eps);
    }

    #[test]
    fn pure_cross_channel_transfer() {
        let c = CollabParams::initial(2, 1).unwrap();
        let mut i_k = Tensor::zeros(&[2, 2, VIEWS]);
        // I^{F,B} = 1: foreground source feeds the background target.
        for p in 0..VIEWS {
            i_k.data_mut()[2 * VIEWS + p] = 1.0;
        }
        let s = c.s_frame(0).unwrap();
        let eps = pair(&[6, 1, 3, 3], 2, 0);
        let out = contribution(&s, &i_k, &eps).unwrap();
        let mixed_f = Tensor::view_mix(&s.select(0, 1).unwrap(), &eps.foreground).unwrap();
        assert_eq!(out.background, mixed_f);
        assert_eq!(out.foreground.max_abs(), 0.0);
    }

    #[test]
    fn contribution_rejects_bad_shapes() {
        let eps = pair(&[6, 1, 2, 2], 1, 0);
        assert!(contribution(&Tensor::zeros(&[2, 5, 5]), &Tensor::zeros(&[2, 2, 6]), &eps).is_err());
        assert!(contribution(&Tensor::zeros(&[2, 6, 6]), &Tensor::zeros(&[2, 6]), &eps).is_err());
        let bad = ChannelPair::new(Tensor::zeros(&[6, 1, 2, 2]), Tensor::zeros(&[6, 1, 2, 3]));
        assert!(contribution(&Tensor::zeros(&[2, 6, 6]), &Tensor::zeros(&[2, 2, 6]), &bad).is_err());
    }

    #[test]
    fn empty_history_is_a_state_error() {
        let c = CollabParams::initial(4, 2).unwrap();
        assert!(matches!(shared_next(&[], &c), Err(Error::State(_))));
        assert!(matches!(oracle_shared_next(&[], &c), Err(Error::State(_))));
    }

    #[test]
    fn zero_s_gives_zero_shared() {
        let mut c = CollabParams::initial(4, 2).unwrap();
        c.inter_view_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let hist = vec![pair(&[6, 1, 2, 2], 1, 0), pair(&[6, 1, 2, 2], 1, 1)];
        let out = shared_next(&hist, &c).unwrap();
        assert_eq!(out.background.max_abs() + out.foreground.max_abs(), 0.0);
    }

    #[test]
    fn window_clamps_at_sequence_start() {
        let w: Vec<_> = window_frames(2, 5).collect();
        assert_eq!(w, vec![(0, 0), (1, 1)]);
        // 16-frame sequence, K = 5: the last frame reads frames 11..=15 (1-based).
        let w: Vec<_> = window_frames(15, 5).collect();
        assert_eq!(w, vec![(10, 0), (11, 1), (12, 2), (13, 3), (14, 4)]);
        for len in 1..20 {
            assert_eq!(window_frames(len, 5).count(), len.min(5));
        }
    }

    #[test]
    fn two_frame_hand_example_matches_oracle() {
        // K = 2, scalar pixels, hand-set matrices.
        let mut s = Tensor::zeros(&[3, 2, VIEWS, VIEWS]);
        for (idx, v) in s.data_mut().iter_mut().enumerate() {
            *v = ((idx * 7) % 11) as f64 / 10.0 - 0.5;
        }
        let mut i = Tensor::zeros(&[2, 2, 2, VIEWS]);
        for (idx, v) in i.data_mut().iter_mut().enumerate() {
            *v = ((idx * 5) % 13) as f64 / 6.0 - 1.0;
        }
        let c = CollabParams::new(s, i).unwrap();
        let hist = vec![pair(&[6, 1], 3, 0), pair(&[6, 1], 3, 1), pair(&[6, 1], 3, 2)];
        let a = shared_next(&hist, &c).unwrap();
        let b = oracle_shared_next(&hist, &c).unwrap();
        for ch in SceneChannel::BOTH {
            assert!(a[ch].max_abs_diff(&b[ch]).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn single_frame_roll_is_first_shared_plus_residual() {
        let p = DecompParams::default();
        let c = CollabParams::initial(4, 2).unwrap();
        let first = pair(&[6, 1, 2, 3], 4, 0);
        let key = StreamKey::new(10, Component::Residual);
        let out = roll_sequence(&first, &p, &c, 1, key, false).unwrap();
        let r = sample_residual(&p, 0, &[1, 2, 3], key).unwrap();
        let expect = first.add(&r).unwrap();
        let full = out.full().unwrap();
        assert_eq!(full.background.select(1, 0).unwrap(), expect.background);
        assert_eq!(full.foreground.select(1, 0).unwrap(), expect.foreground);
    }

    #[test]
    fn first_frame_base_scales_frame_zero() {
        let p = DecompParams::default();
        let eps = gaussian_sample(&[6, 1, 2, 2], 1.0, StreamKey::new(1, Component::Aux)).unwrap();
        let s = first_frame_base_mode(&eps, &p, 4).unwrap();
        for n in 0..4 {
            assert_eq!(s.background.select(1, n).unwrap(), eps.scale(0.5));
        }
        let zero = first_frame_base_mode(&Tensor::zeros(&[6, 1, 2, 2]), &p, 3).unwrap();
        assert_eq!(zero.foreground.max_abs(), 0.0);
    }

    #[test]
    fn renormalize_hits_target_variance() {
        let p = DecompParams::new(2.0, 0.5).unwrap();
        let c = CollabParams::initial(8, 3).unwrap();
        let first = pair(&[6, 1, 8, 8], 5, 0);
        let out = roll_sequence(&first, &p, &c, 6, StreamKey::new(2, Component::Residual), true).unwrap();
        let last = out.shared.background.select(1, 5).unwrap();
        let ms = last.sum_sq() / last.len() as f64;
        assert!((ms - 0.8).abs() < 1e-12);
    }

    #[test]
    fn header_round_trip_and_mismatch() {
        let c = CollabParams::initial(5, 3).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"NCCOLLAB 1\nK=3\nN=5\n\n"));
        assert_eq!(CollabParams::read_from(&buf[..]).unwrap(), c);
        let tampered = String::from_utf8_lossy(&buf).replacen("K=3", "K=4", 1).into_bytes();
        assert!(CollabParams::read_from(&tampered[..]).is_err());
    }

    #[test]
    fn params_validate_shapes() {
        assert!(CollabParams::initial(4, 0).is_err());
        assert!(CollabParams::initial(4, 5).is_err());
        assert!(CollabParams::new(Tensor::zeros(&[4, 2, 6, 5]), Tensor::zeros(&[2, 2, 2, 6])).is_err());
    }
}
