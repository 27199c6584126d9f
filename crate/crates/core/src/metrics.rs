//! Distribution tests on sampled noise and consistency scores on videos.

use std::fmt::Write as _;

use crate::decompose::{DecompParams, SceneChannel, VIEWS};
use crate::error::{param_err, shape_err, Error, Result};
use crate::prior::PriorSample;
use crate::scene::{LatentLabel, SceneSpec};
use crate::tensor::{moments, Tensor};

/// Smallest sample a moment test accepts.
pub const MIN_MOMENT_ELEMENTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentResult {
    pub name: String,
    pub statistic: f64,
    pub expected: f64,
    /// Allowed absolute deviation from `expected`.
    pub bound: f64,
    pub pass: bool,
}

impl MomentResult {
    fn new(name: String, statistic: f64, expected: f64, bound: f64) -> Self {
        let pass = (statistic - expected).abs() <= bound;
        Self { name, statistic, expected, bound, pass }
    }
}

/// Mean, variance and excess-kurtosis tests for a Gaussian sample with
/// variance `variance`, each bounded by `sigmas` standard errors.
pub fn moment_checks(name: &str, xs: &[f64], variance: f64, sigmas: f64) -> Result<Vec<MomentResult>> {
    if xs.len() < MIN_MOMENT_ELEMENTS {
        return Err(param_err!("{name}: moment tests need {MIN_MOMENT_ELEMENTS} elements, got {}", xs.len()));
    }
    if !(sigmas > 0.0) {
        return Err(param_err!("bound multiplier must be positive, got {sigmas}"));
    }
    let n = xs.len() as f64;
    let m = moments(xs)?;
    Ok(vec![
        MomentResult::new(format!("{name}.mean"), m.mean, 0.0, sigmas * (variance / n).sqrt()),
        MomentResult::new(
            format!("{name}.variance"),
            m.variance,
            variance,
            sigmas * variance * (2.0 / (n - 1.0)).sqrt(),
        ),
        MomentResult::new(format!("{name}.kurtosis"), m.excess_kurtosis, 0.0, sigmas * (24.0 / n).sqrt()),
    ])
}

/// Moment tests on one frame of a prior sample: shared and residual parts
/// of both channels against their prescribed variances and the composed
/// noise against unit variance.
pub fn moment_suite(sample: &PriorSample, p: &DecompParams, frame: usize, sigmas: f64) -> Result<Vec<MomentResult>> {
    let pick = |t: &Tensor| t.select(1, frame);
    let mut out = Vec::new();
    for ch in SceneChannel::BOTH {
        let tag = if ch == SceneChannel::Background { "B" } else { "F" };
        let shared = pick(&sample.noise.shared[ch])?;
        out.extend(moment_checks(&format!("shared_{tag}"), shared.data(), p.shared_variance(ch), sigmas)?);
        let residual = pick(&sample.noise.residual[ch])?;
        out.extend(moment_checks(&format!("residual_{tag}"), residual.data(), p.residual_variance(ch), sigmas)?);
    }
    out.extend(moment_checks("composed", pick(&sample.composed.eps)?.data(), 1.0, sigmas)?);
    Ok(out)
}

fn check_video(video: &Tensor, spec: &SceneSpec) -> Result<()> {
    let want = spec.latent_dims();
    if video.dims() != want {
        return Err(shape_err!("video {:?} does not match the scene's latent grid {want:?}", video.dims()));
    }
    Ok(())
}

fn pixel(video: &Tensor, view: usize, frame: usize, ch: usize, row: usize, col: usize) -> f64 {
    let d = video.dims();
    video.data()[(((view * d[1] + frame) * d[2] + ch) * d[3] + row) * d[4] + col]
}

/// Mean squared difference between consecutive frames after motion
/// compensation. Latent pixels that are pure background in both frames are
/// compared in place; pixels fully covered by an object are compared with
/// the object's position one frame earlier, found in world coordinates so
/// that objects may cross between views. Objects whose per-frame latent
/// displacement is not a whole number of latent pixels are skipped.
pub fn temporal_consistency(video: &Tensor, spec: &SceneSpec) -> Result<f64> {
    check_video(video, spec)?;
    if !spec.sector_width().is_multiple_of(spec.pool) {
        return Err(Error::Validation("sector width must be a multiple of the pooling factor".into()));
    }
    let (lh, lw, c) = (spec.latent_h(), spec.latent_w(), spec.channels);
    let sector = (spec.sector_width() / spec.pool) as i64;
    let world = sector * VIEWS as i64;
    let shift: Vec<Option<(i64, i64)>> = spec
        .objects
        .iter()
        .map(|o| {
            let (dx, dy) = (o.vx / spec.pool as f64, o.vy / spec.pool as f64);
            (dx.fract() == 0.0 && dy.fract() == 0.0).then_some((dx as i64, dy as i64))
        })
        .collect();
    let labels: Vec<Vec<Vec<LatentLabel>>> =
        (0..spec.frames).map(|n| (0..VIEWS).map(|m| spec.latent_labels(n, m)).collect()).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for n in 1..spec.frames {
        for m in 0..VIEWS {
            for y in 0..lh {
                for x in 0..lw {
                    let src = match labels[n][m][y * lw + x] {
                        LatentLabel::Background => {
                            (labels[n - 1][m][y * lw + x] == LatentLabel::Background).then_some((m, y, x))
                        }
                        LatentLabel::Object(j) => shift[j].and_then(|(dx, dy)| {
                            let sy = y as i64 - dy;
                            if !(0..lh as i64).contains(&sy) {
                                return None;
                            }
                            let wx = (m as i64 * sector + x as i64 - dx).rem_euclid(world);
                            let (sm, sx) = ((wx / sector) as usize, (wx % sector) as usize);
                            let sy = sy as usize;
                            (labels[n - 1][sm][sy * lw + sx] == LatentLabel::Object(j)).then_some((sm, sy, sx))
                        }),
                        LatentLabel::Mixed => None,
                    };
                    if let Some((sm, sy, sx)) = src {
                        for ch in 0..c {
                            let d = pixel(video, m, n, ch, y, x) - pixel(video, sm, n - 1, ch, sy, sx);
                            sum += d * d;
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("no motion-compensated pixel pairs to compare".into()));
    }
    Ok(sum / count as f64)
}

/// Mean squared difference between the shared boundary columns of
/// neighbouring views: the last `overlap / pool` latent columns of view `m`
/// against the first ones of view `m + 1` (view 5 wraps to view 0).
pub fn crossview_consistency(video: &Tensor, spec: &SceneSpec) -> Result<f64> {
    check_video(video, spec)?;
    let k = spec.latent_overlap();
    if k == 0 {
        return Err(Error::Validation("views do not overlap in latent space".into()));
    }
    let (lh, lw) = (spec.latent_h(), spec.latent_w());
    let (mut sum, mut count) = (0.0, 0usize);
    for n in 0..spec.frames {
        for m in 0..VIEWS {
            let next = (m + 1) % VIEWS;
            for ch in 0..spec.channels {
                for y in 0..lh {
                    for j in 0..k {
                        let d = pixel(video, m, n, ch, y, lw - k + j) - pixel(video, next, n, ch, y, j);
                        sum += d * d;
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub temporal: f64,
    pub crossview: f64,
    pub moments: Vec<MomentResult>,
}

impl ConsistencyReport {
    pub fn evaluate(video: &Tensor, spec: &SceneSpec, moments: Vec<MomentResult>) -> Result<Self> {
        Ok(Self { temporal: temporal_consistency(video, spec)?, crossview: crossview_consistency(video, spec)?, moments })
    }

    pub fn moments_pass(&self) -> bool {
        self.moments.iter().all(|m| m.pass)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub csv: String,
    pub markdown: String,
}

/// CSV and Markdown tables with one row per named run.
pub fn ablation_table(runs: &[(String, ConsistencyReport)]) -> Result<AblationTable> {
    if runs.len() < 2 {
        return Err(param_err!("an ablation table needs at least two runs, got {}", runs.len()));
    }
    let mut csv = String::from("config,temporal,crossview,moments_pass\n");
    let mut md = String::from("| config | temporal | crossview | moments |\n|---|---:|---:|---|\n");
    for (name, r) in runs {
        let verdict = if r.moments.is_empty() {
            "-"
        } else if r.moments_pass() {
            "pass"
        } else {
            "fail"
        };
        let _ = writeln!(csv, "{name},{:.9e},{:.9e},{verdict}", r.temporal, r.crossview);
        let _ = writeln!(md, "| {name} | {:.6e} | {:.6e} | {verdict} |", r.temporal, r.crossview);
    }
    Ok(AblationTable { csv, markdown: md })
}
