//! One function per subcommand. Each resolves its configuration, writes its
//! artifacts into a [`RunDir`] and returns a one-line summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use noisectl_core::collab::{oracle_shared_next, shared_next, CollabParams};
use noisectl_core::decompose::{compose, ChannelPair, MaskVolume, SceneChannel, VIEWS};
use noisectl_core::denoiser::ConvDenoiser;
use noisectl_core::diffusion::{noisify, predict_joint, NoiseOracle, Sampler};
use noisectl_core::io::{ppm_bytes, view_strip};
use noisectl_core::metrics::{
    ablation_table, crossview_consistency, moment_checks, temporal_consistency, ConsistencyReport, MomentResult,
    MIN_MOMENT_ELEMENTS,
};
use noisectl_core::prior::{purpose_key, NoiseMode, NoisePrior, Purpose};
use noisectl_core::rng::{gaussian_sample, Component, StreamKey};
use noisectl_core::scene::{build_dataset, SceneDataset, SceneSpec};
use noisectl_core::train::{fit_collab, train_denoisers, FitConfig, TrainConfig, TrainedPair};
use noisectl_core::Tensor;

use crate::args::{Cli, Command};
use crate::config::RunConfig;
use crate::manifest::RunDir;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const COLLAB_FILE: &str = "collab.ncc";
pub const DENOISER_B_FILE: &str = "denoiser_b.ncd";
pub const DENOISER_F_FILE: &str = "denoiser_f.ncd";
pub const VIDEO_FILE: &str = "video.nct";
pub const EPS_FILE: &str = "eps.nct";

/// Run the parsed command inside a thread pool of the requested size.
pub fn dispatch(cli: &Cli) -> Result<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| execute(cli))
}

fn execute(cli: &Cli) -> Result<String> {
    let common = &cli.common;
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides())?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    match &cli.command {
        Command::Synth => synth(&cfg, &out),
        Command::SampleNoise { data, collab } => sample_noise(&mut cfg, data.as_deref(), collab.as_deref(), &out),
        Command::FitCollab => fit(&cfg, &out),
        Command::Train { data, collab } => train(&mut cfg, data.as_deref(), collab.as_deref(), &out),
        Command::Generate { models, data, collab } => generate(&mut cfg, models, data.as_deref(), collab.as_deref(), &out),
        Command::Eval { run } => eval(run, &out),
        Command::Ablate { modes, seeds } => {
            if let Some(m) = modes {
                cfg.modes = m.clone();
            }
            if let Some(s) = seeds {
                cfg.seeds = *s;
            }
            cfg.finish()?;
            ablate(&cfg, &out)
        }
        Command::Selftest => selftest(&cfg, common.out.as_deref()),
    }
}

fn start_run(cfg: &RunConfig, out: &Path) -> Result<RunDir> {
    let mut run = RunDir::create(out)?;
    run.write(RUN_CONFIG_FILE, cfg.to_config_string())?;
    Ok(run)
}

/// Load `--data` (and adopt its scene) or render the configured scene.
fn dataset(cfg: &mut RunConfig, data: Option<&Path>) -> Result<SceneDataset> {
    match data {
        Some(dir) => {
            let ds = SceneDataset::load(dir)?;
            cfg.scene = ds.spec.clone();
            cfg.random_objects = 0;
            cfg.finish()?;
            Ok(ds)
        }
        None => Ok(build_dataset(&cfg.resolved_scene())?),
    }
}

fn fit_config(cfg: &RunConfig, seed: u64) -> FitConfig {
    FitConfig { seed, ..cfg.fit.clone() }
}

/// Collaboration parameters for `mode`: loaded from `path`, or fitted and
/// saved into the run.
fn collab_for(cfg: &RunConfig, mode: NoiseMode, path: Option<&Path>, run: &mut RunDir) -> Result<Option<CollabParams>> {
    if !mode.uses_collab() {
        return Ok(None);
    }
    let c = match path {
        Some(p) => CollabParams::load(p)?,
        None => {
            let fitted = fit_collab(&fit_config(cfg, cfg.seed), &cfg.decomp()?)?.params;
            let mut buf = Vec::new();
            fitted.write_to(&mut buf)?;
            run.write(COLLAB_FILE, buf)?;
            fitted
        }
    };
    if c.frames() != cfg.scene.frames || c.window() != cfg.window_k {
        return Err(CliError::Config(format!(
            "collaboration parameters cover N = {}, K = {} but the run has N = {}, K = {}",
            c.frames(),
            c.window(),
            cfg.scene.frames,
            cfg.window_k
        )));
    }
    Ok(Some(c))
}

fn prior(cfg: &RunConfig, mode: NoiseMode, collab: Option<CollabParams>) -> Result<NoisePrior> {
    let mut p = NoisePrior::new(cfg.decomp()?, mode, collab)?;
    p.renormalize = cfg.renormalize;
    Ok(p)
}

fn collab_note(cfg: &RunConfig) -> String {
    if cfg.collab_enabled() {
        format!("enabled (K = {})", cfg.window_k)
    } else if cfg.window_k == 0 {
        "disabled (ablation mode, K = 0)".into()
    } else {
        format!("disabled (mode {})", cfg.effective_mode())
    }
}

/// `[C, H, 6W]` strip of a `[6, C, H, W]` frame; two-channel latents show
/// their first channel.
fn strip(frame: &Tensor) -> Result<Tensor> {
    let s = view_strip(frame)?;
    if s.dims()[0] == 2 {
        let d = s.dims().to_vec();
        return Ok(s.select(0, 0)?.reshape(vec![1, d[1], d[2]])?);
    }
    Ok(s)
}

/// All frames of a `[6, N, C, H, W]` video stacked top to bottom.
fn film(video: &Tensor) -> Result<Tensor> {
    let strips = (0..video.dims()[1]).map(|n| strip(&video.select(1, n)?)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat(&strips, 1)?)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.sum_sq() / a.len() as f64)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<String> {
    let mut run = start_run(cfg, out)?;
    let ds = build_dataset(&cfg.resolved_scene())?;
    for f in ds.save(run.root())? {
        run.record(f);
    }
    let manifest = run.finish()?;
    Ok(format!("synth: {:?} latents, manifest {}", ds.latents.dims(), manifest.display()))
}

/// Stacked sample-noise tensors, each `[S, 6, N, C, H, W]`.
struct NoiseVolumes {
    eps: Tensor,
    shared: ChannelPair<Tensor>,
    residual: ChannelPair<Tensor>,
}

/// Moment tests on every frame that holds enough elements. Shared and
/// residual parts are only tested for the masked decomposed modes.
fn noise_moments(cfg: &RunConfig, v: &NoiseVolumes) -> Result<Vec<(usize, MomentResult)>> {
    let p = cfg.decomp()?;
    let mode = cfg.effective_mode();
    let mut out = Vec::new();
    for n in 0..v.eps.dims()[2] {
        let eps = v.eps.select(2, n)?;
        if eps.len() < MIN_MOMENT_ELEMENTS {
            break;
        }
        let mut push = |name: &str, t: &Tensor, var: f64| -> Result<()> {
            out.extend(moment_checks(name, t.data(), var, cfg.moment_sigmas)?.into_iter().map(|r| (n, r)));
            Ok(())
        };
        if mode.uses_masks() {
            for ch in SceneChannel::BOTH {
                let tag = if ch == SceneChannel::Background { "B" } else { "F" };
                push(&format!("shared_{tag}"), &v.shared[ch].select(2, n)?, p.shared_variance(ch))?;
                push(&format!("residual_{tag}"), &v.residual[ch].select(2, n)?, p.residual_variance(ch))?;
            }
        }
        push("composed", &eps, 1.0)?;
    }
    Ok(out)
}

fn moments_csv(rows: &[(usize, MomentResult)]) -> String {
    let mut s = String::from("frame,name,statistic,expected,bound,pass\n");
    for (n, r) in rows {
        let _ = writeln!(s, "{n},{},{:.9e},{:.9e},{:.9e},{}", r.name, r.statistic, r.expected, r.bound, r.pass);
    }
    s
}

pub fn sample_noise(cfg: &mut RunConfig, data: Option<&Path>, collab: Option<&Path>, out: &Path) -> Result<String> {
    let ds = dataset(cfg, data)?;
    let mut run = start_run(cfg, out)?;
    let mode = cfg.effective_mode();
    let c = collab_for(cfg, mode, collab, &mut run)?;
    let prior = prior(cfg, mode, c)?;
    let channels = cfg.scene.channels;
    let mut parts: [Vec<Tensor>; 7] = Default::default();
    for s in 0..cfg.samples as u64 {
        let x = prior.sample(&ds.masks, channels, purpose_key(cfg.seed, Purpose::Noise, s))?;
        let got = [
            x.composed.eps,
            x.composed.masked_b,
            x.composed.masked_f,
            x.noise.shared.background,
            x.noise.shared.foreground,
            x.noise.residual.background,
            x.noise.residual.foreground,
        ];
        for (acc, t) in parts.iter_mut().zip(got) {
            acc.push(t);
        }
    }
    let names = ["eps", "noise_b", "noise_f", "shared_b", "shared_f", "residual_b", "residual_f"];
    let mut stacked = Vec::new();
    for (name, p) in names.iter().zip(&parts) {
        let t = Tensor::stack(p, 0)?;
        run.tensor(&format!("{name}.nct"), &t)?;
        stacked.push(t);
    }
    let [eps, _, _, sb, sf, rb, rf]: [Tensor; 7] = stacked.try_into().expect("seven volumes");
    let vols = NoiseVolumes { eps, shared: ChannelPair::new(sb, sf), residual: ChannelPair::new(rb, rf) };
    let moments = noise_moments(cfg, &vols)?;
    let mut md = format!(
        "# Noise sample\n\nmode: {mode}\n\ncollaboration: {}\n\nsamples: {}, volume {:?}\n",
        collab_note(cfg),
        cfg.samples,
        vols.eps.dims()
    );
    if moments.is_empty() {
        let _ = writeln!(md, "\nmoment tests skipped: fewer than {MIN_MOMENT_ELEMENTS} elements per frame");
    } else {
        run.write("moments.csv", moments_csv(&moments))?;
        let passed = moments.iter().filter(|(_, r)| r.pass).count();
        let _ = writeln!(md, "\nmoment tests passed: {passed}/{}", moments.len());
    }
    run.write("summary.md", md)?;
    run.finish()?;
    Ok(format!("sample-noise: {} video(s), mode {mode}, collaboration {}", cfg.samples, collab_note(cfg)))
}

pub fn fit(cfg: &RunConfig, out: &Path) -> Result<String> {
    if !cfg.collab_enabled() {
        return Err(CliError::Config(format!("nothing to fit: collaboration is {}", collab_note(cfg))));
    }
    let mut run = start_run(cfg, out)?;
    let res = fit_collab(&fit_config(cfg, cfg.seed), &cfg.decomp()?)?;
    let mut buf = Vec::new();
    res.params.write_to(&mut buf)?;
    run.write(COLLAB_FILE, buf)?;
    let mut trace = String::from("step,background,foreground,total\n");
    for s in &res.trace {
        let _ = writeln!(trace, "{},{:.9e},{:.9e},{:.9e}", s.step, s.background, s.foreground, s.background + s.foreground);
    }
    run.write("fit_trace.csv", trace)?;
    let md = format!(
        "# Collaboration fit\n\n| | background | foreground | total |\n|---|---:|---:|---:|\n\
         | initial | {:.6e} | {:.6e} | {:.6e} |\n| fitted | {:.6e} | {:.6e} | {:.6e} |\n\n\
         steps: {}, N = {}, K = {}, final/initial = {:.4}\n",
        res.initial.background,
        res.initial.foreground,
        res.initial.total(),
        res.fitted.background,
        res.fitted.foreground,
        res.fitted.total(),
        cfg.fit.steps,
        cfg.scene.frames,
        cfg.window_k,
        res.reduction()
    );
    run.write("fit_summary.md", md)?;
    run.finish()?;
    Ok(format!("fit-collab: L^C {:.4e} -> {:.4e} ({:.2}%)", res.initial.total(), res.fitted.total(), 100.0 * res.reduction()))
}

fn save_denoiser(run: &mut RunDir, name: &str, d: &ConvDenoiser) -> Result<()> {
    let mut buf = Vec::new();
    d.write_to(&mut buf)?;
    run.write(name, buf)
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.train.clone() }
}

fn train_trace_csv(pair: &TrainedPair) -> String {
    let mut s = String::from("step,t,coeff,background,foreground,total\n");
    for r in &pair.trace {
        let _ = writeln!(
            s,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.step,
            r.t,
            r.coeff,
            r.background,
            r.foreground,
            r.total()
        );
    }
    s
}

pub fn train(cfg: &mut RunConfig, data: Option<&Path>, collab: Option<&Path>, out: &Path) -> Result<String> {
    let ds = dataset(cfg, data)?;
    let mut run = start_run(cfg, out)?;
    let mode = cfg.effective_mode();
    let c = collab_for(cfg, mode, collab, &mut run)?;
    if let (Some(c), Some(_)) = (&c, collab) {
        let mut buf = Vec::new();
        c.write_to(&mut buf)?;
        run.write(COLLAB_FILE, buf)?;
    }
    let prior = prior(cfg, mode, c)?;
    let pair = train_denoisers(&ds, &prior, &cfg.schedule()?, &train_config(cfg, cfg.seed))?;
    save_denoiser(&mut run, DENOISER_B_FILE, &pair.background)?;
    save_denoiser(&mut run, DENOISER_F_FILE, &pair.foreground)?;
    run.write("train_trace.csv", train_trace_csv(&pair))?;
    let md = format!(
        "# Denoiser training\n\nmode: {mode}\n\ncollaboration: {}\n\nsteps: {}\n\n\
         evaluation loss: {:.6e} -> {:.6e} (ratio {:.4})\n",
        collab_note(cfg),
        cfg.train.steps,
        pair.initial_eval,
        pair.final_eval,
        pair.reduction()
    );
    run.write("train_summary.md", md)?;
    run.finish()?;
    Ok(format!("train: loss ratio {:.4} after {} steps", pair.reduction(), cfg.train.steps))
}

pub fn generate(
    cfg: &mut RunConfig,
    models: &Path,
    data: Option<&Path>,
    collab: Option<&Path>,
    out: &Path,
) -> Result<String> {
    let ds = dataset(cfg, data)?;
    let load = |name: &str| ConvDenoiser::load(models.join(name)).map_err(CliError::from);
    let (den_b, den_f) = (load(DENOISER_B_FILE)?, load(DENOISER_F_FILE)?);
    for d in [&den_b, &den_f] {
        if d.arch().channels != cfg.scene.channels {
            return Err(CliError::Config(format!(
                "denoiser expects {} channels, scene has {}",
                d.arch().channels,
                cfg.scene.channels
            )));
        }
    }
    let mut run = start_run(cfg, out)?;
    let mode = cfg.effective_mode();
    let saved = models.join(COLLAB_FILE);
    let collab = collab.or_else(|| saved.exists().then_some(saved.as_path()));
    let c = collab_for(cfg, mode, collab, &mut run)?;
    let prior = prior(cfg, mode, c)?;
    let schedule = cfg.schedule()?;
    let sampler = Sampler {
        prior: &prior,
        schedule: &schedule,
        reverse_noise: cfg.reverse_noise,
        channels: cfg.scene.channels,
        seed: cfg.seed,
        index: 0,
    };
    let video = sampler.sample_video(&ds.masks, &den_b, &den_f)?;
    run.tensor(VIDEO_FILE, &video)?;
    for n in 0..video.dims()[1] {
        run.write(&format!("frames/frame{n:02}.ppm"), ppm_bytes(&strip(&video.select(1, n)?)?)?)?;
    }
    let spec = &ds.spec;
    let err = mse(&video, &ds.latents)?;
    let md = format!(
        "# Generation\n\nmode: {mode}\n\ncollaboration: {}\n\n| metric | value |\n|---|---:|\n\
         | temporal | {:.6e} |\n| crossview | {:.6e} |\n| mse to training latents | {:.6e} |\n",
        collab_note(cfg),
        temporal_consistency(&video, spec)?,
        crossview_consistency(&video, spec)?,
        err
    );
    run.write("summary.md", md)?;
    run.finish()?;
    Ok(format!("generate: {:?} video, mse to latents {err:.4e}", video.dims()))
}

pub fn eval(src: &Path, out: &Path) -> Result<String> {
    let cfg_path = src.join(RUN_CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.finish()?;
    let spec = cfg.resolved_scene();
    let (source, video, moments) = if src.join(VIDEO_FILE).exists() {
        ("generated video", Tensor::load(src.join(VIDEO_FILE))?, Vec::new())
    } else if src.join(EPS_FILE).exists() {
        let load = |n: &str| Tensor::load(src.join(format!("{n}.nct")));
        let vols = NoiseVolumes {
            eps: load("eps")?,
            shared: ChannelPair::new(load("shared_b")?, load("shared_f")?),
            residual: ChannelPair::new(load("residual_b")?, load("residual_f")?),
        };
        let moments = noise_moments(&cfg, &vols)?;
        ("noise sample", vols.eps.select(0, 0)?, moments)
    } else {
        return Err(CliError::Runtime(format!("{} holds neither {VIDEO_FILE} nor {EPS_FILE}", src.display())));
    };
    let mut run = start_run(&cfg, out)?;
    let report = ConsistencyReport::evaluate(&video, &spec, moments.iter().map(|(_, r)| r.clone()).collect())?;
    let moments_cell = if moments.is_empty() {
        "-"
    } else if report.moments_pass() {
        "pass"
    } else {
        "fail"
    };
    let collaboration = if cfg.collab_enabled() { "enabled" } else { "disabled" };
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "source,{source}");
    let _ = writeln!(csv, "mode,{}", cfg.effective_mode());
    let _ = writeln!(csv, "window_k,{}", cfg.window_k);
    let _ = writeln!(csv, "collaboration,{collaboration}");
    let _ = writeln!(csv, "temporal,{:.9e}", report.temporal);
    let _ = writeln!(csv, "crossview,{:.9e}", report.crossview);
    let _ = writeln!(csv, "moments,{moments_cell}");
    run.write("report.csv", csv)?;
    let md = format!(
        "# Evaluation\n\nsource: {source} ({})\n\nmode: {}\n\ncollaboration: {}\n\n\
         | metric | value |\n|---|---:|\n| temporal | {:.6e} |\n| crossview | {:.6e} |\n| moments | {moments_cell} |\n",
        src.display(),
        cfg.effective_mode(),
        collab_note(&cfg),
        report.temporal,
        report.crossview
    );
    run.write("report.md", md)?;
    if !moments.is_empty() {
        run.write("moments.csv", moments_csv(&moments))?;
    }
    run.finish()?;
    Ok(format!(
        "eval: temporal {:.4e}, crossview {:.4e}, collaboration {}",
        report.temporal,
        report.crossview,
        collab_note(&cfg)
    ))
}

/// Scores of one mode on one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub mode: NoiseMode,
    pub temporal: f64,
    pub crossview: f64,
    pub mse: f64,
    /// Strip image of every frame, `[C, N·H, 6·W]`.
    pub film: Tensor,
}

/// Per seed: render a scene, fit collaboration once, train one denoiser
/// pair with the full prior (or the first listed mode when collaboration is
/// off), then generate with every mode from the same sampler seed.
pub fn ablation_runs(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    if cfg.modes.len() < 2 {
        return Err(CliError::Config("ablation needs at least two modes".into()));
    }
    let needs_collab = cfg.modes.iter().any(|m| m.uses_collab());
    if needs_collab && cfg.window_k == 0 {
        return Err(CliError::Config("collaborating modes need window_k >= 1".into()));
    }
    let schedule = cfg.schedule()?;
    let decomp = cfg.decomp()?;
    let mut rows = Vec::new();
    for s in 0..cfg.seeds as u64 {
        let seed = cfg.seed + s;
        let spec: SceneSpec = cfg.scene_with_seed(cfg.scene.seed + s);
        let ds = build_dataset(&spec)?;
        let collab = if needs_collab { Some(fit_collab(&fit_config(cfg, seed), &decomp)?.params) } else { None };
        let collab_for = |m: NoiseMode| if m.uses_collab() { collab.clone() } else { None };
        let train_mode = if needs_collab { NoiseMode::Full } else { cfg.modes[0] };
        let train_prior = prior(cfg, train_mode, collab_for(train_mode))?;
        let pair = train_denoisers(&ds, &train_prior, &schedule, &train_config(cfg, seed))?;
        for &mode in &cfg.modes {
            let prior = prior(cfg, mode, collab_for(mode))?;
            let sampler = Sampler {
                prior: &prior,
                schedule: &schedule,
                reverse_noise: cfg.reverse_noise,
                channels: spec.channels,
                seed,
                index: 0,
            };
            let video = sampler.sample_video(&ds.masks, &pair.background, &pair.foreground)?;
            rows.push(AblationRow {
                seed,
                mode,
                temporal: temporal_consistency(&video, &spec)?,
                crossview: crossview_consistency(&video, &spec)?,
                mse: mse(&video, &ds.latents)?,
                film: film(&video)?,
            });
        }
    }
    Ok(rows)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median scores per mode, in the order the modes were listed.
pub fn ablation_medians(modes: &[NoiseMode], rows: &[AblationRow]) -> Vec<(NoiseMode, f64, f64)> {
    modes
        .iter()
        .map(|&m| {
            let (t, c): (Vec<f64>, Vec<f64>) =
                rows.iter().filter(|r| r.mode == m).map(|r| (r.temporal, r.crossview)).unzip();
            (m, median(&t), median(&c))
        })
        .collect()
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let rows = ablation_runs(cfg)?;
    let mut run = start_run(cfg, out)?;
    let medians = ablation_medians(&cfg.modes, &rows);
    let runs: Vec<(String, ConsistencyReport)> = medians
        .iter()
        .map(|&(m, t, c)| (m.name().to_string(), ConsistencyReport { temporal: t, crossview: c, moments: vec![] }))
        .collect();
    let table = ablation_table(&runs)?;
    run.write("ablation.csv", &table.csv)?;
    let mut seeds_csv = String::from("seed,config,temporal,crossview,mse\n");
    let mut md = format!(
        "# Ablation\n\nMedians over {} seed(s); lower is more consistent.\n\n{}\n## Per seed\n\n\
         | seed | config | temporal | crossview | mse |\n|---:|---|---:|---:|---:|\n",
        cfg.seeds, table.markdown
    );
    for r in &rows {
        let _ = writeln!(seeds_csv, "{},{},{:.9e},{:.9e},{:.9e}", r.seed, r.mode, r.temporal, r.crossview, r.mse);
        let _ = writeln!(md, "| {} | {} | {:.6e} | {:.6e} | {:.6e} |", r.seed, r.mode, r.temporal, r.crossview, r.mse);
    }
    md.push_str("\n## Frames\n\n");
    for r in &rows {
        let name = format!("strips/{}_seed{}.ppm", r.mode, r.seed);
        run.write(&name, ppm_bytes(&r.film)?)?;
        let _ = writeln!(md, "![{} seed {}]({name})", r.mode, r.seed);
    }
    run.write("ablation_seeds.csv", seeds_csv)?;
    run.write("ablation.md", md)?;
    run.finish()?;
    let mut msg = String::from("ablate:");
    for (m, t, c) in medians {
        let _ = write!(msg, " {m} temporal {t:.4e} crossview {c:.4e};");
    }
    Ok(msg)
}

/// Outcome of one self-test check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn aux(seed: u64, draw: u64) -> StreamKey {
    StreamKey::new(seed, Component::Aux).draw(draw)
}

fn random_masks(frames: usize, h: usize, w: usize, key: StreamKey) -> Result<MaskVolume> {
    let g = gaussian_sample(&[VIEWS, frames, 1, h, w], 1.0, key)?;
    Ok(MaskVolume::new(g.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?)
}

fn check_oracle_equivalence(seed: u64, instances: u64) -> Result<Check> {
    let (frames, window) = (16, 5);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let s = gaussian_sample(&[frames, 2, VIEWS, VIEWS], 0.1, aux(seed, 3 * i))?;
        let imp = gaussian_sample(&[window, 2, 2, VIEWS], 1.0, aux(seed, 3 * i + 1))?;
        let c = CollabParams::new(s, imp)?;
        let len = 1 + (i as usize % frames);
        let history = (0..len)
            .map(|n| {
                ChannelPair::try_from_fn(|ch| {
                    gaussian_sample(&[VIEWS, 1, 4, 4], 1.0, aux(seed, 3 * i + 2).frame(n).channel(ch.tag()))
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (a, b) = (shared_next(&history, &c)?, oracle_shared_next(&history, &c)?);
        for ch in SceneChannel::BOTH {
            worst = worst.max(a[ch].max_abs_diff(&b[ch])?);
        }
    }
    Ok(Check {
        name: "oracle equivalence".into(),
        pass: worst <= 1e-10,
        detail: format!("{instances} instances, max abs error {worst:.3e}"),
    })
}

fn check_reconstruction(seed: u64, instances: u64) -> Result<Check> {
    let mut ok = true;
    for i in 0..instances {
        let masks = random_masks(3, 5, 5, aux(seed, 100 + 2 * i))?;
        let full = ChannelPair::try_from_fn(|ch| {
            gaussian_sample(&[VIEWS, 3, 1, 5, 5], 1.0, aux(seed, 101 + 2 * i).channel(ch.tag()))
        })?;
        let c = compose(&full, &masks)?;
        let sum_exact = c.eps.data().iter().zip(c.masked_b.data().iter().zip(c.masked_f.data())).all(|(e, (b, f))| {
            e.to_bits() == (b + f).to_bits()
        });
        let disjoint = c.masked_b.data().iter().zip(c.masked_f.data()).all(|(b, f)| b * f == 0.0);
        ok &= sum_exact && disjoint;
    }
    Ok(Check {
        name: "exact reconstruction".into(),
        pass: ok,
        detail: format!("{instances} instances, eps == N^B + N^F and N^B * N^F == 0"),
    })
}

fn check_oracle_denoising(cfg: &RunConfig) -> Result<Check> {
    let schedule = cfg.schedule()?;
    let masks = random_masks(3, 4, 4, aux(cfg.seed, 900))?;
    let x0 = gaussian_sample(&[VIEWS, 3, 1, 4, 4], 0.25, aux(cfg.seed, 901))?;
    let prior = prior(cfg, NoiseMode::NoCollab, None)?;
    let oracle = NoiseOracle { x0: x0.clone(), schedule: schedule.clone() };
    let sample = prior.sample(&masks, 1, aux(cfg.seed, 902))?;
    let t = schedule.steps();
    let z = noisify(&x0, &sample.composed.eps, t, &schedule)?;
    let pred = predict_joint(&z, &sample.masks, &oracle, &oracle, t, t)?;
    let pred_err = pred.eps.max_abs_diff(&sample.composed.eps)?;
    let sampler = Sampler {
        prior: &prior,
        schedule: &schedule,
        reverse_noise: cfg.reverse_noise,
        channels: 1,
        seed: cfg.seed,
        index: 0,
    };
    let err = sampler.sample_video(&masks, &oracle, &oracle)?.max_abs_diff(&x0)?;
    Ok(Check {
        name: "oracle denoising".into(),
        pass: pred_err <= 1e-9 && err <= 1e-6,
        detail: format!("joint prediction error {pred_err:.3e}, reconstruction error {err:.3e} over {t} steps"),
    })
}

fn check_moments(cfg: &RunConfig) -> Result<Vec<Check>> {
    let side = 130;
    let masks = random_masks(1, side, side, aux(cfg.seed, 1000))?;
    let prior = prior(cfg, NoiseMode::NoCollab, None)?;
    let sample = prior.sample(&masks, 1, aux(cfg.seed, 1001))?;
    let p = cfg.decomp()?;
    let mut results = Vec::new();
    for ch in SceneChannel::BOTH {
        let tag = if ch == SceneChannel::Background { "B" } else { "F" };
        results.extend(moment_checks(&format!("shared_{tag}"), sample.noise.shared[ch].data(), p.shared_variance(ch), cfg.moment_sigmas)?);
        results.extend(moment_checks(
            &format!("residual_{tag}"),
            sample.noise.residual[ch].data(),
            p.residual_variance(ch),
            cfg.moment_sigmas,
        )?);
    }
    results.extend(moment_checks("composed", sample.composed.eps.data(), 1.0, cfg.moment_sigmas)?);
    Ok(results
        .into_iter()
        .map(|r| Check {
            name: format!("moments {}", r.name),
            pass: r.pass,
            detail: format!("{:.5} vs {} +- {:.5}", r.statistic, r.expected, r.bound),
        })
        .collect())
}

/// Checks that need no trained artifacts.
pub fn selftest_checks(cfg: &RunConfig) -> Result<Vec<Check>> {
    let mut checks = vec![
        check_oracle_equivalence(cfg.seed, 100)?,
        check_reconstruction(cfg.seed, 100)?,
        check_oracle_denoising(cfg)?,
    ];
    checks.extend(check_moments(cfg)?);
    Ok(checks)
}

pub fn selftest(cfg: &RunConfig, out: Option<&Path>) -> Result<String> {
    let checks = selftest_checks(cfg)?;
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(text, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    print!("{text}");
    if let Some(out) = out {
        let mut run = start_run(cfg, out)?;
        run.write("selftest.txt", &text)?;
        run.finish()?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("selftest: {failed} of {} checks failed", checks.len())));
    }
    Ok(format!("selftest: all {} checks passed", checks.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn selftest_passes_on_defaults() {
        let mut cfg = RunConfig::default();
        cfg.finish().unwrap();
        let checks = selftest_checks(&cfg).unwrap();
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    }
}
