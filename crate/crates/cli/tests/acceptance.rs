//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any required criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use noisectl::commands::{ablation_medians, ablation_runs};
use noisectl::manifest::read_manifest;
use noisectl::RunConfig;
use noisectl_core::collab::{oracle_shared_next, shared_next, CollabParams};
use noisectl_core::decompose::{compose, ChannelPair, DecompParams, MaskVolume, SceneChannel, VIEWS};
use noisectl_core::diffusion::{noisify, predict_joint, DiffusionSchedule, FixedDenoiser, NoiseOracle, ReverseNoise, Sampler};
use noisectl_core::prior::{purpose_key, NoiseMode, NoisePrior, Purpose};
use noisectl_core::rng::{gaussian_sample, Component, StreamKey};
use noisectl_core::scene::{build_dataset, SceneObject, SceneSpec};
use noisectl_core::train::{
    coefficient_loss, coefficient_loss_grad, fit_collab, sample_histories, scene_noise_loss, scene_noise_loss_grad,
    train_denoisers, FitConfig, TrainConfig,
};
use noisectl_core::Tensor;

const GOLDEN_SEED: u64 = 0;

struct Outcome {
    criterion: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn key(seed: u64, draw: u64) -> StreamKey {
    StreamKey::new(seed, Component::Aux).draw(draw)
}

fn gauss(dims: &[usize], var: f64, seed: u64, draw: u64) -> Tensor {
    gaussian_sample(dims, var, key(seed, draw)).unwrap()
}

fn random_masks(frames: usize, h: usize, w: usize, seed: u64, draw: u64) -> MaskVolume {
    MaskVolume::new(gauss(&[VIEWS, frames, 1, h, w], 1.0, seed, draw).map(|v| if v > 0.0 { 1.0 } else { 0.0 })).unwrap()
}

/// Two-pass sample mean and unbiased variance.
fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

fn variance_identity() -> Outcome {
    let side = 409;
    let mut worst = (0.0f64, 1.0f64);
    let mut pass = true;
    let mut slowest = Duration::ZERO;
    for (i, eta) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        for (j, lambda) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            let start = Instant::now();
            let seed = (3 * i + j) as u64;
            let masks = random_masks(1, side, side, seed, 1);
            let p = DecompParams::new(eta, lambda).unwrap();
            let prior = NoisePrior::new(p, NoiseMode::NoCollab, None).unwrap();
            let eps = prior.sample(&masks, 1, purpose_key(seed, Purpose::Noise, 0)).unwrap().composed.eps;
            slowest = slowest.max(start.elapsed());
            assert!(eps.len() >= 1_000_000);
            let (m, v) = mean_var(eps.data());
            pass &= m.abs() < 0.005 && (0.99..=1.01).contains(&v);
            if m.abs() > worst.0.abs() {
                worst.0 = m;
            }
            if (v - 1.0).abs() > (worst.1 - 1.0).abs() {
                worst.1 = v;
            }
        }
    }
    Outcome {
        criterion: 1,
        name: "variance identity",
        pass: pass && within(slowest, 10),
        detail: format!("worst mean {:.2e}, worst variance {:.5}, slowest grid point {slowest:.2?}", worst.0, worst.1),
    }
}

fn exact_reconstruction() -> Outcome {
    let mut pass = true;
    for i in 0..100u64 {
        let (frames, h, w) = (1 + (i % 4) as usize, 2 + (i % 5) as usize, 3 + (i % 3) as usize);
        let masks = random_masks(frames, h, w, i, 10);
        let full = ChannelPair::new(
            gauss(&[VIEWS, frames, 1, h, w], 1.0, i, 11),
            gauss(&[VIEWS, frames, 1, h, w], 1.0, i, 12),
        );
        let c = compose(&full, &masks).unwrap();
        let mb = masks.background();
        for k in 0..c.eps.len() {
            let (b, f) = (c.masked_b.data()[k], c.masked_f.data()[k]);
            let expect = if mb.data()[k] == 1.0 { (full.background.data()[k], 0.0) } else { (0.0, full.foreground.data()[k]) };
            pass &= c.eps.data()[k].to_bits() == (b + f).to_bits() && b * f == 0.0 && (b, f) == expect;
        }
    }
    Outcome { criterion: 2, name: "exact reconstruction", pass, detail: "100 random mask/noise instances".into() }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let s = gauss(&[16, 2, VIEWS, VIEWS], 0.2, i, 20);
        let imp = gauss(&[5, 2, 2, VIEWS], 1.0, i, 21);
        let c = CollabParams::new(s, imp).unwrap();
        let len = 1 + (i as usize % 16);
        let history: Vec<_> = (0..len)
            .map(|n| {
                let k = 22 + 2 * n as u64;
                ChannelPair::new(gauss(&[VIEWS, 1, 4, 4], 1.0, i, k), gauss(&[VIEWS, 1, 4, 4], 1.0, i, k + 1))
            })
            .collect();
        let (a, b) = (shared_next(&history, &c).unwrap(), oracle_shared_next(&history, &c).unwrap());
        for ch in SceneChannel::BOTH {
            worst = worst.max(a[ch].max_abs_diff(&b[ch]).unwrap());
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        criterion: 3,
        name: "oracle equivalence",
        pass: worst <= 1e-10 && within(elapsed, 30),
        detail: format!("max abs error {worst:.2e} in {elapsed:.2?}"),
    }
}

/// Relative error between the analytic directional derivative and a
/// central difference with step 1e-5 along a random unit direction.
fn directional_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], seed: u64) -> f64 {
    let d = gauss(&[x.len()], 1.0, seed, 999);
    let norm = d.sum_sq().sqrt();
    let d: Vec<f64> = d.data().iter().map(|v| v / norm).collect();
    let h = 1e-5;
    let shifted = |s: f64| x.iter().zip(&d).map(|(a, b)| a + s * b).collect::<Vec<_>>();
    let fd = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
    let g: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8)
}

fn split_collab(x: &[f64], frames: usize, window: usize) -> CollabParams {
    let ns = frames * 2 * VIEWS * VIEWS;
    CollabParams::new(
        Tensor::new(vec![frames, 2, VIEWS, VIEWS], x[..ns].to_vec()).unwrap(),
        Tensor::new(vec![window, 2, 2, VIEWS], x[ns..].to_vec()).unwrap(),
    )
    .unwrap()
}

fn gradient_fidelity() -> Outcome {
    let p = DecompParams::default();
    let (frames, window) = (6, 3);
    let mut worst_c = 0.0f64;
    for probe in 0..50u64 {
        let base = CollabParams::initial(frames, window).unwrap();
        let histories = sample_histories(&base, &p, &[1, 3, 3], 4, probe, Purpose::Evaluate, 0).unwrap();
        let mut x: Vec<f64> = base.inter_view().data().iter().chain(base.impact().data()).copied().collect();
        let jitter = gauss(&[x.len()], 0.01, probe, 30);
        for (a, b) in x.iter_mut().zip(jitter.data()) {
            *a += b;
        }
        let c = split_collab(&x, frames, window);
        let (_, g) = coefficient_loss_grad(&c, &p, &histories).unwrap();
        let grad: Vec<f64> = g.inter_view.data().iter().chain(g.impact.data()).copied().collect();
        let f = |x: &[f64]| coefficient_loss(&split_collab(x, frames, window), &p, &histories).unwrap().total();
        worst_c = worst_c.max(directional_error(&f, &x, &grad, probe));
    }
    let mut worst_s = 0.0f64;
    let dims = [VIEWS, 4, 1, 3, 3];
    let len: usize = dims.iter().product();
    for probe in 0..50u64 {
        let masks = random_masks(4, 3, 3, probe, 40);
        let gt = gauss(&dims, 1.0, probe, 41);
        let c = CollabParams::new(gauss(&[4, 2, VIEWS, VIEWS], 0.2, probe, 42), gauss(&[3, 2, 2, VIEWS], 1.0, probe, 43)).unwrap();
        let ch = if probe % 2 == 0 { SceneChannel::Background } else { SceneChannel::Foreground };
        let n = (probe % 4) as usize;
        let x: Vec<f64> = gauss(&[2 * len], 1.0, probe, 44).into_data();
        let pred = |x: &[f64]| {
            ChannelPair::new(
                Tensor::new(dims.to_vec(), x[..len].to_vec()).unwrap(),
                Tensor::new(dims.to_vec(), x[len..].to_vec()).unwrap(),
            )
        };
        let (_, g) = scene_noise_loss_grad(ch, n, &masks, &gt, &pred(&x), Some(&c)).unwrap();
        let grad: Vec<f64> = g.background.data().iter().chain(g.foreground.data()).copied().collect();
        let f = |x: &[f64]| scene_noise_loss(ch, n, &masks, &gt, &pred(x), Some(&c)).unwrap();
        worst_s = worst_s.max(directional_error(&f, &x, &grad, 100 + probe));
    }
    Outcome {
        criterion: 4,
        name: "gradient fidelity",
        pass: worst_c <= 1e-4 && worst_s <= 1e-4,
        detail: format!("L^C worst relative error {worst_c:.2e}, scene-noise loss {worst_s:.2e} (50 probes each)"),
    }
}

fn joint_denoise_identity() -> Outcome {
    let sched = DiffusionSchedule::default();
    let dims = [VIEWS, 3, 1, 4, 4];
    let masks = random_masks(3, 4, 4, 5, 50);
    let prior = NoisePrior::new(DecompParams::default(), NoiseMode::NoCollab, None).unwrap();
    let sample = prior.sample(&masks, 1, purpose_key(5, Purpose::Noise, 0)).unwrap();
    let x0 = gauss(&dims, 0.25, 5, 51);
    let mut exact = true;
    for t in [1, 37, 100] {
        let z = noisify(&x0, &sample.composed.eps, t, &sched).unwrap();
        let den_b = FixedDenoiser(sample.full.background.clone());
        let den_f = FixedDenoiser(sample.full.foreground.clone());
        let pred = predict_joint(&z, &masks, &den_b, &den_f, t, 100).unwrap();
        exact &= pred.eps == sample.composed.eps;
    }
    let run = |sched: &DiffusionSchedule| {
        let oracle = NoiseOracle { x0: x0.clone(), schedule: sched.clone() };
        let s = Sampler { prior: &prior, schedule: sched, reverse_noise: ReverseNoise::Prior, channels: 1, seed: 5, index: 0 };
        s.sample_video(&masks, &oracle, &oracle).unwrap().max_abs_diff(&x0).unwrap()
    };
    let err = run(&sched);
    let err1 = run(&DiffusionSchedule::linear(1, 0.02, 0.02).unwrap());
    Outcome {
        criterion: 5,
        name: "joint-denoise identity",
        pass: exact && err <= 1e-6 && err1 <= 1e-6,
        detail: format!("eps' == eps bitwise: {exact}, 100-step reconstruction error {err:.2e}, T=1 error {err1:.2e}"),
    }
}

fn collaboration_fitting() -> Outcome {
    let start = Instant::now();
    let p = DecompParams::default();
    let cfg = FitConfig { seed: GOLDEN_SEED, ..FitConfig::default() };
    let res = fit_collab(&cfg, &p).unwrap();
    let ratio = res.reduction();
    let masks = random_masks(cfg.frames, 130, 130, GOLDEN_SEED, 60);
    let prior = NoisePrior::new(p, NoiseMode::Full, Some(res.params)).unwrap();
    let eps = prior.sample(&masks, 1, purpose_key(GOLDEN_SEED, Purpose::Evaluate, 1)).unwrap().composed.eps;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for n in 0..cfg.frames {
        let frame = eps.select(1, n).unwrap();
        assert!(frame.len() >= 100_000);
        let (_, v) = mean_var(frame.data());
        range = (range.0.min(v), range.1.max(v));
    }
    let elapsed = start.elapsed();
    Outcome {
        criterion: 6,
        name: "collaboration fitting",
        pass: ratio <= 0.05 && range.0 >= 0.95 && range.1 <= 1.05 && within(elapsed, 120),
        detail: format!(
            "L^C ratio {:.4} after {} steps, per-frame variance in [{:.4}, {:.4}], {elapsed:.2?}",
            ratio, cfg.steps, range.0, range.1
        ),
    }
}

fn overfit_scene() -> SceneSpec {
    let mut spec = SceneSpec { frames: 8, view_h: 16, view_w: 32, ..SceneSpec::default() };
    spec.background.amplitude = 0.0;
    spec.objects = vec![
        SceneObject { width: 6.0, height: 6.0, x: 10.0, y: 4.0, vx: 4.0, vy: 0.0, intensity: 0.9 },
        SceneObject { width: 4.0, height: 4.0, x: 70.0, y: 10.0, vx: -2.0, vy: 0.0, intensity: 0.1 },
    ];
    spec
}

fn overfit_generation() -> Outcome {
    let start = Instant::now();
    let spec = overfit_scene();
    let ds = build_dataset(&spec).unwrap();
    let p = DecompParams::default();
    let fit = FitConfig { frames: spec.frames, eval_batch: 64, seed: GOLDEN_SEED, ..FitConfig::default() };
    let collab = fit_collab(&fit, &p).unwrap().params;
    let prior = NoisePrior::new(p, NoiseMode::Full, Some(collab)).unwrap();
    let sched = DiffusionSchedule::default();
    let cfg = TrainConfig { seed: GOLDEN_SEED, ..TrainConfig::default() };
    let pair = train_denoisers(&ds, &prior, &sched, &cfg).unwrap();
    let sampler = Sampler { prior: &prior, schedule: &sched, reverse_noise: ReverseNoise::Prior, channels: 1, seed: 5, index: 0 };
    let video = sampler.sample_video(&ds.masks, &pair.background, &pair.foreground).unwrap();
    let mse = video.sub(&ds.latents).unwrap().sum_sq() / video.len() as f64;
    let elapsed = start.elapsed();
    Outcome {
        criterion: 7,
        name: "overfit generation",
        pass: pair.reduction() <= 0.10 && cfg.steps <= 5000 && mse <= 1e-2 && within(elapsed, 600),
        detail: format!("loss ratio {:.4} after {} steps, generated MSE {mse:.2e}, {elapsed:.2?}", pair.reduction(), cfg.steps),
    }
}

fn directional_ablation() -> Outcome {
    let mut cfg = RunConfig::parse(
        "frames = 8\nview_h = 16\nview_w = 32\nrandom_objects = 2\nfit_eval_batch = 64\n\
         train_steps = 2000\nseeds = 3\nmodes = full,nocollab\n",
    )
    .unwrap();
    cfg.finish().unwrap();
    let rows = ablation_runs(&cfg).unwrap();
    let med = ablation_medians(&cfg.modes, &rows);
    let (full, k0) = (med[0], med[1]);
    Outcome {
        criterion: 8,
        name: "directional ablation",
        pass: full.1 < k0.1 && full.2 < k0.2,
        detail: format!(
            "median temporal {:.4e} vs K=0 {:.4e}; median crossview {:.4e} vs K=0 {:.4e}",
            full.1, k0.1, full.2, k0.2
        ),
    }
}

const TINY: &str = "frames = 4\nview_h = 8\nview_w = 16\nwindow_k = 2\ndiffusion_steps = 10\nfit_steps = 20\n\
                    fit_eval_batch = 8\ntrain_steps = 10\neval_timesteps = 2\nseeds = 2\nsamples = 2\n";

fn noisectl(args: &[&str], threads: &str) {
    let status = Command::new(env!("CARGO_BIN_EXE_noisectl"))
        .args(args)
        .env("NOISECTL_THREADS", threads)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "noisectl {args:?} failed");
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let dir = |name: &str, rep: usize| root.join(format!("{name}{rep}")).to_str().unwrap().to_string();
    let mut mismatched = Vec::new();
    let mut check = |name: &str, extra: &[&str]| {
        for (rep, threads) in [(0, "1"), (1, "2")] {
            let out = dir(name, rep);
            let mut args: Vec<&str> = vec![name, "--config", cfg, "--out", &out];
            args.extend_from_slice(extra);
            noisectl(&args, threads);
        }
        let a = read_manifest(&Path::new(&dir(name, 0)).join("manifest.txt")).unwrap();
        let b = read_manifest(&Path::new(&dir(name, 1)).join("manifest.txt")).unwrap();
        if a != b || a.is_empty() {
            mismatched.push(name.to_string());
        }
    };
    check("synth", &[]);
    let data = dir("synth", 0);
    check("sample-noise", &["--data", &data]);
    check("fit-collab", &[]);
    check("train", &["--data", &data]);
    let models = dir("train", 0);
    check("generate", &["--data", &data, "--models", &models]);
    let generated = dir("generate", 0);
    check("eval", &["--run", &generated]);
    check("ablate", &["--modes", "full,nocollab"]);
    check("selftest", &[]);
    Outcome {
        criterion: 9,
        name: "determinism",
        pass: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            "8 subcommands rerun with 1 and 2 threads, manifests identical".into()
        } else {
            format!("manifests differ for {mismatched:?}")
        },
    }
}

fn main() {
    let suite: [fn() -> Outcome; 9] = [
        variance_identity,
        exact_reconstruction,
        oracle_equivalence,
        gradient_fidelity,
        joint_denoise_identity,
        collaboration_fitting,
        overfit_generation,
        directional_ablation,
        determinism,
    ];
    let mut failed = Vec::new();
    for run in suite {
        let o = run();
        println!("criterion {} {}: {} ({})", o.criterion, if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        if !o.pass {
            failed.push(o.criterion);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
