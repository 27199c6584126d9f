//! Resolved run configuration: built-in defaults, then the config file, then
//! command-line overrides.

use std::fmt::Write as _;
use std::path::Path;

use noisectl_core::collab::MatrixRole;
use noisectl_core::config::{parse_bool, Document, Entry};
use noisectl_core::decompose::DecompParams;
use noisectl_core::diffusion::{DiffusionSchedule, ReverseNoise};
use noisectl_core::prior::NoiseMode;
use noisectl_core::scene::SceneSpec;
use noisectl_core::train::{FitConfig, LrSchedule, Objective, Optimizer, TrainConfig};
use noisectl_core::Error;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    /// Random objects added when the config declares no `[object]` block.
    pub random_objects: usize,
    pub eta: f64,
    pub lambda: f64,
    pub window_k: usize,
    pub mode: NoiseMode,
    pub renormalize: bool,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub reverse_noise: ReverseNoise,
    /// Videos drawn by `sample-noise`.
    pub samples: usize,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub moment_sigmas: f64,
    /// Seeds and modes compared by `ablate`.
    pub seeds: usize,
    pub modes: Vec<NoiseMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            random_objects: 2,
            eta: 1.0,
            lambda: 1.0,
            window_k: 5,
            mode: NoiseMode::Full,
            renormalize: false,
            diffusion_steps: DiffusionSchedule::DEFAULT_STEPS,
            beta_start: 1e-4,
            beta_end: 0.02,
            reverse_noise: ReverseNoise::Prior,
            samples: 1,
            fit: FitConfig::default(),
            train: TrainConfig::default(),
            moment_sigmas: 6.0,
            seeds: 3,
            modes: vec![NoiseMode::Full, NoiseMode::NoCollab, NoiseMode::NoDecomp, NoiseMode::Baseline],
        }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub window_k: Option<usize>,
    pub frames: Option<usize>,
    pub mode: Option<NoiseMode>,
}

fn parse_list<T: std::str::FromStr<Err = Error>>(e: &Entry) -> Result<Vec<T>, Error> {
    e.value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|err| Error::Config(format!("line {}: {err}", e.line))))
        .collect()
}

fn parse_named<T: std::str::FromStr<Err = Error>>(e: &Entry) -> Result<T, Error> {
    e.value.parse().map_err(|err| Error::Config(format!("line {}: {err}", e.line)))
}

impl RunConfig {
    fn apply(&mut self, e: &Entry) -> Result<(), Error> {
        if self.scene.apply_key(e)? {
            return Ok(());
        }
        match e.key.as_str() {
            "seed" => self.seed = e.parse()?,
            "random_objects" => self.random_objects = e.parse()?,
            "eta" => self.eta = e.parse()?,
            "lambda" => self.lambda = e.parse()?,
            "window_k" => self.window_k = e.parse()?,
            "mode" => self.mode = parse_named(e)?,
            "renormalize" => {
                self.renormalize = parse_bool(&e.value)
                    .ok_or_else(|| Error::Config(format!("line {}: expected a boolean", e.line)))?
            }
            "diffusion_steps" => self.diffusion_steps = e.parse()?,
            "beta_start" => self.beta_start = e.parse()?,
            "beta_end" => self.beta_end = e.parse()?,
            "reverse_noise" => self.reverse_noise = parse_named(e)?,
            "samples" => self.samples = e.parse()?,
            "fit_steps" => self.fit.steps = e.parse()?,
            "fit_lr" => self.fit.lr = e.parse()?,
            "fit_lr_schedule" => self.fit.lr_schedule = parse_named(e)?,
            "fit_batch" => self.fit.batch = e.parse()?,
            "fit_eval_batch" => self.fit.eval_batch = e.parse()?,
            "fit_grid_h" => self.fit.grid[1] = e.parse()?,
            "fit_grid_w" => self.fit.grid[2] = e.parse()?,
            "s_role" => self.fit.s_role = parse_named::<MatrixRole>(e)?,
            "i_role" => self.fit.i_role = parse_named::<MatrixRole>(e)?,
            "train_steps" => self.train.steps = e.parse()?,
            "train_lr" => self.train.lr = e.parse()?,
            "train_lr_schedule" => self.train.lr_schedule = parse_named::<LrSchedule>(e)?,
            "optimizer" => self.train.optimizer = parse_named::<Optimizer>(e)?,
            "objective" => self.train.objective = parse_named::<Objective>(e)?,
            "batch_frames" => self.train.batch_frames = e.parse()?,
            "hidden" => self.train.arch.hidden = e.parse()?,
            "layers" => self.train.arch.layers = e.parse()?,
            "kernel" => self.train.arch.kernel = e.parse()?,
            "eval_timesteps" => self.train.eval_timesteps = e.parse()?,
            "moment_sigmas" => self.moment_sigmas = e.parse()?,
            "seeds" => self.seeds = e.parse()?,
            "modes" => self.modes = parse_list(e)?,
            _ => return Err(e.unknown()),
        }
        Ok(())
    }

    pub fn from_document(doc: &Document) -> Result<Self, Error> {
        let mut cfg = RunConfig::default();
        for e in &doc.top().entries {
            cfg.apply(e)?;
        }
        if let Some(s) = doc.sections.iter().skip(1).find(|s| s.name.as_deref() != Some("object")) {
            return Err(Error::Config(format!("line {}: unknown section [{}]", s.line, s.name.as_deref().unwrap_or(""))));
        }
        cfg.scene.apply_objects(doc)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        Self::from_document(&Document::parse(text)?)
    }

    /// Defaults, then `path` if given, then `ov`; validated.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply_overrides(ov);
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = ov.eta {
            self.eta = v;
        }
        if let Some(v) = ov.lambda {
            self.lambda = v;
        }
        if let Some(v) = ov.window_k {
            self.window_k = v;
        }
        if let Some(v) = ov.frames {
            self.scene.frames = v;
        }
        if let Some(v) = ov.mode {
            self.mode = v;
        }
    }

    /// Fill derived fields and validate everything.
    pub fn finish(&mut self) -> Result<(), Error> {
        self.sync();
        self.validate()
    }

    /// The scene with its random objects placed, if it declares none.
    pub fn resolved_scene(&self) -> SceneSpec {
        self.scene_with_seed(self.scene.seed)
    }

    /// As [`resolved_scene`](Self::resolved_scene) with another scene seed.
    pub fn scene_with_seed(&self, seed: u64) -> SceneSpec {
        let spec = SceneSpec { seed, ..self.scene.clone() };
        if spec.objects.is_empty() && self.random_objects > 0 {
            spec.with_random_objects(self.random_objects)
        } else {
            spec
        }
    }

    fn sync(&mut self) {
        self.fit.frames = self.scene.frames;
        self.fit.window = self.window_k;
        self.fit.seed = self.seed;
        self.fit.grid[0] = self.scene.channels;
        self.train.seed = self.seed;
        self.train.arch.channels = self.scene.channels;
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        self.resolved_scene().validate()?;
        self.decomp()?;
        if self.window_k > self.scene.frames {
            return bad(format!("window_k = {} exceeds frames = {}", self.window_k, self.scene.frames));
        }
        if self.window_k == 0 && self.mode == NoiseMode::NoDecomp {
            return bad("mode nodecomp needs window_k >= 1".into());
        }
        self.schedule()?;
        if self.samples == 0 || self.seeds == 0 {
            return bad("samples and seeds must be positive".into());
        }
        if self.modes.is_empty() {
            return bad("modes must list at least one noise mode".into());
        }
        if !(self.moment_sigmas > 0.0) {
            return bad(format!("moment_sigmas must be positive, got {}", self.moment_sigmas));
        }
        let as_config = |e: Error| Error::Config(e.to_string());
        if self.window_k > 0 {
            self.fit.validate().map_err(as_config)?;
        }
        self.train.validate().map_err(as_config)?;
        let arch = self.train.arch;
        if arch.hidden == 0 || arch.layers == 0 || arch.kernel.is_multiple_of(2) {
            return bad(format!("invalid denoiser architecture {arch:?}"));
        }
        Ok(())
    }

    pub fn decomp(&self) -> Result<DecompParams, Error> {
        DecompParams::new(self.eta, self.lambda).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, Error> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// The mode actually sampled: `K = 0` turns collaboration off.
    pub fn effective_mode(&self) -> NoiseMode {
        if self.window_k == 0 && self.mode == NoiseMode::Full {
            NoiseMode::NoCollab
        } else {
            self.mode
        }
    }

    pub fn collab_enabled(&self) -> bool {
        self.effective_mode().uses_collab()
    }

    /// Fully resolved configuration in the file grammar; reading it back
    /// yields an equal config.
    pub fn to_config_string(&self) -> String {
        let role = |r: MatrixRole| match r {
            MatrixRole::Learnable => "learnable",
            MatrixRole::Fixed => "fixed",
            MatrixRole::Disabled => "disabled",
        };
        let sched = |s: LrSchedule| match s {
            LrSchedule::Constant => "constant",
            LrSchedule::Linear => "linear",
        };
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "random_objects = {}", self.random_objects);
        let _ = writeln!(s, "eta = {:?}", self.eta);
        let _ = writeln!(s, "lambda = {:?}", self.lambda);
        let _ = writeln!(s, "window_k = {}", self.window_k);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "renormalize = {}", self.renormalize);
        let _ = writeln!(s, "diffusion_steps = {}", self.diffusion_steps);
        let _ = writeln!(s, "beta_start = {:?}", self.beta_start);
        let _ = writeln!(s, "beta_end = {:?}", self.beta_end);
        let rn = match self.reverse_noise {
            ReverseNoise::Prior => "prior",
            ReverseNoise::Iid => "iid",
        };
        let _ = writeln!(s, "reverse_noise = {rn}");
        let _ = writeln!(s, "samples = {}", self.samples);
        let f = &self.fit;
        let _ = writeln!(s, "fit_steps = {}", f.steps);
        let _ = writeln!(s, "fit_lr = {:?}", f.lr);
        let _ = writeln!(s, "fit_lr_schedule = {}", sched(f.lr_schedule));
        let _ = writeln!(s, "fit_batch = {}", f.batch);
        let _ = writeln!(s, "fit_eval_batch = {}", f.eval_batch);
        let _ = writeln!(s, "fit_grid_h = {}", f.grid[1]);
        let _ = writeln!(s, "fit_grid_w = {}", f.grid[2]);
        let _ = writeln!(s, "s_role = {}", role(f.s_role));
        let _ = writeln!(s, "i_role = {}", role(f.i_role));
        let t = &self.train;
        let _ = writeln!(s, "train_steps = {}", t.steps);
        let _ = writeln!(s, "train_lr = {:?}", t.lr);
        let _ = writeln!(s, "train_lr_schedule = {}", sched(t.lr_schedule));
        let opt = match t.optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        };
        let _ = writeln!(s, "optimizer = {opt}");
        let obj = match t.objective {
            Objective::Mse => "mse",
            Objective::Collaborated => "collaborated",
        };
        let _ = writeln!(s, "objective = {obj}");
        let _ = writeln!(s, "batch_frames = {}", t.batch_frames);
        let _ = writeln!(s, "hidden = {}", t.arch.hidden);
        let _ = writeln!(s, "layers = {}", t.arch.layers);
        let _ = writeln!(s, "kernel = {}", t.arch.kernel);
        let _ = writeln!(s, "eval_timesteps = {}", t.eval_timesteps);
        let _ = writeln!(s, "moment_sigmas = {:?}", self.moment_sigmas);
        let _ = writeln!(s, "seeds = {}", self.seeds);
        let modes: Vec<&str> = self.modes.iter().map(|m| m.name()).collect();
        let _ = writeln!(s, "modes = {}", modes.join(","));
        s.push_str(&self.scene.to_config_string());
        s
    }
}
