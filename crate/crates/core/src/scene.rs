//! The "hexview" synthetic dataset.
//!
//! A periodic 2D world strip is watched by six cameras arranged as a
//! panoramic rig. The world is cut into six equal, disjoint sectors that
//! tile its width; camera `m` sees sector `m` plus the first `overlap`
//! pixels of the next sector, so neighbouring cameras share a thin strip of
//! world. Rectangular objects move at constant velocity over a smooth
//! background and wrap around horizontally.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::config::{Document, Entry};
use crate::decompose::{MaskVolume, VIEWS};
use crate::error::{param_err, Error, Result};
use crate::io::write_ppm;
use crate::rng::{Component, StreamKey};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub width: f64,
    pub height: f64,
    /// Left edge in world pixels at frame 0.
    pub x: f64,
    /// Top edge in world pixels at frame 0.
    pub y: f64,
    /// Pixels per frame.
    pub vx: f64,
    pub vy: f64,
    pub intensity: f64,
}

impl Default for SceneObject {
    fn default() -> Self {
        Self { width: 8.0, height: 8.0, x: 0.0, y: 0.0, vx: 0.0, vy: 0.0, intensity: 0.9 }
    }
}

impl SceneObject {
    fn left(&self, frame: usize) -> f64 {
        self.x + self.vx * frame as f64
    }

    fn top(&self, frame: usize) -> f64 {
        self.y + self.vy * frame as f64
    }

    fn apply(&mut self, e: &Entry) -> Result<()> {
        match e.key.as_str() {
            "width" => self.width = e.parse()?,
            "height" => self.height = e.parse()?,
            "x" => self.x = e.parse()?,
            "y" => self.y = e.parse()?,
            "vx" => self.vx = e.parse()?,
            "vy" => self.vy = e.parse()?,
            "intensity" => self.intensity = e.parse()?,
            _ => return Err(e.unknown()),
        }
        Ok(())
    }
}

/// Smooth background `level + amplitude·sin(2π·cx·x/Ww + φx)·cos(2π·cy·y/H + φy)`,
/// with phases derived from the scene seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub level: f64,
    pub amplitude: f64,
    /// Whole cycles around the world, keeping the texture periodic.
    pub cycles_x: u32,
    pub cycles_y: f64,
}

impl Default for Background {
    fn default() -> Self {
        Self { level: 0.4, amplitude: 0.15, cycles_x: 3, cycles_y: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub view_h: usize,
    pub view_w: usize,
    /// Pixels of the next sector each camera also sees.
    pub overlap: usize,
    /// Average-pooling factor from pixels to latents.
    pub pool: usize,
    pub channels: usize,
    pub background: Background,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 16,
            view_h: 32,
            view_w: 56,
            overlap: 2,
            pool: 2,
            channels: 1,
            background: Background::default(),
            objects: Vec::new(),
            seed: 0,
        }
    }
}

/// Per-latent-pixel ground truth used by the consistency metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentLabel {
    /// No object pixel inside the pooling block.
    Background,
    /// Every pixel of the block shows this object.
    Object(usize),
    Mixed,
}

impl SceneSpec {
    pub fn sector_width(&self) -> usize {
        self.view_w - self.overlap
    }

    pub fn world_width(&self) -> usize {
        VIEWS * self.sector_width()
    }

    pub fn latent_h(&self) -> usize {
        self.view_h / self.pool
    }

    pub fn latent_w(&self) -> usize {
        self.view_w / self.pool
    }

    /// Latent columns shared by neighbouring views.
    pub fn latent_overlap(&self) -> usize {
        self.overlap / self.pool
    }

    pub fn latent_dims(&self) -> [usize; 5] {
        [VIEWS, self.frames, self.channels, self.latent_h(), self.latent_w()]
    }

    /// Random scene with `count` objects whose geometry and motion are
    /// multiples of the pooling factor.
    pub fn random(seed: u64, count: usize) -> Self {
        SceneSpec { seed, ..Default::default() }.with_random_objects(count)
    }

    /// Replace the objects with `count` random ones drawn from `self.seed`,
    /// sized and placed for this spec's geometry.
    pub fn with_random_objects(self, count: usize) -> Self {
        let mut spec = self;
        spec.objects.clear();
        let seed = spec.seed;
        let mut rng = StreamKey::new(seed, Component::Aux).draw(0x5cee).rng();
        let pool = spec.pool as f64;
        let ww = spec.world_width() as f64;
        for _ in 0..count {
            let w = pool * rng.random_range(3..=5) as f64;
            let cells = spec.view_h / spec.pool;
            let max_h = cells.saturating_sub(2).clamp(1, 5);
            let h_cells = rng.random_range(max_h.min(3)..=max_h);
            let h = pool * h_cells as f64;
            let x = pool * (rng.random_range(0.0..ww / pool)).floor();
            let y = pool * rng.random_range(0..=cells - h_cells) as f64;
            let speed = pool * rng.random_range(1..=2) as f64;
            let vx = if rng.random_bool(0.5) { speed } else { -speed };
            let intensity = 0.75 + 0.2 * rng.random::<f64>();
            spec.objects.push(SceneObject { width: w, height: h, x, y, vx, vy: 0.0, intensity });
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.view_h == 0 || self.view_w == 0 || self.channels == 0 {
            return cfg("frames, view_h, view_w and channels must be positive".into());
        }
        if self.pool == 0 || self.overlap >= self.view_w {
            return cfg("pool must be positive and overlap smaller than view_w".into());
        }
        if !self.view_h.is_multiple_of(self.pool) || !self.view_w.is_multiple_of(self.pool) || !self.overlap.is_multiple_of(self.pool) {
            return cfg(format!(
                "latent pooling {} must divide view_h {}, view_w {} and overlap {}",
                self.pool, self.view_h, self.view_w, self.overlap
            ));
        }
        let bg = &self.background;
        if !(bg.level.is_finite() && bg.amplitude.is_finite() && bg.cycles_y.is_finite()) {
            return cfg("background parameters must be finite".into());
        }
        let (ww, h) = (self.world_width() as f64, self.view_h as f64);
        for (j, o) in self.objects.iter().enumerate() {
            let finite = [o.width, o.height, o.x, o.y, o.vx, o.vy, o.intensity].iter().all(|v| v.is_finite());
            if !finite || o.width <= 0.0 || o.height <= 0.0 || o.width > ww {
                return cfg(format!("object {j}: invalid geometry"));
            }
            if !(0.0..=1.0).contains(&o.intensity) {
                return cfg(format!("object {j}: intensity must lie in [0, 1]"));
            }
            for n in [0, self.frames - 1] {
                let top = o.top(n);
                if top < 0.0 || top + o.height > h {
                    return cfg(format!("object {j} leaves the world vertically by frame {n}"));
                }
            }
        }
        Ok(())
    }

    fn phases(&self) -> (f64, f64) {
        let mut rng = StreamKey::new(self.seed, Component::Aux).draw(0xba_c6).rng();
        let tau = std::f64::consts::TAU;
        (tau * rng.random::<f64>(), tau * rng.random::<f64>())
    }

    fn background_at(&self, wx: f64, wy: f64, phases: (f64, f64)) -> f64 {
        let tau = std::f64::consts::TAU;
        let bg = &self.background;
        let sx = (tau * bg.cycles_x as f64 * wx / self.world_width() as f64 + phases.0).sin();
        let cy = (tau * bg.cycles_y * wy / self.view_h as f64 + phases.1).cos();
        bg.level + bg.amplitude * sx * cy
    }

    /// Topmost object covering the pixel whose centre is at world `(wx, wy)`.
    fn object_at(&self, frame: usize, wx: f64, wy: f64) -> Option<usize> {
        let ww = self.world_width() as f64;
        self.objects.iter().enumerate().rev().find_map(|(j, o)| {
            let dx = (wx - o.left(frame)).rem_euclid(ww);
            let dy = wy - o.top(frame);
            (dx < o.width && (0.0..o.height).contains(&dy)).then_some(j)
        })
    }

    /// World x of the centre of pixel column `col` in `view`.
    pub fn world_x(&self, view: usize, col: usize) -> f64 {
        ((view * self.sector_width() + col) % self.world_width()) as f64 + 0.5
    }

    fn labels(&self, frame: usize, view: usize) -> Vec<Option<usize>> {
        let (h, w) = (self.view_h, self.view_w);
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(self.object_at(frame, self.world_x(view, c), r as f64 + 0.5));
            }
        }
        out
    }

    pub fn apply_key(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "frames" => self.frames = e.parse()?,
            "view_h" => self.view_h = e.parse()?,
            "view_w" => self.view_w = e.parse()?,
            "overlap" => self.overlap = e.parse()?,
            "pool" => self.pool = e.parse()?,
            "channels" => self.channels = e.parse()?,
            "bg_level" => self.background.level = e.parse()?,
            "bg_amplitude" => self.background.amplitude = e.parse()?,
            "bg_cycles_x" => self.background.cycles_x = e.parse()?,
            "bg_cycles_y" => self.background.cycles_y = e.parse()?,
            "scene_seed" => self.seed = e.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Read `[object]` blocks from a document.
    pub fn apply_objects(&mut self, doc: &Document) -> Result<()> {
        for section in doc.named("object") {
            let mut o = SceneObject::default();
            for e in &section.entries {
                o.apply(e)?;
            }
            self.objects.push(o);
        }
        Ok(())
    }

    /// Parse a standalone scene file; every key must be a scene key.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let doc = Document::parse(text)?;
        let mut spec = SceneSpec::default();
        for e in &doc.top().entries {
            if !spec.apply_key(e)? {
                return Err(e.unknown());
            }
        }
        if let Some(s) = doc.sections.iter().skip(1).find(|s| s.name.as_deref() != Some("object")) {
            return Err(Error::Config(format!("line {}: unknown section", s.line)));
        }
        spec.apply_objects(&doc)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config_string(&self) -> String {
        let bg = &self.background;
        let mut s = String::new();
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "view_h = {}", self.view_h);
        let _ = writeln!(s, "view_w = {}", self.view_w);
        let _ = writeln!(s, "overlap = {}", self.overlap);
        let _ = writeln!(s, "pool = {}", self.pool);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "bg_level = {:?}", bg.level);
        let _ = writeln!(s, "bg_amplitude = {:?}", bg.amplitude);
        let _ = writeln!(s, "bg_cycles_x = {}", bg.cycles_x);
        let _ = writeln!(s, "bg_cycles_y = {:?}", bg.cycles_y);
        let _ = writeln!(s, "scene_seed = {}", self.seed);
        for o in &self.objects {
            let _ = writeln!(s, "\n[object]");
            let _ = writeln!(s, "width = {:?}\nheight = {:?}", o.width, o.height);
            let _ = writeln!(s, "x = {:?}\ny = {:?}", o.x, o.y);
            let _ = writeln!(s, "vx = {:?}\nvy = {:?}", o.vx, o.vy);
            let _ = writeln!(s, "intensity = {:?}", o.intensity);
        }
        s
    }

    /// Ground-truth labels of each latent pixel of `view` at `frame`,
    /// row-major `[latent_h, latent_w]`.
    pub fn latent_labels(&self, frame: usize, view: usize) -> Vec<LatentLabel> {
        let px = self.labels(frame, view);
        let (p, lw) = (self.pool, self.latent_w());
        let mut out = Vec::with_capacity(self.latent_h() * lw);
        for lr in 0..self.latent_h() {
            for lc in 0..lw {
                let mut block = (0..p).flat_map(|dr| (0..p).map(move |dc| (lr * p + dr, lc * p + dc)));
                let (r0, c0) = block.next().expect("pool >= 1");
                let first = px[r0 * self.view_w + c0];
                let uniform = block.all(|(r, c)| px[r * self.view_w + c] == first);
                out.push(match (uniform, first) {
                    (true, None) => LatentLabel::Background,
                    (true, Some(j)) => LatentLabel::Object(j),
                    (false, _) => LatentLabel::Mixed,
                });
            }
        }
        out
    }
}

/// Render one view at one frame (both 0-based). Returns the image
/// `[C, H, W]` in `[0, 1]` and the binary foreground mask `[1, H, W]`.
pub fn render(spec: &SceneSpec, frame: usize, view: usize) -> Result<(Tensor, Tensor)> {
    if frame >= spec.frames || view >= VIEWS {
        return Err(param_err!(
            "frame {frame} / view {view} out of range ({} frames, {VIEWS} views)",
            spec.frames
        ));
    }
    let (h, w, ch) = (spec.view_h, spec.view_w, spec.channels);
    let phases = spec.phases();
    let labels = spec.labels(frame, view);
    let mut image = Tensor::zeros(&[ch, h, w]);
    let mut mask = Tensor::zeros(&[1, h, w]);
    for r in 0..h {
        for c in 0..w {
            let v = match labels[r * w + c] {
                Some(j) => {
                    mask.data_mut()[r * w + c] = 1.0;
                    spec.objects[j].intensity
                }
                None => spec.background_at(spec.world_x(view, c), r as f64 + 0.5, phases),
            }
            .clamp(0.0, 1.0);
            for k in 0..ch {
                image.data_mut()[(k * h + r) * w + c] = v;
            }
        }
    }
    Ok((image, mask))
}

/// Average-pool `[C, H, W]` by `p`.
pub fn avg_pool(img: &Tensor, p: usize) -> Result<Tensor> {
    pool_with(img, p, |block| block.iter().sum::<f64>() / block.len() as f64)
}

/// Pool `[C, H, W]` by `p`, marking a cell 1 if any pixel is non-zero.
pub fn any_pool(img: &Tensor, p: usize) -> Result<Tensor> {
    pool_with(img, p, |block| if block.iter().any(|&v| v != 0.0) { 1.0 } else { 0.0 })
}

fn pool_with(img: &Tensor, p: usize, f: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
    let d = img.dims();
    if d.len() != 3 || p == 0 || !d[1].is_multiple_of(p) || !d[2].is_multiple_of(p) {
        return Err(Error::Config(format!("pooling factor {p} does not divide image {d:?}")));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let (lh, lw) = (h / p, w / p);
    let mut out = Tensor::zeros(&[c, lh, lw]);
    let mut block = Vec::with_capacity(p * p);
    for k in 0..c {
        for lr in 0..lh {
            for lc in 0..lw {
                block.clear();
                for dr in 0..p {
                    let row = (k * h + lr * p + dr) * w + lc * p;
                    block.extend_from_slice(&img.data()[row..row + p]);
                }
                out.data_mut()[(k * lh + lr) * lw + lc] = f(&block);
            }
        }
    }
    Ok(out)
}

/// Latents `[6, N, C, h, w]`, background masks, and the spec that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub latents: Tensor,
    pub masks: MaskVolume,
    pub spec: SceneSpec,
}

pub fn build_dataset(spec: &SceneSpec) -> Result<SceneDataset> {
    spec.validate()?;
    let cells: Vec<(usize, usize)> =
        (0..VIEWS).flat_map(|m| (0..spec.frames).map(move |n| (m, n))).collect();
    let rendered = cells
        .par_iter()
        .map(|&(m, n)| {
            let (img, fg) = render(spec, n, m)?;
            let latent = avg_pool(&img, spec.pool)?;
            let bg = any_pool(&fg, spec.pool)?.map(|v| 1.0 - v);
            Ok((latent, bg))
        })
        .collect::<Result<Vec<_>>>()?;
    let (latents, masks): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let [v, n, c, h, w] = spec.latent_dims();
    let latents = Tensor::new(vec![v, n, c, h, w], latents.into_iter().flat_map(Tensor::into_data).collect())?;
    let masks = Tensor::new(vec![v, n, 1, h, w], masks.into_iter().flat_map(Tensor::into_data).collect())?;
    Ok(SceneDataset { latents, masks: MaskVolume::new(masks)?, spec: spec.clone() })
}

pub const LATENTS_FILE: &str = "latents.nct";
pub const MASKS_FILE: &str = "masks_b.nct";
pub const SCENE_FILE: &str = "scene.cfg";

impl SceneDataset {
    /// Write latents, masks, the scene description and per-view PPM frames.
    /// Returns the written file names relative to `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir.join("frames"))?;
        self.latents.save(dir.join(LATENTS_FILE))?;
        self.masks.background().save(dir.join(MASKS_FILE))?;
        fs::write(dir.join(SCENE_FILE), self.spec.to_config_string())?;
        let mut files = vec![LATENTS_FILE.to_string(), MASKS_FILE.to_string(), SCENE_FILE.to_string()];
        for n in 0..self.spec.frames {
            for m in 0..VIEWS {
                let (img, _) = render(&self.spec, n, m)?;
                let name = format!("frames/view{m}_frame{n:02}.ppm");
                write_ppm(&dir.join(&name), &img)?;
                files.push(name);
            }
        }
        Ok(files)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = SceneSpec::from_config_str(&fs::read_to_string(dir.join(SCENE_FILE))?)?;
        let latents = Tensor::load(dir.join(LATENTS_FILE))?;
        let masks = MaskVolume::new(Tensor::load(dir.join(MASKS_FILE))?)?;
        if latents.dims() != spec.latent_dims() {
            return Err(Error::Validation(format!(
                "latents {:?} do not match the scene {:?}",
                latents.dims(),
                spec.latent_dims()
            )));
        }
        Ok(Self { latents, masks, spec })
    }
}
