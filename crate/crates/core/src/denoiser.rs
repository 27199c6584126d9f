//! Small per-image convolutional noise predictor with hand-written
//! backpropagation.
//!
//! Each `(view, frame)` image `[C, H, W]` gets one extra constant input plane
//! holding `t / T`. Layers are `k×k` zero-padded "same" convolutions with
//! SiLU between them; the last layer is linear and outputs `C` planes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::collab::read_header;
use crate::diffusion::Denoiser;
use crate::error::{param_err, shape_err, Error, Result};
use crate::rng::{Component, StreamKey};
use crate::tensor::Tensor;

const MAGIC: &str = "NCDENOISER 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self { channels: 1, hidden: 16, layers: 3, kernel: 3 }
    }
}

impl Arch {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(param_err!("denoiser sizes must be positive: {self:?}"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(param_err!("kernel size must be odd, got {}", self.kernel));
        }
        Ok(())
    }

    /// `(in, out)` planes of layer `l`.
    fn io(&self, l: usize) -> (usize, usize) {
        let cin = if l == 0 { self.channels + 1 } else { self.hidden };
        let cout = if l + 1 == self.layers { self.channels } else { self.hidden };
        (cin, cout)
    }

    /// Offsets of each layer's weights and biases in the flat vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        (0..self.layers)
            .map(|l| {
                let (cin, cout) = self.io(l);
                let w = off;
                let b = w + cout * cin * self.kernel * self.kernel;
                off = b + cout;
                (w, b)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers)
            .map(|l| {
                let (cin, cout) = self.io(l);
                cout * cin * self.kernel * self.kernel + cout
            })
            .sum()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// `out[o] = b[o] + Σ_i w[o,i] ⋆ input[i]` with zero padding.
fn conv_forward(input: &[f64], cin: usize, cout: usize, k: usize, h: usize, w: usize, wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let r = k / 2;
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let dst = &mut out[o * hw..(o + 1) * hw];
        dst.fill(bias[o]);
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((o * cin + i) * k + ky) * k + kx];
                    let (y0, y1) = (r.saturating_sub(ky), (h + r).saturating_sub(ky).min(h));
                    let (x0, x1) = (r.saturating_sub(kx), (w + r).saturating_sub(kx).min(w));
                    for y in y0..y1 {
                        let sy = y + ky - r;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - r..sy * w + x1 + kx - r];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution given the upstream gradient `dout`. Adds into
/// `dw` and `db`; returns the input gradient when `want_input`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    dout: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let hw = h * w;
    let r = k / 2;
    let mut din = want_input.then(|| vec![0.0; cin * hw]);
    for o in 0..cout {
        let g = &dout[o * hw..(o + 1) * hw];
        db[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let idx = ((o * cin + i) * k + ky) * k + kx;
                    let (y0, y1) = (r.saturating_sub(ky), (h + r).saturating_sub(ky).min(h));
                    let (x0, x1) = (r.saturating_sub(kx), (w + r).saturating_sub(kx).min(w));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - r;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - r..sy * w + x1 + kx - r];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[idx] += acc;
                    if let Some(din) = din.as_mut() {
                        let wv = wt[idx];
                        let d = &mut din[i * hw..(i + 1) * hw];
                        for y in y0..y1 {
                            let sy = y + ky - r;
                            let gr = &g[y * w + x0..y * w + x1];
                            let dd = &mut d[sy * w + x0 + kx - r..sy * w + x1 + kx - r];
                            for (a, b) in dd.iter_mut().zip(gr) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every layer (post-activation for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    h: usize,
    w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvDenoiser {
    arch: Arch,
    weights: Vec<f64>,
}

impl ConvDenoiser {
    pub fn new(arch: Arch, weights: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if weights.len() != arch.param_count() {
            return Err(param_err!("{:?} needs {} weights, got {}", arch, arch.param_count(), weights.len()));
        }
        Ok(Self { arch, weights })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        Self::new(arch, vec![0.0; arch.param_count()])
    }

    /// Scaled-normal initialisation; the output layer starts small so the
    /// initial prediction is near zero.
    pub fn init(arch: Arch, key: StreamKey) -> Result<Self> {
        arch.validate()?;
        let mut k = key;
        k.component = Component::Init;
        let mut rng = k.rng();
        let mut weights = vec![0.0; arch.param_count()];
        for (l, (wo, bo)) in arch.offsets().into_iter().enumerate() {
            let (cin, _) = arch.io(l);
            let fan_in = (cin * arch.kernel * arch.kernel) as f64;
            let gain = if l + 1 == arch.layers { 0.1 } else { 1.0 };
            let std = gain / fan_in.sqrt();
            for v in &mut weights[wo..bo] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        }
        Ok(Self { arch, weights })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn input_planes(&self, img: &[f64], h: usize, w: usize, time: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity((self.arch.channels + 1) * h * w);
        x.extend_from_slice(img);
        x.resize(x.len() + h * w, time);
        x
    }

    /// Forward pass on one `[C, H, W]` image at normalised time `time`.
    pub fn forward_image(&self, img: &[f64], h: usize, w: usize, time: f64) -> ForwardCache {
        let a = self.arch;
        let offs = a.offsets();
        let mut inputs = vec![self.input_planes(img, h, w, time)];
        let mut pre = Vec::with_capacity(a.layers - 1);
        let mut output = Vec::new();
        for (l, &(wo, bo)) in offs.iter().enumerate() {
            let (cin, cout) = a.io(l);
            let z = conv_forward(
                inputs.last().expect("input present"),
                cin,
                cout,
                a.kernel,
                h,
                w,
                &self.weights[wo..bo],
                &self.weights[bo..bo + cout],
            );
            if l + 1 == a.layers {
                output = z;
            } else {
                inputs.push(z.iter().map(|&v| silu(v)).collect());
                pre.push(z);
            }
        }
        ForwardCache { inputs, pre, output, h, w }
    }

    /// Add `∂L/∂weights` for upstream gradient `dout` (shaped like the
    /// output) into `grad`.
    pub fn backward_image(&self, cache: &ForwardCache, dout: &[f64], grad: &mut [f64]) {
        let a = self.arch;
        let offs = a.offsets();
        let mut g = dout.to_vec();
        for l in (0..a.layers).rev() {
            let (wo, bo) = offs[l];
            let (cin, cout) = a.io(l);
            let (gw, gb) = grad[wo..bo + cout].split_at_mut(bo - wo);
            let din = conv_backward(
                &cache.inputs[l],
                &g,
                cin,
                cout,
                a.kernel,
                cache.h,
                cache.w,
                &self.weights[wo..bo],
                gw,
                gb,
                l > 0,
            );
            if let Some(mut din) = din {
                for (d, &p) in din.iter_mut().zip(&cache.pre[l - 1]) {
                    *d *= silu_grad(p);
                }
                g = din;
            }
        }
    }

    fn image_dims(&self, z: &Tensor) -> Result<(usize, usize, usize)> {
        let d = z.dims();
        if d.len() < 3 || d[d.len() - 3] != self.arch.channels {
            return Err(shape_err!("denoiser for {} channels got input {d:?}", self.arch.channels));
        }
        let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
        Ok((z.len() / (self.arch.channels * h * w), h, w))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let a = self.arch;
        write!(
            w,
            "{MAGIC}\nchannels={}\nhidden={}\nlayers={}\nkernel={}\nactivation=silu\ntime_input=t/T\n\n",
            a.channels, a.hidden, a.layers, a.kernel
        )?;
        Tensor::new(vec![self.weights.len()], self.weights.clone())?.write_nct(&mut w)
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let fields = read_header(&mut r, MAGIC)?;
        let get = |k: &str| -> Result<usize> {
            fields
                .iter()
                .find(|(key, _)| key == k)
                .ok_or_else(|| Error::Format(format!("denoiser header lacks {k}")))?
                .1
                .parse()
                .map_err(|_| Error::Format(format!("bad denoiser header value for {k}")))
        };
        let arch = Arch { channels: get("channels")?, hidden: get("hidden")?, layers: get("layers")?, kernel: get("kernel")? };
        let t = Tensor::read_nct(&mut r)?;
        Self::new(arch, t.into_data()).map_err(|e| Error::Format(e.to_string()))
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

impl Denoiser for ConvDenoiser {
    fn predict(&self, z: &Tensor, t: usize, steps: usize) -> Result<Tensor> {
        let (images, h, w) = self.image_dims(z)?;
        let time = t as f64 / steps as f64;
        let per = self.arch.channels * h * w;
        let outs: Vec<Vec<f64>> = (0..images)
            .into_par_iter()
            .map(|i| self.forward_image(&z.data()[i * per..(i + 1) * per], h, w, time).output)
            .collect();
        Tensor::new(z.dims().to_vec(), outs.concat())
    }
}
