//! Dense row-major `f64` tensors and the small set of operations the noise
//! engine needs: elementwise algebra, view-axis mixing, axis slicing and
//! moment statistics. Tensors also carry the `NCT1` binary dump format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{param_err, shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"NCT1";

/// A dense array of 64-bit floats stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Sample moments of a tensor's elements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    /// Unbiased (n - 1) sample variance.
    pub variance: f64,
    /// `m4 / m2^2 - 3` with biased central moments; 0 for constant data.
    pub excess_kurtosis: f64,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(shape_err!("dims must be non-empty and positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} hold {n} elements but {} were supplied",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(
            !dims.is_empty() && !dims.contains(&0),
            "dims must be non-empty and positive, got {dims:?}"
        );
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    fn check_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("{op}: {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of elements spanned by one index step along `axis`.
    fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..].iter().product()
    }

    /// Sub-tensor at `index` along `axis`, with that axis removed. Selecting
    /// from a rank-1 tensor yields a single-element rank-1 tensor.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor> {
        if axis >= self.rank() || index >= self.dims[axis] {
            return Err(shape_err!(
                "select axis {axis} index {index} out of range for {:?}",
                self.dims
            ));
        }
        let inner = self.stride(axis);
        let outer: usize = self.dims[..axis].iter().product();
        let span = inner * self.dims[axis];
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * span + index * inner;
            data.extend_from_slice(&self.data[base..base + inner]);
        }
        let mut dims: Vec<usize> = self.dims.clone();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        Tensor::new(dims, data)
    }

    /// Stack equally-shaped tensors along a new axis inserted at `axis`.
    pub fn stack(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("stack of zero tensors"))?;
        if axis > first.rank() {
            return Err(shape_err!("stack axis {axis} beyond rank {}", first.rank()));
        }
        for p in parts {
            first.check_same(p, "stack")?;
        }
        let inner = first.dims[axis..].iter().product::<usize>();
        let outer = first.dims[..axis].iter().product::<usize>();
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for o in 0..outer {
            for p in parts {
                data.extend_from_slice(&p.data[o * inner..(o + 1) * inner]);
            }
        }
        let mut dims = first.dims.clone();
        dims.insert(axis, parts.len());
        Tensor::new(dims, data)
    }

    /// Concatenate along an existing axis.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(shape_err!("concat axis {axis} beyond rank {}", first.rank()));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.dims.iter().zip(&first.dims).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!("concat: {:?} vs {:?}", p.dims, first.dims));
            }
        }
        let outer = first.dims[..axis].iter().product::<usize>();
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        for o in 0..outer {
            for p in parts {
                let chunk = p.dims[axis..].iter().product::<usize>();
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut dims = first.dims.clone();
        dims[axis] = parts.iter().map(|p| p.dims[axis]).sum();
        Tensor::new(dims, data)
    }

    /// Mix the leading (view) axis with a square matrix:
    /// `out[p] = sum_q mix[p][q] * stacked[q]`, trailing axes untouched.
    pub fn view_mix(mix: &Tensor, stacked: &Tensor) -> Result<Tensor> {
        let views = stacked.dims[0];
        if mix.dims != [views, views] {
            return Err(shape_err!(
                "view_mix: matrix {:?} does not match leading axis {views}",
                mix.dims
            ));
        }
        let inner = stacked.stride(0);
        let mut out = Tensor::zeros(&stacked.dims);
        for p in 0..views {
            let dst = &mut out.data[p * inner..(p + 1) * inner];
            for q in 0..views {
                let w = mix.data[p * views + q];
                if w == 0.0 {
                    continue;
                }
                let src = &stacked.data[q * inner..(q + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    pub fn moments(&self) -> Result<Moments> {
        moments(&self.data)
    }

    pub fn write_nct<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_nct<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let mut b8 = [0u8; 8];
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            dims.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| {
                Error::Format("dimension does not fit in usize".into())
            })?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_nct(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        Tensor::read_nct(BufReader::new(File::open(path)?))
    }
}

pub fn moments(xs: &[f64]) -> Result<Moments> {
    let n = xs.len();
    if n < 2 {
        return Err(param_err!("moments need at least 2 elements, got {n}"));
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    let variance = m2 / (nf - 1.0);
    let (m2, m4) = (m2 / nf, m4 / nf);
    let excess_kurtosis = if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { 0.0 };
    Ok(Moments { mean, variance, excess_kurtosis })
}

/// Pearson correlation of two equally long samples.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(param_err!("correlation needs two equal samples of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Sample covariance (n - 1 denominator).
pub fn covariance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(param_err!("covariance needs two equal samples of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    Ok(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_masks() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(a.hadamard(&m).unwrap().data(), &[0.0, 2.0, 3.0, 0.0]);
        assert_eq!(a.hadamard(&Tensor::ones(&[2, 2])).unwrap(), a);
        assert_eq!(a.hadamard(&Tensor::zeros(&[2, 2])).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn hadamard_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(a.hadamard(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn view_mix_two_view_reduction() {
        let m = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let s = t(&[2], &[1.0, 2.0]);
        let out = Tensor::view_mix(&m, &s).unwrap();
        // Row sums by hand: 0.1 + 0.4 and 0.3 + 0.8.
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
        assert!((out.data()[1] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn view_mix_identity_and_zero() {
        let stacked = Tensor::from_fn(&[6, 2, 3], |i| i as f64 * 0.5 - 3.0);
        let mut eye = Tensor::zeros(&[6, 6]);
        for p in 0..6 {
            eye.data_mut()[p * 6 + p] = 1.0;
        }
        assert_eq!(Tensor::view_mix(&eye, &stacked).unwrap(), stacked);
        let zero = Tensor::view_mix(&Tensor::zeros(&[6, 6]), &stacked).unwrap();
        assert_eq!(zero, Tensor::zeros(&[6, 2, 3]));
        assert!(Tensor::view_mix(&eye, &Tensor::zeros(&[5, 2])).is_err());
    }

    #[test]
    fn moments_small_cases() {
        let c = t(&[4], &[3.0; 4]).moments().unwrap();
        assert_eq!((c.mean, c.variance), (3.0, 0.0));
        let two = t(&[2], &[0.0, 2.0]).moments().unwrap();
        assert_eq!((two.mean, two.variance), (1.0, 2.0));
        assert!(t(&[1], &[1.0]).moments().is_err());
    }

    #[test]
    fn select_and_stack_invert() {
        let x = Tensor::from_fn(&[3, 4, 2], |i| i as f64);
        for axis in 0..3 {
            let parts: Vec<_> = (0..x.dims()[axis]).map(|i| x.select(axis, i).unwrap()).collect();
            assert_eq!(Tensor::stack(&parts, axis).unwrap(), x);
        }
        let s = x.select(1, 2).unwrap();
        assert_eq!(s.dims(), &[3, 2]);
        assert_eq!(s.data(), &[4.0, 5.0, 12.0, 13.0, 20.0, 21.0]);
    }

    #[test]
    fn concat_along_last_axis() {
        let a = Tensor::from_fn(&[2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1], |i| 10.0 + i as f64);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.dims(), &[2, 3]);
        assert_eq!(c.data(), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
    }

    #[test]
    fn nct_layout_is_exact() {
        let x = t(&[1, 2], &[1.5, -2.0]);
        let mut buf = Vec::new();
        x.write_nct(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NCT1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 40);
        assert_eq!(Tensor::read_nct(&buf[..]).unwrap(), x);
    }

    #[test]
    fn nct_rejects_garbage() {
        assert!(Tensor::read_nct(&b"NCT2\x01\x00\x00\x00"[..]).is_err());
        let mut buf = Vec::new();
        t(&[3], &[1.0, 2.0, 3.0]).write_nct(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_nct(&buf[..]).is_err());
    }
}
