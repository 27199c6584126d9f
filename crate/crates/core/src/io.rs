//! Binary PPM (P6) output.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Encode `[C, H, W]` values in `[0, 1]` as P6. One channel is written as
/// grey; with three or more channels the first three are used as RGB.
pub fn ppm_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let d = img.dims();
    if d.len() != 3 || d[0] == 2 {
        return Err(shape_err!("PPM needs [1 | 3+, H, W], got {d:?}"));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for r in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let ch = if c == 1 { 0 } else { k };
                out.push(to_byte(img.data()[(ch * h + r) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, ppm_bytes(img)?)?;
    Ok(())
}

/// Lay out a `[6, C, H, W]` frame as one `[C, H, 6·W]` strip.
pub fn view_strip(frame: &Tensor) -> Result<Tensor> {
    let views = (0..frame.dims()[0]).map(|m| frame.select(0, m)).collect::<Result<Vec<_>>>()?;
    Tensor::concat(&views, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grey_ppm_layout() {
        let img = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let b = ppm_bytes(&img).unwrap();
        assert!(b.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn strip_concatenates_views() {
        let f = Tensor::from_fn(&[6, 1, 2, 3], |i| i as f64);
        let s = view_strip(&f).unwrap();
        assert_eq!(s.dims(), &[1, 2, 18]);
        assert_eq!(s.data()[3], 6.0);
    }
}
