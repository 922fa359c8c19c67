use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary greyscale image from row-major values in `[0, 1]`.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height, "pgm extents");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary colour image from three row-major planes in `[0, 1]`.
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, planes: [&[f64]; 3]) -> Result<()> {
    let n = width * height;
    assert!(planes.iter().all(|p| p.len() == n), "ppm extents");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..n {
        out.extend(planes.iter().map(|p| quantize(p[i])));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes frame `frame` of a `C×L×H×W` example: PPM for three channels,
/// otherwise PGM of the first channel.
pub fn write_frame<T: Real>(path: impl AsRef<Path>, pixels: &Tensor<T>, frame: usize) -> Result<()> {
    let &[c, l, h, w] = pixels.shape() else {
        return Err(Error::shape("write_frame", format!("expected C×L×H×W, got {:?}", pixels.shape())));
    };
    if frame >= l {
        return Err(Error::shape("write_frame", format!("frame {frame} of {l}")));
    }
    let plane = |ch: usize| -> Vec<f64> {
        let off = (ch * l + frame) * h * w;
        pixels.data()[off..off + h * w].iter().map(|v| v.as_f64()).collect()
    };
    if c == 3 {
        let (r, g, b) = (plane(0), plane(1), plane(2));
        write_ppm(path, w, h, [&r, &g, &b])
    } else {
        write_pgm(path, w, h, &plane(0))
    }
}
