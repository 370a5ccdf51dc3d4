//! 8-bit binary PGM (`P5`) dumps of single feature planes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Min-max normalizes a plane to `0..=255`. A constant plane maps to
/// mid-gray (128).
pub fn normalize_plane(plane: &[f64]) -> Vec<u8> {
    let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![128; plane.len()];
    }
    plane
        .iter()
        .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
        .collect()
}

pub fn encode_pgm(plane: &[f64], height: usize, width: usize) -> Vec<u8> {
    debug_assert_eq!(plane.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(normalize_plane(plane));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, plane: &[f64], height: usize, width: usize) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(plane, height, width)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_scaling() {
        let b = encode_pgm(&[0.0, 1.0, 0.5, 1.0], 2, 2);
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 255, 128, 255]);
    }

    #[test]
    fn constant_plane_is_mid_gray() {
        assert_eq!(normalize_plane(&[3.0; 4]), vec![128; 4]);
        assert_eq!(normalize_plane(&[0.0]), vec![128]);
    }
}
