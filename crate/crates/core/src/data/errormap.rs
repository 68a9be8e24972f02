use std::path::Path;

use super::netpbm::{encode_pgm8, Gray8, Image};
use crate::error::{invalid, io_err, Result};

/// `|pred - gt|` scaled so the 99th percentile of masked errors maps to 255;
/// pixels outside the mask are black.
pub fn error_map(pred: &[f32], gt: &[f32], mask: &[bool], width: usize, height: usize) -> Result<Gray8> {
    let n = width * height;
    if pred.len() != n || gt.len() != n || mask.len() != n {
        return Err(invalid("write_error_map", format!("inputs must all have {width}x{height} pixels")));
    }
    let err: Vec<f64> = (0..n).map(|k| (pred[k] as f64 - gt[k] as f64).abs()).collect();
    let mut masked: Vec<f64> = (0..n).filter(|&k| mask[k]).map(|k| err[k]).collect();
    masked.sort_by(f64::total_cmp);
    let top = match masked.len() {
        0 => 0.0,
        m => masked[((0.99 * m as f64).ceil() as usize).clamp(1, m) - 1],
    };
    let data = (0..n)
        .map(|k| {
            if !mask[k] || top <= 0.0 {
                0
            } else {
                (255.0 * err[k] / top).round().min(255.0) as u8
            }
        })
        .collect();
    Ok(Image::new(width, height, data))
}

pub fn write_error_map(path: &Path, pred: &[f32], gt: &[f32], mask: &[bool], width: usize, height: usize) -> Result<()> {
    let img = error_map(pred, gt, mask, width, height)?;
    std::fs::write(path, encode_pgm8(&img)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_prediction_is_black() {
        let g = [1.0f32, 2.0, 3.0, 4.0];
        let m = error_map(&g, &g, &[true; 4], 2, 2).unwrap();
        assert!(m.data.iter().all(|&v| v == 0));
        assert!(encode_pgm8(&m).starts_with(b"P5 2 2 255\n"));
    }

    #[test]
    fn max_error_saturates() {
        let p = [1.0f32, 1.5, 1.0, 9.0];
        let g = [1.0f32; 4];
        let m = error_map(&p, &g, &[true, true, true, false], 2, 2).unwrap();
        assert_eq!(m.data, vec![0, 255, 0, 0]);
    }
}
