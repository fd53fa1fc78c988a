//! Block-DCT lossy codec in the style of baseline JPEG.
//!
//! Pixels are mapped to the 8-bit level-shifted range, each 8x8 block goes
//! through an orthonormal DCT-II, coefficients are quantized with the
//! standard luminance table scaled by quality (IJG rule), then the block is
//! reconstructed. Quality 100 selects the all-ones table, which this codec
//! treats as unit quantization and leaves coefficients unrounded.

use alloc::vec;

use crate::error::{input_err, Result};
use crate::world::ImageSample;

const N: usize = 8;

#[rustfmt::skip]
const LUMINANCE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance quantization table for `quality` in `1..=100`.
pub fn quantization_table(quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut table = [0u16; 64];
    for (t, &base) in table.iter_mut().zip(LUMINANCE.iter()) {
        *t = ((base as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    table
}

fn dct_matrix() -> [[f64; N]; N] {
    let mut m = [[0.0; N]; N];
    for (k, row) in m.iter_mut().enumerate() {
        let alpha = if k == 0 { libm::sqrt(1.0 / N as f64) } else { libm::sqrt(2.0 / N as f64) };
        for (n, v) in row.iter_mut().enumerate() {
            *v = alpha * libm::cos(core::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * N) as f64);
        }
    }
    m
}

pub fn lossy_compress(x: &ImageSample, quality: u8) -> Result<ImageSample> {
    if !(1..=100).contains(&quality) {
        return Err(input_err!("quality must be in 1..=100, got {quality}"));
    }
    let table = quantization_table(quality);
    let lossless = quality == 100;
    let c = dct_matrix();
    let (h, w) = (x.shape.height, x.shape.width);
    let mut out = vec![0.0f32; x.pixels.len()];
    let mut block = [[0.0f64; N]; N];
    let mut tmp = [[0.0f64; N]; N];
    for ch in 0..x.shape.channels {
        let base = ch * h * w;
        for by in (0..h).step_by(N) {
            for bx in (0..w).step_by(N) {
                // Edge blocks replicate the last row/column.
                for (i, row) in block.iter_mut().enumerate() {
                    let y = (by + i).min(h - 1);
                    for (j, v) in row.iter_mut().enumerate() {
                        let xx = (bx + j).min(w - 1);
                        *v = x.pixels[base + y * w + xx] as f64 * 255.0 - 128.0;
                    }
                }
                // coef = C * block * C^T
                for i in 0..N {
                    for j in 0..N {
                        tmp[i][j] = (0..N).map(|k| c[i][k] * block[k][j]).sum();
                    }
                }
                for i in 0..N {
                    for j in 0..N {
                        let coef: f64 = (0..N).map(|k| tmp[i][k] * c[j][k]).sum();
                        block[i][j] = if lossless {
                            coef
                        } else {
                            let q = table[i * N + j] as f64;
                            libm::round(coef / q) * q
                        };
                    }
                }
                // block = C^T * coef * C
                for i in 0..N {
                    for j in 0..N {
                        tmp[i][j] = (0..N).map(|k| c[k][i] * block[k][j]).sum();
                    }
                }
                for i in 0..N {
                    let y = by + i;
                    if y >= h {
                        break;
                    }
                    for j in 0..N {
                        let xx = bx + j;
                        if xx >= w {
                            break;
                        }
                        let v: f64 = (0..N).map(|k| tmp[i][k] * c[k][j]).sum();
                        out[base + y * w + xx] = ((v + 128.0) / 255.0).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    Ok(x.with_pixels(out))
}
