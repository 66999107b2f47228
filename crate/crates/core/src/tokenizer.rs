//! Lossless continuous tokenizer.
//!
//! Images are cut into 2x2-pixel patches (12 channels), and every 2x2 block
//! of patches is grouped into one token (48 channels). A 32x32 image becomes
//! an 8x8 grid of 64 tokens. Channels are then standardized with statistics
//! fitted on the training split. Values are kept in `f64` so that the
//! round trip back to `f32` pixels is exact.

use serde::{Deserialize, Serialize};

use crate::error::{DreamError, Result};
use crate::synthdata::Image;

pub const PATCH: usize = 2;
pub const GROUP: usize = 2;
const PIXELS_PER_TOKEN: usize = PATCH * GROUP;

/// Per-channel standardization `(v - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub side: usize,
    pub channels: usize,
    /// Row-major `[side * side, channels]`, normalized.
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn n_tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.channels..(i + 1) * self.channels]
    }
}

pub fn grid_side_for(image_side: usize) -> Result<usize> {
    if image_side == 0 || !image_side.is_multiple_of(PIXELS_PER_TOKEN) {
        return Err(DreamError::Input(format!(
            "image side {image_side} is not divisible by {PIXELS_PER_TOKEN}"
        )));
    }
    Ok(image_side / PIXELS_PER_TOKEN)
}

pub const fn token_channels() -> usize {
    PIXELS_PER_TOKEN * PIXELS_PER_TOKEN * 3
}

/// Pixel offset `(dx, dy)` inside a token and RGB index for channel `c`.
fn channel_layout(c: usize) -> (usize, usize, usize) {
    let rgb = c % 3;
    let p = c / 3;
    let (patch_px, group_pos) = (p % 4, p / 4);
    let (py, px) = (patch_px / 2, patch_px % 2);
    let (gy, gx) = (group_pos / 2, group_pos % 2);
    (gx * PATCH + px, gy * PATCH + py, rgb)
}

/// Raw (unnormalized) token values.
fn patchify(image: &Image) -> Result<(usize, Vec<f64>)> {
    let side = grid_side_for(image.side)?;
    let ch = token_channels();
    let mut values = vec![0.0; side * side * ch];
    for ty in 0..side {
        for tx in 0..side {
            let base = (ty * side + tx) * ch;
            for c in 0..ch {
                let (dx, dy, rgb) = channel_layout(c);
                let x = tx * PIXELS_PER_TOKEN + dx;
                let y = ty * PIXELS_PER_TOKEN + dy;
                values[base + c] = image.pixels[(y * image.side + x) * 3 + rgb] as f64;
            }
        }
    }
    Ok((side, values))
}

pub fn tokenize(image: &Image, stats: &NormStats) -> Result<LatentGrid> {
    let (side, mut values) = patchify(image)?;
    let ch = token_channels();
    if stats.channels() != ch {
        return Err(DreamError::Input(format!(
            "normalization has {} channels, tokens have {ch}",
            stats.channels()
        )));
    }
    for tok in values.chunks_mut(ch) {
        for (c, v) in tok.iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) / stats.scale[c];
        }
    }
    Ok(LatentGrid {
        side,
        channels: ch,
        values,
    })
}

pub fn detokenize(grid: &LatentGrid, stats: &NormStats) -> Result<Image> {
    if grid.channels != token_channels() || stats.channels() != grid.channels {
        return Err(DreamError::Input("channel count mismatch".into()));
    }
    let image_side = grid.side * PIXELS_PER_TOKEN;
    let mut pixels = vec![0.0f32; image_side * image_side * 3];
    for ty in 0..grid.side {
        for tx in 0..grid.side {
            let tok = grid.token(ty * grid.side + tx);
            for (c, &v) in tok.iter().enumerate() {
                let (dx, dy, rgb) = channel_layout(c);
                let x = tx * PIXELS_PER_TOKEN + dx;
                let y = ty * PIXELS_PER_TOKEN + dy;
                pixels[(y * image_side + x) * 3 + rgb] = (v * stats.scale[c] + stats.mean[c]) as f32;
            }
        }
    }
    Ok(Image {
        side: image_side,
        pixels,
    })
}

/// Per-channel mean and standard deviation over a stream of images.
pub fn fit_normalization<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<NormStats> {
    let ch = token_channels();
    let mut sum = vec![0.0; ch];
    let mut sq = vec![0.0; ch];
    let mut count = 0usize;
    for img in images {
        let (_, values) = patchify(img)?;
        for tok in values.chunks(ch) {
            for (c, &v) in tok.iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(DreamError::Input("cannot fit normalization on no images".into()));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    Ok(NormStats { mean, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(side: usize, seed: u64) -> Image {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image {
            side,
            pixels: (0..side * side * 3).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
        }
    }

    fn some_stats(seed: u64) -> NormStats {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        NormStats {
            mean: (0..48).map(|_| r.gen_range(-0.5..0.5)).collect(),
            scale: (0..48).map(|_| r.gen_range(0.2..2.0)).collect(),
        }
    }

    #[test]
    fn grid_shape_for_32_pixels() {
        let img = random_image(32, 1);
        let g = tokenize(&img, &NormStats::identity(48)).unwrap();
        assert_eq!((g.side, g.channels, g.n_tokens()), (8, 48, 64));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..5 {
            let img = random_image(32, seed);
            let stats = some_stats(seed);
            let g = tokenize(&img, &stats).unwrap();
            assert_eq!(detokenize(&g, &stats).unwrap(), img);
        }
    }

    #[test]
    fn constant_image_gives_constant_tokens() {
        let img = Image::filled(16, [0.25, 0.25, 0.25]);
        let stats = some_stats(9);
        let g = tokenize(&img, &stats).unwrap();
        let first = g.token(0).to_vec();
        for i in 0..g.n_tokens() {
            assert_eq!(g.token(i), &first[..]);
        }
        for (c, v) in first.iter().enumerate() {
            assert_eq!(*v, (0.25 - stats.mean[c]) / stats.scale[c]);
        }
    }

    #[test]
    fn indivisible_sizes_rejected() {
        let img = Image::filled(6, [0.0; 3]);
        assert!(tokenize(&img, &NormStats::identity(48)).is_err());
    }

    #[test]
    fn every_pixel_lands_in_exactly_one_channel() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..48 {
            assert!(seen.insert(channel_layout(c)));
        }
    }
}
