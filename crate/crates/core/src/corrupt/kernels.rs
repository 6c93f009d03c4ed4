//! Per-kind corruption kernels. Every kernel maps one NHWC image slice
//! (values in `[0,1]`) to a new buffer; the caller clamps and reassembles.
//! Randomized kernels draw only from the RNG they are handed, so results
//! are order-independent across images.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

pub(crate) fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn idx(w: usize, y: usize, x: usize, c: usize) -> usize {
    (y * w + x) * 3 + c
}

/// Bilinear sample with clamp-to-edge coordinates.
fn sample(img: &[f64], h: usize, w: usize, y: f64, x: f64, c: usize) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let v00 = img[idx(w, y0, x0, c)];
    let v01 = img[idx(w, y0, x1, c)];
    let v10 = img[idx(w, y1, x0, c)];
    let v11 = img[idx(w, y1, x1, c)];
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// 2-D convolution per channel with clamp-to-edge padding.
fn convolve(img: &[f64], h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let (oy, ox) = (kh as isize / 2, kw as isize / 2);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let sy = (y as isize + ky as isize - oy).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize + kx as isize - ox).clamp(0, w as isize - 1) as usize;
                        acc += kernel[ky * kw + kx] * img[idx(w, sy, sx, c)];
                    }
                }
                out[idx(w, y, x, c)] = acc;
            }
        }
    }
    out
}

fn disk_kernel(radius: f64) -> (Vec<f64>, usize) {
    let r = radius.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut k = vec![0.0; size * size];
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy * dy + dx * dx) as f64 <= radius * radius {
                k[((dy + r) as usize) * size + (dx + r) as usize] = 1.0;
                total += 1.0;
            }
        }
    }
    for v in k.iter_mut() {
        *v /= total;
    }
    (k, size)
}

pub fn gaussian_noise(img: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    img.iter().map(|v| clamp01(v + normal.sample(rng))).collect()
}

/// Scaled Poisson resampling: `x' = Poisson(x * lambda) / lambda`.
pub fn shot_noise(img: &[f64], lambda: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    img.iter()
        .map(|&v| {
            if v <= 0.0 {
                return 0.0;
            }
            let pois = Poisson::new(v * lambda).expect("positive rate");
            clamp01(pois.sample(rng) / lambda)
        })
        .collect()
}

/// Salt-and-pepper per pixel position at rate `p`.
pub fn impulse_noise(img: &[f64], h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = img.to_vec();
    for y in 0..h {
        for x in 0..w {
            let roll = rng.random::<f64>();
            if roll < p {
                let v = if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 };
                for c in 0..3 {
                    out[idx(w, y, x, c)] = v;
                }
            }
        }
    }
    out
}

pub fn defocus_blur(img: &[f64], h: usize, w: usize, radius: f64) -> Vec<f64> {
    let (k, size) = disk_kernel(radius);
    convolve(img, h, w, &k, size, size).into_iter().map(clamp01).collect()
}

/// Local pixel swaps within `max_shift`, repeated `iters` times in scan
/// order.
pub fn glass_blur(
    img: &[f64],
    h: usize,
    w: usize,
    max_shift: f64,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out = img.to_vec();
    let r = max_shift.round() as i64;
    for _ in 0..iters {
        for y in 0..h {
            for x in 0..w {
                let dy = rng.random_range(-r..=r) as isize;
                let dx = rng.random_range(-r..=r) as isize;
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                for c in 0..3 {
                    out.swap(idx(w, y, x, c), idx(w, sy, sx, c));
                }
            }
        }
    }
    out
}

/// Oriented line-kernel convolution; the angle is drawn per image.
pub fn motion_blur(img: &[f64], h: usize, w: usize, length: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let angle = rng.random::<f64>() * std::f64::consts::PI;
    let half = length / 2.0;
    let r = half.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut k = vec![0.0; size * size];
    let mut t = -half;
    while t <= half {
        let dy = (t * angle.sin()).round() as isize + r;
        let dx = (t * angle.cos()).round() as isize + r;
        k[dy as usize * size + dx as usize] += 1.0;
        t += 0.25;
    }
    let total: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= total;
    }
    convolve(img, h, w, &k, size, size).into_iter().map(clamp01).collect()
}

/// Mean over the original and `steps` progressively center-zoomed copies.
pub fn zoom_blur(img: &[f64], h: usize, w: usize, max_zoom: f64, steps: usize) -> Vec<f64> {
    let mut acc = img.to_vec();
    for s in 1..=steps {
        let z = 1.0 + (max_zoom - 1.0) * s as f64 / steps as f64;
        for y in 0..h {
            for x in 0..w {
                // source coordinates of the center crop, scaled back up
                let sy = (y as f64 - h as f64 / 2.0) / z + h as f64 / 2.0;
                let sx = (x as f64 - w as f64 / 2.0) / z + w as f64 / 2.0;
                for c in 0..3 {
                    acc[idx(w, y, x, c)] += sample(img, h, w, sy, sx, c);
                }
            }
        }
    }
    let n = (steps + 1) as f64;
    acc.into_iter().map(|v| clamp01(v / n)).collect()
}

/// Whitening plus additive oriented bright streaks.
pub fn snow(
    img: &[f64],
    h: usize,
    w: usize,
    amount: f64,
    whiten: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out: Vec<f64> = img.iter().map(|v| v * (1.0 - whiten) + whiten * 0.85).collect();
    let count = (amount * 24.0).round() as usize;
    let angle = -std::f64::consts::FRAC_PI_4 + (rng.random::<f64>() - 0.5) * 0.4;
    for _ in 0..count {
        let mut y = rng.random::<f64>() * h as f64;
        let mut x = rng.random::<f64>() * w as f64;
        let len = 2.0 + rng.random::<f64>() * (h as f64 / 2.0);
        let bright = 0.75 + rng.random::<f64>() * 0.25;
        let mut t = 0.0;
        while t < len {
            let yi = y.round() as isize;
            let xi = x.round() as isize;
            if yi >= 0 && yi < h as isize && xi >= 0 && xi < w as isize {
                for c in 0..3 {
                    let i = idx(w, yi as usize, xi as usize, c);
                    out[i] = out[i].max(bright);
                }
            }
            y += angle.sin();
            x += angle.cos();
            t += 1.0;
        }
    }
    out.into_iter().map(clamp01).collect()
}

/// Crystalline mask from Voronoi cell boundaries, blended toward an icy
/// white-blue.
pub fn frost(
    img: &[f64],
    h: usize,
    w: usize,
    blend: f64,
    points: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = (0..points)
        .map(|_| (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64))
        .collect();
    let frost_color = [0.8, 0.9, 1.0];
    let mut out = img.to_vec();
    for y in 0..h {
        for x in 0..w {
            let mut d1 = f64::MAX;
            let mut d2 = f64::MAX;
            for &(py, px) in &pts {
                let d = ((y as f64 - py).powi(2) + (x as f64 - px).powi(2)).sqrt();
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                } else if d < d2 {
                    d2 = d;
                }
            }
            // bright near cell boundaries
            let m = (1.0 - (d2 - d1) / 3.0).clamp(0.0, 1.0);
            let a = blend * m;
            for c in 0..3 {
                let i = idx(w, y, x, c);
                out[i] = clamp01(out[i] * (1.0 - a) + a * frost_color[c]);
            }
        }
    }
    out
}

/// Additive low-frequency value-noise field from a bilinearly upsampled
/// coarse grid.
pub fn fog(img: &[f64], h: usize, w: usize, strength: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = 4usize;
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
    let mut out = img.to_vec();
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / h as f64 * cells as f64;
            let gx = x as f64 / w as f64 * cells as f64;
            let y0 = gy.floor() as usize;
            let x0 = gx.floor() as usize;
            let fy = gy - y0 as f64;
            let fx = gx - x0 as f64;
            let at = |yy: usize, xx: usize| grid[yy.min(cells) * (cells + 1) + xx.min(cells)];
            let field = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
            for c in 0..3 {
                let i = idx(w, y, x, c);
                out[i] = clamp01(out[i] + strength * field);
            }
        }
    }
    out
}

pub fn brightness(img: &[f64], shift: f64) -> Vec<f64> {
    img.iter().map(|v| clamp01(v + shift)).collect()
}

/// `(x - mean) * factor + mean` with the per-image mean.
pub fn contrast(img: &[f64], factor: f64) -> Vec<f64> {
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    img.iter().map(|v| clamp01((v - mean) * factor + mean)).collect()
}

/// Bilinear warp by a box-smoothed random displacement field scaled to
/// `alpha` pixels.
pub fn elastic(img: &[f64], h: usize, w: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = h * w;
    let mut fy: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut fx: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    for _ in 0..3 {
        fy = box_blur_field(&fy, h, w);
        fx = box_blur_field(&fx, h, w);
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + fy[y * w + x] * alpha;
            let sx = x as f64 + fx[y * w + x] * alpha;
            for c in 0..3 {
                out[idx(w, y, x, c)] = sample(img, h, w, sy, sx, c);
            }
        }
    }
    out
}

fn box_blur_field(f: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let sy = y as isize + dy;
                    let sx = x as isize + dx;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        acc += f[sy as usize * w + sx as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[y * w + x] = acc / cnt;
        }
    }
    out
}

/// Box-downsample to `target` pixels per side, then nearest-neighbor
/// upsample.
pub fn pixelate(img: &[f64], h: usize, w: usize, fraction: f64) -> Vec<f64> {
    let th = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let tw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    let mut small = vec![0.0; th * tw * 3];
    for ty in 0..th {
        let y0 = ty * h / th;
        let y1 = ((ty + 1) * h).div_ceil(th).min(h);
        for tx in 0..tw {
            let x0 = tx * w / tw;
            let x1 = ((tx + 1) * w).div_ceil(tw).min(w);
            for c in 0..3 {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img[idx(w, y, x, c)];
                    }
                }
                small[(ty * tw + tx) * 3 + c] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        let ty = y * th / h;
        for x in 0..w {
            let tx = x * tw / w;
            for c in 0..3 {
                out[idx(w, y, x, c)] = small[(ty * tw + tx) * 3 + c];
            }
        }
    }
    out
}

// Standard JPEG luminance quantization table, applied per channel.
const QUANT_BASE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for i in 0..64 {
        out[i] = ((QUANT_BASE[i] * scale + 50.0) / 100.0).floor().max(1.0);
    }
    out
}

fn dct_basis() -> [f64; 64] {
    let mut c = [0.0; 64];
    for u in 0..8 {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for y in 0..8 {
            c[u * 8 + y] = a * ((2.0 * y as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Per-channel 8x8 block DCT, quantization with a quality-scaled table,
/// and inverse DCT. Edges are replicated to a block multiple and cropped
/// back.
pub fn jpeg(img: &[f64], h: usize, w: usize, quality: f64) -> Vec<f64> {
    let table = quant_table(quality);
    let c = dct_basis();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let mut out = img.to_vec();
    for ch in 0..3 {
        // padded channel plane, centered at 0
        let mut plane = vec![0.0; ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                plane[y * pw + x] = img[idx(w, y.min(h - 1), x.min(w - 1), ch)] * 255.0 - 128.0;
            }
        }
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = plane[(by + y) * pw + bx + x];
                    }
                }
                // F = C X C^T
                let mut tmp = [0.0; 64];
                for u in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            acc += c[u * 8 + y] * block[y * 8 + x];
                        }
                        tmp[u * 8 + x] = acc;
                    }
                }
                let mut freq = [0.0; 64];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for x in 0..8 {
                            acc += tmp[u * 8 + x] * c[v * 8 + x];
                        }
                        freq[u * 8 + v] = acc;
                    }
                }
                for i in 0..64 {
                    freq[i] = (freq[i] / table[i]).round() * table[i];
                }
                // X = C^T F C
                for y in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for u in 0..8 {
                            acc += c[u * 8 + y] * freq[u * 8 + v];
                        }
                        tmp[y * 8 + v] = acc;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for v in 0..8 {
                            acc += tmp[y * 8 + v] * c[v * 8 + x];
                        }
                        plane[(by + y) * pw + bx + x] = acc;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[idx(w, y, x, ch)] = clamp01((plane[y * pw + x] + 128.0) / 255.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dct_round_trips_without_quantization() {
        // quality 100 -> table of ones -> near-exact reconstruction
        let img: Vec<f64> = (0..8 * 8 * 3).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let out = jpeg(&img, 8, 8, 100.0);
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 2.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn pixelate_quarter_makes_constant_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random::<f64>()).collect();
        let out = pixelate(&img, 16, 16, 0.25);
        for by in 0..4 {
            for bx in 0..4 {
                for c in 0..3 {
                    let v = out[((by * 4) * 16 + bx * 4) * 3 + c];
                    for dy in 0..4 {
                        for dx in 0..4 {
                            assert_eq!(out[((by * 4 + dy) * 16 + bx * 4 + dx) * 3 + c], v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn contrast_preserves_mean() {
        let img: Vec<f64> = (0..48).map(|i| i as f64 / 48.0).collect();
        let mean = img.iter().sum::<f64>() / 48.0;
        let out = contrast(&img, 0.5);
        let out_mean = out.iter().sum::<f64>() / 48.0;
        assert!((mean - out_mean).abs() < 1e-9);
    }
}
