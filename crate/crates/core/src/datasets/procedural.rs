//! Procedural clean scenes with matching depth: a sky band over a receding
//! ground plane, plus shaded spheres standing in front of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imagecore::Image;
use crate::scattering::DepthMap;

/// Largest depth a procedural scene contains. With β ≤ 1.6 this keeps
/// `t ≥ e^{-1.36} ≈ 0.257`.
pub const MAX_DEPTH: f32 = 0.85;

struct Sphere {
    cy: f32,
    cx: f32,
    r: f32,
    depth: f32,
    color: [f32; 3],
}

/// Clean image (8-bit exact values) and depth in `[0, MAX_DEPTH]`.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> Result<(Image<f32>, DepthMap<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(0.25f32..0.5);
    let sky = [rng.random_range(0.5f32..0.8), rng.random_range(0.6f32..0.85), rng.random_range(0.75f32..0.95)];
    let ground = [rng.random_range(0.15f32..0.5), rng.random_range(0.2f32..0.55), rng.random_range(0.1f32..0.4)];
    let stripes = rng.random_range(3.0f32..12.0);
    let spheres: Vec<Sphere> = (0..rng.random_range(2..6))
        .map(|_| {
            let cy = rng.random_range(horizon..1.0);
            Sphere {
                cy,
                cx: rng.random_range(0.0f32..1.0),
                r: rng.random_range(0.06f32..0.22),
                // nearer objects sit lower in the frame
                depth: MAX_DEPTH * (1.0 - cy) * rng.random_range(0.5f32..1.0),
                color: [rng.random_range(0.05f32..0.95), rng.random_range(0.05f32..0.95), rng.random_range(0.05f32..0.95)],
            }
        })
        .collect();

    let mut rgb = vec![0f32; height * width * 3];
    let mut depth = vec![0f32; height * width];
    for y in 0..height {
        let fy = (y as f32 + 0.5) / height as f32;
        for x in 0..width {
            let fx = (x as f32 + 0.5) / width as f32;
            let (mut d, mut c) = if fy < horizon {
                let k = fy / horizon;
                (MAX_DEPTH, sky.map(|s| s * (0.85 + 0.15 * k)))
            } else {
                let k = (fy - horizon) / (1.0 - horizon);
                let tex = 0.9 + 0.1 * (stripes * (fx + 0.3 * k)).sin();
                (MAX_DEPTH * (1.0 - k), ground.map(|g| g * tex * (0.7 + 0.3 * k)))
            };
            for s in &spheres {
                let (dy, dx) = ((fy - s.cy) * height as f32 / width as f32, fx - s.cx);
                let rr = (dy * dy + dx * dx) / (s.r * s.r);
                if rr < 1.0 {
                    let z = (1.0 - rr).sqrt();
                    let sd = (s.depth - 0.5 * s.r * z).max(0.0);
                    if sd < d {
                        d = sd;
                        let shade = 0.35 + 0.65 * (0.6 * z + 0.4 * (-dx - dy) / s.r).clamp(0.0, 1.0);
                        c = s.color.map(|v| v * shade);
                    }
                }
            }
            depth[y * width + x] = d.clamp(0.0, MAX_DEPTH);
            for ch in 0..3 {
                rgb[(y * width + x) * 3 + ch] = (c[ch].clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Ok((Image::new(height, width, 3, rgb)?, DepthMap::new(height, width, depth)?))
}
