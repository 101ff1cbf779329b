//! Procedural test scenes.
//!
//! Each scene is a graded backdrop, a textured ground band and a handful of
//! objects (ellipses, rectangles, triangles) that are flat, softly shaded,
//! fractal-textured or patterned. Values stay inside `[0.02, 0.98]` so that
//! moderate noise rarely clips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_io::{ColorImage, ImagePlane};
use crate::tensor::init::name_seed;

/// Lattice value noise with smoothstep interpolation, summed over octaves.
struct Fractal {
    grids: Vec<(usize, Vec<f64>)>,
    gain: f64,
}

impl Fractal {
    fn new(rng: &mut impl Rng, base_cells: usize, octaves: usize, gain: f64) -> Self {
        let grids = (0..octaves)
            .map(|o| {
                let cells = base_cells << o;
                let n = (cells + 1) * (cells + 1);
                (cells, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            })
            .collect();
        Self { grids, gain }
    }

    /// Roughly in `[-1, 1]` for `u, v` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let mut total = 0.0;
        let mut amp = 1.0;
        let mut norm = 0.0;
        for (cells, g) in &self.grids {
            let (x, y) = (u * *cells as f64, v * *cells as f64);
            let (xi, yi) = ((x.floor() as usize).min(cells - 1), (y.floor() as usize).min(cells - 1));
            let (fx, fy) = (x - xi as f64, y - yi as f64);
            let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
            let at = |i: usize, j: usize| g[j * (cells + 1) + i];
            let top = at(xi, yi) * (1.0 - sx) + at(xi + 1, yi) * sx;
            let bot = at(xi, yi + 1) * (1.0 - sx) + at(xi + 1, yi + 1) * sx;
            total += amp * (top * (1.0 - sy) + bot * sy);
            norm += amp;
            amp *= self.gain;
        }
        total / norm
    }
}

enum Fill {
    Flat,
    Shaded { gx: f64, gy: f64 },
    Textured { noise: Fractal, amp: f64 },
    Stripes { freq: f64, angle: f64, amp: f64 },
    Checker { period: f64, amp: f64 },
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, rot: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, rot } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (rot.cos(), rot.sin());
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { p } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

struct Object {
    shape: Shape,
    color: [f64; 3],
    fill: Fill,
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    let base: f64 = rng.random_range(0.1..0.9);
    [0, 1, 2].map(|_| (base + rng.random_range(-0.15..0.15)).clamp(0.05, 0.95))
}

fn random_object(rng: &mut impl Rng) -> Object {
    let (cx, cy) = (rng.random::<f64>(), rng.random::<f64>());
    let size = rng.random_range(0.08..0.3);
    let shape = match rng.random_range(0..3) {
        0 => Shape::Ellipse {
            cx,
            cy,
            rx: size,
            ry: size * rng.random_range(0.4..1.0),
            rot: rng.random_range(0.0..std::f64::consts::PI),
        },
        1 => Shape::Rect {
            x0: cx - size,
            y0: cy - size * 0.7,
            x1: cx + size,
            y1: cy + size * 0.7,
        },
        _ => Shape::Triangle {
            p: [0, 1, 2].map(|_| (cx + rng.random_range(-size..size), cy + rng.random_range(-size..size))),
        },
    };
    let fill = match rng.random_range(0..10) {
        0..=2 => Fill::Flat,
        3..=5 => Fill::Shaded {
            gx: rng.random_range(-0.3..0.3),
            gy: rng.random_range(-0.3..0.3),
        },
        6..=7 => Fill::Textured {
            noise: Fractal::new(rng, 8, 4, 0.6),
            amp: rng.random_range(0.05..0.2),
        },
        8 => Fill::Stripes {
            freq: rng.random_range(20.0..80.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            amp: rng.random_range(0.05..0.2),
        },
        _ => Fill::Checker {
            period: rng.random_range(0.01..0.04),
            amp: rng.random_range(0.05..0.15),
        },
    };
    Object { shape, color: color(rng), fill }
}

/// One `width x height` colour scene, a pure function of `seed`.
pub fn scene(seed: u64, width: usize, height: usize) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, "scene"));
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let haze = Fractal::new(&mut rng, 2, 2, 0.5);
    let horizon = rng.random_range(0.45..0.8);
    let ground = color(&mut rng);
    let ground_tex = Fractal::new(&mut rng, 6, 5, 0.65);
    let ground_amp = rng.random_range(0.08..0.2);
    let objects: Vec<Object> = (0..rng.random_range(5..12)).map(|_| random_object(&mut rng)).collect();

    let mut planes = [0, 1, 2].map(|_| ImagePlane::filled(width, height, 0.0));
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let mut px = [0.0; 3];
            if v < horizon {
                let t = v / horizon;
                let h = 0.03 * haze.at(u, v);
                for c in 0..3 {
                    px[c] = top[c] * (1.0 - t) + bottom[c] * t + h;
                }
            } else {
                let n = ground_amp * ground_tex.at(u, v);
                for c in 0..3 {
                    px[c] = ground[c] + n;
                }
            }
            for o in &objects {
                if !o.shape.contains(u, v) {
                    continue;
                }
                let d = match &o.fill {
                    Fill::Flat => 0.0,
                    Fill::Shaded { gx, gy } => gx * (u - 0.5) + gy * (v - 0.5),
                    Fill::Textured { noise, amp } => amp * noise.at(u, v),
                    Fill::Stripes { freq, angle, amp } => {
                        amp * (freq * (u * angle.cos() + v * angle.sin())).sin()
                    }
                    Fill::Checker { period, amp } => {
                        let k = ((u / period).floor() + (v / period).floor()) as i64;
                        if k % 2 == 0 { *amp } else { -*amp }
                    }
                };
                for c in 0..3 {
                    px[c] = o.color[c] + d;
                }
            }
            for c in 0..3 {
                planes[c].set(x, y, px[c].clamp(0.02, 0.98));
            }
        }
    }
    let [r, g, b] = planes;
    ColorImage::from_planes(r, g, b).unwrap()
}

/// `count` scenes with seeds derived from `seed`.
pub fn suite(count: usize, width: usize, height: usize, seed: u64) -> Vec<ColorImage> {
    let seeds: Vec<u64> = (0..count).map(|i| name_seed(seed, &format!("suite/{i}"))).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| scene(s, width, height)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    seeds.iter().map(|&s| scene(s, width, height)).collect()
}

/// Luma planes of [`suite`].
pub fn gray_suite(count: usize, width: usize, height: usize, seed: u64) -> Vec<ImagePlane> {
    suite(count, width, height, seed).iter().map(ColorImage::luma).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = scene(3, 64, 48);
        assert_eq!(a, scene(3, 64, 48));
        assert_ne!(a, scene(4, 64, 48));
        for p in &a.channels {
            assert!(p.data.iter().all(|&v| (0.02..=0.98).contains(&v)));
        }
    }

    #[test]
    fn scenes_mix_flat_and_busy_patches() {
        use crate::image_io::partition_patches;
        use crate::lonpe::patch_stats;
        let mut flat = 0;
        let mut total = 0;
        for img in gray_suite(4, 256, 256, 1) {
            for p in partition_patches(&img, 16).unwrap() {
                total += 1;
                if patch_stats(&p).unwrap().variance < 1e-5 {
                    flat += 1;
                }
            }
        }
        let frac = flat as f64 / total as f64;
        assert!(frac > 0.02 && frac < 0.9, "flat fraction {frac}");
    }
}
