//! Generated datasets: clustered capsule layers and MNIST-like stroke digits.

use crate::capsule::CapsuleLayer;
use crate::conv::Image;
use crate::numerics::Rng;

/// Capsule layers drawn around two orthogonal prototypes.
///
/// Prototype A puts unit vector `e_{i mod d}` (times 2) in capsule `i`;
/// prototype B uses `e_{(i + d/2) mod d}`, so the two are orthogonal
/// capsule by capsule. Samples alternate between them, get `N(0, noise²)`
/// per component, and are squashed. `dim` must be at least 2.
pub fn two_prototype_dataset(
    n: usize,
    n_capsules: usize,
    dim: usize,
    noise: f64,
    rng: &mut Rng,
) -> Vec<CapsuleLayer> {
    assert!(dim >= 2, "prototypes need at least two dimensions");
    (0..n)
        .map(|s| {
            let shift = if s % 2 == 0 { 0 } else { dim / 2 };
            let mut data = vec![0.0; n_capsules * dim];
            for i in 0..n_capsules {
                data[i * dim + (i + shift) % dim] = 2.0;
            }
            for v in &mut data {
                *v += noise * rng.normal();
            }
            CapsuleLayer::from_flat(dim, data)
                .expect("dim is positive")
                .squashed()
        })
        .collect()
}

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Stroke {
    (0..=24)
        .map(|k| {
            let t = k as f64 / 24.0 * std::f64::consts::TAU;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Polylines for the ten digit classes in unit coordinates (y down).
fn digit_strokes(class: usize) -> Vec<Stroke> {
    let p = |pts: &[(f64, f64)]| pts.to_vec();
    match class {
        0 => vec![ellipse(0.5, 0.5, 0.2, 0.32)],
        1 => vec![p(&[(0.42, 0.25), (0.52, 0.15), (0.52, 0.85)])],
        2 => vec![p(&[
            (0.3, 0.3),
            (0.4, 0.18),
            (0.6, 0.18),
            (0.7, 0.3),
            (0.65, 0.45),
            (0.3, 0.82),
            (0.72, 0.82),
        ])],
        3 => vec![p(&[
            (0.3, 0.2),
            (0.65, 0.2),
            (0.48, 0.47),
            (0.7, 0.62),
            (0.62, 0.8),
            (0.3, 0.8),
        ])],
        4 => vec![p(&[(0.62, 0.85), (0.62, 0.15), (0.28, 0.6), (0.75, 0.6)])],
        5 => vec![p(&[
            (0.7, 0.18),
            (0.35, 0.18),
            (0.32, 0.47),
            (0.6, 0.45),
            (0.7, 0.62),
            (0.6, 0.8),
            (0.3, 0.8),
        ])],
        6 => vec![p(&[
            (0.65, 0.18),
            (0.4, 0.4),
            (0.32, 0.65),
            (0.45, 0.82),
            (0.62, 0.75),
            (0.62, 0.58),
            (0.45, 0.52),
            (0.33, 0.62),
        ])],
        7 => vec![p(&[(0.28, 0.2), (0.72, 0.2), (0.45, 0.85)])],
        8 => vec![
            ellipse(0.5, 0.32, 0.16, 0.15),
            ellipse(0.5, 0.66, 0.19, 0.18),
        ],
        _ => vec![p(&[
            (0.65, 0.45),
            (0.45, 0.5),
            (0.35, 0.35),
            (0.45, 0.2),
            (0.62, 0.25),
            (0.65, 0.45),
            (0.6, 0.85),
        ])],
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Greyscale `size × size` images of jittered stroke digits, classes cycling 0–9.
pub fn stroke_digits(n: usize, size: usize, rng: &mut Rng) -> Vec<Image> {
    (0..n)
        .map(|s| {
            let strokes = digit_strokes(s % 10);
            let angle = (rng.uniform() - 0.5) * 0.5;
            let scale = 0.85 + 0.25 * rng.uniform();
            let (sx, sy) = ((rng.uniform() - 0.5) * 0.12, (rng.uniform() - 0.5) * 0.12);
            let thickness = (0.9 + 1.1 * rng.uniform()) * size as f64 / 28.0;
            let (sin, cos) = angle.sin_cos();
            let px_of = |(x, y): (f64, f64)| {
                let (u, v) = (x - 0.5, y - 0.5);
                let (u, v) = (scale * (cos * u - sin * v), scale * (sin * u + cos * v));
                ((u + 0.5 + sx) * size as f64, (v + 0.5 + sy) * size as f64)
            };
            let segments: Vec<((f64, f64), (f64, f64))> = strokes
                .iter()
                .flat_map(|st| {
                    st.windows(2)
                        .map(|w| (px_of(w[0]), px_of(w[1])))
                        .collect::<Vec<_>>()
                })
                .collect();
            let mut pixels = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let d = segments
                        .iter()
                        .map(|&(a, b)| segment_distance(cx, cy, a, b))
                        .fold(f64::INFINITY, f64::min);
                    pixels[y * size + x] = (thickness + 0.5 - d).clamp(0.0, 1.0);
                }
            }
            Image::new(size, size, 1, pixels).expect("pixels clamped to [0, 1]")
        })
        .collect()
}
