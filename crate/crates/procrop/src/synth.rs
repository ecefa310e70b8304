//! Deterministic synthetic "well-composed" source images for benchmarks,
//! examples, and tests: gradient backgrounds with a horizon, subjects at
//! rule-of-thirds points, vertical elements, and diagonal lines. Not art,
//! but enough oriented structure for composition retrieval to latch onto.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Archetype {
    RuleOfThirds,
    Horizon,
    Vertical,
    Diagonal,
    Center,
}

const ARCHETYPES: [Archetype; 5] = [
    Archetype::RuleOfThirds,
    Archetype::Horizon,
    Archetype::Vertical,
    Archetype::Diagonal,
    Archetype::Center,
];

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (f64::from(a) + t * (f64::from(b) - f64::from(a))).round() as u8
}

fn fill_gradient(img: &mut RgbImage, top: [u8; 3], bottom: [u8; 3], horizon: f64) {
    let h = img.height();
    for y in 0..h {
        let fy = f64::from(y) / f64::from(h);
        let t = if fy < horizon { fy / horizon * 0.5 } else { 0.5 + (fy - horizon) / (1.0 - horizon) * 0.5 };
        let c = [
            lerp(top[0], bottom[0], t),
            lerp(top[1], bottom[1], t),
            lerp(top[2], bottom[2], t),
        ];
        for x in 0..img.width() {
            img.put_pixel(x, y, Rgb(c));
        }
    }
    // Hard horizon line.
    let hy = (horizon * f64::from(h)) as u32;
    for x in 0..img.width() {
        for dy in 0..2u32 {
            let y = (hy + dy).min(h - 1);
            img.put_pixel(x, y, Rgb([bottom[0] / 2, bottom[1] / 2, bottom[2] / 2]));
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, c: [u8; 3]) {
    for y in y0.max(0)..(y0 + h).min(i64::from(img.height())) {
        for x in x0.max(0)..(x0 + w).min(i64::from(img.width())) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

fn fill_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, c: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in ((cy - r) as i64).max(0)..((cy + r) as i64 + 1).min(h) {
        for x in ((cx - r) as i64).max(0)..((cx + r) as i64 + 1).min(w) {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r * r {
                img.put_pixel(x as u32, y as u32, Rgb(c));
            }
        }
    }
}

fn draw_diagonal(img: &mut RgbImage, rising: bool, thickness: f64, c: [u8; 3]) {
    let (w, h) = (f64::from(img.width()), f64::from(img.height()));
    for y in 0..img.height() {
        for x in 0..img.width() {
            let fx = f64::from(x) / w;
            let fy = f64::from(y) / h;
            let d = if rising { fx + fy - 1.0 } else { fx - fy };
            if d.abs() < thickness {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    }
}

fn palette(rng: &mut ChaCha8Rng) -> ([u8; 3], [u8; 3], [u8; 3]) {
    let skies = [[120u8, 170, 220], [200, 160, 120], [90, 110, 160], [170, 190, 210]];
    let grounds = [[60u8, 110, 60], [130, 110, 70], [60, 70, 90], [110, 120, 100]];
    let subjects = [[235u8, 220, 90], [220, 80, 60], [240, 240, 240], [40, 40, 60]];
    (
        skies[rng.gen_range(0..skies.len())],
        grounds[rng.gen_range(0..grounds.len())],
        subjects[rng.gen_range(0..subjects.len())],
    )
}

/// One synthetic source image, a pure function of the seed.
pub fn synth_source(seed: u64) -> RgbImage {
    let mut rng = derive_rng(seed, "synth-source");
    let w = rng.gen_range(128..=192u32);
    let h = rng.gen_range(128..=192u32);
    let mut img = RgbImage::new(w, h);
    let (sky, ground, subject) = palette(&mut rng);
    let kind = ARCHETYPES[rng.gen_range(0..ARCHETYPES.len())];

    let thirds = [1.0 / 3.0, 2.0 / 3.0];
    let horizon = match kind {
        Archetype::Horizon | Archetype::RuleOfThirds | Archetype::Diagonal => {
            thirds[rng.gen_range(0..2)]
        }
        _ => rng.gen_range(0.40..0.60),
    };
    fill_gradient(&mut img, sky, ground, horizon);

    match kind {
        Archetype::RuleOfThirds => {
            let cx = thirds[rng.gen_range(0..2)] * f64::from(w);
            let cy = thirds[rng.gen_range(0..2)] * f64::from(h);
            let r = rng.gen_range(0.08..0.14) * f64::from(w.min(h));
            fill_disc(&mut img, cx, cy, r, subject);
        }
        Archetype::Horizon => {
            let cx = rng.gen_range(0.2..0.8) * f64::from(w);
            let r = rng.gen_range(0.05..0.09) * f64::from(w.min(h));
            fill_disc(&mut img, cx, horizon * f64::from(h) * 0.55, r, subject);
        }
        Archetype::Vertical => {
            let n = rng.gen_range(2..5);
            for _ in 0..n {
                let x = rng.gen_range(0.1..0.9) * f64::from(w);
                let tw = rng.gen_range(0.02..0.05) * f64::from(w);
                fill_rect(
                    &mut img,
                    x as i64,
                    (0.15 * f64::from(h)) as i64,
                    tw as i64 + 1,
                    (0.7 * f64::from(h)) as i64,
                    subject,
                );
            }
        }
        Archetype::Diagonal => {
            draw_diagonal(&mut img, rng.gen_bool(0.5), rng.gen_range(0.015..0.04), subject);
        }
        Archetype::Center => {
            let r = rng.gen_range(0.12..0.2) * f64::from(w.min(h));
            fill_disc(&mut img, f64::from(w) / 2.0, f64::from(h) / 2.0, r, subject);
            let ring = [subject[0] / 2, subject[1] / 2, subject[2] / 2];
            fill_disc(&mut img, f64::from(w) / 2.0, f64::from(h) / 2.0, r * 0.6, ring);
        }
    }
    img
}

/// A batch of sources with per-image seeds derived from `seed`.
pub fn synth_sources(n: usize, seed: u64) -> Vec<RgbImage> {
    crate::par::map_range(n, |i| synth_source(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_are_deterministic_and_sized() {
        let a = synth_source(5);
        let b = synth_source(5);
        assert_eq!(a.as_raw(), b.as_raw());
        assert!(a.width() >= 128 && a.width() <= 192);
        let c = synth_source(6);
        assert_ne!(a.as_raw(), c.as_raw());
    }

    #[test]
    fn batch_generation_matches_singles() {
        let batch = synth_sources(4, 9);
        assert_eq!(batch.len(), 4);
        for (i, img) in batch.iter().enumerate() {
            let single = synth_source(9u64.wrapping_mul(1_000_003).wrapping_add(i as u64));
            assert_eq!(img.as_raw(), single.as_raw());
        }
    }
}
