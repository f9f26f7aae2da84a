//! Procedural stand-ins for the three datasets, for demos and tests.
//!
//! Synthetic images are flat-shaded street-like scenes. Their enhanced
//! counterparts apply a fixed per-pixel colour transform, so the mapping is
//! learnable by a small generator in a few hundred steps. Real images are
//! independently drawn scenes with texture noise and a shifted palette.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Resolution, Split};
use crate::{util, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureLayout {
    pub synthetic: PathBuf,
    pub enhanced: PathBuf,
    pub real: PathBuf,
    pub stems: Vec<String>,
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(img.height())..y1.min(img.height()) {
        for x in x0.min(img.width())..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], spread: i32) -> Rgb<u8> {
    Rgb(base.map(|v| (v as i32 + rng.random_range(-spread..=spread)).clamp(0, 255) as u8))
}

fn draw_scene(rng: &mut ChaCha8Rng, res: Resolution, palette: &Palette) -> RgbImage {
    let (w, h) = (res.width as u32, res.height as u32);
    let mut img = RgbImage::new(w, h);
    let horizon = (h as f32 * rng.random_range(0.35..0.55)) as u32;
    let sky_top = jitter(rng, palette.sky_top, 12);
    let sky_bottom = jitter(rng, palette.sky_bottom, 12);
    for y in 0..horizon {
        let t = y as f32 / horizon.max(1) as f32;
        let c = Rgb([0, 1, 2].map(|i| (sky_top.0[i] as f32 * (1.0 - t) + sky_bottom.0[i] as f32 * t) as u8));
        fill_rect(&mut img, 0, y, w, y + 1, c);
    }
    fill_rect(&mut img, 0, horizon, w, h, jitter(rng, palette.ground, 10));
    let buildings = rng.random_range(2..6);
    for _ in 0..buildings {
        let bw = rng.random_range(w / 10..w / 3).max(2);
        let bh = rng.random_range(h / 8..h / 2).max(2);
        let x0 = rng.random_range(0..w.saturating_sub(bw).max(1));
        let c = jitter(rng, palette.building, 40);
        fill_rect(&mut img, x0, horizon.saturating_sub(bh), x0 + bw, horizon, c);
        let win = jitter(rng, palette.window, 20);
        let step = (bw / 4).max(3);
        let mut wy = horizon.saturating_sub(bh) + step / 2;
        while wy + 2 < horizon {
            let mut wx = x0 + step / 2;
            while wx + 2 < x0 + bw {
                fill_rect(&mut img, wx, wy, wx + (step / 2).max(1), wy + (step / 2).max(1), win);
                wx += step;
            }
            wy += step;
        }
    }
    let lane = jitter(rng, palette.marking, 10);
    let dash = (w / 12).max(2);
    let ly = horizon + (h - horizon) * 2 / 3;
    let mut x = rng.random_range(0..dash);
    while x < w {
        fill_rect(&mut img, x, ly, x + dash, ly + (h / 64).max(1), lane);
        x += 2 * dash;
    }
    let cars = rng.random_range(1..4);
    for _ in 0..cars {
        let cw = (w / 8).max(3);
        let ch = (h / 14).max(2);
        let cx = rng.random_range(0..w.saturating_sub(cw).max(1));
        let cy = rng.random_range(horizon..h.saturating_sub(ch).max(horizon + 1));
        fill_rect(&mut img, cx, cy, cx + cw, cy + ch, jitter(rng, palette.car, 60));
    }
    img
}

struct Palette {
    sky_top: [u8; 3],
    sky_bottom: [u8; 3],
    ground: [u8; 3],
    building: [u8; 3],
    window: [u8; 3],
    marking: [u8; 3],
    car: [u8; 3],
}

const GAME: Palette = Palette {
    sky_top: [70, 130, 230],
    sky_bottom: [170, 210, 250],
    ground: [90, 90, 95],
    building: [170, 150, 130],
    window: [60, 80, 120],
    marking: [240, 240, 240],
    car: [180, 40, 40],
};

const STREET: Palette = Palette {
    sky_top: [120, 140, 160],
    sky_bottom: [190, 195, 200],
    ground: [75, 72, 68],
    building: [140, 125, 110],
    window: [50, 55, 60],
    marking: [210, 205, 190],
    car: [90, 90, 100],
};

/// A flat-shaded synthetic scene, deterministic in `seed`.
pub fn synthetic_scene(seed: u64, res: Resolution) -> RgbImage {
    draw_scene(&mut util::rng(seed, 11), res, &GAME)
}

/// The fixed colour transform from synthetic to enhanced: desaturate,
/// warm the shadows and lower the contrast.
pub fn enhance_colours(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        let [r, g, b] = px.0.map(|v| v as f32 / 255.0);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        let mix = |c: f32| 0.6 * c + 0.4 * luma;
        let (r, g, b) = (mix(r), mix(g), mix(b));
        let r = 0.08 + 0.82 * r;
        let g = 0.06 + 0.80 * g;
        let b = 0.04 + 0.74 * b;
        px.0 = [r, g, b].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

/// A textured scene standing in for real-world imagery.
pub fn real_scene(seed: u64, res: Resolution) -> RgbImage {
    let mut rng = util::rng(seed, 13);
    let mut img = draw_scene(&mut rng, res, &STREET);
    for px in img.pixels_mut() {
        let n: i32 = rng.random_range(-14..=14);
        px.0 = px.0.map(|v| (v as i32 + n).clamp(0, 255) as u8);
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes `<root>/synthetic/<split>/`, `<root>/enhanced/<split>/` with
/// `pairs` aligned images each, and `<root>/real/` with `real` images.
pub fn write_fixture_datasets(
    root: &Path,
    split: Split,
    pairs: usize,
    real: usize,
    res: Resolution,
    seed: u64,
) -> Result<FixtureLayout> {
    let synthetic = root.join("synthetic");
    let enhanced = root.join("enhanced");
    let real_root = root.join("real");
    for dir in [synthetic.join(split.as_str()), enhanced.join(split.as_str()), real_root.clone()] {
        util::create_dir_all(&dir)?;
    }
    let mut stems = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let stem = format!("frame_{i:05}");
        let syn = synthetic_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), res);
        save(&syn, &synthetic.join(split.as_str()).join(format!("{stem}.png")))?;
        save(&enhance_colours(&syn), &enhanced.join(split.as_str()).join(format!("{stem}.png")))?;
        stems.push(stem);
    }
    for i in 0..real {
        let img = real_scene(seed.wrapping_mul(7_919).wrapping_add(i as u64), res);
        save(&img, &real_root.join(format!("real_{i:05}.png")))?;
    }
    let manifest = synthetic.join(format!("{}.txt", split.as_str()));
    fs::write(&manifest, stems.join("\n") + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(FixtureLayout {
        synthetic,
        enhanced,
        real: real_root,
        stems,
    })
}
