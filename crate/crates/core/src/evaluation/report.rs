//! Contact sheets pairing each generated grid patch (top row) with its
//! nearest real patch (bottom row), annotated with the match distance.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datasets::{denormalize, preprocess_file};
use crate::networks::Generator;
use crate::patch_index::{extract_patch_batch, PatchMatcher, PatchProvenance, PATCHES_PER_IMAGE};
use crate::{util, Error, Result};

pub const SHEET_MARGIN: u32 = 4;
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);
const INK: Rgb<u8> = Rgb([255, 255, 255]);
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// 3×5 glyphs, one row per `u8`, most significant of the low three bits on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        'd' => [0b001, 0b001, 0b111, 0b101, 0b111],
        'e' => [0b111, 0b101, 0b111, 0b100, 0b111],
        ' ' => [0; 5],
        _ => return None,
    })
}

/// Draws `text` with its top-left corner at `(x, y)`, clipped to `max_width`.
fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, max_width: u32) {
    let advance = (GLYPH_W + 1) * scale;
    for (k, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let x0 = x + k as u32 * advance;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let px = x0 + col * scale + dx;
                        let py = y + r as u32 * scale + dy;
                        if px < x + max_width && px < img.width() && py < img.height() {
                            img.put_pixel(px, py, INK);
                        }
                    }
                }
            }
        }
    }
}

pub fn distance_label(distance: f32) -> String {
    if distance != 0.0 && !(1e-2..1e6).contains(&distance.abs()) {
        format!("d={distance:.2e}")
    } else {
        format!("d={distance:.1}")
    }
}

/// Top-left pixel of the tile at `row` (0 generated, 1 real) and `col`.
pub fn tile_origin(row: u32, col: u32, patch: u32) -> (u32, u32) {
    (SHEET_MARGIN + col * (patch + SHEET_MARGIN), SHEET_MARGIN + row * (patch + SHEET_MARGIN))
}

/// Lays out generated patches above real patches, one label per column.
pub fn render_sheet(generated: &Tensor, real: &Tensor, labels: &[String]) -> Result<RgbImage> {
    let (n, _, p, _) = generated.dims4()?;
    if real.dims() != generated.dims() || labels.len() != n {
        return Err(Error::Shape(format!(
            "sheet needs matching generated {:?}, real {:?} and {} labels",
            generated.dims(),
            real.dims(),
            labels.len()
        )));
    }
    let p = p as u32;
    let scale = if p >= 96 { 2 } else { 1 };
    let label_h = GLYPH_H * scale + SHEET_MARGIN;
    let width = n as u32 * (p + SHEET_MARGIN) + SHEET_MARGIN;
    let height = 2 * (p + SHEET_MARGIN) + SHEET_MARGIN + label_h;
    let mut sheet = RgbImage::from_pixel(width, height, BACKGROUND);
    for col in 0..n {
        for (row, set) in [generated, real].into_iter().enumerate() {
            let tile = denormalize(&set.get(col)?)?;
            let (x0, y0) = tile_origin(row as u32, col as u32, p);
            for (x, y, px) in tile.enumerate_pixels() {
                sheet.put_pixel(x0 + x, y0 + y, *px);
            }
        }
        let (x0, _) = tile_origin(0, col as u32, p);
        draw_text(&mut sheet, x0, 2 * (p + SHEET_MARGIN) + SHEET_MARGIN, &labels[col], scale, p);
    }
    Ok(sheet)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheetEntry {
    pub grid_pos: usize,
    pub index_id: usize,
    pub distance: f32,
    pub label: String,
    pub provenance: PatchProvenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSheet {
    pub input: PathBuf,
    pub sheet: PathBuf,
    pub entries: Vec<SheetEntry>,
}

/// Writes `<stem>_matches.png` and `<stem>_matches.json` per input image.
///
/// With a generator the top row shows its output patches; without one the
/// input patches themselves are matched, which audits the index directly.
pub fn match_report(
    generator: Option<&Generator>,
    matcher: &PatchMatcher,
    images: &[PathBuf],
    out_dir: &Path,
) -> Result<Vec<MatchSheet>> {
    util::create_dir_all(out_dir)?;
    let geometry = matcher.geometry();
    let mut sheets = Vec::with_capacity(images.len());
    for path in images {
        let x = preprocess_file(path, geometry.image)?.batched()?;
        let source = match generator {
            Some(g) => g.forward(&x)?,
            None => x,
        };
        let patches = extract_patch_batch(&source, &geometry)?;
        let matches = matcher.match_batch(&patches)?;
        let real = Tensor::stack(&matches.iter().map(|m| m.pixels.clone()).collect::<Vec<_>>(), 0)?;
        let entries: Vec<SheetEntry> = matches
            .iter()
            .enumerate()
            .map(|(i, m)| SheetEntry {
                grid_pos: i % PATCHES_PER_IMAGE,
                index_id: m.nearest.id,
                distance: m.nearest.distance,
                label: distance_label(m.nearest.distance),
                provenance: m.nearest.provenance.clone(),
            })
            .collect();
        let labels: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
        let img = render_sheet(&patches, &real, &labels)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let sheet_path = out_dir.join(format!("{stem}_matches.png"));
        img.save(&sheet_path).map_err(|e| Error::Ingestion {
            path: sheet_path.clone(),
            reason: e.to_string(),
        })?;
        let sheet = MatchSheet {
            input: path.clone(),
            sheet: sheet_path,
            entries,
        };
        util::write_json(&out_dir.join(format!("{stem}_matches.json")), &sheet)?;
        sheets.push(sheet);
    }
    Ok(sheets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn labels() {
        assert_eq!(distance_label(0.0), "d=0.0");
        assert_eq!(distance_label(1234.56), "d=1234.6");
        assert_eq!(distance_label(3.0e7), "d=3.00e7");
        assert!(distance_label(123.4).chars().all(|c| glyph(c).is_some()));
    }

    #[test]
    fn generated_row_is_above_real_row() {
        let p = 10;
        let white = Tensor::ones((4, 3, p, p), DType::F32, &Device::Cpu).unwrap();
        let black = (Tensor::ones((4, 3, p, p), DType::F32, &Device::Cpu).unwrap() * -1.0).unwrap();
        let labels = vec!["d=0.0".to_string(); 4];
        let sheet = render_sheet(&white, &black, &labels).unwrap();
        for col in 0..4 {
            let (x, y) = tile_origin(0, col, p as u32);
            assert_eq!(sheet.get_pixel(x + 3, y + 3).0, [255, 255, 255]);
            let (x, y) = tile_origin(1, col, p as u32);
            assert_eq!(sheet.get_pixel(x + 3, y + 3).0, [0, 0, 0]);
        }
        assert_eq!(sheet.width(), 4 * (p as u32 + SHEET_MARGIN) + SHEET_MARGIN);
    }

    #[test]
    fn label_strip_has_ink() {
        let t = Tensor::zeros((1, 3, 20, 20), DType::F32, &Device::Cpu).unwrap();
        let sheet = render_sheet(&t, &t, &["d=8".into()]).unwrap();
        let strip_y = 2 * (20 + SHEET_MARGIN) + SHEET_MARGIN;
        let ink = (strip_y..sheet.height())
            .flat_map(|y| (0..sheet.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| sheet.get_pixel(x, y).0 == INK.0)
            .count();
        assert!(ink > 0);
    }
}
