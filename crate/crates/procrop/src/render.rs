//! Qualitative output: crop overlays with rank-keyed colors and score
//! labels, and the human-readable evaluation summary table with its
//! machine-readable JSON twin.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::eval::EvalReport;
use crate::geometry::{to_pixels, ImageSize};
use crate::model::CropProposal;

/// Rank-keyed outline colors (rank 0 first).
pub const RANK_COLORS: [[u8; 3]; 6] = [
    [220, 40, 40],
    [250, 170, 30],
    [60, 190, 80],
    [50, 160, 230],
    [150, 80, 220],
    [230, 90, 180],
];

const BORDER: u32 = 2;

/// 3x5 glyphs for score labels: digits, dot, minus.
fn glyph(c: char) -> Option<[u8; 5]> {
    // Each row is 3 bits, msb = left pixel.
    let g = match c {
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
        _ => return None,
    };
    Some(g)
}

fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, scale: u32, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..3u32 {
                    if bits & (0b100 >> rx) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                let px = cx + rx * scale + sx;
                                let py = y + ry as u32 * scale + sy;
                                if px < img.width() && py < img.height() {
                                    img.put_pixel(px, py, Rgb(color));
                                }
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}

fn draw_rect_outline(img: &mut RgbImage, x1: u32, y1: u32, x2: u32, y2: u32, color: [u8; 3]) {
    let (w, h) = (img.width(), img.height());
    for t in 0..BORDER {
        for x in x1..x2.min(w) {
            let top = (y1 + t).min(h - 1);
            let bottom = y2.saturating_sub(1 + t).min(h - 1);
            img.put_pixel(x, top, Rgb(color));
            img.put_pixel(x, bottom, Rgb(color));
        }
        for y in y1..y2.min(h) {
            let left = (x1 + t).min(w - 1);
            let right = x2.saturating_sub(1 + t).min(w - 1);
            img.put_pixel(left, y, Rgb(color));
            img.put_pixel(right, y, Rgb(color));
        }
    }
}

/// Draw the top proposals over the image and write a lossless PNG. With no
/// proposals the image is copied unmodified.
pub fn render_overlay(
    image: &RgbImage,
    proposals: &[CropProposal],
    top_k: usize,
    out_path: &Path,
) -> Result<()> {
    let mut canvas = image.clone();
    let size = ImageSize {
        width: image.width(),
        height: image.height(),
    };
    for (rank, p) in proposals.iter().take(top_k).enumerate().rev() {
        // Highest rank drawn last so it stays on top.
        let color = RANK_COLORS[rank % RANK_COLORS.len()];
        let r = to_pixels(&p.bbox, &size);
        draw_rect_outline(&mut canvas, r.x1, r.y1, r.x2, r.y2, color);
        let label = format!("{:.3}", p.score);
        draw_text(&mut canvas, &label, r.x1 + BORDER + 2, r.y1 + BORDER + 2, 2, color);
    }
    canvas.save(out_path)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "   -  ".to_string(),
    }
}

/// Fixed-layout summary table; numbers at 4 decimals. The JSON twin is the
/// serde serialization of [`EvalReport`].
pub fn report_summary(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "evaluation over {} image(s), eps = {:.2}\n\n",
        report.image_count, report.eps
    ));
    s.push_str("metric     top-1    top-2    top-3\n");
    if report.image_count > 0 {
        s.push_str(&format!(
            "iou       {:.4}   {:.4}   {:.4}\n",
            report.iou[0], report.iou[1], report.iou[2]
        ));
        s.push_str(&format!(
            "disp      {:.4}   {:.4}   {:.4}\n",
            report.disp[0], report.disp[1], report.disp[2]
        ));
    }
    s.push('\n');
    s.push_str("acc          N=5      N=10\n");
    if report.image_count > 0 {
        for k in 1..=4 {
            let at = |n: usize| {
                report
                    .acc
                    .iter()
                    .find(|c| c.k == k && c.n == n)
                    .and_then(|c| c.value)
            };
            s.push_str(&format!("K={k}       {}   {}\n", fmt_opt(at(5)), fmt_opt(at(10))));
        }
        s.push_str(&format!(
            "mean      {}   {}\n",
            fmt_opt(report.mean_acc_5),
            fmt_opt(report.mean_acc_10)
        ));
    }
    s
}
