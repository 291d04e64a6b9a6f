//! PNG rendering: J/F-per-epoch curves and mask-overlay strips.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{create_dir, Predictions};
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::eval::{EpochPoint, MetricsReport};

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [140, 86, 75]];
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line, `width` pixels thick; dashed when `dash > 0`.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, width: i64, dash: usize) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut n = 0usize;
    loop {
        if dash == 0 || (n / dash) % 2 == 0 {
            for oy in 0..width {
                for ox in 0..width {
                    put(img, x + ox - width / 2, y + oy - width / 2, c);
                }
            }
        }
        n += 1;
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// J (solid) and F (dashed) against adaptation epoch, one colour per curve.
/// Horizontal grid lines mark every 0.05.
pub fn render_curves(curves: &BTreeMap<String, Vec<EpochPoint>>, path: &Path) -> Result<()> {
    let (w, h, m) = (640i64, 400i64, 40i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, WHITE);
    let values: Vec<f64> = curves.values().flatten().flat_map(|p| [p.j, p.f]).collect();
    let max_epoch = curves.values().flatten().map(|p| p.epoch).max().unwrap_or(0).max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if values.is_empty() { (0.0, 1.0) } else { ((lo - 0.02).max(0.0), (hi + 0.02).min(1.0)) };
    let (lo, hi) = if hi - lo < 1e-6 { (lo - 0.05, hi + 0.05) } else { (lo, hi) };
    let px = |e: usize| m + (e as f64 / max_epoch as f64 * (w - 2 * m) as f64).round() as i64;
    let py = |v: f64| h - m - ((v - lo) / (hi - lo) * (h - 2 * m) as f64).round() as i64;
    let grid = Rgb([225, 225, 225]);
    let mut g = (lo / 0.05).ceil() * 0.05;
    while g <= hi {
        line(&mut img, (m, py(g)), (w - m, py(g)), grid, 1, 0);
        g += 0.05;
    }
    for e in 0..=max_epoch {
        line(&mut img, (px(e), h - m), (px(e), h - m + 4), Rgb([0, 0, 0]), 1, 0);
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (m, h - m), (w - m, h - m), axis, 1, 0);
    line(&mut img, (m, m), (m, h - m), axis, 1, 0);
    for (i, points) in curves.values().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        for (get, dash) in [(Box::new(|p: &EpochPoint| p.j) as Box<dyn Fn(&EpochPoint) -> f64>, 0), (Box::new(|p: &EpochPoint| p.f), 6)] {
            for pair in points.windows(2) {
                line(&mut img, (px(pair[0].epoch), py(get(&pair[0]))), (px(pair[1].epoch), py(get(&pair[1]))), c, 2, dash);
            }
            for p in points {
                for d in -2..=2 {
                    line(&mut img, (px(p.epoch) - 2, py(get(p)) + d), (px(p.epoch) + 2, py(get(p)) + d), c, 1, 0);
                }
            }
        }
    }
    save(&img, path)
}

/// Grid of frames: one row per mask set, columns at evenly spaced frames.
/// Pixels outside the mask are dimmed and the mask boundary is drawn red.
pub fn render_overlay(video: &VideoSequence, rows: &[&[Vec<bool>]], columns: usize, path: &Path) -> Result<()> {
    let (h, w) = (video.height(), video.width());
    let t = video.len();
    let columns = columns.clamp(1, t.max(1));
    let frames: Vec<usize> = (0..columns).map(|k| if columns == 1 { 0 } else { k * (t - 1) / (columns - 1) }).collect();
    let gap = 2usize;
    let mut img = RgbImage::from_pixel((columns * (w + gap) - gap) as u32, (rows.len() * (h + gap)).saturating_sub(gap) as u32, WHITE);
    for (r, masks) in rows.iter().enumerate() {
        for (c, &f) in frames.iter().enumerate() {
            let mask = masks.get(f).ok_or_else(|| Error::Dataset(format!("no mask for frame {f} of `{}`", video.video_id)))?;
            let d = video.samples[f].image.data();
            let n = h * w;
            let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
            for y in 0..h {
                for x in 0..w {
                    let on = mask[y * w + x];
                    let (yi, xi) = (y as isize, x as isize);
                    let edge = on && !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1));
                    let k = if on { 1.0 } else { 0.3 };
                    let px = |ch: usize| (d[ch * n + y * w + x].clamp(0.0, 1.0) * k * 255.0).round() as u8;
                    let color = if edge { Rgb([230, 20, 20]) } else { Rgb([px(0), px(1), px(2)]) };
                    img.put_pixel((c * (w + gap) + x) as u32, (r * (h + gap) + y) as u32, color);
                }
            }
        }
    }
    save(&img, path)
}

/// `curves.png` plus `overlay_<video>.png` (rows: ground truth, no
/// adaptation, adapted) for every test video.
pub fn render_run_plots(
    dir: &Path,
    report: &MetricsReport,
    test: &[VideoSequence],
    baseline: &Predictions,
    adapted: &Predictions,
) -> Result<()> {
    create_dir(dir)?;
    render_curves(&report.curves, &dir.join("curves.png"))?;
    for v in test {
        let gt: Vec<Vec<bool>> = v.samples.iter().map(|s| s.mask.clone().unwrap_or_else(|| vec![false; v.height() * v.width()])).collect();
        let (Some(b), Some(a)) = (baseline.get(&v.video_id), adapted.get(&v.video_id)) else { continue };
        render_overlay(v, &[&gt, b, a], 6, &dir.join(format!("overlay_{}.png", v.video_id)))?;
    }
    Ok(())
}
