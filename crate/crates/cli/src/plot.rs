//! PNG figures: loss curves, heatmap overlays and skeleton renderings.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;
use occpose::camera::heatmap_to_image;
use occpose::skeleton::{EDGES, NUM_JOINTS};
use occpose::targets::HeatmapSet;
use occpose::{Camera, Pose3D};

use crate::error::CliError;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line.
pub fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let (mut x, mut y) = (x0.round() as i64, y0.round() as i64);
    let (xe, ye) = (x1.round() as i64, y1.round() as i64);
    let (dx, dy) = ((xe - x).abs(), -(ye - y).abs());
    let (sx, sy) = (if x < xe { 1 } else { -1 }, if y < ye { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if x == xe && y == ye {
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

fn dot(img: &mut RgbImage, (x, y): (f64, f64), r: i64, c: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::Run(occpose::Error::Format(format!("{}: {e}", path.display()))))
}

/// One polyline per series on log-scaled y when every value is positive.
pub fn loss_curves(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<(), CliError> {
    let (w, h, m) = (640u32, 400u32, 40.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.1.is_finite()).collect();
    if pts.is_empty() {
        return save(&img, path);
    }
    let log_y = pts.iter().all(|p| p.1 > 0.0);
    let fy = |v: f64| if log_y { v.log10() } else { v };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(fy(y));
        y1 = y1.max(fy(y));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let to_px = |x: f64, y: f64| {
        (
            m + (x - x0) / (x1 - x0) * (w as f64 - 2.0 * m),
            h as f64 - m - (fy(y) - y0) / (y1 - y0) * (h as f64 - 2.0 * m),
        )
    };
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (m, h as f64 - m), (w as f64 - m, h as f64 - m), axis);
    line(&mut img, (m, m), (m, h as f64 - m), axis);
    for (i, (_, s)) in series.iter().enumerate() {
        let c = color(i);
        let valid: Vec<_> = s.iter().filter(|p| p.1.is_finite()).collect();
        for pair in valid.windows(2) {
            line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), c);
        }
        if valid.len() == 1 {
            dot(&mut img, to_px(valid[0].0, valid[0].1), 2, c);
        }
        // legend swatch, one per series in order
        for dy in 0..8 {
            for dx in 0..16 {
                put(&mut img, (w as f64 - m) as i64 - 20 + dx, m as i64 + 12 * i as i64 + dy, c);
            }
        }
    }
    save(&img, path)
}

/// Grey base from the first feature channel.
fn base_image(features: &Array3<f32>) -> RgbImage {
    let (_, h, w) = features.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (features[[0, y as usize, x as usize]].clamp(0.0, 1.0) * 160.0) as u8;
        Rgb([v, v, v])
    })
}

/// Keypoint heat (max over joints) blended in red over the rendered input.
pub fn heatmap_overlay(features: &Array3<f32>, maps: &HeatmapSet, path: &Path) -> Result<(), CliError> {
    let mut img = base_image(features);
    let (hh, hw) = maps.dims();
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = ((y as usize * hh) / h as usize, (x as usize * hw) / w as usize);
            let heat = (0..NUM_JOINTS).map(|j| maps.keypoints[[j, cy, cx]]).fold(0.0f32, f32::max).clamp(0.0, 1.0);
            let p = img.get_pixel_mut(x, y);
            p.0[0] = (p.0[0] as f32 * (1.0 - heat) + 255.0 * heat) as u8;
            p.0[1] = (p.0[1] as f32 * (1.0 - heat)) as u8;
            p.0[2] = (p.0[2] as f32 * (1.0 - heat)) as u8;
        }
    }
    save(&img, path)
}

fn draw_pose(img: &mut RgbImage, camera: &Camera, pose: &Pose3D, c: Rgb<u8>) {
    let px = pose.project(camera);
    for &(a, b) in &EDGES {
        line(img, px[a], px[b], c);
    }
    for p in px {
        dot(img, p, 1, c);
    }
}

/// Ground truth in green, predictions in red, 2D joints from heatmap cells in blue.
pub fn skeletons(
    features: &Array3<f32>,
    camera: &Camera,
    gts: &[Pose3D],
    preds: &[Pose3D],
    joints2d: &[[Option<(f64, f64)>; NUM_JOINTS]],
    path: &Path,
) -> Result<(), CliError> {
    let mut img = base_image(features);
    for g in gts {
        draw_pose(&mut img, camera, g, Rgb([40, 200, 40]));
    }
    for p in preds {
        draw_pose(&mut img, camera, p, Rgb([230, 40, 40]));
    }
    for person in joints2d {
        for (x, y) in person.iter().flatten() {
            dot(&mut img, (heatmap_to_image(*x), heatmap_to_image(*y)), 1, Rgb([40, 80, 240]));
        }
    }
    save(&img, path)
}
