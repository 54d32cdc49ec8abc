use serde::{Deserialize, Serialize};

use super::pattern::ORB_PATTERN;
use super::{BinaryDescriptor, Corner, FeatureError, FeatureSet};
use crate::geometry::{Pixel, Point3};
use crate::par::*;
use crate::raster::RasterImage;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const HALF_PATCH: i32 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub threshold: u8,
    /// Contiguous circle pixels required by the segment test.
    pub arc_len: usize,
    pub n_levels: usize,
    pub scale_factor: f64,
    /// Cells per image side used for spatial bucketing.
    pub grid: usize,
    pub target: usize,
    pub min_accept: usize,
    /// Corners kept per cell; `None` means `2 * ceil(target / grid²)`.
    pub cell_cap: Option<usize>,
    /// Corners closer than this to a level's border are skipped; must cover
    /// the rotated sampling pattern.
    pub edge: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 20,
            arc_len: 9,
            n_levels: 8,
            scale_factor: 1.2,
            grid: 8,
            target: 1000,
            min_accept: 50,
            cell_cap: None,
            edge: 19,
        }
    }
}

impl DetectorConfig {
    fn cap(&self) -> usize {
        self.cell_cap
            .unwrap_or_else(|| 2 * self.target.div_ceil(self.grid * self.grid).max(1))
    }
}

/// Plain 8-bit image used for pyramid levels.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raster(img: &RasterImage) -> Self {
        Self::new(img.width, img.height, img.pixels.clone())
    }

    #[inline]
    pub fn at(&self, x: i32, y: i32) -> u8 {
        self.data[(y as u32 * self.width + x as u32) as usize]
    }

    #[inline]
    fn clamped(&self, x: i32, y: i32) -> u8 {
        let x = x.clamp(0, self.width as i32 - 1);
        let y = y.clamp(0, self.height as i32 - 1);
        self.at(x, y)
    }

    /// Bilinear resampling to `width x height` with pixel-center alignment.
    pub fn resized(&self, width: u32, height: u32) -> GrayImage {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = vec![0u8; (width * height) as usize];
        data.par_chunks_mut(width as usize)
            .enumerate()
            .for_each(|(y, row)| {
                let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
                let y0 = fy.floor() as i32;
                let wy = fy - y0 as f64;
                for (x, out) in row.iter_mut().enumerate() {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                    let x0 = fx.floor() as i32;
                    let wx = fx - x0 as f64;
                    let p = |dx, dy| self.clamped(x0 + dx, y0 + dy) as f64;
                    let v = (1.0 - wy) * ((1.0 - wx) * p(0, 0) + wx * p(1, 0))
                        + wy * ((1.0 - wx) * p(0, 1) + wx * p(1, 1));
                    *out = v.round().clamp(0.0, 255.0) as u8;
                }
            });
        GrayImage::new(width, height, data)
    }

    /// Separable Gaussian blur with replicated borders.
    pub fn gaussian_blurred(&self, ksize: usize, sigma: f64) -> GrayImage {
        let r = (ksize / 2) as i32;
        let mut kernel: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        let (w, h) = (self.width as i32, self.height as i32);
        let mut tmp = vec![0f64; self.data.len()];
        tmp.par_chunks_mut(w as usize).enumerate().for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                *out = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * self.clamped(x as i32 + k as i32 - r, y as i32) as f64)
                    .sum();
            }
        });
        let mut data = vec![0u8; self.data.len()];
        data.par_chunks_mut(w as usize).enumerate().for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let yy = (y as i32 + k as i32 - r).clamp(0, h - 1);
                        kv * tmp[(yy * w) as usize + x]
                    })
                    .sum();
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
        });
        GrayImage::new(self.width, self.height, data)
    }
}

/// Largest threshold at which `(x, y)` still passes the segment test, i.e.
/// the pixel is a corner for every threshold strictly below the result.
fn segment_score(img: &GrayImage, x: i32, y: i32, arc_len: usize) -> i32 {
    let c = img.at(x, y) as i32;
    let mut d = [0i32; 16];
    for (k, (dx, dy)) in CIRCLE.iter().enumerate() {
        d[k] = img.at(x + dx, y + dy) as i32 - c;
    }
    let mut best = i32::MIN;
    for start in 0..16 {
        let mut bright = i32::MAX;
        let mut dark = i32::MAX;
        for k in 0..arc_len {
            let v = d[(start + k) % 16];
            bright = bright.min(v);
            dark = dark.min(-v);
        }
        best = best.max(bright).max(dark);
    }
    best
}

/// Cheap rejection on the four compass pixels; any arc of nine or more
/// contiguous pixels covers at least two of them.
#[inline]
fn compass_reject(img: &GrayImage, x: i32, y: i32, t: i32) -> bool {
    let c = img.at(x, y) as i32;
    let mut bright = 0;
    let mut dark = 0;
    for k in [0, 4, 8, 12] {
        let (dx, dy) = CIRCLE[k];
        let v = img.at(x + dx, y + dy) as i32 - c;
        bright += (v > t) as u32;
        dark += (v < -t) as u32;
    }
    bright < 2 && dark < 2
}

/// Segment-test corners with 3x3 non-maximum suppression, as
/// `(x, y, score)` in image coordinates, excluding a `border`-pixel margin.
pub fn fast_corners(img: &GrayImage, threshold: u8, arc_len: usize, border: u32) -> Vec<(u32, u32, i32)> {
    let (w, h) = (img.width as i32, img.height as i32);
    let b = border.max(3) as i32;
    if w <= 2 * b || h <= 2 * b {
        return Vec::new();
    }
    let t = threshold as i32;
    let quick = arc_len >= 9;
    let mut scores = vec![0i32; (w * h) as usize];
    scores
        .par_chunks_mut(w as usize)
        .enumerate()
        .for_each(|(y, row)| {
            let y = y as i32;
            if y < b || y >= h - b {
                return;
            }
            for x in b..w - b {
                if quick && compass_reject(img, x, y, t) {
                    continue;
                }
                let s = segment_score(img, x, y, arc_len);
                if s > t {
                    row[x as usize] = s;
                }
            }
        });
    let mut out = Vec::new();
    for y in b..h - b {
        for x in b..w - b {
            let s = scores[(y * w + x) as usize];
            if s == 0 {
                continue;
            }
            let is_max = (-1..=1).all(|dy| {
                (-1..=1).all(|dx| scores[((y + dy) * w + x + dx) as usize] <= s)
            });
            if is_max {
                out.push((x as u32, y as u32, s));
            }
        }
    }
    out
}

fn orientation(img: &GrayImage, x: i32, y: i32) -> f32 {
    let mut m01 = 0i64;
    let mut m10 = 0i64;
    for dy in -HALF_PATCH..=HALF_PATCH {
        let span = ((HALF_PATCH * HALF_PATCH - dy * dy) as f64).sqrt().round() as i32;
        for dx in -span..=span {
            let v = img.at(x + dx, y + dy) as i64;
            m10 += dx as i64 * v;
            m01 += dy as i64 * v;
        }
    }
    (m01 as f64).atan2(m10 as f64) as f32
}

fn describe(smoothed: &GrayImage, x: i32, y: i32, angle: f32) -> BinaryDescriptor {
    let (s, c) = (angle as f64).sin_cos();
    let sample = |px: i8, py: i8| {
        let (px, py) = (px as f64, py as f64);
        let rx = (px * c - py * s).round() as i32;
        let ry = (px * s + py * c).round() as i32;
        smoothed.at(x + rx, y + ry)
    };
    let mut d = BinaryDescriptor::default();
    for (i, p) in ORB_PATTERN.iter().enumerate() {
        d.set_bit(i, sample(p[0], p[1]) < sample(p[2], p[3]));
    }
    d
}

struct Level {
    scale: f64,
    image: GrayImage,
}

fn build_pyramid(base: &GrayImage, cfg: &DetectorConfig) -> Vec<Level> {
    let mut levels = vec![Level {
        scale: 1.0,
        image: base.clone(),
    }];
    for l in 1..cfg.n_levels {
        let scale = cfg.scale_factor.powi(l as i32);
        let w = (base.width as f64 / scale).round() as u32;
        let h = (base.height as f64 / scale).round() as u32;
        if w <= 2 * cfg.edge || h <= 2 * cfg.edge {
            break;
        }
        levels.push(Level {
            scale,
            image: base.resized(w, h),
        });
    }
    levels
}

struct Candidate {
    level: usize,
    x: u32,
    y: u32,
    score: i32,
}

fn bucket(cands: Vec<Candidate>, levels: &[Level], width: u32, height: u32, cfg: &DetectorConfig) -> Vec<Candidate> {
    let g = cfg.grid.max(1);
    let mut cells: Vec<Vec<Candidate>> = (0..g * g).map(|_| Vec::new()).collect();
    for c in cands {
        let s = levels[c.level].scale;
        let u = c.x as f64 * s;
        let v = c.y as f64 * s;
        let cx = ((u / width as f64 * g as f64) as usize).min(g - 1);
        let cy = ((v / height as f64 * g as f64) as usize).min(g - 1);
        cells[cy * g + cx].push(c);
    }
    let cap = cfg.cap();
    let mut out = Vec::new();
    for mut cell in cells {
        cell.sort_by(|a, b| {
            b.score
                .cmp(&a.score)
                .then(a.level.cmp(&b.level))
                .then(a.y.cmp(&b.y))
                .then(a.x.cmp(&b.x))
        });
        cell.truncate(cap);
        out.extend(cell);
    }
    out
}

/// Detects oriented corners over a scale pyramid and describes them.
///
/// Corners are bucketed on a `grid x grid` layout; when fewer than
/// `target` survive, the threshold is halved once and detection repeated.
/// Each corner is lifted to 3D through the raster's back-references when
/// its full-resolution pixel is lit.
pub fn detect(img: &RasterImage, cfg: &DetectorConfig) -> Result<FeatureSet, FeatureError> {
    if img.width < 32 || img.height < 32 {
        return Err(FeatureError::ImageTooSmall {
            width: img.width,
            height: img.height,
        });
    }
    let base = GrayImage::from_raster(img);
    let levels = build_pyramid(&base, cfg);
    let mut chosen = Vec::new();
    for threshold in [cfg.threshold, cfg.threshold / 2] {
        let cands: Vec<Candidate> = levels
            .iter()
            .enumerate()
            .flat_map(|(li, lvl)| {
                fast_corners(&lvl.image, threshold, cfg.arc_len, cfg.edge)
                    .into_iter()
                    .map(move |(x, y, score)| Candidate {
                        level: li,
                        x,
                        y,
                        score,
                    })
            })
            .collect();
        chosen = bucket(cands, &levels, img.width, img.height, cfg);
        if chosen.len() >= cfg.target {
            break;
        }
    }
    if chosen.len() < cfg.min_accept {
        return Err(FeatureError::TooFewFeatures {
            found: chosen.len(),
            required: cfg.min_accept,
        });
    }
    let smoothed: Vec<GrayImage> = levels
        .par_iter()
        .map(|l| l.image.gaussian_blurred(7, 2.0))
        .collect();
    let described: Vec<(Corner, BinaryDescriptor)> = chosen
        .par_iter()
        .map(|c| {
            let lvl = &levels[c.level];
            let (x, y) = (c.x as i32, c.y as i32);
            let angle = orientation(&lvl.image, x, y);
            let desc = describe(&smoothed[c.level], x, y, angle);
            let corner = Corner {
                u: c.x as f64 * lvl.scale,
                v: c.y as f64 * lvl.scale,
                score: c.score as f32,
                level: c.level as u8,
                angle,
            };
            (corner, desc)
        })
        .collect();
    let mut out = FeatureSet::default();
    for (corner, desc) in described {
        let point = lift(img, corner.pixel());
        out.push(corner, desc, point);
    }
    Ok(out)
}

/// Backprojects the nearest lit pixel (smallest camera depth) in the 3x3
/// window around `px`. Corners sit on silhouettes, where the center pixel
/// alone flips between foreground and background from frame to frame.
pub fn lift(img: &RasterImage, px: Pixel) -> Option<Point3> {
    let mut best: Option<Point3> = None;
    for v in px.v.saturating_sub(1)..=(px.v + 1).min(img.height - 1) {
        for u in px.u.saturating_sub(1)..=(px.u + 1).min(img.width - 1) {
            if let Some(p) = img.depth_index[img.offset(u, v)] {
                if best.is_none_or(|b| p.z < b.z) {
                    best = Some(p);
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    fn raster_from(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> RasterImage {
        let mut img = RasterImage::blank(width, height, 0);
        for v in 0..height {
            for u in 0..width {
                let val = f(u, v);
                let off = img.offset(u, v);
                img.pixels[off] = val;
                if val != 0 {
                    img.depth_index[off] = Some(Point3::new(u as f64, v as f64, 1.0));
                }
            }
        }
        img
    }

    /// Segment test straight from its definition: some run of `arc` circle
    /// pixels all brighter than `c + t` or all darker than `c - t`.
    fn brute_segment_test(img: &GrayImage, x: i32, y: i32, t: i32, arc: usize) -> bool {
        let c = img.at(x, y) as i32;
        (0..16).any(|s| {
            let run = |pred: &dyn Fn(i32) -> bool| {
                (0..arc).all(|k| {
                    let (dx, dy) = CIRCLE[(s + k) % 16];
                    pred(img.at(x + dx, y + dy) as i32)
                })
            };
            run(&|v| v > c + t) || run(&|v| v < c - t)
        })
    }

    #[test]
    fn constant_image_has_too_few_features() {
        let img = raster_from(128, 128, |_, _| 100);
        assert!(matches!(
            detect(&img, &DetectorConfig::default()),
            Err(FeatureError::TooFewFeatures { found: 0, .. })
        ));
    }

    #[test]
    fn small_image_is_rejected() {
        let img = raster_from(31, 64, |_, _| 1);
        assert!(matches!(
            detect(&img, &DetectorConfig::default()),
            Err(FeatureError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn segment_score_agrees_with_brute_force() {
        let img = raster_from(160, 160, |u, v| {
            let inside = (50..110).contains(&u) && (40..100).contains(&v);
            let tri = u > 20 && v > 120 && u - 20 > v - 120;
            if inside || tri {
                200
            } else {
                ((u * 7 + v * 13) % 23) as u8 + 1
            }
        });
        let gray = GrayImage::from_raster(&img);
        for t in [10, 20, 40] {
            for y in 3..157 {
                for x in 3..157 {
                    let score = segment_score(&gray, x, y, 9);
                    assert_eq!(score > t, brute_segment_test(&gray, x, y, t, 9), "({x},{y}) t={t}");
                }
            }
        }
    }

    #[test]
    fn square_corners_are_detected() {
        let img = raster_from(200, 200, |u, v| {
            if (60..140).contains(&u) && (70..130).contains(&v) {
                220
            } else {
                10
            }
        });
        let gray = GrayImage::from_raster(&img);
        // Oracle: brute-force segment test over every pixel near each corner.
        let truth = [(60, 70), (139, 70), (60, 129), (139, 129)];
        for &(cx, cy) in &truth {
            let hit = (-2..=2).any(|dy| (-2..=2).any(|dx| brute_segment_test(&gray, cx + dx, cy + dy, 20, 9)));
            assert!(hit, "oracle has no corner near ({cx},{cy})");
        }
        let cfg = DetectorConfig {
            min_accept: 4,
            ..Default::default()
        };
        let fs = detect(&img, &cfg).unwrap();
        for &(cx, cy) in &truth {
            let found = fs.corners.iter().any(|c| {
                c.level == 0 && (c.u - cx as f64).abs() <= 2.0 && (c.v - cy as f64).abs() <= 2.0
            });
            assert!(found, "corner ({cx},{cy}) missing");
        }
        assert!(fs.is_consistent());
    }

    #[test]
    fn checkerboard_fills_every_cell() {
        let img = raster_from(512, 512, |u, v| if ((u / 8) + (v / 8)) % 2 == 0 { 200 } else { 40 });
        let cfg = DetectorConfig::default();
        let fs = detect(&img, &cfg).unwrap();
        assert!(fs.len() >= 1000, "{} corners", fs.len());
        let g = cfg.grid;
        let mut counts = vec![0usize; g * g];
        for c in &fs.corners {
            let cx = ((c.u / 512.0 * g as f64) as usize).min(g - 1);
            let cy = ((c.v / 512.0 * g as f64) as usize).min(g - 1);
            counts[cy * g + cx] += 1;
        }
        assert!(counts.iter().all(|&n| n > 0), "{counts:?}");
        assert!(fs.corners.iter().all(|c| (c.level as usize) < cfg.n_levels));
    }

    #[test]
    fn accepted_scores_exceed_the_threshold_in_force() {
        let img = raster_from(256, 256, |u, v| if ((u / 16) + (v / 16)) % 2 == 0 { 180 } else { 30 });
        let fs = detect(&img, &DetectorConfig::default()).unwrap();
        // The relaxed threshold is the lowest one that can be in force.
        assert!(fs.corners.iter().all(|c| c.score > 10.0));
    }

    #[test]
    fn detection_is_translation_covariant() {
        let pattern = |u: i64, v: i64| -> u8 {
            let h = ((u / 9) * 31 + (v / 7) * 17 + (u / 9) * (v / 7)) % 5;
            (h as u8) * 50 + 1
        };
        let (du, dv) = (5i64, 3i64);
        let a = raster_from(200, 160, |u, v| pattern(u as i64, v as i64));
        let b = raster_from(200, 160, |u, v| pattern(u as i64 - du, v as i64 - dv));
        let cfg = DetectorConfig {
            n_levels: 1,
            cell_cap: Some(usize::MAX),
            min_accept: 1,
            ..Default::default()
        };
        let fa = detect(&a, &cfg).unwrap();
        let fb = detect(&b, &cfg).unwrap();
        let key = |c: &Corner| (c.u as i64, c.v as i64);
        let set_b: std::collections::HashSet<_> = fb.corners.iter().map(key).collect();
        let margin = 19 + 10;
        let mut checked = 0;
        for c in &fa.corners {
            let (u, v) = key(c);
            if u < margin || v < margin || u > 200 - margin || v > 160 - margin {
                continue;
            }
            checked += 1;
            assert!(set_b.contains(&(u + du, v + dv)), "corner ({u},{v}) not shifted");
        }
        assert!(checked > 20);
    }

    #[test]
    fn corners_on_lit_pixels_are_lifted() {
        let img = raster_from(128, 128, |u, v| if ((u / 10) + (v / 10)) % 2 == 0 { 150 } else { 0 });
        let fs = detect(&img, &DetectorConfig { min_accept: 1, ..Default::default() }).unwrap();
        for (c, p) in fs.corners.iter().zip(&fs.points3d) {
            let px = c.pixel();
            let window_lit = (px.v.saturating_sub(1)..=px.v + 1)
                .flat_map(|v| (px.u.saturating_sub(1)..=px.u + 1).map(move |u| (u, v)))
                .any(|(u, v)| u < img.width && v < img.height && img.get(u, v) != 0);
            assert_eq!(p.is_some(), window_lit);
            if img.get(px.u, px.v) != 0 {
                assert!(p.is_some());
            }
        }
    }
}
