//! Deterministic synthetic patch generator: field-like backgrounds with
//! white line structures, textured ball discs for positives, and ball-free
//! distractors (line crossings, plain white blobs, limb-like bars) for
//! negatives. Labels are computed from the construction geometry.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::motion_blur;
use crate::data::{compute_visibility, Label, PatchRecord};

const W: usize = 32;
const H: usize = 32;
const C: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub positive_fraction: f64,
    pub seed: u64,
    /// Probability of motion-blurring a finished patch.
    pub blur_prob: f64,
    /// Probability that a ball is partially covered by a foreground bar.
    pub occlusion_prob: f64,
    /// Uniform sensor-noise amplitude.
    pub noise: f32,
}

impl GenConfig {
    pub fn new(positive_fraction: f64, seed: u64) -> Self {
        GenConfig {
            positive_fraction,
            seed,
            blur_prob: 0.3,
            occlusion_prob: 0.25,
            noise: 0.02,
        }
    }
}

/// Generate `n` records with the given positive fraction, deterministically
/// from the seed.
pub fn generate_synthetic(n: usize, positive_fraction: f64, seed: u64) -> Vec<PatchRecord> {
    generate_with(n, GenConfig::new(positive_fraction, seed))
}

pub fn generate_with(n: usize, cfg: GenConfig) -> Vec<PatchRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_pos = (n as f64 * cfg.positive_fraction).round() as usize;
    let mut is_positive = vec![false; n];
    for flag in is_positive.iter_mut().take(n_pos.min(n)) {
        *flag = true;
    }
    // Fisher-Yates over the class assignment keeps the draw order stable.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        is_positive.swap(i, j);
    }
    is_positive
        .into_iter()
        .map(|positive| {
            if positive {
                render_positive(&cfg, &mut rng)
            } else {
                render_negative(&cfg, &mut rng)
            }
        })
        .collect()
}

/// Infinite thick line through `(px, py)` with unit normal `(nx, ny)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strip {
    px: f32,
    py: f32,
    nx: f32,
    ny: f32,
    half_width: f32,
}

impl Strip {
    fn distance(&self, x: f32, y: f32) -> f32 {
        ((x - self.px) * self.nx + (y - self.py) * self.ny).abs()
    }

    fn covers(&self, x: f32, y: f32) -> bool {
        self.distance(x, y) <= self.half_width
    }
}

fn render_positive(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> PatchRecord {
    let mut img = render_field(rng);
    if rng.gen_bool(0.5) {
        draw_random_lines(&mut img, rng, 1);
    }

    let cx = rng.gen_range(-4.0f32..36.0);
    let cy = rng.gen_range(-4.0f32..36.0);
    let r = rng.gen_range(6.0f32..=14.0);
    draw_ball(&mut img, cx, cy, r, rng);

    let strip = if rng.gen_bool(cfg.occlusion_prob) {
        let angle = rng.gen_range(0.0f32..std::f32::consts::PI);
        // Anchor near the rim so the bar covers part of the ball, not all.
        let off = rng.gen_range(0.3..0.9) * r;
        let dir = rng.gen_range(0.0f32..std::f32::consts::TAU);
        let strip = Strip {
            px: cx + off * dir.cos(),
            py: cy + off * dir.sin(),
            nx: angle.cos(),
            ny: angle.sin(),
            half_width: rng.gen_range(1.5..4.0),
        };
        let shade = rng.gen_range(0.6..0.85);
        draw_strip(&mut img, &strip, [shade, shade, shade]);
        Some(strip)
    } else {
        None
    };

    if rng.gen_bool(cfg.blur_prob) {
        let len = rng.gen_range(2..=4);
        let angle = rng.gen_range(0.0f32..std::f32::consts::PI);
        motion_blur(&mut img, len, angle);
    }
    add_noise(&mut img, cfg.noise, rng);

    let (inside, occluded) = disc_fractions(cx, cy, r, strip.as_ref());
    let label = Label {
        class: 1,
        center_x: cx,
        center_y: cy,
        bbox: [cx - r, cy - r, cx + r, cy + r],
        concealed: occluded > 0.0,
        visibility: compute_visibility(inside, occluded),
    };
    PatchRecord::new(quantize(&img), label).expect("generator payload size is fixed")
}

fn render_negative(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> PatchRecord {
    let mut img = render_field(rng);
    if rng.gen_bool(0.6) {
        let count = rng.gen_range(1..=2);
        draw_random_lines(&mut img, rng, count);
    }
    for _ in 0..rng.gen_range(0..=2u32) {
        match rng.gen_range(0..3u32) {
            0 => {
                // Plain white blob: ball-like brightness, no texture.
                let bx = rng.gen_range(0.0f32..32.0);
                let by = rng.gen_range(0.0f32..32.0);
                let br = rng.gen_range(2.0f32..=4.5);
                let v = rng.gen_range(0.72f32..0.88);
                draw_blob(&mut img, bx, by, br, [v, v, v]);
            }
            1 => {
                // Line crossing.
                let ix = rng.gen_range(4.0f32..28.0);
                let iy = rng.gen_range(4.0f32..28.0);
                for _ in 0..2 {
                    let angle = rng.gen_range(0.0f32..std::f32::consts::PI);
                    let (dx, dy) = (angle.cos() * 40.0, angle.sin() * 40.0);
                    let v = rng.gen_range(0.75f32..0.95);
                    draw_segment(
                        &mut img,
                        (ix - dx, iy - dy),
                        (ix + dx, iy + dy),
                        rng.gen_range(0.5..1.5),
                        [v, v, v],
                    );
                }
            }
            _ => {
                // Limb-like light bar.
                let strip = Strip {
                    px: rng.gen_range(0.0f32..32.0),
                    py: rng.gen_range(0.0f32..32.0),
                    nx: rng.gen_range(0.0f32..std::f32::consts::PI).cos(),
                    ny: rng.gen_range(0.0f32..std::f32::consts::PI).sin(),
                    half_width: rng.gen_range(3.0..6.0),
                };
                let v = rng.gen_range(0.6f32..0.8);
                draw_strip(&mut img, &strip, [v, v, v * 0.98]);
            }
        }
    }
    if rng.gen_bool(cfg.blur_prob) {
        let len = rng.gen_range(2..=4);
        let angle = rng.gen_range(0.0f32..std::f32::consts::PI);
        motion_blur(&mut img, len, angle);
    }
    add_noise(&mut img, cfg.noise, rng);
    PatchRecord::new(quantize(&img), Label::background()).expect("generator payload size is fixed")
}

/// Green field with a directional shading gradient.
fn render_field(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let base = [
        rng.gen_range(0.05f32..0.25),
        rng.gen_range(0.35f32..0.6),
        rng.gen_range(0.05f32..0.25),
    ];
    let angle = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let strength = rng.gen_range(-0.15f32..0.15);
    let (gx, gy) = (angle.cos() * strength / 32.0, angle.sin() * strength / 32.0);
    let mut img = vec![0.0f32; W * H * C];
    for y in 0..H {
        for x in 0..W {
            let shade = 1.0 + gx * x as f32 + gy * y as f32;
            let i = (y * W + x) * C;
            for ch in 0..C {
                img[i + ch] = (base[ch] * shade).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn draw_random_lines(img: &mut [f32], rng: &mut ChaCha8Rng, count: u32) {
    for _ in 0..count {
        let a = (rng.gen_range(-8.0f32..40.0), rng.gen_range(-8.0f32..40.0));
        let b = (rng.gen_range(-8.0f32..40.0), rng.gen_range(-8.0f32..40.0));
        let v = rng.gen_range(0.75f32..0.95);
        draw_segment(img, a, b, rng.gen_range(0.5..1.5), [v, v, v]);
    }
}

fn blend(img: &mut [f32], x: usize, y: usize, color: [f32; 3], coverage: f32) {
    if coverage <= 0.0 {
        return;
    }
    let cov = coverage.min(1.0);
    let i = (y * W + x) * C;
    for ch in 0..C {
        img[i + ch] += (color[ch] - img[i + ch]) * cov;
    }
}

fn draw_segment(img: &mut [f32], a: (f32, f32), b: (f32, f32), half_width: f32, color: [f32; 3]) {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    for y in 0..H {
        for x in 0..W {
            let (px, py) = (x as f32 - ax, y as f32 - ay);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ex, ey) = (px - t * dx, py - t * dy);
            let d = (ex * ex + ey * ey).sqrt();
            blend(img, x, y, color, half_width + 0.5 - d);
        }
    }
}

fn draw_strip(img: &mut [f32], strip: &Strip, color: [f32; 3]) {
    for y in 0..H {
        for x in 0..W {
            let d = strip.distance(x as f32, y as f32);
            blend(img, x, y, color, strip.half_width + 0.5 - d);
        }
    }
}

fn draw_blob(img: &mut [f32], cx: f32, cy: f32, r: f32, color: [f32; 3]) {
    for y in 0..H {
        for x in 0..W {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            blend(img, x, y, color, r + 0.5 - d);
        }
    }
}

/// Textured ball: bright shaded disc with a center spot and five dark
/// spots at near-even angles, echoing a black-and-white panel pattern.
fn draw_ball(img: &mut [f32], cx: f32, cy: f32, r: f32, rng: &mut ChaCha8Rng) {
    let base = rng.gen_range(0.88f32..0.98);
    let dark = rng.gen_range(0.02f32..0.12);
    let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let mut spots: Vec<(f32, f32, f32)> = vec![(cx, cy, r * rng.gen_range(0.28..0.34))];
    for k in 0..5 {
        let angle = phase
            + k as f32 * std::f32::consts::TAU / 5.0
            + rng.gen_range(-0.25f32..0.25);
        let dist = r * rng.gen_range(0.46..0.62);
        let sr = r * rng.gen_range(0.24..0.32);
        spots.push((cx + dist * angle.cos(), cy + dist * angle.sin(), sr));
    }
    let x_lo = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + r + 1.0).ceil().min(FLIP as f32)) as usize;
    let y_lo = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + r + 1.0).ceil().min(FLIP as f32)) as usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (fx, fy) = (x as f32, y as f32);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let cov = (r + 0.5 - d).clamp(0.0, 1.0);
            if cov <= 0.0 {
                continue;
            }
            let shade = 0.55 + 0.45 * (1.0 - (d / r).min(1.0).powi(2)).sqrt();
            let mut v = base * shade;
            for (sx, sy, sr) in &spots {
                let sd = ((fx - sx).powi(2) + (fy - sy).powi(2)).sqrt();
                let scov = (sr + 0.5 - sd).clamp(0.0, 1.0);
                if scov > 0.0 {
                    v += (dark * shade - v) * scov;
                }
            }
            blend(img, x, y, [v, v, v], cov);
        }
    }
}

const FLIP: usize = W - 1;

fn add_noise(img: &mut [f32], amplitude: f32, rng: &mut ChaCha8Rng) {
    if amplitude <= 0.0 {
        return;
    }
    for v in img.iter_mut() {
        *v = (*v + rng.gen_range(-amplitude..=amplitude)).clamp(0.0, 1.0);
    }
}

fn quantize(img: &[f32]) -> Vec<u8> {
    img.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Pixel-grid fractions over the disc: the share of disc pixel centers
/// inside the patch, and of those, the share covered by the foreground
/// strip. Uses the same rasterization convention as the renderer.
pub(crate) fn disc_fractions(cx: f32, cy: f32, r: f32, strip: Option<&Strip>) -> (f64, f64) {
    let mut total = 0u32;
    let mut inside = 0u32;
    let mut occluded = 0u32;
    let x_lo = (cx - r).floor() as i32;
    let x_hi = (cx + r).ceil() as i32;
    let y_lo = (cy - r).floor() as i32;
    let y_hi = (cy + r).ceil() as i32;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            if dx * dx + dy * dy > r * r {
                continue;
            }
            total += 1;
            if x >= 0 && x < W as i32 && y >= 0 && y < H as i32 {
                inside += 1;
                if strip.is_some_and(|s| s.covers(x as f32, y as f32)) {
                    occluded += 1;
                }
            }
        }
    }
    if total == 0 {
        return (0.0, 0.0);
    }
    let inside_frac = inside as f64 / total as f64;
    let occ_frac = if inside == 0 { 0.0 } else { occluded as f64 / inside as f64 };
    (inside_frac, occ_frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_synthetic(50, 0.4, 123);
        let b = generate_synthetic(50, 0.4, 123);
        assert_eq!(a, b);
        let c = generate_synthetic(50, 0.4, 124);
        assert_ne!(a, c);
    }

    #[test]
    fn positive_fraction_is_respected() {
        let records = generate_synthetic(1000, 0.43, 5);
        let pos = records.iter().filter(|r| r.label.is_ball()).count();
        assert_eq!(pos, 430);
    }

    #[test]
    fn fully_inside_unoccluded_disc_is_quartile_three() {
        let (inside, occ) = disc_fractions(15.5, 15.5, 8.0, None);
        assert_eq!(inside, 1.0);
        assert_eq!(occ, 0.0);
        assert_eq!(compute_visibility(inside, occ), 3);
    }

    #[test]
    fn corner_disc_is_quartile_zero() {
        // Center at the patch corner: about a quarter of the disc remains.
        let (inside, occ) = disc_fractions(-1.0, -1.0, 10.0, None);
        assert!(inside < 0.25, "inside fraction {inside}");
        assert_eq!(compute_visibility(inside, occ), 0);
    }

    #[test]
    fn generated_labels_are_valid_and_consistent() {
        let records = generate_synthetic(300, 0.5, 42);
        for r in &records {
            r.label.validate().unwrap();
            if r.label.is_ball() {
                let [x0, y0, x1, y1] = r.label.bbox;
                let fully_inside =
                    x0 >= 0.0 && y0 >= 0.0 && x1 <= 31.0 && y1 <= 31.0;
                if fully_inside && !r.label.concealed {
                    assert_eq!(r.label.visibility, 3);
                }
            } else {
                assert_eq!(r.label.visibility, 0);
                assert!(!r.label.concealed);
            }
        }
    }

    #[test]
    fn ball_centroid_matches_label_on_clean_samples() {
        let mut cfg = GenConfig::new(1.0, 77);
        cfg.blur_prob = 0.0;
        cfg.occlusion_prob = 0.0;
        let records = generate_with(1500, cfg);
        let mut checked = 0;
        for r in &records {
            let l = &r.label;
            // Only discs whose mask lies fully inside the patch can be
            // re-estimated from their rendered pixels.
            let fully_inside = l.bbox[0] >= 0.5
                && l.bbox[1] >= 0.5
                && l.bbox[2] <= 30.5
                && l.bbox[3] <= 30.5;
            if l.visibility != 3 || !fully_inside {
                continue;
            }
            let radius = 0.5 * (l.bbox[2] - l.bbox[0]);
            let px = r.to_f32();
            let mut sx = 0.0f64;
            let mut sy = 0.0f64;
            let mut sw = 0.0f64;
            for y in 0..H {
                for x in 0..W {
                    let d = ((x as f32 - l.center_x).powi(2) + (y as f32 - l.center_y).powi(2))
                        .sqrt();
                    if d > radius - 0.5 {
                        continue;
                    }
                    let i = (y * W + x) * C;
                    let lum = ((px[i] + px[i + 1] + px[i + 2]) / 3.0) as f64;
                    sx += lum * x as f64;
                    sy += lum * y as f64;
                    sw += lum;
                }
            }
            let (ex, ey) = ((sx / sw) as f32, (sy / sw) as f32);
            let err = ((ex - l.center_x).powi(2) + (ey - l.center_y).powi(2)).sqrt();
            assert!(err < 1.0, "centroid off by {err} px for center ({}, {})", l.center_x, l.center_y);
            checked += 1;
        }
        assert!(checked > 50, "only {checked} clean samples checked");
    }
}
