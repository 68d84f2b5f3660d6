//! Data augmentation on 32x32x3 float patches in [0, 1].
//!
//! Phase 1 applies geometry: affine scale/translate/rotate/shear with
//! bilinear resampling and zero fill, plus horizontal flipping, with label
//! coordinates transformed consistently. Phase 2 additionally applies
//! brightness, contrast and per-channel gain changes, motion blur, and
//! 8x8 block-DCT quantization that emulates compression artifacts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Label;

pub const W: usize = 32;
pub const H: usize = 32;
pub const C: usize = 3;

/// Pixel centers sit at integer coordinates 0..=31, so a horizontal flip
/// maps x to 31 - x.
const FLIP_MAX: f32 = (W - 1) as f32;
const CENTER: (f32, f32) = (FLIP_MAX / 2.0, FLIP_MAX / 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentPhase {
    /// Affine transforms and flipping only.
    Phase1,
    /// Affine plus photometric distortions, blur and compression artifacts.
    Phase2,
}

/// One sampled set of augmentation magnitudes.
#[derive(Debug, Clone)]
pub struct AugmentDraw {
    pub scale: f32,
    pub rotation: f32,
    pub shear: f32,
    pub translate: (f32, f32),
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub channel_gain: [f32; 3],
    pub blur: Option<(usize, f32)>,
    pub jpeg_quality: Option<u8>,
}

impl AugmentDraw {
    /// Neutral draw; applying it returns the input unchanged.
    pub fn identity() -> Self {
        AugmentDraw {
            scale: 1.0,
            rotation: 0.0,
            shear: 0.0,
            translate: (0.0, 0.0),
            flip: false,
            brightness: 0.0,
            contrast: 1.0,
            channel_gain: [1.0; 3],
            blur: None,
            jpeg_quality: None,
        }
    }

    pub fn sample(phase: AugmentPhase, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = AugmentDraw {
            scale: rng.gen_range(0.8..=1.2),
            rotation: rng.gen_range(-25.0f32..=25.0).to_radians(),
            shear: rng.gen_range(-10.0f32..=10.0).to_radians(),
            translate: (rng.gen_range(-4.0..=4.0), rng.gen_range(-4.0..=4.0)),
            flip: rng.gen_bool(0.5),
            ..AugmentDraw::identity()
        };
        if phase == AugmentPhase::Phase2 {
            draw.brightness = rng.gen_range(-0.25..=0.25);
            draw.contrast = rng.gen_range(0.75..=1.25);
            draw.channel_gain = [
                rng.gen_range(0.9..=1.1),
                rng.gen_range(0.9..=1.1),
                rng.gen_range(0.9..=1.1),
            ];
            if rng.gen_bool(0.5) {
                draw.blur = Some((rng.gen_range(2..=5), rng.gen_range(0.0..std::f32::consts::PI)));
            }
            draw.jpeg_quality = Some(rng.gen_range(40..=95));
        }
        draw
    }

    fn is_identity_geometry(&self) -> bool {
        self.scale == 1.0
            && self.rotation == 0.0
            && self.shear == 0.0
            && self.translate == (0.0, 0.0)
            && !self.flip
    }

    /// Apply to a patch and its label. The label class is never altered;
    /// geometry is transformed for ball labels only.
    pub fn apply(&self, pixels: &[f32], label: &Label) -> (Vec<f32>, Label) {
        assert_eq!(pixels.len(), W * H * C, "augment expects a 32x32x3 patch");
        let mut out = pixels.to_vec();
        let mut label = label.clone();

        if !self.is_identity_geometry() {
            let fwd = self.forward_matrix();
            out = resample(&out, &fwd, self.flip);
            if label.is_ball() {
                let (cx, cy) = apply_affine(&fwd, self.flip, (label.center_x, label.center_y));
                let [x0, y0, x1, y1] = label.bbox;
                let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
                let mut min = (f32::INFINITY, f32::INFINITY);
                let mut max = (f32::NEG_INFINITY, f32::NEG_INFINITY);
                for p in corners {
                    let q = apply_affine(&fwd, self.flip, p);
                    min.0 = min.0.min(q.0);
                    min.1 = min.1.min(q.1);
                    max.0 = max.0.max(q.0);
                    max.1 = max.1.max(q.1);
                }
                label.center_x = cx;
                label.center_y = cy;
                label.bbox = [min.0, min.1, max.0, max.1];
            }
        }

        if self.brightness != 0.0 {
            for v in out.iter_mut() {
                *v = (*v + self.brightness).clamp(0.0, 1.0);
            }
        }
        if self.contrast != 1.0 {
            for v in out.iter_mut() {
                *v = ((*v - 0.5) * self.contrast + 0.5).clamp(0.0, 1.0);
            }
        }
        if self.channel_gain != [1.0; 3] {
            for px in out.chunks_mut(C) {
                for (v, g) in px.iter_mut().zip(self.channel_gain) {
                    *v = (*v * g).clamp(0.0, 1.0);
                }
            }
        }
        if let Some((len, angle)) = self.blur {
            motion_blur(&mut out, len, angle);
        }
        if let Some(quality) = self.jpeg_quality {
            block_dct_quantize(&mut out, quality);
        }
        (out, label)
    }

    /// Linear part of the affine map (rotation * shear * scale), applied
    /// about the patch center together with the translation.
    fn forward_matrix(&self) -> [f32; 6] {
        let (sin, cos) = self.rotation.sin_cos();
        let k = self.shear.tan();
        let s = self.scale;
        // R * Sh * S with Sh = [[1, k], [0, 1]].
        let m = [s * cos, s * (k * cos - sin), s * sin, s * (k * sin + cos)];
        [m[0], m[1], m[2], m[3], self.translate.0, self.translate.1]
    }
}

fn apply_affine(m: &[f32; 6], flip: bool, p: (f32, f32)) -> (f32, f32) {
    let p = if flip { (FLIP_MAX - p.0, p.1) } else { p };
    let (dx, dy) = (p.0 - CENTER.0, p.1 - CENTER.1);
    (
        m[0] * dx + m[1] * dy + CENTER.0 + m[4],
        m[2] * dx + m[3] * dy + CENTER.1 + m[5],
    )
}

fn resample(pixels: &[f32], m: &[f32; 6], flip: bool) -> Vec<f32> {
    // Invert the 2x2 linear part for destination-to-source mapping.
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let mut out = vec![0.0f32; pixels.len()];
    for y in 0..H {
        for x in 0..W {
            let dx = x as f32 - CENTER.0 - m[4];
            let dy = y as f32 - CENTER.1 - m[5];
            let mut sx = inv[0] * dx + inv[1] * dy + CENTER.0;
            let sy = inv[2] * dx + inv[3] * dy + CENTER.1;
            if flip {
                sx = FLIP_MAX - sx;
            }
            let dst = (y * W + x) * C;
            bilinear_zero_fill(pixels, sx, sy, &mut out[dst..dst + C]);
        }
    }
    out
}

/// Bilinear sample with zero fill outside the patch.
fn bilinear_zero_fill(pixels: &[f32], x: f32, y: f32, out: &mut [f32]) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = [0.0f32; 3];
    for (oy, wy) in [(0i32, 1.0 - fy), (1, fy)] {
        let py = y0 as i32 + oy;
        if wy == 0.0 || py < 0 || py >= H as i32 {
            continue;
        }
        for (ox, wx) in [(0i32, 1.0 - fx), (1, fx)] {
            let px = x0 as i32 + ox;
            if wx == 0.0 || px < 0 || px >= W as i32 {
                continue;
            }
            let src = (py as usize * W + px as usize) * C;
            let w = wy * wx;
            for ch in 0..C {
                acc[ch] += w * pixels[src + ch];
            }
        }
    }
    out.copy_from_slice(&acc);
}

/// Line-kernel motion blur: `len` unit-spaced taps along `angle`, splatted
/// bilinearly into a small kernel and normalized. Borders clamp.
pub(crate) fn motion_blur(pixels: &mut Vec<f32>, len: usize, angle: f32) {
    if len < 2 {
        return;
    }
    let k = 5usize;
    let kc = (k / 2) as f32;
    let mut kernel = vec![0.0f32; k * k];
    let (sin, cos) = angle.sin_cos();
    for i in 0..len {
        let t = i as f32 - (len as f32 - 1.0) / 2.0;
        let (kx, ky) = (kc + t * cos, kc + t * sin);
        let (x0, y0) = (kx.floor(), ky.floor());
        let (fx, fy) = (kx - x0, ky - y0);
        for (oy, wy) in [(0i32, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0i32, 1.0 - fx), (1, fx)] {
                let px = (x0 as i32 + ox).clamp(0, k as i32 - 1) as usize;
                let py = (y0 as i32 + oy).clamp(0, k as i32 - 1) as usize;
                kernel[py * k + px] += wy * wx;
            }
        }
    }
    let sum: f32 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let src = pixels.clone();
    for y in 0..H {
        for x in 0..W {
            let mut acc = [0.0f32; 3];
            for ky in 0..k {
                let sy = (y as i32 + ky as i32 - k as i32 / 2).clamp(0, H as i32 - 1) as usize;
                for kx in 0..k {
                    let w = kernel[ky * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let sx = (x as i32 + kx as i32 - k as i32 / 2).clamp(0, W as i32 - 1) as usize;
                    let s = (sy * W + sx) * C;
                    for ch in 0..C {
                        acc[ch] += w * src[s + ch];
                    }
                }
            }
            let d = (y * W + x) * C;
            pixels[d..d + C].copy_from_slice(&acc);
        }
    }
}

/// Standard luminance quantization table, applied to every channel.
const QUANT_BASE: [f32; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn quant_table(quality: u8) -> [f32; 64] {
    let q = quality.clamp(1, 100) as f32;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0f32; 64];
    for i in 0..64 {
        t[i] = ((QUANT_BASE[i] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_matrix() -> [f32; 64] {
    let mut c = [0.0f32; 64];
    for u in 0..8 {
        let norm = if u == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
        for x in 0..8 {
            c[u * 8 + x] =
                norm * ((2.0 * x as f32 + 1.0) * u as f32 * std::f32::consts::PI / 16.0).cos();
        }
    }
    c
}

/// 8x8 block DCT, coefficient quantization, inverse DCT: the classic
/// compression artifact generator.
fn block_dct_quantize(pixels: &mut [f32], quality: u8) {
    let dct = dct_matrix();
    let table = quant_table(quality);
    let mut block = [0.0f32; 64];
    let mut tmp = [0.0f32; 64];
    let mut freq = [0.0f32; 64];
    for ch in 0..C {
        for by in (0..H).step_by(8) {
            for bx in (0..W).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = pixels[((by + y) * W + bx + x) * C + ch] * 255.0 - 128.0;
                    }
                }
                // freq = dct * block * dct^T
                mat8(&dct, &block, &mut tmp, false, false);
                mat8(&tmp, &dct, &mut freq, false, true);
                for i in 0..64 {
                    freq[i] = (freq[i] / table[i]).round() * table[i];
                }
                // block = dct^T * freq * dct
                mat8(&dct, &freq, &mut tmp, true, false);
                mat8(&tmp, &dct, &mut block, false, false);
                for y in 0..8 {
                    for x in 0..8 {
                        pixels[((by + y) * W + bx + x) * C + ch] =
                            ((block[y * 8 + x] + 128.0) / 255.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

/// 8x8 product `out = a * b`, optionally transposing either operand.
fn mat8(a: &[f32; 64], b: &[f32; 64], out: &mut [f32; 64], ta: bool, tb: bool) {
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0f32;
            for k in 0..8 {
                let av = if ta { a[k * 8 + i] } else { a[i * 8 + k] };
                let bv = if tb { b[j * 8 + k] } else { b[k * 8 + j] };
                acc += av * bv;
            }
            out[i * 8 + j] = acc;
        }
    }
}

/// Sample a draw for the phase and apply it.
pub fn augment(
    pixels: &[f32],
    label: &Label,
    phase: AugmentPhase,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Label) {
    AugmentDraw::sample(phase, rng).apply(pixels, label)
}
