//! Procedurally drawn faces with exact 11-class label maps.
//!
//! Each identity fixes skin tone, hair, and facial proportions; each image of
//! that identity jitters position, lighting and expression. Small enough to
//! train on in seconds, structured enough that completion and parsing have
//! something to learn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::networks::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub size: usize,
    pub identities: usize,
    pub per_identity: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(size: usize, identities: usize, per_identity: usize, seed: u64) -> Self {
        Self {
            size,
            identities,
            per_identity,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFace {
    pub id: String,
    pub identity: usize,
    pub image: ImageTensor,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
struct Identity {
    skin: [f32; 3],
    hair: [f32; 3],
    iris: [f32; 3],
    lips: [f32; 3],
    background: [f32; 3],
    face_rx: f32,
    face_ry: f32,
    hairline: f32,
    eye_dx: f32,
    eye_y: f32,
    eye_rx: f32,
    eye_ry: f32,
    brow_gap: f32,
    brow_thickness: f32,
    nose_len: f32,
    nose_width: f32,
    mouth_y: f32,
    mouth_rx: f32,
    lip_thickness: f32,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    rng.random_range(lo..hi)
}

impl Identity {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone = uniform(rng, 0.0, 1.0);
        let skin = [0.95 - 0.45 * tone, 0.78 - 0.42 * tone, 0.66 - 0.40 * tone];
        let hair_palette = [
            [0.10, 0.07, 0.05],
            [0.35, 0.22, 0.12],
            [0.80, 0.66, 0.38],
            [0.55, 0.20, 0.08],
            [0.45, 0.45, 0.48],
        ];
        let hair = hair_palette[rng.random_range(0..hair_palette.len())];
        let iris_palette = [[0.25, 0.15, 0.08], [0.20, 0.40, 0.65], [0.25, 0.50, 0.30]];
        let iris = iris_palette[rng.random_range(0..iris_palette.len())];
        Self {
            skin,
            hair,
            iris,
            lips: [uniform(rng, 0.6, 0.85), uniform(rng, 0.2, 0.35), uniform(rng, 0.25, 0.4)],
            background: [uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9)],
            face_rx: uniform(rng, 0.27, 0.33),
            face_ry: uniform(rng, 0.35, 0.41),
            hairline: uniform(rng, 0.45, 0.65),
            eye_dx: uniform(rng, 0.12, 0.16),
            eye_y: uniform(rng, -0.08, -0.03),
            eye_rx: uniform(rng, 0.05, 0.065),
            eye_ry: uniform(rng, 0.022, 0.032),
            brow_gap: uniform(rng, 0.055, 0.075),
            brow_thickness: uniform(rng, 0.014, 0.024),
            nose_len: uniform(rng, 0.10, 0.14),
            nose_width: uniform(rng, 0.035, 0.05),
            mouth_y: uniform(rng, 0.17, 0.21),
            mouth_rx: uniform(rng, 0.08, 0.12),
            lip_thickness: uniform(rng, 0.018, 0.028),
        }
    }
}

fn in_ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Label of a point in face coordinates (unit = image side,
/// origin at the face centre).
fn classify(id: &Identity, x: f32, y: f32, mouth_open: f32) -> u8 {
    let head = in_ellipse(x, y, 0.0, -0.04, id.face_rx * 1.18, id.face_ry * 1.12);
    let face = in_ellipse(x, y, 0.0, 0.0, id.face_rx, id.face_ry);
    if !face {
        return if head && y < id.face_ry * 0.35 { 10 } else { 0 };
    }
    if y < -id.face_ry * id.hairline {
        return 10;
    }
    for (side, (brow, eye)) in [(-1.0f32, (2u8, 4u8)), (1.0, (3, 5))] {
        let ex = side * id.eye_dx;
        let by = id.eye_y - id.brow_gap;
        if (x - ex).abs() <= id.eye_rx * 1.15 && (y - by).abs() <= id.brow_thickness * (1.0 - 0.3 * ((x - ex) / id.eye_rx).abs()) {
            return brow;
        }
        if in_ellipse(x, y, ex, id.eye_y, id.eye_rx, id.eye_ry) {
            return eye;
        }
    }
    let nose_top = id.eye_y + id.eye_ry;
    let nose_bottom = nose_top + id.nose_len;
    if y >= nose_top && y <= nose_bottom {
        let t = (y - nose_top) / id.nose_len;
        if x.abs() <= id.nose_width * (0.35 + 0.65 * t) {
            return 6;
        }
    }
    let gap = id.lip_thickness * 0.9 * mouth_open;
    if in_ellipse(x, y, 0.0, id.mouth_y, id.mouth_rx, gap + 2.0 * id.lip_thickness) {
        if y < id.mouth_y - gap {
            return 7;
        }
        if y > id.mouth_y + gap {
            return 9;
        }
        return 8;
    }
    1
}

fn shade(id: &Identity, label: u8, x: f32, y: f32, px: (usize, usize)) -> [f32; 3] {
    let mix = |c: [f32; 3], k: f32| c.map(|v| v * k);
    match label {
        0 => {
            let k = 0.85 + 0.3 * (y + 0.5);
            mix(id.background, k)
        }
        1 => {
            let d = (x / id.face_rx).powi(2) + (y / id.face_ry).powi(2);
            mix(id.skin, 1.05 - 0.22 * d)
        }
        2 | 3 => mix(id.hair, 0.85),
        4 | 5 => {
            let ex = if label == 4 { -id.eye_dx } else { id.eye_dx };
            if in_ellipse(x, y, ex, id.eye_y, id.eye_ry * 1.1, id.eye_ry * 1.1) {
                id.iris
            } else {
                [0.93, 0.92, 0.9]
            }
        }
        6 => {
            let k = 0.9 - 0.15 * (x.abs() / id.nose_width);
            mix(id.skin, k)
        }
        7 => mix(id.lips, 0.9),
        8 => [0.35, 0.08, 0.1],
        9 => id.lips,
        _ => {
            let strand = 0.9 + 0.1 * ((px.1 as f32) * 0.9 + (px.0 as f32) * 0.2).sin();
            mix(id.hair, strand)
        }
    }
}

/// Renders one face. `jitter` is `(dx, dy, brightness, mouth_open)`.
fn render(id: &Identity, size: usize, jitter: (f32, f32, f32, f32), noise_seed: u64) -> (ImageTensor, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (dx, dy, brightness, mouth_open) = jitter;
    let s = size as f32;
    let mut labels = Vec::with_capacity(size * size);
    let mut data = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let x = (c as f32 + 0.5) / s - 0.5 - dx;
            let y = (r as f32 + 0.5) / s - 0.5 - dy;
            let label = classify(id, x, y, mouth_open);
            let colour = shade(id, label, x, y, (r, c));
            labels.push(label);
            for v in colour {
                let n: f32 = rng.random_range(-0.015..0.015);
                data.push((v * brightness + n).clamp(0.0, 1.0));
            }
        }
    }
    (
        ImageTensor::new(size, size, data).expect("clamped values"),
        LabelMap::new(size, size, labels).expect("labels within range"),
    )
}

/// Deterministic set of `identities × per_identity` faces, identity-major.
pub fn synthetic_faces(cfg: &SyntheticConfig) -> Result<Vec<SyntheticFace>> {
    if cfg.size < 16 || cfg.identities == 0 || cfg.per_identity == 0 {
        return Err(Error::Argument(format!(
            "synthetic set needs size >= 16 and at least one face, got {cfg:?}"
        )));
    }
    let mut faces = Vec::with_capacity(cfg.identities * cfg.per_identity);
    for identity in 0..cfg.identities {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (identity as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let id = Identity::sample(&mut rng);
        for k in 0..cfg.per_identity {
            let jitter = (
                uniform(&mut rng, -0.02, 0.02),
                uniform(&mut rng, -0.02, 0.02),
                uniform(&mut rng, 0.92, 1.08),
                if rng.random_bool(0.4) { uniform(&mut rng, 0.3, 1.0) } else { 0.0 },
            );
            let (image, labels) = render(&id, cfg.size, jitter, rng.random());
            faces.push(SyntheticFace {
                id: format!("id{identity:03}_{k:02}"),
                identity,
                image,
                labels,
            });
        }
    }
    Ok(faces)
}
