use rand::seq::IndexedRandom;
use rand::Rng;

use super::idx::DigitSet;
use crate::error::{Error, Result};

pub const CANVAS: usize = 32;
pub const CANVAS_PIXELS: usize = CANVAS * CANVAS;
pub const DIGIT: usize = 28;

pub const MIN_OCCLUSION: f64 = 0.20;
pub const MAX_OCCLUSION: f64 = 0.80;
pub const PLACEMENT_ATTEMPTS: usize = 1000;
pub const IDENTITY_RESAMPLES: usize = 10;

/// Top-left corner of a digit box in canvas coordinates, plus its depth plane
/// (0 = target, 1 = far occluder, 2 = near occluder).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub x: i32,
    pub y: i32,
    pub depth: u8,
}

/// Horizontal disparities (pixels) of the two occluder planes. Each eye sees
/// an occluder shifted by half its disparity, in opposite directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Disparity {
    pub far: u32,
    pub near: u32,
}

impl Default for Disparity {
    fn default() -> Self {
        Disparity { far: 2, near: 4 }
    }
}

impl Disparity {
    pub const MONO: Disparity = Disparity { far: 0, near: 0 };

    pub fn validate(&self) -> Result<()> {
        if !self.far.is_multiple_of(2) || !self.near.is_multiple_of(2) {
            return Err(Error::Invalid(format!("disparities must be even, got {self:?}")));
        }
        Ok(())
    }

    /// Horizontal shift of depth plane `depth` in the left (`eye = 0`) or right eye.
    pub fn shift(&self, depth: u8, eye: usize) -> i32 {
        let d = match depth {
            0 => 0,
            1 => self.far,
            _ => self.near,
        } as i32;
        if eye == 0 {
            d / 2
        } else {
            -d / 2
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub label: u16,
    pub occluder_labels: [u16; 2],
    /// Indices of the occluder images in the pool.
    pub occluder_indices: [usize; 2],
    /// Fraction of target ink hidden by occluder ink before the eye shifts.
    pub occlusion_fraction: f32,
    /// Same fraction as seen by the left and right eye.
    pub eye_occlusion: [f32; 2],
    pub placements: [Placement; 3],
    pub left: Vec<u8>,
    pub right: Vec<u8>,
    pub seed_path: String,
}

impl SceneSample {
    pub fn satisfies_constraints(&self) -> bool {
        let [a, b] = self.occluder_labels;
        a != b
            && a != self.label
            && b != self.label
            && self.occlusion_fraction >= MIN_OCCLUSION as f32
            && self.occlusion_fraction <= MAX_OCCLUSION as f32
    }
}

/// Visible extent of a digit box along one axis at offset `x`.
fn axis_overlap(x: i32) -> i32 {
    (x + DIGIT as i32).min(CANVAS as i32) - x.max(0)
}

/// Every offset whose digit box overlaps the canvas by at least half its area.
pub fn valid_offsets() -> Vec<(i32, i32)> {
    let lo = -(DIGIT as i32) + 1;
    let hi = CANVAS as i32 - 1;
    let half = (DIGIT * DIGIT) as i32;
    let mut out = Vec::new();
    for y in lo..=hi {
        for x in lo..=hi {
            let (w, h) = (axis_overlap(x), axis_overlap(y));
            if w > 0 && h > 0 && 2 * w * h >= half {
                out.push((x, y));
            }
        }
    }
    out
}

/// Canvas mask of a digit's ink (pixel > 0) at a given offset, clipped.
fn stamp(img: &[u8], x: i32, y: i32, mut f: impl FnMut(usize, u8)) {
    for r in 0..DIGIT {
        let cy = y + r as i32;
        if !(0..CANVAS as i32).contains(&cy) {
            continue;
        }
        for c in 0..DIGIT {
            let cx = x + c as i32;
            let v = img[r * DIGIT + c];
            if v > 0 && (0..CANVAS as i32).contains(&cx) {
                f(cy as usize * CANVAS + cx as usize, v);
            }
        }
    }
}

/// Back-to-front composite; every layer overwrites the canvas where it has ink.
pub fn composite(layers: &[(&[u8], Placement)], disparity: &Disparity, eye: usize) -> Vec<u8> {
    let mut canvas = vec![0u8; CANVAS_PIXELS];
    let mut order: Vec<_> = layers.to_vec();
    order.sort_by_key(|(_, p)| p.depth);
    for (img, p) in order {
        stamp(img, p.x + disparity.shift(p.depth, eye), p.y, |o, v| canvas[o] = v);
    }
    canvas
}

/// Hidden fraction of the target's ink given per-occluder horizontal shifts.
fn occlusion(target: &[u8], tp: Placement, occluders: &[(&[u8], Placement); 2], shifts: [i32; 2]) -> Option<f64> {
    let mut target_mask = [false; CANVAS_PIXELS];
    let mut total = 0usize;
    stamp(target, tp.x, tp.y, |o, _| {
        target_mask[o] = true;
        total += 1;
    });
    if total == 0 {
        return None;
    }
    let mut cover = [false; CANVAS_PIXELS];
    for ((img, p), s) in occluders.iter().zip(shifts) {
        stamp(img, p.x + s, p.y, |o, _| cover[o] = true);
    }
    let hidden = target_mask.iter().zip(&cover).filter(|(t, c)| **t && **c).count();
    Some(hidden as f64 / total as f64)
}

/// Images of a pool grouped by class.
#[derive(Clone, Debug)]
pub struct ScenePool<'a> {
    pub digits: &'a DigitSet,
    by_class: Vec<Vec<usize>>,
}

impl<'a> ScenePool<'a> {
    pub fn new(digits: &'a DigitSet) -> Result<Self> {
        if digits.rows != DIGIT || digits.cols != DIGIT {
            return Err(Error::Invalid(format!("digits must be {DIGIT}x{DIGIT}, got {}x{}", digits.rows, digits.cols)));
        }
        let classes = digits.labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in digits.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        if by_class.iter().filter(|v| !v.is_empty()).count() < 3 {
            return Err(Error::Invalid("scene pool needs digits of at least three classes".into()));
        }
        Ok(ScenePool { digits, by_class })
    }

    fn draw_occluders<R: Rng>(&self, target_label: u16, rng: &mut R) -> [usize; 2] {
        let mut classes: Vec<usize> =
            (0..self.by_class.len()).filter(|&c| c != target_label as usize && !self.by_class[c].is_empty()).collect();
        let first = classes.swap_remove(rng.random_range(0..classes.len()));
        let second = classes[rng.random_range(0..classes.len())];
        [first, second].map(|c| *self.by_class[c].choose(rng).expect("non-empty class"))
    }
}

/// Composes one occluded stereo scene around `target`.
///
/// Occluder identities are drawn from `pool` with classes distinct from each
/// other and the target. Placements are redrawn until the occlusion fraction
/// lies within bounds; after [`PLACEMENT_ATTEMPTS`] failures the occluders are
/// redrawn, and after [`IDENTITY_RESAMPLES`] redraws the scene is abandoned.
pub fn compose_scene<R: Rng>(
    target: &[u8],
    target_label: u16,
    pool: &ScenePool<'_>,
    offsets: &[(i32, i32)],
    disparity: &Disparity,
    rng: &mut R,
    seed_path: String,
) -> Result<SceneSample> {
    if pool.by_class.iter().enumerate().filter(|(c, v)| *c != target_label as usize && !v.is_empty()).count() < 2 {
        return Err(Error::Invalid(format!("pool lacks two classes other than {target_label}")));
    }
    for _ in 0..=IDENTITY_RESAMPLES {
        let ids = pool.draw_occluders(target_label, rng);
        let imgs = ids.map(|i| pool.digits.image(i));
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut place = |depth| {
                let &(x, y) = offsets.choose(rng).expect("offsets");
                Placement { x, y, depth }
            };
            let placements = [place(0), place(1), place(2)];
            let occ = [(imgs[0], placements[1]), (imgs[1], placements[2])];
            let Some(frac) = occlusion(target, placements[0], &occ, [0, 0]) else {
                continue;
            };
            if !(MIN_OCCLUSION..=MAX_OCCLUSION).contains(&frac) {
                continue;
            }
            let eye = |e| {
                occlusion(target, placements[0], &occ, [disparity.shift(1, e), disparity.shift(2, e)])
                    .expect("target ink present") as f32
            };
            let layers = [(target, placements[0]), occ[0], occ[1]];
            return Ok(SceneSample {
                label: target_label,
                occluder_labels: ids.map(|i| pool.digits.label(i) as u16),
                occluder_indices: ids,
                occlusion_fraction: frac as f32,
                eye_occlusion: [eye(0), eye(1)],
                placements,
                left: composite(&layers, disparity, 0),
                right: composite(&layers, disparity, 1),
                seed_path,
            });
        }
    }
    Err(Error::Unsatisfiable { context: seed_path })
}

/// Re-renders a composed scene's two views under another disparity table.
pub fn render_stereo(
    target: &[u8],
    occluders: [&[u8]; 2],
    placements: &[Placement; 3],
    disparity: &Disparity,
) -> (Vec<u8>, Vec<u8>) {
    let layers = [(target, placements[0]), (occluders[0], placements[1]), (occluders[1], placements[2])];
    (composite(&layers, disparity, 0), composite(&layers, disparity, 1))
}

/// Procedural stand-in for handwritten digits: seven-segment glyphs with
/// per-instance jitter in position, stroke width and intensity. Intended for
/// tests and smoke runs when MNIST is unavailable.
pub fn synthetic_digits<R: Rng>(per_class: usize, rng: &mut R) -> DigitSet {
    // segments: top, upper-left, upper-right, middle, lower-left, lower-right, bottom
    const SEGMENTS: [[bool; 7]; 10] = [
        [true, true, true, false, true, true, true],
        [false, false, true, false, false, true, false],
        [true, false, true, true, true, false, true],
        [true, false, true, true, false, true, true],
        [false, true, true, true, false, true, false],
        [true, true, false, true, false, true, true],
        [true, true, false, true, true, true, true],
        [true, false, true, false, false, true, false],
        [true, true, true, true, true, true, true],
        [true, true, true, true, false, true, true],
    ];
    let mut pixels = Vec::with_capacity(10 * per_class * DIGIT * DIGIT);
    let mut labels = Vec::with_capacity(10 * per_class);
    for _ in 0..per_class {
        for (class, segs) in SEGMENTS.iter().enumerate() {
            let mut img = [0u8; DIGIT * DIGIT];
            let left = rng.random_range(6..10i32);
            let right = left + rng.random_range(9..13);
            let top = rng.random_range(3..7i32);
            let bottom = top + rng.random_range(17..21);
            let mid = (top + bottom) / 2 + rng.random_range(-1..=1);
            let w = rng.random_range(2..4i32);
            let ink: u8 = rng.random_range(160..=255);
            let mut fill = |x0: i32, y0: i32, x1: i32, y1: i32| {
                for y in y0.max(0)..y1.min(DIGIT as i32) {
                    for x in x0.max(0)..x1.min(DIGIT as i32) {
                        img[y as usize * DIGIT + x as usize] = ink;
                    }
                }
            };
            let spans = [
                (left, top, right + w, top + w),
                (left, top, left + w, mid + w),
                (right, top, right + w, mid + w),
                (left, mid, right + w, mid + w),
                (left, mid, left + w, bottom + w),
                (right, mid, right + w, bottom + w),
                (left, bottom, right + w, bottom + w),
            ];
            for (on, &(x0, y0, x1, y1)) in segs.iter().zip(&spans) {
                if *on {
                    fill(x0, y0, x1, y1);
                }
            }
            pixels.extend_from_slice(&img);
            labels.push(class as u8);
        }
    }
    DigitSet::new(DIGIT, DIGIT, pixels, labels).expect("consistent extents")
}
