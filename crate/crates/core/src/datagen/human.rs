//! Procedural articulated figures with exact part labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, ParsingLogits};

/// Minimum empty border, in pixels, between the figure and the canvas edge.
pub const BORDER_MARGIN: usize = 5;

/// Smallest canvas side the generator accepts.
pub const MIN_CANVAS: usize = 32;

/// An unoccluded human: appearance, amodal mask and part labels.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanRecord {
    pub image: ImageTensor,
    pub amodal: BinaryMask,
    pub parsing: ParsingLogits,
}

/// Body parts in painting order; later parts cover earlier ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    LeftLeg,
    RightLeg,
    Torso,
    LeftArm,
    RightArm,
    Head,
}

impl Part {
    /// Index in the canonical seven-class layout (0 is background).
    fn canonical(self) -> usize {
        match self {
            Part::Head => 1,
            Part::Torso => 2,
            Part::LeftArm => 3,
            Part::RightArm => 4,
            Part::LeftLeg => 5,
            Part::RightLeg => 6,
        }
    }

    /// Label under a `part_count`-class layout; parts wrap when fewer than
    /// six foreground classes exist.
    fn label(self, part_count: usize) -> u8 {
        (((self.canonical() - 1) % (part_count - 1)) + 1) as u8
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Capsule { ax: f64, ay: f64, bx: f64, by: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Capsule { ax, ay, bx, by, r } => {
                let (vx, vy) = (bx - ax, by - ay);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((x - ax) * vx + (y - ay) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (ax + t * vx - x, ay + t * vy - y);
                px * px + py * py <= r * r
            }
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Shape::Capsule { ax, ay, bx, by, r } => {
                (ax.min(bx) - r, ay.min(by) - r, ax.max(bx) + r, ay.max(by) + r)
            }
        }
    }

    fn map(&self, f: impl Fn(f64, f64) -> (f64, f64), scale: f64) -> Shape {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (cx, cy) = f(cx, cy);
                Shape::Ellipse {
                    cx,
                    cy,
                    rx: rx * scale,
                    ry: ry * scale,
                }
            }
            Shape::Capsule { ax, ay, bx, by, r } => {
                let (ax, ay) = f(ax, ay);
                let (bx, by) = f(bx, by);
                Shape::Capsule {
                    ax,
                    ay,
                    bx,
                    by,
                    r: r * scale,
                }
            }
        }
    }
}

/// Figure in unit coordinates: height ≈ 1, horizontally centred on 0.
fn sample_pose(rng: &mut ChaCha8Rng) -> Vec<(Part, Shape)> {
    let mut shapes = Vec::new();
    let head_ry = rng.gen_range(0.075..0.095);
    let head_rx = head_ry * rng.gen_range(0.75..0.95);
    let head_cy = head_ry;
    let torso_top = head_cy + head_ry * 0.85;
    let torso_bottom = rng.gen_range(0.52..0.58);
    let torso_rx = rng.gen_range(0.11..0.16);
    let lean = rng.gen_range(-0.03..0.03);

    let hip_y = torso_bottom - 0.03;
    for (side, part) in [(-1.0, Part::LeftLeg), (1.0, Part::RightLeg)] {
        let hip_x = side * torso_rx * 0.5;
        let spread: f64 = rng.gen_range(0.0..0.35);
        let len = 1.0 - hip_y - 0.04;
        let (fx, fy) = (hip_x + side * spread.sin() * len, hip_y + spread.cos() * len);
        let r = rng.gen_range(0.045..0.06);
        shapes.push((part, Shape::Capsule { ax: hip_x, ay: hip_y, bx: fx, by: fy, r }));
    }

    let torso_cy = 0.5 * (torso_top + torso_bottom);
    shapes.push((
        Part::Torso,
        Shape::Ellipse {
            cx: lean,
            cy: torso_cy,
            rx: torso_rx,
            ry: 0.5 * (torso_bottom - torso_top) + 0.02,
        },
    ));

    let shoulder_y = torso_top + 0.05;
    for (side, part) in [(-1.0, Part::LeftArm), (1.0, Part::RightArm)] {
        let sx = lean + side * (torso_rx - 0.02);
        // angle from straight down, opening outward
        let upper: f64 = rng.gen_range(0.15..1.9);
        let bend: f64 = rng.gen_range(-0.6..0.9);
        let (l1, l2) = (rng.gen_range(0.15..0.19), rng.gen_range(0.14..0.18));
        let ex = sx + side * upper.sin() * l1;
        let ey = shoulder_y + upper.cos() * l1;
        let lower = upper + bend;
        let hx = ex + side * lower.sin() * l2;
        let hy = ey + lower.cos() * l2;
        let r = rng.gen_range(0.035..0.05);
        shapes.push((part, Shape::Capsule { ax: sx, ay: shoulder_y, bx: ex, by: ey, r }));
        shapes.push((part, Shape::Capsule { ax: ex, ay: ey, bx: hx, by: hy, r: r * 0.9 }));
    }

    shapes.push((
        Part::Head,
        Shape::Ellipse {
            cx: lean * 1.5,
            cy: head_cy,
            rx: head_rx,
            ry: head_ry,
        },
    ));
    shapes
}

fn random_rgb(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Deterministically generates one human of `size = (H, W)` with `part_count` classes.
pub fn generate_human(seed: u64, size: (usize, usize), part_count: usize) -> Result<HumanRecord> {
    let (h, w) = size;
    if h < MIN_CANVAS || w < MIN_CANVAS {
        return Err(Error::Sizing {
            height: h,
            width: w,
            reason: format!("both sides must be at least {MIN_CANVAS} pixels"),
        });
    }
    if !(2..=256).contains(&part_count) {
        return Err(Error::Validation(format!("part count {part_count} outside 2..=256")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = sample_pose(&mut rng);

    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (_, s) in &pose {
        let (a, b, c, d) = s.bbox();
        x0 = x0.min(a);
        y0 = y0.min(b);
        x1 = x1.max(c);
        y1 = y1.max(d);
    }
    // one extra pixel of slack absorbs rasterisation at the bbox edge
    let avail_h = (h - 2 * BORDER_MARGIN - 2) as f64;
    let avail_w = (w - 2 * BORDER_MARGIN - 2) as f64;
    let fit = (avail_h / (y1 - y0)).min(avail_w / (x1 - x0));
    let scale = fit * rng.gen_range(0.82..1.0);
    if scale * (y1 - y0) < 16.0 {
        return Err(Error::Sizing {
            height: h,
            width: w,
            reason: "figure would be under 16 pixels tall".into(),
        });
    }
    let slack_x = avail_w - scale * (x1 - x0);
    let slack_y = avail_h - scale * (y1 - y0);
    let off_x = BORDER_MARGIN as f64 + 1.0 + rng.gen_range(0.0..=slack_x.max(0.0)) - scale * x0;
    let off_y = BORDER_MARGIN as f64 + 1.0 + rng.gen_range(0.0..=slack_y.max(0.0)) - scale * y0;
    let placed: Vec<(Part, Shape)> = pose
        .iter()
        .map(|(p, s)| (*p, s.map(|x, y| (off_x + scale * x, off_y + scale * y), scale)))
        .collect();

    let mut labels = vec![0u8; h * w];
    let mut part_of = vec![None::<Part>; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (part, shape) in &placed {
                if shape.contains(px, py) {
                    part_of[y * w + x] = Some(*part);
                }
            }
            if let Some(p) = part_of[y * w + x] {
                labels[y * w + x] = p.label(part_count);
            }
        }
    }

    let background = random_rgb(&mut rng, 0.1, 0.9);
    let bg_grad = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
    let mut palette = [[0.0; 3]; 7];
    for c in palette.iter_mut().skip(1) {
        *c = random_rgb(&mut rng, 0.12, 0.88);
    }
    let shade = rng.gen_range(-0.06..0.06);
    let mut image = ImageTensor::from_fn(h, w, |c, y, x| {
        let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
        background[c] + bg_grad[0] * u + bg_grad[1] * v
    });
    for y in 0..h {
        for x in 0..w {
            let v = y as f64 / h as f64 - 0.5;
            let part = part_of[y * w + x];
            for c in 0..3 {
                let base = match part {
                    Some(p) => palette[p.canonical()][c] + shade * v,
                    None => image.get(c, y, x),
                };
                let noise = rng.gen_range(-0.03..0.03);
                image.set(c, y, x, base + noise);
            }
        }
    }

    let amodal = BinaryMask::new(h, w, labels.iter().map(|&l| (l > 0) as u8).collect())?;
    let parsing = ParsingLogits::new(part_count, h, w, labels)?;
    Ok(HumanRecord {
        image,
        amodal,
        parsing,
    })
}
