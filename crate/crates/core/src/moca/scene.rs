//! Scene synthesis and exact rasterization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::NormBox;
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Continuous area of the shape inscribed in an `s x s` square.
    pub fn analytic_area(self, s: f64) -> f64 {
        match self {
            Shape::Circle => std::f64::consts::PI * s * s / 4.0,
            Shape::Square => s * s,
            Shape::Triangle => s * s / 2.0,
        }
    }

    /// Whether the pixel centre `(u, v)`, in units of the side and measured
    /// from the square's top-left corner, lies inside the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // Apex at the top centre, base along the bottom edge.
            Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
        }
    }
}

/// Palette order is also the canonical order of objects and text groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// The square the shape is inscribed in, on pixel boundaries.
    pub bbox: NormBox,
}

impl SceneObject {
    /// `(x0, y0, side)` in pixels.
    pub fn pixel_square(&self, size: usize) -> (usize, usize, usize) {
        let s = size as f64;
        let x0 = (self.bbox.x0 * s).round() as usize;
        let y0 = (self.bbox.y0 * s).round() as usize;
        let side = ((self.bbox.x1 - self.bbox.x0) * s).round() as usize;
        (x0, y0, side)
    }

    /// Pixel coordinates covered by the object.
    pub fn mask(&self, size: usize) -> Vec<(usize, usize)> {
        let (x0, y0, side) = self.pixel_square(size);
        let sf = side as f64;
        let mut px = Vec::new();
        for dy in 0..side {
            for dx in 0..side {
                if self.shape.covers((dx as f64 + 0.5) / sf, (dy as f64 + 0.5) / sf) {
                    px.push((x0 + dx, y0 + dy));
                }
            }
        }
        px
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Sorted by color, then shape, then position.
    pub objects: Vec<SceneObject>,
    pub canvas: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side range of an object's square, in pixels.
    pub min_side: usize,
    pub max_side: usize,
    /// Placement attempts per object before the count is reduced.
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 32,
            min_objects: 1,
            max_objects: 6,
            min_side: 7,
            max_side: 12,
            max_attempts: 200,
        }
    }
}

fn canonical_key(o: &SceneObject) -> (Color, Shape, u64, u64) {
    (o.color, o.shape, o.bbox.y0.to_bits(), o.bbox.x0.to_bits())
}

/// Draws a scene. Squares keep at least one pixel of background between
/// them, so every object stays a separate connected component and pairwise
/// box IoU is zero.
pub fn gen_scene(rng: &mut impl Rng, cfg: &SceneConfig, seed: u64) -> SceneSpec {
    let lo = cfg.min_objects.max(1);
    let hi = cfg.max_objects.max(lo);
    let want = rng.random_range(lo..=hi);
    let size = cfg.image_size;
    let mut squares: Vec<(usize, usize, usize)> = Vec::new();
    let mut objects = Vec::new();
    'objects: for _ in 0..want {
        for _ in 0..cfg.max_attempts {
            let side = rng.random_range(cfg.min_side..=cfg.max_side.min(size));
            let x = rng.random_range(0..=size - side);
            let y = rng.random_range(0..=size - side);
            let clear = squares.iter().all(|&(ox, oy, os)| {
                // Separated by at least one pixel on some axis.
                x >= ox + os + 1 || ox >= x + side + 1 || y >= oy + os + 1 || oy >= y + side + 1
            });
            if clear {
                squares.push((x, y, side));
                objects.push(SceneObject {
                    shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                    color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                    bbox: NormBox::from_pixels(x, y, x + side, y + side, size),
                });
                continue 'objects;
            }
        }
        break;
    }
    objects.sort_by_key(canonical_key);
    SceneSpec { objects, canvas: size, seed }
}

/// White canvas with exact, unantialiased shapes.
pub fn render(spec: &SceneSpec) -> Image {
    let mut img = Image::filled(spec.canvas, spec.canvas, BACKGROUND);
    for o in &spec.objects {
        for (x, y) in o.mask(spec.canvas) {
            img.set(x, y, o.color.rgb());
        }
    }
    img
}
