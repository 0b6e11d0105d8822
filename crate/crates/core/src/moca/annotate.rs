//! The four annotation types: prompt text, structure reference, object
//! references and boxes.

use serde::{Deserialize, Serialize};

use super::scene::{SceneObject, SceneSpec};
use crate::geometry::NormBox;
use crate::image::Image;

/// Background of object references, the 8-bit mid gray.
pub const GRAY: f64 = 128.0 / 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationBundle {
    pub text: String,
    /// White silhouette of all objects on black.
    pub structure_ref: Image,
    pub object_refs: Vec<Image>,
    pub boxes: Vec<NormBox>,
}

/// Serializable part of an annotation (images live in separate files).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMeta {
    pub text: String,
    pub boxes: Vec<NormBox>,
}

/// `"a scene with 3 red circles and 1 blue square"`: groups of equal color
/// and shape in canonical order, joined with "and" (serial comma from three
/// groups on).
pub fn describe(spec: &SceneSpec) -> String {
    let mut groups: Vec<(usize, &SceneObject)> = Vec::new();
    for o in &spec.objects {
        match groups.last_mut() {
            Some((n, g)) if g.color == o.color && g.shape == o.shape => *n += 1,
            _ => groups.push((1, o)),
        }
    }
    let phrases: Vec<String> = groups
        .iter()
        .map(|(n, o)| {
            let plural = if *n == 1 { "" } else { "s" };
            format!("{n} {} {}{plural}", o.color.name(), o.shape.name())
        })
        .collect();
    let body = match phrases.len() {
        0 => "nothing".to_string(),
        1 => phrases[0].clone(),
        2 => format!("{} and {}", phrases[0], phrases[1]),
        k => format!("{}, and {}", phrases[..k - 1].join(", "), phrases[k - 1]),
    };
    format!("a scene with {body}")
}

/// Total number of objects named in a prompt produced by [`describe`].
pub fn count_in_text(text: &str) -> usize {
    text.split(|c: char| !c.is_ascii_digit())
        .filter_map(|t| t.parse::<usize>().ok())
        .sum()
}

/// Tight pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) of a mask.
pub fn tight_rect(mask: &[(usize, usize)]) -> Option<(usize, usize, usize, usize)> {
    let x0 = mask.iter().map(|p| p.0).min()?;
    let y0 = mask.iter().map(|p| p.1).min()?;
    let x1 = mask.iter().map(|p| p.0).max()? + 1;
    let y1 = mask.iter().map(|p| p.1).max()? + 1;
    Some((x0, y0, x1, y1))
}

pub fn annotate(spec: &SceneSpec, rendered: &Image, ref_size: usize) -> AnnotationBundle {
    let size = spec.canvas;
    let mut structure = Image::filled(size, size, [0.0; 3]);
    let mut object_refs = Vec::with_capacity(spec.objects.len());
    let mut boxes = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        let mask = o.mask(size);
        for &(x, y) in &mask {
            structure.set(x, y, [1.0; 3]);
        }
        let (x0, y0, x1, y1) = tight_rect(&mask).expect("objects cover at least one pixel");
        boxes.push(NormBox::from_pixels(x0, y0, x1, y1, size));
        let mut crop = Image::filled(x1 - x0, y1 - y0, [GRAY; 3]);
        for &(x, y) in &mask {
            crop.set(x - x0, y - y0, rendered.get(x, y));
        }
        object_refs.push(crop.crop_resize(0, 0, crop.width, crop.height, ref_size, ref_size));
    }
    AnnotationBundle {
        text: describe(spec),
        structure_ref: structure,
        object_refs,
        boxes,
    }
}
