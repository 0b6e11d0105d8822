//! Dataset directories: `manifest.jsonl` plus binary PPM files under
//! `img/`, `struct/` and `obj/`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotate::AnnotationBundle;
use super::scene::SceneSpec;
use super::DataItem;
use crate::error::{Error, Result};
use crate::geometry::NormBox;
use crate::image::Image;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    boxes: Vec<NormBox>,
    image: String,
    structure: String,
    objects: Vec<String>,
    spec: SceneSpec,
}

pub fn save_dataset(items: &[DataItem], dir: &Path) -> Result<()> {
    for sub in ["img", "struct", "obj"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = std::io::BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    for (i, it) in items.iter().enumerate() {
        let rec = Record {
            text: it.annotation.text.clone(),
            boxes: it.annotation.boxes.clone(),
            image: format!("img/{i:06}.ppm"),
            structure: format!("struct/{i:06}.ppm"),
            objects: (0..it.annotation.object_refs.len()).map(|k| format!("obj/{i:06}_{k}.ppm")).collect(),
            spec: it.spec.clone(),
        };
        it.image.write_ppm(&dir.join(&rec.image))?;
        it.annotation.structure_ref.write_ppm(&dir.join(&rec.structure))?;
        for (img, name) in it.annotation.object_refs.iter().zip(&rec.objects) {
            img.write_ppm(&dir.join(name))?;
        }
        let line = serde_json::to_string(&rec).map_err(|e| Error::validation(e.to_string()))?;
        writeln!(manifest, "{line}")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DataItem>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::Io(e),
    })?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.clone(), line: n + 1, msg };
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.objects.len() != rec.boxes.len() {
            return Err(parse_err(format!("{} object files for {} boxes", rec.objects.len(), rec.boxes.len())));
        }
        for b in &rec.boxes {
            b.validate().map_err(|e| parse_err(e.to_string()))?;
        }
        let object_refs = rec.objects.iter().map(|f| Image::read_ppm(&dir.join(f))).collect::<Result<_>>()?;
        items.push(DataItem {
            image: Image::read_ppm(&dir.join(&rec.image))?,
            annotation: AnnotationBundle {
                text: rec.text,
                structure_ref: Image::read_ppm(&dir.join(&rec.structure))?,
                object_refs,
                boxes: rec.boxes,
            },
            spec: rec.spec,
        });
    }
    Ok(items)
}
