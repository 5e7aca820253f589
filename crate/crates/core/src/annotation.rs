//! Scene annotations and the COCO-style document they are stored in.
//!
//! Each image entry may carry an `occlusion` record
//! `{"rectangles": [[x, y, w, h], ...], "occluded_ids": [...]}` where the ids
//! are annotation ids of the instances whose centers the occluders hide.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxAnnotation {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::Config(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// From a COCO `[x, y, w, h]` box.
    pub fn from_xywh(b: [f64; 4]) -> Result<Self> {
        Self::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Pixel `(x, y)` containing the center, clamped into the image.
    pub fn center_pixel(&self, width: usize, height: usize) -> (usize, usize) {
        let (cx, cy) = self.center();
        let px = (cx.floor().max(0.0) as usize).min(width.saturating_sub(1));
        let py = (cy.floor().max(0.0) as usize).min(height.saturating_sub(1));
        (px, py)
    }

    /// Intersection with the image; `None` when nothing is left.
    pub fn clipped(&self, width: usize, height: usize) -> Option<Self> {
        let b = Self {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(width as f64),
            y_max: self.y_max.min(height as f64),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

/// One image and its instance annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedScene {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoxAnnotation>,
    /// Annotation id of each box, parallel to `boxes`.
    pub annotation_ids: Vec<u64>,
    pub class_id: usize,
    pub label: String,
    pub exemplars: Vec<BoxAnnotation>,
    pub occlusion: Option<OcclusionRecord>,
}

impl AnnotatedScene {
    pub fn count(&self) -> usize {
        self.boxes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRecord {
    pub rectangles: Vec<[u32; 4]>,
    pub occluded_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub window_infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exemplars: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<OcclusionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub category_id: usize,
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDocument {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Groups annotations per image, in image order. Annotations that refer
    /// to missing images are ignored; each image's class is the category of
    /// its first annotation.
    pub fn scenes(&self) -> Result<Vec<AnnotatedScene>> {
        let names: BTreeMap<usize, &str> =
            self.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        let mut per_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
        for ann in &self.annotations {
            per_image.entry(ann.image_id).or_default().push(ann);
        }
        self.images
            .iter()
            .map(|img| {
                let anns = per_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
                let class_id = anns.first().map(|a| a.category_id).unwrap_or(0);
                let boxes = anns
                    .iter()
                    .map(|a| BoxAnnotation::from_xywh(a.bbox))
                    .collect::<Result<Vec<_>>>()?;
                let exemplars = img
                    .exemplars
                    .iter()
                    .map(|b| BoxAnnotation::from_xywh(*b))
                    .collect::<Result<Vec<_>>>()?;
                Ok(AnnotatedScene {
                    id: img.id,
                    file_name: img.file_name.clone(),
                    width: img.width,
                    height: img.height,
                    boxes,
                    annotation_ids: anns.iter().map(|a| a.id).collect(),
                    class_id,
                    label: names.get(&class_id).unwrap_or(&"object").to_string(),
                    exemplars,
                    occlusion: img.occlusion.clone(),
                })
            })
            .collect()
    }

    /// Builds a document from scenes; annotation ids are kept as given.
    pub fn from_scenes(scenes: &[AnnotatedScene], categories: Vec<CocoCategory>) -> Self {
        let mut doc = CocoDocument { categories, ..Default::default() };
        for scene in scenes {
            doc.images.push(CocoImage {
                id: scene.id,
                file_name: scene.file_name.clone(),
                width: scene.width,
                height: scene.height,
                exemplars: scene.exemplars.iter().map(BoxAnnotation::to_xywh).collect(),
                occlusion: scene.occlusion.clone(),
            });
            for (b, &ann_id) in scene.boxes.iter().zip(&scene.annotation_ids) {
                let bbox = b.to_xywh();
                doc.annotations.push(CocoAnnotation {
                    id: ann_id,
                    image_id: scene.id,
                    bbox,
                    category_id: scene.class_id,
                    area: bbox[2] * bbox[3],
                    iscrowd: 0,
                });
            }
        }
        doc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BoxAnnotation::new(1.0, 1.0, 1.0, 2.0).is_err());
        assert!(BoxAnnotation::from_xywh([0.0, 0.0, 2.0, 0.0]).is_err());
    }

    #[test]
    fn center_pixel_clamps_to_image() {
        let b = BoxAnnotation::new(8.0, 8.0, 12.0, 12.0).unwrap();
        assert_eq!(b.center_pixel(10, 10), (9, 9));
        assert_eq!(b.center_pixel(20, 20), (10, 10));
    }

    #[test]
    fn document_round_trip_preserves_scenes() {
        let scene = AnnotatedScene {
            id: 3,
            file_name: "a.png".into(),
            width: 32,
            height: 24,
            boxes: vec![BoxAnnotation::new(1.0, 2.0, 5.0, 6.0).unwrap()],
            annotation_ids: vec![17],
            class_id: 2,
            label: "ring".into(),
            exemplars: vec![BoxAnnotation::new(1.0, 2.0, 5.0, 6.0).unwrap()],
            occlusion: Some(OcclusionRecord {
                rectangles: vec![[0, 0, 4, 4]],
                occluded_ids: vec![17],
                fallback: false,
                window_infeasible: true,
            }),
        };
        let doc = CocoDocument::from_scenes(
            std::slice::from_ref(&scene),
            vec![CocoCategory { id: 2, name: "ring".into() }],
        );
        let json = serde_json::to_string(&doc).unwrap();
        assert!(json.contains("\"occlusion\":{\"rectangles\":[[0,0,4,4]],\"occluded_ids\":[17]"));
        let back: CocoDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back.scenes().unwrap(), vec![scene]);
    }
}
