//! Scenes: the regions of one image with their features and optional labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kgraph::LabelSpace;

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub bbox: BBox,
    pub feature: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub regions: Vec<Region>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.regions.iter().map(|r| r.bbox).collect()
    }

    /// Ground-truth labels, failing if any region is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.regions
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.label.ok_or_else(|| {
                    Error::Invalid(format!("scene {}: region {i} has no label", self.id))
                })
            })
            .collect()
    }

    /// Keeps only regions annotated with seen classes.
    pub fn seen_only(&self, labels: &LabelSpace) -> Scene {
        Scene {
            id: self.id.clone(),
            regions: self
                .regions
                .iter()
                .filter(|r| r.label.is_some_and(|c| labels.is_seen(c)))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    scene_id: String,
    regions: Vec<RegionLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionLine {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    feature: Vec<f64>,
    label: Option<String>,
}

/// Serializes scenes as JSON lines, one scene per line.
pub fn write_scenes(scenes: &[Scene], labels: &LabelSpace) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        let line = SceneLine {
            scene_id: s.id.clone(),
            regions: s
                .regions
                .iter()
                .map(|r| RegionLine {
                    bbox: r.bbox.to_array(),
                    feature: r.feature.clone(),
                    label: r.label.map(|c| labels.name(c).to_string()),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_scenes(text: &str, labels: &LabelSpace) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::format(format!("scenes line {}", lineno + 1), m);
        let parsed: SceneLine = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let mut regions = Vec::with_capacity(parsed.regions.len());
        for r in parsed.regions {
            let bbox = BBox::from_array(r.bbox).map_err(|e| at(e.to_string()))?;
            let label = r
                .label
                .map(|name| labels.index_of(&name))
                .transpose()
                .map_err(|e| at(e.to_string()))?;
            match dim {
                None => dim = Some(r.feature.len()),
                Some(d) if d != r.feature.len() => {
                    return Err(at(format!(
                        "feature dimension {} differs from {d}",
                        r.feature.len()
                    )))
                }
                _ => {}
            }
            regions.push(Region {
                bbox,
                feature: r.feature,
                label,
            });
        }
        scenes.push(Scene {
            id: parsed.scene_id,
            regions,
        });
    }
    Ok(scenes)
}
