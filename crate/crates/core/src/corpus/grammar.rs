use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PATHOLOGY_SLOT: &str = "{pathology}";
pub const ANATOMY_SLOT: &str = "{anatomy}";
pub const SENTENCE_END: &str = ".";

/// Axis-aligned rectangle in pixel coordinates, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl RegionBox {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        RegionBox {
            top,
            left,
            height,
            width,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Geometry of the planted lesion for one pathology. `sigma` is the width of
/// the Gaussian intensity profile around the shape's skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum LesionShape {
    Blob {
        sigma: f64,
    },
    Streak {
        length: f64,
        angle_deg: f64,
        sigma: f64,
    },
    Ring {
        radius: f64,
        sigma: f64,
    },
    Square {
        half: f64,
        sigma: f64,
    },
    Cluster {
        spacing: f64,
        sigma: f64,
    },
    Cross {
        arm: f64,
        sigma: f64,
    },
}

impl LesionShape {
    /// Distance from `(dy, dx)` (relative to the lesion center) to the skeleton.
    pub fn distance(&self, dy: f64, dx: f64) -> f64 {
        match *self {
            LesionShape::Blob { .. } => (dy * dy + dx * dx).sqrt(),
            LesionShape::Streak {
                length, angle_deg, ..
            } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                segment_distance(dy, dx, s * length / 2.0, c * length / 2.0)
            }
            LesionShape::Ring { radius, .. } => ((dy * dy + dx * dx).sqrt() - radius).abs(),
            LesionShape::Square { half, .. } => {
                let ox = (dx.abs() - half).max(0.0);
                let oy = (dy.abs() - half).max(0.0);
                (ox * ox + oy * oy).sqrt()
            }
            LesionShape::Cluster { spacing, .. } => {
                [(0.0, -spacing), (0.0, spacing), (-spacing, 0.0)]
                    .iter()
                    .map(|(cy, cx)| ((dy - cy).powi(2) + (dx - cx).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            }
            LesionShape::Cross { arm, .. } => {
                segment_distance(dy, dx, arm, arm).min(segment_distance(dy, dx, arm, -arm))
            }
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            LesionShape::Blob { sigma }
            | LesionShape::Streak { sigma, .. }
            | LesionShape::Ring { sigma, .. }
            | LesionShape::Square { sigma, .. }
            | LesionShape::Cluster { sigma, .. }
            | LesionShape::Cross { sigma, .. } => sigma,
        }
    }

    /// Half extent of the bright part of the lesion, in pixels.
    pub fn extent(&self) -> f64 {
        let core = match *self {
            LesionShape::Blob { .. } => 0.0,
            LesionShape::Streak { length, .. } => length / 2.0,
            LesionShape::Ring { radius, .. } => radius,
            LesionShape::Square { half, .. } => half,
            LesionShape::Cluster { spacing, .. } => spacing,
            LesionShape::Cross { arm, .. } => arm * std::f64::consts::SQRT_2,
        };
        core + self.sigma()
    }
}

/// Distance from a point to the segment between `-(ey, ex)` and `(ey, ex)`.
fn segment_distance(dy: f64, dx: f64, ey: f64, ex: f64) -> f64 {
    let len2 = ey * ey + ex * ex;
    let t = if len2 > 0.0 {
        ((dy * ey + dx * ex) / len2).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    ((dy - t * ey).powi(2) + (dx - t * ex).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomySpec {
    pub name: String,
    pub region: RegionBox,
    /// Mean brightness added inside the region.
    pub brightness: f64,
    /// Stripe texture period in pixels and orientation.
    pub texture_period: f64,
    pub texture_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologySpec {
    pub name: String,
    pub lesion: LesionShape,
    /// Peak intensity added at the lesion skeleton.
    pub contrast: f64,
}

/// Controlled report grammar plus the image model that goes with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub anatomies: Vec<AnatomySpec>,
    pub pathologies: Vec<PathologySpec>,
    /// Sentences stating a finding; must contain both slots.
    pub positive_templates: Vec<String>,
    /// Sentences denying findings; each contains at least one slot.
    pub negative_templates: Vec<String>,
    /// Sentence used when a sample has no findings at all.
    pub healthy_sentence: String,
    /// Probability that an anatomy carries at least one pathology.
    pub abnormal_rate: f64,
    /// Probability that an abnormal anatomy carries a second pathology.
    pub second_finding_rate: f64,
    pub min_negatives: usize,
    pub max_negatives: usize,
    pub background_level: f64,
    pub background_amplitude: f64,
    pub texture_amplitude: f64,
    pub pixel_noise: f64,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        let anatomy =
            |name: &str, region: RegionBox, brightness: f64, period: f64, angle: f64| AnatomySpec {
                name: name.to_string(),
                region,
                brightness,
                texture_period: period,
                texture_angle_deg: angle,
            };
        let pathology = |name: &str, lesion: LesionShape, contrast: f64| PathologySpec {
            name: name.to_string(),
            lesion,
            contrast,
        };
        GrammarSpec {
            image_height: 64,
            image_width: 64,
            anatomies: vec![
                anatomy("right lung", RegionBox::new(6, 4, 38, 22), 0.10, 6.0, 0.0),
                anatomy("left lung", RegionBox::new(6, 38, 38, 22), 0.10, 6.0, 90.0),
                anatomy("heart", RegionBox::new(34, 22, 20, 22), 0.22, 9.0, 45.0),
                anatomy("mediastinum", RegionBox::new(2, 26, 30, 12), 0.18, 4.0, 0.0),
                anatomy(
                    "right hilum",
                    RegionBox::new(18, 16, 14, 12),
                    0.14,
                    5.0,
                    135.0,
                ),
                anatomy(
                    "left hilum",
                    RegionBox::new(18, 36, 14, 12),
                    0.14,
                    5.0,
                    45.0,
                ),
                anatomy(
                    "right costophrenic angle",
                    RegionBox::new(46, 2, 16, 18),
                    0.06,
                    7.0,
                    30.0,
                ),
                anatomy(
                    "left costophrenic angle",
                    RegionBox::new(46, 44, 16, 18),
                    0.06,
                    7.0,
                    150.0,
                ),
            ],
            pathologies: vec![
                pathology("opacity", LesionShape::Blob { sigma: 3.0 }, 0.45),
                pathology(
                    "effusion",
                    LesionShape::Streak {
                        length: 10.0,
                        angle_deg: 0.0,
                        sigma: 1.2,
                    },
                    0.5,
                ),
                pathology(
                    "pneumothorax",
                    LesionShape::Streak {
                        length: 10.0,
                        angle_deg: 90.0,
                        sigma: 1.0,
                    },
                    0.5,
                ),
                pathology(
                    "consolidation",
                    LesionShape::Square {
                        half: 3.0,
                        sigma: 0.8,
                    },
                    0.4,
                ),
                pathology("nodule", LesionShape::Blob { sigma: 1.3 }, 0.6),
                pathology(
                    "atelectasis",
                    LesionShape::Streak {
                        length: 10.0,
                        angle_deg: 45.0,
                        sigma: 1.0,
                    },
                    0.5,
                ),
                pathology(
                    "edema",
                    LesionShape::Cluster {
                        spacing: 3.0,
                        sigma: 1.0,
                    },
                    0.5,
                ),
                pathology(
                    "mass",
                    LesionShape::Ring {
                        radius: 3.5,
                        sigma: 0.9,
                    },
                    0.5,
                ),
                pathology(
                    "pneumonia",
                    LesionShape::Streak {
                        length: 10.0,
                        angle_deg: 135.0,
                        sigma: 1.0,
                    },
                    0.5,
                ),
                pathology(
                    "fracture",
                    LesionShape::Cross {
                        arm: 3.0,
                        sigma: 0.8,
                    },
                    0.5,
                ),
            ],
            positive_templates: vec![
                "{pathology} is seen in the {anatomy} .".to_string(),
                "there is {pathology} in the {anatomy} .".to_string(),
            ],
            negative_templates: vec![
                "no {pathology} .".to_string(),
                "the {anatomy} is normal .".to_string(),
            ],
            healthy_sentence: "no acute findings .".to_string(),
            abnormal_rate: 0.2,
            second_finding_rate: 0.3,
            min_negatives: 1,
            max_negatives: 3,
            background_level: 0.15,
            background_amplitude: 0.05,
            texture_amplitude: 0.03,
            pixel_noise: 0.02,
        }
    }
}

/// What a sentence template asserts once its slots are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Template {
    pub kind: TemplateKind,
    pub tokens: Vec<String>,
    pub has_pathology: bool,
    pub has_anatomy: bool,
}

impl Template {
    fn parse(kind: TemplateKind, text: &str) -> Self {
        let tokens = tokenize(text);
        let has_pathology = tokens.iter().any(|t| t == PATHOLOGY_SLOT);
        let has_anatomy = tokens.iter().any(|t| t == ANATOMY_SLOT);
        Template {
            kind,
            tokens,
            has_pathology,
            has_anatomy,
        }
    }

    pub fn instantiate(&self, pathology: Option<&str>, anatomy: Option<&str>) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.tokens {
            match t.as_str() {
                PATHOLOGY_SLOT => out.extend(tokenize(pathology.expect("pathology slot filled"))),
                ANATOMY_SLOT => out.extend(tokenize(anatomy.expect("anatomy slot filled"))),
                _ => out.push(t.clone()),
            }
        }
        out
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

impl GrammarSpec {
    pub fn n_pathologies(&self) -> usize {
        self.pathologies.len()
    }

    pub fn n_anatomies(&self) -> usize {
        self.anatomies.len()
    }

    pub fn pathology_names(&self) -> Vec<String> {
        self.pathologies.iter().map(|p| p.name.clone()).collect()
    }

    pub fn anatomy_names(&self) -> Vec<String> {
        self.anatomies.iter().map(|a| a.name.clone()).collect()
    }

    pub fn pathology_index(&self, name: &str) -> Option<usize> {
        self.pathologies.iter().position(|p| p.name == name)
    }

    pub fn anatomy_index(&self, name: &str) -> Option<usize> {
        self.anatomies.iter().position(|a| a.name == name)
    }

    pub(crate) fn templates(&self) -> (Vec<Template>, Vec<Template>) {
        (
            self.positive_templates
                .iter()
                .map(|t| Template::parse(TemplateKind::Positive, t))
                .collect(),
            self.negative_templates
                .iter()
                .map(|t| Template::parse(TemplateKind::Negative, t))
                .collect(),
        )
    }

    /// Closed word set of every report the grammar can emit, sorted.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words = BTreeSet::new();
        let texts = self
            .positive_templates
            .iter()
            .chain(&self.negative_templates)
            .chain(std::iter::once(&self.healthy_sentence))
            .chain(self.pathologies.iter().map(|p| &p.name))
            .chain(self.anatomies.iter().map(|a| &a.name));
        for text in texts {
            for tok in tokenize(text) {
                if tok != PATHOLOGY_SLOT && tok != ANATOMY_SLOT {
                    words.insert(tok);
                }
            }
        }
        words.into_iter().collect()
    }

    /// Stable content hash used to bind corpora and banks to a grammar.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("grammar serializes");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("invalid grammar: {msg}")));
        if self.anatomies.is_empty() || self.pathologies.is_empty() {
            return bad("needs at least one anatomy and one pathology".into());
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image dimensions must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for a in &self.anatomies {
            if tokenize(&a.name).is_empty() || !seen.insert(a.name.clone()) {
                return bad(format!("anatomy name {:?} is empty or duplicated", a.name));
            }
            let r = &a.region;
            if r.height == 0 || r.width == 0 {
                return bad(format!("region box of {:?} is empty", a.name));
            }
            if r.top + r.height > self.image_height || r.left + r.width > self.image_width {
                return bad(format!("region box of {:?} leaves the image", a.name));
            }
        }
        let mut seen = BTreeSet::new();
        for p in &self.pathologies {
            if tokenize(&p.name).is_empty() || !seen.insert(p.name.clone()) {
                return bad(format!(
                    "pathology name {:?} is empty or duplicated",
                    p.name
                ));
            }
            if p.lesion.sigma() <= 0.0 {
                return bad(format!("lesion of {:?} has non-positive width", p.name));
            }
        }
        for name in self.anatomy_names().iter().chain(&self.pathology_names()) {
            if tokenize(name).iter().any(|t| t == SENTENCE_END) {
                return bad(format!(
                    "concept name {name:?} contains the sentence terminator"
                ));
            }
        }
        let (pos, neg) = self.templates();
        if pos.is_empty() {
            return bad("needs at least one positive template".into());
        }
        for t in &pos {
            if !(t.has_pathology && t.has_anatomy) {
                return bad(format!(
                    "positive template {:?} must name both slots",
                    t.tokens.join(" ")
                ));
            }
        }
        for t in &neg {
            if !(t.has_pathology || t.has_anatomy) {
                return bad(format!(
                    "negative template {:?} has no slot",
                    t.tokens.join(" ")
                ));
            }
        }
        for t in pos.iter().chain(&neg) {
            let ends = t.tokens.iter().filter(|x| *x == SENTENCE_END).count();
            if ends != 1 || t.tokens.last().map(String::as_str) != Some(SENTENCE_END) {
                return bad(format!(
                    "template {:?} must end with a single sentence terminator",
                    t.tokens.join(" ")
                ));
            }
        }
        let healthy = tokenize(&self.healthy_sentence);
        if healthy.last().map(String::as_str) != Some(SENTENCE_END)
            || healthy.iter().filter(|x| *x == SENTENCE_END).count() != 1
        {
            return bad("healthy sentence must end with a single sentence terminator".into());
        }
        if !(0.0..=1.0).contains(&self.abnormal_rate)
            || !(0.0..=1.0).contains(&self.second_finding_rate)
        {
            return bad("rates must lie in [0, 1]".into());
        }
        if self.min_negatives > self.max_negatives {
            return bad("min_negatives exceeds max_negatives".into());
        }
        super::parse::check_round_trip(self)
            .map_err(|e| Error::Config(format!("invalid grammar: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grammar_is_valid() {
        let g = GrammarSpec::default();
        g.validate().unwrap();
        assert_eq!(g.n_anatomies(), 8);
        assert_eq!(g.n_pathologies(), 10);
    }

    #[test]
    fn vocabulary_is_closed_and_sorted() {
        let g = GrammarSpec::default();
        let v = g.vocabulary();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert!(v.contains(&"costophrenic".to_string()));
        assert!(!v.iter().any(|w| w.contains('{')));
    }

    #[test]
    fn region_outside_image_is_rejected() {
        let mut g = GrammarSpec::default();
        g.anatomies[0].region = RegionBox::new(60, 0, 10, 10);
        let err = g.validate().unwrap_err().to_string();
        assert!(err.contains("leaves the image"), "{err}");
    }

    #[test]
    fn empty_region_is_rejected() {
        let mut g = GrammarSpec::default();
        g.anatomies[2].region.width = 0;
        assert!(g.validate().unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn ambiguous_names_are_rejected() {
        let mut g = GrammarSpec::default();
        // "no {pathology} ." with a pathology called "acute findings" collides
        // with the healthy sentence.
        g.pathologies[0].name = "acute findings".into();
        assert!(g.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let g = GrammarSpec::default();
        let mut h = g.clone();
        assert_eq!(g.hash(), h.hash());
        h.abnormal_rate = 0.3;
        assert_ne!(g.hash(), h.hash());
    }

    #[test]
    fn lesion_distances() {
        let blob = LesionShape::Blob { sigma: 1.0 };
        assert_eq!(blob.distance(3.0, 4.0), 5.0);
        let streak = LesionShape::Streak {
            length: 10.0,
            angle_deg: 0.0,
            sigma: 1.0,
        };
        assert!(streak.distance(0.0, 4.0).abs() < 1e-12);
        assert!((streak.distance(2.0, 0.0) - 2.0).abs() < 1e-12);
        let ring = LesionShape::Ring {
            radius: 3.0,
            sigma: 1.0,
        };
        assert!(ring.distance(0.0, 3.0).abs() < 1e-12);
    }
}
