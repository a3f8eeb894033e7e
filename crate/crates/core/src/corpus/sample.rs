use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::grammar::{GrammarSpec, TemplateKind};
use super::parse::TripletSet;
use crate::error::{Error, Result};

/// Binary lesion footprint for one present `(pathology, anatomy)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionMask {
    pub pathology: usize,
    pub anatomy: usize,
    /// Row-major `[H × W]`.
    pub pixels: Vec<bool>,
}

impl LesionMask {
    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[H × W]`, values are multiples of 1/255 in `[0, 1]`.
    pub image: Array2<f64>,
    pub report: Vec<String>,
    pub triplets: TripletSet,
    pub lesion_masks: Vec<LesionMask>,
}

/// Derives the seed of sample `index` in a corpus seeded with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a golden-ratio stride
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a random sample: each anatomy independently receives 0, 1 or 2
/// pathologies.
pub fn generate_sample(grammar: &GrammarSpec, seed: u64) -> Result<Sample> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_p, n_a) = (grammar.n_pathologies(), grammar.n_anatomies());
    let mut findings = TripletSet::empty(n_p, n_a);
    for j in 0..n_a {
        if rng.gen_bool(grammar.abnormal_rate) {
            let k = if rng.gen_bool(grammar.second_finding_rate) {
                2
            } else {
                1
            };
            for i in index::sample(&mut rng, n_p, k.min(n_p)) {
                findings.set(i, j, true);
            }
        }
    }
    render(grammar, seed, findings, &mut rng)
}

/// Draws a sample with exactly one finding: `pathology` at a random anatomy.
pub fn generate_single_finding(
    grammar: &GrammarSpec,
    seed: u64,
    pathology: usize,
) -> Result<Sample> {
    grammar.validate()?;
    if pathology >= grammar.n_pathologies() {
        return Err(Error::Config(format!(
            "pathology index {pathology} out of range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut findings = TripletSet::empty(grammar.n_pathologies(), grammar.n_anatomies());
    findings.set(pathology, rng.gen_range(0..grammar.n_anatomies()), true);
    render(grammar, seed, findings, &mut rng)
}

/// Renders image and report for prescribed findings.
pub fn generate_with_findings(
    grammar: &GrammarSpec,
    seed: u64,
    findings: TripletSet,
) -> Result<Sample> {
    grammar.validate()?;
    if findings.n_pathologies() != grammar.n_pathologies()
        || findings.n_anatomies() != grammar.n_anatomies()
    {
        return Err(Error::Shape(
            "findings do not match the grammar's concept counts".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(grammar, seed, findings, &mut rng)
}

fn render(
    grammar: &GrammarSpec,
    seed: u64,
    findings: TripletSet,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let (h, w) = (grammar.image_height, grammar.image_width);
    let mut image = Array2::from_elem((h, w), grammar.background_level);

    // smooth background
    for _ in 0..4 {
        let fy = rng.gen_range(0.05..0.2);
        let fx = rng.gen_range(0.05..0.2);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = grammar.background_amplitude / 2.0;
        image.indexed_iter_mut().for_each(|((y, x), v)| {
            *v += amp * (fy * y as f64 + fx * x as f64 + phase).sin();
        });
    }

    for anatomy in &grammar.anatomies {
        let r = anatomy.region;
        let (s, c) = anatomy.texture_angle_deg.to_radians().sin_cos();
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let k = std::f64::consts::TAU / anatomy.texture_period;
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                let stripe = (k * (x as f64 * c + y as f64 * s) + phase).sin();
                image[[y, x]] += anatomy.brightness + grammar.texture_amplitude * stripe;
            }
        }
    }

    let mut lesion_masks = Vec::new();
    for (i, j) in findings.present_pairs() {
        let kind = &grammar.pathologies[i];
        let r = grammar.anatomies[j].region;
        let extent = kind.lesion.extent();
        let pick = |rng: &mut ChaCha8Rng, start: usize, len: usize| {
            let margin = extent.min(len as f64 / 2.0);
            let lo = start as f64 + margin;
            let hi = (start + len) as f64 - margin;
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                start as f64 + len as f64 / 2.0
            }
        };
        let cy = pick(rng, r.top, r.height);
        let cx = pick(rng, r.left, r.width);
        let sigma = kind.lesion.sigma();
        let mut pixels = vec![false; h * w];
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                let d = kind
                    .lesion
                    .distance(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let profile = (-d * d / (2.0 * sigma * sigma)).exp();
                image[[y, x]] += kind.contrast * profile;
                if profile >= 0.5 {
                    pixels[y * w + x] = true;
                }
            }
        }
        lesion_masks.push(LesionMask {
            pathology: i,
            anatomy: j,
            pixels,
        });
    }

    if grammar.pixel_noise > 0.0 {
        let noise =
            Normal::new(0.0, grammar.pixel_noise).map_err(|e| Error::Config(e.to_string()))?;
        image.mapv_inplace(|v| v + noise.sample(rng));
    }
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);

    let report = write_report(grammar, &findings, rng);
    Ok(Sample {
        id: format!("{seed:016x}"),
        image,
        report,
        triplets: findings,
        lesion_masks,
    })
}

fn write_report(grammar: &GrammarSpec, findings: &TripletSet, rng: &mut ChaCha8Rng) -> Vec<String> {
    let (pos, neg) = grammar.templates();
    let pathologies = grammar.pathology_names();
    let anatomies = grammar.anatomy_names();
    let mut report = Vec::new();

    let mut any = false;
    for j in 0..grammar.n_anatomies() {
        for i in 0..grammar.n_pathologies() {
            if findings.get(i, j) {
                let t = &pos[rng.gen_range(0..pos.len())];
                report.extend(t.instantiate(Some(&pathologies[i]), Some(&anatomies[j])));
                any = true;
            }
        }
    }
    if !any {
        report.extend(super::grammar::tokenize(&grammar.healthy_sentence));
    }

    // Negative candidates: every template instantiation that is true of the
    // findings.
    let y_p = findings.pathology_labels();
    let y_a = findings.anatomy_labels();
    let mut candidates = Vec::new();
    for t in neg.iter().filter(|t| t.kind == TemplateKind::Negative) {
        match (t.has_pathology, t.has_anatomy) {
            (true, false) => {
                for i in (0..y_p.len()).filter(|&i| y_p[i] == 0) {
                    candidates.push(t.instantiate(Some(&pathologies[i]), None));
                }
            }
            (false, true) => {
                for j in (0..y_a.len()).filter(|&j| y_a[j] == 0) {
                    candidates.push(t.instantiate(None, Some(&anatomies[j])));
                }
            }
            _ => {
                for i in 0..y_p.len() {
                    for j in 0..y_a.len() {
                        if !findings.get(i, j) {
                            candidates
                                .push(t.instantiate(Some(&pathologies[i]), Some(&anatomies[j])));
                        }
                    }
                }
            }
        }
    }
    let wanted = rng
        .gen_range(grammar.min_negatives..=grammar.max_negatives)
        .min(candidates.len());
    let mut chosen = index::sample(rng, candidates.len(), wanted).into_vec();
    chosen.sort_unstable();
    for c in chosen {
        report.extend(candidates[c].iter().cloned());
    }
    report
}
