//! On-disk corpus: `grammar.json`, `manifest.json`, `corpus.jsonl` and one
//! binary PGM per image under `images/`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::grammar::{tokenize, GrammarSpec};
use super::parse::TripletSet;
use super::sample::{generate_sample, sample_seed, LesionMask, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRAMMAR_FILE: &str = "grammar.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub start: usize,
    pub end: usize,
}

impl SplitRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: SplitRange,
    pub val: SplitRange,
    pub test: SplitRange,
}

impl Splits {
    /// 80/10/10 by contiguous index ranges.
    pub fn for_size(n: usize) -> Self {
        let train = n * 8 / 10;
        let val = n / 10;
        Splits {
            train: SplitRange {
                start: 0,
                end: train,
            },
            val: SplitRange {
                start: train,
                end: train + val,
            },
            test: SplitRange {
                start: train + val,
                end: n,
            },
        }
    }

    pub fn get(&self, name: &str) -> Result<SplitRange> {
        match name {
            "train" => Ok(self.train),
            "val" => Ok(self.val),
            "test" => Ok(self.test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (train | val | test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub grammar_hash: String,
    pub seed: u64,
    pub n_samples: usize,
    pub splits: Splits,
    pub corpus_file: String,
    pub grammar_file: String,
}

/// Run-length encoded lesion mask; runs are `[start, length]` over row-major
/// pixel indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub pathology: String,
    pub anatomy: String,
    pub rle: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub report: String,
    pub triplets: Vec<(String, String, u8)>,
    pub masks: Vec<MaskRecord>,
}

pub fn rle_encode(pixels: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut k = 0;
    while k < pixels.len() {
        if pixels[k] {
            let start = k;
            while k < pixels.len() && pixels[k] {
                k += 1;
            }
            runs.push([start, k - start]);
        } else {
            k += 1;
        }
    }
    runs
}

pub fn rle_decode(runs: &[[usize; 2]], len: usize) -> Result<Vec<bool>> {
    let mut out = vec![false; len];
    for &[start, n] in runs {
        if start + n > len {
            return Err(Error::Data(format!(
                "mask run {start}+{n} exceeds {len} pixels"
            )));
        }
        out[start..start + n].iter_mut().for_each(|p| *p = true);
    }
    Ok(out)
}

fn write_pgm(path: &Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let bytes: Vec<u8> = image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes a grayscale image with values in `[0, 1]` as binary PGM.
pub fn save_grayscale(path: &Path, image: &Array2<f64>) -> Result<()> {
    write_pgm(path, image)
}

pub fn load_grayscale(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| Error::Data(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

fn to_record(grammar: &GrammarSpec, sample: &Sample, image_rel: String) -> SampleRecord {
    let p_names = grammar.pathology_names();
    let a_names = grammar.anatomy_names();
    let mut triplets = Vec::new();
    for (i, p) in p_names.iter().enumerate() {
        for (j, a) in a_names.iter().enumerate() {
            triplets.push((p.clone(), a.clone(), u8::from(sample.triplets.get(i, j))));
        }
    }
    SampleRecord {
        id: sample.id.clone(),
        image: image_rel,
        report: sample.report.join(" "),
        triplets,
        masks: sample
            .lesion_masks
            .iter()
            .map(|m| MaskRecord {
                pathology: p_names[m.pathology].clone(),
                anatomy: a_names[m.anatomy].clone(),
                rle: rle_encode(&m.pixels),
            })
            .collect(),
    }
}

/// Generates `n_samples` samples and writes them with a manifest into `dir`.
pub fn write_corpus(
    grammar: &GrammarSpec,
    n_samples: usize,
    seed: u64,
    dir: &Path,
) -> Result<CorpusManifest> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    grammar.validate()?;
    let image_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    write_json(&dir.join(GRAMMAR_FILE), grammar)?;

    let corpus_path = dir.join(CORPUS_FILE);
    let file = fs::File::create(&corpus_path).map_err(|e| Error::io(&corpus_path, e))?;
    let mut out = BufWriter::new(file);
    for index in 0..n_samples {
        let mut sample = generate_sample(grammar, sample_seed(seed, index as u64))?;
        sample.id = sample_id(index);
        let rel = format!("{IMAGE_DIR}/{}.pgm", sample.id);
        write_pgm(&dir.join(&rel), &sample.image)?;
        let line = serde_json::to_string(&to_record(grammar, &sample, rel))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&corpus_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&corpus_path, e))?;

    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        grammar_hash: grammar.hash(),
        seed,
        n_samples,
        splits: Splits::for_size(n_samples),
        corpus_file: CORPUS_FILE.to_string(),
        grammar_file: GRAMMAR_FILE.to_string(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A corpus loaded into memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub grammar: GrammarSpec,
    pub manifest: CorpusManifest,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Builds an in-memory corpus without touching the filesystem; sample `i`
    /// equals what [`write_corpus`] would write for the same arguments.
    pub fn generate(grammar: &GrammarSpec, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        let samples = (0..n_samples)
            .map(|i| {
                let mut s = generate_sample(grammar, sample_seed(seed, i as u64))?;
                s.id = sample_id(i);
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            dir: PathBuf::new(),
            grammar: grammar.clone(),
            manifest: CorpusManifest {
                version: MANIFEST_VERSION,
                grammar_hash: grammar.hash(),
                seed,
                n_samples,
                splits: Splits::for_size(n_samples),
                corpus_file: CORPUS_FILE.to_string(),
                grammar_file: GRAMMAR_FILE.to_string(),
            },
            samples,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let grammar: GrammarSpec = read_json(&dir.join(&manifest.grammar_file))?;
        if grammar.hash() != manifest.grammar_hash {
            return Err(Error::Data(format!(
                "grammar hash {} does not match manifest {}",
                grammar.hash(),
                manifest.grammar_hash
            )));
        }
        let path = dir.join(&manifest.corpus_file);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::with_capacity(manifest.n_samples);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(&line)?;
            samples.push(from_record(&grammar, dir, record)?);
        }
        if samples.len() != manifest.n_samples {
            return Err(Error::Data(format!(
                "manifest lists {} samples, corpus has {}",
                manifest.n_samples,
                samples.len()
            )));
        }
        Ok(Corpus {
            dir: dir.to_path_buf(),
            grammar,
            manifest,
            samples,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        let r = self.manifest.splits.get(name)?;
        Ok(&self.samples[r.range()])
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn from_record(grammar: &GrammarSpec, dir: &Path, record: SampleRecord) -> Result<Sample> {
    let image = load_grayscale(&dir.join(&record.image))?;
    if image.dim() != (grammar.image_height, grammar.image_width) {
        return Err(Error::Data(format!(
            "image of {} has shape {:?}",
            record.id,
            image.dim()
        )));
    }
    let lookup = |kind: &str, name: &str, idx: Option<usize>| {
        idx.ok_or_else(|| Error::Data(format!("{}: unknown {kind} {name:?}", record.id)))
    };
    let mut triplets = TripletSet::empty(grammar.n_pathologies(), grammar.n_anatomies());
    for (p, a, present) in &record.triplets {
        let i = lookup("pathology", p, grammar.pathology_index(p))?;
        let j = lookup("anatomy", a, grammar.anatomy_index(a))?;
        triplets.set(i, j, *present == 1);
    }
    let n_pixels = grammar.image_height * grammar.image_width;
    let lesion_masks = record
        .masks
        .iter()
        .map(|m| {
            Ok(LesionMask {
                pathology: lookup(
                    "pathology",
                    &m.pathology,
                    grammar.pathology_index(&m.pathology),
                )?,
                anatomy: lookup("anatomy", &m.anatomy, grammar.anatomy_index(&m.anatomy))?,
                pixels: rle_decode(&m.rle, n_pixels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        id: record.id,
        image,
        report: tokenize(&record.report),
        triplets,
        lesion_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_cover_everything() {
        for n in [1, 7, 10, 2000] {
            let s = Splits::for_size(n);
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            assert_eq!(s.train.end, s.val.start);
            assert_eq!(s.val.end, s.test.start);
        }
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_corpus(&GrammarSpec::default(), 2, 0, &blocker.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn zero_samples_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_corpus(&GrammarSpec::default(), 0, 0, dir.path()).is_err());
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let g = GrammarSpec::default();
        write_corpus(&g, 12, 9, dir.path()).unwrap();
        let loaded = Corpus::load(dir.path()).unwrap();
        let memory = Corpus::generate(&g, 12, 9).unwrap();
        assert_eq!(loaded.samples, memory.samples);
        assert_eq!(loaded.manifest, memory.manifest);
    }

    proptest! {
        #[test]
        fn rle_round_trips(pixels in proptest::collection::vec(any::<bool>(), 0..300)) {
            let runs = rle_encode(&pixels);
            prop_assert_eq!(rle_decode(&runs, pixels.len()).unwrap(), pixels);
        }
    }
}
