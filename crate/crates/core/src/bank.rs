//! Pathology and anatomy concept banks and their text embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{parse_report, read_json, tokenize, GrammarSpec, TripletSet};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const BANK_VERSION: u32 = 1;

/// Descriptions shipped with the crate for the default grammar's concepts.
pub const DEFAULT_DESCRIPTIONS: &str = include_str!("../data/descriptions.json");

pub type Descriptions = BTreeMap<String, String>;

pub fn default_descriptions() -> Descriptions {
    serde_json::from_str(DEFAULT_DESCRIPTIONS).expect("bundled descriptions are valid JSON")
}

pub fn load_descriptions(path: &Path) -> Result<Descriptions> {
    read_json(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Pathology,
    Anatomy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    pub kind: ConceptKind,
    pub description: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub version: u32,
    /// Hash of the grammar the bank was built against.
    pub vocab_hash: String,
    pub pathologies: Vec<ConceptEntry>,
    pub anatomies: Vec<ConceptEntry>,
}

/// Per-concept occurrence counts (number of reports in which the concept is
/// present / abnormal).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptCounts {
    pub pathologies: Vec<(String, usize)>,
    pub anatomies: Vec<(String, usize)>,
}

pub fn count_concepts<'a>(
    grammar: &GrammarSpec,
    reports: impl IntoIterator<Item = &'a [String]>,
) -> Result<ConceptCounts> {
    let mut p_counts = vec![0usize; grammar.n_pathologies()];
    let mut a_counts = vec![0usize; grammar.n_anatomies()];
    for report in reports {
        let ts = parse_report(grammar, report)?;
        for (c, y) in p_counts.iter_mut().zip(ts.pathology_labels()) {
            *c += y as usize;
        }
        for (c, y) in a_counts.iter_mut().zip(ts.anatomy_labels()) {
            *c += y as usize;
        }
    }
    Ok(ConceptCounts {
        pathologies: grammar
            .pathology_names()
            .into_iter()
            .zip(p_counts)
            .collect(),
        anatomies: grammar.anatomy_names().into_iter().zip(a_counts).collect(),
    })
}

/// Builds a bank from parsed reports: concepts with frequency at least
/// `min_frequency`, by descending frequency then name.
pub fn build_bank<'a>(
    grammar: &GrammarSpec,
    reports: impl IntoIterator<Item = &'a [String]>,
    descriptions: &Descriptions,
    min_frequency: usize,
) -> Result<ConceptBank> {
    let counts = count_concepts(grammar, reports)?;
    let select = |counts: &[(String, usize)]| {
        let mut kept: Vec<_> = counts
            .iter()
            .filter(|(_, c)| *c >= min_frequency)
            .cloned()
            .collect();
        kept.sort_by(|(na, ca), (nb, cb)| cb.cmp(ca).then_with(|| na.cmp(nb)));
        kept.into_iter().map(|(n, _)| n).collect::<Vec<_>>()
    };
    let pathologies = select(&counts.pathologies);
    let anatomies = select(&counts.anatomies);
    if pathologies.is_empty() || anatomies.is_empty() {
        return Err(Error::Config(format!(
            "min_frequency {min_frequency} leaves an empty bank ({} pathologies, {} anatomies)",
            pathologies.len(),
            anatomies.len()
        )));
    }
    ConceptBank::from_names(grammar.hash(), &pathologies, &anatomies, descriptions)
}

impl ConceptBank {
    pub fn from_names(
        vocab_hash: String,
        pathologies: &[String],
        anatomies: &[String],
        descriptions: &Descriptions,
    ) -> Result<Self> {
        let missing: Vec<&str> = pathologies
            .iter()
            .chain(anatomies)
            .filter(|n| descriptions.get(*n).is_none_or(|d| d.trim().is_empty()))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "no description for: {}",
                missing.join(", ")
            )));
        }
        let entries = |names: &[String], kind| {
            names
                .iter()
                .enumerate()
                .map(|(index, name)| ConceptEntry {
                    name: name.clone(),
                    kind,
                    description: descriptions[name].clone(),
                    index,
                })
                .collect::<Vec<_>>()
        };
        let bank = ConceptBank {
            version: BANK_VERSION,
            vocab_hash,
            pathologies: entries(pathologies, ConceptKind::Pathology),
            anatomies: entries(anatomies, ConceptKind::Anatomy),
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Bank holding every concept of `grammar` in grammar order.
    pub fn from_grammar(grammar: &GrammarSpec, descriptions: &Descriptions) -> Result<Self> {
        Self::from_names(
            grammar.hash(),
            &grammar.pathology_names(),
            &grammar.anatomy_names(),
            descriptions,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.pathologies.is_empty() || self.anatomies.is_empty() {
            return Err(Error::Config(
                "concept bank must hold at least one concept of each kind".into(),
            ));
        }
        for (entries, kind) in [
            (&self.pathologies, ConceptKind::Pathology),
            (&self.anatomies, ConceptKind::Anatomy),
        ] {
            let mut seen = BTreeSet::new();
            for (k, e) in entries.iter().enumerate() {
                if e.kind != kind || e.index != k {
                    return Err(Error::Data(format!(
                        "bank entry {:?} has kind/index out of place",
                        e.name
                    )));
                }
                if !seen.insert(&e.name) {
                    return Err(Error::Data(format!("duplicate concept {:?}", e.name)));
                }
                if e.description.trim().is_empty() {
                    return Err(Error::Data(format!(
                        "concept {:?} has an empty description",
                        e.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_pathologies(&self) -> usize {
        self.pathologies.len()
    }

    pub fn n_anatomies(&self) -> usize {
        self.anatomies.len()
    }

    pub fn pathology_names(&self) -> Vec<String> {
        self.pathologies.iter().map(|e| e.name.clone()).collect()
    }

    pub fn anatomy_names(&self) -> Vec<String> {
        self.anatomies.iter().map(|e| e.name.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bank: ConceptBank = read_json(path)?;
        if bank.version != BANK_VERSION {
            return Err(Error::Data(format!(
                "unsupported bank version {}",
                bank.version
            )));
        }
        bank.validate()?;
        Ok(bank)
    }

    /// Index translation from grammar order to bank order.
    pub fn concept_map(&self, grammar: &GrammarSpec) -> Result<ConceptMap> {
        if self.vocab_hash != grammar.hash() {
            return Err(Error::Config(format!(
                "bank was built for grammar {} but the corpus uses {}",
                self.vocab_hash,
                grammar.hash()
            )));
        }
        let pathology = self
            .pathologies
            .iter()
            .map(|e| {
                grammar
                    .pathology_index(&e.name)
                    .ok_or_else(|| Error::Data(format!("pathology {:?} not in grammar", e.name)))
            })
            .collect::<Result<_>>()?;
        let anatomy = self
            .anatomies
            .iter()
            .map(|e| {
                grammar
                    .anatomy_index(&e.name)
                    .ok_or_else(|| Error::Data(format!("anatomy {:?} not in grammar", e.name)))
            })
            .collect::<Result<_>>()?;
        Ok(ConceptMap { pathology, anatomy })
    }
}

/// For each bank position, the index of the same concept in the grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMap {
    pub pathology: Vec<usize>,
    pub anatomy: Vec<usize>,
}

impl ConceptMap {
    /// Reorders (and restricts) grammar-ordered triplets into bank order.
    pub fn project(&self, triplets: &TripletSet) -> TripletSet {
        let mut out = TripletSet::empty(self.pathology.len(), self.anatomy.len());
        for (bi, &gi) in self.pathology.iter().enumerate() {
            for (bj, &gj) in self.anatomy.iter().enumerate() {
                out.set(bi, bj, triplets.get(gi, gj));
            }
        }
        out
    }
}

/// Closed token set of concept names and descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocab {
    pub tokens: Vec<String>,
}

impl ConceptVocab {
    pub fn from_bank(bank: &ConceptBank) -> Self {
        let set: BTreeSet<String> = bank
            .pathologies
            .iter()
            .chain(&bank.anatomies)
            .flat_map(|e| {
                tokenize(&e.name)
                    .into_iter()
                    .chain(tokenize(&e.description))
            })
            .collect();
        ConceptVocab {
            tokens: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        tokenize(text)
            .iter()
            .map(|t| {
                index.get(t.as_str()).copied().ok_or_else(|| {
                    Error::Data(format!("token {t:?} is not in the concept vocabulary"))
                })
            })
            .collect()
    }
}

/// Mean-pooled token embeddings of `name ++ description` for every concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbedder {
    pub vocab: ConceptVocab,
    pub table: ParamId,
    pub dim: usize,
    /// `[n_p × |vocab|]` and `[n_a × |vocab|]` pooling weights.
    pooling_p: Array2<f64>,
    pooling_a: Array2<f64>,
}

/// `t^p` and `t^a` on a graph.
#[derive(Debug, Clone, Copy)]
pub struct ConceptEmbeddings {
    pub pathology: Var,
    pub anatomy: Var,
}

impl ConceptEmbedder {
    pub fn new(
        store: &mut ParamStore,
        bank: &ConceptBank,
        vocab: ConceptVocab,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pooling_p = pooling_matrix(&vocab, &bank.pathologies)?;
        let pooling_a = pooling_matrix(&vocab, &bank.anatomies)?;
        let table = store.uniform("concept.embedding", vocab.len(), dim, 1, rng);
        Ok(ConceptEmbedder {
            vocab,
            table,
            dim,
            pooling_p,
            pooling_a,
        })
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore) -> ConceptEmbeddings {
        let table = g.param(store, self.table);
        let pp = g.input(self.pooling_p.clone());
        let pa = g.input(self.pooling_a.clone());
        ConceptEmbeddings {
            pathology: g.matmul(pp, table),
            anatomy: g.matmul(pa, table),
        }
    }
}

/// Same pooling expressed directly on an embedding table variable.
pub fn embed_concepts(
    g: &mut Graph,
    table: Var,
    vocab: &ConceptVocab,
    entries: &[ConceptEntry],
) -> Result<Var> {
    let pooling = pooling_matrix(vocab, entries)?;
    if pooling.ncols() != g.shape(table).0 {
        return Err(Error::Shape(format!(
            "embedding table has {} rows for a vocabulary of {}",
            g.shape(table).0,
            pooling.ncols()
        )));
    }
    let p = g.input(pooling);
    Ok(g.matmul(p, table))
}

fn pooling_matrix(vocab: &ConceptVocab, entries: &[ConceptEntry]) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((entries.len(), vocab.len()));
    for (r, e) in entries.iter().enumerate() {
        let mut ids = vocab.encode(&e.name)?;
        ids.extend(vocab.encode(&e.description)?);
        let w = 1.0 / ids.len() as f64;
        for id in ids {
            m[[r, id]] += w;
        }
    }
    Ok(m)
}
