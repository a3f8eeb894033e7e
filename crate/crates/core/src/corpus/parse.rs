//! Exact parser for the report grammar: maps sentences back to triplets.

use serde::{Deserialize, Serialize};

use super::grammar::{
    tokenize, GrammarSpec, Template, TemplateKind, ANATOMY_SLOT, PATHOLOGY_SLOT, SENTENCE_END,
};
use crate::error::{Error, Result};

/// Presence matrix `E` (pathology × anatomy) with derived label vectors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletSet {
    n_pathologies: usize,
    n_anatomies: usize,
    presence: Vec<u8>,
}

impl TripletSet {
    pub fn empty(n_pathologies: usize, n_anatomies: usize) -> Self {
        TripletSet {
            n_pathologies,
            n_anatomies,
            presence: vec![0; n_pathologies * n_anatomies],
        }
    }

    /// From a row-major `[n_p × n_a]` 0/1 matrix.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_p = rows.len();
        let n_a = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_a) {
            return Err(Error::Shape("ragged presence matrix".into()));
        }
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(Error::Data("presence entries must be 0 or 1".into()));
        }
        Ok(TripletSet {
            n_pathologies: n_p,
            n_anatomies: n_a,
            presence: rows.concat(),
        })
    }

    pub fn n_pathologies(&self) -> usize {
        self.n_pathologies
    }

    pub fn n_anatomies(&self) -> usize {
        self.n_anatomies
    }

    pub fn get(&self, pathology: usize, anatomy: usize) -> bool {
        self.presence[pathology * self.n_anatomies + anatomy] == 1
    }

    pub fn set(&mut self, pathology: usize, anatomy: usize, present: bool) {
        self.presence[pathology * self.n_anatomies + anatomy] = u8::from(present);
    }

    /// `E` as a row-major matrix of 0/1.
    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.presence
            .chunks(self.n_anatomies.max(1))
            .map(<[u8]>::to_vec)
            .collect()
    }

    /// `Y_p[i] = 1` iff pathology `i` is present at any anatomy.
    pub fn pathology_labels(&self) -> Vec<u8> {
        (0..self.n_pathologies)
            .map(|i| u8::from((0..self.n_anatomies).any(|j| self.get(i, j))))
            .collect()
    }

    /// `Y_a[j] = 1` iff anatomy `j` carries any pathology (abnormal).
    pub fn anatomy_labels(&self) -> Vec<u8> {
        (0..self.n_anatomies)
            .map(|j| u8::from((0..self.n_pathologies).any(|i| self.get(i, j))))
            .collect()
    }

    /// Present `(pathology, anatomy)` pairs in row-major order.
    pub fn present_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_pathologies {
            for j in 0..self.n_anatomies {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn is_healthy(&self) -> bool {
        self.presence.iter().all(|&v| v == 0)
    }
}

/// One recognised sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statement {
    Healthy,
    Present {
        pathology: usize,
        anatomy: usize,
    },
    Absent {
        pathology: Option<usize>,
        anatomy: Option<usize>,
    },
}

/// Splits a token stream into sentences; each sentence keeps its terminator.
/// A trailing fragment without a terminator is returned as its own sentence.
pub fn split_sentences(tokens: &[String]) -> Vec<&[String]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t == SENTENCE_END {
            out.push(&tokens[start..=i]);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(&tokens[start..]);
    }
    out
}

pub(crate) struct Parser<'g> {
    grammar: &'g GrammarSpec,
    templates: Vec<Template>,
    healthy: Vec<String>,
    pathology_tokens: Vec<Vec<String>>,
    anatomy_tokens: Vec<Vec<String>>,
}

impl<'g> Parser<'g> {
    pub fn new(grammar: &'g GrammarSpec) -> Self {
        let (pos, neg) = grammar.templates();
        Parser {
            grammar,
            templates: pos.into_iter().chain(neg).collect(),
            healthy: tokenize(&grammar.healthy_sentence),
            pathology_tokens: grammar
                .pathologies
                .iter()
                .map(|p| tokenize(&p.name))
                .collect(),
            anatomy_tokens: grammar
                .anatomies
                .iter()
                .map(|a| tokenize(&a.name))
                .collect(),
        }
    }

    /// All statements a sentence can be read as.
    fn readings(&self, sentence: &[String]) -> Vec<Statement> {
        let mut out = Vec::new();
        if sentence == self.healthy.as_slice() {
            out.push(Statement::Healthy);
        }
        for t in &self.templates {
            let mut found = Vec::new();
            self.match_template(&t.tokens, sentence, None, None, &mut found);
            for (p, a) in found {
                let stmt = match t.kind {
                    TemplateKind::Positive => Statement::Present {
                        pathology: p.expect("positive template has a pathology slot"),
                        anatomy: a.expect("positive template has an anatomy slot"),
                    },
                    TemplateKind::Negative => Statement::Absent {
                        pathology: p,
                        anatomy: a,
                    },
                };
                if !out.contains(&stmt) {
                    out.push(stmt);
                }
            }
        }
        out
    }

    fn match_template(
        &self,
        pattern: &[String],
        tokens: &[String],
        p: Option<usize>,
        a: Option<usize>,
        found: &mut Vec<(Option<usize>, Option<usize>)>,
    ) {
        let Some((head, rest)) = pattern.split_first() else {
            if tokens.is_empty() {
                found.push((p, a));
            }
            return;
        };
        let try_names = |names: &[Vec<String>], found: &mut Vec<_>, is_pathology: bool| {
            for (idx, name) in names.iter().enumerate() {
                if tokens.starts_with(name) {
                    let (np, na) = if is_pathology {
                        (Some(idx), a)
                    } else {
                        (p, Some(idx))
                    };
                    self.match_template(rest, &tokens[name.len()..], np, na, found);
                }
            }
        };
        match head.as_str() {
            PATHOLOGY_SLOT => try_names(&self.pathology_tokens, found, true),
            ANATOMY_SLOT => try_names(&self.anatomy_tokens, found, false),
            word => {
                if tokens.first().map(String::as_str) == Some(word) {
                    self.match_template(rest, &tokens[1..], p, a, found);
                }
            }
        }
    }

    pub fn statements(&self, report: &[String]) -> Result<Vec<Statement>> {
        split_sentences(report)
            .into_iter()
            .enumerate()
            .map(|(idx, sentence)| {
                let readings = self.readings(sentence);
                match readings.as_slice() {
                    [one] => Ok(*one),
                    [] => Err(Error::Parse {
                        sentence: idx,
                        message: format!("{:?} matches no template", sentence.join(" ")),
                    }),
                    _ => Err(Error::Parse {
                        sentence: idx,
                        message: format!(
                            "{:?} is ambiguous ({} readings)",
                            sentence.join(" "),
                            readings.len()
                        ),
                    }),
                }
            })
            .collect()
    }

    pub fn apply(&self, statements: &[Statement]) -> TripletSet {
        let (n_p, n_a) = (self.grammar.n_pathologies(), self.grammar.n_anatomies());
        let mut ts = TripletSet::empty(n_p, n_a);
        for s in statements {
            match *s {
                Statement::Healthy => {}
                Statement::Present { pathology, anatomy } => ts.set(pathology, anatomy, true),
                Statement::Absent { pathology, anatomy } => {
                    let rows: Vec<usize> =
                        pathology.map_or_else(|| (0..n_p).collect(), |p| vec![p]);
                    let cols: Vec<usize> = anatomy.map_or_else(|| (0..n_a).collect(), |a| vec![a]);
                    for &i in &rows {
                        for &j in &cols {
                            ts.set(i, j, false);
                        }
                    }
                }
            }
        }
        ts
    }
}

/// Parses a report into its triplets. Sentences are applied in order; a
/// negative sentence clears the entries it names, unmentioned pairs are 0.
pub fn parse_report(grammar: &GrammarSpec, report: &[String]) -> Result<TripletSet> {
    let parser = Parser::new(grammar);
    let statements = parser.statements(report)?;
    Ok(parser.apply(&statements))
}

/// Outcome of lenient parsing of model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LenientParse {
    pub triplets: TripletSet,
    pub unparsed_sentences: usize,
}

/// Like [`parse_report`] but skips sentences that match no template, counting
/// them instead. Used to label generated text.
pub fn parse_report_lenient(grammar: &GrammarSpec, report: &[String]) -> LenientParse {
    let parser = Parser::new(grammar);
    let mut statements = Vec::new();
    let mut unparsed = 0;
    for sentence in split_sentences(report) {
        match parser.readings(sentence).as_slice() {
            [one] => statements.push(*one),
            _ => unparsed += 1,
        }
    }
    LenientParse {
        triplets: parser.apply(&statements),
        unparsed_sentences: unparsed,
    }
}

/// Checks that every template instantiation reads back uniquely as itself.
pub(crate) fn check_round_trip(grammar: &GrammarSpec) -> std::result::Result<(), String> {
    let parser = Parser::new(grammar);
    let (pos, neg) = grammar.templates();
    let pathologies = grammar.pathology_names();
    let anatomies = grammar.anatomy_names();
    let healthy = tokenize(&grammar.healthy_sentence);
    if parser.readings(&healthy) != vec![Statement::Healthy] {
        return Err("healthy sentence does not read back uniquely".into());
    }
    for t in pos.iter().chain(&neg) {
        let ps: Vec<Option<usize>> = if t.has_pathology {
            (0..pathologies.len()).map(Some).collect()
        } else {
            vec![None]
        };
        let as_: Vec<Option<usize>> = if t.has_anatomy {
            (0..anatomies.len()).map(Some).collect()
        } else {
            vec![None]
        };
        for &p in &ps {
            for &a in &as_ {
                let sentence = t.instantiate(
                    p.map(|i| pathologies[i].as_str()),
                    a.map(|j| anatomies[j].as_str()),
                );
                let expected = match t.kind {
                    TemplateKind::Positive => Statement::Present {
                        pathology: p.unwrap(),
                        anatomy: a.unwrap(),
                    },
                    TemplateKind::Negative => Statement::Absent {
                        pathology: p,
                        anatomy: a,
                    },
                };
                if parser.readings(&sentence) != vec![expected] {
                    return Err(format!(
                        "template sentence {:?} does not parse back to its triplet",
                        sentence.join(" ")
                    ));
                }
            }
        }
    }
    Ok(())
}
