//! Synthetic (image, report) corpus with exact ground truth.
//!
//! Reports are produced from a small sentence grammar and parsed back into
//! (pathology, anatomy, present) triplets by [`parse_report`]. Images carry one
//! planted lesion per present pair, inside the anatomy's region box.

mod grammar;
mod io;
mod parse;
mod sample;

pub use grammar::{
    tokenize, AnatomySpec, GrammarSpec, LesionShape, PathologySpec, RegionBox, TemplateKind,
    ANATOMY_SLOT, PATHOLOGY_SLOT, SENTENCE_END,
};
pub use io::read_json;
pub use io::{
    load_grayscale, rle_decode, rle_encode, sample_id, save_grayscale, write_corpus, Corpus,
    CorpusManifest, MaskRecord, SampleRecord, SplitRange, Splits, CORPUS_FILE, GRAMMAR_FILE,
    IMAGE_DIR, MANIFEST_FILE,
};
pub use parse::{
    parse_report, parse_report_lenient, split_sentences, LenientParse, Statement, TripletSet,
};
pub use sample::{
    generate_sample, generate_single_finding, generate_with_findings, sample_seed, LesionMask,
    Sample,
};
