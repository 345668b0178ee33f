#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use groundst::corpus::{Corpus, CorpusLayout, SchemaVariant, Split};
use groundst::mining::TurnLibrary;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn layout() -> CorpusLayout {
    CorpusLayout::new(fixtures().join("corpus"))
}

pub fn train() -> Corpus {
    layout().load(Split::Train).expect("train split loads")
}

pub fn test_split() -> Corpus {
    layout().load(Split::Test).expect("test split loads")
}

pub fn library() -> TurnLibrary {
    TurnLibrary::load(fixtures().join("library.json")).expect("library loads")
}

pub fn variants(corpus: &Corpus, split: Split) -> Vec<SchemaVariant> {
    let mut out = vec![SchemaVariant::new(0, corpus.services.clone()).unwrap()];
    for rank in 1..=5 {
        out.push(layout().load_variant(split, rank, &corpus.services).unwrap());
    }
    out
}

pub fn expected_ksts() -> BTreeMap<String, Vec<String>> {
    let text = std::fs::read_to_string(fixtures().join("expected_ksts.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}
