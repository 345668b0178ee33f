mod common;

use groundst::augment::{
    backtranslate_schema, eda_variants, kst_variants, mean_description_distance, merge_variants, AugmentConfig,
    AugmentError, Backtranslator, CachedTranslator, EdaConfig, IdentityTranslator, Lexicon, TranslationCache,
};
use groundst::corpus::SchemaVariant;
use groundst::mining::{CandidateKind, Key, LibraryTurn, TurnLibrary};
use groundst::promptgen::{DatasetBuilder, PromptFormat};

fn pivots(n: usize) -> Vec<String> {
    ["zh", "ja", "ko", "de", "fr"][..n].iter().map(|s| s.to_string()).collect()
}

fn offline_translator() -> CachedTranslator {
    let path = common::fixtures().join("corpus/translation_cache.jsonl");
    CachedTranslator {
        cache: TranslationCache::open(path).unwrap(),
        inner: None,
    }
}

#[test]
fn identity_backtranslation_keeps_descriptions() {
    let corpus = common::train();
    let variants = backtranslate_schema(&corpus.services, &IdentityTranslator, &pivots(3)).unwrap();
    assert_eq!(variants.len(), 3);
    for v in &variants {
        assert_eq!(mean_description_distance(&corpus.services, v), 0.0);
    }
}

#[test]
fn three_pivots_quadruple_the_dataset() {
    let corpus = common::train();
    let base = SchemaVariant::new(0, corpus.services.clone()).unwrap();
    let variants = backtranslate_schema(&corpus.services, &offline_translator(), &pivots(3)).unwrap();
    let ranks: Vec<u8> = variants.iter().map(|v| v.rank).collect();
    assert_eq!(ranks, [1, 2, 3]);
    assert!(mean_description_distance(&corpus.services, &variants[0]) > 0.0);
    let builder = DatasetBuilder::new(&corpus.dialogues, PromptFormat::D3st, None, 4);
    let base_len = builder.build(&base).unwrap().0.len();
    let merged = merge_variants(&builder, &base, &variants).unwrap();
    assert_eq!(merged.len(), 4 * base_len);
}

#[test]
fn cached_entry_replays_offline() {
    let t = offline_translator();
    assert_eq!(
        t.backtranslate("The amount of money to transfer", "zh").unwrap(),
        "Amount to be remitted"
    );
    let corpus = common::train();
    let err = backtranslate_schema(&corpus.services, &t, &pivots(4)).unwrap_err();
    assert!(matches!(err, AugmentError::Translate(_)), "{err}");
}

#[test]
fn kst_variants_follow_sorted_turns() {
    let corpus = common::train();
    let library = common::library();
    let variants = kst_variants(&corpus.services, &library).unwrap();
    assert_eq!(variants.len(), 5);
    let key = Key::slot("Events_1", "event_name");
    let turns = library.get(&key).unwrap();
    for (r, v) in variants.iter().enumerate() {
        let desc = &v.service("Events_1").unwrap().slot("event_name").unwrap().description;
        assert_eq!(desc, &turns[r].text);
    }
}

#[test]
fn short_lists_cycle() {
    let corpus = common::train();
    let mut library = common::library();
    let key = Key::slot("Restaurants_1", "city");
    let two: Vec<LibraryTurn> = library.get(&key).unwrap()[..2].to_vec();
    library.set(&key, two.clone());
    let variants = kst_variants(&corpus.services, &library).unwrap();
    let used: Vec<&str> = variants
        .iter()
        .map(|v| v.service("Restaurants_1").unwrap().slot("city").unwrap().description.as_str())
        .collect();
    assert_eq!(
        used,
        [&two[0].text, &two[1].text, &two[0].text, &two[1].text, &two[0].text].map(String::as_str)
    );
}

#[test]
fn kst_variants_need_every_key() {
    let corpus = common::train();
    let mut library = common::library();
    library.set(&Key::slot("Buses_1", "seating_class"), vec![]);
    let err = kst_variants(&corpus.services, &library).unwrap_err();
    assert!(matches!(err, AugmentError::EmptyLibraryEntry(ref k) if k == "Buses_1.seating_class"));
    assert!(kst_variants(&corpus.services, &TurnLibrary::default()).is_err());
}

#[test]
fn merge_size_laws() {
    let corpus = common::train();
    let base = SchemaVariant::new(0, corpus.services.clone()).unwrap();
    let library = common::library();
    let variants = kst_variants(&corpus.services, &library).unwrap();
    let builder = DatasetBuilder::new(&corpus.dialogues, PromptFormat::D3st, None, 9);
    let (base_examples, _) = builder.build(&base).unwrap();
    assert_eq!(merge_variants(&builder, &base, &variants).unwrap().len(), 6 * base_examples.len());
    assert_eq!(merge_variants(&builder, &base, &[]).unwrap(), base_examples);
}

#[test]
fn merge_rejects_misaligned_variants() {
    let corpus = common::train();
    let base = SchemaVariant::new(0, corpus.services.clone()).unwrap();
    let mut services = corpus.services.clone();
    services.pop();
    let bad = SchemaVariant::new(1, services).unwrap();
    let builder = DatasetBuilder::new(&corpus.dialogues, PromptFormat::D3st, None, 9);
    assert!(matches!(
        merge_variants(&builder, &base, &[bad]),
        Err(AugmentError::Corpus(_))
    ));
}

#[test]
fn eda_variants_are_seeded() {
    let corpus = common::train();
    let lex = Lexicon::bundled();
    let config = AugmentConfig {
        k: 5,
        seed: 3,
        ..Default::default()
    };
    let a = eda_variants(&corpus.services, &config, Some(&lex)).unwrap();
    let b = eda_variants(&corpus.services, &config, Some(&lex)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    assert!(a.iter().any(|v| mean_description_distance(&corpus.services, v) > 0.0));
    let zero = AugmentConfig {
        eda: EdaConfig::zero(),
        ..config.clone()
    };
    for v in eda_variants(&corpus.services, &zero, None).unwrap() {
        assert_eq!(v.services, corpus.services);
    }
    let too_many = AugmentConfig { k: 6, ..config };
    assert!(matches!(
        eda_variants(&corpus.services, &too_many, Some(&lex)),
        Err(AugmentError::TooManyVariants(6))
    ));
}

#[test]
fn library_turn_kinds_survive_variants() {
    let corpus = common::train();
    let library = common::library();
    let span = library.get(&Key::slot("Buses_1", "seating_class")).unwrap();
    assert_eq!(span.len(), 1);
    assert_eq!(span[0].kind, CandidateKind::Span);
    let variants = kst_variants(&corpus.services, &library).unwrap();
    for v in &variants {
        let d = &v.service("Buses_1").unwrap().slot("seating_class").unwrap().description;
        assert_eq!(d, "class flight ticket");
    }
}
