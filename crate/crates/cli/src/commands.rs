use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use serde::Serialize;

use groundst::augment::{
    backtranslate_schema, eda_variants, kst_variants, merge_variants, AugmentConfig, AugmentError, Backtranslator,
    CachedTranslator, CommandTranslator, HttpTranslator, Lexicon, TranslationCache,
};
use groundst::backend::{open, BackendError, Predictor};
use groundst::corpus::{write_schema, Corpus, CorpusLayout, SchemaVariant};
use groundst::ensemble::{group_variants, make_variants, run_gpe, EnsembleConfig, EnsembleError};
use groundst::eval::{evaluate, ExactMatcher};
use groundst::mining::{
    all_keys, auto_library, diversity_stats, mine_all, served_candidates, suggest_diverse, Key, SlotSynonyms,
    TurnLibrary,
};
use groundst::promptgen::{read_dataset, write_dataset, DatasetBuilder, LinearizedExample};
use groundst_curation::CurationState;

use crate::config::Config;
use crate::{Command, CorpusArgs, Method, PromptArgs, SourceArgs};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Data(anyhow::Error),
    Backend(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Data(e) | Failure::Backend(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn backend(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Backend(e.into())
}

type Result<T, E = Failure> = std::result::Result<T, E>;

/// Schema variant ranks picked on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranks(pub Vec<u8>);

/// `0..5` (inclusive), `0,2,4` or a single rank.
pub fn parse_ranks(s: &str) -> Result<Ranks, String> {
    let bad = || format!("invalid variant ranks {s:?} (expected e.g. 0..5, 0,2,4 or 3)");
    let ranks: Vec<u8> = if let Some((a, b)) = s.split_once("..") {
        let a: u8 = a.trim().parse().map_err(|_| bad())?;
        let b: u8 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|r| r.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if ranks.iter().any(|&r| r > 5) {
        return Err(format!("variant ranks go from 0 to 5, got {s:?}"));
    }
    Ok(Ranks(ranks))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(args: &CorpusArgs) -> anyhow::Result<(CorpusLayout, Corpus)> {
    let layout = CorpusLayout::new(&args.corpus);
    let corpus = layout
        .load(args.split)
        .with_context(|| format!("loading {} split of {}", args.split, args.corpus.display()))?;
    tracing::info!(
        services = corpus.services.len(),
        dialogues = corpus.dialogues.len(),
        split = %args.split,
        "corpus loaded"
    );
    Ok((layout, corpus))
}

fn load_library(path: Option<&Path>) -> anyhow::Result<Option<TurnLibrary>> {
    path.map(|p| TurnLibrary::load(p).with_context(|| format!("loading library {}", p.display())))
        .transpose()
}

fn synonyms(config: &Config, file: Option<&PathBuf>) -> anyhow::Result<SlotSynonyms> {
    let mut table = config.slot_synonyms();
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            table.add_group(line.split(',').map(str::trim).filter(|s| !s.is_empty()));
        }
    }
    Ok(table)
}

fn selected_keys(corpus: &Corpus, key: Option<&str>) -> anyhow::Result<Vec<Key>> {
    match key {
        Some(k) => Ok(vec![Key::parse(k, &corpus.services)?]),
        None => Ok(all_keys(&corpus.services)),
    }
}

fn variants(layout: &CorpusLayout, args: &CorpusArgs, prompt: &PromptArgs, corpus: &Corpus) -> anyhow::Result<Vec<SchemaVariant>> {
    let ranks = prompt.variants.as_ref().map_or(&[0][..], |r| &r.0[..]);
    ranks
        .iter()
        .map(|&r| {
            layout
                .load_variant(args.split, r, &corpus.services)
                .with_context(|| format!("loading schema variant v{r}"))
        })
        .collect()
}

pub fn run(command: Command, config: &Config) -> Result<()> {
    match command {
        Command::Mine { corpus, out } => mine(&corpus, &out),
        Command::Stats { corpus, key, top, json } => stats(&corpus, key.as_deref(), top, json.as_deref()),
        Command::Suggest {
            corpus,
            key,
            n,
            synonyms: syn,
            out,
        } => suggest(config, &corpus, key.as_deref(), n, syn.as_ref(), out.as_deref()),
        Command::Serve {
            corpus,
            library,
            port,
            host,
            static_dir,
            synonyms: syn,
        } => serve(config, &corpus, library, &host, port, static_dir, syn.as_ref()),
        Command::Build {
            corpus,
            prompt,
            prompt_variants,
            out,
        } => build(config, &corpus, &prompt, prompt_variants, &out),
        Command::Augment {
            corpus,
            method,
            k,
            format,
            library,
            pivots,
            translator,
            translation_cache,
            lexicon,
            out,
            schema_out,
        } => {
            let opts = AugmentArgs {
                method,
                k,
                format,
                library,
                pivots,
                translator,
                translation_cache,
                lexicon,
                out,
                schema_out,
            };
            augment(config, &corpus, &opts)
        }
        Command::Eval {
            source,
            prompt,
            backend,
            report,
        } => eval(config, &source, &prompt, &backend, report.as_deref()),
        Command::Gpe {
            source,
            prompt,
            backend,
            n,
            raw_vote,
            report,
        } => gpe(config, &source, &prompt, &backend, n, raw_vote, report.as_deref()),
    }
}

fn mine(args: &CorpusArgs, out: &Path) -> Result<()> {
    let (_, corpus) = load_corpus(args)?;
    let pool = mine_all(&corpus);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (key, list) in &pool.entries {
        write_json(&out.join(format!("{key}.json")), list)?;
        println!("{key}\t{}", list.len());
    }
    tracing::info!(keys = pool.entries.len(), out = %out.display(), "candidates written");
    Ok(())
}

fn stats(args: &CorpusArgs, key: Option<&str>, top: usize, json: Option<&Path>) -> Result<()> {
    let (_, corpus) = load_corpus(args)?;
    let pool = mine_all(&corpus);
    let mut all = BTreeMap::new();
    for key in selected_keys(&corpus, key)? {
        let stats = diversity_stats(pool.get(&key));
        let mut tokens: Vec<(&String, &f64)> = stats.token_frequency.iter().collect();
        tokens.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
        let shown: Vec<String> = tokens.iter().take(top).map(|(t, f)| format!("{t}:{f:.2}")).collect();
        println!("{key}\t{}\t{}", stats.candidate_count, shown.join(" "));
        all.insert(key.to_string(), stats);
    }
    if let Some(path) = json {
        write_json(path, &all)?;
    }
    Ok(())
}

fn suggest(
    config: &Config,
    args: &CorpusArgs,
    key: Option<&str>,
    n: usize,
    syn_file: Option<&PathBuf>,
    out: Option<&Path>,
) -> Result<()> {
    let (_, corpus) = load_corpus(args)?;
    let pool = mine_all(&corpus);
    let syn = synonyms(config, syn_file)?;
    for key in selected_keys(&corpus, key)? {
        let candidates = served_candidates(&pool, &key, &syn);
        let description = key.description(&corpus.services).unwrap_or_default();
        let s = suggest_diverse(&candidates, description, n).map_err(anyhow::Error::from)?;
        let marker = if s.short { " (short)" } else { "" };
        println!("{key}{marker}");
        for c in &s.picks {
            println!("  [{:?}] {}", c.kind, c.text);
        }
    }
    if let Some(path) = out {
        let library = auto_library(&pool, &corpus.services, &syn, n).map_err(anyhow::Error::from)?;
        library
            .save(path)
            .with_context(|| format!("writing {}", path.display()))?;
        tracing::info!(keys = library.len(), out = %path.display(), "library written");
    }
    Ok(())
}

fn serve(
    config: &Config,
    args: &CorpusArgs,
    library: PathBuf,
    host: &str,
    port: u16,
    static_dir: Option<PathBuf>,
    syn_file: Option<&PathBuf>,
) -> Result<()> {
    let (_, corpus) = load_corpus(args)?;
    let syn = synonyms(config, syn_file)?;
    let state = CurationState::open(corpus, syn, library).map_err(anyhow::Error::from)?;
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        groundst_curation::serve(listener, state, static_dir)
            .await
            .context("serving")?;
        Ok(())
    })
}

fn build_examples(
    config: &Config,
    args: &CorpusArgs,
    prompt: &PromptArgs,
    n: usize,
) -> anyhow::Result<Vec<Vec<LinearizedExample>>> {
    let (layout, corpus) = load_corpus(args)?;
    let library = load_library(prompt.library.as_deref())?;
    let builder = DatasetBuilder::new(&corpus.dialogues, prompt.format, library.as_ref(), config.seed);
    let mut groups = Vec::new();
    for variant in variants(&layout, args, prompt, &corpus)? {
        if n > 1 {
            groups.extend(make_variants(&builder, &variant, n)?);
        } else {
            let (examples, stats) = builder.build(&variant)?;
            tracing::info!(
                rank = variant.rank,
                examples = stats.examples,
                truncated = stats.truncated,
                dropped = stats.dropped,
                "variant built"
            );
            groups.extend(examples.into_iter().map(|e| vec![e]));
        }
    }
    Ok(groups)
}

/// Examples grouped by turn and schema variant, from a prebuilt dataset or
/// built on the fly with `n` prompt variants each.
fn load_groups(
    config: &Config,
    source: &SourceArgs,
    prompt: &PromptArgs,
    n: usize,
) -> anyhow::Result<Vec<Vec<LinearizedExample>>> {
    match (&source.dataset, &source.corpus) {
        (Some(path), _) => {
            let mut examples = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(ranks) = &prompt.variants {
                examples.retain(|e| ranks.0.contains(&e.variant_rank));
            }
            tracing::info!(examples = examples.len(), dataset = %path.display(), "dataset loaded");
            Ok(group_variants(&examples))
        }
        (None, Some(corpus)) => {
            let args = CorpusArgs {
                corpus: corpus.clone(),
                split: source.split,
            };
            build_examples(config, &args, prompt, n)
        }
        (None, None) => bail!("either --dataset or --corpus is required"),
    }
}

fn build(config: &Config, args: &CorpusArgs, prompt: &PromptArgs, prompt_variants: usize, out: &Path) -> Result<()> {
    if prompt_variants == 0 {
        return Err(anyhow!("--prompt-variants must be at least 1").into());
    }
    let examples: Vec<LinearizedExample> = build_examples(config, args, prompt, prompt_variants)?.concat();
    write_dataset(out, &examples).with_context(|| format!("writing {}", out.display()))?;
    println!("{} examples -> {}", examples.len(), out.display());
    Ok(())
}

struct AugmentArgs {
    method: Method,
    k: Option<usize>,
    format: groundst::promptgen::PromptFormat,
    library: Option<PathBuf>,
    pivots: Option<Vec<String>>,
    translator: Option<String>,
    translation_cache: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    out: PathBuf,
    schema_out: Option<PathBuf>,
}

fn translator(args: &AugmentArgs, timeout: Duration) -> anyhow::Result<Box<dyn Backtranslator>> {
    let inner: Option<Box<dyn Backtranslator>> = match args.translator.as_deref() {
        None => None,
        Some(spec) if spec.starts_with("http://") || spec.starts_with("https://") => {
            Some(Box::new(HttpTranslator::new(spec, timeout)?))
        }
        Some(spec) => {
            let cmd = spec.strip_prefix("cmd:").unwrap_or(spec);
            let t = CommandTranslator::from_command_line(cmd).ok_or_else(|| anyhow!("empty translator command"))?;
            Some(Box::new(t))
        }
    };
    match (&args.translation_cache, inner) {
        (Some(path), inner) => Ok(Box::new(CachedTranslator {
            cache: TranslationCache::open(path)?,
            inner,
        })),
        (None, Some(inner)) => Ok(inner),
        (None, None) => bail!("backtranslation needs --translator or --translation-cache"),
    }
}

fn augment_error(e: AugmentError) -> Failure {
    match e {
        AugmentError::Translate(_) => backend(e),
        other => Failure::Data(other.into()),
    }
}

fn augment(config: &Config, corpus_args: &CorpusArgs, args: &AugmentArgs) -> Result<()> {
    let (layout, corpus) = load_corpus(corpus_args)?;
    let library = load_library(args.library.as_deref())?;
    let k = args.k.unwrap_or(match args.method {
        Method::Backtranslate => args.pivots.as_ref().map_or(config.pivot_languages.len(), Vec::len),
        _ => 5,
    });
    if k > 5 {
        return Err(anyhow!("at most 5 schema variants, got k={k}").into());
    }
    let services = &corpus.services;
    let variants: Vec<SchemaVariant> = match args.method {
        Method::Eda => {
            let lexicon = match &args.lexicon {
                Some(p) => Lexicon::load(p).map_err(augment_error)?,
                None => Lexicon::bundled(),
            };
            let cfg = AugmentConfig {
                k,
                eda: config.eda,
                seed: config.seed,
                pivot_languages: config.pivot_languages.clone(),
            };
            eda_variants(services, &cfg, Some(&lexicon)).map_err(augment_error)?
        }
        Method::Backtranslate => {
            let pivots = args.pivots.clone().unwrap_or_else(|| config.pivot_languages.clone());
            let pivots: Vec<String> = pivots.into_iter().take(k).collect();
            let t = translator(args, config.backend_options().timeout)?;
            backtranslate_schema(services, t.as_ref(), &pivots).map_err(augment_error)?
        }
        Method::Kst => {
            let library = library
                .as_ref()
                .ok_or_else(|| anyhow!("--method kst needs --library"))?;
            let mut v = kst_variants(services, library).map_err(augment_error)?;
            v.truncate(k);
            v
        }
        Method::SgdxMerge => (1..=k as u8)
            .map(|r| {
                layout
                    .load_variant(corpus_args.split, r, services)
                    .with_context(|| format!("loading schema variant v{r}"))
            })
            .collect::<anyhow::Result<_>>()?,
    };
    if let Some(dir) = &args.schema_out {
        for v in &variants {
            let path = dir
                .join(format!("v{}", v.rank))
                .join(corpus_args.split.as_str())
                .join("schema.json");
            write_schema(&path, &v.services).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let base = SchemaVariant::new(0, services.clone()).map_err(anyhow::Error::from)?;
    let builder = DatasetBuilder::new(&corpus.dialogues, args.format, library.as_ref(), config.seed);
    let merged = merge_variants(&builder, &base, &variants).map_err(augment_error)?;
    write_dataset(&args.out, &merged).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} variants, {} examples -> {}",
        variants.len(),
        merged.len(),
        args.out.display()
    );
    Ok(())
}

fn open_backend(config: &Config, spec: &str) -> Result<Box<dyn Predictor>> {
    let p = open(spec, &config.backend_options()).map_err(|e| match e {
        BackendError::InvalidSpec(_) | BackendError::InvalidNoise { .. } => Failure::Data(e.into()),
        other => backend(other),
    })?;
    tracing::info!(backend = %p.name(), "backend ready");
    Ok(p)
}

fn eval(config: &Config, source: &SourceArgs, prompt: &PromptArgs, spec: &str, report: Option<&Path>) -> Result<()> {
    let examples = load_groups(config, source, prompt, 1)?.concat();
    let predictor = open_backend(config, spec)?;
    let predictions = predictor.predict(&examples).map_err(backend)?;
    let r = evaluate(&examples, &predictions, &ExactMatcher, &predictor.name());
    print!("{}", r.to_table());
    if let Some(path) = report {
        write_json(path, &r)?;
    }
    if r.failed > 0 {
        return Err(backend(anyhow!("{} of {} predictions failed", r.failed, examples.len())));
    }
    Ok(())
}

fn gpe(
    config: &Config,
    source: &SourceArgs,
    prompt: &PromptArgs,
    spec: &str,
    n: usize,
    raw_vote: bool,
    report: Option<&Path>,
) -> Result<()> {
    if n == 0 {
        return Err(Failure::Data(EnsembleError::NoVariants.into()));
    }
    if source.dataset.is_none() && !prompt.format.is_grounded() {
        return Err(Failure::Data(EnsembleError::NotGrounded(prompt.format).into()));
    }
    let groups = load_groups(config, source, prompt, n)?;
    if let Some(e) = groups.iter().flatten().find(|e| !e.format.is_grounded()) {
        return Err(Failure::Data(EnsembleError::NotGrounded(e.format).into()));
    }
    let predictor = open_backend(config, spec)?;
    let ens = EnsembleConfig {
        n_variants: n,
        seed: config.seed,
        raw_string_vote: raw_vote,
    };
    let r = run_gpe(&groups, predictor.as_ref(), &ExactMatcher, &ens).map_err(|e| match e {
        EnsembleError::Backend(b) => backend(b),
        other => Failure::Data(other.into()),
    })?;
    print!("{}", r.to_table());
    if let Some(path) = report {
        write_json(path, &r)?;
    }
    let failed = r.single_pass.failed;
    if failed > 0 {
        return Err(backend(anyhow!("{failed} first-variant predictions failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_lists() {
        assert_eq!(parse_ranks("0..5").unwrap().0, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(parse_ranks("0,2, 4").unwrap().0, vec![0, 2, 4]);
        assert_eq!(parse_ranks("3").unwrap().0, vec![3]);
        assert!(parse_ranks("0..6").is_err());
        assert!(parse_ranks("4..2").is_err());
        assert!(parse_ranks("x").is_err());
    }
}
