use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::data::{read_embeddings, read_records, read_triples, Content, Record, Records};
use super::{EvalArgs, IndexArgs, SearchArgs, StageArg, TrainArgs};
use crate::encoder::{
    add_language, encode, finetune_step, mlm_step, Batch, ModularEncoderParams, Stage,
    TrainingTriple,
};
use crate::error::{Error, Result};
use crate::eval::{brute_force_search, read_qrels, read_run, write_run, Metric, MetricReport, RunFile};
use crate::index::{build_index, search, CompressedIndex, Corpus, PassageId, SearchParams};
use crate::scoring::{prepare_passage, prepare_query, LanguageId, PreparedSequence, TermEmbeddingMatrix};
use crate::tokenizer::HashTokenizer;

/// Passage names, in `PassageId` order, stored next to the index files.
pub const NAMES_FILE: &str = "names.json";

struct LossLog {
    rows: Vec<(Stage, usize, f64)>,
}

impl LossLog {
    fn push(&mut self, stage: Stage, step: usize, loss: f64) {
        self.rows.push((stage, step, loss));
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("stage,step,loss\n");
        for (stage, step, loss) in &self.rows {
            writeln!(out, "{stage},{step},{loss}").expect("write to string");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn text_of<'a>(id: &str, record: &'a Record) -> Result<&'a str> {
    match &record.content {
        Content::Text(t) => Ok(t),
        Content::Embeddings(_) => Err(Error::InvalidConfig(format!(
            "record `{id}` carries embeddings, training needs text"
        ))),
    }
}

/// Text passages grouped by language, each group in id order.
fn passages_by_language(
    records: &Records,
    tokenizer: &HashTokenizer,
    m: usize,
) -> Result<BTreeMap<LanguageId, Vec<PreparedSequence>>> {
    let mut out: BTreeMap<LanguageId, Vec<PreparedSequence>> = BTreeMap::new();
    for r in records.values() {
        if let Content::Text(t) = &r.content {
            let seq = prepare_passage(&tokenizer.tokenize(t), m, r.language.clone())?;
            out.entry(r.language.clone()).or_default().push(seq);
        }
    }
    Ok(out)
}

/// Masked-language steps cycling over `languages`, one random passage per step.
fn run_mlm(
    params: &mut ModularEncoderParams,
    samples: &BTreeMap<LanguageId, Vec<PreparedSequence>>,
    languages: &[LanguageId],
    steps: usize,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
    log: &mut LossLog,
) -> Result<()> {
    let stage = params.stage();
    for step in 0..steps {
        let lang = &languages[step % languages.len()];
        let pool = &samples[lang];
        let seq = &pool[rng.gen_range(0..pool.len())];
        let loss = mlm_step(params, seq, config.mask_rate, config.mlm_lr, rng)?;
        log.push(stage, step, loss);
    }
    if let Some(&(_, _, last)) = log.rows.last() {
        info!("{stage}: {steps} steps, last loss {last:.6}");
    }
    Ok(())
}

fn build_triples(
    ids: &[super::data::TripleIds],
    queries: &Records,
    corpus: &Records,
    tokenizer: &HashTokenizer,
    config: &RunConfig,
    only: Option<&LanguageId>,
) -> Result<Vec<TrainingTriple>> {
    fn lookup<'a>(records: &'a Records, id: &str) -> Result<&'a Record> {
        records.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }
    let mut out = Vec::new();
    for t in ids {
        let q = lookup(queries, &t.query)?;
        let p = lookup(corpus, &t.positive)?;
        let n = lookup(corpus, &t.negative)?;
        if only.is_some_and(|l| *l != q.language) {
            continue;
        }
        let passage = |id: &str, r: &Record| {
            prepare_passage(&tokenizer.tokenize(text_of(id, r)?), config.m, r.language.clone())
        };
        out.push(TrainingTriple::new(
            prepare_query(&tokenizer.tokenize(text_of(&t.query, q)?), config.n, q.language.clone())?,
            passage(&t.positive, p)?,
            passage(&t.negative, n)?,
        )?);
    }
    Ok(out)
}

/// Monolingual batches of at most `batch_size`, grouped by language in
/// language order, file order within a language.
fn make_batches(triples: Vec<TrainingTriple>, batch_size: usize) -> Result<Vec<Batch>> {
    let mut by_lang: BTreeMap<LanguageId, Vec<TrainingTriple>> = BTreeMap::new();
    for t in triples {
        by_lang.entry(t.query.language.clone()).or_default().push(t);
    }
    let mut batches = Vec::new();
    for group in by_lang.into_values() {
        for chunk in group.chunks(batch_size) {
            batches.push(Batch::new(chunk.to_vec())?);
        }
    }
    Ok(batches)
}

fn finetune(
    params: &mut ModularEncoderParams,
    args: &TrainArgs,
    config: &RunConfig,
    corpus: &Records,
    tokenizer: &HashTokenizer,
    lang: Option<&LanguageId>,
    log: &mut LossLog,
) -> Result<()> {
    let path = args
        .triples
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("fine-tuning needs --triples".into()))?;
    let ids = read_triples(path)?;
    let queries = read_records(&args.queries)?;
    let triples = build_triples(&ids, &queries, corpus, tokenizer, config, lang)?;
    if triples.is_empty() {
        return Err(Error::EmptyInput(format!("no training triples in {}", path.display())));
    }
    for t in &triples {
        if !params.has_language(&t.query.language) {
            return Err(Error::UnknownLanguage(t.query.language.to_string()));
        }
    }
    if config.finetune_steps == 0 {
        info!("finetune: 0 steps, model left in {}", params.stage());
        return Ok(());
    }
    let batches = make_batches(triples, config.batch_size)?;
    params.set_stage(Stage::Finetune)?;
    for step in 0..config.finetune_steps {
        let loss = finetune_step(params, &batches[step % batches.len()], config.lr)?;
        log.push(Stage::Finetune, step, loss);
    }
    if let Some(&(_, _, last)) = log.rows.last() {
        info!("finetune: {} steps, last loss {last:.6}", config.finetune_steps);
    }
    Ok(())
}

fn load_init(args: &TrainArgs) -> Result<ModularEncoderParams> {
    let path = args.init.as_deref().ok_or_else(|| {
        Error::InvalidConfig("--init <checkpoint> is required for this stage".into())
    })?;
    ModularEncoderParams::load(path)
}

/// Trains and writes a checkpoint to `args.out`.
///
/// Without `--stage` this pretrains a fresh model on every language in the
/// corpus, then fine-tunes when triples are given. A stage transition only
/// happens when that stage runs at least one step, so zero fine-tuning steps
/// leave the pretrained model untouched.
pub fn cmd_train(config: &RunConfig, args: &TrainArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let corpus = read_records(&args.corpus)?;
    let lang = args.lang.as_deref().map(LanguageId::from);
    let mut log = LossLog { rows: Vec::new() };

    let params = match args.stage {
        None | Some(StageArg::Pretrain) => {
            if args.init.is_some() {
                return Err(Error::InvalidConfig(
                    "--init continues a trained model; pretraining starts from scratch".into(),
                ));
            }
            let tokenizer = HashTokenizer::new(config.vocab_size)?;
            let samples = passages_by_language(&corpus, &tokenizer, config.m)?;
            let languages: Vec<LanguageId> = match &lang {
                Some(l) if samples.contains_key(l) => vec![l.clone()],
                Some(l) => return Err(Error::UnknownLanguage(l.to_string())),
                None => samples.keys().cloned().collect(),
            };
            if languages.is_empty() {
                return Err(Error::EmptyInput("corpus has no text records".into()));
            }
            let mut params = ModularEncoderParams::new(config.encoder_config(), &languages, seed)?;
            run_mlm(&mut params, &samples, &languages, config.pretrain_steps, config, &mut rng, &mut log)?;
            match (args.stage, &args.triples) {
                (None, Some(_)) => finetune(&mut params, args, config, &corpus, &tokenizer, lang.as_ref(), &mut log)?,
                (Some(_), Some(_)) => warn!("--triples ignored by --stage pretrain"),
                _ => {}
            }
            params
        }
        Some(StageArg::Finetune) => {
            let mut params = load_init(args)?;
            let tokenizer = HashTokenizer::new(params.config().vocab_size)?;
            finetune(&mut params, args, config, &corpus, &tokenizer, lang.as_ref(), &mut log)?;
            params
        }
        Some(StageArg::Extend) => {
            let mut params = load_init(args)?;
            let lang = lang.ok_or_else(|| {
                Error::InvalidConfig("--stage extend needs --lang <new language>".into())
            })?;
            params.set_stage(Stage::Extend)?;
            if !params.has_language(&lang) {
                add_language(&mut params, lang.clone(), seed)?;
            } else if !params.extension_languages().contains(&lang) {
                return Err(Error::DuplicateLanguage(lang.to_string()));
            }
            let tokenizer = HashTokenizer::new(params.config().vocab_size)?;
            let samples = passages_by_language(&corpus, &tokenizer, config.m)?;
            if !samples.contains_key(&lang) {
                return Err(Error::UnknownLanguage(lang.to_string()));
            }
            run_mlm(&mut params, &samples, &[lang], config.extend_steps, config, &mut rng, &mut log)?;
            params
        }
    };
    params.save(&args.out)?;
    if let Some(report) = &args.report {
        log.write(report)?;
    }
    Ok(())
}

/// Encodes text records with the checkpoint; embedding records pass through.
fn embed_records(
    records: Records,
    checkpoint: Option<&Path>,
    prepare: impl Fn(&[u32], LanguageId) -> Result<PreparedSequence> + Sync,
) -> Result<BTreeMap<String, TermEmbeddingMatrix>> {
    let needs_encoder = records.values().any(|r| matches!(r.content, Content::Text(_)));
    let params = match (needs_encoder, checkpoint) {
        (false, _) => None,
        (true, Some(path)) => Some(ModularEncoderParams::load(path)?),
        (true, None) => {
            return Err(Error::InvalidConfig(
                "text records need --checkpoint to be encoded".into(),
            ))
        }
    };
    let tokenizer = params
        .as_ref()
        .map(|p| HashTokenizer::new(p.config().vocab_size))
        .transpose()?;
    let items: Vec<(String, Record)> = records.into_iter().collect();
    items
        .into_par_iter()
        .map(|(id, r)| {
            let m = match r.content {
                Content::Embeddings(m) => m,
                Content::Text(t) => {
                    let (params, tok) = (params.as_ref().expect("loaded"), tokenizer.expect("loaded"));
                    encode(&prepare(&tok.tokenize(&t), r.language)?, params)?
                }
            };
            Ok((id, m))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexSummary {
    pub embeddings: usize,
    pub centroids: usize,
    pub bits_per_vector: usize,
}

/// Builds an index from a binary embeddings block or from corpus records and
/// writes it, with a passage name table, to `args.out`.
pub fn cmd_index(config: &RunConfig, args: &IndexArgs) -> Result<IndexSummary> {
    let items = match &args.embeddings {
        Some(path) => read_embeddings(path)?,
        None => {
            let m = config.m;
            embed_records(read_records(&args.corpus)?, args.checkpoint.as_deref(), |t, l| {
                prepare_passage(t, m, l)
            })?
        }
    };
    if items.is_empty() {
        return Err(Error::EmptyInput("corpus".into()));
    }
    if items.len() > u32::MAX as usize {
        return Err(Error::InvalidConfig("more than 2^32 passages".into()));
    }
    let mut names = Vec::with_capacity(items.len());
    let mut corpus = Corpus::new();
    for (i, (name, m)) in items.into_iter().enumerate() {
        names.push(name);
        corpus.insert(PassageId(i as u32), m);
    }
    let mut index_config = config.index_config();
    if let Some(seed) = args.seed {
        index_config.seed = seed;
    }
    let index = build_index(&corpus, &index_config)?;
    index.write_dir(&args.out)?;
    let names_path = args.out.join(NAMES_FILE);
    let json = serde_json::to_string(&names).expect("strings serialize");
    fs::write(&names_path, json + "\n").map_err(|e| Error::io(&names_path, e))?;
    Ok(IndexSummary {
        embeddings: index.num_embeddings(),
        centroids: index.centroids().count(),
        bits_per_vector: index.bits_per_embedding(),
    })
}

fn read_names(dir: &Path, index: &CompressedIndex) -> Result<Vec<String>> {
    let path = dir.join(NAMES_FILE);
    if !path.exists() {
        // Indexes built through the library have no name table; ids stand in.
        let max = index.passage_ids().iter().map(|p| p.0 as usize + 1).max().unwrap_or(0);
        return Ok((0..max).map(|i| i.to_string()).collect());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if index.passage_ids().iter().any(|p| p.0 as usize >= names.len()) {
        return Err(Error::Format(format!(
            "{}: {} names for {} passages",
            path.display(),
            names.len(),
            index.num_passages()
        )));
    }
    Ok(names)
}

fn search_params(config: &RunConfig, args: &SearchArgs, centroids: usize) -> SearchParams {
    let final_k = args.k.unwrap_or(config.final_k);
    let candidate_k = args.candidate_k.unwrap_or(config.candidate_k.max(final_k));
    let n_probe = args.nprobe.unwrap_or_else(|| {
        if config.n_probe > centroids {
            info!("n_probe {} capped at the {centroids} centroids of this index", config.n_probe);
        }
        config.n_probe.min(centroids)
    });
    SearchParams {
        n_probe,
        candidate_k,
        final_k,
    }
}

fn latency_summary(mut ms: Vec<f64>) -> String {
    if ms.is_empty() {
        return "latency: no queries".into();
    }
    ms.sort_by(f64::total_cmp);
    let pick = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    format!(
        "latency ms over {} queries: mean {mean:.3} p50 {:.3} p95 {:.3} max {:.3}",
        ms.len(),
        pick(0.5),
        pick(0.95),
        ms[ms.len() - 1]
    )
}

/// Searches every query and writes a TREC run to `args.out`.
pub fn cmd_search(config: &RunConfig, args: &SearchArgs) -> Result<RunFile> {
    let index = CompressedIndex::read_dir(&args.index)?;
    let names = read_names(&args.index, &index)?;
    let n = config.n;
    let queries = embed_records(read_records(&args.queries)?, args.checkpoint.as_deref(), |t, l| {
        prepare_query(t, n, l)
    })?;
    for q in queries.values() {
        if q.dim() != index.dim() {
            return Err(Error::dim(index.dim(), q.dim()));
        }
    }
    let params = search_params(config, args, index.centroids().count());
    let exact_corpus = if args.exact {
        if params.final_k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        Some(index.decompressed_corpus())
    } else {
        params.validate(&index)?;
        None
    };
    let mut run = RunFile::new();
    let mut latencies = Vec::with_capacity(queries.len());
    for (qid, q) in &queries {
        let start = Instant::now();
        let hits = match &exact_corpus {
            Some(corpus) => brute_force_search(q, corpus, params.final_k)?,
            None => search(q, &index, &params)?,
        };
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
        let results = hits
            .into_iter()
            .map(|(pid, s)| (names[pid.0 as usize].clone(), s))
            .collect();
        run.insert(qid, results)?;
    }
    write_run(&args.out, &run, &args.tag)?;
    if args.latency {
        eprintln!("{}", latency_summary(latencies));
    }
    Ok(run)
}

/// Parses the metric list first, so a bad name fails before any file is read.
pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<(Metric, MetricReport)>> {
    let metrics = args
        .metrics
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Metric::parse)
        .collect::<Result<Vec<_>>>()?;
    if metrics.is_empty() {
        return Err(Error::InvalidConfig("--metrics is empty".into()));
    }
    let run = read_run(&args.run)?;
    let qrels = read_qrels(&args.qrels)?;
    metrics
        .into_iter()
        .map(|m| Ok((m, m.evaluate(&run, &qrels)?)))
        .collect()
}
