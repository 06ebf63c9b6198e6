use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use atomrag::decomposer::{
    collect_dataset, export_sft as export_pairs, read_trajectories_jsonl, write_sft_jsonl,
    write_trajectories_jsonl, CollectErrorKind,
};
use atomrag::evaluation::{load_benchmark, run_eval, BenchmarkFormat, QaRecord};
use atomrag::ingest::{ingest_documents, IngestError};
use atomrag::kb::{self, LayeredKnowledgeBase};
use atomrag::solver::{Method, QuestionSolver, SolveError, SolveErrorKind, Solver};
use atomrag::synthetic::SyntheticBench;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{Gateway, RunConfig};
use crate::corpus::{documents_from_benchmark, load_corpus, write_jsonl};
use crate::{write_file, CliError};

pub struct Context {
    pub cfg: RunConfig,
    pub parallel: usize,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output.dir.join(name)
    }

    /// `--kb`, then `kb.path`, then `<output.dir>/kb.atomrag`.
    fn kb_path(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.cfg.kb.path.clone())
            .unwrap_or_else(|| self.out("kb.atomrag"))
    }

    fn parallel_for(&self, gw: &Gateway) -> usize {
        if gw.sequential {
            1
        } else {
            self.parallel
        }
    }
}

fn solve_error(e: &SolveError) -> CliError {
    match &e.kind {
        SolveErrorKind::InvalidConfig(m) => CliError::usage(m),
        SolveErrorKind::Gateway(g) => CliError::gateway(g),
        SolveErrorKind::Retrieval(r) => CliError::env(r),
    }
}

fn ingest_error(e: IngestError) -> CliError {
    match e {
        IngestError::EmptyDocument { .. }
        | IngestError::MissingUri
        | IngestError::DimensionMismatch { .. } => CliError::usage(e),
        IngestError::Extraction { .. } | IngestError::Embedding { .. } | IngestError::Chunking { .. } => {
            CliError::gateway(e)
        }
        _ => CliError::env(e),
    }
}

fn load_kb(path: &Path) -> Result<LayeredKnowledgeBase, CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("knowledge base {} does not exist", path.display())));
    }
    kb::load(path).map_err(|e| CliError::usage(format!("cannot load {}: {e}", path.display())))
}

/// The archive a method needs, or an empty base for methods without one.
fn kb_for(ctx: &Context, method: Method, flag: Option<PathBuf>, gw: &Gateway) -> Result<LayeredKnowledgeBase, CliError> {
    if !method.uses_kb() {
        return Ok(LayeredKnowledgeBase::new(gw.inner.dimension()));
    }
    let kb = load_kb(&ctx.kb_path(flag))?;
    if kb.embedding_dim() != gw.inner.dimension() {
        return Err(CliError::usage(format!(
            "knowledge base has dimension {} but the embedder produces {}",
            kb.embedding_dim(),
            gw.inner.dimension()
        )));
    }
    Ok(kb)
}

pub fn ingest(
    ctx: &Context,
    corpus: Option<PathBuf>,
    benchmark: Option<(PathBuf, BenchmarkFormat)>,
    kb_flag: Option<PathBuf>,
) -> Result<(), CliError> {
    let docs = match (corpus, benchmark) {
        (Some(path), _) => load_corpus(&path)?,
        (None, Some((path, format))) => {
            let records = load_benchmark(&path, format).map_err(CliError::usage)?;
            let docs = documents_from_benchmark(&records, format.name());
            if docs.is_empty() {
                return Err(CliError::usage(format!("{} has no context paragraphs", path.display())));
            }
            docs
        }
        (None, None) => return Err(CliError::usage("give --corpus or --benchmark")),
    };
    let gw = ctx.cfg.gateway()?;
    let path = ctx.kb_path(kb_flag);
    let mut kb = if path.is_file() {
        load_kb(&path)?
    } else {
        LayeredKnowledgeBase::new(gw.inner.dimension())
    };
    let icfg = ctx.cfg.ingest_config(ctx.parallel_for(&gw));
    let report = ingest_documents(&mut kb, &docs, &icfg, gw.inner.as_ref()).map_err(ingest_error)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::env)?;
    }
    kb::save(&kb, &path).map_err(|e| CliError::env(format!("cannot save {}: {e}", path.display())))?;
    println!(
        "documents={} replaced={} chunks={} atomics={} units={} violations={}",
        report.documents,
        report.replaced,
        report.chunks,
        report.atomics,
        report.units,
        report.violations.len()
    );
    for v in &report.violations {
        println!("violation: {v}");
    }
    println!("kb: {}", path.display());
    if !report.violations.is_empty() {
        return Err(CliError::env(format!("{} integrity violations", report.violations.len())));
    }
    Ok(())
}

pub fn solve(
    ctx: &Context,
    method: Method,
    question: &str,
    kb_flag: Option<PathBuf>,
    transcript: Option<PathBuf>,
) -> Result<(), CliError> {
    if question.trim().is_empty() {
        return Err(CliError::usage("question is empty"));
    }
    let gw = ctx.cfg.gateway()?;
    let kb = kb_for(ctx, method, kb_flag, &gw)?;
    let scfg = ctx.cfg.solver_config();
    let solver = Solver {
        method,
        kb: &kb,
        config: &scfg,
        gateway: gw.inner.as_ref(),
    };
    let path = transcript.unwrap_or_else(|| ctx.out("transcript.json"));
    let outcome = solver.solve(question);
    let doc = match &outcome {
        Ok(r) => json!({
            "method": method,
            "question": question,
            "answer": r.answer,
            "state": r.state,
            "answer_context": r.answer_context,
            "transcript": r.transcript,
        }),
        Err(e) => json!({
            "method": method,
            "question": question,
            "error": e.kind.to_string(),
            "transcript": e.transcript,
        }),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(CliError::env)?;
    write_file(&path, text.as_bytes())?;
    match outcome {
        Ok(r) => {
            println!("{}", r.answer);
            Ok(())
        }
        Err(e) => Err(solve_error(&e)),
    }
}

/// A seeded sample of `n` records, kept in file order.
pub fn sample_records(records: Vec<QaRecord>, n: usize, seed: u64) -> Result<Vec<QaRecord>, CliError> {
    if n > records.len() {
        return Err(CliError::usage(format!(
            "--sample {n} exceeds the {} records available",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();
    let mut slots: Vec<Option<QaRecord>> = records.into_iter().map(Some).collect();
    Ok(picked.into_iter().filter_map(|i| slots[i].take()).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    ctx: &Context,
    benchmark: &Path,
    format: BenchmarkFormat,
    method: Method,
    sample: Option<usize>,
    seed: u64,
    judge: bool,
    kb_flag: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut records = load_benchmark(benchmark, format).map_err(CliError::usage)?;
    if let Some(n) = sample {
        records = sample_records(records, n, seed)?;
    }
    let gw = ctx.cfg.gateway()?;
    let kb = kb_for(ctx, method, kb_flag, &gw)?;
    let scfg = ctx.cfg.solver_config();
    let solver = Solver {
        method,
        kb: &kb,
        config: &scfg,
        gateway: gw.inner.as_ref(),
    };
    let ecfg = ctx.cfg.eval_config(ctx.parallel_for(&gw), judge);
    let (report, results) =
        run_eval(method.name(), &records, &solver, &ecfg, Some(gw.inner.as_ref())).map_err(CliError::env)?;
    let stem = format!("eval-{}-{}", format.name(), method.name());
    let json = serde_json::to_string_pretty(&report).map_err(CliError::env)?;
    write_file(&ctx.out(&format!("{stem}.json")), json.as_bytes())?;
    let table = report.table();
    write_file(&ctx.out(&format!("{stem}.txt")), table.as_bytes())?;
    let transcripts: Vec<_> = records
        .iter()
        .zip(&results)
        .map(|(r, res)| {
            json!({
                "id": r.id,
                "transcript": res.as_ref().map(|s| &s.transcript),
            })
        })
        .collect();
    write_jsonl(&ctx.out(&format!("{stem}-transcripts.jsonl")), &transcripts)?;
    print!("{table}");
    if report.flagged() > 0 {
        println!("flagged rows: {}", report.flagged());
    }
    Ok(())
}

pub fn collect(
    ctx: &Context,
    qa: &Path,
    format: BenchmarkFormat,
    kb_flag: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let records = load_benchmark(qa, format).map_err(CliError::usage)?;
    let gw = ctx.cfg.gateway()?;
    let kb = kb_for(ctx, Method::Decompose, kb_flag, &gw)?;
    let ccfg = ctx.cfg.collection_config(ctx.parallel_for(&gw));
    let outcome = collect_dataset(&kb, &records, &ccfg, gw.inner.as_ref()).map_err(|e| match e {
        CollectErrorKind::InvalidConfig(_) => CliError::usage(e),
        CollectErrorKind::Gateway(_) => CliError::gateway(e),
        _ => CliError::env(e),
    })?;
    let path = out.unwrap_or_else(|| ctx.out("trajectories.jsonl"));
    let mut buf = Vec::new();
    write_trajectories_jsonl(&outcome.records, &mut buf).map_err(CliError::env)?;
    write_file(&path, &buf)?;
    for (id, err) in &outcome.failures {
        eprintln!("failed {id}: {err}");
    }
    let s = outcome.stats;
    println!(
        "questions={} kept={} failed={} kept_fraction={:.4}",
        s.questions, s.kept, s.failed, s.kept_fraction
    );
    println!("trajectories: {}", path.display());
    Ok(())
}

pub fn export_sft(
    ctx: &Context,
    trajectories: &Path,
    out: Option<PathBuf>,
    include_rejected: bool,
) -> Result<(), CliError> {
    let file = File::open(trajectories)
        .map_err(|e| CliError::usage(format!("cannot open {}: {e}", trajectories.display())))?;
    let records = read_trajectories_jsonl(BufReader::new(file))
        .map_err(|e| CliError::usage(format!("{}: {e}", trajectories.display())))?;
    let used: Vec<_> = records.iter().filter(|r| include_rejected || r.kept).collect();
    let pairs: Vec<_> = used
        .iter()
        .flat_map(|r| export_pairs(&r.id, &r.trajectory))
        .collect();
    let path = out.unwrap_or_else(|| ctx.out("sft.jsonl"));
    let mut buf = Vec::new();
    write_sft_jsonl(&pairs, &mut buf).map_err(CliError::env)?;
    write_file(&path, &buf)?;
    println!("trajectories={} pairs={}", used.len(), pairs.len());
    println!("sft: {}", path.display());
    Ok(())
}

pub fn synth(ctx: &Context, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = ctx.cfg.synthetic.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let bench = SyntheticBench::generate(&spec).map_err(CliError::usage)?;
    let dir = out.unwrap_or_else(|| ctx.out("synthetic"));
    write_jsonl(&dir.join("corpus.jsonl"), &bench.documents)?;
    write_jsonl(&dir.join("questions.jsonl"), &bench.records)?;
    write_jsonl(&dir.join("chains.jsonl"), &bench.chains)?;
    println!(
        "documents={} questions={} seed={}",
        bench.documents.len(),
        bench.records.len(),
        spec.seed
    );
    println!("synthetic: {}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn recs(n: usize) -> Vec<QaRecord> {
        (0..n)
            .map(|i| QaRecord {
                id: format!("q{i}"),
                question: format!("question {i}"),
                gold_answers: vec!["a".into()],
                context_paragraphs: Vec::new(),
                metadata: BTreeMap::new(),
            })
            .collect()
    }

    #[test]
    fn sampling_is_seeded_and_ordered() {
        let a = sample_records(recs(50), 10, 3).unwrap();
        let b = sample_records(recs(50), 10, 3).unwrap();
        let ids = |v: &[QaRecord]| v.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let idx: Vec<usize> = a.iter().map(|r| r.id[1..].parse().unwrap()).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(ids(&a), ids(&sample_records(recs(50), 10, 4).unwrap()));
    }

    #[test]
    fn oversized_sample_is_a_usage_error() {
        assert_eq!(sample_records(recs(3), 4, 0).unwrap_err().code, 1);
    }
}
