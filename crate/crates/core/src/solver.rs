//! Knowledge-aware iterative decomposition and the baseline solvers.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::strip_list_marker;
use crate::gateway::prompts::{format_passages, names};
use crate::gateway::{last_field, GatewayError, LlmGateway, Recorder, TranscriptEntry};
use crate::kb::LayeredKnowledgeBase;
use crate::model::{AtomicId, Chunk, ChunkId, SolveState, TerminationReason};
use crate::retrieval::{
    flat_from_vector, hierarchical_from_vector, RetrievalConfig, RetrievalError, ScoredChunk,
};

/// Upper bound on `final_context_limit`.
pub const MAX_FINAL_CONTEXT: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Decomposition rounds (and self-ask follow-ups) per question.
    pub max_iterations: usize,
    /// Context chunks passed to the final answer call.
    pub final_context_limit: usize,
    pub retrieval: RetrievalConfig,
    pub qa_temperature: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            final_context_limit: 5,
            retrieval: RetrievalConfig::default(),
            qa_temperature: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveErrorKind> {
        let bad = |m: &str| Err(SolveErrorKind::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if self.final_context_limit == 0 || self.final_context_limit > MAX_FINAL_CONTEXT {
            return bad("final_context_limit must lie in 1..=32");
        }
        if !(0.0..=2.0).contains(&self.qa_temperature) {
            return bad("qa_temperature must lie in [0, 2]");
        }
        self.retrieval.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolveErrorKind {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// A failed solve, with every exchange completed before the failure.
#[derive(Debug, Error)]
#[error("{kind}")]
pub struct SolveError {
    #[source]
    pub kind: SolveErrorKind,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub answer: String,
    pub state: SolveState,
    /// Score attached to each entry of `state.context`, same order.
    pub context_scores: Vec<f64>,
    /// Chunks shown to the final answer call, in prompt order.
    pub answer_context: Vec<ChunkId>,
    pub transcript: Vec<TranscriptEntry>,
}

/// An atomic question offered to the selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub atomic_id: AtomicId,
    pub chunk_id: ChunkId,
    pub question: String,
    pub score: f64,
}

fn chunk_texts<'a>(kb: &'a LayeredKnowledgeBase, ids: &[ChunkId]) -> Vec<&'a str> {
    ids.iter()
        .filter_map(|id| kb.chunk(*id))
        .map(|c| c.text.as_str())
        .collect()
}

/// Parses proposal lines: list markers stripped, blanks and `None` dropped,
/// duplicates removed (case-insensitively) keeping the first occurrence.
pub fn parse_proposals(response: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in response.lines() {
        let p = strip_list_marker(line);
        if p.is_empty() || p.trim_end_matches('.').eq_ignore_ascii_case("none") {
            continue;
        }
        if seen.insert(p.to_lowercase()) {
            out.push(p.to_string());
        }
    }
    out
}

pub fn propose_atomics(
    question: &str,
    context: &[&Chunk],
    temperature: f64,
    rec: &Recorder<'_>,
) -> Result<Vec<String>, GatewayError> {
    let ctx = format_passages(context.iter().map(|c| c.text.as_str()));
    let resp = rec.ask(
        names::PROPOSE,
        &[("question", question), ("context", &ctx)],
        temperature,
    )?;
    Ok(parse_proposals(&resp))
}

/// Union of the top-`k` atomics (score `>= threshold`) of every proposal
/// vector. Atomics whose chunk is in `exclude` are skipped before the top-`k`
/// cut. Duplicates keep their best score; the union is ordered by score
/// descending, then atomic id, and cut to `cap`.
pub fn candidates_from_vectors(
    kb: &LayeredKnowledgeBase,
    proposal_vectors: &[Vec<f64>],
    exclude: &HashSet<ChunkId>,
    k: usize,
    threshold: f64,
    cap: usize,
) -> Result<Vec<Candidate>, RetrievalError> {
    let mut best: BTreeMap<AtomicId, f64> = BTreeMap::new();
    for v in proposal_vectors {
        let keep = |id: &AtomicId| {
            kb.atomic(*id)
                .is_some_and(|a| !exclude.contains(&a.chunk_id))
        };
        for (id, s) in kb.atomic_index().nearest_filtered(v, k, threshold, keep)? {
            let e = best.entry(id).or_insert(s);
            if s > *e {
                *e = s;
            }
        }
    }
    let mut out: Vec<Candidate> = best
        .into_iter()
        .filter_map(|(id, score)| {
            kb.atomic(id).map(|a| Candidate {
                atomic_id: id,
                chunk_id: a.chunk_id,
                question: a.question_text.clone(),
                score,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.atomic_id.cmp(&b.atomic_id))
    });
    out.truncate(cap);
    Ok(out)
}

/// Embeds the proposals and gathers candidates with the decomposition
/// settings (`atomic_select_k`, `atomic_threshold`, capped union).
pub fn fetch_atomic_candidates(
    kb: &LayeredKnowledgeBase,
    proposals: &[String],
    context: &[ChunkId],
    cfg: &RetrievalConfig,
    gateway: &dyn LlmGateway,
) -> Result<Vec<Candidate>, RetrievalError> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = gateway.embed(proposals)?;
    let exclude: HashSet<ChunkId> = context.iter().copied().collect();
    candidates_from_vectors(
        kb,
        &vectors,
        &exclude,
        cfg.atomic_select_k,
        cfg.atomic_threshold,
        cfg.candidate_cap(),
    )
}

/// Candidate list shown to the selector: `[i] question`, numbered from 0.
pub fn format_candidates(candidates: &[Candidate]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[{i}] {}", c.question))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Reads a selection reply: a bare candidate index, or `None`. Anything else,
/// including an out-of-range index, counts as no selection.
pub fn parse_selection(response: &str, n_candidates: usize) -> Option<usize> {
    let first = response.lines().map(str::trim).find(|l| !l.is_empty())?;
    let t = first
        .trim_start_matches(['[', '('])
        .trim_end_matches(['.', ']', ')']);
    if t.eq_ignore_ascii_case("none") {
        return None;
    }
    let digits: String = t.chars().take_while(char::is_ascii_digit).collect();
    match digits.parse::<usize>() {
        Ok(i) if i < n_candidates && digits.len() == t.len() => Some(i),
        _ => {
            tracing::warn!(response = first, "unusable selection reply; treating as None");
            None
        }
    }
}

/// Asks the model to pick one candidate. Only question texts are shown.
pub fn select_atomic(
    question: &str,
    context: &[&Chunk],
    candidates: &[Candidate],
    temperature: f64,
    rec: &Recorder<'_>,
) -> Result<Option<usize>, GatewayError> {
    if candidates.is_empty() {
        return Ok(None);
    }
    let ctx = format_passages(context.iter().map(|c| c.text.as_str()));
    let list = format_candidates(candidates);
    let resp = rec.ask(
        names::SELECT,
        &[("question", question), ("context", &ctx), ("candidates", &list)],
        temperature,
    )?;
    Ok(parse_selection(&resp, candidates.len()))
}

/// Short answer from a reply: the last `Answer:` field if present, else the
/// first non-empty line.
pub fn extract_answer(response: &str) -> String {
    if let Some(a) = last_field(response, "Answer:") {
        return a.to_string();
    }
    response
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_string()
}

/// Final answer from `question` and the given context chunks.
pub fn answer_with_context(
    question: &str,
    context: &[&str],
    temperature: f64,
    rec: &Recorder<'_>,
) -> Result<String, GatewayError> {
    let ctx = format_passages(context.iter().copied());
    let resp = rec.ask(
        names::ANSWER,
        &[("question", question), ("context", &ctx)],
        temperature,
    )?;
    Ok(extract_answer(&resp))
}

/// Indices of the `limit` highest scores, ties by position, returned in
/// their original order.
pub fn top_context(scores: &[f64], limit: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(limit);
    idx.sort_unstable();
    idx
}

struct Run<'a> {
    rec: Recorder<'a>,
}

impl<'a> Run<'a> {
    fn new(gateway: &'a dyn LlmGateway) -> Self {
        Self {
            rec: Recorder::new(gateway),
        }
    }

    fn fail(self, kind: impl Into<SolveErrorKind>) -> SolveError {
        SolveError {
            kind: kind.into(),
            transcript: self.rec.into_entries(),
        }
    }
}

macro_rules! attempt {
    ($run:ident, $e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return Err($run.fail(err)),
        }
    };
}

/// Knowledge-aware decomposition: propose, fetch, select, extend the
/// context; then answer from the best context chunks.
pub fn solve_decompose(
    kb: &LayeredKnowledgeBase,
    question: &str,
    cfg: &SolverConfig,
    gateway: &dyn LlmGateway,
) -> Result<SolveResult, SolveError> {
    let run = Run::new(gateway);
    attempt!(run, cfg.validate());
    let temp = cfg.qa_temperature;
    let mut state = SolveState::new(question);
    let mut scores = Vec::new();

    for t in 1..=cfg.max_iterations {
        state.iteration = t as u32;
        let ctx: Vec<&Chunk> = state.context.iter().filter_map(|id| kb.chunk(*id)).collect();
        let proposals = attempt!(run, propose_atomics(question, &ctx, temp, &run.rec));
        if proposals.is_empty() {
            state.terminate(TerminationReason::ProposalsEmpty);
            break;
        }
        let candidates = attempt!(
            run,
            fetch_atomic_candidates(kb, &proposals, &state.context, &cfg.retrieval, gateway)
        );
        if candidates.is_empty() {
            state.terminate(TerminationReason::NoCandidates);
            break;
        }
        let Some(i) = attempt!(run, select_atomic(question, &ctx, &candidates, temp, &run.rec))
        else {
            state.terminate(TerminationReason::SelectionNone);
            break;
        };
        let chosen = &candidates[i];
        tracing::debug!(round = t, atomic = %chosen.atomic_id, "selected");
        state.context.push(chosen.chunk_id);
        state.chosen_atomics.push(chosen.atomic_id);
        scores.push(chosen.score);
    }
    if !state.terminated {
        state.terminate(TerminationReason::BudgetExhausted);
    }

    let keep = top_context(&scores, cfg.final_context_limit);
    let answer_context: Vec<ChunkId> = keep.iter().map(|&i| state.context[i]).collect();
    let texts = chunk_texts(kb, &answer_context);
    let answer = attempt!(run, answer_with_context(question, &texts, temp, &run.rec));
    Ok(SolveResult {
        answer,
        state,
        context_scores: scores,
        answer_context,
        transcript: run.rec.into_entries(),
    })
}

fn answered(
    question: &str,
    answer: String,
    hits: &[ScoredChunk],
    iteration: u32,
    reason: TerminationReason,
    rec: Recorder<'_>,
) -> SolveResult {
    let mut state = SolveState::new(question);
    state.context = hits.iter().map(|h| h.chunk_id).collect();
    state.iteration = iteration;
    state.terminate(reason);
    SolveResult {
        answer,
        context_scores: hits.iter().map(|h| h.score).collect(),
        answer_context: state.context.clone(),
        state,
        transcript: rec.into_entries(),
    }
}

/// One step-by-step call, no retrieval.
pub fn solve_zero_shot_cot(
    question: &str,
    cfg: &SolverConfig,
    gateway: &dyn LlmGateway,
) -> Result<SolveResult, SolveError> {
    let run = Run::new(gateway);
    attempt!(run, cfg.validate());
    let resp = attempt!(
        run,
        run.rec.ask(names::COT, &[("question", question)], cfg.qa_temperature)
    );
    let answer = extract_answer(&resp);
    Ok(answered(question, answer, &[], 1, TerminationReason::Answered, run.rec))
}

fn retrieve(
    kb: &LayeredKnowledgeBase,
    query: &str,
    cfg: &RetrievalConfig,
    hierarchical: bool,
    gateway: &dyn LlmGateway,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    let q = gateway.embed_one(query)?;
    if hierarchical {
        hierarchical_from_vector(kb, &q, cfg)
    } else {
        flat_from_vector(kb, &q, cfg.flat_k, cfg.flat_threshold)
    }
}

/// One retrieval with the question as query, then one answer call.
pub fn solve_naive_rag(
    kb: &LayeredKnowledgeBase,
    question: &str,
    cfg: &SolverConfig,
    gateway: &dyn LlmGateway,
    hierarchical: bool,
) -> Result<SolveResult, SolveError> {
    let run = Run::new(gateway);
    attempt!(run, cfg.validate());
    let hits = attempt!(run, retrieve(kb, question, &cfg.retrieval, hierarchical, gateway));
    let ids: Vec<ChunkId> = hits.iter().map(|h| h.chunk_id).collect();
    let texts = chunk_texts(kb, &ids);
    let answer = attempt!(
        run,
        answer_with_context(question, &texts, cfg.qa_temperature, &run.rec)
    );
    Ok(answered(question, answer, &hits, 1, TerminationReason::Answered, run.rec))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    None,
    Flat,
    Hierarchical,
}

/// What one self-ask turn asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelfAskTurn {
    FollowUp(String),
    Final(String),
    /// No follow-up and no final answer could be read.
    Unclear,
}

pub fn parse_self_ask_turn(response: &str) -> SelfAskTurn {
    if let Some(a) = last_field(response, "So the final answer is:") {
        return SelfAskTurn::Final(a.to_string());
    }
    let follow_up = response
        .lines()
        .find_map(|l| l.trim().strip_prefix("Follow up:"))
        .map(str::trim)
        .filter(|s| !s.is_empty());
    match follow_up {
        Some(f) => SelfAskTurn::FollowUp(f.to_string()),
        None => SelfAskTurn::Unclear,
    }
}

fn push_exchange(dialogue: &mut String, follow_up: &str, answer: &str) {
    if dialogue.is_empty() {
        dialogue.push_str(" Yes.");
    }
    dialogue.push_str("\nFollow up: ");
    dialogue.push_str(follow_up);
    dialogue.push_str("\nIntermediate answer: ");
    dialogue.push_str(answer);
}

/// Few-shot self-ask. Each follow-up is answered on its own (optionally from
/// retrieved chunks); only the intermediate answer enters the dialogue.
pub fn solve_self_ask(
    kb: &LayeredKnowledgeBase,
    question: &str,
    cfg: &SolverConfig,
    gateway: &dyn LlmGateway,
    mode: RetrievalMode,
) -> Result<SolveResult, SolveError> {
    let run = Run::new(gateway);
    attempt!(run, cfg.validate());
    let temp = cfg.qa_temperature;
    let mut dialogue = String::new();
    let mut follow_ups = 0;
    loop {
        if follow_ups == cfg.max_iterations {
            let resp = attempt!(
                run,
                run.rec.ask(
                    names::SELF_ASK_FINAL,
                    &[("question", question), ("dialogue", &dialogue)],
                    temp,
                )
            );
            let answer = extract_answer(&resp);
            return Ok(answered(
                question,
                answer,
                &[],
                follow_ups as u32,
                TerminationReason::BudgetExhausted,
                run.rec,
            ));
        }
        let resp = attempt!(
            run,
            run.rec.ask(
                names::SELF_ASK,
                &[("question", question), ("dialogue", &dialogue)],
                temp,
            )
        );
        let follow_up = match parse_self_ask_turn(&resp) {
            SelfAskTurn::Final(a) => {
                return Ok(answered(
                    question,
                    a,
                    &[],
                    follow_ups as u32,
                    TerminationReason::Answered,
                    run.rec,
                ));
            }
            // Force a final answer from what has been gathered.
            SelfAskTurn::Unclear => {
                let resp = attempt!(
                    run,
                    run.rec.ask(
                        names::SELF_ASK_FINAL,
                        &[("question", question), ("dialogue", &dialogue)],
                        temp,
                    )
                );
                return Ok(answered(
                    question,
                    extract_answer(&resp),
                    &[],
                    follow_ups as u32,
                    TerminationReason::Answered,
                    run.rec,
                ));
            }
            SelfAskTurn::FollowUp(f) => f,
        };
        let hits = match mode {
            RetrievalMode::None => Vec::new(),
            RetrievalMode::Flat | RetrievalMode::Hierarchical => attempt!(
                run,
                retrieve(
                    kb,
                    &follow_up,
                    &cfg.retrieval,
                    mode == RetrievalMode::Hierarchical,
                    gateway,
                )
            ),
        };
        let ids: Vec<ChunkId> = hits.iter().map(|h| h.chunk_id).collect();
        let ctx = format_passages(chunk_texts(kb, &ids));
        let resp = attempt!(
            run,
            run.rec.ask(
                names::SELF_ASK_ANSWER,
                &[("context", &ctx), ("follow_up", &follow_up)],
                temp,
            )
        );
        push_exchange(&mut dialogue, &follow_up, &extract_answer(&resp));
        follow_ups += 1;
    }
}

/// Every solving strategy, as named on the command line and in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cot")]
    ZeroShotCot,
    #[serde(rename = "naive")]
    NaiveRag,
    #[serde(rename = "naive-hr")]
    NaiveRagHierarchical,
    #[serde(rename = "selfask")]
    SelfAsk,
    #[serde(rename = "selfask-r")]
    SelfAskFlat,
    #[serde(rename = "selfask-hr")]
    SelfAskHierarchical,
    #[serde(rename = "decompose")]
    Decompose,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::ZeroShotCot,
        Method::NaiveRag,
        Method::NaiveRagHierarchical,
        Method::SelfAsk,
        Method::SelfAskFlat,
        Method::SelfAskHierarchical,
        Method::Decompose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShotCot => "cot",
            Method::NaiveRag => "naive",
            Method::NaiveRagHierarchical => "naive-hr",
            Method::SelfAsk => "selfask",
            Method::SelfAskFlat => "selfask-r",
            Method::SelfAskHierarchical => "selfask-hr",
            Method::Decompose => "decompose",
        }
    }

    pub fn uses_kb(self) -> bool {
        !matches!(self, Method::ZeroShotCot | Method::SelfAsk)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                format!("unknown method {s:?} (expected one of {})", known.join(", "))
            })
    }
}

/// Common contract of every solver.
pub trait QuestionSolver: Sync {
    fn solve(&self, question: &str) -> Result<SolveResult, SolveError>;
}

/// A [`Method`] bound to a knowledge base, a configuration and a gateway.
pub struct Solver<'a> {
    pub method: Method,
    pub kb: &'a LayeredKnowledgeBase,
    pub config: &'a SolverConfig,
    pub gateway: &'a dyn LlmGateway,
}

impl QuestionSolver for Solver<'_> {
    fn solve(&self, question: &str) -> Result<SolveResult, SolveError> {
        let (kb, cfg, gw) = (self.kb, self.config, self.gateway);
        match self.method {
            Method::ZeroShotCot => solve_zero_shot_cot(question, cfg, gw),
            Method::NaiveRag => solve_naive_rag(kb, question, cfg, gw, false),
            Method::NaiveRagHierarchical => solve_naive_rag(kb, question, cfg, gw, true),
            Method::SelfAsk => solve_self_ask(kb, question, cfg, gw, RetrievalMode::None),
            Method::SelfAskFlat => solve_self_ask(kb, question, cfg, gw, RetrievalMode::Flat),
            Method::SelfAskHierarchical => {
                solve_self_ask(kb, question, cfg, gw, RetrievalMode::Hierarchical)
            }
            Method::Decompose => solve_decompose(kb, question, cfg, gw),
        }
    }
}
