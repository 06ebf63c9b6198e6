//! Trajectory collection with UCB context sampling, and export of the
//! collected trajectories as supervised fine-tuning pairs.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{answer_score, exact_match, judge_accuracy, QaRecord};
use crate::gateway::prompts::{names, prompt_x, prompt_y};
use crate::gateway::{GatewayError, LlmGateway, Recorder, TranscriptEntry};
use crate::kb::{dot, normalize, LayeredKnowledgeBase, VectorError};
use crate::model::{
    AtomicId, Chunk, ChunkId, SolveState, TerminationReason, Trajectory, TrajectoryStep,
};
use crate::retrieval::RetrievalError;
use crate::solver::{
    answer_with_context, candidates_from_vectors, extract_answer, propose_atomics, select_atomic,
    top_context, Candidate, SolverConfig,
};

/// Per-question exploration bookkeeping: accumulated near-miss scores and
/// visit counts per chunk, plus the round counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationState {
    pub scores: BTreeMap<ChunkId, f64>,
    pub visits: BTreeMap<ChunkId, u64>,
    pub alpha: f64,
    pub t: u64,
}

impl ExplorationState {
    pub fn new(alpha: f64) -> Self {
        Self {
            scores: BTreeMap::new(),
            visits: BTreeMap::new(),
            alpha,
            t: 1,
        }
    }

    /// Chunks enter lazily with score 0 and one visit.
    fn ensure(&mut self, c: ChunkId) {
        self.scores.entry(c).or_insert(0.0);
        self.visits.entry(c).or_insert(1);
    }

    pub fn add_score(&mut self, c: ChunkId, amount: f64) {
        self.ensure(c);
        *self.scores.get_mut(&c).expect("just ensured") += amount;
    }

    pub fn record_selection(&mut self, c: ChunkId) {
        self.ensure(c);
        self.scores.insert(c, 0.0);
        *self.visits.get_mut(&c).expect("just ensured") += 1;
    }

    pub fn ucb_value(&self, c: ChunkId) -> Option<f64> {
        let s = *self.scores.get(&c)?;
        let v = *self.visits.get(&c)? as f64;
        Some(s + self.alpha * ((self.t.max(1) as f64).ln() / v).sqrt())
    }
}

/// The chunk maximizing `S(c) + alpha * sqrt(ln t / V(c))`; ties go to the
/// smallest id. `None` when nothing has been scored yet.
pub fn ucb_sample(state: &ExplorationState) -> Option<ChunkId> {
    let mut best: Option<(ChunkId, f64)> = None;
    for &c in state.scores.keys() {
        let v = state.ucb_value(c)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    /// Decomposition rounds per question.
    pub max_rounds: usize,
    /// Atomics retrieved per proposal; must exceed the solver's K.
    pub k_prime: usize,
    /// Retrieval threshold; must lie below the solver's selection threshold.
    pub delta_prime: f64,
    pub alpha: f64,
    /// Trajectories scoring at least this are kept.
    pub keep_threshold: f64,
    /// Let the LLM judge mark a non-exact answer as correct.
    pub judge: bool,
    pub parallel: usize,
    pub solver: SolverConfig,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            max_rounds: 10,
            k_prime: 8,
            delta_prime: 0.3,
            alpha: 1.0,
            keep_threshold: 1.0,
            judge: false,
            parallel: 1,
            solver: SolverConfig::default(),
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<(), CollectErrorKind> {
        let bad = |m: String| Err(CollectErrorKind::InvalidConfig(m));
        self.solver
            .validate()
            .map_err(|e| CollectErrorKind::InvalidConfig(e.to_string()))?;
        let r = &self.solver.retrieval;
        if self.max_rounds == 0 {
            return bad("max_rounds must be positive".into());
        }
        if self.k_prime <= r.atomic_select_k {
            return bad(format!(
                "k_prime ({}) must exceed atomic_select_k ({})",
                self.k_prime, r.atomic_select_k
            ));
        }
        if !(0.0..r.atomic_threshold).contains(&self.delta_prime) {
            return bad(format!(
                "delta_prime ({}) must lie in [0, atomic_threshold = {})",
                self.delta_prime, r.atomic_threshold
            ));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return bad("alpha must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CollectErrorKind {
    #[error("invalid collection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl From<VectorError> for CollectErrorKind {
    fn from(e: VectorError) -> Self {
        CollectErrorKind::Retrieval(e.into())
    }
}

/// A failed collection. The exploration state as of the failure is kept so
/// the question can be retried from it.
#[derive(Debug, Error)]
#[error("{kind}")]
pub struct CollectError {
    #[source]
    pub kind: CollectErrorKind,
    pub state: ExplorationState,
    pub transcript: Vec<TranscriptEntry>,
}

/// What happened in one round, for the audit archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub t: u64,
    pub sampled: Option<ChunkId>,
    pub proposals: Vec<String>,
    /// Candidates at or above the selection threshold, shown to the selector.
    pub shown: Vec<Candidate>,
    /// Candidates between the two thresholds, with the similarity credited
    /// to their chunk.
    pub near_misses: Vec<(ChunkId, f64)>,
    pub selected: Option<AtomicId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedTrajectory {
    pub trajectory: Trajectory,
    pub state: SolveState,
    pub rounds: Vec<RoundLog>,
    pub transcript: Vec<TranscriptEntry>,
}

fn max_similarity(unit_proposals: &[Vec<f64>], atomic: &[f64]) -> f64 {
    unit_proposals
        .iter()
        .map(|p| dot(p, atomic).clamp(-1.0, 1.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Splits retrieved candidates into those shown to the selector (best
/// similarity to any proposal `>= delta`) and near-misses.
pub fn partition_candidates(
    kb: &LayeredKnowledgeBase,
    unit_proposals: &[Vec<f64>],
    retrieved: Vec<Candidate>,
    delta: f64,
) -> (Vec<Candidate>, Vec<(ChunkId, f64)>) {
    let mut shown = Vec::new();
    let mut near = Vec::new();
    for mut c in retrieved {
        let Some(a) = kb.atomic(c.atomic_id) else {
            continue;
        };
        let best = max_similarity(unit_proposals, &a.embedding);
        c.score = c.score.max(best);
        if c.score >= delta {
            shown.push(c);
        } else {
            near.push((c.chunk_id, c.score));
        }
    }
    shown.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.atomic_id.cmp(&b.atomic_id))
    });
    (shown, near)
}

fn score_answer(
    question: &str,
    answer: &str,
    golds: &[String],
    judge: bool,
    gateway: &dyn LlmGateway,
) -> Result<f64, GatewayError> {
    if exact_match(answer, golds) == 1.0 {
        return Ok(1.0);
    }
    if judge && judge_accuracy(question, answer, golds, gateway)?.correct {
        return Ok(1.0);
    }
    Ok(answer_score(answer, golds))
}

/// Runs one exploratory decomposition of `question`, continuing from `state`.
///
/// Each round samples one chunk by UCB into the proposal context, retrieves
/// `k_prime` atomics per proposal at `delta_prime`, credits near-misses to
/// their chunks, and lets the selector pick among the rest. A round where
/// nothing clears the selection threshold makes no selection call and the
/// run continues, so credited chunks can be sampled later. The selected
/// atomic is answered from its chunk to form the trajectory step.
#[allow(clippy::result_large_err)]
pub fn collect_trajectory_from(
    kb: &LayeredKnowledgeBase,
    question: &str,
    golds: &[String],
    cfg: &CollectionConfig,
    gateway: &dyn LlmGateway,
    mut state: ExplorationState,
) -> Result<(CollectedTrajectory, ExplorationState), CollectError> {
    let rec = Recorder::new(gateway);
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => {
                    return Err(CollectError {
                        kind: err.into(),
                        state,
                        transcript: rec.into_entries(),
                    })
                }
            }
        };
    }
    attempt!(cfg.validate());
    let temp = cfg.solver.qa_temperature;
    let delta = cfg.solver.retrieval.atomic_threshold;
    let mut solve = SolveState::new(question);
    let mut scores = Vec::new();
    let mut steps = Vec::new();
    let mut rounds = Vec::new();
    let start_t = state.t;

    for round in 0..cfg.max_rounds as u64 {
        state.t = start_t + round;
        solve.iteration = (round + 1) as u32;
        let sampled = ucb_sample(&state);
        let mut visible: Vec<ChunkId> = solve.context.clone();
        if let Some(c) = sampled.filter(|c| !visible.contains(c)) {
            visible.push(c);
        }
        let visible_chunks: Vec<&Chunk> = visible.iter().filter_map(|id| kb.chunk(*id)).collect();
        let proposals = attempt!(propose_atomics(question, &visible_chunks, temp, &rec));
        let mut log = RoundLog {
            t: state.t,
            sampled,
            proposals: proposals.clone(),
            shown: Vec::new(),
            near_misses: Vec::new(),
            selected: None,
        };
        if proposals.is_empty() {
            rounds.push(log);
            solve.terminate(TerminationReason::ProposalsEmpty);
            break;
        }
        let vectors = attempt!(gateway.embed(&proposals));
        let unit: Vec<Vec<f64>> = attempt!(vectors.iter().map(|v| normalize(v)).collect::<Result<_, _>>());
        let exclude: HashSet<ChunkId> = solve.context.iter().copied().collect();
        let retrieved = attempt!(candidates_from_vectors(
            kb,
            &unit,
            &exclude,
            cfg.k_prime,
            cfg.delta_prime,
            usize::MAX,
        ));
        let (shown, near) = partition_candidates(kb, &unit, retrieved, delta);
        for &(c, s) in &near {
            state.add_score(c, s);
        }
        log.shown = shown.clone();
        log.near_misses = near;
        if shown.is_empty() {
            rounds.push(log);
            continue;
        }
        let ctx: Vec<&Chunk> = solve.context.iter().filter_map(|id| kb.chunk(*id)).collect();
        let Some(i) = attempt!(select_atomic(question, &ctx, &shown, temp, &rec)) else {
            rounds.push(log);
            solve.terminate(TerminationReason::SelectionNone);
            break;
        };
        let chosen = &shown[i];
        log.selected = Some(chosen.atomic_id);
        rounds.push(log);
        state.record_selection(chosen.chunk_id);
        solve.context.push(chosen.chunk_id);
        solve.chosen_atomics.push(chosen.atomic_id);
        scores.push(chosen.score);
        let passage = kb.chunk(chosen.chunk_id).map(|c| c.text.as_str()).unwrap_or("");
        let sub = attempt!(rec.ask(
            names::SUB_ANSWER,
            &[("passage", passage), ("question", &chosen.question)],
            temp,
        ));
        steps.push(TrajectoryStep::new(chosen.question.clone(), extract_answer(&sub)));
    }
    // The next question continues the clock where this one stopped.
    state.t += 1;
    if !solve.terminated {
        solve.terminate(TerminationReason::BudgetExhausted);
    }

    let keep = top_context(&scores, cfg.solver.final_context_limit);
    let texts: Vec<&str> = keep
        .iter()
        .filter_map(|&i| kb.chunk(solve.context[i]))
        .map(|c| c.text.as_str())
        .collect();
    let answer = attempt!(answer_with_context(question, &texts, temp, &rec));
    let score = attempt!(score_answer(question, &answer, golds, cfg.judge, gateway));
    let trajectory = Trajectory {
        question: question.to_string(),
        steps,
        final_answer: answer,
        score,
    };
    Ok((
        CollectedTrajectory {
            trajectory,
            state: solve,
            rounds,
            transcript: rec.into_entries(),
        },
        state,
    ))
}

/// [`collect_trajectory_from`] with a fresh exploration state.
#[allow(clippy::result_large_err)]
pub fn collect_trajectory(
    kb: &LayeredKnowledgeBase,
    question: &str,
    golds: &[String],
    cfg: &CollectionConfig,
    gateway: &dyn LlmGateway,
) -> Result<(CollectedTrajectory, ExplorationState), CollectError> {
    collect_trajectory_from(kb, question, golds, cfg, gateway, ExplorationState::new(cfg.alpha))
}

/// One archived trajectory with its audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    pub gold_answers: Vec<String>,
    pub kept: bool,
    pub trajectory: Trajectory,
    pub termination_reason: Option<TerminationReason>,
    pub context: Vec<ChunkId>,
    pub rounds: Vec<RoundLog>,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CollectionStats {
    pub questions: usize,
    pub kept: usize,
    pub failed: usize,
    /// `kept / questions`, 0 for an empty batch.
    pub kept_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionOutcome {
    /// Every successfully collected trajectory, kept or not, in input order.
    pub records: Vec<TrajectoryRecord>,
    /// `(record id, error)` for questions that failed outright.
    pub failures: Vec<(String, String)>,
    pub stats: CollectionStats,
}

impl CollectionOutcome {
    pub fn kept(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.records.iter().filter(|r| r.kept)
    }
}

fn collect_one(
    kb: &LayeredKnowledgeBase,
    record: &QaRecord,
    cfg: &CollectionConfig,
    gateway: &dyn LlmGateway,
) -> Result<TrajectoryRecord, String> {
    match collect_trajectory(kb, &record.question, &record.gold_answers, cfg, gateway) {
        Ok((c, _)) => Ok(TrajectoryRecord {
            id: record.id.clone(),
            gold_answers: record.gold_answers.clone(),
            kept: c.trajectory.score >= cfg.keep_threshold,
            termination_reason: c.state.termination_reason,
            context: c.state.context,
            trajectory: c.trajectory,
            rounds: c.rounds,
            transcript: c.transcript,
        }),
        Err(e) => {
            tracing::warn!(id = %record.id, "collection failed: {e}");
            Err(e.to_string())
        }
    }
}

/// Collects a trajectory for every record with independent exploration
/// states. Failures are recorded and do not stop the batch.
pub fn collect_dataset(
    kb: &LayeredKnowledgeBase,
    records: &[QaRecord],
    cfg: &CollectionConfig,
    gateway: &dyn LlmGateway,
) -> Result<CollectionOutcome, CollectErrorKind> {
    cfg.validate()?;
    let results: Vec<Result<TrajectoryRecord, String>> = if cfg.parallel <= 1 {
        records.iter().map(|r| collect_one(kb, r, cfg, gateway)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel)
            .build()
            .map_err(|e| CollectErrorKind::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| {
            records
                .par_iter()
                .map(|r| collect_one(kb, r, cfg, gateway))
                .collect()
        })
    };
    let mut out = CollectionOutcome {
        records: Vec::new(),
        failures: Vec::new(),
        stats: CollectionStats {
            questions: records.len(),
            ..CollectionStats::default()
        },
    };
    for (record, r) in records.iter().zip(results) {
        match r {
            Ok(t) => out.records.push(t),
            Err(e) => out.failures.push((record.id.clone(), e)),
        }
    }
    out.stats.kept = out.records.iter().filter(|r| r.kept).count();
    out.stats.failed = out.failures.len();
    if out.stats.questions > 0 {
        out.stats.kept_fraction = out.stats.kept as f64 / out.stats.questions as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub prompt: String,
    pub response: String,
    pub trajectory_id: String,
    /// 1-based position within the trajectory.
    pub step: usize,
}

/// `t + 1` training pairs for a trajectory with `t` steps: one per step
/// asking for that step's sub-question given the earlier steps, and a final
/// one answering that no further decomposition is needed.
pub fn export_sft(trajectory_id: &str, traj: &Trajectory) -> Vec<SftPair> {
    let steps: Vec<(String, String)> = traj
        .steps
        .iter()
        .map(|s| (s.sub_question.clone(), s.sub_answer.clone()))
        .collect();
    let mut out = Vec::with_capacity(steps.len() + 1);
    for i in 0..=steps.len() {
        let prompt = prompt_x(&traj.question, &steps[..i]);
        let response = match steps.get(i) {
            Some((q, _)) => prompt_y(true, Some(q)),
            None => prompt_y(false, None),
        };
        out.push(SftPair {
            prompt,
            response,
            trajectory_id: trajectory_id.to_string(),
            step: i + 1,
        });
    }
    out
}

#[derive(Serialize)]
struct SftLine<'a> {
    prompt: &'a str,
    response: &'a str,
}

/// Writes one `{"prompt": .., "response": ..}` object per line.
pub fn write_sft_jsonl(pairs: &[SftPair], mut w: impl Write) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(
            &mut w,
            &SftLine {
                prompt: &p.prompt,
                response: &p.response,
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trajectories_jsonl(
    records: &[TrajectoryRecord],
    mut w: impl Write,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum ArchiveReadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub fn read_trajectories_jsonl(r: impl BufRead) -> Result<Vec<TrajectoryRecord>, ArchiveReadError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ArchiveReadError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(entries: &[(u64, f64, u64)], alpha: f64, t: u64) -> ExplorationState {
        let mut s = ExplorationState::new(alpha);
        s.t = t;
        for &(c, score, visits) in entries {
            s.scores.insert(ChunkId(c), score);
            s.visits.insert(ChunkId(c), visits);
        }
        s
    }

    #[test]
    fn ucb_examples() {
        assert_eq!(ucb_sample(&ExplorationState::new(1.0)), None);
        assert_eq!(ucb_sample(&state(&[(1, 0.9, 1), (2, 0.1, 1)], 0.0, 3)), Some(ChunkId(1)));
        assert_eq!(ucb_sample(&state(&[(1, 0.5, 4), (2, 0.5, 1)], 1.0, 5)), Some(ChunkId(2)));
        // At t = 1 the bonus vanishes and equal scores fall back to id order.
        assert_eq!(ucb_sample(&state(&[(7, 0.0, 1), (3, 0.0, 5)], 1.0, 1)), Some(ChunkId(3)));
    }

    #[test]
    fn selection_bookkeeping() {
        let mut s = ExplorationState::new(1.0);
        s.add_score(ChunkId(4), 0.4);
        s.add_score(ChunkId(4), 0.35);
        assert!((s.scores[&ChunkId(4)] - 0.75).abs() < 1e-12);
        s.record_selection(ChunkId(4));
        assert_eq!(s.scores[&ChunkId(4)], 0.0);
        assert_eq!(s.visits[&ChunkId(4)], 2);
        s.record_selection(ChunkId(9));
        assert_eq!(s.visits[&ChunkId(9)], 2);
    }

    #[test]
    fn sft_pair_counts_and_shapes() {
        let t0 = Trajectory {
            question: "q?".into(),
            steps: vec![],
            final_answer: "a".into(),
            score: 1.0,
        };
        let pairs = export_sft("t0", &t0);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].response, "<decompose>False</decompose>");
        let t2 = Trajectory {
            steps: vec![TrajectoryStep::new("s1?", "a1"), TrajectoryStep::new("s2?", "a2")],
            ..t0
        };
        let pairs = export_sft("t2", &t2);
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].response, "<decompose>True</decompose>\n<sub-question>s1?</sub-question>");
        assert!(pairs[1].prompt.contains("Q1: s1?\nA1: a1"));
        assert!(!pairs[1].prompt.contains("Q2"));
        assert!(pairs[2].prompt.contains("Q2: s2?\nA2: a2"));
    }

    #[test]
    fn sft_jsonl_has_two_fields() {
        let pairs = export_sft(
            "x",
            &Trajectory {
                question: "q".into(),
                steps: vec![],
                final_answer: String::new(),
                score: 0.0,
            },
        );
        let mut buf = Vec::new();
        write_sft_jsonl(&pairs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"prompt\":"));
        let v: serde_json::Value = serde_json::from_str(text.trim_end()).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 2);
    }

    #[test]
    fn config_requires_wider_exploration() {
        assert!(CollectionConfig::default().validate().is_ok());
        let narrow = CollectionConfig {
            k_prime: 4,
            ..CollectionConfig::default()
        };
        assert!(narrow.validate().is_err());
        let high = CollectionConfig {
            delta_prime: 0.5,
            ..CollectionConfig::default()
        };
        assert!(high.validate().is_err());
    }
}
