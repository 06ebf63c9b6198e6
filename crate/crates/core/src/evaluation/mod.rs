//! Answer metrics, the LLM judge, and benchmark runs.

mod bench;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::prompts::names;
use crate::gateway::{registry, GatewayError, LlmGateway};
use crate::solver::{QuestionSolver, SolveResult};

pub use bench::{load_benchmark, parse_benchmark, BenchmarkFormat, LoadError, Paragraph, QaRecord};

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30ff | 0x3400..=0x4dbf | 0x4e00..=0x9fff | 0xac00..=0xd7af | 0xf900..=0xfaff)
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x2000..=0x206f | 0x3000..=0x303f | 0xff01..=0xff0f | 0xff1a..=0xff20
            | 0xff3b..=0xff40 | 0xff5b..=0xff65)
}

/// Lowercases, strips punctuation, drops the articles `a`, `an`, `the` and
/// collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    // Punctuation is deleted, not replaced by a space: "o'neil" -> "oneil".
    let stripped: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !is_punctuation(*c))
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tokens of the normalized text. CJK characters count as one token each.
pub fn answer_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in normalize_answer(text).split(' ').filter(|w| !w.is_empty()) {
        let mut run = String::new();
        for c in word.chars() {
            if is_cjk(c) {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

/// 1.0 if the normalized prediction equals any normalized gold.
pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn prf_single(pred: &[String], gold: &[String]) -> TokenScores {
    if pred.is_empty() || gold.is_empty() {
        let v = if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
        return TokenScores {
            f1: v,
            precision: v,
            recall: v,
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in pred {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return TokenScores::default();
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    TokenScores {
        f1: 2.0 * precision * recall / (precision + recall),
        precision,
        recall,
    }
}

/// Token-level F1, precision and recall; each is maximized over the golds
/// independently.
pub fn token_prf(pred: &str, golds: &[String]) -> TokenScores {
    let p = answer_tokens(pred);
    let mut best = TokenScores::default();
    for g in golds {
        let s = prf_single(&p, &answer_tokens(g));
        best.f1 = best.f1.max(s.f1);
        best.precision = best.precision.max(s.precision);
        best.recall = best.recall.max(s.recall);
    }
    best
}

/// Score used to rank a collected trajectory: 1 on exact match, else F1.
pub fn answer_score(pred: &str, golds: &[String]) -> f64 {
    if exact_match(pred, golds) == 1.0 {
        1.0
    } else {
        token_prf(pred, golds).f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub correct: bool,
    /// The reply could not be read as a verdict.
    pub unparseable: bool,
}

pub fn parse_verdict(response: &str) -> JudgeVerdict {
    let r = response.trim().to_lowercase();
    let word: String = r
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    match word.as_str() {
        "correct" => JudgeVerdict {
            correct: true,
            unparseable: false,
        },
        "incorrect" => JudgeVerdict {
            correct: false,
            unparseable: false,
        },
        _ => JudgeVerdict {
            correct: false,
            unparseable: true,
        },
    }
}

/// Asks the judge whether `pred` answers `question`, showing every gold.
pub fn judge_accuracy(
    question: &str,
    pred: &str,
    golds: &[String],
    gateway: &dyn LlmGateway,
) -> Result<JudgeVerdict, GatewayError> {
    let gold_list = golds
        .iter()
        .map(|g| format!("- {g}"))
        .collect::<Vec<_>>()
        .join("\n");
    let req = registry().request(
        names::JUDGE,
        &[("question", question), ("golds", &gold_list), ("prediction", pred)],
        0.0,
    )?;
    let verdict = parse_verdict(&gateway.complete(&req)?);
    if verdict.unparseable {
        tracing::warn!(question, "judge reply was not a verdict; scoring 0");
    }
    Ok(verdict)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub question: String,
    pub prediction: String,
    pub gold_answers: Vec<String>,
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub acc: f64,
    /// Why the row was scored 0 or could not be judged, if it was.
    pub flag: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Arithmetic means over a set of rows, scaled to 0..100.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub acc: f64,
}

impl MetricMeans {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> Self {
        let mut m = MetricMeans::default();
        for r in rows {
            m.count += 1;
            m.em += r.em;
            m.f1 += r.f1;
            m.precision += r.precision;
            m.recall += r.recall;
            m.acc += r.acc;
        }
        if m.count > 0 {
            let scale = 100.0 / m.count as f64;
            m.em *= scale;
            m.f1 *= scale;
            m.precision *= scale;
            m.recall *= scale;
            m.acc *= scale;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<EvalRow>,
    pub overall: MetricMeans,
    /// Keyed by the `type` metadata; rows without one fall under `unknown`.
    pub by_type: BTreeMap<String, MetricMeans>,
    /// Keyed by the `hops` metadata; rows without one fall under `unknown`.
    pub by_hops: BTreeMap<String, MetricMeans>,
    pub judged: bool,
}

fn group_by(rows: &[EvalRow], key: &str) -> BTreeMap<String, MetricMeans> {
    let mut groups: BTreeMap<String, Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        let k = r.metadata.get(key).cloned().unwrap_or_else(|| "unknown".into());
        groups.entry(k).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| (k, MetricMeans::of(rs)))
        .collect()
}

impl MetricReport {
    pub fn from_rows(method: impl Into<String>, rows: Vec<EvalRow>, judged: bool) -> Self {
        Self {
            method: method.into(),
            overall: MetricMeans::of(&rows),
            by_type: group_by(&rows, "type"),
            by_hops: group_by(&rows, "hops"),
            rows,
            judged,
        }
    }

    /// Plain-text table of the overall and grouped means.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let acc_label = if self.judged { "Acc" } else { "Acc(EM)" };
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "group", "n", "EM", "F1", "Prec", "Recall", acc_label
        );
        let mut line = |name: &str, m: &MetricMeans| {
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8.2}",
                name, m.count, m.em, m.f1, m.precision, m.recall, m.acc
            );
        };
        line(&format!("{} (all)", self.method), &self.overall);
        if self.by_type.len() > 1 || !self.by_type.contains_key("unknown") {
            for (k, m) in &self.by_type {
                line(&format!("type={k}"), m);
            }
        }
        if self.by_hops.len() > 1 || !self.by_hops.contains_key("unknown") {
            for (k, m) in &self.by_hops {
                line(&format!("hops={k}"), m);
            }
        }
        out
    }

    pub fn flagged(&self) -> usize {
        self.rows.iter().filter(|r| r.flag.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Use the LLM judge for accuracy; without it accuracy equals EM.
    pub judge: bool,
    pub parallel: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            judge: false,
            parallel: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

/// Scores one prediction. Judge failures leave accuracy at 0 and flag the row.
pub fn score_prediction(
    record: &QaRecord,
    prediction: &str,
    judge: Option<&dyn LlmGateway>,
) -> EvalRow {
    let golds = &record.gold_answers;
    let em = exact_match(prediction, golds);
    let prf = token_prf(prediction, golds);
    let mut flag = None;
    let acc = match judge {
        None => em,
        Some(gw) => match judge_accuracy(&record.question, prediction, golds, gw) {
            Ok(v) => {
                if v.unparseable {
                    flag = Some("unparseable judge verdict".to_string());
                }
                if v.correct { 1.0 } else { 0.0 }
            }
            Err(e) => {
                flag = Some(format!("judge failed: {e}"));
                0.0
            }
        },
    };
    EvalRow {
        id: record.id.clone(),
        question: record.question.clone(),
        prediction: prediction.to_string(),
        gold_answers: golds.clone(),
        em,
        f1: prf.f1,
        precision: prf.precision,
        recall: prf.recall,
        acc,
        flag,
        metadata: record.metadata.clone(),
    }
}

fn eval_one(
    record: &QaRecord,
    solver: &dyn QuestionSolver,
    judge: Option<&dyn LlmGateway>,
) -> (EvalRow, Option<SolveResult>) {
    match solver.solve(&record.question) {
        Ok(res) => (score_prediction(record, &res.answer, judge), Some(res)),
        Err(e) => {
            tracing::warn!(id = %record.id, "solve failed: {e}");
            let mut row = score_prediction(record, "", None);
            row.em = 0.0;
            row.f1 = 0.0;
            row.precision = 0.0;
            row.recall = 0.0;
            row.acc = 0.0;
            row.flag = Some(format!("solve failed: {e}"));
            (row, None)
        }
    }
}

/// Solves and scores every record. Failed records score 0 and are flagged.
/// Results keep record order whatever the parallelism.
pub fn run_eval(
    method: &str,
    records: &[QaRecord],
    solver: &dyn QuestionSolver,
    cfg: &EvalConfig,
    judge: Option<&dyn LlmGateway>,
) -> Result<(MetricReport, Vec<Option<SolveResult>>), EvalError> {
    let judge = if cfg.judge { judge } else { None };
    let results: Vec<(EvalRow, Option<SolveResult>)> = if cfg.parallel <= 1 {
        records.iter().map(|r| eval_one(r, solver, judge)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel)
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?;
        pool.install(|| {
            records
                .par_iter()
                .map(|r| eval_one(r, solver, judge))
                .collect()
        })
    };
    let (rows, solved): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((MetricReport::from_rows(method, rows, judge.is_some()), solved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Matcher, MockGateway, MockScript};
    use crate::model::SolveState;
    use crate::solver::{SolveError, SolveErrorKind};

    fn g(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Cat!"), "cat");
        assert_eq!(normalize_answer("  A  dog "), "dog");
        assert_eq!(normalize_answer("paris"), "paris");
        assert_eq!(normalize_answer("O'Neil, the"), "oneil");
        assert_eq!(normalize_answer("北京。"), "北京");
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("India", &g(&["India"])), 1.0);
        assert_eq!(exact_match("Republic of India", &g(&["India"])), 0.0);
        assert_eq!(exact_match("the india", &g(&["India", "Bharat"])), 1.0);
    }

    #[test]
    fn token_prf_examples() {
        let s = token_prf("cat sat", &g(&["cat sat"]));
        assert_eq!((s.f1, s.precision, s.recall), (1.0, 1.0, 1.0));
        assert_eq!(token_prf("", &g(&["x"])), TokenScores::default());
        let s = token_prf("the big cat", &g(&["big cat mat"]));
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn chinese_is_scored_per_character() {
        let s = token_prf("北京市", &g(&["北京"]));
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
    }

    #[test]
    fn verdict_parsing() {
        assert!(parse_verdict("correct").correct);
        assert!(parse_verdict(" Correct.").correct);
        let v = parse_verdict("Incorrect");
        assert!(!v.correct && !v.unparseable);
        let v = parse_verdict("maybe?");
        assert!(!v.correct && v.unparseable);
    }

    #[test]
    fn judge_sees_every_gold() {
        let gw = MockGateway::new(MockScript::strict().once(Matcher::Tag("judge".into()), "correct"));
        let v = judge_accuracy("q?", "Bharat", &g(&["India", "Bharat"]), &gw).unwrap();
        assert!(v.correct);
        let prompt = &gw.calls()[0].request.messages[0].content;
        assert!(prompt.contains("- India\n- Bharat"));
    }

    struct Scripted(HashMap<String, Result<String, ()>>);

    impl QuestionSolver for Scripted {
        fn solve(&self, q: &str) -> Result<SolveResult, SolveError> {
            match &self.0[q] {
                Ok(a) => Ok(SolveResult {
                    answer: a.clone(),
                    state: SolveState::new(q),
                    context_scores: vec![],
                    answer_context: vec![],
                    transcript: vec![],
                }),
                Err(()) => Err(SolveError {
                    kind: SolveErrorKind::InvalidConfig("scripted failure".into()),
                    transcript: vec![],
                }),
            }
        }
    }

    fn record(i: usize, ty: &str) -> QaRecord {
        QaRecord {
            id: format!("r{i}"),
            question: format!("q{i}"),
            gold_answers: vec![format!("a{i}")],
            context_paragraphs: vec![],
            metadata: [("type".to_string(), ty.to_string())].into(),
        }
    }

    #[test]
    fn seven_of_ten_correct() {
        let records: Vec<QaRecord> = (0..10)
            .map(|i| record(i, if i % 2 == 0 { "bridge" } else { "comparison" }))
            .collect();
        let solver = Scripted(
            (0..10)
                .map(|i| {
                    let a = if i < 7 { format!("a{i}") } else { "wrong".into() };
                    (format!("q{i}"), Ok(a))
                })
                .collect(),
        );
        let (report, _) = run_eval("t", &records, &solver, &EvalConfig::default(), None).unwrap();
        assert!((report.overall.acc - 70.0).abs() < 1e-9);
        let total: usize = report.by_type.values().map(|m| m.count).sum();
        assert_eq!(total, 10);
        assert!(report.table().contains("type=bridge"));
    }

    #[test]
    fn failed_solves_score_zero_and_are_flagged() {
        let records = vec![record(0, "x"), record(1, "x")];
        let solver = Scripted(
            [("q0".to_string(), Ok("a0".to_string())), ("q1".to_string(), Err(()))].into(),
        );
        let cfg = EvalConfig {
            parallel: 2,
            ..EvalConfig::default()
        };
        let (report, solved) = run_eval("t", &records, &solver, &cfg, None).unwrap();
        assert_eq!(report.rows[0].em, 1.0);
        assert_eq!(report.rows[1].acc, 0.0);
        assert!(report.rows[1].flag.is_some());
        assert_eq!(report.flagged(), 1);
        assert!(solved[1].is_none());
    }
}
