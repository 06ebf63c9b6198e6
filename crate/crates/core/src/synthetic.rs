//! Synthetic multi-hop chain benchmark.
//!
//! Every document states one fact `x is the r of y` (the relation `r` maps
//! `y` to `x`). A k-hop question walks a chain `e0 -> e1 -> ... -> ek` and
//! names its relations with query-side wording that never appears in the
//! corpus, so a question shares surface tokens only with the first hop's
//! chunk. Distractor facts attach to chain entities with other relations.
//!
//! [`SyntheticBench::mock_gateway`] pairs the corpus with an oracle-backed
//! mock model whose proposer behaviour is chosen by [`MockStyle`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{normalize_answer, QaRecord};
use crate::gateway::{
    last_field, HashEmbedder, LlmGateway, MockGateway, MockScript, MOCK_EMBEDDING_DIM,
};
use crate::ingest::{ingest_documents, CorpusDocument, IngestConfig, IngestError};
use crate::kb::LayeredKnowledgeBase;

/// Cosine between a near-miss proposal and its gold atomic question.
pub const NEAR_MISS_SIMILARITY: f64 = 0.4;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const EMBED_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    /// Wording used in corpus facts and atomic questions.
    pub corpus: String,
    /// Wording used in benchmark questions.
    pub query: String,
}

impl RelationSpec {
    pub fn new(corpus: &str, query: &str) -> Self {
        Self {
            corpus: corpus.to_string(),
            query: query.to_string(),
        }
    }
}

pub fn default_relations() -> Vec<RelationSpec> {
    [
        ("mentor", "teacher"),
        ("employer", "boss"),
        ("physician", "doctor"),
        ("landlord", "lessor"),
        ("guardian", "protector"),
        ("biographer", "chronicler"),
        ("tailor", "dressmaker"),
        ("banker", "financier"),
    ]
    .iter()
    .map(|(c, q)| RelationSpec::new(c, q))
    .collect()
}

pub fn default_patterns() -> Vec<String> {
    ["{x} is the {r} of {y}.", "{y}'s {r} is {x}.", "{x} serves as the {r} of {y}."]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSpec {
    pub seed: u64,
    pub n_entities: usize,
    /// One question per entry, with that many hops.
    pub hop_counts: Vec<usize>,
    /// Distractor facts per chain fact.
    pub distractor_ratio: f64,
    pub relations: Vec<RelationSpec>,
    /// Fact phrasings with `{x}`, `{r}` and `{y}` placeholders.
    pub patterns: Vec<String>,
}

impl Default for ChainSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_entities: 600,
            hop_counts: (1..=5).flat_map(|k| std::iter::repeat_n(k, 8)).collect(),
            distractor_ratio: 1.0,
            relations: default_relations(),
            patterns: default_patterns(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid chain spec: {0}")]
    InvalidSpec(String),
    #[error("spec needs {needed} entities but only {available} are available")]
    NotEnoughEntities { needed: usize, available: usize },
}

impl ChainSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.hop_counts.is_empty() {
            return bad("hop_counts is empty".into());
        }
        if self.hop_counts.iter().any(|&k| k == 0 || k > 8) {
            return bad("hop counts must lie in 1..=8".into());
        }
        if !(0.0..=10.0).contains(&self.distractor_ratio) {
            return bad(format!("distractor_ratio {} outside [0, 10]", self.distractor_ratio));
        }
        if self.n_entities > 100_000 {
            return bad("n_entities above 100000".into());
        }
        if self.relations.len() < 2 {
            return bad("at least two relations are required".into());
        }
        let word = Regex::new(r"^[a-z]+( [a-z]+)*$").expect("static regex");
        let mut seen = HashSet::new();
        for r in &self.relations {
            for w in [&r.corpus, &r.query] {
                if !word.is_match(w) || w.split(' ').any(|t| t == "of" || t == "the") {
                    return bad(format!("relation wording {w:?} must be lowercase words without 'of'/'the'"));
                }
                if !seen.insert(w.clone()) {
                    return bad(format!("relation wording {w:?} is used twice"));
                }
            }
        }
        if self.patterns.len() < 2 {
            return bad("at least two fact phrasings are required".into());
        }
        for p in &self.patterns {
            if ["{x}", "{r}", "{y}"].iter().any(|h| p.matches(h).count() != 1) {
                return bad(format!("pattern {p:?} must contain each of {{x}}, {{r}}, {{y}} once"));
            }
        }
        Ok(())
    }

    fn entities_needed(&self) -> usize {
        let chain_facts: usize = self.hop_counts.iter().sum();
        chain_facts + self.hop_counts.len() + self.distractor_count()
    }

    fn distractor_count(&self) -> usize {
        let chain_facts: usize = self.hop_counts.iter().sum();
        (self.distractor_ratio * chain_facts as f64).round() as usize
    }
}

/// `subject` is the `relation` of `object`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Fact {
    /// Atomic question answered by the subject.
    pub fn forward_question(&self) -> String {
        format!("Who is the {} of {}?", self.relation, self.object)
    }

    /// Atomic question answered by the object.
    pub fn reverse_question(&self) -> String {
        format!("Whose {} is {}?", self.relation, self.subject)
    }

    pub fn render(&self, pattern: &str) -> String {
        pattern
            .replace("{x}", &self.subject)
            .replace("{r}", &self.relation)
            .replace("{y}", &self.object)
    }
}

/// Recognizes facts written in any of the configured phrasings, optionally
/// preceded by a `[n]` passage marker.
#[derive(Debug, Clone)]
pub struct FactParser {
    patterns: Vec<Regex>,
    forward: Regex,
    reverse: Regex,
}

impl FactParser {
    pub fn new(relations: &[RelationSpec], patterns: &[String]) -> Self {
        let mut names: Vec<&str> = relations.iter().map(|r| r.corpus.as_str()).collect();
        names.sort_by_key(|n| std::cmp::Reverse(n.len()));
        let rel = names.iter().map(|n| regex::escape(n)).collect::<Vec<_>>().join("|");
        let entity = "[A-Z][a-z]+";
        let compiled = patterns
            .iter()
            .map(|p| {
                let body = regex::escape(p)
                    .replace(r"\{x\}", &format!("(?P<x>{entity})"))
                    .replace(r"\{r\}", &format!("(?P<r>{rel})"))
                    .replace(r"\{y\}", &format!("(?P<y>{entity})"));
                Regex::new(&format!(r"^(?:\[\d+\]\s*)?{body}\s*$")).expect("escaped pattern")
            })
            .collect();
        Self {
            patterns: compiled,
            forward: Regex::new(&format!(r"^Who is the (?P<r>{rel}) of (?P<y>{entity})\?$")).expect("regex"),
            reverse: Regex::new(&format!(r"^Whose (?P<r>{rel}) is (?P<x>{entity})\?$")).expect("regex"),
        }
    }

    pub fn parse_line(&self, line: &str) -> Option<Fact> {
        let line = line.trim();
        self.patterns.iter().find_map(|re| {
            re.captures(line).map(|c| Fact {
                subject: c["x"].to_string(),
                relation: c["r"].to_string(),
                object: c["y"].to_string(),
            })
        })
    }

    pub fn parse_text(&self, text: &str) -> Vec<Fact> {
        text.lines().filter_map(|l| self.parse_line(l)).collect()
    }

    /// Answers a forward or reverse atomic question from `facts`.
    pub fn answer_atomic(&self, question: &str, facts: &[Fact]) -> Option<String> {
        let q = question.trim();
        if let Some(c) = self.forward.captures(q) {
            return facts
                .iter()
                .find(|f| f.relation == c["r"] && f.object == c["y"])
                .map(|f| f.subject.clone());
        }
        let c = self.reverse.captures(q)?;
        facts
            .iter()
            .find(|f| f.relation == c["r"] && f.subject == c["x"])
            .map(|f| f.object.clone())
    }
}

/// `Who is the qk of the ... of the q1 of e0?`
pub fn render_question(start: &str, query_relations: &[&str]) -> String {
    let mut inner = start.to_string();
    for q in query_relations {
        inner = format!("the {q} of {inner}");
    }
    format!("Who is {inner}?")
}

/// Inverse of [`render_question`]: the start entity and the query relations
/// in hop order.
pub fn parse_question(question: &str) -> Option<(String, Vec<String>)> {
    let mut rest = question.trim().strip_prefix("Who is ")?.strip_suffix('?')?;
    let mut outer_first = Vec::new();
    while let Some(r) = rest.strip_prefix("the ") {
        let (rel, tail) = r.split_once(" of ")?;
        outer_first.push(rel.to_string());
        rest = tail;
    }
    if outer_first.is_empty() || rest.is_empty() || rest.contains(' ') {
        return None;
    }
    outer_first.reverse();
    Some((rest.to_string(), outer_first))
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("question does not have the chain form")]
    Unparseable,
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("chain breaks at hop {0}")]
    BrokenChain(usize),
}

/// All facts of a benchmark, indexed for traversal.
#[derive(Debug, Clone)]
pub struct FactGraph {
    facts: Vec<Fact>,
    relations: Vec<RelationSpec>,
    by_object: HashMap<(String, String), usize>,
    parser: FactParser,
}

impl FactGraph {
    fn new(facts: Vec<Fact>, relations: Vec<RelationSpec>, patterns: &[String]) -> Self {
        let by_object = facts
            .iter()
            .enumerate()
            .map(|(i, f)| ((f.relation.clone(), f.object.clone()), i))
            .collect();
        let parser = FactParser::new(&relations, patterns);
        Self {
            facts,
            relations,
            by_object,
            parser,
        }
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn parser(&self) -> &FactParser {
        &self.parser
    }

    pub fn corpus_relation(&self, query: &str) -> Option<&str> {
        self.relations
            .iter()
            .find(|r| r.query == query)
            .map(|r| r.corpus.as_str())
    }

    pub fn query_relation(&self, corpus: &str) -> Option<&str> {
        self.relations
            .iter()
            .find(|r| r.corpus == corpus)
            .map(|r| r.query.as_str())
    }

    /// Start entity and corpus-side relations of a chain question.
    pub fn parse_chain(&self, question: &str) -> Result<(String, Vec<String>), OracleError> {
        let (start, queries) = parse_question(question).ok_or(OracleError::Unparseable)?;
        let corpus = queries
            .iter()
            .map(|q| {
                self.corpus_relation(q)
                    .map(str::to_string)
                    .ok_or_else(|| OracleError::UnknownRelation(q.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((start, corpus))
    }

    /// Ground-truth answer by walking the full fact graph.
    pub fn oracle_answer(&self, question: &str) -> Result<String, OracleError> {
        let (start, rels) = self.parse_chain(question)?;
        traverse(&start, &rels, |r, o| {
            self.by_object
                .get(&(r.to_string(), o.to_string()))
                .map(|&i| self.facts[i].subject.clone())
        })
    }
}

fn traverse(
    start: &str,
    relations: &[String],
    lookup: impl Fn(&str, &str) -> Option<String>,
) -> Result<String, OracleError> {
    let mut cur = start.to_string();
    for (hop, r) in relations.iter().enumerate() {
        cur = lookup(r, &cur).ok_or(OracleError::BrokenChain(hop + 1))?;
    }
    Ok(cur)
}

fn answer_from_facts(graph: &FactGraph, question: &str, facts: &[Fact]) -> Option<String> {
    let (start, rels) = graph.parse_chain(question).ok()?;
    traverse(&start, &rels, |r, o| {
        facts
            .iter()
            .find(|f| f.relation == r && f.object == o)
            .map(|f| f.subject.clone())
    })
    .ok()
}

/// The gold path of one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldChain {
    pub record_id: String,
    pub question: String,
    /// `e0 ..= ek`.
    pub entities: Vec<String>,
    /// Facts of hops `1 ..= k`, as indices into [`FactGraph::facts`].
    pub facts: Vec<usize>,
}

impl GoldChain {
    pub fn hops(&self) -> usize {
        self.facts.len()
    }

    pub fn answer(&self) -> &str {
        self.entities.last().map(String::as_str).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockStyle {
    /// Proposes the exact atomic question of the next unresolved hop.
    Gold,
    /// Proposes a wrong atomic question before the gold one.
    Adversarial,
    /// Proposes exact atomics for hops whose chunk is visible in the prompt
    /// and a near-miss paraphrase for the first hop whose chunk is not.
    NearMiss,
}

impl MockStyle {
    pub const ALL: [MockStyle; 3] = [Self::Gold, Self::Adversarial, Self::NearMiss];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gold => "gold",
            Self::Adversarial => "adversarial",
            Self::NearMiss => "near-miss",
        }
    }
}

impl fmt::Display for MockStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MockStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mock style {s:?} (expected gold, adversarial or near-miss)"))
    }
}

/// A generated corpus with its questions and gold chains.
#[derive(Debug, Clone)]
pub struct SyntheticBench {
    pub spec: ChainSpec,
    pub documents: Vec<CorpusDocument>,
    pub records: Vec<QaRecord>,
    pub chains: Vec<GoldChain>,
    pub graph: FactGraph,
}

fn entity_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut name = String::new();
        for _ in 0..3 {
            name.push_str(ONSETS.choose(rng).expect("non-empty"));
            name.push_str(VOWELS.choose(rng).expect("non-empty"));
        }
        if rng.random_bool(0.5) {
            name.push_str(ONSETS.choose(rng).expect("non-empty"));
        }
        let mut chars = name.chars();
        let first = chars.next().expect("non-empty").to_ascii_uppercase();
        let name = std::iter::once(first).chain(chars).collect::<String>();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Facts with the keys that keep every atomic question single-answer.
#[derive(Default)]
struct FactSet {
    facts: Vec<Fact>,
    used_object: HashSet<(String, String)>,
    used_subject: HashSet<(String, String)>,
}

impl FactSet {
    fn add(&mut self, f: Fact) -> usize {
        self.used_object.insert((f.relation.clone(), f.object.clone()));
        self.used_subject.insert((f.relation.clone(), f.subject.clone()));
        self.facts.push(f);
        self.facts.len() - 1
    }
}

impl SyntheticBench {
    /// Deterministic in `spec`.
    pub fn generate(spec: &ChainSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let needed = spec.entities_needed();
        if needed > spec.n_entities {
            return Err(SynthError::NotEnoughEntities {
                needed,
                available: spec.n_entities,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut pool = entity_names(&mut rng, spec.n_entities).into_iter();
        let mut next_entity = || pool.next().expect("pool sized above");

        let mut set = FactSet::default();

        let mut chains = Vec::with_capacity(spec.hop_counts.len());
        for (qi, &k) in spec.hop_counts.iter().enumerate() {
            let entities: Vec<String> = (0..=k).map(|_| next_entity()).collect();
            let mut fact_ids = Vec::with_capacity(k);
            let mut queries = Vec::with_capacity(k);
            for hop in 1..=k {
                let rel = spec.relations.choose(&mut rng).expect("validated");
                queries.push(rel.query.as_str());
                let f = Fact {
                    subject: entities[hop].clone(),
                    relation: rel.corpus.clone(),
                    object: entities[hop - 1].clone(),
                };
                fact_ids.push(set.add(f));
            }
            chains.push(GoldChain {
                record_id: format!("syn-{}-{qi:03}", spec.seed),
                question: render_question(&entities[0], &queries),
                entities,
                facts: fact_ids,
            });
        }

        for _ in 0..spec.distractor_count() {
            let chain = chains.choose(&mut rng).expect("non-empty");
            // The answer entity stays out of distractors.
            let anchor = chain.entities[rng.random_range(0..chain.hops())].clone();
            let fresh = next_entity();
            let anchor_is_object = rng.random_bool(0.5);
            let mut rels: Vec<&RelationSpec> = spec.relations.iter().collect();
            rels.shuffle(&mut rng);
            let pick = |as_object: bool| {
                rels.iter().find(|r| {
                    let key = (r.corpus.clone(), anchor.clone());
                    if as_object {
                        !set.used_object.contains(&key)
                    } else {
                        !set.used_subject.contains(&key)
                    }
                })
            };
            let chosen = pick(anchor_is_object)
                .map(|r| (r.corpus.clone(), anchor_is_object))
                .or_else(|| pick(!anchor_is_object).map(|r| (r.corpus.clone(), !anchor_is_object)));
            let Some((relation, as_object)) = chosen else {
                continue;
            };
            let f = if as_object {
                Fact {
                    subject: fresh,
                    relation,
                    object: anchor,
                }
            } else {
                Fact {
                    subject: anchor,
                    relation,
                    object: fresh,
                }
            };
            set.add(f);
        }

        let facts = set.facts;
        let mut order: Vec<usize> = (0..facts.len()).collect();
        order.shuffle(&mut rng);
        let documents = order
            .iter()
            .enumerate()
            .map(|(di, &fi)| {
                let pattern = spec.patterns.choose(&mut rng).expect("validated");
                CorpusDocument {
                    source_uri: format!("synthetic://{}/fact/{di:05}", spec.seed),
                    title: String::new(),
                    text: facts[fi].render(pattern),
                    metadata: BTreeMap::new(),
                }
            })
            .collect();

        let records = chains
            .iter()
            .map(|c| QaRecord {
                id: c.record_id.clone(),
                question: c.question.clone(),
                gold_answers: vec![c.answer().to_string()],
                context_paragraphs: Vec::new(),
                metadata: BTreeMap::from([
                    ("hops".to_string(), c.hops().to_string()),
                    ("type".to_string(), "chain".to_string()),
                ]),
            })
            .collect();

        let graph = FactGraph::new(facts, spec.relations.clone(), &spec.patterns);
        Ok(Self {
            spec: spec.clone(),
            documents,
            records,
            chains,
            graph,
        })
    }

    /// Query-side paraphrase of a fact's forward atomic question.
    pub fn near_miss_question(&self, fact: &Fact) -> String {
        let q = self.graph.query_relation(&fact.relation).unwrap_or(&fact.relation);
        format!("Which person is the {q} of {}?", fact.object)
    }

    /// Hash embedder with pinned vectors: every atomic question gets an
    /// independent random direction, and every chain hop's near-miss
    /// paraphrase sits at cosine [`NEAR_MISS_SIMILARITY`] to its atomic.
    pub fn embedder(&self) -> HashEmbedder {
        let dim = MOCK_EMBEDDING_DIM;
        let mut emb = HashEmbedder::new(dim, self.spec.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ EMBED_SEED_MIX);
        let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut atomic_vecs: HashMap<String, Vec<f64>> = HashMap::new();
        for f in self.graph.facts() {
            for q in [f.forward_question(), f.reverse_question()] {
                let v = unit(gaussian(&mut rng));
                emb.set_override(q.clone(), &v).expect("dimension matches");
                atomic_vecs.insert(q, v);
            }
        }
        let s = NEAR_MISS_SIMILARITY;
        let c = (1.0 - s * s).sqrt();
        for chain in &self.chains {
            for &fi in &chain.facts {
                let fact = &self.graph.facts()[fi];
                let a = &atomic_vecs[&fact.forward_question()];
                let mut u = gaussian(&mut rng);
                let proj: f64 = u.iter().zip(a).map(|(x, y)| x * y).sum();
                u.iter_mut().zip(a).for_each(|(x, y)| *x -= proj * y);
                let u = unit(u);
                let p: Vec<f64> = a.iter().zip(&u).map(|(x, y)| s * x + c * y).collect();
                emb.set_override(self.near_miss_question(fact), &p)
                    .expect("dimension matches");
            }
        }
        emb
    }

    /// Ingestion settings for the synthetic corpus: atomics only.
    pub fn ingest_config() -> IngestConfig {
        IngestConfig {
            atomize: true,
            distill: false,
            tags: false,
            ..IngestConfig::default()
        }
    }

    /// Ingests the corpus into a fresh knowledge base.
    pub fn build_kb(&self, gateway: &dyn LlmGateway) -> Result<LayeredKnowledgeBase, IngestError> {
        let mut kb = LayeredKnowledgeBase::new(gateway.dimension());
        ingest_documents(&mut kb, &self.documents, &Self::ingest_config(), gateway)?;
        Ok(kb)
    }

    pub fn mock_script(&self, style: MockStyle) -> MockScript {
        let oracle = Arc::new(ChainOracle::new(self, style));
        let mut script = MockScript::strict();
        macro_rules! route {
            ($tag:literal, $method:ident) => {{
                let o = Arc::clone(&oracle);
                script = script.respond($tag, move |req| Some(o.$method(&req.text())));
            }};
        }
        route!("atomize", atomize);
        route!("summarize", summarize);
        route!("distill", empty);
        route!("tag_extract", empty);
        route!("propose", propose);
        route!("select", select);
        route!("answer", answer);
        route!("sub_answer", sub_answer);
        route!("self_ask", self_ask);
        route!("self_ask_answer", self_ask_answer);
        route!("self_ask_final", self_ask_final);
        route!("cot", cot);
        route!("judge", judge);
        script
    }

    pub fn mock_gateway(&self, style: MockStyle) -> MockGateway {
        MockGateway::with_embedder(self.mock_script(style), self.embedder())
    }
}

/// Mock model backed by the gold chains and the fact phrasings.
struct ChainOracle {
    style: MockStyle,
    graph: FactGraph,
    chains: HashMap<String, Vec<Fact>>,
    near_miss: HashMap<Fact, String>,
}

fn section<'a>(text: &'a str, start: &str, end: Option<&str>) -> &'a str {
    let Some(i) = text.find(start) else {
        return "";
    };
    let rest = &text[i + start.len()..];
    match end.and_then(|e| rest.find(e)) {
        Some(j) => &rest[..j],
        None => rest,
    }
}

impl ChainOracle {
    fn new(bench: &SyntheticBench, style: MockStyle) -> Self {
        let facts = bench.graph.facts();
        let chains = bench
            .chains
            .iter()
            .map(|c| (c.question.clone(), c.facts.iter().map(|&i| facts[i].clone()).collect()))
            .collect();
        let near_miss = bench
            .chains
            .iter()
            .flat_map(|c| c.facts.iter())
            .map(|&i| (facts[i].clone(), bench.near_miss_question(&facts[i])))
            .collect();
        Self {
            style,
            graph: bench.graph.clone(),
            chains,
            near_miss,
        }
    }

    fn question(text: &str) -> &str {
        last_field(text, "Question: ").unwrap_or_default()
    }

    fn atomize(&self, text: &str) -> String {
        self.graph
            .parser()
            .parse_text(text)
            .iter()
            .flat_map(|f| [f.forward_question(), f.reverse_question()])
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn summarize(&self, text: &str) -> String {
        self.graph
            .parser()
            .parse_text(text)
            .iter()
            .map(|f| f.render("{x} is the {r} of {y}."))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn empty(&self, _text: &str) -> String {
        String::new()
    }

    /// A different relation for the same object, as a wrong proposal.
    fn wrong_question(&self, fact: &Fact) -> String {
        let rels = &self.graph.relations;
        let i = rels.iter().position(|r| r.corpus == fact.relation).unwrap_or(0);
        let other = &rels[(i + 1) % rels.len()].corpus;
        format!("Who is the {other} of {}?", fact.object)
    }

    fn propose(&self, text: &str) -> String {
        let Some(chain) = self.chains.get(Self::question(text)) else {
            return String::new();
        };
        let visible: HashSet<Fact> = self
            .graph
            .parser()
            .parse_text(section(text, "Known context:", None))
            .into_iter()
            .collect();
        let mut out = Vec::new();
        for fact in chain {
            if visible.contains(fact) {
                if self.style == MockStyle::NearMiss {
                    out.push(fact.forward_question());
                }
                continue;
            }
            match self.style {
                MockStyle::Gold => out.push(fact.forward_question()),
                MockStyle::Adversarial => {
                    out.push(self.wrong_question(fact));
                    out.push(fact.forward_question());
                }
                MockStyle::NearMiss => out.push(self.near_miss[fact].clone()),
            }
            break;
        }
        out.join("\n")
    }

    /// Picks the earliest unresolved gold hop among the candidates.
    fn select(&self, text: &str) -> String {
        let Some(chain) = self.chains.get(Self::question(text)) else {
            return "None".to_string();
        };
        let context: HashSet<Fact> = self
            .graph
            .parser()
            .parse_text(section(text, "Known context:", Some("Candidate atomic questions:")))
            .into_iter()
            .collect();
        let listed: Vec<(usize, String)> = section(text, "Candidate atomic questions:", Some("\n\n"))
            .lines()
            .filter_map(|l| {
                let (i, q) = l.trim().strip_prefix('[')?.split_once("] ")?;
                Some((i.parse().ok()?, q.trim().to_string()))
            })
            .collect();
        chain
            .iter()
            .filter(|f| !context.contains(*f))
            .find_map(|f| {
                let gold = f.forward_question();
                listed.iter().find(|(_, q)| *q == gold).map(|(i, _)| i.to_string())
            })
            .unwrap_or_else(|| "None".to_string())
    }

    fn answer(&self, text: &str) -> String {
        let facts = self.graph.parser().parse_text(text);
        answer_from_facts(&self.graph, Self::question(text), &facts).unwrap_or_else(|| "unknown".into())
    }

    fn sub_answer(&self, text: &str) -> String {
        let facts = self.graph.parser().parse_text(text);
        self.graph
            .parser()
            .answer_atomic(Self::question(text), &facts)
            .unwrap_or_else(|| "unknown".into())
    }

    fn self_ask(&self, text: &str) -> String {
        let tail = text.rsplit_once("\nQuestion: ").map(|(_, t)| t).unwrap_or(text);
        let question = tail.lines().next().unwrap_or_default();
        let Some((start, queries)) = parse_question(question) else {
            return " No.\nSo the final answer is: unknown".into();
        };
        let answers: Vec<&str> = tail
            .lines()
            .filter_map(|l| l.strip_prefix("Intermediate answer: "))
            .map(str::trim)
            .collect();
        if answers.contains(&"unknown") {
            return "So the final answer is: unknown".into();
        }
        match queries.get(answers.len()) {
            Some(q) => {
                let cur = answers.last().copied().unwrap_or(&start);
                format!("Follow up: Who is the {q} of {cur}?")
            }
            None => format!("So the final answer is: {}", answers.last().copied().unwrap_or("unknown")),
        }
    }

    fn self_ask_answer(&self, text: &str) -> String {
        let follow_up = Self::question(text);
        let facts = self.graph.parser().parse_text(text);
        answer_from_facts(&self.graph, follow_up, &facts).unwrap_or_else(|| "unknown".into())
    }

    fn self_ask_final(&self, text: &str) -> String {
        last_field(text, "Intermediate answer: ")
            .unwrap_or("unknown")
            .to_string()
    }

    fn cot(&self, _text: &str) -> String {
        "The chain cannot be followed without the documents.\nAnswer: unknown".into()
    }

    fn judge(&self, text: &str) -> String {
        let pred = normalize_answer(last_field(text, "Answer to grade: ").unwrap_or_default());
        let hit = section(text, "Reference answers:", Some("Answer to grade:"))
            .lines()
            .filter_map(|l| l.trim().strip_prefix("- "))
            .any(|g| normalize_answer(g) == pred);
        if hit { "correct" } else { "incorrect" }.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ChainSpec {
        ChainSpec {
            seed: 3,
            n_entities: 200,
            hop_counts: vec![1, 2, 3, 4],
            ..ChainSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = SyntheticBench::generate(&small()).unwrap();
        let b = SyntheticBench::generate(&small()).unwrap();
        assert_eq!(a.documents, b.documents);
        assert_eq!(a.records, b.records);
        let mut other = small();
        other.seed = 4;
        let c = SyntheticBench::generate(&other).unwrap();
        assert_ne!(a.documents, c.documents);
    }

    #[test]
    fn oracle_matches_gold_chain() {
        let bench = SyntheticBench::generate(&small()).unwrap();
        for c in &bench.chains {
            assert_eq!(bench.graph.oracle_answer(&c.question).unwrap(), c.answer());
        }
    }

    #[test]
    fn every_document_parses_back_to_one_fact() {
        let bench = SyntheticBench::generate(&small()).unwrap();
        let parser = bench.graph.parser();
        let parsed: HashSet<Fact> = bench
            .documents
            .iter()
            .map(|d| {
                let f = parser.parse_text(&d.text);
                assert_eq!(f.len(), 1, "{}", d.text);
                f[0].clone()
            })
            .collect();
        let all: HashSet<Fact> = bench.graph.facts().iter().cloned().collect();
        assert_eq!(parsed, all);
    }

    #[test]
    fn atomic_questions_are_unique() {
        let bench = SyntheticBench::generate(&ChainSpec::default()).unwrap();
        let mut seen = HashSet::new();
        for f in bench.graph.facts() {
            assert!(seen.insert(f.forward_question()));
            assert!(seen.insert(f.reverse_question()));
        }
    }

    #[test]
    fn answer_entity_appears_in_one_document_for_single_hop() {
        let bench = SyntheticBench::generate(&ChainSpec::default()).unwrap();
        for c in bench.chains.iter().filter(|c| c.hops() == 1) {
            let n = bench
                .documents
                .iter()
                .filter(|d| d.text.split(|ch: char| !ch.is_alphabetic()).any(|w| w == c.answer()))
                .count();
            assert_eq!(n, 1, "{}", c.question);
        }
    }

    #[test]
    fn questions_round_trip() {
        let q = render_question("Zorvak", &["teacher", "boss"]);
        assert_eq!(q, "Who is the boss of the teacher of Zorvak?");
        let (s, rels) = parse_question(&q).unwrap();
        assert_eq!(s, "Zorvak");
        assert_eq!(rels, vec!["teacher", "boss"]);
        assert!(parse_question("Who is Zorvak?").is_none());
    }

    #[test]
    fn near_miss_vectors_sit_at_fixed_cosine() {
        use crate::gateway::Embedder;
        let bench = SyntheticBench::generate(&small()).unwrap();
        let emb = bench.embedder();
        for c in &bench.chains {
            for &fi in &c.facts {
                let f = &bench.graph.facts()[fi];
                let a = emb.embed(&[f.forward_question()]).unwrap().remove(0);
                let p = emb.embed(&[bench.near_miss_question(f)]).unwrap().remove(0);
                let cos: f64 = a.iter().zip(&p).map(|(x, y)| x * y).sum();
                assert!((cos - NEAR_MISS_SIMILARITY).abs() < 1e-9, "{cos}");
            }
        }
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let spec = ChainSpec {
            n_entities: 5,
            ..small()
        };
        assert!(matches!(
            SyntheticBench::generate(&spec),
            Err(SynthError::NotEnoughEntities { .. })
        ));
        let spec = ChainSpec {
            patterns: vec!["{x} is the {r} of {y}.".into()],
            ..small()
        };
        assert!(matches!(SyntheticBench::generate(&spec), Err(SynthError::InvalidSpec(_))));
    }
}
