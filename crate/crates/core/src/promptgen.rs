//! Listwise ranking prompts and instruction records.
//!
//! Three prompt variants are supported: the plain listwise prompt, and two
//! knowledge-enhanced prompts that add the base recommender's ranking
//! ("Hint 1") and retrieved graph facts ("Hint 2") written either as
//! `item - relation - entity` triples or as sentences.
//!
//! Title lists inside a prompt are joined with [`LIST_SEPARATOR`]; the mock
//! completer and the response parser rely on that.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::baserec::{build_candidate_list_train, rank_candidates, CfModel};
use crate::corpus::{Catalog, DatasetSplit, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::retriever::{top_q, ScoredTriple, TripleIndex};
use crate::sampling::{sample_users, SamplingConfig};

pub const LIST_SEPARATOR: &str = " | ";
pub const KG_SEPARATOR: &str = "; ";
pub const EMPTY_LIST: &str = "None";

pub const TASK_LINE: &str = "You are a movie recommender system. Your task is to rank a given list of candidate movies based on user preferences and return the top five recommendations.";
pub const LIKED_PREFIX: &str = "User's Liked movies: ";
pub const DISLIKED_PREFIX: &str = "User's Disliked movies: ";
pub const QUESTION_PREFIX: &str = "Question: How would the user rank the candidate item list: ";
pub const HINT1_PREFIX: &str = "Hint 1: Another recommender model suggests ";
pub const HINT2_PREFIX: &str = "Hint 2: These are corresponding entities and relationships for above model’s recommendation for more context information: ";
pub const ORIGINAL_HISTORY_PREFIX: &str = "The historical interactions of a user include: ";
pub const ORIGINAL_QUESTION_PREFIX: &str = "How would the user rank the ";

/// Ratings at or above this count as liked.
pub const LIKE_THRESHOLD: u8 = 4;
/// Most recent liked (and, separately, disliked) items kept in a prompt.
pub const HISTORY_CAP: usize = 20;
/// Ground-truth titles in an instruction target.
pub const TARGET_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Original,
    TripleFormat,
    SentenceFormat,
}

impl PromptVariant {
    pub fn short_name(self) -> &'static str {
        match self {
            PromptVariant::Original => "original",
            PromptVariant::TripleFormat => "t",
            PromptVariant::SentenceFormat => "s",
        }
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" | "o" => Ok(PromptVariant::Original),
            "t" | "triple" | "triple_format" => Ok(PromptVariant::TripleFormat),
            "s" | "sentence" | "sentence_format" => Ok(PromptVariant::SentenceFormat),
            other => Err(Error::Config(format!("unknown prompt variant `{other}`"))),
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptVariant::Original => "original",
            PromptVariant::TripleFormat => "triple_format",
            PromptVariant::SentenceFormat => "sentence_format",
        })
    }
}

/// Liked items (rating ≥ `threshold`) and disliked items from the user's
/// training history, most recent first, each truncated to `cap`.
pub fn split_likes_dislikes(user: usize, split: &DatasetSplit, threshold: u8, cap: usize) -> (Vec<usize>, Vec<usize>) {
    let mut history = split.train_for(user).to_vec();
    history.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(b.item.cmp(&a.item)));
    let (liked, disliked): (Vec<_>, Vec<_>) = history.into_iter().partition(|x| x.rating >= threshold);
    (
        liked.into_iter().take(cap).map(|x| x.item).collect(),
        disliked.into_iter().take(cap).map(|x| x.item).collect(),
    )
}

fn relation_text<'a>(t: &ScoredTriple, kg: &'a KnowledgeGraph) -> Result<&'a str> {
    let text = kg.relation_texts.get(t.relation).ok_or(Error::OutOfRange {
        kind: "relation",
        id: t.relation,
        size: kg.relation_count(),
    })?;
    if text.is_empty() {
        return Err(Error::Render(format!("relation {} has empty text", t.relation)));
    }
    Ok(text)
}

fn entity_text<'a>(t: &ScoredTriple, kg: &'a KnowledgeGraph) -> Result<&'a str> {
    let text = kg.entity_texts.get(t.tail_entity).ok_or(Error::OutOfRange {
        kind: "entity",
        id: t.tail_entity,
        size: kg.entity_count(),
    })?;
    if text.is_empty() {
        return Err(Error::Render(format!("entity {} has empty text", t.tail_entity)));
    }
    Ok(text)
}

/// `<item title> - <relation> - <entity>`.
pub fn triple_to_text(t: &ScoredTriple, catalog: &Catalog, kg: &KnowledgeGraph) -> Result<String> {
    let item = catalog.title(t.head_item)?;
    Ok(format!("{item} - {} - {}", relation_text(t, kg)?, entity_text(t, kg)?))
}

/// Per-relation sentence templates with `{item}` and `{entity}`
/// placeholders.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SentenceTemplates {
    templates: HashMap<String, String>,
}

const BUILTIN_TEMPLATES: &str = include_str!("../data/sentence_templates.tsv");

impl SentenceTemplates {
    pub fn builtin() -> Self {
        Self::from_tsv(BUILTIN_TEMPLATES).expect("shipped template table parses")
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut templates = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (rel, template) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: "<templates>".into(),
                line: idx + 1,
                message: "expected `relation\\ttemplate`".into(),
            })?;
            templates.insert(rel.trim().to_string(), template.trim().to_string());
        }
        Ok(Self { templates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    pub fn get(&self, relation: &str) -> Option<&str> {
        self.templates.get(relation).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Natural-language rendering of a triple. Relations without a template
/// become `<entity> is the <relation> of <item>`.
pub fn triple_to_sentence(
    t: &ScoredTriple,
    catalog: &Catalog,
    kg: &KnowledgeGraph,
    templates: &SentenceTemplates,
) -> Result<String> {
    let item = catalog.title(t.head_item)?;
    let relation = relation_text(t, kg)?;
    let entity = entity_text(t, kg)?;
    Ok(match templates.get(relation) {
        Some(template) => template.replace("{item}", item).replace("{entity}", entity),
        None => format!("{entity} is the {relation} of {item}"),
    })
}

/// Everything a prompt is assembled from, already resolved to text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub liked_titles: Vec<String>,
    pub disliked_titles: Vec<String>,
    /// Whole history, most recent first; used by the original variant.
    pub history_titles: Vec<String>,
    pub candidate_titles: Vec<String>,
    pub hint_ranking_titles: Vec<String>,
    pub kg_lines: Vec<String>,
}

fn join_titles(titles: &[String]) -> Result<String> {
    for t in titles {
        if t.contains(LIST_SEPARATOR.trim()) || t.contains('\n') {
            return Err(Error::Render(format!("title `{t}` contains a list separator or newline")));
        }
    }
    Ok(if titles.is_empty() {
        EMPTY_LIST.to_string()
    } else {
        titles.join(LIST_SEPARATOR)
    })
}

fn is_permutation(a: &[String], b: &[String]) -> bool {
    let mut a: Vec<&String> = a.iter().collect();
    let mut b: Vec<&String> = b.iter().collect();
    a.sort();
    b.sort();
    a == b
}

/// Assembles the prompt text. Lines are separated by `\n` with no trailing
/// newline. The Hint 2 line is left out when there are no graph lines.
pub fn render_prompt(parts: &PromptParts, variant: PromptVariant) -> Result<String> {
    if parts.candidate_titles.is_empty() {
        return Err(Error::Render("candidate list is empty".into()));
    }
    let distinct: HashSet<&String> = parts.candidate_titles.iter().collect();
    if distinct.len() != parts.candidate_titles.len() {
        return Err(Error::Render("candidate titles are not unique".into()));
    }
    let candidates = join_titles(&parts.candidate_titles)?;

    if variant == PromptVariant::Original {
        return Ok(format!(
            "{ORIGINAL_HISTORY_PREFIX}{}.\n{ORIGINAL_QUESTION_PREFIX}{candidates}?",
            join_titles(&parts.history_titles)?
        ));
    }

    if !is_permutation(&parts.hint_ranking_titles, &parts.candidate_titles) {
        return Err(Error::Render("hint ranking is not a permutation of the candidates".into()));
    }
    let mut lines = vec![
        TASK_LINE.to_string(),
        format!("{LIKED_PREFIX}{}.", join_titles(&parts.liked_titles)?),
        format!("{DISLIKED_PREFIX}{}.", join_titles(&parts.disliked_titles)?),
        format!("{QUESTION_PREFIX}{candidates}?"),
        format!("{HINT1_PREFIX}{}.", join_titles(&parts.hint_ranking_titles)?),
    ];
    if !parts.kg_lines.is_empty() {
        if parts.kg_lines.iter().any(|l| l.contains('\n')) {
            return Err(Error::Render("graph line contains a newline".into()));
        }
        lines.push(format!("{HINT2_PREFIX}{}.", parts.kg_lines.join(KG_SEPARATOR)));
    }
    Ok(lines.join("\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub user_id: usize,
    pub variant: PromptVariant,
    pub q: usize,
    pub parts: PromptParts,
    pub candidate_items: Vec<usize>,
    pub hint_ranking_items: Vec<usize>,
    pub rendered: String,
    /// Expected completion; training instances only.
    pub target: Option<String>,
}

/// Read-only artifacts the prompt builder and evaluator draw on.
#[derive(Debug, Clone, Copy)]
pub struct Artifacts<'a> {
    pub catalog: &'a Catalog,
    pub kg: &'a KnowledgeGraph,
    pub split: &'a DatasetSplit,
    pub cf: &'a CfModel,
    pub index: &'a TripleIndex,
    pub templates: &'a SentenceTemplates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub variant: PromptVariant,
    pub q: usize,
    /// Also retrieve graph facts for the candidate items, not only for the
    /// user's history.
    pub include_candidate_triples: bool,
    pub like_threshold: u8,
    pub history_cap: usize,
}

impl PromptOptions {
    pub fn new(variant: PromptVariant, q: usize) -> Self {
        Self {
            variant,
            q,
            include_candidate_triples: true,
            like_threshold: LIKE_THRESHOLD,
            history_cap: HISTORY_CAP,
        }
    }
}

impl Artifacts<'_> {
    fn titles(&self, items: &[usize]) -> Result<Vec<String>> {
        items
            .iter()
            .map(|&i| self.catalog.title(i).map(str::to_string))
            .collect()
    }

    fn kg_lines(&self, items: &[usize], options: &PromptOptions) -> Result<Vec<String>> {
        if options.q == 0 || options.variant == PromptVariant::Original {
            return Ok(Vec::new());
        }
        let mut seen = HashSet::new();
        let mut lines = Vec::new();
        for &item in items {
            if !seen.insert(item) || item >= self.index.item_count() {
                continue;
            }
            for t in top_q(item, options.q, self.index)? {
                lines.push(match options.variant {
                    PromptVariant::SentenceFormat => triple_to_sentence(t, self.catalog, self.kg, self.templates)?,
                    _ => triple_to_text(t, self.catalog, self.kg)?,
                });
            }
        }
        Ok(lines)
    }

    /// Builds and renders the prompt for `user` over `candidates`, shown in
    /// the given order. Hint 1 is the base recommender's ordering of the
    /// same candidates.
    pub fn build_instance(&self, user: usize, candidates: &[usize], options: &PromptOptions) -> Result<PromptInstance> {
        let (liked, disliked) = split_likes_dislikes(user, self.split, options.like_threshold, options.history_cap);
        let mut history: Vec<_> = self.split.train_for(user).to_vec();
        history.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(b.item.cmp(&a.item)));
        let history: Vec<usize> = history
            .iter()
            .take(options.history_cap)
            .map(|x| x.item)
            .collect();
        let hint = rank_candidates(self.cf, user, candidates)?;

        let mut kg_items: Vec<usize> = liked.iter().chain(&disliked).copied().collect();
        if options.include_candidate_triples {
            kg_items.extend(&hint);
        }
        let parts = PromptParts {
            liked_titles: self.titles(&liked)?,
            disliked_titles: self.titles(&disliked)?,
            history_titles: self.titles(&history)?,
            candidate_titles: self.titles(candidates)?,
            hint_ranking_titles: self.titles(&hint)?,
            kg_lines: self.kg_lines(&kg_items, options)?,
        };
        let rendered = render_prompt(&parts, options.variant)?;
        Ok(PromptInstance {
            user_id: user,
            variant: options.variant,
            q: options.q,
            parts,
            candidate_items: candidates.to_vec(),
            hint_ranking_items: hint,
            rendered,
            target: None,
        })
    }
}

/// One line of the instruction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub prompt: String,
    pub target: String,
    pub user_id: usize,
    pub variant: PromptVariant,
    pub q: usize,
}

#[derive(Debug, Clone)]
pub struct EmitOutcome {
    pub records: Vec<InstructionRecord>,
    pub instances: Vec<PromptInstance>,
    pub sampled: usize,
    pub skipped: usize,
}

/// Samples users, builds a training candidate list for each and renders the
/// prompt with its ranked ground-truth target. Users whose history cannot
/// supply the rating tiers are skipped and counted.
pub fn emit_instructions(artifacts: &Artifacts<'_>, sampling: &SamplingConfig, options: &PromptOptions) -> Result<EmitOutcome> {
    let sample = sample_users(artifacts.split, &artifacts.cf.user_vectors, sampling)?;
    // Candidate sampling is independent of the prompt variant so that
    // variants built from the same seed describe the same lists.
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed.wrapping_add(2));
    let item_count = artifacts.catalog.item_count();

    let mut records = Vec::with_capacity(sample.users.len());
    let mut instances = Vec::with_capacity(sample.users.len());
    let mut skipped = 0;
    for &user in &sample.users {
        let list = match build_candidate_list_train(user, artifacts.split, item_count, &mut rng) {
            Ok(list) => list,
            Err(Error::TierDeficit { user, deficit }) => {
                warn!(user, %deficit, "skipping user");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut instance = artifacts.build_instance(user, &list.items, options)?;
        let target = artifacts.titles(&list.ground_truth)?.join("\n");
        instance.target = Some(target.clone());
        records.push(InstructionRecord {
            prompt: instance.rendered.clone(),
            target,
            user_id: user,
            variant: options.variant,
            q: options.q,
        });
        instances.push(instance);
    }
    info!(sampled = sample.users.len(), emitted = records.len(), skipped, "instructions emitted");
    Ok(EmitOutcome {
        records,
        instances,
        sampled: sample.users.len(),
        skipped,
    })
}

pub fn write_jsonl(records: &[InstructionRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
