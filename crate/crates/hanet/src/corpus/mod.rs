//! Caption annotations, concept vocabularies and concept labels.

pub mod lemma;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lemma::{lemmatize, Pos};

/// Default stopword list shipped with the crate; callers may load their own.
pub const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords.txt");
/// Default part-of-speech lexicon for the fallback role parser.
pub const DEFAULT_POS_LEXICON: &str = include_str!("../../data/pos_lexicon.tsv");

/// A noun token, its optional governing verb and the semantic role label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounRecord {
    pub idx: usize,
    pub verb_idx: Option<usize>,
    pub role: String,
}

/// One tokenized caption with verb positions and noun role records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionAnnotation {
    pub video_id: String,
    pub caption_id: String,
    pub tokens: Vec<String>,
    pub verbs: Vec<usize>,
    pub nouns: Vec<NounRecord>,
}

impl CaptionAnnotation {
    /// Index-range, disjointness and governor checks.
    pub fn validate(&self) -> Result<()> {
        let m = self.tokens.len();
        let verb_set: HashSet<usize> = self.verbs.iter().copied().collect();
        if verb_set.len() != self.verbs.len() {
            return Err(Error::data(format!("caption {}: duplicate verb index", self.caption_id)));
        }
        for &v in &self.verbs {
            if v >= m {
                return Err(Error::data(format!(
                    "caption {}: verb index {v} out of range for {m} tokens",
                    self.caption_id
                )));
            }
        }
        let mut noun_set = HashSet::new();
        for rec in &self.nouns {
            if rec.idx >= m {
                return Err(Error::data(format!(
                    "caption {}: noun index {} out of range for {m} tokens",
                    self.caption_id, rec.idx
                )));
            }
            if !noun_set.insert(rec.idx) {
                return Err(Error::data(format!("caption {}: duplicate noun index {}", self.caption_id, rec.idx)));
            }
            if verb_set.contains(&rec.idx) {
                return Err(Error::data(format!(
                    "caption {}: token {} is both verb and noun",
                    self.caption_id, rec.idx
                )));
            }
            if let Some(gov) = rec.verb_idx {
                if !verb_set.contains(&gov) {
                    return Err(Error::data(format!(
                        "caption {}: noun {} governed by non-verb index {gov}",
                        self.caption_id, rec.idx
                    )));
                }
            }
        }
        Ok(())
    }

    /// Lowercased verb lemmas in token order.
    pub fn verb_lemmas(&self) -> Vec<String> {
        self.verbs
            .iter()
            .map(|&i| lemmatize(&self.tokens[i].to_lowercase(), Pos::Verb))
            .collect()
    }

    /// Lowercased noun lemmas in record order.
    pub fn noun_lemmas(&self) -> Vec<String> {
        self.nouns
            .iter()
            .map(|r| lemmatize(&self.tokens[r.idx].to_lowercase(), Pos::Noun))
            .collect()
    }
}

/// Frequency-ranked action (verb) and entity (noun) concept lists.
#[derive(Debug, Clone)]
pub struct ConceptVocabulary {
    pub actions: Vec<String>,
    pub entities: Vec<String>,
    pub action_freq: Vec<u64>,
    pub entity_freq: Vec<u64>,
    action_index: HashMap<String, usize>,
    entity_index: HashMap<String, usize>,
    /// Set when fewer distinct lemmas existed than were requested.
    pub truncation_warning: Option<String>,
}

impl ConceptVocabulary {
    fn from_lists(actions: Vec<(String, u64)>, entities: Vec<(String, u64)>, warning: Option<String>) -> Self {
        let action_index = actions.iter().enumerate().map(|(i, (w, _))| (w.clone(), i)).collect();
        let entity_index = entities.iter().enumerate().map(|(i, (w, _))| (w.clone(), i)).collect();
        ConceptVocabulary {
            action_freq: actions.iter().map(|(_, f)| *f).collect(),
            entity_freq: entities.iter().map(|(_, f)| *f).collect(),
            actions: actions.into_iter().map(|(w, _)| w).collect(),
            entities: entities.into_iter().map(|(w, _)| w).collect(),
            action_index,
            entity_index,
            truncation_warning: warning,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn action_of(&self, lemma: &str) -> Option<usize> {
        self.action_index.get(lemma).copied()
    }

    pub fn entity_of(&self, lemma: &str) -> Option<usize> {
        self.entity_index.get(lemma).copied()
    }

    /// Tab-separated dump: header, then rank (1-based per kind), lemma,
    /// frequency, kind in {action, entity}.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("rank\tlemma\tfrequency\tkind\n");
        for (i, (lemma, freq)) in self.actions.iter().zip(&self.action_freq).enumerate() {
            out.push_str(&format!("{}\t{lemma}\t{freq}\taction\n", i + 1));
        }
        for (i, (lemma, freq)) in self.entities.iter().zip(&self.entity_freq).enumerate() {
            out.push_str(&format!("{}\t{lemma}\t{freq}\tentity\n", i + 1));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut actions = Vec::new();
        let mut entities = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::data(format!("vocab line {}: expected 4 fields", lineno + 1)));
            }
            let rank: usize = fields[0]
                .parse()
                .map_err(|_| Error::data(format!("vocab line {}: bad rank", lineno + 1)))?;
            let freq: u64 = fields[2]
                .parse()
                .map_err(|_| Error::data(format!("vocab line {}: bad frequency", lineno + 1)))?;
            let entry = (fields[1].to_string(), freq);
            let list = match fields[3] {
                "action" => &mut actions,
                "entity" => &mut entities,
                other => return Err(Error::data(format!("vocab line {}: unknown kind {other:?}", lineno + 1))),
            };
            if rank != list.len() + 1 {
                return Err(Error::data(format!("vocab line {}: rank {rank} out of order", lineno + 1)));
            }
            list.push(entry);
        }
        Ok(ConceptVocabulary::from_lists(actions, entities, None))
    }
}

/// Per-caption multi-hot concept labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptLabels {
    pub y_a: Vec<f32>,
    pub y_e: Vec<f32>,
}

fn is_punctuation(token: &str) -> bool {
    !token.chars().any(|c| c.is_alphabetic())
}

/// Count lemmas over the corpus and keep the top `k_a` verbs and `k_e`
/// nouns; ranking is by descending frequency, ties broken lexicographically.
pub fn build_vocabulary<'a>(
    annotations: impl IntoIterator<Item = &'a CaptionAnnotation>,
    k_a: usize,
    k_e: usize,
    stopwords: &HashSet<String>,
) -> Result<ConceptVocabulary> {
    let mut verb_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut noun_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut saw_any = false;
    for ann in annotations {
        saw_any = true;
        for &vi in &ann.verbs {
            let token = ann.tokens[vi].to_lowercase();
            if is_punctuation(&token) || stopwords.contains(&token) {
                continue;
            }
            *verb_counts.entry(lemmatize(&token, Pos::Verb)).or_insert(0) += 1;
        }
        for rec in &ann.nouns {
            let token = ann.tokens[rec.idx].to_lowercase();
            if is_punctuation(&token) || stopwords.contains(&token) {
                continue;
            }
            *noun_counts.entry(lemmatize(&token, Pos::Noun)).or_insert(0) += 1;
        }
    }
    if !saw_any {
        return Err(Error::data("build_vocabulary: empty annotation stream".to_string()));
    }

    let rank = |counts: BTreeMap<String, u64>, k: usize| -> Vec<(String, u64)> {
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(k);
        entries
    };
    let actions = rank(verb_counts, k_a);
    let entities = rank(noun_counts, k_e);
    let mut warning = None;
    if actions.len() < k_a || entities.len() < k_e {
        warning = Some(format!(
            "vocabulary truncated: {} of {k_a} actions, {} of {k_e} entities available",
            actions.len(),
            entities.len()
        ));
    }
    Ok(ConceptVocabulary::from_lists(actions, entities, warning))
}

/// Multi-hot membership of the caption's lemmas in the vocabulary;
/// out-of-vocabulary words contribute nothing.
pub fn derive_concept_labels(ann: &CaptionAnnotation, vocab: &ConceptVocabulary) -> ConceptLabels {
    let mut y_a = vec![0.0f32; vocab.num_actions()];
    let mut y_e = vec![0.0f32; vocab.num_entities()];
    for lemma in ann.verb_lemmas() {
        if let Some(i) = vocab.action_of(&lemma) {
            y_a[i] = 1.0;
        }
    }
    for lemma in ann.noun_lemmas() {
        if let Some(i) = vocab.entity_of(&lemma) {
            y_e[i] = 1.0;
        }
    }
    ConceptLabels { y_a, y_e }
}

/// Word class assigned by the fallback lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Noun,
    Verb,
    Other,
}

/// Word -> part-of-speech map used only by the fallback role parser.
#[derive(Debug, Clone, Default)]
pub struct PosLexicon {
    map: HashMap<String, PosTag>,
}

impl PosLexicon {
    pub fn new() -> Self {
        PosLexicon::default()
    }

    pub fn insert(&mut self, word: &str, tag: PosTag) {
        self.map.insert(word.to_lowercase(), tag);
    }

    pub fn tag(&self, word: &str) -> PosTag {
        self.map.get(&word.to_lowercase()).copied().unwrap_or(PosTag::Other)
    }

    /// One `word<TAB>tag` entry per line, tags in {noun, verb, other}.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = PosLexicon::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("lexicon line {}: expected word<TAB>tag", lineno + 1)))?;
            let tag = match tag.trim() {
                "noun" => PosTag::Noun,
                "verb" => PosTag::Verb,
                "other" => PosTag::Other,
                other => return Err(Error::data(format!("lexicon line {}: unknown tag {other:?}", lineno + 1))),
            };
            lex.insert(word.trim(), tag);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        PosLexicon::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(&String, &PosTag)> = self.map.iter().collect();
        entries.sort_by_key(|(word, _)| word.as_str());
        let mut out = String::new();
        for (word, tag) in entries {
            let tag = match tag {
                PosTag::Noun => "noun",
                PosTag::Verb => "verb",
                PosTag::Other => "other",
            };
            out.push_str(&format!("{word}\t{tag}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Role label every fallback-parsed noun edge carries.
pub const FALLBACK_ROLE: &str = "arg";

/// Tag tokens through the lexicon and link each noun to its nearest
/// preceding verb, or the nearest following verb when none precedes.
/// Verbless captions yield nouns without governors.
pub fn fallback_role_parse(
    video_id: &str,
    caption_id: &str,
    tokens: &[String],
    lexicon: &PosLexicon,
) -> CaptionAnnotation {
    let mut verbs = Vec::new();
    let mut noun_positions = Vec::new();
    for (i, token) in tokens.iter().enumerate() {
        match lexicon.tag(token) {
            PosTag::Verb => verbs.push(i),
            PosTag::Noun => noun_positions.push(i),
            PosTag::Other => {}
        }
    }
    let nouns = noun_positions
        .into_iter()
        .map(|idx| {
            let preceding = verbs.iter().rev().find(|&&v| v < idx).copied();
            let following = verbs.iter().find(|&&v| v > idx).copied();
            let verb_idx = preceding.or(following);
            NounRecord { idx, verb_idx, role: verb_idx.map(|_| FALLBACK_ROLE.to_string()).unwrap_or_default() }
        })
        .collect();
    CaptionAnnotation {
        video_id: video_id.to_string(),
        caption_id: caption_id.to_string(),
        tokens: tokens.to_vec(),
        verbs,
        nouns,
    }
}

pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.to_lowercase())
        .collect()
}

pub fn load_stopwords(path: Option<&Path>) -> Result<HashSet<String>> {
    match path {
        Some(p) => Ok(parse_stopwords(&fs::read_to_string(p)?)),
        None => Ok(parse_stopwords(DEFAULT_STOPWORDS)),
    }
}

/// Maps semantic-role labels onto edge-type indices. Type 0 is reserved for
/// event edges, the last type is the catch-all for unseen labels, and the
/// most frequent training labels fill the slots between.
#[derive(Debug, Clone)]
pub struct RoleDictionary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    num_types: usize,
}

/// Edge type reserved for event<->verb (and governorless event<->noun) links.
pub const EVENT_EDGE_TYPE: usize = 0;

impl RoleDictionary {
    pub fn build<'a>(annotations: impl IntoIterator<Item = &'a CaptionAnnotation>, num_types: usize) -> Result<Self> {
        if num_types < 2 {
            return Err(Error::invalid("role dictionary needs at least 2 edge types".to_string()));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for ann in annotations {
            for rec in &ann.nouns {
                if rec.verb_idx.is_some() {
                    *counts.entry(rec.role.clone()).or_insert(0) += 1;
                }
            }
        }
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        // Slots: one for the reserved event type, one for the catch-all.
        entries.truncate(num_types.saturating_sub(2));
        let labels: Vec<String> = entries.into_iter().map(|(l, _)| l).collect();
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i + 1)).collect();
        Ok(RoleDictionary { labels, index, num_types })
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn catch_all(&self) -> usize {
        self.num_types - 1
    }

    /// Edge type for a role label; unseen labels map to the catch-all.
    pub fn edge_type(&self, role: &str) -> usize {
        self.index.get(role).copied().unwrap_or(self.num_types - 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("num_types\t{}\n", self.num_types);
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(&format!("{}\t{label}\n", i + 1));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("roles file is empty".to_string()))?;
        let num_types: usize = header
            .strip_prefix("num_types\t")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::data("roles file: bad header".to_string()))?;
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (rank, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("roles line {}: expected rank<TAB>label", lineno + 2)))?;
            let rank: usize = rank
                .parse()
                .map_err(|_| Error::data(format!("roles line {}: bad rank", lineno + 2)))?;
            if rank != labels.len() + 1 {
                return Err(Error::data(format!("roles line {}: rank out of order", lineno + 2)));
            }
            labels.push(label.to_string());
        }
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i + 1)).collect();
        Ok(RoleDictionary { labels, index, num_types })
    }
}
