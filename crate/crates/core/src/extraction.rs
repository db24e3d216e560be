//! Dictionary-driven extraction of `(role, institution)` pairs from prospectus text.
//!
//! Institution names are recognized as a root term optionally followed by one or more
//! suffix terms (`U.S. Bank` + `National Association`). Roles are found by keyword, and
//! each mention is paired with the nearest role keyword that precedes it on the same line,
//! which is how summary tables render once flattened to text.
//!
//! All offsets are byte offsets into the UTF-8 document.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{FinancialInstitution, Role, TermPair};
use crate::error::{Error, Result};

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_name(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter_map(|c| {
            if c.is_alphanumeric() {
                Some(c.to_lowercase().next().unwrap_or(c))
            } else if c.is_whitespace() {
                Some(' ')
            } else {
                None
            }
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootEntry {
    pub term: String,
    pub fi_id: String,
}

#[derive(Debug, Clone)]
pub struct RootSuffixDictionary {
    roots: Vec<RootEntry>,
    suffixes: Vec<String>,
    normalized_suffixes: Vec<String>,
    standard_names: HashMap<String, FinancialInstitution>,
    institutions: BTreeMap<String, FinancialInstitution>,
}

impl RootSuffixDictionary {
    /// `roots` pairs a root term with a standardized institution; `names` optionally
    /// supplies display names keyed by institution id.
    pub fn new(
        roots: Vec<RootEntry>,
        suffixes: Vec<String>,
        names: &BTreeMap<String, String>,
    ) -> Result<Self> {
        if roots.is_empty() {
            return Err(Error::invalid("root dictionary is empty"));
        }
        if suffixes.is_empty() {
            return Err(Error::invalid("suffix dictionary is empty"));
        }
        let mut institutions = BTreeMap::new();
        let mut standard_names = HashMap::new();
        for r in &roots {
            if r.term.trim().is_empty() || r.fi_id.trim().is_empty() {
                return Err(Error::invalid("root entries need a term and an institution id"));
            }
            let fi = institutions
                .entry(r.fi_id.clone())
                .or_insert_with(|| {
                    let display = names.get(&r.fi_id).cloned().unwrap_or_else(|| r.fi_id.clone());
                    FinancialInstitution::new(r.fi_id.clone(), display)
                })
                .clone();
            let key = normalize_name(&r.term);
            if let Some(prev) = standard_names.get(&key) {
                let prev: &FinancialInstitution = prev;
                if prev.id != fi.id {
                    return Err(Error::invalid(format!(
                        "root `{}` maps to both `{}` and `{}`",
                        r.term, prev.id, fi.id
                    )));
                }
            }
            standard_names.insert(key, fi);
        }
        let mut suffixes: Vec<String> = suffixes
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        suffixes.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        suffixes.dedup();
        let mut normalized_suffixes: Vec<String> = suffixes.iter().map(|s| normalize_name(s)).collect();
        normalized_suffixes.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        normalized_suffixes.dedup();
        Ok(RootSuffixDictionary {
            roots,
            suffixes,
            normalized_suffixes,
            standard_names,
            institutions,
        })
    }

    /// Reads a `root,standardized_id[,display_name]` CSV and a one-suffix-per-line list.
    pub fn from_readers<R1: Read, R2: BufRead>(roots_csv: R1, suffix_lines: R2) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(roots_csv);
        let mut roots = Vec::new();
        let mut names = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let term = row.get(0).unwrap_or_default().trim().to_string();
            let fi_id = row.get(1).unwrap_or_default().trim().to_string();
            if let Some(name) = row.get(2).map(str::trim).filter(|s| !s.is_empty()) {
                names.insert(fi_id.clone(), name.to_string());
            }
            roots.push(RootEntry { term, fi_id });
        }
        let mut suffixes = Vec::new();
        for line in suffix_lines.lines() {
            let line = line.map_err(|e| Error::io("reading suffix list", e))?;
            let line = line.trim();
            if !line.is_empty() && !line.starts_with('#') {
                suffixes.push(line.to_string());
            }
        }
        Self::new(roots, suffixes, &names)
    }

    pub fn write_roots_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["root", "standardized_id", "display_name"])?;
        for r in &self.roots {
            let name = &self.institutions[&r.fi_id].display_name;
            w.write_record([r.term.as_str(), r.fi_id.as_str(), name.as_str()])?;
        }
        w.flush().map_err(|e| Error::io("writing roots", e))?;
        Ok(())
    }

    pub fn write_suffixes<W: Write>(&self, mut writer: W) -> Result<()> {
        for s in &self.suffixes {
            writeln!(writer, "{s}").map_err(|e| Error::io("writing suffixes", e))?;
        }
        Ok(())
    }

    pub fn roots(&self) -> &[RootEntry] {
        &self.roots
    }

    pub fn suffixes(&self) -> &[String] {
        &self.suffixes
    }

    pub fn institutions(&self) -> impl Iterator<Item = &FinancialInstitution> {
        self.institutions.values()
    }

    pub fn institution(&self, id: &str) -> Option<&FinancialInstitution> {
        self.institutions.get(id)
    }

    fn lookup(&self, normalized: &str) -> Option<&FinancialInstitution> {
        self.standard_names.get(normalized)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub raw_text: String,
    pub matched_root: String,
    pub matched_suffix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedPair {
    pub role: Role,
    pub raw_name: String,
    pub standardized: FinancialInstitution,
}

impl ExtractedPair {
    pub fn key(&self) -> TermPair {
        TermPair {
            role: self.role.clone(),
            fi: self.standardized.id.clone(),
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn boundary_before(text: &str, pos: usize) -> bool {
    text[..pos].chars().next_back().is_none_or(|c| !is_word_char(c))
}

fn boundary_after(text: &str, pos: usize) -> bool {
    text[pos..].chars().next().is_none_or(|c| !is_word_char(c))
}

/// ASCII-case-insensitive match of `pattern` at `pos`, where a whitespace run in the
/// pattern matches any non-empty whitespace run in the text. Returns the end offset.
fn match_at(text: &str, pos: usize, pattern: &str) -> Option<usize> {
    let t = text.as_bytes();
    let p = pattern.as_bytes();
    let (mut i, mut j) = (pos, 0);
    while j < p.len() {
        if p[j].is_ascii_whitespace() {
            while j < p.len() && p[j].is_ascii_whitespace() {
                j += 1;
            }
            if i >= t.len() || !t[i].is_ascii_whitespace() {
                return None;
            }
            while i < t.len() && t[i].is_ascii_whitespace() {
                i += 1;
            }
        } else {
            if i >= t.len() || !t[i].eq_ignore_ascii_case(&p[j]) {
                return None;
            }
            i += 1;
            j += 1;
        }
    }
    text.is_char_boundary(i).then_some(i)
}

/// Bounded, word-aligned match.
fn word_match_at(text: &str, pos: usize, pattern: &str) -> Option<usize> {
    if !boundary_before(text, pos) {
        return None;
    }
    let end = match_at(text, pos, pattern)?;
    boundary_after(text, end).then_some(end)
}

fn word_starts(text: &str) -> impl Iterator<Item = usize> + '_ {
    text.char_indices()
        .filter(|&(i, c)| !c.is_whitespace() && boundary_before(text, i))
        .map(|(i, _)| i)
}

/// Picks non-overlapping spans, longest first, earliest start on ties; returns them by start.
fn select_longest<T>(mut cands: Vec<(usize, usize, T)>) -> Vec<(usize, usize, T)> {
    cands.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then_with(|| a.0.cmp(&b.0)));
    let mut taken: Vec<(usize, usize, T)> = Vec::new();
    for c in cands {
        if taken.iter().all(|t| c.1 <= t.0 || c.0 >= t.1) {
            taken.push(c);
        }
    }
    taken.sort_by_key(|t| t.0);
    taken
}

/// Extends a root match with a chain of suffix terms separated by spaces or commas.
/// Returns the new end and the start of the first suffix, if any.
fn extend_with_suffixes(text: &str, root_end: usize, suffixes: &[String]) -> (usize, Option<usize>) {
    let mut end = root_end;
    let mut first_suffix = None;
    loop {
        let rest = &text[end..];
        let q = end + (rest.len() - rest.trim_start_matches([' ', '\t', ',']).len());
        match suffixes.iter().filter_map(|s| word_match_at(text, q, s)).max() {
            Some(e) => {
                first_suffix.get_or_insert(q);
                end = e;
            }
            None => break,
        }
    }
    (end, first_suffix)
}

/// All non-overlapping longest dictionary matches, ordered by start offset.
pub fn ner_match(doc_id: &str, text: &str, dict: &RootSuffixDictionary) -> Vec<MentionSpan> {
    let mut cands = Vec::new();
    for pos in word_starts(text) {
        for root in &dict.roots {
            if let Some(root_end) = word_match_at(text, pos, &root.term) {
                let (end, suffix_start) = extend_with_suffixes(text, root_end, &dict.suffixes);
                cands.push((pos, end, (root.term.clone(), suffix_start)));
            }
        }
    }
    select_longest(cands)
        .into_iter()
        .map(|(start, end, (root, suffix_start))| MentionSpan {
            doc_id: doc_id.to_string(),
            start,
            end,
            raw_text: text[start..end].to_string(),
            matched_root: root,
            matched_suffix: suffix_start.map(|s| text[s..end].to_string()),
        })
        .collect()
}

/// Maps a surface name to its standardized institution by normalized root lookup,
/// peeling trailing suffix terms until a root matches.
pub fn resolve_entity(raw_name: &str, dict: &RootSuffixDictionary) -> Result<FinancialInstitution> {
    let mut name = normalize_name(raw_name);
    loop {
        if let Some(fi) = dict.lookup(&name) {
            return Ok(fi.clone());
        }
        let stripped = dict.normalized_suffixes.iter().find_map(|s| {
            name.strip_suffix(s.as_str())
                .filter(|rest| rest.is_empty() || rest.ends_with(' '))
                .map(|rest| rest.trim_end().to_string())
        });
        match stripped {
            Some(rest) if !rest.is_empty() => name = rest,
            _ => return Err(Error::UnresolvedEntity(raw_name.to_string())),
        }
    }
}

/// Role keywords and their surface variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordMap {
    entries: Vec<(String, Role)>,
}

impl Default for KeywordMap {
    fn default() -> Self {
        let table: &[(&str, &[&str])] = &[
            ("issuer", &["issuer", "issuers", "issuing entity", "issuing entities"]),
            ("originator", &["originator", "originators"]),
            ("seller", &["seller", "sellers"]),
            ("trustee", &["trustee", "trustees", "indenture trustee", "owner trustee"]),
            (
                "servicer",
                &[
                    "servicer",
                    "servicers",
                    "master servicer",
                    "primary servicer",
                    "special servicer",
                    "sub-servicer",
                    "subservicer",
                ],
            ),
            ("depositor", &["depositor"]),
            ("sponsor", &["sponsor", "sponsors"]),
            ("securities administrator", &["securities administrator"]),
            ("custodian", &["custodian", "custodians"]),
            ("swap counterparty", &["swap counterparty", "swap provider"]),
            ("cap counterparty", &["cap counterparty", "cap provider"]),
            ("insurer", &["insurer", "certificate insurer", "note insurer", "bond insurer"]),
            ("underwriter", &["underwriter", "underwriters"]),
        ];
        let mut map = KeywordMap { entries: Vec::new() };
        for (role, words) in table {
            for w in *words {
                map.insert(w, Role::new(role));
            }
        }
        map
    }
}

impl KeywordMap {
    pub fn empty() -> Self {
        KeywordMap { entries: Vec::new() }
    }

    pub fn insert(&mut self, keyword: &str, role: Role) {
        let kw = keyword.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        self.entries.retain(|(k, _)| *k != kw);
        self.entries.push((kw, role));
    }

    pub fn roles(&self) -> impl Iterator<Item = &Role> {
        self.entries.iter().map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAnchor {
    pub role: Role,
    pub start: usize,
    pub end: usize,
}

/// Every role keyword occurrence; overlapping keywords resolve to the longest
/// (`Master Servicer` is one anchor, not two).
pub fn extract_roles(text: &str, keywords: &KeywordMap) -> Vec<RoleAnchor> {
    let mut cands = Vec::new();
    for pos in word_starts(text) {
        for (kw, role) in &keywords.entries {
            if let Some(end) = word_match_at(text, pos, kw) {
                cands.push((pos, end, role.clone()));
            }
        }
    }
    select_longest(cands)
        .into_iter()
        .map(|(start, end, role)| RoleAnchor { role, start, end })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingOutcome {
    pub pairs: Vec<ExtractedPair>,
    /// Mentions with no role anchor before them on their line.
    pub dropped: usize,
    pub unresolved: Vec<String>,
}

fn line_bounds(text: &str, pos: usize) -> (usize, usize) {
    let start = text[..pos].rfind('\n').map_or(0, |i| i + 1);
    let end = text[pos..].find('\n').map_or(text.len(), |i| pos + i);
    (start, end)
}

/// Pairs each mention with the nearest preceding role anchor in its line. Anchors that
/// fall inside a mention (a role word that is part of an institution name) are ignored.
pub fn pair_roles(
    text: &str,
    mentions: &[MentionSpan],
    anchors: &[RoleAnchor],
    dict: &RootSuffixDictionary,
) -> PairingOutcome {
    let anchors: Vec<&RoleAnchor> = anchors
        .iter()
        .filter(|a| mentions.iter().all(|m| a.end <= m.start || a.start >= m.end))
        .collect();
    let mut out = PairingOutcome::default();
    for m in mentions {
        let (line_start, _) = line_bounds(text, m.start);
        let anchor = anchors
            .iter()
            .filter(|a| a.start >= line_start && a.end <= m.start)
            .max_by_key(|a| a.start);
        let Some(anchor) = anchor else {
            out.dropped += 1;
            continue;
        };
        match resolve_entity(&m.raw_text, dict) {
            Ok(fi) => out.pairs.push(ExtractedPair {
                role: anchor.role.clone(),
                raw_name: m.raw_text.clone(),
                standardized: fi,
            }),
            Err(_) => out.unresolved.push(m.raw_text.clone()),
        }
    }
    out
}

/// Keeps the pairs of `a` whose canonical `(role, institution)` also occurs in `b`.
pub fn agreement_filter(a: &[ExtractedPair], b: &[ExtractedPair]) -> Vec<ExtractedPair> {
    let keys: HashSet<TermPair> = b.iter().map(ExtractedPair::key).collect();
    a.iter().filter(|p| keys.contains(&p.key())).cloned().collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentExtraction {
    pub doc_id: String,
    pub pairs: Vec<ExtractedPair>,
    pub dropped_mentions: usize,
    pub unresolved_names: Vec<String>,
}

impl DocumentExtraction {
    /// Distinct canonical pairs, in first-seen order.
    pub fn distinct_keys(&self) -> Vec<TermPair> {
        let mut seen = HashSet::new();
        self.pairs
            .iter()
            .map(ExtractedPair::key)
            .filter(|k| seen.insert(k.clone()))
            .collect()
    }
}

/// A pipeline that turns one document into role–institution pairs.
pub trait PairExtractor: Sync {
    fn name(&self) -> &str;
    fn extract(&self, doc_id: &str, text: &str) -> DocumentExtraction;
}

pub struct DictNerExtractor<'a> {
    pub dict: &'a RootSuffixDictionary,
    pub keywords: &'a KeywordMap,
}

impl PairExtractor for DictNerExtractor<'_> {
    fn name(&self) -> &str {
        "dict-ner"
    }

    fn extract(&self, doc_id: &str, text: &str) -> DocumentExtraction {
        let mentions = ner_match(doc_id, text, self.dict);
        let anchors = extract_roles(text, self.keywords);
        let outcome = pair_roles(text, &mentions, &anchors, self.dict);
        DocumentExtraction {
            doc_id: doc_id.to_string(),
            pairs: outcome.pairs,
            dropped_mentions: outcome.dropped,
            unresolved_names: outcome.unresolved,
        }
    }
}

/// Second opinion: runs of capitalized words, resolved by their longest resolvable
/// sub-phrase. It knows nothing about suffix structure.
pub struct CapitalizedPhraseExtractor<'a> {
    pub dict: &'a RootSuffixDictionary,
    pub keywords: &'a KeywordMap,
}

const CONNECTORS: [&str; 4] = ["of", "and", "&", "de"];

fn is_capitalized(word: &str) -> bool {
    word.chars().find(|c| c.is_alphanumeric()).is_some_and(|c| c.is_uppercase() || c.is_ascii_digit())
}

/// Word spans `(start, end)` of capitalized phrases. Commas, colons, semicolons and
/// parentheses end a phrase.
fn capitalized_phrases(text: &str) -> Vec<Vec<(usize, usize)>> {
    let mut phrases = Vec::new();
    let mut current: Vec<(usize, usize)> = Vec::new();
    let mut pending: Vec<(usize, usize)> = Vec::new();
    let mut flush = |current: &mut Vec<(usize, usize)>, pending: &mut Vec<(usize, usize)>| {
        if !current.is_empty() {
            phrases.push(std::mem::take(current));
        }
        pending.clear();
    };
    let mut idx = 0;
    for raw in text.split_inclusive(char::is_whitespace) {
        let start = idx;
        idx += raw.len();
        let word = raw.trim_end();
        if word.is_empty() {
            if raw.contains('\n') {
                flush(&mut current, &mut pending);
            }
            continue;
        }
        let word_start = start + (word.len() - word.trim_start_matches(['(', '"', '\'']).len());
        let core = word.trim_start_matches(['(', '"', '\'']);
        let stripped = core.trim_end_matches([',', ':', ';', ')', '"', '\'']);
        let ends_phrase = stripped.len() != core.len() || raw.contains('\n');
        let word_end = word_start + stripped.len();
        if stripped.is_empty() {
            flush(&mut current, &mut pending);
            continue;
        }
        if is_capitalized(stripped) {
            current.append(&mut pending);
            current.push((word_start, word_end));
        } else if !current.is_empty() && CONNECTORS.contains(&stripped.to_lowercase().as_str()) {
            pending.push((word_start, word_end));
        } else {
            flush(&mut current, &mut pending);
        }
        if ends_phrase {
            flush(&mut current, &mut pending);
        }
    }
    flush(&mut current, &mut pending);
    phrases
}

fn resolve_phrase(
    text: &str,
    words: &[(usize, usize)],
    dict: &RootSuffixDictionary,
    out: &mut Vec<(usize, usize, FinancialInstitution)>,
) -> bool {
    if words.is_empty() {
        return false;
    }
    for len in (1..=words.len()).rev() {
        for s in 0..=words.len() - len {
            let (a, b) = (words[s].0, words[s + len - 1].1);
            if let Ok(fi) = resolve_entity(&text[a..b], dict) {
                resolve_phrase(text, &words[..s], dict, out);
                out.push((a, b, fi));
                resolve_phrase(text, &words[s + len..], dict, out);
                return true;
            }
        }
    }
    false
}

impl PairExtractor for CapitalizedPhraseExtractor<'_> {
    fn name(&self) -> &str {
        "capitalized-phrase"
    }

    fn extract(&self, doc_id: &str, text: &str) -> DocumentExtraction {
        let mut resolved = Vec::new();
        let mut unresolved = Vec::new();
        for phrase in capitalized_phrases(text) {
            let mut found = Vec::new();
            if resolve_phrase(text, &phrase, self.dict, &mut found) {
                resolved.extend(found);
            } else {
                let (a, b) = (phrase[0].0, phrase[phrase.len() - 1].1);
                let span = &text[a..b];
                // Role labels are capitalized too; they are not failed names.
                if extract_roles(span, self.keywords).is_empty() {
                    unresolved.push(span.to_string());
                }
            }
        }
        resolved.sort_by_key(|r| r.0);
        let anchors: Vec<RoleAnchor> = extract_roles(text, self.keywords)
            .into_iter()
            .filter(|a| resolved.iter().all(|&(s, e, _)| a.end <= s || a.start >= e))
            .collect();
        let mut out = DocumentExtraction {
            doc_id: doc_id.to_string(),
            unresolved_names: unresolved,
            ..Default::default()
        };
        for (s, e, fi) in resolved {
            let (line_start, _) = line_bounds(text, s);
            match anchors.iter().filter(|a| a.start >= line_start && a.end <= s).max_by_key(|a| a.start) {
                Some(a) => out.pairs.push(ExtractedPair {
                    role: a.role.clone(),
                    raw_name: text[s..e].to_string(),
                    standardized: fi,
                }),
                None => out.dropped_mentions += 1,
            }
        }
        out
    }
}

/// Runs both extractors and keeps only the pairs they agree on.
pub fn extract_with_agreement(
    primary: &dyn PairExtractor,
    secondary: &dyn PairExtractor,
    doc_id: &str,
    text: &str,
) -> DocumentExtraction {
    let a = primary.extract(doc_id, text);
    let b = secondary.extract(doc_id, text);
    DocumentExtraction {
        doc_id: doc_id.to_string(),
        pairs: agreement_filter(&a.pairs, &b.pairs),
        dropped_mentions: a.dropped_mentions,
        unresolved_names: a.unresolved_names,
    }
}

pub fn write_extractions_jsonl<W: Write>(docs: &[DocumentExtraction], mut writer: W) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        doc_id: &'a str,
        pairs: &'a [ExtractedPair],
    }
    for d in docs {
        serde_json::to_writer(&mut writer, &Line { doc_id: &d.doc_id, pairs: &d.pairs })?;
        writer.write_all(b"\n").map_err(|e| Error::io("writing extractions", e))?;
    }
    Ok(())
}

pub fn write_diagnostics_csv<W: Write>(docs: &[DocumentExtraction], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["doc_id", "dropped_mentions", "unresolved_names"])?;
    for d in docs {
        w.write_record([d.doc_id.clone(), d.dropped_mentions.to_string(), d.unresolved_names.join(";")])?;
    }
    w.flush().map_err(|e| Error::io("writing diagnostics", e))?;
    Ok(())
}
