//! Document and corpus model: prospectuses as bags of `(role, institution)` pairs
//! grouped into annual slices.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical lowercase role name, e.g. `issuer` or `securities administrator`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Role(String);

impl Role {
    pub fn new(name: &str) -> Self {
        let canonical = name.split_whitespace().collect::<Vec<_>>().join(" ");
        Role(canonical.to_lowercase())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn issuer() -> Self {
        Role::new("issuer")
    }

    pub fn originator() -> Self {
        Role::new("originator")
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The thirteen roles tracked across prospectuses.
pub const SEED_ROLES: [&str; 13] = [
    "issuer",
    "originator",
    "seller",
    "trustee",
    "servicer",
    "depositor",
    "sponsor",
    "securities administrator",
    "custodian",
    "swap counterparty",
    "cap counterparty",
    "insurer",
    "underwriter",
];

/// Extensible set of known roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRegistry {
    roles: BTreeSet<Role>,
}

impl Default for RoleRegistry {
    fn default() -> Self {
        RoleRegistry {
            roles: SEED_ROLES.iter().map(|r| Role::new(r)).collect(),
        }
    }
}

impl RoleRegistry {
    pub fn register(&mut self, role: Role) {
        self.roles.insert(role);
    }

    pub fn contains(&self, role: &Role) -> bool {
        self.roles.contains(role)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Role> {
        self.roles.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FinancialInstitution {
    /// Standardized-name key.
    pub id: String,
    pub display_name: String,
}

impl FinancialInstitution {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>) -> Self {
        FinancialInstitution {
            id: id.into(),
            display_name: display_name.into(),
        }
    }

    pub fn from_id(id: impl Into<String>) -> Self {
        let id = id.into();
        FinancialInstitution {
            display_name: id.clone(),
            id,
        }
    }
}

/// A vocabulary entry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TermPair {
    pub role: Role,
    pub fi: String,
}

impl TermPair {
    pub fn new(role: &str, fi: &str) -> Self {
        TermPair {
            role: Role::new(role),
            fi: fi.to_string(),
        }
    }
}

impl fmt::Display for TermPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.role, self.fi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleFiToken {
    pub role: Role,
    pub fi: FinancialInstitution,
    pub count: u32,
}

impl RoleFiToken {
    pub fn pair(&self) -> TermPair {
        TermPair {
            role: self.role.clone(),
            fi: self.fi.id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProspectusDoc {
    pub id: String,
    pub year: i32,
    /// One entry per distinct pair, sorted by `(role, fi)`.
    pub tokens: Vec<RoleFiToken>,
    pub security_ids: Vec<String>,
}

impl ProspectusDoc {
    pub fn distinct_pairs(&self) -> usize {
        self.tokens.len()
    }

    pub fn total_count(&self) -> u64 {
        self.tokens.iter().map(|t| t.count as u64).sum()
    }
}

/// Ordered vocabulary of `(role, fi)` pairs with a reverse index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<TermPair>,
    index: HashMap<TermPair, usize>,
}

impl Vocabulary {
    pub fn from_terms(terms: impl IntoIterator<Item = TermPair>) -> Self {
        let set: BTreeSet<TermPair> = terms.into_iter().collect();
        let terms: Vec<TermPair> = set.into_iter().collect();
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { terms, index }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&TermPair> {
        self.terms.get(idx)
    }

    pub fn index_of(&self, pair: &TermPair) -> Option<usize> {
        self.index.get(pair).copied()
    }

    pub fn terms(&self) -> &[TermPair] {
        &self.terms
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.terms.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let terms = Vec::<TermPair>::deserialize(d)?;
        Ok(Vocabulary::from_terms(terms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearSlice {
    pub year: i32,
    pub docs: Vec<ProspectusDoc>,
}

/// Documents grouped into strictly increasing annual slices over a shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlicedCorpus {
    slices: Vec<YearSlice>,
    vocabulary: Vocabulary,
}

impl TimeSlicedCorpus {
    fn from_docs(mut docs: Vec<ProspectusDoc>) -> Self {
        docs.sort_by(|a, b| a.year.cmp(&b.year).then_with(|| a.id.cmp(&b.id)));
        let vocabulary = Vocabulary::from_terms(docs.iter().flat_map(|d| d.tokens.iter().map(RoleFiToken::pair)));
        let mut slices: Vec<YearSlice> = Vec::new();
        for doc in docs {
            match slices.last_mut() {
                Some(s) if s.year == doc.year => s.docs.push(doc),
                _ => slices.push(YearSlice {
                    year: doc.year,
                    docs: vec![doc],
                }),
            }
        }
        TimeSlicedCorpus { slices, vocabulary }
    }

    pub fn slices(&self) -> &[YearSlice] {
        &self.slices
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn years(&self) -> Vec<i32> {
        self.slices.iter().map(|s| s.year).collect()
    }

    pub fn docs(&self) -> impl Iterator<Item = &ProspectusDoc> {
        self.slices.iter().flat_map(|s| s.docs.iter())
    }

    pub fn num_docs(&self) -> usize {
        self.slices.iter().map(|s| s.docs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_docs() == 0
    }

    pub fn total_count(&self) -> u64 {
        self.docs().map(ProspectusDoc::total_count).sum()
    }

    /// Number of documents containing each vocabulary term.
    pub fn doc_frequency(&self) -> Vec<usize> {
        let mut df = vec![0usize; self.vocabulary.len()];
        for doc in self.docs() {
            for tok in &doc.tokens {
                if let Some(i) = self.vocabulary.index_of(&tok.pair()) {
                    df[i] += 1;
                }
            }
        }
        df
    }

    /// Sub-corpus with only the documents issued in `years`.
    pub fn restrict_to_years(&self, years: &[i32]) -> Result<Self> {
        let docs: Vec<ProspectusDoc> = self
            .docs()
            .filter(|d| years.contains(&d.year))
            .cloned()
            .collect();
        if docs.is_empty() {
            return Err(Error::EmptyCorpus(" after year restriction".into()));
        }
        Ok(Self::from_docs(docs))
    }
}

/// Input record, one per JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub year: i32,
    pub pairs: Vec<PairRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub security_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub role: String,
    pub fi: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fi_name: Option<String>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

fn is_one(c: &u32) -> bool {
    *c == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub year_min: i32,
    pub year_max: i32,
    pub roles: RoleRegistry,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            year_min: 2002,
            year_max: 2007,
            roles: RoleRegistry::default(),
        }
    }
}

/// Builds a sliced corpus. Repeated pairs within a record accumulate their counts.
pub fn build_corpus<I>(records: I, config: &CorpusConfig) -> Result<TimeSlicedCorpus>
where
    I: IntoIterator<Item = DocumentRecord>,
{
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for rec in records {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateDocument(rec.id));
        }
        if rec.year < config.year_min || rec.year > config.year_max {
            return Err(Error::YearOutOfRange {
                id: rec.id,
                year: rec.year,
                min: config.year_min,
                max: config.year_max,
            });
        }
        if rec.pairs.is_empty() {
            return Err(Error::EmptyDocument(rec.id));
        }
        let mut merged: BTreeMap<TermPair, RoleFiToken> = BTreeMap::new();
        for p in rec.pairs {
            let role = Role::new(&p.role);
            if !config.roles.contains(&role) {
                return Err(Error::invalid(format!(
                    "document `{}`: role `{}` is not registered",
                    rec.id, role
                )));
            }
            if p.fi.trim().is_empty() {
                return Err(Error::invalid(format!("document `{}`: empty institution id", rec.id)));
            }
            if p.count == 0 {
                return Err(Error::invalid(format!("document `{}`: zero token count", rec.id)));
            }
            let fi = FinancialInstitution::new(p.fi.clone(), p.fi_name.unwrap_or_else(|| p.fi.clone()));
            let key = TermPair {
                role: role.clone(),
                fi: fi.id.clone(),
            };
            merged
                .entry(key)
                .and_modify(|t| t.count += p.count)
                .or_insert(RoleFiToken {
                    role,
                    fi,
                    count: p.count,
                });
        }
        docs.push(ProspectusDoc {
            id: rec.id,
            year: rec.year,
            tokens: merged.into_values().collect(),
            security_ids: rec.security_ids,
        });
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus(String::new()));
    }
    Ok(TimeSlicedCorpus::from_docs(docs))
}

/// Drops rare institutions and thin documents, alternating both filters until neither
/// removes anything.
pub fn filter_corpus(corpus: &TimeSlicedCorpus, min_fi_docs: usize, min_pairs: usize) -> Result<TimeSlicedCorpus> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(String::new()));
    }
    let mut docs: Vec<ProspectusDoc> = corpus.docs().cloned().collect();
    loop {
        let mut fi_docs: HashMap<&str, usize> = HashMap::new();
        for doc in &docs {
            let fis: HashSet<&str> = doc.tokens.iter().map(|t| t.fi.id.as_str()).collect();
            for fi in fis {
                *fi_docs.entry(fi).or_default() += 1;
            }
        }
        let rare: HashSet<String> = fi_docs
            .into_iter()
            .filter(|&(_, n)| n < min_fi_docs)
            .map(|(fi, _)| fi.to_string())
            .collect();

        let before_docs = docs.len();
        let mut removed_tokens = false;
        for doc in &mut docs {
            let n = doc.tokens.len();
            doc.tokens.retain(|t| !rare.contains(&t.fi.id));
            removed_tokens |= doc.tokens.len() != n;
        }
        docs.retain(|d| !d.tokens.is_empty() && d.distinct_pairs() >= min_pairs);

        if !removed_tokens && docs.len() == before_docs {
            break;
        }
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            " after filtering (min_fi_docs={min_fi_docs}, min_pairs={min_pairs})"
        )));
    }
    Ok(TimeSlicedCorpus::from_docs(docs))
}

/// Multiplies the counts of tokens whose role is in `roles`.
pub fn weight_tokens(corpus: &TimeSlicedCorpus, roles: &[Role], multiplier: u32) -> Result<TimeSlicedCorpus> {
    if multiplier == 0 {
        return Err(Error::invalid("token weight multiplier must be at least 1"));
    }
    let mut out = corpus.clone();
    for slice in &mut out.slices {
        for doc in &mut slice.docs {
            for tok in &mut doc.tokens {
                if roles.contains(&tok.role) {
                    tok.count *= multiplier;
                }
            }
        }
    }
    Ok(out)
}

/// Default weighting: issuer and originator tokens count double.
pub fn default_weighted_roles() -> Vec<Role> {
    vec![Role::issuer(), Role::originator()]
}

pub fn to_records(corpus: &TimeSlicedCorpus) -> Vec<DocumentRecord> {
    corpus
        .docs()
        .map(|d| DocumentRecord {
            id: d.id.clone(),
            year: d.year,
            pairs: d
                .tokens
                .iter()
                .map(|t| PairRecord {
                    role: t.role.as_str().to_string(),
                    fi: t.fi.id.clone(),
                    fi_name: (t.fi.display_name != t.fi.id).then(|| t.fi.display_name.clone()),
                    count: t.count,
                })
                .collect(),
            security_ids: d.security_ids.clone(),
        })
        .collect()
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<DocumentRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading line {}", lineno + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(records: &[DocumentRecord], mut writer: W) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n").map_err(|e| Error::io("writing corpus", e))?;
    }
    Ok(())
}

pub fn write_vocabulary_csv<W: Write>(corpus: &TimeSlicedCorpus, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "role", "fi", "doc_frequency"])?;
    let df = corpus.doc_frequency();
    for (i, term) in corpus.vocabulary().terms().iter().enumerate() {
        w.write_record([i.to_string(), term.role.to_string(), term.fi.clone(), df[i].to_string()])?;
    }
    w.flush().map_err(|e| Error::io("writing vocabulary", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, year: i32, pairs: &[(&str, &str)]) -> DocumentRecord {
        DocumentRecord {
            id: id.into(),
            year,
            pairs: pairs
                .iter()
                .map(|(r, f)| PairRecord {
                    role: r.to_string(),
                    fi: f.to_string(),
                    fi_name: None,
                    count: 1,
                })
                .collect(),
            security_ids: vec![],
        }
    }

    #[test]
    fn singleton_corpus() {
        let c = build_corpus(vec![rec("d1", 2002, &[("issuer", "X")])], &CorpusConfig::default()).unwrap();
        assert_eq!(c.slices().len(), 1);
        assert_eq!(c.vocabulary().len(), 1);
    }

    #[test]
    fn sparse_years_are_not_filled() {
        let c = build_corpus(
            vec![rec("a", 2004, &[("issuer", "X")]), rec("b", 2002, &[("issuer", "Y")])],
            &CorpusConfig::default(),
        )
        .unwrap();
        assert_eq!(c.years(), vec![2002, 2004]);
    }

    #[test]
    fn figure_three_record() {
        let pairs = [
            ("depositor", "Wachovia"),
            ("issuer", "Wachovia"),
            ("seller", "Wachovia"),
            ("sponsor", "Wachovia"),
            ("originator", "National City"),
            ("servicer", "National City"),
        ];
        let c = build_corpus(vec![rec("fig3", 2006, &pairs)], &CorpusConfig::default()).unwrap();
        assert_eq!(c.num_docs(), 1);
        assert_eq!(c.vocabulary().len(), 6);
        assert!(c.vocabulary().index_of(&TermPair::new("issuer", "Wachovia")).is_some());
        assert!(c.vocabulary().index_of(&TermPair::new("originator", "National City")).is_some());
    }

    #[test]
    fn rejects_duplicate_ids_and_bad_years() {
        let err = build_corpus(
            vec![rec("a", 2002, &[("issuer", "X")]), rec("a", 2003, &[("issuer", "X")])],
            &CorpusConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateDocument(ref id) if id == "a"));

        let err = build_corpus(vec![rec("a", 2008, &[("issuer", "X")])], &CorpusConfig::default()).unwrap_err();
        assert!(matches!(err, Error::YearOutOfRange { year: 2008, .. }));
    }

    #[test]
    fn repeated_pairs_accumulate() {
        let c = build_corpus(
            vec![rec("a", 2002, &[("Issuer", "X"), ("issuer", "X")])],
            &CorpusConfig::default(),
        )
        .unwrap();
        let doc = c.docs().next().unwrap();
        assert_eq!(doc.tokens.len(), 1);
        assert_eq!(doc.tokens[0].count, 2);
    }

    fn fi_filter_fixture() -> TimeSlicedCorpus {
        // "rare" appears in 19 documents, every other institution in all 25.
        let mut recs = Vec::new();
        for i in 0..25 {
            let mut pairs = vec![
                ("issuer", "A"),
                ("originator", "B"),
                ("servicer", "C"),
                ("trustee", "D"),
                ("depositor", "E"),
            ];
            if i < 19 {
                pairs.push(("seller", "rare"));
            }
            recs.push(rec(&format!("d{i:02}"), 2002 + (i % 3), &pairs));
        }
        build_corpus(recs, &CorpusConfig::default()).unwrap()
    }

    #[test]
    fn institution_below_twenty_documents_is_removed() {
        let c = fi_filter_fixture();
        let f = filter_corpus(&c, 20, 5).unwrap();
        assert!(f.docs().all(|d| d.tokens.iter().all(|t| t.fi.id != "rare")));
        assert_eq!(f.num_docs(), 25);
        assert_eq!(f.vocabulary().len(), 5);
    }

    #[test]
    fn thin_document_is_dropped() {
        let mut recs: Vec<DocumentRecord> = (0..20)
            .map(|i| {
                rec(
                    &format!("d{i}"),
                    2003,
                    &[("issuer", "A"), ("originator", "B"), ("servicer", "C"), ("trustee", "D"), ("seller", "E")],
                )
            })
            .collect();
        recs.push(rec("thin", 2003, &[("issuer", "A"), ("originator", "B"), ("servicer", "C"), ("trustee", "D")]));
        let c = build_corpus(recs, &CorpusConfig::default()).unwrap();
        let f = filter_corpus(&c, 20, 5).unwrap();
        assert!(f.docs().all(|d| d.id != "thin"));
        assert_eq!(f.num_docs(), 20);
    }

    #[test]
    fn zero_thresholds_are_identity() {
        let c = fi_filter_fixture();
        assert_eq!(filter_corpus(&c, 0, 0).unwrap(), c);
    }

    #[test]
    fn filtering_everything_is_an_error() {
        let c = fi_filter_fixture();
        assert!(matches!(filter_corpus(&c, 100, 5), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn weighting_doubles_listed_roles_only() {
        let c = build_corpus(
            vec![DocumentRecord {
                id: "a".into(),
                year: 2002,
                pairs: vec![
                    PairRecord { role: "issuer".into(), fi: "X".into(), fi_name: None, count: 1 },
                    PairRecord { role: "servicer".into(), fi: "Y".into(), fi_name: None, count: 3 },
                ],
                security_ids: vec![],
            }],
            &CorpusConfig::default(),
        )
        .unwrap();
        let w = weight_tokens(&c, &default_weighted_roles(), 2).unwrap();
        let doc = w.docs().next().unwrap();
        let count = |role: &str| doc.tokens.iter().find(|t| t.role.as_str() == role).unwrap().count;
        assert_eq!(count("issuer"), 2);
        assert_eq!(count("servicer"), 3);
        assert_eq!(weight_tokens(&c, &default_weighted_roles(), 1).unwrap(), c);
        assert!(weight_tokens(&c, &default_weighted_roles(), 0).is_err());
    }

    #[test]
    fn vocabulary_csv_has_doc_frequency() {
        let c = fi_filter_fixture();
        let mut buf = Vec::new();
        write_vocabulary_csv(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("index,role,fi,doc_frequency\n"));
        assert!(text.contains(",seller,rare,19\n"));
    }
}
