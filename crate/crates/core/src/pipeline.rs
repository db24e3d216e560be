//! Stage orchestration over a directory of artifacts.
//!
//! Every stage reads named files from the output directory (or from configured input
//! overrides) and writes its own files there. A missing input surfaces as
//! [`Error::MissingArtifact`] naming the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_corpus, default_weighted_roles, filter_corpus, read_jsonl, to_records, weight_tokens, write_jsonl,
    write_vocabulary_csv, CorpusConfig, DocumentRecord, PairRecord, Role, TimeSlicedCorpus,
};
use crate::error::{Error, Result};
use crate::extraction::{
    extract_with_agreement, write_diagnostics_csv, write_extractions_jsonl, CapitalizedPhraseExtractor, DictNerExtractor,
    KeywordMap, RootSuffixDictionary,
};
use crate::features::{
    assemble_matrix, prospectus_features_by_id, read_securities_csv, topic_column, write_securities_csv, ColumnKind,
    FeatureContext, FeatureMatrix, FeatureTier, FlagRegistry, SecurityRecord,
};
use crate::lasso::{
    classify, cv_select, metrics, read_coefficient_table, write_coefficient_table, CvResult, LassoConfig, LassoFit,
    Metrics,
};
use crate::performance::{
    label_security, read_labels_csv, read_payments_csv, summarize_rates, topic_performance, write_labels_csv,
    write_payments_csv, ClassThresholds, GroupKey, LabeledSecurity, PerfThresholds, PerformanceLabel, RateRow,
    SecurityClass,
};
use crate::synth::{
    generate_all, read_text_documents, render_documents, synthetic_dictionary, synthetic_evidence, write_text_documents,
    SynthConfig,
};
use crate::topics::{
    classify_dynamics, dominant_topic, export_sankey, fit_dtm_from, fit_lda, load_model, save_model, write_sankey_csv,
    DtmFit, DynamicsLabel, TopicArtifact, TopicModel, TopicModelConfig, DEFAULT_ALIGN_THRESHOLD,
    DEFAULT_DRIFT_THRESHOLD, DEFAULT_STRONG_THRESHOLD, DTM_FAST_CHAIN_VAR,
};
use crate::toxicity::{
    compare_signs, institution_labels, label_community, prominent_institutions, read_evidence_csv,
    supply_chain_summary, write_evidence_csv, write_toxicity_report, CommunityToxicity, ToxicityReportRow,
    ToxicityRules,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Extract,
    Corpus,
    Topics,
    Label,
    Features,
    Fit,
    Toxicity,
    Report,
    All,
}

impl Stage {
    /// Execution order of `all`.
    pub const SEQUENCE: [Stage; 9] = [
        Stage::Synth,
        Stage::Extract,
        Stage::Corpus,
        Stage::Topics,
        Stage::Label,
        Stage::Features,
        Stage::Fit,
        Stage::Toxicity,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Extract => "extract",
            Stage::Corpus => "corpus",
            Stage::Topics => "topics",
            Stage::Label => "label",
            Stage::Features => "features",
            Stage::Fit => "fit",
            Stage::Toxicity => "toxicity",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::SEQUENCE
            .iter()
            .chain(std::iter::once(&Stage::All))
            .find(|st| st.as_str() == s.trim().to_ascii_lowercase())
            .copied()
            .ok_or_else(|| Error::config("stage", format!("unknown stage `{s}`")))
    }
}

/// Optional replacements for files that stages otherwise read from the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub documents: Option<PathBuf>,
    pub roots: Option<PathBuf>,
    pub suffixes: Option<PathBuf>,
    pub securities: Option<PathBuf>,
    pub payments: Option<PathBuf>,
    pub evidence: Option<PathBuf>,
    pub flag_registry: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub year_min: i32,
    pub year_max: i32,
    /// Institutions named in fewer prospectuses are dropped.
    pub min_fi_docs: usize,
    /// Prospectuses with fewer distinct pairs are dropped.
    pub min_pairs: usize,
    pub weighted_roles: Vec<String>,
    pub weight_multiplier: u32,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            year_min: 2002,
            year_max: 2007,
            min_fi_docs: 20,
            min_pairs: 5,
            weighted_roles: default_weighted_roles().iter().map(|r| r.as_str().to_string()).collect(),
            weight_multiplier: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsOptions {
    pub fast_chain_var: f64,
    pub align_threshold: f64,
    pub drift_threshold: f64,
    pub strong_threshold: f64,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        DynamicsOptions {
            fast_chain_var: DTM_FAST_CHAIN_VAR,
            align_threshold: DEFAULT_ALIGN_THRESHOLD,
            drift_threshold: DEFAULT_DRIFT_THRESHOLD,
            strong_threshold: DEFAULT_STRONG_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub baseline_year: i32,
    pub principal_unit: f64,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            baseline_year: 2005,
            principal_unit: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub decimals: usize,
    /// Pairs per year in each Sankey edge list.
    pub sankey_top_n: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            decimals: 3,
            sankey_top_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Propagated to the generator, the topic models and the fold assignment.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub inputs: InputPaths,
    pub synth: SynthConfig,
    pub corpus: CorpusOptions,
    pub topics: TopicModelConfig,
    pub dynamics: DynamicsOptions,
    pub features: FeatureOptions,
    pub lasso: LassoConfig,
    pub thresholds: PerfThresholds,
    pub toxicity: ToxicityRules,
    pub report: ReportOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: PathBuf::from("out"),
            inputs: InputPaths::default(),
            synth: SynthConfig::default(),
            corpus: CorpusOptions::default(),
            topics: TopicModelConfig {
                k: 10,
                ..TopicModelConfig::default()
            },
            dynamics: DynamicsOptions::default(),
            features: FeatureOptions::default(),
            lasso: LassoConfig::default(),
            thresholds: PerfThresholds::default(),
            toxicity: ToxicityRules::default(),
            report: ReportOptions::default(),
        }
    }
}

fn prefixed<T>(prefix: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    })
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| {
            let reason = e.message().to_string();
            let field = e
                .span()
                .map(|sp| {
                    let line = s[..sp.start].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "config".into());
            Error::config(field, reason)
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|_| Error::config("--config", format!("cannot read {}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Copies the top-level seed into every stochastic component.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.topics.seed = self.seed;
        self.lasso.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        self.synth.validate()?;
        prefixed("topics", self.topics.validate())?;
        prefixed("lasso", self.lasso.validate())?;
        for (name, t) in [
            ("thresholds.class_a", self.thresholds.class_a),
            ("thresholds.class_m", self.thresholds.class_m),
            ("thresholds.class_b", self.thresholds.class_b),
        ] {
            prefixed(name, ClassThresholds::new(t.me_max_bps, t.fe_min_bps).map(|_| ()))
                .map_err(|e| match e {
                    Error::Config { .. } => e,
                    other => Error::config(name, other.to_string()),
                })?;
        }
        if self.corpus.year_min > self.corpus.year_max {
            return Err(Error::config("corpus.year_min", "must not exceed year_max"));
        }
        if self.corpus.weight_multiplier == 0 {
            return Err(Error::config("corpus.weight_multiplier", "must be at least 1"));
        }
        let years = self.corpus.year_min..=self.corpus.year_max;
        if !years.contains(&self.features.baseline_year) {
            return Err(Error::config("features.baseline_year", "must lie inside the corpus year range"));
        }
        if !(self.features.principal_unit > 0.0) {
            return Err(Error::config("features.principal_unit", "must be positive"));
        }
        let d = &self.dynamics;
        if !(d.fast_chain_var > 0.0) {
            return Err(Error::config("dynamics.fast_chain_var", "must be positive"));
        }
        for (name, v) in [
            ("dynamics.align_threshold", d.align_threshold),
            ("dynamics.drift_threshold", d.drift_threshold),
            ("dynamics.strong_threshold", d.strong_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if self.toxicity.top_n == 0 {
            return Err(Error::config("toxicity.top_n", "must be at least 1"));
        }
        if self.report.sankey_top_n == 0 {
            return Err(Error::config("report.sankey_top_n", "must be at least 1"));
        }
        Ok(())
    }
}

/// One executed stage in the run manifest. Paths are relative to the output directory
/// when they lie inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_version: u32,
    pub stages: Vec<StageRecord>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Fixed artifact names.
pub mod artifacts {
    pub const DOCUMENTS: &str = "documents.jsonl";
    pub const ROOTS: &str = "dictionary/roots.csv";
    pub const SUFFIXES: &str = "dictionary/suffixes.txt";
    pub const SECURITIES: &str = "securities.csv";
    pub const PAYMENTS: &str = "payments.csv";
    pub const TRUTH: &str = "truth.json";
    pub const EVIDENCE: &str = "evidence.csv";
    pub const GENERATED_CORPUS: &str = "generated_corpus.jsonl";
    pub const EXTRACTIONS: &str = "extract/extractions.jsonl";
    pub const EXTRACTION_DIAGNOSTICS: &str = "extract/diagnostics.csv";
    pub const EXTRACTED_RECORDS: &str = "extract/records.jsonl";
    pub const CORPUS: &str = "corpus/corpus.jsonl";
    pub const VOCABULARY: &str = "corpus/vocabulary.csv";
    pub const LDA: &str = "topics/lda.json";
    pub const DTM: &str = "topics/dtm.json";
    pub const DTM_FAST: &str = "topics/dtm_fast.json";
    pub const DOC_TOPICS: &str = "topics/doc_topics.csv";
    pub const DYNAMICS: &str = "topics/dynamics.csv";
    pub const TOP_TERMS: &str = "topics/top_terms.csv";
    pub const LABELS: &str = "labels/labels.csv";
    pub const METRICS: &str = "fit/metrics.csv";
    pub const COMMUNITIES: &str = "toxicity/communities.csv";
    pub const SIGNS: &str = "toxicity/signs.csv";
}

pub fn features_csv(tier: FeatureTier) -> String {
    format!("features/{}.csv", tier_name(tier))
}

pub fn features_manifest(tier: FeatureTier) -> String {
    format!("features/{}.json", tier_name(tier))
}

pub fn coefficients_csv(tier: FeatureTier) -> String {
    format!("fit/{}_coefficients.csv", tier_name(tier))
}

pub fn fits_json(tier: FeatureTier) -> String {
    format!("fit/{}_fits.json", tier_name(tier))
}

pub fn tier_name(tier: FeatureTier) -> &'static str {
    match tier {
        FeatureTier::Security => "security",
        FeatureTier::Prospectus => "prospectus",
        FeatureTier::Comprehensive => "comprehensive",
    }
}

const TIERS: [FeatureTier; 3] = [FeatureTier::Security, FeatureTier::Prospectus, FeatureTier::Comprehensive];

/// Both selected models of one tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierFits {
    pub tier: FeatureTier,
    pub fe: LassoFit,
    pub fne: LassoFit,
    pub fe_lambda_index: usize,
    pub fne_lambda_index: usize,
}

/// Topic mixture of one prospectus as stored by the topics stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DocTopicRow {
    pub doc_id: String,
    pub year: i32,
    pub dominant: usize,
    pub weight: f64,
    pub strong: bool,
    pub weights: Vec<f64>,
}

pub fn write_doc_topics<W: Write>(rows: &[DocTopicRow], writer: W) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.weights.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["doc_id".to_string(), "year".into(), "dominant_topic".into(), "weight".into(), "strong".into()];
    header.extend((0..k).map(topic_column));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.doc_id.clone(),
            r.year.to_string(),
            (r.dominant + 1).to_string(),
            r.weight.to_string(),
            (r.strong as u8).to_string(),
        ];
        rec.extend(r.weights.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("writing doc topics", e))?;
    Ok(())
}

pub fn read_doc_topics<R: std::io::Read>(reader: R) -> Result<Vec<DocTopicRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    let bad = |what: &str| Error::invalid(format!("doc topics: bad {what}"));
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 5 {
            return Err(bad("row width"));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad("number"));
        let dominant: usize = rec[2].parse().map_err(|_| bad("dominant topic"))?;
        out.push(DocTopicRow {
            doc_id: rec[0].to_string(),
            year: rec[1].parse().map_err(|_| bad("year"))?,
            dominant: dominant.checked_sub(1).ok_or_else(|| bad("dominant topic"))?,
            weight: num(3)?,
            strong: &rec[4] == "1",
            weights: (5..rec.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Executes stages against one configuration and records what each read and wrote.
pub struct Runner {
    cfg: PipelineConfig,
    out: PathBuf,
    records: Vec<StageRecord>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Runner {
    pub fn new(mut cfg: PipelineConfig) -> Result<Self> {
        cfg.propagate_seed();
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
        Ok(Runner {
            cfg,
            out,
            records: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            seed: self.cfg.seed,
            config_version: self.cfg.version,
            stages: self.records.clone(),
        }
    }

    pub fn run(&mut self, stage: Stage) -> Result<RunManifest> {
        let stages: Vec<Stage> = if stage == Stage::All { Stage::SEQUENCE.to_vec() } else { vec![stage] };
        let result = stages.into_iter().try_for_each(|s| self.run_one(s));
        self.write_manifest()?;
        result.map(|_| self.manifest())
    }

    fn run_one(&mut self, stage: Stage) -> Result<()> {
        log::info!("stage {stage}");
        let t = Instant::now();
        self.inputs.clear();
        self.outputs.clear();
        let r = match stage {
            Stage::Synth => self.synth(),
            Stage::Extract => self.extract(),
            Stage::Corpus => self.corpus(),
            Stage::Topics => self.topics(),
            Stage::Label => self.label(),
            Stage::Features => self.features(),
            Stage::Fit => self.fit(),
            Stage::Toxicity => self.toxicity(),
            Stage::Report => self.report(),
            Stage::All => unreachable!("expanded by run"),
        };
        self.records.push(StageRecord {
            stage,
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            duration_ms: t.elapsed().as_millis(),
        });
        r
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.out.join(MANIFEST_FILE);
        let f = File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &self.manifest())?;
        Ok(())
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).display().to_string()
    }

    /// Resolves an input, preferring an override, and fails if it does not exist.
    fn input(&mut self, name: &str, over: Option<PathBuf>) -> Result<PathBuf> {
        let p = over.unwrap_or_else(|| self.out.join(name));
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        self.inputs.push(self.display(&p));
        Ok(p)
    }

    fn open(&mut self, name: &str, over: Option<PathBuf>) -> Result<BufReader<File>> {
        let p = self.input(name, over)?;
        let f = File::open(&p).map_err(|e| Error::io(format!("opening {}", p.display()), e))?;
        Ok(BufReader::new(f))
    }

    fn output_path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        self.outputs.push(name.to_string());
        Ok(p)
    }

    fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let p = self.output_path(name)?;
        let file = File::create(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| Error::io(format!("writing {}", p.display()), e))
    }

    fn synth(&mut self) -> Result<()> {
        let cfg = self.cfg.synth.clone();
        let bundle = generate_all(&cfg)?;
        let docs = render_documents(&bundle.records, cfg.seed);
        let dict = synthetic_dictionary(&bundle.truth)?;
        self.write_with(artifacts::DOCUMENTS, |w| write_text_documents(&docs, w))?;
        self.write_with(artifacts::ROOTS, |w| dict.write_roots_csv(w))?;
        self.write_with(artifacts::SUFFIXES, |w| dict.write_suffixes(w))?;
        self.write_with(artifacts::SECURITIES, |w| write_securities_csv(&bundle.securities, w))?;
        self.write_with(artifacts::PAYMENTS, |w| write_payments_csv(&bundle.payments, w))?;
        self.write_with(artifacts::TRUTH, |w| bundle.truth.write_json(w))?;
        self.write_with(artifacts::EVIDENCE, |w| write_evidence_csv(&synthetic_evidence(&bundle.truth), w))?;
        self.write_with(artifacts::GENERATED_CORPUS, |w| write_jsonl(&bundle.records, w))?;
        Ok(())
    }

    fn extract(&mut self) -> Result<()> {
        let docs = read_text_documents(self.open(artifacts::DOCUMENTS, self.cfg.inputs.documents.clone())?)?;
        let roots = self.open(artifacts::ROOTS, self.cfg.inputs.roots.clone())?;
        let suffixes = self.open(artifacts::SUFFIXES, self.cfg.inputs.suffixes.clone())?;
        let dict = RootSuffixDictionary::from_readers(roots, suffixes)?;
        let kw = KeywordMap::default();
        let ner = DictNerExtractor { dict: &dict, keywords: &kw };
        let cap = CapitalizedPhraseExtractor { dict: &dict, keywords: &kw };
        let extractions: Vec<_> = docs
            .par_iter()
            .map(|d| extract_with_agreement(&ner, &cap, &d.id, &d.text))
            .collect();
        let mut records = Vec::new();
        for (doc, ex) in docs.iter().zip(&extractions) {
            let mut counts: BTreeMap<(String, String), u32> = BTreeMap::new();
            for p in &ex.pairs {
                *counts.entry((p.role.as_str().to_string(), p.standardized.id.clone())).or_default() += 1;
            }
            if counts.is_empty() {
                log::warn!("document {}: no role-institution pairs extracted", doc.id);
                continue;
            }
            records.push(DocumentRecord {
                id: doc.id.clone(),
                year: doc.year,
                pairs: counts
                    .into_iter()
                    .map(|((role, fi), count)| PairRecord {
                        fi_name: dict.institution(&fi).map(|i| i.display_name.clone()),
                        role,
                        fi,
                        count,
                    })
                    .collect(),
                security_ids: doc.security_ids.clone(),
            });
        }
        self.write_with(artifacts::EXTRACTIONS, |w| write_extractions_jsonl(&extractions, w))?;
        self.write_with(artifacts::EXTRACTION_DIAGNOSTICS, |w| write_diagnostics_csv(&extractions, w))?;
        self.write_with(artifacts::EXTRACTED_RECORDS, |w| write_jsonl(&records, w))?;
        Ok(())
    }

    fn corpus_from(&self, records: Vec<DocumentRecord>) -> Result<TimeSlicedCorpus> {
        let mut cc = CorpusConfig {
            year_min: self.cfg.corpus.year_min,
            year_max: self.cfg.corpus.year_max,
            ..CorpusConfig::default()
        };
        for r in &records {
            for p in &r.pairs {
                cc.roles.register(Role::new(&p.role));
            }
        }
        build_corpus(records, &cc)
    }

    fn corpus(&mut self) -> Result<()> {
        let records = read_jsonl(self.open(artifacts::EXTRACTED_RECORDS, None)?)?;
        let corpus = self.corpus_from(records)?;
        let o = &self.cfg.corpus;
        let filtered = filter_corpus(&corpus, o.min_fi_docs, o.min_pairs)?;
        log::info!("corpus: {} of {} prospectuses kept", filtered.num_docs(), corpus.num_docs());
        let roles: Vec<Role> = o.weighted_roles.iter().map(|r| Role::new(r)).collect();
        let weighted = weight_tokens(&filtered, &roles, o.weight_multiplier)?;
        self.write_with(artifacts::CORPUS, |w| write_jsonl(&to_records(&weighted), w))?;
        self.write_with(artifacts::VOCABULARY, |w| write_vocabulary_csv(&weighted, w))?;
        Ok(())
    }

    fn load_corpus(&mut self) -> Result<TimeSlicedCorpus> {
        let records = read_jsonl(self.open(artifacts::CORPUS, None)?)?;
        self.corpus_from(records)
    }

    fn topics(&mut self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let tc = self.cfg.topics.clone();
        let d = self.cfg.dynamics.clone();
        let lda = fit_lda(&corpus, &tc)?;
        let (slow, fast) = rayon::join(
            || fit_dtm_from(&corpus, &tc, &lda),
            || fit_dtm_from(&corpus, &tc.clone().with_chain_var(d.fast_chain_var), &lda),
        );
        let (slow, fast) = (slow?, fast?);
        for (name, trace) in [("lda", &lda.log_likelihood_trace), ("dtm", &slow.bound_trace), ("dtm_fast", &fast.bound_trace)] {
            if trace.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("{name} bound is not finite")));
            }
        }
        let dynamics = classify_dynamics(&fast, &lda, &slow, d.align_threshold, d.drift_threshold)?;
        let rows: Vec<DocTopicRow> = slow
            .doc_ids
            .iter()
            .zip(&slow.doc_years)
            .zip(&slow.doc_topic)
            .map(|((id, &year), w)| {
                let dom = dominant_topic(w, d.strong_threshold);
                DocTopicRow {
                    doc_id: id.clone(),
                    year,
                    dominant: dom.topic,
                    weight: dom.weight,
                    strong: dom.strong,
                    weights: w.clone(),
                }
            })
            .collect();
        for (name, art) in [
            (artifacts::LDA, TopicArtifact::Lda(lda)),
            (artifacts::DTM, TopicArtifact::Dtm(slow.clone())),
            (artifacts::DTM_FAST, TopicArtifact::Dtm(fast)),
        ] {
            let p = self.output_path(name)?;
            save_model(&p, &art)?;
        }
        self.write_with(artifacts::DOC_TOPICS, |w| write_doc_topics(&rows, w))?;
        self.write_with(artifacts::DYNAMICS, |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["topic", "type", "alignment", "drift"])?;
            for t in &dynamics {
                c.write_record([topic_column(t.topic), dynamics_name(t.label).into(), t.alignment.to_string(), t.drift.to_string()])?;
            }
            c.flush().map_err(|e| Error::io("writing dynamics", e))
        })?;
        let n = self.cfg.toxicity.top_n;
        self.write_with(artifacts::TOP_TERMS, |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["topic", "rank", "role", "fi", "probability"])?;
            for k in 0..slow.num_topics() {
                let avg = slow.time_averaged(k);
                let mut idx: Vec<usize> = (0..avg.len()).collect();
                idx.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
                for (rank, &v) in idx.iter().take(n).enumerate() {
                    let term = &slow.vocabulary.terms()[v];
                    c.write_record([
                        topic_column(k),
                        (rank + 1).to_string(),
                        term.role.as_str().to_string(),
                        term.fi.clone(),
                        avg[v].to_string(),
                    ])?;
                }
            }
            c.flush().map_err(|e| Error::io("writing top terms", e))
        })?;
        Ok(())
    }

    fn load_securities(&mut self) -> Result<Vec<SecurityRecord>> {
        let over = self.cfg.inputs.securities.clone();
        read_securities_csv(self.open(artifacts::SECURITIES, over)?)
    }

    fn label(&mut self) -> Result<()> {
        let securities = self.load_securities()?;
        let over = self.cfg.inputs.payments.clone();
        let payments = read_payments_csv(self.open(artifacts::PAYMENTS, over)?)?;
        let years: BTreeMap<&str, i32> = securities.iter().map(|s| (s.id.as_str(), s.year)).collect();
        let mut labels = Vec::with_capacity(payments.len());
        let mut labeled = Vec::with_capacity(payments.len());
        for p in &payments {
            let Some(&year) = years.get(p.security_id.as_str()) else {
                return Err(Error::invalid(format!("payment for unknown security `{}`", p.security_id)));
            };
            let label = label_security(p.class, &p.summary(), &self.cfg.thresholds)?;
            labels.push((p.security_id.clone(), label));
            labeled.push(LabeledSecurity {
                security_id: p.security_id.clone(),
                class: p.class,
                year,
                label,
            });
        }
        self.write_with(artifacts::LABELS, |w| write_labels_csv(&labels, w))?;
        for (name, keys) in rate_groupings() {
            let rows = summarize_rates(&labeled, keys)?;
            self.write_with(&format!("labels/rates_{name}.csv"), |w| write_rates(&rows, None, w))?;
        }
        Ok(())
    }

    fn feature_context(&mut self, k: usize) -> Result<FeatureContext> {
        let registry = match self.cfg.inputs.flag_registry.clone() {
            Some(p) => {
                let r = self.open("", Some(p))?;
                FlagRegistry::from_lines(r)?
            }
            None => FlagRegistry::default(),
        };
        Ok(FeatureContext {
            registry,
            years: (self.cfg.corpus.year_min..=self.cfg.corpus.year_max).collect(),
            baseline_year: self.cfg.features.baseline_year,
            principal_unit: self.cfg.features.principal_unit,
            k,
        })
    }

    fn load_doc_topics(&mut self) -> Result<Vec<DocTopicRow>> {
        read_doc_topics(self.open(artifacts::DOC_TOPICS, None)?)
    }

    fn features(&mut self) -> Result<()> {
        let securities = self.load_securities()?;
        let doc_topics = self.load_doc_topics()?;
        let k = doc_topics.first().map_or(self.cfg.topics.k, |r| r.weights.len());
        let ctx = self.feature_context(k)?;
        let prospectus = prospectus_features_by_id(&securities, ctx.principal_unit)?;
        let weights: BTreeMap<String, Vec<f64>> = doc_topics.into_iter().map(|r| (r.doc_id, r.weights)).collect();
        for tier in TIERS {
            let rows: Vec<SecurityRecord> = if tier == FeatureTier::Comprehensive {
                let kept: Vec<SecurityRecord> =
                    securities.iter().filter(|s| weights.contains_key(&s.prospectus_id)).cloned().collect();
                if kept.len() < securities.len() {
                    log::warn!(
                        "comprehensive tier: {} securities lack a topic assignment and are left out",
                        securities.len() - kept.len()
                    );
                }
                kept
            } else {
                securities.clone()
            };
            let m = assemble_matrix(&rows, &prospectus, &weights, tier, &ctx)?;
            self.write_with(&features_csv(tier), |w| m.write_csv(w))?;
            self.write_with(&features_manifest(tier), |w| m.write_manifest(w))?;
        }
        Ok(())
    }

    fn load_labels(&mut self) -> Result<BTreeMap<String, PerformanceLabel>> {
        Ok(read_labels_csv(self.open(artifacts::LABELS, None)?)?.into_iter().collect())
    }

    fn load_matrix(&mut self, tier: FeatureTier) -> Result<FeatureMatrix> {
        let csv = self.open(&features_csv(tier), None)?;
        let manifest = self.open(&features_manifest(tier), None)?;
        FeatureMatrix::read(csv, manifest)
    }

    fn fit(&mut self) -> Result<()> {
        let matrices = TIERS.iter().map(|&t| self.load_matrix(t)).collect::<Result<Vec<_>>>()?;
        let labels = self.load_labels()?;
        let mut metric_rows: Vec<(FeatureTier, &'static str, String, usize, Metrics)> = Vec::new();
        for (tier, m) in TIERS.into_iter().zip(matrices) {
            let keep: Vec<usize> = (0..m.nrows()).filter(|&i| labels.contains_key(&m.row_ids[i])).collect();
            if keep.len() < m.nrows() {
                log::warn!("{} tier: {} rows without labels are left out", tier_name(tier), m.nrows() - keep.len());
            }
            let x = m.values.select(ndarray::Axis(0), &keep);
            let ids: Vec<&String> = keep.iter().map(|&i| &m.row_ids[i]).collect();
            let groups: Vec<String> = keep.iter().map(|&i| m.groups[i].clone()).collect();
            let y_fe: Vec<f64> = ids.iter().map(|id| labels[*id].fe as u8 as f64).collect();
            let y_fne: Vec<f64> = ids.iter().map(|id| labels[*id].fne as u8 as f64).collect();
            let standardize: Vec<bool> = m.columns.iter().map(|c| c.kind == ColumnKind::Continuous).collect();
            let names = m.column_names();
            let (fe, fne) = rayon::join(
                || cv_select(x.view(), &y_fe, &groups, &standardize, &names, &self.cfg.lasso),
                || cv_select(x.view(), &y_fne, &groups, &standardize, &names, &self.cfg.lasso),
            );
            let (fe, fne) = (fe?, fne?);
            for (name, r) in [("FE", &fe), ("FNE", &fne)] {
                if !r.fit.converged {
                    log::warn!("{} {name} fit did not converge", tier_name(tier));
                }
            }
            let classes: Vec<Option<SecurityClass>> = keep.iter().map(|&i| row_class(&m, i)).collect();
            for (outcome, r, y) in [("FE", &fe, &y_fe), ("FNE", &fne, &y_fne)] {
                let truth: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
                let pred = classify(&r.oof_prob);
                metric_rows.push((tier, outcome, "all".into(), truth.len(), metrics(&truth, &pred)?));
                for c in SecurityClass::ALL {
                    let idx: Vec<usize> = (0..truth.len()).filter(|&i| classes[i] == Some(c)).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let t: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
                    let p: Vec<bool> = idx.iter().map(|&i| pred[i]).collect();
                    metric_rows.push((tier, outcome, c.as_str().into(), idx.len(), metrics(&t, &p)?));
                }
            }
            let fits = TierFits {
                tier,
                fe: fe.fit.clone(),
                fne: fne.fit.clone(),
                fe_lambda_index: fe.chosen_index,
                fne_lambda_index: fne.chosen_index,
            };
            self.write_with(&coefficients_csv(tier), |w| write_coefficient_table(&fits.fe, &fits.fne, None, w))?;
            self.write_with(&fits_json(tier), |w| Ok(serde_json::to_writer_pretty(w, &fits)?))?;
            self.write_with(&format!("fit/{}_cv.csv", tier_name(tier)), |w| write_cv(&fe, &fne, w))?;
            self.write_with(&format!("fit/{}_oof.csv", tier_name(tier)), |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["security_id", "fe", "fne", "fe_prob", "fne_prob"])?;
                for (i, id) in ids.iter().enumerate() {
                    c.write_record([
                        id.as_str(),
                        &y_fe[i].to_string(),
                        &y_fne[i].to_string(),
                        &fe.oof_prob[i].to_string(),
                        &fne.oof_prob[i].to_string(),
                    ])?;
                }
                c.flush().map_err(|e| Error::io("writing predictions", e))
            })?;
        }
        self.write_with(artifacts::METRICS, |w| write_metrics(&metric_rows, None, w))?;
        Ok(())
    }

    fn load_fits(&mut self, tier: FeatureTier) -> Result<TierFits> {
        Ok(serde_json::from_reader(self.open(&fits_json(tier), None)?)?)
    }

    fn load_dtm(&mut self) -> Result<DtmFit> {
        let p = self.input(artifacts::DTM, None)?;
        match load_model(&p)? {
            TopicArtifact::Dtm(d) => Ok(d),
            TopicArtifact::Lda(_) => Err(Error::invalid(format!("{} holds a static model", p.display()))),
        }
    }

    fn toxicity(&mut self) -> Result<()> {
        let dtm = self.load_dtm()?;
        let doc_topics = self.load_doc_topics()?;
        let over = self.cfg.inputs.evidence.clone();
        let evidence = read_evidence_csv(self.open(artifacts::EVIDENCE, over)?)?;
        let fits = self.load_fits(FeatureTier::Comprehensive)?;
        let dynamics = self.load_dynamics()?;
        let labels = institution_labels(&evidence);
        let rules = self.cfg.toxicity.clone();
        let mut sizes = vec![0usize; dtm.num_topics()];
        for r in &doc_topics {
            if let Some(s) = sizes.get_mut(r.dominant) {
                *s += 1;
            }
        }
        let mut communities: Vec<CommunityToxicity> = Vec::new();
        let mut chains = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            let prominent = prominent_institutions(&dtm, k, rules.top_n)?;
            communities.push(label_community(k, n, &prominent, &labels, &rules));
            chains.push(supply_chain_summary(&prominent));
        }
        let signs = compare_signs(&communities, &fits.fe, &fits.fne)?;
        let rows: Vec<ToxicityReportRow> = communities
            .iter()
            .zip(&signs)
            .zip(chains)
            .map(|((c, s), chain)| ToxicityReportRow {
                topic: c.topic,
                n_prospectuses: sizes[c.topic],
                dynamics: dynamics.get(&c.topic).copied(),
                supply_chain: chain,
                label: c.value,
                fe: s.fe,
                fne: s.fne,
            })
            .collect();
        self.write_with(artifacts::COMMUNITIES, |w| write_toxicity_report(&rows, w))?;
        self.write_with(artifacts::SIGNS, |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["topic", "toxic", "fe", "fne", "consistent", "evidence"])?;
            for (s, comm) in signs.iter().zip(&communities) {
                c.write_record([
                    topic_column(s.topic),
                    s.toxicity.to_string(),
                    s.fe.as_str().to_string(),
                    s.fne.as_str().to_string(),
                    if s.consistent { "yes" } else { "no" }.to_string(),
                    comm.evidence.join("; "),
                ])?;
            }
            c.flush().map_err(|e| Error::io("writing signs", e))
        })?;
        Ok(())
    }

    fn load_dynamics(&mut self) -> Result<BTreeMap<usize, DynamicsLabel>> {
        let mut rdr = csv::Reader::from_reader(self.open(artifacts::DYNAMICS, None)?);
        let mut out = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let topic = rec
                .get(0)
                .and_then(|t| t.strip_prefix("Topic"))
                .and_then(|t| t.parse::<usize>().ok())
                .and_then(|t| t.checked_sub(1))
                .ok_or_else(|| Error::invalid("dynamics: bad topic column"))?;
            let label = match rec.get(1) {
                Some("stable") => DynamicsLabel::Stable,
                Some("evolving") => DynamicsLabel::Evolving,
                Some("dynamic") => DynamicsLabel::Dynamic,
                _ => return Err(Error::invalid("dynamics: bad type column")),
            };
            out.insert(topic, label);
        }
        Ok(out)
    }

    fn report(&mut self) -> Result<()> {
        let decimals = self.cfg.report.decimals;
        for tier in TIERS {
            let fits = self.load_fits(tier)?;
            self.write_with(&format!("report/{}_coefficients.csv", tier_name(tier)), |w| {
                write_coefficient_table(&fits.fe, &fits.fne, Some(decimals), w)
            })?;
        }
        let metric_rows = read_metrics(self.open(artifacts::METRICS, None)?)?;
        self.write_with("report/metrics.csv", |w| write_metric_records(&metric_rows, Some(decimals), w))?;

        let securities = self.load_securities()?;
        let labels = self.load_labels()?;
        let labeled: Vec<LabeledSecurity> = securities
            .iter()
            .filter_map(|s| {
                labels.get(&s.id).map(|l| LabeledSecurity {
                    security_id: s.id.clone(),
                    class: s.class,
                    year: s.year,
                    label: *l,
                })
            })
            .collect();
        if !labeled.is_empty() {
            for (name, keys) in rate_groupings() {
                let rows = summarize_rates(&labeled, keys)?;
                self.write_with(&format!("report/rates_{name}.csv"), |w| write_rates(&rows, Some(decimals), w))?;
            }
        }

        let doc_topics = self.load_doc_topics()?;
        let dominant: BTreeMap<&str, usize> = doc_topics.iter().map(|r| (r.doc_id.as_str(), r.dominant)).collect();
        let (mut topics, mut labs, mut ssup) = (Vec::new(), Vec::new(), Vec::new());
        for s in &securities {
            if let (Some(&t), Some(l)) = (dominant.get(s.prospectus_id.as_str()), labels.get(&s.id)) {
                topics.push(t);
                labs.push(*l);
                ssup.push(s.is_ssup());
            }
        }
        let perf = topic_performance(&topics, &labs, &ssup)?;
        self.write_with("report/topic_performance.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["topic", "securities", "fe_pct", "ssup_pct"])?;
            for p in &perf {
                c.write_record([
                    topic_column(p.topic),
                    p.n.to_string(),
                    fmt_fixed(100.0 * p.fe_rate, Some(decimals)),
                    fmt_fixed(100.0 * p.ssup_fraction, Some(decimals)),
                ])?;
            }
            c.flush().map_err(|e| Error::io("writing topic performance", e))
        })?;

        let dtm = self.load_dtm()?;
        let n = self.cfg.report.sankey_top_n;
        for k in 0..dtm.num_topics() {
            let edges = export_sankey(&dtm, k, n)?;
            self.write_with(&format!("report/sankey/topic_{:02}.csv", k + 1), |w| write_sankey_csv(&edges, w))?;
        }
        Ok(())
    }
}

fn dynamics_name(l: DynamicsLabel) -> &'static str {
    match l {
        DynamicsLabel::Stable => "stable",
        DynamicsLabel::Evolving => "evolving",
        DynamicsLabel::Dynamic => "dynamic",
    }
}

fn row_class(m: &FeatureMatrix, i: usize) -> Option<SecurityClass> {
    let a = m.column_index("IsA").map(|j| m.values[[i, j]] > 0.5)?;
    let b = m.column_index("IsB").map(|j| m.values[[i, j]] > 0.5)?;
    Some(match (a, b) {
        (true, _) => SecurityClass::A,
        (_, true) => SecurityClass::B,
        _ => SecurityClass::M,
    })
}

fn rate_groupings() -> [(&'static str, &'static [GroupKey]); 4] {
    [
        ("overall", &[]),
        ("by_year", &[GroupKey::Year]),
        ("by_class", &[GroupKey::Class]),
        ("by_year_class", &[GroupKey::Year, GroupKey::Class]),
    ]
}

/// Full precision when `decimals` is `None`.
fn fmt_fixed(v: f64, decimals: Option<usize>) -> String {
    match decimals {
        Some(d) => format!("{v:.d$}"),
        None => v.to_string(),
    }
}

fn write_rates<W: Write>(rows: &[RateRow], decimals: Option<usize>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["year", "class", "n", "fe_rate", "fne_rate"])?;
    for r in rows {
        w.write_record([
            r.year.map_or(String::new(), |y| y.to_string()),
            r.class.map_or(String::new(), |c| c.to_string()),
            r.n.to_string(),
            fmt_fixed(r.fe_rate, decimals),
            fmt_fixed(r.fne_rate, decimals),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing rates", e))?;
    Ok(())
}

fn write_cv<W: Write>(fe: &CvResult, fne: &CvResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "fe_lambda", "fe_loss", "fne_lambda", "fne_loss"])?;
    for i in 0..fe.lambdas.len().max(fne.lambdas.len()) {
        let cell = |r: &CvResult, v: &dyn Fn(&CvResult) -> f64| if i < r.lambdas.len() { v(r).to_string() } else { String::new() };
        w.write_record([
            i.to_string(),
            cell(fe, &|r| r.lambdas[i]),
            cell(fe, &|r| r.mean_loss[i]),
            cell(fne, &|r| r.lambdas[i]),
            cell(fne, &|r| r.mean_loss[i]),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing cv path", e))?;
    Ok(())
}

/// A row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub tier: String,
    pub outcome: String,
    pub group: String,
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn write_metrics<W: Write>(
    rows: &[(FeatureTier, &'static str, String, usize, Metrics)],
    decimals: Option<usize>,
    writer: W,
) -> Result<()> {
    let recs: Vec<MetricRecord> = rows
        .iter()
        .map(|(tier, outcome, group, n, m)| MetricRecord {
            tier: tier_name(*tier).into(),
            outcome: (*outcome).into(),
            group: group.clone(),
            n: *n,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        })
        .collect();
    write_metric_records(&recs, decimals, writer)
}

fn write_metric_records<W: Write>(rows: &[MetricRecord], decimals: Option<usize>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tier", "outcome", "group", "n", "accuracy", "precision", "recall", "f1"])?;
    for r in rows {
        w.write_record([
            r.tier.clone(),
            r.outcome.clone(),
            r.group.clone(),
            r.n.to_string(),
            fmt_fixed(r.accuracy, decimals),
            fmt_fixed(r.precision, decimals),
            fmt_fixed(r.recall, decimals),
            fmt_fixed(r.f1, decimals),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing metrics", e))?;
    Ok(())
}

pub fn read_metrics<R: std::io::Read>(reader: R) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Reads a coefficient table written by the fit stage back into `(name, value)` lists.
pub fn read_coefficients(path: &Path) -> Result<crate::lasso::CoefficientTable> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_coefficient_table(BufReader::new(f))
}

/// Files under `dir` that hold numeric results, excluding timing-bearing manifests.
pub fn numeric_artifacts(dir: &Path) -> Result<BTreeSet<PathBuf>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeSet<PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.insert(p.strip_prefix(root).unwrap_or(&p).to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = BTreeSet::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Convenience wrapper: validate, run, and return the manifest.
pub fn run(stage: Stage, config: PipelineConfig) -> Result<RunManifest> {
    Runner::new(config)?.run(stage)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            out_dir: dir.to_path_buf(),
            ..PipelineConfig::default()
        };
        cfg.synth.n_communities = 4;
        cfg.synth.docs_per_community = 15;
        cfg.topics.k = 4;
        cfg.topics.iterations = 30;
        cfg.corpus.min_fi_docs = 5;
        cfg.lasso.n_lambda = 20;
        cfg.lasso.n_folds = 3;
        cfg.toxicity.min_prospectuses = 5;
        cfg
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::SEQUENCE.iter().chain([Stage::All].iter()) {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), *s);
        }
        assert!(matches!("bogus".parse::<Stage>(), Err(Error::Config { .. })));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let s = cfg.to_toml_string();
        assert_eq!(PipelineConfig::from_toml_str(&s).unwrap(), cfg);
    }

    #[test]
    fn config_errors_name_fields() {
        let mut cfg = PipelineConfig::default();
        cfg.topics.k = 1;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "topics.k"),
            other => panic!("{other:?}"),
        }
        let mut cfg = PipelineConfig::default();
        cfg.version = 9;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        assert!(PipelineConfig::from_toml_str("version = 1\nnot_a_key = 3\n").is_err());
        let partial = PipelineConfig::from_toml_str("version = 1\nseed = 7\n[topics]\nk = 12\n").unwrap();
        assert_eq!((partial.seed, partial.topics.k, partial.topics.alpha), (7, 12, 0.1));
    }

    #[test]
    fn missing_dependency_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = run(Stage::Fit, small(dir.path())).unwrap_err();
        match &err {
            Error::MissingArtifact(p) => assert!(p.ends_with("features/security.csv"), "{p:?}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(err.exit_code(), 3);
        let manifest: RunManifest =
            serde_json::from_reader(File::open(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest.stages.len(), 1);
    }

    #[test]
    fn small_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(Stage::All, small(dir.path())).unwrap();
        assert_eq!(m.stages.len(), 9);
        for s in &m.stages {
            for o in &s.outputs {
                assert!(dir.path().join(o).exists(), "{o}");
            }
        }
        let written: BTreeSet<PathBuf> = m.stages.iter().flat_map(|s| s.outputs.iter().map(PathBuf::from)).collect();
        assert_eq!(numeric_artifacts(dir.path()).unwrap(), written);
        let table = read_coefficients(&dir.path().join(coefficients_csv(FeatureTier::Comprehensive))).unwrap();
        let fits: TierFits =
            serde_json::from_reader(File::open(dir.path().join(fits_json(FeatureTier::Comprehensive))).unwrap()).unwrap();
        let sparse: Vec<(String, f64)> = fits.fe.coefficients.iter().map(|c| (c.name.clone(), c.value)).collect();
        assert_eq!(table.sparse(false), sparse);
        assert_eq!(table.fe_intercept, fits.fe.intercept);
    }
}
