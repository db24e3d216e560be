//! Seeded synthetic data with planted structure: supply-chain communities, prospectus
//! text, waterfall-ordered tranches and payment outcomes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{build_corpus, CorpusConfig, DocumentRecord, PairRecord, Role, TermPair, TimeSlicedCorpus};
use crate::error::{Error, Result};
use crate::extraction::{RootEntry, RootSuffixDictionary};
use crate::features::{SecurityRecord, SSUP};
use crate::performance::{label_security, Expectation, PaymentRow, PaymentSummary, PerfThresholds, SecurityClass};
use crate::toxicity::InstitutionEvidence;

const STREAM_CORPUS: u64 = 1;
const STREAM_SECURITIES: u64 = 2;
const STREAM_OUTCOMES: u64 = 3;
const STREAM_TEXT: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One weighted `(role, fi)` term in a community's support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPair {
    pub role: String,
    pub fi: String,
    pub fi_name: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_communities: usize,
    pub docs_per_community: usize,
    pub year_min: i32,
    pub year_max: i32,
    /// Pairs per generated support set.
    pub support_size: usize,
    /// Institutions shared by every community (as trustees), making supports overlap.
    pub shared_institutions: usize,
    /// Probability that a token is drawn from another community's support.
    pub leakage: f64,
    pub tokens_per_doc: usize,
    pub securities_min: usize,
    pub securities_max: usize,
    /// Year weights per community; generated when absent.
    pub year_profiles: Option<Vec<Vec<f64>>>,
    /// `[A, M, B]` fractions per community; generated when absent.
    pub class_mixes: Option<Vec<[f64; 3]>>,
    pub supports: Option<Vec<Vec<SupportPair>>>,
    /// Probability that a prospectus has a senior-subordinate structure.
    pub ssup_doc_prob: f64,
    /// Within such a prospectus, the chance an A security carries SSUP.
    pub ssup_share: f64,
    /// Frequencies of other tranche flags.
    pub flag_freqs: Vec<(String, f64)>,
    pub intercept: f64,
    pub beta_ssup: f64,
    pub beta_has_ssup: f64,
    /// `[A, M, B]`.
    pub beta_class: [f64; 3],
    /// One entry per year; a linear ramp from -0.5 to 0.5 when absent.
    pub beta_year: Option<Vec<f64>>,
    /// One entry per community; `+1` on community 0 when absent.
    pub beta_topic: Option<Vec<f64>>,
    /// Communities tagged toxic; those with a positive topic effect when absent.
    pub toxic_communities: Option<Vec<usize>>,
    pub noise_sd: f64,
    /// Among securities that do not fail, the chance of missing expectations.
    pub nme_rate: f64,
    pub thresholds: PerfThresholds,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_communities: 10,
            docs_per_community: 50,
            year_min: 2002,
            year_max: 2007,
            support_size: 12,
            shared_institutions: 0,
            leakage: 0.0,
            tokens_per_doc: 60,
            securities_min: 10,
            securities_max: 10,
            year_profiles: None,
            class_mixes: None,
            supports: None,
            ssup_doc_prob: 0.4,
            ssup_share: 0.5,
            flag_freqs: [("SEQ", 0.3), ("PT", 0.25), ("FLT", 0.15), ("AFC", 0.1), ("SUP", 0.1), ("NTL", 0.05)]
                .iter()
                .map(|(n, p)| (n.to_string(), *p))
                .collect(),
            intercept: -1.0,
            beta_ssup: 1.5,
            beta_has_ssup: 0.75,
            beta_class: [-1.0, 0.0, 0.8],
            beta_year: None,
            beta_topic: None,
            toxic_communities: None,
            noise_sd: 0.3,
            nme_rate: 0.5,
            thresholds: PerfThresholds::default(),
            seed: 0,
        }
    }
}

fn check_prob(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(field, format!("must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_simplex(field: &str, mix: &[f64]) -> Result<()> {
    if mix.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(field, format!("{mix:?} is not on the simplex")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn years(&self) -> Vec<i32> {
        (self.year_min..=self.year_max).collect()
    }

    pub fn num_docs(&self) -> usize {
        self.n_communities * self.docs_per_community
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_communities == 0 {
            return Err(Error::config("synth.n_communities", "must be at least 1"));
        }
        if self.docs_per_community == 0 {
            return Err(Error::config("synth.docs_per_community", "must be at least 1"));
        }
        if self.year_min > self.year_max {
            return Err(Error::config("synth.year_min", "must not exceed year_max"));
        }
        if self.tokens_per_doc == 0 {
            return Err(Error::config("synth.tokens_per_doc", "must be at least 1"));
        }
        if self.securities_min == 0 || self.securities_min > self.securities_max {
            return Err(Error::config("synth.securities_min", "need 1 <= securities_min <= securities_max"));
        }
        if self.supports.is_none() && self.support_size == 0 {
            return Err(Error::config("synth.support_size", "empty support"));
        }
        check_prob("synth.leakage", self.leakage)?;
        check_prob("synth.ssup_doc_prob", self.ssup_doc_prob)?;
        check_prob("synth.ssup_share", self.ssup_share)?;
        check_prob("synth.nme_rate", self.nme_rate)?;
        for (name, p) in &self.flag_freqs {
            check_prob(&format!("synth.flag_freqs.{name}"), *p)?;
            if name == SSUP {
                return Err(Error::config("synth.flag_freqs", "SSUP is controlled by ssup_doc_prob and ssup_share"));
            }
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::config("synth.noise_sd", "must be finite and non-negative"));
        }
        let c = self.n_communities;
        let t = self.years().len();
        if let Some(p) = &self.year_profiles {
            if p.len() != c {
                return Err(Error::config("synth.year_profiles", format!("need {c} profiles")));
            }
            for (i, w) in p.iter().enumerate() {
                if w.len() != t || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::config(
                        format!("synth.year_profiles[{i}]"),
                        format!("need {t} non-negative weights with a positive sum"),
                    ));
                }
            }
        }
        if let Some(m) = &self.class_mixes {
            if m.len() != c {
                return Err(Error::config("synth.class_mixes", format!("need {c} mixes")));
            }
            for (i, mix) in m.iter().enumerate() {
                check_simplex(&format!("synth.class_mixes[{i}]"), mix)?;
            }
        }
        if let Some(s) = &self.supports {
            if s.len() != c {
                return Err(Error::config("synth.supports", format!("need {c} support sets")));
            }
            for (i, sup) in s.iter().enumerate() {
                if sup.is_empty() {
                    return Err(Error::config(format!("synth.supports[{i}]"), "empty support"));
                }
                if sup.iter().any(|p| !(p.weight > 0.0) || p.fi.trim().is_empty()) {
                    return Err(Error::config(format!("synth.supports[{i}]"), "weights must be positive"));
                }
            }
        }
        if let Some(b) = &self.beta_year {
            if b.len() != t {
                return Err(Error::config("synth.beta_year", format!("need {t} entries")));
            }
        }
        if let Some(b) = &self.beta_topic {
            if b.len() != c {
                return Err(Error::config("synth.beta_topic", format!("need {c} entries")));
            }
        }
        if let Some(tc) = &self.toxic_communities {
            if let Some(&bad) = tc.iter().find(|&&i| i >= c) {
                return Err(Error::config("synth.toxic_communities", format!("community {bad} out of range")));
            }
        }
        Ok(())
    }

    pub fn beta_year_values(&self) -> Vec<f64> {
        self.beta_year.clone().unwrap_or_else(|| {
            let t = self.years().len();
            if t == 1 {
                return vec![0.0];
            }
            (0..t).map(|i| -0.5 + i as f64 / (t - 1) as f64).collect()
        })
    }

    pub fn beta_topic_values(&self) -> Vec<f64> {
        self.beta_topic.clone().unwrap_or_else(|| {
            let mut b = vec![0.0; self.n_communities];
            b[0] = 1.0;
            b
        })
    }

    pub fn toxic_set(&self) -> BTreeSet<usize> {
        match &self.toxic_communities {
            Some(v) => v.iter().copied().collect(),
            None => self
                .beta_topic_values()
                .iter()
                .enumerate()
                .filter(|(_, &b)| b > 0.0)
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

const ADJECTIVES: [&str; 23] = [
    "Harbor", "Summit", "Granite", "Meridian", "Cedar", "Beacon", "Pinnacle", "Crescent", "Liberty", "Sterling",
    "Prairie", "Keystone", "Atlas", "Riverbend", "Northgate", "Lakeshore", "Ironwood", "Bluewater", "Redstone",
    "Silverline", "Oakmont", "Westbrook", "Fairhaven",
];
const NOUNS: [&str; 9] = [
    "Mortgage", "Capital", "Funding", "Lending", "Financial", "Acceptance", "Home Loans", "Savings", "Residential",
];

/// Suffix terms used by the generated dictionary and documents.
pub const SUFFIXES: [&str; 14] = [
    "Inc.",
    "Incorporated",
    "Corporation",
    "Corp.",
    "LLC",
    "L.L.C.",
    "Company",
    "Co.",
    "Bank",
    "National Association",
    "N.A.",
    "FSB",
    "Trust Company",
    "Ltd.",
];

/// A distinct fictional institution name for every index; the adjective and noun
/// counts are coprime so the first 207 names never repeat a combination.
pub fn institution_name(i: usize) -> (String, String) {
    let base = format!("{} {}", ADJECTIVES[i % ADJECTIVES.len()], NOUNS[i % NOUNS.len()]);
    let round = i / (ADJECTIVES.len() * NOUNS.len());
    let name = if round == 0 { base } else { format!("{base} {}", round + 1) };
    let id = name.to_lowercase().replace(' ', "_");
    (id, name)
}

/// Role slots of a generated support, strongest first: the issuer and originators
/// carry the most weight.
const SLOTS: [(&str, usize, f64); 12] = [
    ("issuer", 0, 6.0),
    ("originator", 1, 5.0),
    ("originator", 2, 4.0),
    ("depositor", 0, 3.0),
    ("sponsor", 0, 3.0),
    ("seller", 1, 2.5),
    ("servicer", 1, 2.0),
    ("servicer", 2, 2.0),
    ("trustee", 3, 1.5),
    ("custodian", 3, 1.0),
    ("underwriter", 0, 1.0),
    ("securities administrator", 3, 1.0),
];

fn generated_supports(cfg: &SynthConfig) -> Vec<Vec<SupportPair>> {
    let extra = cfg.support_size.saturating_sub(SLOTS.len());
    let extra_fis = extra.div_ceil(crate::corpus::SEED_ROLES.len());
    let per = 4 + extra_fis;
    let shared_base = cfg.n_communities * per;
    (0..cfg.n_communities)
        .map(|c| {
            let fi = |j: usize| institution_name(c * per + j);
            let mut sup: Vec<SupportPair> = SLOTS
                .iter()
                .take(cfg.support_size)
                .map(|&(role, j, w)| {
                    let (id, name) = fi(j);
                    SupportPair {
                        role: role.into(),
                        fi: id,
                        fi_name: name,
                        weight: w,
                    }
                })
                .collect();
            for e in 0..extra {
                let role = crate::corpus::SEED_ROLES[e % crate::corpus::SEED_ROLES.len()];
                let (id, name) = fi(4 + e / crate::corpus::SEED_ROLES.len());
                sup.push(SupportPair {
                    role: role.into(),
                    fi: id,
                    fi_name: name,
                    weight: 0.8,
                });
            }
            if cfg.shared_institutions > 0 {
                let (id, name) = institution_name(shared_base + c % cfg.shared_institutions);
                sup.push(SupportPair {
                    role: "trustee".into(),
                    fi: id,
                    fi_name: name,
                    weight: 1.0,
                });
            }
            sup
        })
        .collect()
}

fn generated_profiles(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let t = cfg.years().len();
    (0..cfg.n_communities)
        .map(|_| {
            let center = rng.random::<f64>() * (t.max(1) - 1) as f64;
            (0..t)
                .map(|i| 0.05 + (-0.5 * ((i as f64 - center) / 1.2).powi(2)).exp())
                .collect()
        })
        .collect()
}

fn generated_mixes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let base = [0.6, 0.25, 0.15];
    (0..cfg.n_communities)
        .map(|_| {
            let g: Vec<f64> = base
                .iter()
                .map(|&b| Gamma::new(20.0 * b, 1.0).expect("positive shape").sample(rng))
                .collect();
            let s: f64 = g.iter().sum();
            [g[0] / s, g[1] / s, 1.0 - g[0] / s - g[1] / s]
        })
        .collect()
}

/// Everything a recovery test needs to know about how data were generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub doc_community: BTreeMap<String, usize>,
    pub community_toxic: Vec<bool>,
    pub class_mixes: Vec<[f64; 3]>,
    pub year_profiles: Vec<Vec<f64>>,
    pub supports: Vec<Vec<SupportPair>>,
    /// Filled by outcome generation.
    #[serde(default)]
    pub securities: BTreeMap<String, PlantedOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedOutcome {
    pub logit: f64,
    pub label: Expectation,
}

impl GroundTruth {
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        Ok(serde_json::to_writer_pretty(writer, self)?)
    }

    pub fn read_json<R: std::io::Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}

/// Draws one document per slot; each token comes from the document's community support
/// unless it leaks to a uniformly chosen other community.
pub fn generate_records(cfg: &SynthConfig) -> Result<(Vec<DocumentRecord>, GroundTruth)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, STREAM_CORPUS);
    let supports = cfg.supports.clone().unwrap_or_else(|| generated_supports(cfg));
    let year_profiles = match &cfg.year_profiles {
        Some(p) => p.clone(),
        None => generated_profiles(cfg, &mut rng),
    };
    let class_mixes = match &cfg.class_mixes {
        Some(m) => m.clone(),
        None => generated_mixes(cfg, &mut rng),
    };
    let pick: Vec<WeightedIndex<f64>> = supports
        .iter()
        .map(|s| WeightedIndex::new(s.iter().map(|p| p.weight)).map_err(|e| Error::config("synth.supports", e.to_string())))
        .collect::<Result<_>>()?;
    let year_pick: Vec<WeightedIndex<f64>> = year_profiles
        .iter()
        .map(|p| WeightedIndex::new(p).map_err(|e| Error::config("synth.year_profiles", e.to_string())))
        .collect::<Result<_>>()?;
    let years = cfg.years();
    let toxic = cfg.toxic_set();
    let c = cfg.n_communities;
    let width = (cfg.num_docs().max(1)).to_string().len().max(5);
    let mut records = Vec::with_capacity(cfg.num_docs());
    let mut doc_community = BTreeMap::new();
    for comm in 0..c {
        for _ in 0..cfg.docs_per_community {
            let id = format!("P{:0width$}", records.len() + 1);
            let year = years[year_pick[comm].sample(&mut rng)];
            let mut counts: BTreeMap<(usize, usize), u32> = BTreeMap::new();
            for _ in 0..cfg.tokens_per_doc {
                let src = if c > 1 && cfg.leakage > 0.0 && rng.random::<f64>() < cfg.leakage {
                    let o = rng.random_range(0..c - 1);
                    if o >= comm {
                        o + 1
                    } else {
                        o
                    }
                } else {
                    comm
                };
                *counts.entry((src, pick[src].sample(&mut rng))).or_default() += 1;
            }
            let pairs = counts
                .into_iter()
                .map(|((s, j), n)| {
                    let p = &supports[s][j];
                    PairRecord {
                        role: p.role.clone(),
                        fi: p.fi.clone(),
                        fi_name: Some(p.fi_name.clone()),
                        count: n,
                    }
                })
                .collect();
            doc_community.insert(id.clone(), comm);
            records.push(DocumentRecord {
                id,
                year,
                pairs,
                security_ids: Vec::new(),
            });
        }
    }
    let truth = GroundTruth {
        doc_community,
        community_toxic: (0..c).map(|i| toxic.contains(&i)).collect(),
        class_mixes,
        year_profiles,
        supports,
        securities: BTreeMap::new(),
    };
    Ok((records, truth))
}

fn corpus_config(cfg: &SynthConfig, records: &[DocumentRecord]) -> CorpusConfig {
    let mut cc = CorpusConfig {
        year_min: cfg.year_min,
        year_max: cfg.year_max,
        ..CorpusConfig::default()
    };
    for r in records {
        for p in &r.pairs {
            cc.roles.register(Role::new(&p.role));
        }
    }
    cc
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<(TimeSlicedCorpus, GroundTruth)> {
    let (records, truth) = generate_records(cfg)?;
    let cc = corpus_config(cfg, &records);
    Ok((build_corpus(records, &cc)?, truth))
}

/// What a prospectus's tranche list is composed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProspectusTemplate {
    pub prospectus_id: String,
    pub year: i32,
    pub n_securities: usize,
    pub has_ssup: bool,
    pub ssup_share: f64,
    pub flag_freqs: Vec<(String, f64)>,
}

/// Largest-remainder apportionment of `n` seats to `mix`; ties go to the earlier class.
pub fn class_counts(mix: [f64; 3], n: usize) -> [usize; 3] {
    let quotas: Vec<f64> = mix.iter().map(|&m| m * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = quotas[i].floor() as usize;
    }
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn mir_for(class: SecurityClass, rng: &mut ChaCha8Rng) -> Option<String> {
    let table: &[(&str, f64)] = match class {
        SecurityClass::A => &[("Aaa", 0.85), ("Aa1", 0.1), ("Aa2", 0.05)],
        SecurityClass::M => &[("Aa2", 0.2), ("A2", 0.35), ("Baa2", 0.35), ("Ba1", 0.1)],
        SecurityClass::B => &[("Ba2", 0.3), ("B2", 0.3), ("Caa1", 0.1), ("NR", 0.15), ("", 0.15)],
    };
    let idx = WeightedIndex::new(table.iter().map(|t| t.1)).expect("static weights").sample(rng);
    let r = table[idx].0;
    (!r.is_empty()).then(|| r.to_string())
}

fn principal_for(class: SecurityClass, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = match class {
        SecurityClass::A => (50e6, 300e6),
        SecurityClass::M => (5e6, 30e6),
        SecurityClass::B => (1e6, 10e6),
    };
    rng.random_range::<f64, _>(lo..hi).round()
}

/// Tranches for one prospectus in payoff priority: A, then M, then B. SSUP only
/// ever marks A securities; a senior-subordinate prospectus has at least one.
pub fn waterfall_compose(template: &ProspectusTemplate, class_mix: [f64; 3], seed: u64) -> Result<Vec<SecurityRecord>> {
    check_simplex("class_mix", &class_mix)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = class_counts(class_mix, template.n_securities);
    let mut out = Vec::with_capacity(template.n_securities);
    for (ci, class) in SecurityClass::ALL.iter().enumerate() {
        for k in 0..counts[ci] {
            let mut flags: Vec<String> = template
                .flag_freqs
                .iter()
                .filter_map(|(name, p)| (rng.random::<f64>() < *p).then(|| name.clone()))
                .collect();
            if *class == SecurityClass::A && template.has_ssup && rng.random::<f64>() < template.ssup_share {
                flags.push(SSUP.to_string());
            }
            out.push(SecurityRecord {
                id: format!("{}-{}{:02}", template.prospectus_id, class.as_str(), k + 1),
                prospectus_id: template.prospectus_id.clone(),
                class: *class,
                year: template.year,
                mir_raw: mir_for(*class, &mut rng),
                flags,
                original_principal: principal_for(*class, &mut rng),
            });
        }
    }
    if template.has_ssup && !out.iter().any(|s| s.is_ssup()) {
        if let Some(first_a) = out.iter_mut().find(|s| s.class == SecurityClass::A) {
            first_a.flags.push(SSUP.to_string());
        }
    }
    for s in &mut out {
        s.flags.sort();
    }
    Ok(out)
}

/// Securities for every document, attaching their ids to the document records.
pub fn generate_securities(cfg: &SynthConfig, records: &mut [DocumentRecord], truth: &GroundTruth) -> Result<Vec<SecurityRecord>> {
    let mut rng = rng_for(cfg.seed, STREAM_SECURITIES);
    let mut out = Vec::new();
    for rec in records.iter_mut() {
        let comm = *truth
            .doc_community
            .get(&rec.id)
            .ok_or_else(|| Error::invalid(format!("document `{}` has no community", rec.id)))?;
        let template = ProspectusTemplate {
            prospectus_id: rec.id.clone(),
            year: rec.year,
            n_securities: rng.random_range(cfg.securities_min..=cfg.securities_max),
            has_ssup: rng.random::<f64>() < cfg.ssup_doc_prob,
            ssup_share: cfg.ssup_share,
            flag_freqs: cfg.flag_freqs.clone(),
        };
        let secs = waterfall_compose(&template, truth.class_mixes[comm], rng.random())?;
        rec.security_ids = secs.iter().map(|s| s.id.clone()).collect();
        out.extend(secs);
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A payment summary whose label under `t` is exactly `label`.
fn summary_for(label: Expectation, class: SecurityClass, t: &PerfThresholds, rng: &mut ChaCha8Rng) -> PaymentSummary {
    let th = t.for_class(class);
    let worst = match label {
        Expectation::Meets => rng.random::<f64>() * th.me_max_bps,
        Expectation::Fails => th.fe_min_bps + rng.random::<f64>() * th.fe_min_bps.max(1.0),
        Expectation::NotMeets => loop {
            let v = th.me_max_bps + rng.random::<f64>() * (th.fe_min_bps - th.me_max_bps);
            if v > th.me_max_bps && v < th.fe_min_bps {
                break v;
            }
        },
    };
    let other = rng.random::<f64>() * worst;
    if rng.random::<bool>() {
        PaymentSummary::new(worst, other)
    } else {
        PaymentSummary::new(other, worst)
    }
}

/// Planted logit per security, then a failure draw and, for survivors, an NME/ME draw.
/// Returns payment rows in record order and the planted outcome per security.
pub fn generate_outcomes(
    records: &[SecurityRecord],
    truth: &GroundTruth,
    cfg: &SynthConfig,
) -> Result<(Vec<PaymentRow>, BTreeMap<String, PlantedOutcome>)> {
    let mut rng = rng_for(cfg.seed, STREAM_OUTCOMES);
    let by_year: BTreeMap<i32, f64> = cfg.years().into_iter().zip(cfg.beta_year_values()).collect();
    let beta_topic = cfg.beta_topic_values();
    let mut has_ssup: BTreeMap<&str, bool> = BTreeMap::new();
    for r in records {
        *has_ssup.entry(r.prospectus_id.as_str()).or_default() |= r.is_ssup();
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::config("synth.noise_sd", e.to_string()))?;
    let mut rows = Vec::with_capacity(records.len());
    let mut planted = BTreeMap::new();
    for r in records {
        let comm = *truth
            .doc_community
            .get(&r.prospectus_id)
            .ok_or_else(|| Error::invalid(format!("security `{}` has no community", r.id)))?;
        let year_effect = *by_year
            .get(&r.year)
            .ok_or_else(|| Error::invalid(format!("security `{}`: year {} outside the configured range", r.id, r.year)))?;
        let class_idx = SecurityClass::ALL.iter().position(|c| *c == r.class).expect("known class");
        let mut logit = cfg.intercept + cfg.beta_class[class_idx] + year_effect + beta_topic[comm];
        if r.is_ssup() {
            logit += cfg.beta_ssup;
        }
        if has_ssup[r.prospectus_id.as_str()] {
            logit += cfg.beta_has_ssup;
        }
        if cfg.noise_sd > 0.0 {
            logit += noise.sample(&mut rng);
        }
        let label = if rng.random::<f64>() < sigmoid(logit) {
            Expectation::Fails
        } else if rng.random::<f64>() < cfg.nme_rate {
            Expectation::NotMeets
        } else {
            Expectation::Meets
        };
        let s = summary_for(label, r.class, &cfg.thresholds, &mut rng);
        debug_assert_eq!(label_security(r.class, &s, &cfg.thresholds).map(|l| l.value).ok(), Some(label));
        rows.push(PaymentRow {
            security_id: r.id.clone(),
            class: r.class,
            principal_shortfall_bps: s.principal_shortfall_bps,
            other_shortfall_loss_bps: s.other_shortfall_loss_bps,
        });
        planted.insert(r.id.clone(), PlantedOutcome { logit, label });
    }
    Ok((rows, planted))
}

/// Corpus records, securities, payments and truth for one configuration.
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub records: Vec<DocumentRecord>,
    pub securities: Vec<SecurityRecord>,
    pub payments: Vec<PaymentRow>,
    pub truth: GroundTruth,
}

impl SynthBundle {
    pub fn corpus(&self, cfg: &SynthConfig) -> Result<TimeSlicedCorpus> {
        build_corpus(self.records.clone(), &corpus_config(cfg, &self.records))
    }
}

pub fn generate_all(cfg: &SynthConfig) -> Result<SynthBundle> {
    let (mut records, mut truth) = generate_records(cfg)?;
    let securities = generate_securities(cfg, &mut records, &truth)?;
    let (payments, planted) = generate_outcomes(&securities, &truth, cfg)?;
    truth.securities = planted;
    Ok(SynthBundle {
        records,
        securities,
        payments,
        truth,
    })
}

/// Dictionary covering every institution in the supports.
pub fn synthetic_dictionary(truth: &GroundTruth) -> Result<RootSuffixDictionary> {
    let mut names = BTreeMap::new();
    for sup in &truth.supports {
        for p in sup {
            names.insert(p.fi.clone(), p.fi_name.clone());
        }
    }
    let roots = names
        .iter()
        .map(|(id, name)| RootEntry {
            term: name.clone(),
            fi_id: id.clone(),
        })
        .collect();
    RootSuffixDictionary::new(roots, SUFFIXES.iter().map(|s| s.to_string()).collect(), &names)
}

/// Evidence in which the issuers and originators of toxic communities failed and the
/// issuers of every third other community took TARP funds.
pub fn synthetic_evidence(truth: &GroundTruth) -> Vec<InstitutionEvidence> {
    let mut by_fi: BTreeMap<String, InstitutionEvidence> = BTreeMap::new();
    let key = [Role::issuer(), Role::originator()];
    for (c, sup) in truth.supports.iter().enumerate() {
        let toxic = truth.community_toxic[c];
        for p in sup {
            let e = by_fi.entry(p.fi.clone()).or_insert_with(|| InstitutionEvidence {
                fi_id: p.fi.clone(),
                bankruptcy_or_fines: false,
                involuntary_merger: false,
                tarp_funds: false,
                subprime_distress: false,
                notes: String::new(),
            });
            let in_key = key.contains(&Role::new(&p.role));
            if toxic && in_key {
                e.bankruptcy_or_fines = true;
                e.notes = "planted failure".into();
            } else if !toxic && c % 3 == 1 && p.role == "issuer" {
                e.tarp_funds = true;
                e.notes = "planted TARP recipient".into();
            }
        }
    }
    by_fi.into_values().collect()
}

fn role_title(role: &str) -> &'static str {
    match role {
        "issuer" => "Issuing Entity",
        "originator" => "Originator",
        "seller" => "Seller",
        "trustee" => "Trustee",
        "servicer" => "Master Servicer",
        "depositor" => "Depositor",
        "sponsor" => "Sponsor",
        "securities administrator" => "Securities Administrator",
        "custodian" => "Custodian",
        "swap counterparty" => "Swap Counterparty",
        "cap counterparty" => "Cap Counterparty",
        "insurer" => "Certificate Insurer",
        "underwriter" => "Underwriter",
        _ => "",
    }
}

fn role_phrase(role: &str) -> String {
    match role_title(role) {
        "" => role.to_string(),
        t => t.to_lowercase(),
    }
}

/// A surface form of an institution name: the root, optionally cased differently and
/// followed by a suffix chain.
fn surface_name(root: &str, rng: &mut ChaCha8Rng) -> String {
    let forms = [
        "",
        " Inc.",
        ", Inc.",
        " Corporation",
        " Corp.",
        " LLC",
        " Bank, National Association",
        " Bank, N.A.",
        " Company",
        " FSB",
        " Trust Company",
    ];
    let suffix = forms[rng.random_range(0..forms.len())];
    let root = if rng.random::<f64>() < 0.1 { root.to_uppercase() } else { root.to_string() };
    format!("{root}{suffix}")
}

const ORPHANS: [&str; 3] = [
    "{} has been active in residential lending since 1998.",
    "{} is incorporated in Delaware.",
    "{} acquired a portion of the mortgage loans before the cut-off date.",
];

const OUT_OF_DICTIONARY: [&str; 3] = ["Foxglove Partners LLC", "Quarry Hill Advisors Inc.", "Tamarack Group"];

/// Prospectus-summary text whose pairs, extracted line by line, reproduce the record's
/// token counts: one summary table row per pair, then one sentence per extra mention.
pub fn render_prospectus(record: &DocumentRecord, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    out.push_str(&format!("PROSPECTUS SUPPLEMENT {}\n", record.id));
    out.push_str(&format!("Mortgage Pass-Through Certificates, Series {}-{}\n\n", record.year, rng.random_range(1..9)));
    out.push_str("SUMMARY\n");
    let mut by_role: BTreeMap<&str, Vec<&PairRecord>> = BTreeMap::new();
    for p in &record.pairs {
        by_role.entry(p.role.as_str()).or_default().push(p);
    }
    let name_of = |p: &PairRecord| p.fi_name.clone().unwrap_or_else(|| p.fi.clone());
    for (role, pairs) in &by_role {
        let names: Vec<String> = pairs.iter().map(|p| surface_name(&name_of(p), rng)).collect();
        let listed = match names.len() {
            1 => names[0].clone(),
            n => format!("{} and {}", names[..n - 1].join("; "), names[n - 1]),
        };
        let title = role_title(role);
        let title = if title.is_empty() { role.to_string() } else { title.to_string() };
        out.push_str(&format!("{title}: {listed}\n"));
    }
    out.push('\n');
    let mut sentences = Vec::new();
    for p in &record.pairs {
        for _ in 1..p.count {
            let name = surface_name(&name_of(p), rng);
            let phrase = role_phrase(&p.role);
            let s = match rng.random_range(0..3) {
                0 => format!("The {phrase} with respect to the mortgage loans is {name}."),
                1 => format!("Under the agreement, the {phrase} will be {name}."),
                _ => format!("As {phrase}, {name} will perform the duties described herein."),
            };
            sentences.push(s);
        }
    }
    if let Some(p) = record.pairs.first() {
        let t = ORPHANS[rng.random_range(0..ORPHANS.len())];
        sentences.push(t.replace("{}", &surface_name(&name_of(p), rng)));
    }
    sentences.shuffle(rng);
    for s in sentences {
        out.push_str(&s);
        out.push('\n');
    }
    out
}

/// A rendered prospectus with its metadata, one per line in a JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextDocument {
    pub id: String,
    pub year: i32,
    #[serde(default)]
    pub security_ids: Vec<String>,
    pub text: String,
}

pub fn render_documents(records: &[DocumentRecord], seed: u64) -> Vec<TextDocument> {
    let mut rng = rng_for(seed, STREAM_TEXT);
    records
        .iter()
        .map(|r| TextDocument {
            id: r.id.clone(),
            year: r.year,
            security_ids: r.security_ids.clone(),
            text: render_prospectus(r, &mut rng),
        })
        .collect()
}

pub fn write_text_documents<W: Write>(docs: &[TextDocument], mut writer: W) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut writer, d)?;
        writer.write_all(b"\n").map_err(|e| Error::io("writing documents", e))?;
    }
    Ok(())
}

pub fn read_text_documents<R: BufRead>(reader: R) -> Result<Vec<TextDocument>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("reading documents", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Extraction test document with the pairs an exact extractor must return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureDocument {
    pub id: String,
    pub text: String,
    /// Distinct `(role, fi)` pairs with their mention counts.
    pub truth: Vec<(TermPair, u32)>,
}

pub struct ExtractionSuite {
    pub dictionary: RootSuffixDictionary,
    pub documents: Vec<FixtureDocument>,
}

impl ExtractionSuite {
    pub const ROOTS: &'static str = "roots.csv";
    pub const SUFFIXES: &'static str = "suffixes.txt";
    pub const DOCUMENTS: &'static str = "documents.jsonl";

    /// Writes the dictionary files and one JSON document per line into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(format!("creating {}", p.display()), e))
        };
        self.dictionary.write_roots_csv(create(Self::ROOTS)?)?;
        self.dictionary.write_suffixes(create(Self::SUFFIXES)?)?;
        let mut w = create(Self::DOCUMENTS)?;
        for d in &self.documents {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n").map_err(|e| Error::io("writing fixture documents", e))?;
        }
        w.flush().map_err(|e| Error::io("writing fixture documents", e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            let p = dir.join(name);
            File::open(&p).map(BufReader::new).map_err(|_| Error::MissingArtifact(p))
        };
        let dictionary = RootSuffixDictionary::from_readers(open(Self::ROOTS)?, open(Self::SUFFIXES)?)?;
        let mut documents = Vec::new();
        for line in open(Self::DOCUMENTS)?.lines() {
            let line = line.map_err(|e| Error::io("reading fixture documents", e))?;
            if !line.trim().is_empty() {
                documents.push(serde_json::from_str(&line)?);
            }
        }
        Ok(ExtractionSuite { dictionary, documents })
    }
}

/// Documents in three layouts (summary tables, running prose, tables followed by prose
/// with orphan and out-of-dictionary mentions) over a small institution pool.
pub fn extraction_suite(seed: u64, n_docs: usize) -> Result<ExtractionSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<(String, String)> = (0..16).map(|i| institution_name(100 + i)).collect();
    let names: BTreeMap<String, String> = pool.iter().cloned().collect();
    let roots = pool
        .iter()
        .map(|(id, name)| RootEntry {
            term: name.clone(),
            fi_id: id.clone(),
        })
        .collect();
    let dictionary = RootSuffixDictionary::new(roots, SUFFIXES.iter().map(|s| s.to_string()).collect(), &names)?;
    let roles = crate::corpus::SEED_ROLES;
    let mut documents = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let n_pairs = rng.random_range(3..9);
        let mut pairs: BTreeMap<TermPair, (String, u32)> = BTreeMap::new();
        while pairs.len() < n_pairs {
            let (id, name) = &pool[rng.random_range(0..pool.len())];
            let role = roles[rng.random_range(0..roles.len())];
            let count = if d % 3 == 0 { 1 } else { rng.random_range(1..4) };
            pairs.insert(TermPair::new(role, id), (name.clone(), count));
        }
        let record = DocumentRecord {
            id: format!("X{:03}", d + 1),
            year: 2002 + (d % 6) as i32,
            pairs: pairs
                .iter()
                .map(|(k, (name, c))| PairRecord {
                    role: k.role.as_str().to_string(),
                    fi: k.fi.clone(),
                    fi_name: Some(name.clone()),
                    count: *c,
                })
                .collect(),
            security_ids: Vec::new(),
        };
        let mut text = render_prospectus(&record, &mut rng);
        if d % 2 == 1 {
            let stray = OUT_OF_DICTIONARY[rng.random_range(0..OUT_OF_DICTIONARY.len())];
            text.push_str(&format!("Underwriter: {stray}\n"));
        }
        let (_, name) = &pool[rng.random_range(0..pool.len())];
        text.push_str(&format!("{} is a subsidiary of a larger group.\n", surface_name(name, &mut rng)));
        documents.push(FixtureDocument {
            id: record.id.clone(),
            text,
            truth: pairs.into_iter().map(|(k, (_, c))| (k, c)).collect(),
        });
    }
    Ok(ExtractionSuite { dictionary, documents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{extract_with_agreement, CapitalizedPhraseExtractor, DictNerExtractor, KeywordMap};

    fn small() -> SynthConfig {
        SynthConfig {
            n_communities: 3,
            docs_per_community: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(class_counts([0.5, 0.3, 0.2], 10), [5, 3, 2]);
        assert_eq!(class_counts([1.0, 0.0, 0.0], 7), [7, 0, 0]);
        assert_eq!(class_counts([1.0 / 3.0; 3], 10), [4, 3, 3]);
        assert_eq!(class_counts([0.45, 0.45, 0.1], 3), [2, 1, 0]);
        assert_eq!(class_counts([0.6, 0.25, 0.15], 10), [6, 3, 1]);
    }

    #[test]
    fn waterfall_order_and_ssup() {
        let t = ProspectusTemplate {
            prospectus_id: "P1".into(),
            year: 2005,
            n_securities: 10,
            has_ssup: true,
            ssup_share: 1.0,
            flag_freqs: vec![("SEQ".into(), 0.5)],
        };
        let secs = waterfall_compose(&t, [0.5, 0.3, 0.2], 7).unwrap();
        let classes: Vec<_> = secs.iter().map(|s| s.class).collect();
        let mut sorted = classes.clone();
        sorted.sort();
        assert_eq!(classes, sorted);
        assert_eq!(secs.iter().filter(|s| s.class == SecurityClass::A).count(), 5);
        assert!(secs.iter().all(|s| s.is_ssup() == (s.class == SecurityClass::A)));
        assert!(waterfall_compose(&t, [0.5, 0.3, 0.3], 7).is_err());
        let all_a = waterfall_compose(&t, [1.0, 0.0, 0.0], 1).unwrap();
        assert!(all_a.iter().all(|s| s.class == SecurityClass::A));
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let cfg = small();
        let (c1, t1) = generate_corpus(&cfg).unwrap();
        let (c2, t2) = generate_corpus(&cfg).unwrap();
        assert_eq!(c1.num_docs(), 60);
        assert_eq!(t1, t2);
        assert_eq!(crate::corpus::to_records(&c1), crate::corpus::to_records(&c2));
        let mut sizes = vec![0; 3];
        for &c in t1.doc_community.values() {
            sizes[c] += 1;
        }
        assert_eq!(sizes, vec![20, 20, 20]);
    }

    #[test]
    fn zero_leakage_stays_in_support() {
        let cfg = small();
        let (corpus, truth) = generate_corpus(&cfg).unwrap();
        for doc in corpus.docs() {
            let comm = truth.doc_community[&doc.id];
            let sup: BTreeSet<TermPair> = truth.supports[comm].iter().map(|p| TermPair::new(&p.role, &p.fi)).collect();
            assert!(doc.tokens.iter().all(|t| sup.contains(&t.pair())));
        }
    }

    #[test]
    fn empty_support_rejected() {
        let mut cfg = small();
        cfg.supports = Some(vec![vec![], vec![], vec![]]);
        assert!(generate_corpus(&cfg).is_err());
        let mut cfg = small();
        cfg.support_size = 0;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn outcomes_are_label_consistent() {
        let cfg = small();
        let b = generate_all(&cfg).unwrap();
        assert_eq!(b.payments.len(), b.securities.len());
        for (row, sec) in b.payments.iter().zip(&b.securities) {
            let l = label_security(sec.class, &row.summary(), &cfg.thresholds).unwrap();
            assert_eq!(l.value, b.truth.securities[&sec.id].label);
        }
    }

    #[test]
    fn saturated_logits_are_deterministic() {
        for (intercept, expect_fail) in [(12.0, true), (-12.0, false)] {
            let cfg = SynthConfig {
                intercept,
                noise_sd: 0.0,
                beta_class: [0.0; 3],
                beta_year: Some(vec![0.0; 6]),
                beta_topic: Some(vec![0.0; 3]),
                beta_ssup: 0.0,
                beta_has_ssup: 0.0,
                ..small()
            };
            let b = generate_all(&cfg).unwrap();
            assert!(b.truth.securities.values().all(|o| (o.label == Expectation::Fails) == expect_fail));
        }
    }

    #[test]
    fn base_rate_matches_intercept() {
        let p: f64 = 0.3;
        let cfg = SynthConfig {
            n_communities: 10,
            docs_per_community: 100,
            intercept: (p / (1.0 - p)).ln(),
            noise_sd: 0.0,
            beta_class: [0.0; 3],
            beta_year: Some(vec![0.0; 6]),
            beta_topic: Some(vec![0.0; 10]),
            beta_ssup: 0.0,
            beta_has_ssup: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let b = generate_all(&cfg).unwrap();
        assert_eq!(b.securities.len(), 10_000);
        let rate = b.truth.securities.values().filter(|o| o.label == Expectation::Fails).count() as f64 / 10_000.0;
        assert!((rate - 0.3).abs() <= 0.03, "{rate}");
    }

    #[test]
    fn names_are_unique() {
        let names: BTreeSet<String> = (0..207).map(|i| institution_name(i).1).collect();
        assert_eq!(names.len(), 207);
        let ids: BTreeSet<String> = (0..400).map(|i| institution_name(i).0).collect();
        assert_eq!(ids.len(), 400);
    }

    #[test]
    fn rendered_text_extracts_to_its_record() {
        let cfg = small();
        let b = generate_all(&cfg).unwrap();
        let dict = synthetic_dictionary(&b.truth).unwrap();
        let kw = KeywordMap::default();
        let ner = DictNerExtractor { dict: &dict, keywords: &kw };
        let cap = CapitalizedPhraseExtractor { dict: &dict, keywords: &kw };
        for doc in render_documents(&b.records, cfg.seed).iter().take(15) {
            let ex = extract_with_agreement(&ner, &cap, &doc.id, &doc.text);
            let mut got: BTreeMap<TermPair, u32> = BTreeMap::new();
            for p in &ex.pairs {
                *got.entry(p.key()).or_default() += 1;
            }
            let rec = b.records.iter().find(|r| r.id == doc.id).unwrap();
            let want: BTreeMap<TermPair, u32> =
                rec.pairs.iter().map(|p| (TermPair::new(&p.role, &p.fi), p.count)).collect();
            assert_eq!(got, want, "{}", doc.text);
        }
    }

    #[test]
    fn evidence_marks_toxic_key_roles() {
        let cfg = small();
        let (_, truth) = generate_corpus(&cfg).unwrap();
        let ev = synthetic_evidence(&truth);
        let issuer0 = &truth.supports[0][0];
        assert_eq!(issuer0.role, "issuer");
        assert!(ev.iter().any(|e| e.fi_id == issuer0.fi && e.bankruptcy_or_fines));
        let issuer1 = &truth.supports[1][0];
        assert!(ev.iter().any(|e| e.fi_id == issuer1.fi && e.tarp_funds && !e.bankruptcy_or_fines));
    }
}
