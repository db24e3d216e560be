//! Topic models over `(role, fi)` pairs.
//!
//! Static LDA is fit by mean-field variational EM with α held fixed. The dynamic model
//! places a Gaussian random walk on the natural parameters `η[t][k]` of each topic
//! (`β[t][k] = softmax(η[t][k])`) and fits them by MAP: every M-step takes a diagonal
//! Newton step whose per-slice pseudo-observations are smoothed along time with a
//! Kalman filter and RTS smoother, followed by a backtracking line search. Both fits
//! report a variational bound trace that never decreases.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::corpus::{ProspectusDoc, TermPair, TimeSlicedCorpus, Vocabulary};
use crate::error::{Error, Result};

/// Evolution variance that makes the dynamic model behave like a static one.
pub const DTM_SLOW_CHAIN_VAR: f64 = 0.005;
/// Evolution variance that lets topics move almost independently between slices.
pub const DTM_FAST_CHAIN_VAR: f64 = 0.75;
pub const DEFAULT_STRONG_THRESHOLD: f64 = 0.7;
pub const DEFAULT_ALIGN_THRESHOLD: f64 = 0.6;
pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.3;

const BETA_FLOOR: f64 = 1e-12;
const ESTEP_MAX_ITER: usize = 100;
const ESTEP_TOL: f64 = 1e-6;
/// Prior variance of `η` in the first slice.
const INIT_VAR: f64 = 1e4;
const NEWTON_EPS: f64 = 1e-6;
const NEWTON_MAX_ITER: usize = 20;
/// Largest change of any single `η` entry in one Newton step.
const MAX_STEP: f64 = 1.0;
const ARTIFACT_FORMAT: &str = "rmbs-topic-model";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopicModelConfig {
    pub k: usize,
    pub alpha: f64,
    /// Per-year evolution variance of the dynamic model.
    pub chain_var: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Relative bound change below which EM stops.
    pub convergence_tol: f64,
}

impl Default for TopicModelConfig {
    fn default() -> Self {
        TopicModelConfig {
            k: 30,
            alpha: 0.1,
            chain_var: DTM_SLOW_CHAIN_VAR,
            iterations: 100,
            seed: 0,
            convergence_tol: 1e-5,
        }
    }
}

impl TopicModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k", format!("must be at least 2, got {}", self.k)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.chain_var > 0.0 && self.chain_var.is_finite()) {
            return Err(Error::config("chain_var", format!("must be positive, got {}", self.chain_var)));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::config("convergence_tol", "must be non-negative"));
        }
        Ok(())
    }

    pub fn with_chain_var(mut self, chain_var: f64) -> Self {
        self.chain_var = chain_var;
        self
    }

    fn check(&self, allow_single_topic: bool) -> Result<()> {
        if allow_single_topic && self.k == 1 {
            return TopicModelConfig { k: 2, ..*self }.validate();
        }
        self.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaFit {
    pub config: TopicModelConfig,
    pub vocabulary: Vocabulary,
    /// K × V, rows on the simplex.
    pub topic_word: Vec<Vec<f64>>,
    pub doc_ids: Vec<String>,
    pub doc_years: Vec<i32>,
    /// D × K, rows on the simplex.
    pub doc_topic: Vec<Vec<f64>>,
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmFit {
    pub config: TopicModelConfig,
    pub vocabulary: Vocabulary,
    pub years: Vec<i32>,
    /// T × K × V.
    pub per_slice_topic_word: Vec<Vec<Vec<f64>>>,
    pub doc_ids: Vec<String>,
    pub doc_years: Vec<i32>,
    pub doc_topic: Vec<Vec<f64>>,
    pub bound_trace: Vec<f64>,
}

/// Read access shared by static and dynamic fits.
pub trait TopicModel {
    fn config(&self) -> &TopicModelConfig;
    fn vocabulary(&self) -> &Vocabulary;
    fn num_topics(&self) -> usize;
    fn num_slices(&self) -> usize;
    /// K × V topic-word matrix of a slice.
    fn topic_word(&self, slice: usize) -> Option<&[Vec<f64>]>;
    /// Slice used to infer a document of the given year.
    fn slice_for_year(&self, year: i32) -> usize;
    fn doc_ids(&self) -> &[String];
    fn doc_topic(&self) -> &[Vec<f64>];
}

impl TopicModel for LdaFit {
    fn config(&self) -> &TopicModelConfig {
        &self.config
    }
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }
    fn num_topics(&self) -> usize {
        self.topic_word.len()
    }
    fn num_slices(&self) -> usize {
        1
    }
    fn topic_word(&self, slice: usize) -> Option<&[Vec<f64>]> {
        (slice == 0).then_some(&self.topic_word[..])
    }
    fn slice_for_year(&self, _year: i32) -> usize {
        0
    }
    fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }
    fn doc_topic(&self) -> &[Vec<f64>] {
        &self.doc_topic
    }
}

impl TopicModel for DtmFit {
    fn config(&self) -> &TopicModelConfig {
        &self.config
    }
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }
    fn num_topics(&self) -> usize {
        self.per_slice_topic_word.first().map_or(0, Vec::len)
    }
    fn num_slices(&self) -> usize {
        self.years.len()
    }
    fn topic_word(&self, slice: usize) -> Option<&[Vec<f64>]> {
        self.per_slice_topic_word.get(slice).map(|s| &s[..])
    }
    /// Exact year if present, otherwise the nearest slice (earlier on ties).
    fn slice_for_year(&self, year: i32) -> usize {
        self.years
            .iter()
            .enumerate()
            .min_by_key(|(_, &y)| ((y - year).abs(), y))
            .map_or(0, |(i, _)| i)
    }
    fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }
    fn doc_topic(&self) -> &[Vec<f64>] {
        &self.doc_topic
    }
}

impl DtmFit {
    /// Topic `k` averaged over slices.
    pub fn time_averaged(&self, k: usize) -> Vec<f64> {
        let t = self.per_slice_topic_word.len() as f64;
        let v = self.vocabulary.len();
        let mut avg = vec![0.0; v];
        for slice in &self.per_slice_topic_word {
            for (a, b) in avg.iter_mut().zip(&slice[k]) {
                *a += b / t;
            }
        }
        avg
    }
}

// ---------------------------------------------------------------------------
// Variational inference

#[derive(Debug, Clone)]
struct DocTerms {
    words: Vec<usize>,
    counts: Vec<f64>,
    total: f64,
}

fn doc_terms(doc: &ProspectusDoc, vocab: &Vocabulary) -> (DocTerms, u64) {
    let mut words = Vec::with_capacity(doc.tokens.len());
    let mut counts = Vec::with_capacity(doc.tokens.len());
    let mut oov = 0u64;
    for tok in &doc.tokens {
        match vocab.index_of(&tok.pair()) {
            Some(w) => {
                words.push(w);
                counts.push(tok.count as f64);
            }
            None => oov += tok.count as u64,
        }
    }
    let total = counts.iter().sum();
    (DocTerms { words, counts, total }, oov)
}

struct DocPosterior {
    gamma: Vec<f64>,
    /// Expected counts `c·φ`, row-major over the document's words.
    phi: Vec<f64>,
    elbo: f64,
}

fn expected_log_theta(gamma: &[f64], elog: &mut [f64], expt: &mut [f64]) {
    let dsum = digamma(gamma.iter().sum());
    for ((g, e), x) in gamma.iter().zip(elog.iter_mut()).zip(expt.iter_mut()) {
        *e = digamma(*g) - dsum;
        *x = e.exp();
    }
}

/// Coordinate ascent on one document. `bt` is word-major (V × K).
fn infer_doc(doc: &DocTerms, bt: &[f64], k: usize, alpha: f64, gamma0: &[f64]) -> DocPosterior {
    let mut gamma = gamma0.to_vec();
    let mut next = vec![0.0; k];
    let mut elog = vec![0.0; k];
    let mut expt = vec![0.0; k];
    for _ in 0..ESTEP_MAX_ITER {
        expected_log_theta(&gamma, &mut elog, &mut expt);
        next.fill(alpha);
        for (&w, &c) in doc.words.iter().zip(&doc.counts) {
            let row = &bt[w * k..(w + 1) * k];
            let norm: f64 = row.iter().zip(&expt).map(|(b, e)| b * e).sum();
            let scale = c / norm.max(f64::MIN_POSITIVE);
            for j in 0..k {
                next[j] += scale * row[j] * expt[j];
            }
        }
        let diff = next.iter().zip(&gamma).map(|(a, b)| (a - b).abs()).sum::<f64>() / k as f64;
        std::mem::swap(&mut gamma, &mut next);
        if diff < ESTEP_TOL {
            break;
        }
    }
    // Final φ at the returned γ, so the bound below is exact for (γ, φ, β).
    expected_log_theta(&gamma, &mut elog, &mut expt);
    let mut phi = vec![0.0; doc.words.len() * k];
    let mut word_term = 0.0;
    for (i, (&w, &c)) in doc.words.iter().zip(&doc.counts).enumerate() {
        let row = &bt[w * k..(w + 1) * k];
        let norm = row.iter().zip(&expt).map(|(b, e)| b * e).sum::<f64>().max(f64::MIN_POSITIVE);
        word_term += c * norm.ln();
        for j in 0..k {
            phi[i * k + j] = c * row[j] * expt[j] / norm;
        }
    }
    let gsum: f64 = gamma.iter().sum();
    let mut elbo = ln_gamma(k as f64 * alpha) - k as f64 * ln_gamma(alpha) - ln_gamma(gsum) + word_term;
    for j in 0..k {
        elbo += ln_gamma(gamma[j]) + (alpha - gamma[j]) * elog[j];
    }
    DocPosterior { gamma, phi, elbo }
}

fn word_major(topic_word: &[Vec<f64>]) -> Vec<f64> {
    let k = topic_word.len();
    let v = topic_word.first().map_or(0, Vec::len);
    let mut bt = vec![0.0; v * k];
    for (j, row) in topic_word.iter().enumerate() {
        for (w, &b) in row.iter().enumerate() {
            bt[w * k + j] = b;
        }
    }
    bt
}

fn initial_gamma(doc: &DocTerms, k: usize, alpha: f64) -> Vec<f64> {
    vec![alpha + doc.total / k as f64; k]
}

/// Runs the E-step over all documents; results come back in document order.
fn e_step(docs: &[DocTerms], slice_of: &[usize], bts: &[Vec<f64>], k: usize, alpha: f64, gammas: &[Vec<f64>]) -> Vec<DocPosterior> {
    (0..docs.len())
        .into_par_iter()
        .map(|d| infer_doc(&docs[d], &bts[slice_of[d]], k, alpha, &gammas[d]))
        .collect()
}

/// Expected counts per slice, T × K × V.
fn sufficient_stats(docs: &[DocTerms], slice_of: &[usize], posts: &[DocPosterior], t: usize, k: usize, v: usize) -> Vec<Vec<Vec<f64>>> {
    let mut ss = vec![vec![vec![0.0; v]; k]; t];
    for ((doc, &s), post) in docs.iter().zip(slice_of).zip(posts) {
        for (i, &w) in doc.words.iter().enumerate() {
            for j in 0..k {
                ss[s][j][w] += post.phi[i * k + j];
            }
        }
    }
    ss
}

fn normalized(gamma: &[f64]) -> Vec<f64> {
    let s: f64 = gamma.iter().sum();
    gamma.iter().map(|g| g / s).collect()
}

fn converged(trace: &[f64], tol: f64) -> bool {
    match trace {
        [.., a, b] => ((b - a) / a.abs().max(f64::MIN_POSITIVE)).abs() < tol,
        _ => false,
    }
}

struct Prepared {
    docs: Vec<DocTerms>,
    slice_of: Vec<usize>,
    ids: Vec<String>,
    years: Vec<i32>,
}

fn prepare(corpus: &TimeSlicedCorpus) -> Prepared {
    let vocab = corpus.vocabulary();
    let mut p = Prepared {
        docs: Vec::new(),
        slice_of: Vec::new(),
        ids: Vec::new(),
        years: Vec::new(),
    };
    for (t, slice) in corpus.slices().iter().enumerate() {
        for doc in &slice.docs {
            p.docs.push(doc_terms(doc, vocab).0);
            p.slice_of.push(t);
            p.ids.push(doc.id.clone());
            p.years.push(doc.year);
        }
    }
    p
}

fn cosine_sparse(a: &DocTerms, dense_b: &[f64], norm_b: f64) -> f64 {
    let dot: f64 = a.words.iter().zip(&a.counts).map(|(&w, &c)| c * dense_b[w]).sum();
    let na = a.counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if na == 0.0 || norm_b == 0.0 {
        0.0
    } else {
        dot / (na * norm_b)
    }
}

/// Farthest-point seeding on cosine distance: a random first document, then repeatedly
/// the document least similar to every seed so far. Each topic starts from its seed
/// document's word frequencies blended with the corpus background and a small jitter.
fn seed_topics(docs: &[DocTerms], v: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = docs.len();
    let mut background = vec![0.0; v];
    for d in docs {
        for (&w, &c) in d.words.iter().zip(&d.counts) {
            background[w] += c;
        }
    }
    let bsum: f64 = background.iter().sum();
    background.iter_mut().for_each(|b| *b /= bsum);

    let mut dense = vec![0.0; v];
    let mut distance = vec![f64::INFINITY; n];
    let mut seeds = Vec::with_capacity(k);
    let mut next = rng.random_range(0..n);
    while seeds.len() < k {
        seeds.push(next);
        let s = &docs[next];
        dense.fill(0.0);
        for (&w, &c) in s.words.iter().zip(&s.counts) {
            dense[w] = c;
        }
        let norm = s.counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        for (i, d) in docs.iter().enumerate() {
            distance[i] = distance[i].min(1.0 - cosine_sparse(d, &dense, norm));
        }
        let (best, far) = distance
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        next = if far > 1e-12 { best } else { rng.random_range(0..n) };
    }

    seeds
        .iter()
        .map(|&s| {
            let d = &docs[s];
            let mut row: Vec<f64> = background.iter().map(|b| 0.2 * b).collect();
            for (&w, &c) in d.words.iter().zip(&d.counts) {
                row[w] += 0.8 * c / d.total;
            }
            for r in row.iter_mut() {
                *r += 0.01 * rng.random::<f64>() / v as f64;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|r| *r /= s);
            row
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Static LDA

pub fn fit_lda(corpus: &TimeSlicedCorpus, config: &TopicModelConfig) -> Result<LdaFit> {
    config.check(true)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(" for topic fitting".into()));
    }
    let k = config.k;
    let total = corpus.total_count();
    if k as u64 > total {
        return Err(Error::invalid(format!("k = {k} exceeds the corpus token count {total}")));
    }
    let v = corpus.vocabulary().len();
    if v < k {
        log::warn!("vocabulary of {v} terms is smaller than k = {k}");
    }
    let prep = prepare(corpus);
    let single = vec![0usize; prep.docs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut beta = seed_topics(&prep.docs, v, k, &mut rng);
    let mut gammas: Vec<Vec<f64>> = prep.docs.iter().map(|d| initial_gamma(d, k, config.alpha)).collect();
    let mut trace = Vec::new();

    for it in 0..config.iterations {
        let posts = e_step(&prep.docs, &single, &[word_major(&beta)], k, config.alpha, &gammas);
        trace.push(posts.iter().map(|p| p.elbo).sum());
        let ss = sufficient_stats(&prep.docs, &single, &posts, 1, k, v);
        gammas = posts.into_iter().map(|p| p.gamma).collect();
        log::debug!("lda iteration {it}: bound {:.6}", trace[trace.len() - 1]);
        if it + 1 == config.iterations || converged(&trace, config.convergence_tol) {
            break;
        }
        for (row, counts) in beta.iter_mut().zip(&ss[0]) {
            let s: f64 = counts.iter().map(|c| c + BETA_FLOOR).sum();
            for (b, c) in row.iter_mut().zip(counts) {
                *b = (c + BETA_FLOOR) / s;
            }
        }
    }

    Ok(LdaFit {
        config: *config,
        vocabulary: corpus.vocabulary().clone(),
        topic_word: beta,
        doc_ids: prep.ids,
        doc_years: prep.years,
        doc_topic: gammas.iter().map(|g| normalized(g)).collect(),
        log_likelihood_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Dynamic topic model

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_sum_exp(eta: &[f64]) -> f64 {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + eta.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log random-walk prior of one topic chain (T × V), up to a constant.
fn chain_log_prior(eta: &[Vec<f64>], step_var: &[f64]) -> f64 {
    let mut lp = -eta[0].iter().map(|x| x * x).sum::<f64>() / (2.0 * INIT_VAR);
    for t in 1..eta.len() {
        let d2: f64 = eta[t].iter().zip(&eta[t - 1]).map(|(a, b)| (a - b) * (a - b)).sum();
        lp -= d2 / (2.0 * step_var[t]);
    }
    lp
}

/// Expected complete log likelihood of one topic chain plus its prior.
fn chain_objective(eta: &[Vec<f64>], ss: &[&Vec<f64>], step_var: &[f64]) -> f64 {
    let mut f = chain_log_prior(eta, step_var);
    for (e, s) in eta.iter().zip(ss) {
        let n: f64 = s.iter().sum();
        f += e.iter().zip(s.iter()).map(|(a, b)| a * b).sum::<f64>() - n * log_sum_exp(e);
    }
    f
}

/// Kalman filter and RTS smoother for one word: observations `y` with variances `r`
/// under the random walk prior. Returns the posterior means.
fn smooth_chain(y: &[f64], r: &[f64], step_var: &[f64]) -> Vec<f64> {
    let t = y.len();
    let mut m = vec![0.0; t];
    let mut p = vec![0.0; t];
    for i in 0..t {
        let (mp, pp) = if i == 0 { (0.0, INIT_VAR) } else { (m[i - 1], p[i - 1] + step_var[i]) };
        let gain = pp / (pp + r[i]);
        m[i] = mp + gain * (y[i] - mp);
        p[i] = pp * (1.0 - gain);
    }
    for i in (0..t.saturating_sub(1)).rev() {
        let j = p[i] / (p[i] + step_var[i + 1]);
        m[i] += j * (m[i + 1] - m[i]);
    }
    m
}

/// MAP update of one topic chain for fixed expected counts. Each accepted step
/// increases the chain objective.
fn update_chain(eta: &mut Vec<Vec<f64>>, ss: &[&Vec<f64>], step_var: &[f64]) {
    let t = eta.len();
    let v = eta[0].len();
    let mut f = chain_objective(eta, ss, step_var);
    let mut y = vec![vec![0.0; t]; v];
    let mut r = vec![vec![0.0; t]; v];
    for _ in 0..NEWTON_MAX_ITER {
        for s in 0..t {
            let p = softmax(&eta[s]);
            let n: f64 = ss[s].iter().sum();
            for w in 0..v {
                let g = ss[s][w] - n * p[w];
                let h = n * p[w] * (1.0 - p[w]) + NEWTON_EPS;
                y[w][s] = eta[s][w] + g / h;
                r[w][s] = 1.0 / h;
            }
        }
        let mut dir = vec![vec![0.0; v]; t];
        for w in 0..v {
            let target = smooth_chain(&y[w], &r[w], step_var);
            let largest = (0..t).map(|s| (target[s] - eta[s][w]).abs()).fold(0.0, f64::max);
            let scale = if largest > MAX_STEP { MAX_STEP / largest } else { 1.0 };
            for s in 0..t {
                dir[s][w] = scale * (target[s] - eta[s][w]);
            }
        }
        let mut step = 1.0;
        let accepted = loop {
            let cand: Vec<Vec<f64>> = eta
                .iter()
                .zip(&dir)
                .map(|(e, d)| e.iter().zip(d).map(|(a, b)| a + step * b).collect())
                .collect();
            let fc = chain_objective(&cand, ss, step_var);
            if fc >= f {
                break Some((cand, fc));
            }
            step *= 0.5;
            if step < 1e-10 {
                break None;
            }
        };
        match accepted {
            Some((cand, fc)) => {
                let gain = fc - f;
                *eta = cand;
                f = fc;
                if gain <= 1e-10 * f.abs().max(1.0) {
                    break;
                }
            }
            None => break,
        }
    }
}

/// Fits the dynamic model, initialized from a static LDA fit on the pooled corpus.
pub fn fit_dtm(corpus: &TimeSlicedCorpus, config: &TopicModelConfig) -> Result<DtmFit> {
    check_slices(corpus)?;
    let lda = fit_lda(corpus, config)?;
    fit_dtm_from(corpus, config, &lda)
}

fn check_slices(corpus: &TimeSlicedCorpus) -> Result<()> {
    if corpus.slices().is_empty() {
        return Err(Error::EmptyCorpus(" for topic fitting".into()));
    }
    if let Some(s) = corpus.slices().iter().find(|s| s.docs.is_empty()) {
        return Err(Error::EmptySlice(s.year));
    }
    Ok(())
}

/// Fits the dynamic model starting from `init`, whose topic indices carry over.
pub fn fit_dtm_from(corpus: &TimeSlicedCorpus, config: &TopicModelConfig, init: &LdaFit) -> Result<DtmFit> {
    config.check(true)?;
    check_slices(corpus)?;
    if init.vocabulary != *corpus.vocabulary() {
        return Err(Error::Dimension("initial fit vocabulary differs from the corpus vocabulary".into()));
    }
    if init.topic_word.len() != config.k {
        return Err(Error::Dimension(format!(
            "initial fit has {} topics, config asks for {}",
            init.topic_word.len(),
            config.k
        )));
    }
    let k = config.k;
    let v = corpus.vocabulary().len();
    let years = corpus.years();
    let t = years.len();
    let step_var: Vec<f64> = (0..t)
        .map(|i| if i == 0 { 0.0 } else { config.chain_var * (years[i] - years[i - 1]) as f64 })
        .collect();
    let prep = prepare(corpus);

    // eta[k][t][w]: one chain per topic.
    let mut eta: Vec<Vec<Vec<f64>>> = init
        .topic_word
        .iter()
        .map(|row| vec![row.iter().map(|b| b.max(BETA_FLOOR).ln()).collect(); t])
        .collect();
    let mut gammas: Vec<Vec<f64>> = prep
        .docs
        .iter()
        .zip(&prep.ids)
        .map(|(d, id)| {
            let mass = k as f64 * config.alpha + d.total;
            match init.doc_ids.iter().position(|x| x == id) {
                Some(i) => init.doc_topic[i].iter().map(|th| th * mass).collect(),
                None => initial_gamma(d, k, config.alpha),
            }
        })
        .collect();
    let mut betas: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut trace = Vec::new();

    for it in 0..config.iterations {
        betas = (0..t).map(|s| eta.iter().map(|chain| softmax(&chain[s])).collect()).collect();
        let bts: Vec<Vec<f64>> = betas.iter().map(|b| word_major(b)).collect();
        let posts = e_step(&prep.docs, &prep.slice_of, &bts, k, config.alpha, &gammas);
        let prior: f64 = eta.iter().map(|chain| chain_log_prior(chain, &step_var)).sum();
        trace.push(posts.iter().map(|p| p.elbo).sum::<f64>() + prior);
        let ss = sufficient_stats(&prep.docs, &prep.slice_of, &posts, t, k, v);
        gammas = posts.into_iter().map(|p| p.gamma).collect();
        log::debug!("dtm iteration {it}: bound {:.6}", trace[trace.len() - 1]);
        if it + 1 == config.iterations || converged(&trace, config.convergence_tol) {
            break;
        }
        eta.par_iter_mut().enumerate().for_each(|(j, chain)| {
            let stats: Vec<&Vec<f64>> = (0..t).map(|s| &ss[s][j]).collect();
            update_chain(chain, &stats, &step_var);
        });
    }

    Ok(DtmFit {
        config: *config,
        vocabulary: corpus.vocabulary().clone(),
        years,
        per_slice_topic_word: betas,
        doc_ids: prep.ids,
        doc_years: prep.years,
        doc_topic: gammas.iter().map(|g| normalized(g)).collect(),
        bound_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Inference and summaries

#[derive(Debug, Clone, PartialEq)]
pub struct DocTopics {
    pub weights: Vec<f64>,
    /// Token count of pairs missing from the fit vocabulary.
    pub oov_tokens: u64,
}

/// Topic mixture of a new document under a fitted model.
pub fn doc_topics<M: TopicModel + ?Sized>(fit: &M, doc: &ProspectusDoc) -> Result<DocTopics> {
    let (terms, oov) = doc_terms(doc, fit.vocabulary());
    if terms.words.is_empty() {
        return Err(Error::invalid(format!("document {} has no in-vocabulary tokens", doc.id)));
    }
    if oov > 0 {
        log::warn!("document {}: ignored {oov} out-of-vocabulary tokens", doc.id);
    }
    let k = fit.num_topics();
    let alpha = fit.config().alpha;
    let beta = fit
        .topic_word(fit.slice_for_year(doc.year))
        .ok_or_else(|| Error::invalid("fit has no slices"))?;
    let post = infer_doc(&terms, &word_major(beta), k, alpha, &initial_gamma(&terms, k, alpha));
    Ok(DocTopics {
        weights: normalized(&post.gamma),
        oov_tokens: oov,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominantTopic {
    pub topic: usize,
    pub weight: f64,
    pub strong: bool,
}

/// Argmax of a topic mixture, lowest index on ties.
pub fn dominant_topic(weights: &[f64], strong_threshold: f64) -> DominantTopic {
    let (topic, weight) = weights
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &w)| if w > acc.1 { (i, w) } else { acc });
    DominantTopic {
        topic,
        weight,
        strong: weight >= strong_threshold,
    }
}

fn topic_row<M: TopicModel + ?Sized>(fit: &M, topic: usize, slice: usize) -> Result<&[f64]> {
    let beta = fit
        .topic_word(slice)
        .ok_or_else(|| Error::OutOfRange(format!("slice {slice} of {}", fit.num_slices())))?;
    beta.get(topic)
        .map(|r| &r[..])
        .ok_or_else(|| Error::OutOfRange(format!("topic {topic} of {}", beta.len())))
}

/// The `n` most probable pairs of a topic in a slice, ties by vocabulary index.
pub fn top_terms<M: TopicModel + ?Sized>(fit: &M, topic: usize, slice: usize, n: usize) -> Result<Vec<(TermPair, f64)>> {
    let row = topic_row(fit, topic, slice)?;
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(idx
        .into_iter()
        .take(n)
        .map(|w| (fit.vocabulary().terms()[w].clone(), row[w]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyEdge {
    pub year: i32,
    pub role: String,
    pub fi: String,
    pub weight: f64,
}

/// Year-to-pair edges carrying the top `n_per_slice` probabilities of a topic.
pub fn export_sankey(fit: &DtmFit, topic: usize, n_per_slice: usize) -> Result<Vec<SankeyEdge>> {
    let mut edges = Vec::new();
    for (s, &year) in fit.years.iter().enumerate() {
        for (pair, weight) in top_terms(fit, topic, s, n_per_slice)? {
            edges.push(SankeyEdge {
                year,
                role: pair.role.as_str().to_string(),
                fi: pair.fi,
                weight,
            });
        }
    }
    Ok(edges)
}

pub fn write_sankey_csv<W: Write>(edges: &[SankeyEdge], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in edges {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io("writing sankey edges", e))?;
    Ok(())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn cosine(p: &[f64], q: &[f64]) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        0.0
    } else {
        dot / (np * nq)
    }
}

/// Minimum-cost assignment on a square cost matrix; `result[i]` is the column given to row `i`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // Potentials method with 1-based sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Matches each reference topic to a distinct topic of `other`, minimizing total
/// variation. `result[i]` is the index in `other` paired with reference topic `i`.
pub fn align_topics(reference: &[Vec<f64>], other: &[Vec<f64>]) -> Result<Vec<usize>> {
    if reference.len() != other.len() {
        return Err(Error::Dimension(format!(
            "cannot align {} topics with {}",
            reference.len(),
            other.len()
        )));
    }
    let cost: Vec<Vec<f64>> = reference
        .iter()
        .map(|r| other.iter().map(|o| total_variation(r, o)).collect())
        .collect();
    Ok(min_cost_assignment(&cost))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsLabel {
    Stable,
    Evolving,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDynamics {
    pub topic: usize,
    pub label: DynamicsLabel,
    /// Best cosine against any static or slow topic.
    pub alignment: f64,
    /// Largest total variation between two slices of the topic.
    pub drift: f64,
}

/// Labels each fast topic by how well it persists in the static and slow fits.
pub fn classify_dynamics(
    dtm_fast: &DtmFit,
    lda: &LdaFit,
    dtm_slow: &DtmFit,
    align_threshold: f64,
    drift_threshold: f64,
) -> Result<Vec<TopicDynamics>> {
    if dtm_fast.vocabulary != lda.vocabulary || dtm_fast.vocabulary != dtm_slow.vocabulary {
        return Err(Error::Dimension("fits were trained on different vocabularies".into()));
    }
    let k = dtm_fast.num_topics();
    if lda.num_topics() != k || dtm_slow.num_topics() != k {
        return Err(Error::Dimension("fits have different topic counts".into()));
    }
    let mut anchors: Vec<Vec<f64>> = lda.topic_word.clone();
    anchors.extend((0..k).map(|j| dtm_slow.time_averaged(j)));

    Ok((0..k)
        .map(|j| {
            let avg = dtm_fast.time_averaged(j);
            let alignment = anchors.iter().map(|a| cosine(&avg, a)).fold(f64::NEG_INFINITY, f64::max);
            let slices = &dtm_fast.per_slice_topic_word;
            let mut drift: f64 = 0.0;
            for a in 0..slices.len() {
                for b in a + 1..slices.len() {
                    drift = drift.max(total_variation(&slices[a][j], &slices[b][j]));
                }
            }
            let label = if alignment < align_threshold {
                DynamicsLabel::Dynamic
            } else if drift <= drift_threshold {
                DynamicsLabel::Stable
            } else {
                DynamicsLabel::Evolving
            };
            TopicDynamics {
                topic: j,
                label,
                alignment,
                drift,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TopicArtifact {
    Lda(LdaFit),
    Dtm(DtmFit),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    model: TopicArtifact,
}

pub fn save_model(path: &Path, model: &TopicArtifact) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let env = Envelope {
        format: ARTIFACT_FORMAT.into(),
        version: ARTIFACT_VERSION,
        model: model.clone(),
    };
    serde_json::to_writer(&mut w, &env)?;
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model(path: &Path) -> Result<TopicArtifact> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let env: Envelope = serde_json::from_reader(BufReader::new(file))?;
    if env.format != ARTIFACT_FORMAT || env.version != ARTIFACT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported model artifact {} v{}",
            env.format, env.version
        )));
    }
    Ok(env.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig, DocumentRecord, PairRecord};

    fn record(id: &str, year: i32, words: &[(&str, u32)]) -> DocumentRecord {
        DocumentRecord {
            id: id.into(),
            year,
            pairs: words
                .iter()
                .map(|(fi, count)| PairRecord {
                    role: "issuer".into(),
                    fi: fi.to_string(),
                    fi_name: None,
                    count: *count,
                })
                .collect(),
            security_ids: vec![],
        }
    }

    fn corpus(records: Vec<DocumentRecord>) -> TimeSlicedCorpus {
        build_corpus(records, &CorpusConfig::default()).unwrap()
    }

    fn cfg(k: usize) -> TopicModelConfig {
        TopicModelConfig {
            k,
            iterations: 50,
            seed: 7,
            ..Default::default()
        }
    }

    fn assert_simplex(rows: &[Vec<f64>]) {
        for r in rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TopicModelConfig::default().validate().is_ok());
        assert!(TopicModelConfig { k: 1, ..Default::default() }.validate().is_err());
        assert!(TopicModelConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(TopicModelConfig { chain_var: -1.0, ..Default::default() }.validate().is_err());
        assert!(TopicModelConfig { iterations: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn disjoint_documents_separate() {
        let c = corpus(vec![
            record("d1", 2004, &[("a", 5), ("b", 5)]),
            record("d2", 2004, &[("c", 5), ("d", 5)]),
        ]);
        let fit = fit_lda(&c, &cfg(2)).unwrap();
        assert_simplex(&fit.topic_word);
        assert_simplex(&fit.doc_topic);
        let vocab = c.vocabulary();
        let groups = [["a", "b"], ["c", "d"]];
        let mut covered = Vec::new();
        for j in 0..2 {
            let top: Vec<String> = top_terms(&fit, j, 0, 2).unwrap().into_iter().map(|(p, _)| p.fi).collect();
            let g = groups.iter().position(|g| g.iter().all(|w| top.contains(&w.to_string()))).unwrap();
            covered.push(g);
        }
        covered.sort();
        assert_eq!(covered, vec![0, 1]);
        assert_eq!(vocab.len(), 4);
    }

    #[test]
    fn single_topic_is_empirical_frequency() {
        let c = corpus(vec![record("d1", 2004, &[("a", 1), ("b", 3), ("c", 6)])]);
        let fit = fit_lda(&c, &TopicModelConfig { k: 1, iterations: 5, ..Default::default() }).unwrap();
        let expected = [0.1, 0.3, 0.6];
        for (b, e) in fit.topic_word[0].iter().zip(expected) {
            assert!((b - e).abs() < 1e-9);
        }
        assert_eq!(fit.doc_topic[0], vec![1.0]);
    }

    #[test]
    fn errors() {
        let c = corpus(vec![record("d1", 2004, &[("a", 1)])]);
        assert!(fit_lda(&c, &cfg(2)).is_err());
    }

    #[test]
    fn dominant_topic_rules() {
        assert_eq!(
            dominant_topic(&[0.7, 0.2, 0.1], 0.7),
            DominantTopic { topic: 0, weight: 0.7, strong: true }
        );
        assert_eq!(
            dominant_topic(&[0.5, 0.5], 0.7),
            DominantTopic { topic: 0, weight: 0.5, strong: false }
        );
        assert_eq!(
            dominant_topic(&[0.34, 0.33, 0.33], 0.7),
            DominantTopic { topic: 0, weight: 0.34, strong: false }
        );
    }

    #[test]
    fn smoother_static_limit_pools_observations() {
        // Near-zero evolution variance: every slice gets the precision-weighted mean.
        let y = [1.0, 3.0];
        let r = [1.0, 1.0];
        let m = smooth_chain(&y, &r, &[0.0, 1e-10]);
        for x in m {
            assert!((x - 2.0).abs() < 1e-3);
        }
        // Huge evolution variance: each slice keeps its own observation.
        let m = smooth_chain(&y, &[1e-6, 1e-6], &[0.0, 1e6]);
        assert!((m[0] - 1.0).abs() < 1e-3 && (m[1] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn assignment_small() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        assert_eq!(min_cost_assignment(&cost), vec![1, 0, 2]);
        assert!(min_cost_assignment(&[]).is_empty());
    }

    #[test]
    fn top_terms_order_and_bounds() {
        let c = corpus(vec![
            record("d1", 2004, &[("a", 5), ("b", 1)]),
            record("d2", 2004, &[("c", 5), ("d", 2)]),
        ]);
        let fit = fit_lda(&c, &cfg(2)).unwrap();
        let all = top_terms(&fit, 0, 0, 10).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(top_terms(&fit, 2, 0, 1).is_err());
        assert!(top_terms(&fit, 0, 1, 1).is_err());
    }

    #[test]
    fn uniform_fit_gives_uniform_weights() {
        let c = corpus(vec![record("d1", 2004, &[("a", 2), ("b", 1)])]);
        let mut fit = fit_lda(&c, &TopicModelConfig { k: 3, iterations: 2, ..Default::default() }).unwrap();
        fit.topic_word = vec![vec![0.5, 0.5]; 3];
        let doc = &c.slices()[0].docs[0];
        let w = doc_topics(&fit, doc).unwrap().weights;
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dtm_slice_lookup() {
        let c = corpus(vec![
            record("d1", 2002, &[("a", 5), ("b", 5)]),
            record("d2", 2005, &[("c", 5), ("d", 5)]),
        ]);
        let fit = fit_dtm(&c, &cfg(2)).unwrap();
        assert_eq!(fit.slice_for_year(2002), 0);
        assert_eq!(fit.slice_for_year(2003), 0);
        assert_eq!(fit.slice_for_year(2004), 1);
        assert_eq!(fit.slice_for_year(2010), 1);
        for s in &fit.per_slice_topic_word {
            assert_simplex(s);
        }
    }
}
