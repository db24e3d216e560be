//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! Runs with `harness = false` so the summary is printed even when every check passes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rmbs_core::corpus::{Role, TermPair};
use rmbs_core::error::Result;
use rmbs_core::extraction::{
    agreement_filter, extract_with_agreement, CapitalizedPhraseExtractor, DictNerExtractor, ExtractedPair, KeywordMap,
};
use rmbs_core::corpus::FinancialInstitution;
use rmbs_core::features::{topic_column, ColumnKind, FeatureMatrix, FeatureTier};
use rmbs_core::lasso::{cv_select, fit_single, grouped_folds, kkt_certificate, lambda_max, LassoConfig};
use rmbs_core::performance::{label_security, read_labels_csv, Expectation, PaymentSummary, PerfThresholds, SecurityClass};
use rmbs_core::pipeline::{
    artifacts, features_csv, features_manifest, numeric_artifacts, read_doc_topics, PipelineConfig, Runner, Stage,
};
use rmbs_core::synth::{generate_corpus, ExtractionSuite, GroundTruth, SynthConfig};
use rmbs_core::topics::{
    align_topics, dominant_topic, fit_dtm, fit_dtm_from, fit_lda, total_variation, TopicModelConfig,
    DEFAULT_STRONG_THRESHOLD,
};
use rmbs_core::toxicity::{
    institution_labels, label_community, read_community_fixtures, read_evidence_csv, CommunityLabel, ToxicityRules,
};

type Check = (bool, String);

fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn static_limit() -> Result<Check> {
    let t = Instant::now();
    let cfg = SynthConfig {
        n_communities: 10,
        docs_per_community: 20,
        year_min: 2004,
        year_max: 2007,
        support_size: 15,
        seed: 11,
        ..SynthConfig::default()
    };
    let (corpus, _) = generate_corpus(&cfg)?;
    let shape = (corpus.num_docs(), corpus.vocabulary().len(), corpus.slices().len());
    let tc = TopicModelConfig {
        k: 10,
        seed: 11,
        ..TopicModelConfig::default()
    };
    let lda = fit_lda(&corpus, &tc)?;
    let dtm = fit_dtm(&corpus, &tc.clone().with_chain_var(1e-8))?;
    let mut worst: f64 = 0.0;
    for slice in &dtm.per_slice_topic_word {
        let map = align_topics(&lda.topic_word, slice)?;
        for (k, &j) in map.iter().enumerate() {
            worst = worst.max(total_variation(&lda.topic_word[k], &slice[j]));
        }
    }
    let elapsed = t.elapsed();
    let pass = shape == (200, 150, 4) && worst <= 0.05 && elapsed < Duration::from_secs(120);
    Ok((
        pass,
        format!(
            "docs/vocab/slices {:?}, max per-topic TV {worst:.4} (≤ 0.05), {}",
            shape,
            secs(elapsed)
        ),
    ))
}

fn community_recovery() -> Result<Check> {
    let cfg = SynthConfig {
        n_communities: 10,
        docs_per_community: 50,
        leakage: 0.0,
        ..SynthConfig::default()
    };
    let (corpus, truth) = generate_corpus(&cfg)?;
    let tc = TopicModelConfig {
        k: 10,
        ..TopicModelConfig::default()
    };
    let lda = fit_lda(&corpus, &tc)?;
    let dtm = fit_dtm_from(&corpus, &tc, &lda)?;
    let mut table = vec![vec![0usize; cfg.n_communities]; tc.k];
    let mut strong = 0;
    for (id, w) in dtm.doc_ids.iter().zip(&dtm.doc_topic) {
        let d = dominant_topic(w, DEFAULT_STRONG_THRESHOLD);
        strong += d.strong as usize;
        table[d.topic][truth.doc_community[id]] += 1;
    }
    let n = dtm.doc_ids.len() as f64;
    let purity = table.iter().map(|r| *r.iter().max().unwrap_or(&0)).sum::<usize>() as f64 / n;
    let strong = strong as f64 / n;
    Ok((
        purity >= 0.9 && strong >= 0.6,
        format!("purity {purity:.3} (≥ 0.9), strongly assigned {strong:.3} (≥ 0.6)"),
    ))
}

/// Unpenalized logistic regression by Newton–Raphson on the raw design with an intercept.
fn newton_logistic(x: &Array2<f64>, y: &[f64]) -> Vec<f64> {
    let (n, p) = x.dim();
    let mut z = Array2::<f64>::ones((n, p + 1));
    z.slice_mut(ndarray::s![.., 1..]).assign(x);
    let y = Array1::from(y.to_vec());
    let mut b = Array1::<f64>::zeros(p + 1);
    for _ in 0..100 {
        let eta = z.dot(&b);
        let mu = eta.mapv(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.mapv(|m| m * (1.0 - m));
        let grad = z.t().dot(&(&y - &mu));
        let mut h = Array2::<f64>::zeros((p + 1, p + 1));
        for i in 0..n {
            let zi = z.row(i);
            for a in 0..=p {
                for c in 0..=p {
                    h[[a, c]] += w[i] * zi[a] * zi[c];
                }
            }
        }
        let step = solve_spd(h, grad.to_vec());
        let size = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        b = b + Array1::from(step);
        if size < 1e-12 {
            break;
        }
    }
    b.to_vec()
}

/// Gaussian elimination with partial pivoting.
fn solve_spd(mut a: Array2<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        if piv != col {
            for k in 0..n {
                a.swap([col, k], [piv, k]);
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let f = a[[r, col]] / a[[col, col]];
            for k in col..n {
                a[[r, k]] -= f * a[[col, k]];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[[r, k]] * x[k]).sum();
        x[r] = (b[r] - s) / a[[r, r]];
    }
    x
}

fn random_logistic(n: usize, p: usize, rng: &mut ChaCha8Rng, signal: f64) -> (Array2<f64>, Vec<f64>) {
    let x = Array2::from_shape_fn((n, p), |_| rng.random::<f64>() * 2.0 - 1.0);
    let beta: Vec<f64> = (0..p).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * signal).collect();
    let y = (0..n)
        .map(|i| {
            let eta: f64 = (0..p).map(|j| x[[i, j]] * beta[j]).sum::<f64>() + 0.2;
            (rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())) as u8 as f64
        })
        .collect();
    (x, y)
}

fn lasso_oracle() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = random_logistic(100, 10, &mut rng, 1.0);
    let names: Vec<String> = (0..10).map(|j| format!("x{j}")).collect();
    let raw = vec![false; 10];
    let cfg = LassoConfig {
        max_iter: 1000,
        tol: 1e-12,
        ..LassoConfig::default()
    };
    let fit = fit_single(x.view(), &y, &raw, &names, 0.0, &cfg)?;
    let oracle = newton_logistic(&x, &y);
    let mut diff = (fit.intercept - oracle[0]).abs();
    for (j, b) in fit.dense().iter().enumerate() {
        diff = diff.max((b - oracle[j + 1]).abs());
    }

    let lmax = lambda_max(x.view(), &y, &raw)?;
    let above = fit_single(x.view(), &y, &raw, &names, 1.01 * lmax, &cfg)?;
    let zero_above = above.coefficients.is_empty();

    let mut worst_kkt: f64 = 0.0;
    for inst in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);
        let n = 60 + rng.random_range(0..80);
        let p = 3 + rng.random_range(0..15);
        let (x, y) = random_logistic(n, p, &mut rng, 2.0);
        if y.iter().all(|&v| v == y[0]) {
            continue;
        }
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let std: Vec<bool> = (0..p).map(|j| j % 2 == 0).collect();
        let lmax = lambda_max(x.view(), &y, &std)?;
        for frac in [0.8, 0.3, 0.05] {
            let f = fit_single(x.view(), &y, &std, &names, frac * lmax, &cfg)?;
            worst_kkt = worst_kkt.max(kkt_certificate(&f, x.view(), &y)?.max_violation);
        }
    }
    Ok((
        diff <= 1e-4 && zero_above && worst_kkt <= 1e-6,
        format!(
            "λ=0 vs Newton max |Δ| {diff:.2e} (≤ 1e-4), zero above λ_max: {zero_above}, worst KKT violation {worst_kkt:.2e} (≤ 1e-6)"
        ),
    ))
}

fn sign_recovery() -> Result<Check> {
    let t = Instant::now();
    let runs = 20;
    let mut ok = 0;
    let mut misses = Vec::new();
    let mut n_rows = 0;
    for seed in 0..runs {
        let dir = tempdir();
        let mut cfg = PipelineConfig {
            seed: 1000 + seed,
            out_dir: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        cfg.synth.beta_ssup = 1.5;
        cfg.synth.beta_topic = Some({
            let mut b = vec![0.0; cfg.synth.n_communities];
            b[0] = 1.0;
            b
        });
        let mut runner = Runner::new(cfg.clone())?;
        for stage in [Stage::Synth, Stage::Extract, Stage::Corpus, Stage::Topics, Stage::Label, Stage::Features] {
            runner.run(stage)?;
        }
        let out = dir.path();
        let truth = GroundTruth::read_json(open(&out.join(artifacts::TRUTH))?)?;
        let doc_topics = read_doc_topics(open(&out.join(artifacts::DOC_TOPICS))?)?;
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &doc_topics {
            if truth.doc_community.get(&r.doc_id) == Some(&0) {
                *votes.entry(r.dominant).or_default() += 1;
            }
        }
        let planted = votes.iter().max_by_key(|(t, c)| (**c, std::cmp::Reverse(**t))).map(|(t, _)| *t);

        let m = FeatureMatrix::read(
            open(&out.join(features_csv(FeatureTier::Comprehensive)))?,
            open(&out.join(features_manifest(FeatureTier::Comprehensive)))?,
        )?;
        let labels: BTreeMap<String, _> = read_labels_csv(open(&out.join(artifacts::LABELS))?)?.into_iter().collect();
        n_rows = m.row_ids.len();
        let y: Vec<f64> = m.row_ids.iter().map(|id| labels[id].fe as u8 as f64).collect();
        let standardize: Vec<bool> = m.columns.iter().map(|c| c.kind == ColumnKind::Continuous).collect();
        let res = cv_select(m.values.view(), &y, &m.groups, &standardize, &m.column_names(), &cfg.lasso)?;
        let topic_coef = planted.map_or(0.0, |k| res.fit.get(&topic_column(k)));
        let signs = (res.fit.get("SSUP"), res.fit.get("HasSSUP"), topic_coef);
        if signs.0 > 0.0 && signs.1 > 0.0 && signs.2 > 0.0 {
            ok += 1;
        } else {
            misses.push(format!("seed {}: {:+.3}/{:+.3}/{:+.3}", 1000 + seed, signs.0, signs.1, signs.2));
        }
    }
    let elapsed = t.elapsed();
    let rate = ok as f64 / runs as f64;
    let mut detail = format!(
        "SSUP, HasSSUP and planted topic all positive in {ok}/{runs} runs ({:.0}%, ≥ 95%), n = {n_rows} securities, {} (< 300s)",
        100.0 * rate,
        secs(elapsed)
    );
    if !misses.is_empty() {
        detail.push_str(&format!("; misses: {}", misses.join(", ")));
    }
    Ok((rate >= 0.95 && elapsed < Duration::from_secs(300), detail))
}

fn open(p: &Path) -> Result<File> {
    File::open(p).map_err(|_| rmbs_core::error::Error::MissingArtifact(p.to_path_buf()))
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

fn severity(e: Expectation) -> u8 {
    match e {
        Expectation::Meets => 0,
        Expectation::NotMeets => 1,
        Expectation::Fails => 2,
    }
}

fn labeling_boundaries() -> Result<Check> {
    let th = PerfThresholds::default();
    let mut cases = 0;
    let mut wrong = Vec::new();
    for class in SecurityClass::ALL {
        let t = th.for_class(class);
        for (edge, below, at, above) in [
            (t.me_max_bps, Expectation::Meets, Expectation::Meets, Expectation::NotMeets),
            (t.fe_min_bps, Expectation::NotMeets, Expectation::Fails, Expectation::Fails),
        ] {
            for (offset, want) in [(-1.0, below), (0.0, at), (1.0, above)] {
                for channel in 0..2 {
                    let v = edge + offset;
                    let s = if channel == 0 { PaymentSummary::new(v, 0.0) } else { PaymentSummary::new(0.0, v) };
                    let got = label_security(class, &s, &th)?.value;
                    cases += 1;
                    if got != want {
                        wrong.push(format!("{class:?}@{v}: {got:?}"));
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..10_000 {
        let class = SecurityClass::ALL[rng.random_range(0..3)];
        let a = PaymentSummary::new(rng.random::<f64>() * 8000.0, rng.random::<f64>() * 8000.0);
        let b = PaymentSummary::new(
            a.principal_shortfall_bps + rng.random::<f64>() * 3000.0,
            a.other_shortfall_loss_bps + rng.random::<f64>() * 3000.0,
        );
        let (la, lb) = (label_security(class, &a, &th)?, label_security(class, &b, &th)?);
        if severity(lb.value) < severity(la.value) || (la.fne && !lb.fne) || (la.fe && !lb.fe) {
            violations += 1;
        }
    }
    Ok((
        wrong.is_empty() && violations == 0,
        format!(
            "{} of {cases} boundary cases wrong{}, {violations} monotonicity violations in 10000 pairs",
            wrong.len(),
            if wrong.is_empty() { String::new() } else { format!(" ({})", wrong.join(", ")) }
        ),
    ))
}

fn grouped_cv() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut spans = 0;
    let mut unbalanced = 0;
    for trial in 0..100 {
        let n_groups = rng.random_range(10..200);
        let n_folds = rng.random_range(2..=10.min(n_groups));
        let mut groups = Vec::new();
        for g in 0..n_groups {
            for _ in 0..rng.random_range(1..15) {
                groups.push(format!("P{g:04}"));
            }
        }
        let mut order: Vec<usize> = (0..groups.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let groups: Vec<String> = order.into_iter().map(|i| groups[i].clone()).collect();
        let folds = grouped_folds(&groups, n_folds, trial)?;
        let mut seen: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for (g, &f) in groups.iter().zip(&folds.row_fold) {
            seen.entry(g).or_default().insert(f);
        }
        spans += seen.values().filter(|s| s.len() > 1).count();
        let mut sizes = vec![0usize; n_folds];
        for &f in folds.fold_of_group.values() {
            sizes[f] += 1;
        }
        if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
            unbalanced += 1;
        }
    }
    Ok((
        spans == 0 && unbalanced == 0,
        format!("100 random structures: {spans} prospectuses span folds, {unbalanced} assignments unbalanced by > 1"),
    ))
}

fn pair_strategy() -> impl Strategy<Value = Vec<ExtractedPair>> {
    let roles = ["issuer", "originator", "trustee", "servicer"];
    prop::collection::vec((0..roles.len(), 0..6usize, 0..3usize), 0..12).prop_map(move |v| {
        v.into_iter()
            .map(|(r, f, alias)| ExtractedPair {
                role: Role::new(roles[r]),
                raw_name: format!("Bank {f} v{alias}"),
                standardized: FinancialInstitution::new(format!("bank_{f}"), format!("Bank {f}")),
            })
            .collect()
    })
}

fn extraction_fixtures() -> Result<Check> {
    let suite = ExtractionSuite::read_dir(&fixture_dir("extraction"))?;
    let kw = KeywordMap::default();
    let ner = DictNerExtractor { dict: &suite.dictionary, keywords: &kw };
    let cap = CapitalizedPhraseExtractor { dict: &suite.dictionary, keywords: &kw };
    let (mut tp, mut extracted, mut truth_total) = (0u64, 0u64, 0u64);
    for d in &suite.documents {
        let ex = extract_with_agreement(&ner, &cap, &d.id, &d.text);
        let mut got: BTreeMap<TermPair, u64> = BTreeMap::new();
        for p in &ex.pairs {
            *got.entry(p.key()).or_default() += 1;
        }
        let want: BTreeMap<TermPair, u64> = d.truth.iter().map(|(k, c)| (k.clone(), *c as u64)).collect();
        for (k, &c) in &got {
            tp += c.min(want.get(k).copied().unwrap_or(0));
        }
        extracted += got.values().sum::<u64>();
        truth_total += want.values().sum::<u64>();
    }
    let precision = tp as f64 / extracted.max(1) as f64;
    let recall = tp as f64 / truth_total.max(1) as f64;

    let mut runner = TestRunner::new(PtConfig {
        cases: 512,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let subset = runner
        .run(&(pair_strategy(), pair_strategy()), |(a, b)| {
            let out = agreement_filter(&a, &b);
            let keys_b: BTreeSet<TermPair> = b.iter().map(ExtractedPair::key).collect();
            prop_assert!(out.iter().all(|p| a.contains(p) && keys_b.contains(&p.key())));
            Ok(())
        })
        .is_ok();
    Ok((
        precision == 1.0 && recall == 1.0 && subset && suite.documents.len() >= 30,
        format!(
            "{} documents, {truth_total} mentions: precision {precision:.3}, recall {recall:.3}; agreement subset property {}",
            suite.documents.len(),
            if subset { "holds" } else { "fails" }
        ),
    ))
}

fn toxicity_fixtures() -> Result<Check> {
    let dir = fixture_dir("toxicity");
    let evidence = read_evidence_csv(open(&dir.join("evidence.csv"))?)?;
    let fixtures = read_community_fixtures(open(&dir.join("communities.json"))?)?;
    let labels = institution_labels(&evidence);
    let rules = ToxicityRules::default();
    let got: BTreeMap<usize, CommunityLabel> = fixtures
        .iter()
        .map(|f| (f.topic, label_community(f.topic, f.n_prospectuses, &f.prominent, &labels, &rules).value))
        .collect();
    let toxic: BTreeSet<usize> = got.iter().filter(|(_, l)| **l == CommunityLabel::Toxic).map(|(t, _)| *t).collect();
    let expected_toxic: BTreeSet<usize> = [3, 7, 12, 26, 27].into_iter().collect();
    let tarp_partial = [11, 22].iter().all(|t| got.get(t) == Some(&CommunityLabel::Partial));
    let mismatches: Vec<String> = fixtures
        .iter()
        .filter(|f| got[&f.topic] != f.expected)
        .map(|f| format!("topic {} got {}", f.topic, got[&f.topic].as_str()))
        .collect();
    Ok((
        toxic == expected_toxic && tarp_partial && mismatches.is_empty(),
        format!(
            "toxic {:?}, single-TARP fixtures partial: {tarp_partial}, {} of {} fixtures mislabeled{}",
            toxic,
            mismatches.len(),
            fixtures.len(),
            if mismatches.is_empty() { String::new() } else { format!(" ({})", mismatches.join(", ")) }
        ),
    ))
}

fn determinism() -> Result<Check> {
    let mut dirs = Vec::new();
    let mut times = Vec::new();
    for _ in 0..2 {
        let dir = tempdir();
        let cfg = PipelineConfig {
            seed: 42,
            out_dir: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        let t = Instant::now();
        Runner::new(cfg)?.run(Stage::All)?;
        times.push(t.elapsed());
        dirs.push(dir);
    }
    let (a, b) = (dirs[0].path(), dirs[1].path());
    let files_a = numeric_artifacts(a)?;
    let files_b = numeric_artifacts(b)?;
    let mut differing = Vec::new();
    for f in files_a.union(&files_b) {
        let (x, y) = (fs::read(a.join(f)).ok(), fs::read(b.join(f)).ok());
        if x.is_none() || x != y {
            differing.push(f.display().to_string());
        }
    }
    let slowest = times.iter().max().copied().unwrap_or_default();
    Ok((
        differing.is_empty() && !files_a.is_empty() && slowest < Duration::from_secs(600),
        format!(
            "{} artifacts compared, {} differ{}; slowest full run {} (< 600s)",
            files_a.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) },
            secs(slowest)
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(u8, &str, fn() -> Result<Check>); 9] = [
        (1, "static-limit equivalence", static_limit),
        (2, "community recovery", community_recovery),
        (3, "lasso oracle equivalence", lasso_oracle),
        (4, "sign recovery", sign_recovery),
        (5, "labeling boundary table", labeling_boundaries),
        (6, "grouped CV integrity", grouped_cv),
        (7, "extraction fixtures", extraction_fixtures),
        (8, "toxicity fixtures", toxicity_fixtures),
        (9, "end-to-end determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str()) || p == &id.to_string()) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(c)) => c,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failed += !pass as usize;
        println!(
            "criterion {id} [{}] {name}: {detail} [{}]",
            if pass { "PASS" } else { "FAIL" },
            secs(t.elapsed())
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
