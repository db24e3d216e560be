use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use proptest::prelude::*;

use rmbs_core::lasso::{fit_single, grouped_folds, kkt_certificate, lambda_max, LassoConfig};
use rmbs_core::performance::{label_security, summarize_rates, GroupKey, LabeledSecurity, PaymentSummary, PerfThresholds, SecurityClass};
use rmbs_core::topics::{min_cost_assignment, total_variation};
use rmbs_core::toxicity::{label_community, CommunityLabel, InstitutionToxicity, ProminentInstitution, ToxicityRules};
use rmbs_core::corpus::Role;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn cost_of(cost: &[Vec<f64>], a: &[usize]) -> f64 {
    a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

fn square(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0.0..10.0f64, n), n))
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn logistic_instance() -> impl Strategy<Value = (Array2<f64>, Vec<f64>)> {
    (20..80usize, 2..8usize).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(-2.0..2.0f64, n * p),
            prop::collection::vec(-1.5..1.5f64, p),
            prop::collection::vec(0.0..1.0f64, n),
        )
            .prop_filter_map("one outcome class", move |(xs, beta, u)| {
                let x = Array2::from_shape_vec((n, p), xs).ok()?;
                let y: Vec<f64> = (0..n)
                    .map(|i| {
                        let eta: f64 = (0..p).map(|j| x[[i, j]] * beta[j]).sum();
                        (u[i] < 1.0 / (1.0 + (-eta).exp())) as u8 as f64
                    })
                    .collect();
                let pos = y.iter().sum::<f64>();
                (pos >= 2.0 && pos <= n as f64 - 2.0).then_some((x, y))
            })
    })
}

fn class() -> impl Strategy<Value = SecurityClass> {
    prop::sample::select(SecurityClass::ALL.to_vec())
}

fn rank(l: InstitutionToxicity) -> u8 {
    l as u8
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn assignment_matches_brute_force(cost in square(6)) {
        let a = min_cost_assignment(&cost);
        let mut seen = a.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..cost.len()).collect::<Vec<_>>());
        let best = permutations(cost.len()).iter().map(|p| cost_of(&cost, p)).fold(f64::INFINITY, f64::min);
        prop_assert!((cost_of(&cost, &a) - best).abs() < 1e-9);
    }

    #[test]
    fn total_variation_is_a_bounded_metric(a in simplex(8), b in simplex(8), c in simplex(8)) {
        let ab = total_variation(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - total_variation(&b, &a)).abs() < 1e-15);
        prop_assert!(total_variation(&a, &a) == 0.0);
        prop_assert!(ab <= total_variation(&a, &c) + total_variation(&c, &b) + 1e-12);
    }

    #[test]
    fn lasso_fits_satisfy_kkt((x, y) in logistic_instance(), frac in 0.02..0.95f64) {
        let p = x.ncols();
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let standardize: Vec<bool> = (0..p).map(|j| j % 2 == 1).collect();
        let cfg = LassoConfig { tol: 1e-10, max_iter: 1000, ..LassoConfig::default() };
        let lmax = lambda_max(x.view(), &y, &standardize).unwrap();
        let fit = fit_single(x.view(), &y, &standardize, &names, frac * lmax, &cfg).unwrap();
        prop_assert!(kkt_certificate(&fit, x.view(), &y).unwrap().passes(1e-6));
        let empty = fit_single(x.view(), &y, &standardize, &names, lmax * (1.0 + 1e-9), &cfg).unwrap();
        prop_assert!(empty.coefficients.is_empty());
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        prop_assert!((empty.intercept - (mean / (1.0 - mean)).ln()).abs() < 1e-6);
    }

    #[test]
    fn folds_keep_groups_whole(sizes in prop::collection::vec(1..12usize, 2..80), n_folds in 2..10usize, seed in any::<u64>()) {
        let n_folds = n_folds.min(sizes.len());
        let groups: Vec<String> = sizes.iter().enumerate().flat_map(|(g, &s)| std::iter::repeat_n(format!("g{g}"), s)).collect();
        let f = grouped_folds(&groups, n_folds, seed).unwrap();
        let mut fold_of: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for (g, &k) in groups.iter().zip(&f.row_fold) {
            prop_assert!(k < n_folds);
            fold_of.entry(g).or_default().insert(k);
        }
        prop_assert!(fold_of.values().all(|s| s.len() == 1));
        let mut counts = vec![0usize; n_folds];
        for &k in f.fold_of_group.values() {
            counts[k] += 1;
        }
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        prop_assert_eq!(f, grouped_folds(&groups, n_folds, seed).unwrap());
    }

    #[test]
    fn labels_are_monotone_in_shortfall(
        c in class(),
        p in 0.0..6000.0f64, o in 0.0..6000.0f64,
        dp in 0.0..3000.0f64, d_o in 0.0..3000.0f64,
    ) {
        let th = PerfThresholds::default();
        let lo = label_security(c, &PaymentSummary::new(p, o), &th).unwrap();
        let hi = label_security(c, &PaymentSummary::new(p + dp, o + d_o), &th).unwrap();
        prop_assert!(!lo.fe || hi.fe);
        prop_assert!(!lo.fne || hi.fne);
        prop_assert!(lo.fe == lo.fne || lo.fne, "FE implies FNE");
    }

    #[test]
    fn rates_partition_the_sample(rows in prop::collection::vec((class(), 2002..2008i32, 0.0..8000.0f64, 0.0..8000.0f64), 1..60)) {
        let th = PerfThresholds::default();
        let labeled: Vec<LabeledSecurity> = rows.iter().enumerate().map(|(i, &(class, year, p, o))| LabeledSecurity {
            security_id: format!("s{i}"),
            class,
            year,
            label: label_security(class, &PaymentSummary::new(p, o), &th).unwrap(),
        }).collect();
        let overall = summarize_rates(&labeled, &[]).unwrap();
        prop_assert_eq!(overall.len(), 1);
        let by = summarize_rates(&labeled, &[GroupKey::Year, GroupKey::Class]).unwrap();
        prop_assert_eq!(by.iter().map(|r| r.n).sum::<usize>(), labeled.len());
        let fe: f64 = by.iter().map(|r| r.fe_rate * r.n as f64).sum();
        prop_assert!((fe / labeled.len() as f64 - overall[0].fe_rate).abs() < 1e-9);
        prop_assert!(by.iter().all(|r| r.fe_rate <= r.fne_rate + 1e-12));
    }

    #[test]
    fn upgrading_an_institution_never_lowers_the_community(
        flags in prop::collection::vec((0..3u8, any::<bool>()), 1..8),
        who in any::<prop::sample::Index>(),
    ) {
        let to_label = |v: u8| [InstitutionToxicity::None, InstitutionToxicity::Partial, InstitutionToxicity::Toxic][v as usize];
        let prominent: Vec<ProminentInstitution> = flags.iter().enumerate().map(|(i, &(_, key))| ProminentInstitution {
            fi: format!("fi{i}"),
            roles: [if key { Role::originator() } else { Role::new("trustee") }].into_iter().collect(),
            years: [2005].into_iter().collect(),
        }).collect();
        let mut labels: BTreeMap<String, InstitutionToxicity> =
            flags.iter().enumerate().map(|(i, &(v, _))| (format!("fi{i}"), to_label(v))).collect();
        let rules = ToxicityRules::default();
        let before = label_community(0, 100, &prominent, &labels, &rules).value;
        let i = who.index(flags.len());
        let key = format!("fi{i}");
        let up = to_label((rank(labels[&key]) + 1).min(2));
        labels.insert(key, up);
        let after = label_community(0, 100, &prominent, &labels, &rules).value;
        prop_assert!(before != CommunityLabel::Excluded && after != CommunityLabel::Excluded);
        prop_assert!(after >= before, "{:?} -> {:?}", before, after);
    }
}
