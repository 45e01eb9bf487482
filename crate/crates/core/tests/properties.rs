use cascadelab::deferral::{decide, optimal_selector, DeferralRule};
use cascadelab::eval::{
    accuracy_identity_check, bayes_defer_set, curve_from_scores, excess_risk_of_set, risk_of_defer_set,
    CurveGrid, CurveOptions, SupportTable,
};
use cascadelab::models::ProbModel;
use cascadelab::posthoc::{extract_features, feature_dim};
use cascadelab::worlds::{SupportPoint, SyntheticWorld};
use cascadelab::{ProbVector, Result, RngSeed};
use proptest::prelude::*;
use rand::Rng;

struct TableModel(Vec<ProbVector>);

impl ProbModel for TableModel {
    fn num_classes(&self) -> usize {
        self.0[0].num_classes()
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        Ok(self.0[x[0] as usize].clone())
    }
}

fn simplex(rng: &mut impl Rng, l: usize) -> ProbVector {
    let raw: Vec<f64> = (0..l).map(|_| rng.random::<f64>() + 1e-3).collect();
    ProbVector::normalize(&raw).unwrap()
}

/// World plus two table models, all drawn from `seed`.
fn setup(n: usize, l: usize, seed: u64) -> (SyntheticWorld, TableModel, TableModel) {
    let mut rng = RngSeed(seed).rng();
    let masses: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = masses.iter().sum();
    let world = SyntheticWorld::discrete(
        (0..n)
            .map(|i| SupportPoint {
                x: vec![i as f64],
                mass: masses[i] / total,
                posterior: simplex(&mut rng, l),
            })
            .collect(),
    )
    .unwrap();
    let m1 = TableModel((0..n).map(|_| simplex(&mut rng, l)).collect());
    let m2 = TableModel((0..n).map(|_| simplex(&mut rng, l)).collect());
    (world, m1, m2)
}

fn scored(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<bool>)> {
    (
        prop::collection::vec(-3i32..3, n).prop_map(|v| v.into_iter().map(|x| x as f64 * 0.5).collect()),
        prop::collection::vec(any::<bool>(), n),
        prop::collection::vec(any::<bool>(), n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_the_threshold_never_raises_the_rate(
        (scores, c1, c2) in (1usize..60).prop_flat_map(scored),
        mut ts in prop::collection::vec(-2.0f64..2.0, 1..8),
    ) {
        ts.sort_by(|a, b| a.total_cmp(b));
        let pts = curve_from_scores(&scores, &c1, &c2, &CurveGrid::Thresholds { thresholds: ts }, &CurveOptions::default()).unwrap();
        // points come out in descending threshold order
        for w in pts.windows(2) {
            prop_assert!(w[0].threshold >= w[1].threshold);
            prop_assert!(w[0].deferral_rate <= w[1].deferral_rate);
        }
    }

    #[test]
    fn matched_rates_hit_the_target_quantile(
        (scores, c1, c2) in (1usize..80).prop_flat_map(scored),
        mut rates in prop::collection::vec(0.0f64..=1.0, 1..10),
    ) {
        rates.sort_by(|a, b| a.total_cmp(b));
        let n = scores.len() as f64;
        let pts = curve_from_scores(&scores, &c1, &c2, &CurveGrid::rates(rates.clone()), &CurveOptions::default()).unwrap();
        for (p, a) in pts.iter().zip(&rates) {
            prop_assert!((p.deferral_rate - a).abs() <= 0.5 / n + 1e-12);
        }
    }

    #[test]
    fn curve_endpoints_are_the_base_models((scores, c1, c2) in (1usize..60).prop_flat_map(scored)) {
        let n = scores.len() as f64;
        let pts = curve_from_scores(&scores, &c1, &c2, &CurveGrid::rates(vec![0.0, 1.0]), &CurveOptions::default()).unwrap();
        let acc = |c: &[bool]| c.iter().filter(|b| **b).count() as f64 / n;
        prop_assert_eq!(pts[0].accuracy, acc(&c1));
        prop_assert_eq!(pts[1].accuracy, acc(&c2));
    }

    #[test]
    fn no_rule_beats_bayes(
        n in 1usize..10, l in 2usize..5, seed: u64,
        defer in prop::collection::vec(any::<bool>(), 10),
        c in 0.0f64..0.5,
    ) {
        let (world, m1, m2) = setup(n, l, seed);
        let table = SupportTable::build(&world, &[&m1, &m2]).unwrap();
        let defer = &defer[..n];
        let excess = excess_risk_of_set(&table, defer, c).unwrap();
        prop_assert!(excess >= -1e-15);
        let star = bayes_defer_set(&table, c);
        let gap = risk_of_defer_set(&table, defer, c).unwrap() - risk_of_defer_set(&table, &star, c).unwrap();
        prop_assert!((gap - excess).abs() <= 1e-12);
    }

    #[test]
    fn accuracy_decomposes_into_gain(
        n in 1usize..10, l in 2usize..5, seed: u64,
        a in prop::collection::vec(any::<bool>(), 10),
        b in prop::collection::vec(any::<bool>(), 10),
    ) {
        let (world, m1, m2) = setup(n, l, seed);
        let table = SupportTable::build(&world, &[&m1, &m2]).unwrap();
        let chk = accuracy_identity_check(&table, &a[..n], &b[..n], 1e-12).unwrap();
        prop_assert!(chk.residual_a <= 1e-12 && chk.residual_b <= 1e-12);
    }

    #[test]
    fn two_model_selector_is_the_bayes_rule(e1 in 0.0f64..=1.0, e2 in 0.0f64..=1.0, c in 0.0f64..=1.0) {
        let k = optimal_selector(&[1.0 - e1, 1.0 - e2], &[0.0, c]).unwrap();
        prop_assert_eq!(k == 1, decide(e2 - e1, c));
    }

    #[test]
    fn bayes_rule_scores_decide_like_the_set(n in 1usize..10, l in 2usize..5, seed: u64, c in 0.0f64..0.5) {
        let (world, m1, m2) = setup(n, l, seed);
        let table = SupportTable::build(&world, &[&m1, &m2]).unwrap();
        let scores = table.scores(0, &DeferralRule::Bayes { world: world.clone() }).unwrap();
        let set: Vec<bool> = scores.iter().map(|s| decide(*s, c)).collect();
        prop_assert_eq!(set, bayes_defer_set(&table, c));
    }

    #[test]
    fn features_have_a_fixed_layout(raw in prop::collection::vec(0.001f64..1.0, 2..25)) {
        let p = ProbVector::normalize(&raw).unwrap();
        let l = p.num_classes();
        let f = extract_features(&p);
        let v = f.as_slice();
        prop_assert_eq!(v.len(), feature_dim(l));
        prop_assert!(v[0] >= 0.0 && v[0] <= (l as f64).ln() + 1e-12);
        let top = &v[1..v.len() - l];
        prop_assert!(top.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(top[0], p.as_slice().iter().cloned().fold(0.0, f64::max));
        let onehot = &v[v.len() - l..];
        prop_assert_eq!(onehot.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(onehot[p.argmax()], 1.0);
    }
}
