use hilo_core::analysis::*;
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn oneway_data() -> RmTable {
    RmTable::from_rows(&[
        vec![4.0, 6.0, 9.0],
        vec![3.0, 5.5, 7.0],
        vec![5.0, 7.0, 8.5],
        vec![2.0, 4.0, 7.5],
    ])
    .unwrap()
}

fn twoway_data() -> RmTable {
    RmTable::from_cube(&[
        vec![vec![10.2, 8.1], vec![11.0, 8.9], vec![9.7, 8.3]],
        vec![vec![12.5, 9.0], vec![12.1, 9.8], vec![13.0, 10.4]],
        vec![vec![9.1, 7.7], vec![10.3, 7.2], vec![9.8, 8.0]],
        vec![vec![11.4, 9.9], vec![10.9, 8.8], vec![11.8, 9.1]],
        vec![vec![10.0, 8.4], vec![10.6, 9.3], vec![10.1, 7.9]],
    ])
    .unwrap()
}

#[test]
fn oneway_matches_reference() {
    let e = &rm_anova_oneway(&oneway_data()).unwrap().effects[0];
    assert!(close(e.f, 62.10638297872341, 1e-6), "{}", e.f);
    assert!(close(e.p, 9.783473173967773e-05, 1e-6), "{}", e.p);
    assert_eq!((e.df_num, e.df_den), (2.0, 6.0));
}

#[test]
fn twoway_matches_reference() {
    let r = rm_anova_twoway(&twoway_data()).unwrap();
    let expected = [
        ("condition", 0.3884629426798104, 2.0, 8.0, 0.6902242661284513),
        ("time", 126.96020214782037, 1.0, 4.0, 0.00035346679669840097),
        ("condition:time", 0.0738112136266859, 2.0, 8.0, 0.9294721215904053),
    ];
    for (name, f, d1, d2, p) in expected {
        let e = r.effect(name).unwrap();
        assert!(close(e.f, f, 1e-6 * f.max(1.0)), "{name} F {}", e.f);
        assert!(close(e.p, p, 1e-6), "{name} p {}", e.p);
        assert_eq!((e.df_num, e.df_den), (d1, d2));
    }
}

#[test]
fn paired_t_matches_reference() {
    let a = [3.1, 2.8, 3.6, 3.3, 2.9, 3.4];
    let b = [2.7, 2.9, 3.0, 2.8, 2.5, 3.1];
    let rows: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| vec![*x, *y]).collect();
    let pw = bonferroni_pairwise(&RmTable::from_rows(&rows).unwrap(), Factor::Condition).unwrap();
    assert_eq!(pw.len(), 1);
    assert!(close(pw[0].t.unwrap(), 3.529536388627274, 1e-6));
    assert!(close(pw[0].p_raw.unwrap(), 0.016748032144397414, 1e-6));
    assert_eq!(pw[0].p_adjusted, pw[0].p_raw);
    assert!(close(pw[0].mean_difference, 0.35, 1e-12));
    assert!(pw[0].significant_05 && !pw[0].significant_01);
}

#[test]
fn tail_probabilities_match_reference() {
    let cases = [
        (4.96, Distribution::F { d1: 1.0, d2: 10.0 }, 0.0500876505664682),
        (2.228, Distribution::T { df: 10.0 }, 0.050011771817111327),
        (3.49, Distribution::F { d1: 3.0, d2: 12.0 }, 0.05001096647177695),
        (4.10, Distribution::F { d1: 2.0, d2: 10.0 }, 0.05007754848108387),
        (2.571, Distribution::T { df: 5.0 }, 0.049974634683851375),
        (1.7, Distribution::F { d1: 2.5, d2: 7.5 }, 0.24778068385803204),
        (1.2, Distribution::T { df: 3.5 }, 0.3050144853778646),
    ];
    for (x, d, p) in cases {
        let got = tail_probability(x, d).unwrap();
        assert!(close(got, p, 1e-9), "{d:?} at {x}: {got} vs {p}");
        // Printed critical values are 5% points to three decimals.
        if p < 0.06 {
            assert!(close(got, 0.05, 1e-3));
        }
    }
}

#[test]
fn injected_day_effect_is_detected() {
    // Six walkers whose costs drop on day 2 by far more than the noise.
    use rand::SeedableRng;
    use rand_distr::{Distribution as _, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let cube: Vec<Vec<Vec<f64>>> = (0..6)
        .map(|s| {
            let base = 1.0 + 0.1 * s as f64;
            (0..3)
                .map(|_| (0..2).map(|d| base - 0.4 * d as f64 + noise.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let r = rm_anova_twoway(&RmTable::from_cube(&cube).unwrap()).unwrap();
    assert!(r.effect("time").unwrap().p < 0.05);
    assert!(r.effect("condition").unwrap().p > 0.05);
}

#[test]
fn summary_lists_effects_and_pairs() {
    let t = twoway_data();
    let anova = rm_anova_twoway(&t).unwrap();
    let pw = bonferroni_pairwise(&t, Factor::Condition).unwrap();
    let text = summary_table(&anova, &[(Factor::Condition, pw)]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 3);
    assert!(lines[2].starts_with("effect,time,126.960202,1,4,"));
    assert!(lines[4].starts_with("pairwise_condition,c1-c2,"));
}

fn table_strategy(conditions: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0..10.0f64, conditions), 3..9)
}

proptest! {
    #[test]
    fn two_level_oneway_is_squared_t(rows in table_strategy(2)) {
        let t = RmTable::from_rows(&rows).unwrap();
        let e = &rm_anova_oneway(&t).unwrap().effects[0];
        let pw = &bonferroni_pairwise(&t, Factor::Condition).unwrap()[0];
        if let (Some(tt), None) = (pw.t, e.degenerate) {
            prop_assert!((e.f - tt * tt).abs() <= 1e-8 * e.f.max(1.0));
            prop_assert!((e.p - pw.p_raw.unwrap()).abs() <= 1e-9);
        }
    }

    #[test]
    fn location_and_scale_invariance(rows in table_strategy(3), shift in -100.0..100.0f64, scale in 0.01..100.0f64) {
        let t = RmTable::from_rows(&rows).unwrap();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * scale + shift).collect()).collect();
        let a = &rm_anova_oneway(&t).unwrap().effects[0];
        let b = &rm_anova_oneway(&RmTable::from_rows(&moved).unwrap()).unwrap().effects[0];
        prop_assert!((a.f - b.f).abs() <= 1e-6 * a.f.max(1.0));
        prop_assert!((a.p - b.p).abs() <= 1e-8);
    }

    #[test]
    fn adjusted_bounds(rows in table_strategy(4)) {
        let pw = bonferroni_pairwise(&RmTable::from_rows(&rows).unwrap(), Factor::Condition).unwrap();
        prop_assert_eq!(pw.len(), 6);
        for r in pw {
            if let (Some(raw), Some(adj)) = (r.p_raw, r.p_adjusted) {
                prop_assert!(adj >= raw && adj <= 1.0);
                prop_assert!((0.0..=1.0).contains(&raw));
            }
        }
    }

    #[test]
    fn tails_decrease(x in 0.0..20.0f64, dx in 1e-3..5.0f64, d1 in 1.0..30.0f64, d2 in 1.0..30.0f64) {
        let f = |v| tail_probability(v, Distribution::F { d1, d2 }).unwrap();
        let t = |v| tail_probability(v, Distribution::T { df: d2 }).unwrap();
        prop_assert!(f(x + dx) <= f(x));
        prop_assert!(t(x + dx) <= t(x));
    }
}
