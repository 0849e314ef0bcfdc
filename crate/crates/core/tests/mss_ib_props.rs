use proptest::prelude::*;

use vibmark::ib::{check_curve_geometry, geometric_schedule, solve_ib, trace_curve, IbOptions};
use vibmark::info::{entropy, mutual_information, JointPMF};
use vibmark::mss::{bell_number, construct_mss, enumerate_partitions, is_sufficient, statistic_rate, verify_theorems, Partition};

const TOL: f64 = 1e-9;

fn joint(max_m: usize, max_x: usize) -> impl Strategy<Value = JointPMF> {
    (2..=max_m, 2..=max_x).prop_flat_map(|(m, x)| {
        let cell = prop_oneof![1 => Just(0.0), 4 => 0.01f64..1.0];
        prop::collection::vec(cell, m * x)
            .prop_filter("needs mass", |w| w.iter().sum::<f64>() > 0.0)
            .prop_map(move |w| JointPMF::renormalized(m, x, w).unwrap())
    })
}

/// Joints with repeated columns, so the MSS merges symbols.
fn redundant_joint() -> impl Strategy<Value = JointPMF> {
    (joint(3, 3), prop::collection::vec((0usize..3, 0.1f64..2.0), 1..4)).prop_map(|(base, copies)| {
        let (m, x) = (base.m_size(), base.x_size());
        let cols = x + copies.len();
        let mut w = vec![0.0; m * cols];
        for r in 0..m {
            for c in 0..x {
                w[r * cols + c] = base.get(r, c);
            }
            for (k, (src, scale)) in copies.iter().enumerate() {
                w[r * cols + x + k] = base.get(r, src % x) * scale;
            }
        }
        JointPMF::renormalized(m, cols, w).unwrap()
    })
}

/// All set partitions of 0..n as restricted-growth strings.
fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for b in 0..=max + 1 {
            prefix.push(b);
            go(prefix, max.max(b), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        go(&mut vec![0], 0, n, &mut out);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn theorems_hold_unless_borderline(j in prop_oneof![joint(3, 6), redundant_joint()]) {
        let r = verify_theorems(&j, TOL).unwrap();
        prop_assert!(r.mss_sufficient);
        if !r.borderline {
            prop_assert!(r.theorem2_holds && r.theorem3_holds, "{r:?}");
        }
        prop_assert_eq!(r.partitions_checked as u64, bell_number(j.x_size()));
    }

    #[test]
    fn mss_rate_matches_brute_force(j in prop_oneof![joint(3, 5), redundant_joint()]) {
        let i_mx = mutual_information(&j).0;
        let mut best = f64::INFINITY;
        for labels in all_partitions(j.x_size()) {
            let t = Partition::from_labels(&labels).unwrap();
            let pushed = vibmark::info::apply_statistic(&j, &t).unwrap();
            if i_mx - mutual_information(&pushed).0 <= TOL {
                best = best.min(statistic_rate(&j, &t).unwrap().0);
            }
        }
        let r = verify_theorems(&j, TOL).unwrap();
        prop_assert!((r.rate.0 - best).abs() < 1e-9, "{} vs {best}", r.rate.0);
    }

    #[test]
    fn refining_the_mss_stays_sufficient(j in redundant_joint()) {
        let mss = construct_mss(&j, TOL);
        prop_assert!(is_sufficient(&j, &mss, TOL).unwrap().sufficient);
        let id = Partition::identity(j.x_size());
        prop_assert!(is_sufficient(&j, &id, TOL).unwrap().sufficient);
        prop_assert!(statistic_rate(&j, &mss).unwrap().0 <= statistic_rate(&j, &id).unwrap().0 + 1e-12);
    }

    #[test]
    fn ib_point_respects_information_bounds(j in joint(3, 5), beta in 0.05f64..5.0, seed in 0u64..1000) {
        let z = j.x_size();
        let sol = solve_ib(&j, beta, z, seed, 1e-10, 2000).unwrap();
        let p = &sol.point;
        let i_mx = mutual_information(&j).0;
        let h_x = entropy(&j.marginal_x()).0;
        prop_assert!(p.rate >= -1e-12 && p.rate <= h_x + 1e-9);
        prop_assert!(p.relevance >= -1e-12 && p.relevance <= i_mx + 1e-9);
        prop_assert!(p.relevance <= p.rate + 1e-9);
        prop_assert!((p.epsilon - (i_mx - p.relevance)).abs() < 1e-12);
        prop_assert!((p.objective - (p.relevance - beta * p.rate)).abs() < 1e-12);
        prop_assert!(sol.max_objective_drop <= 1e-10);
        let row_sums_ok = sol.encoder.rows().iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(row_sums_ok);
    }

    #[test]
    fn traced_relevance_grows_as_beta_falls(j in joint(3, 4), seed in 0u64..100) {
        let schedule = geometric_schedule(8.0, 0.05, 6);
        let pts = trace_curve(&j, &schedule, j.x_size(), seed, &IbOptions::default()).unwrap();
        prop_assert_eq!(pts.len(), schedule.len());
        prop_assert!(pts.windows(2).all(|w| w[0].relevance <= w[1].relevance));
        let mut by_beta = pts.clone();
        by_beta.sort_by(|a, b| b.beta.total_cmp(&a.beta));
        for w in by_beta.windows(2) {
            prop_assert!(w[1].relevance >= w[0].relevance - 1e-9, "{w:?}");
        }
        match check_curve_geometry(&pts, 0.15) {
            Ok(g) => prop_assert!(g.monotone),
            Err(e) => prop_assert!(matches!(e, vibmark::Error::Degenerate(_)), "{e}"),
        }
    }
}

#[test]
fn partition_enumeration_matches_bell_numbers() {
    for n in 1..=7 {
        let parts = enumerate_partitions(n).unwrap();
        assert_eq!(parts.len() as u64, bell_number(n));
        assert_eq!(parts.len(), all_partitions(n).len());
    }
}
