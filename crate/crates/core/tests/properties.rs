use lgdea_core::numerics::softmax_row;
use lgdea_core::relation::{build_graphs, propagate};
use lgdea_core::{Graph, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn shaped() -> impl Strategy<Value = Matrix> {
    (1usize..7, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        v in prop::collection::vec(-50.0f64..50.0, 1..20),
        shift in -100.0f64..100.0,
        tau in 0.05f64..5.0,
    ) {
        let p = softmax_row(&v, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax_row(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_of_softmax_rows_is_non_negative_and_zero_on_itself(
        a in (1usize..6, 2usize..9).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c))),
    ) {
        let mut g = Graph::new();
        let p = g.constant(a.0);
        let q = g.constant(a.1);
        let p = g.row_softmax(p, 1.0).unwrap();
        let q = g.row_softmax(q, 1.0).unwrap();
        let pq = g.kl_rows(p, q, 1e-12).unwrap();
        let pp = g.kl_rows(p, p, 1e-12).unwrap();
        prop_assert!(g.value(pq).data().iter().all(|&x| x >= -1e-9));
        prop_assert!(g.value(pp).data().iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn matmul_agrees_with_its_transposed_forms(
        (a, b) in (1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m))),
    ) {
        let ab = a.matmul(&b).unwrap();
        let via_t = a.matmul_t(&b.transpose()).unwrap();
        let via_tt = a.transpose().t_matmul(&b).unwrap();
        for (x, (y, z)) in ab.data().iter().zip(via_t.data().iter().zip(via_tt.data())) {
            prop_assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
        prop_assert_eq!(ab.transpose().transpose(), ab);
    }

    #[test]
    fn propagated_rows_are_distributions_or_empty(
        (y, h_i, h_r) in (2usize..7, 2usize..7, 2usize..6).prop_flat_map(|(ni, nr, d)| (
            prop::collection::vec(prop::bool::weighted(0.3), ni * nr)
                .prop_map(move |b| Matrix::from_vec(
                    ni, nr, b.into_iter().map(|x| if x { 1.0 } else { 0.0 }).collect()
                ).unwrap()),
            matrix(ni, d),
            matrix(nr, d),
        )),
        steps in 0usize..4,
    ) {
        let (s_i, s_t) = build_graphs(&h_i, &h_r, 0.5).unwrap().unwrap();
        for s in [&s_i, &s_t] {
            for row in s.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let p = propagate(&y, &s_i, &s_t, steps).unwrap();
        for (i, row) in p.iter_rows().enumerate() {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            let s: f64 = row.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9, "row {} sums to {}", i, s);
            if steps == 0 {
                prop_assert_eq!(s == 0.0, y.row(i).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn l2_normalised_rows_have_unit_norm(m in shaped()) {
        let mut g = Graph::new();
        let x = g.constant(m.clone());
        let n = g.l2_normalize_rows(x);
        for (row, orig) in g.value(n).iter_rows().zip(m.iter_rows()) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let orig_norm: f64 = orig.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(orig_norm < 1e-6 || (norm - 1.0).abs() < 1e-9);
        }
    }
}
