use causalfit::bif::{fixtures, parse_bif, unparse_bif};
use causalfit::graph::{gen_graph, GraphKind};
use causalfit::io::{read_dataset, write_dataset};
use causalfit::scm::*;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = GraphKind> {
    prop::sample::select(GraphKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn samples_stay_in_range(k in kind(), n in 3..7usize, card in 2..5usize, seed in 0..1000u64) {
        let g = gen_graph(k, n, 0.4, seed).unwrap();
        for cgm in [
            make_neural_cgm(&g, card, seed).unwrap(),
            make_product_cgm(&g, card, seed).unwrap(),
            make_deterministic_cgm(&g, card, seed, true).unwrap(),
        ] {
            let s = sample_obs(&cgm, 50, seed, &[]);
            prop_assert_eq!(s.rows(), 50);
            prop_assert!(s.as_slice().iter().all(|&v| usize::from(v) < card));
            for cpd in &cgm.cpds {
                let t = cpd.to_table(&cgm.cards());
                for row in t.chunks(card) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn intervened_column_ignores_parents(n in 2..6usize, seed in 0..1000u64) {
        let g = gen_graph(GraphKind::Chain, n, 0.0, seed).unwrap();
        let cgm = make_deterministic_cgm(&g, 3, seed, false).unwrap();
        let t = n - 1;
        let s = sample_int(&cgm, t, 600, seed, &[]).unwrap();
        // a deterministic child would follow its parent; under intervention every category shows up
        let mut seen = [0usize; 3];
        for r in s.iter() {
            seen[usize::from(r[t])] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c > 120), "{:?}", seen);
    }

    #[test]
    fn bif_round_trip_preserves_tables(n in 2..6usize, card in 2..4usize, seed in 0..1000u64) {
        let g = gen_graph(GraphKind::Random, n, 0.5, seed).unwrap();
        let cgm = make_neural_cgm(&g, card, seed).unwrap();
        let text = unparse_bif(&cgm, "net").unwrap();
        let back = parse_bif(&text).unwrap();
        prop_assert_eq!(back.graph.edges(), cgm.graph.edges());
        let cards = cgm.cards();
        for (a, b) in cgm.cpds.iter().zip(&back.cpds) {
            for (x, y) in a.to_table(&cards).iter().zip(b.to_table(&cards)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dataset_round_trip_is_exact(n in 2..6usize, card in 2..12usize, seed in 0..1000u64) {
        let g = gen_graph(GraphKind::Random, n, 0.4, seed).unwrap();
        let cgm = make_product_cgm(&g, card, seed).unwrap();
        let targets: Vec<usize> = (0..n).step_by(2).collect();
        let data = generate_dataset(&cgm, 30, 7, &targets, seed, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        prop_assert_eq!(read_dataset(dir.path()).unwrap(), data);
    }
}

/// Frequencies sampled from a parsed network match its exact marginals.
#[test]
fn parsed_network_sampling_matches_exact_marginals() {
    for text in [fixtures::CANCER, fixtures::ASIA] {
        let cgm = parse_bif(text).unwrap();
        let joint = exact_joint(&cgm).unwrap();
        let rows = 200_000;
        let s = sample_obs(&cgm, rows, 11, &[]);
        for v in 0..cgm.n() {
            let m = joint.marginalize(&[v]);
            for c in 0..cgm.cards()[v] {
                let p = m.prob(&[c]);
                let hat = s.iter().filter(|r| usize::from(r[v]) == c).count() as f64 / rows as f64;
                let se = (p * (1.0 - p) / rows as f64).sqrt();
                assert!((hat - p).abs() <= 4.0 * se + 1e-9, "var {v} cat {c}: {hat} vs {p}");
            }
        }
    }
}
