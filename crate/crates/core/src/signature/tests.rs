use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::seeded;

fn random_series(n: usize, len: usize, seed: u64) -> MultivariateSeries {
    let mut rng = seeded(seed);
    MultivariateSeries::from_rows(
        (0..n)
            .map(|_| (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect(),
    )
    .unwrap()
}

/// Independent O(n^2 w) reference: explicit loop over the window offsets.
fn naive(series: &MultivariateSeries, t: usize, w: usize, i: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for d in 0..=w {
        acc += series.value(i, t - d) * series.value(j, t - d);
    }
    acc / w as f64
}

#[test]
fn pair_correlation_cases() {
    assert_eq!(pair_correlation(&[1.0; 11], &[1.0; 11], 10.0).unwrap(), 1.1);
    assert_eq!(pair_correlation(&[0.0; 11], &[3.0; 11], 10.0).unwrap(), 0.0);
    assert!(matches!(
        pair_correlation(&[1.0; 3], &[1.0; 4], 2.0),
        Err(Error::Shape(_))
    ));
    let mut rng = seeded(1);
    for _ in 0..50 {
        let a: Vec<f64> = (0..11).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..11).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut acc = 0.0;
        for k in 0..11 {
            acc += a[k] * b[k];
        }
        let want = acc / 10.0;
        let got = pair_correlation(&a, &b, 10.0).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
    }
}

#[test]
fn constant_ones() {
    let s = MultivariateSeries::from_rows(vec![vec![1.0; 100]; 3]).unwrap();
    let st = signature_tensor(&s, 80, &[10, 30, 60]).unwrap();
    for (c, w) in [10usize, 30, 60].into_iter().enumerate() {
        let want = (w + 1) as f64 / w as f64;
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(st.get(i, j, c), want);
            }
        }
    }
}

#[test]
fn matches_naive_triple_loop() {
    let s = random_series(30, 200, 2);
    let scales = [10, 30, 60];
    let st = signature_tensor(&s, 100, &scales).unwrap();
    assert_eq!(st.data.shape(), [30, 30, 3]);
    for (c, &w) in scales.iter().enumerate() {
        for i in 0..30 {
            for j in 0..30 {
                let want = naive(&s, 100, w, i, j);
                assert!((st.get(i, j, c) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }
}

#[test]
fn scaling_one_series_scales_its_row_and_column() {
    let s = random_series(5, 120, 3);
    let a = -2.5;
    let scaled = s.map_values(|i, v| if i == 2 { a * v } else { v });
    let base = signature_tensor(&s, 100, &[10, 30, 60]).unwrap();
    let got = signature_tensor(&scaled, 100, &[10, 30, 60]).unwrap();
    for c in 0..3 {
        for i in 0..5 {
            for j in 0..5 {
                let k = if i == 2 && j == 2 {
                    a * a
                } else if i == 2 || j == 2 {
                    a
                } else {
                    1.0
                };
                let want = k * base.get(i, j, c);
                assert!((got.get(i, j, c) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }
}

#[test]
fn insufficient_history() {
    let s = random_series(3, 100, 4);
    match signature_tensor(&s, 59, &[10, 30, 60]) {
        Err(Error::Context(msg)) => assert!(msg.contains("60"), "{msg}"),
        other => panic!("{other:?}"),
    }
    match signature_sequence(&s, 90, &[10, 30, 60], 5, 10) {
        Err(Error::Context(msg)) => assert!(msg.contains("100"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sequences() {
    let s = random_series(4, 150, 5);
    let one = signature_sequence(&s, 100, &[10, 30, 60], 1, 10).unwrap();
    assert_eq!(
        one.tensors,
        vec![signature_tensor(&s, 100, &[10, 30, 60]).unwrap()]
    );
    let five = signature_sequence(&s, 100, &[10, 30, 60], 5, 10).unwrap();
    assert_eq!(five.anchors(), [60, 70, 80, 90, 100]);
    for t in &five.tensors {
        let again = signature_tensor(&s, t.anchor, &[10, 30, 60]).unwrap();
        assert_eq!(t, &again);
    }
}

#[test]
fn schedules() {
    let test = anchor_schedule(10_000..20_000, &[10, 30, 60], 5, 10).unwrap();
    assert_eq!(test.len(), 1000);
    assert_eq!(
        (test[0], test[1], *test.last().unwrap()),
        (10_000, 10_010, 19_990)
    );
    let train = anchor_schedule(0..8000, &[10, 30, 60], 5, 10).unwrap();
    assert_eq!(train[0], 100);
    assert!(anchor_schedule(0..50, &[10, 30, 60], 5, 10)
        .unwrap()
        .is_empty());
}

proptest! {
    #[test]
    fn schedule_count(lo in 0usize..500, len in 1usize..800, g in 1usize..20, h in 1usize..6, w in 1usize..80) {
        let hi = lo + len;
        let anchors = anchor_schedule(lo..hi, &[w], h, g).unwrap();
        let need = w + (h - 1) * g;
        // counting oracle: anchors are the lo + k g inside [lo, hi) that are >= need
        let expected = (lo..hi).filter(|t| (t - lo) % g == 0 && *t >= need).count();
        prop_assert_eq!(anchors.len(), expected);
        if let Some(&first) = anchors.first() {
            prop_assert_eq!(anchors.len(), (hi - 1 - first) / g + 1);
            prop_assert!(anchors.windows(2).all(|p| p[1] - p[0] == g));
        }
    }

    #[test]
    fn symmetric_and_bilinear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let s = random_series(6, 90, seed);
        let base = signature_tensor(&s, 70, &[5, 20, 60]).unwrap();
        for c in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert_eq!(base.get(i, j, c), base.get(j, i, c));
                }
            }
        }
        let scaled = s.map_values(|i, v| match i { 1 => a * v, 4 => b * v, _ => v });
        let got = signature_tensor(&scaled, 70, &[5, 20, 60]).unwrap();
        for c in 0..3 {
            let want = a * b * base.get(1, 4, c);
            prop_assert!((got.get(1, 4, c) - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn perturbation_is_local(seed in 0u64..1000, series in 0usize..5, back in 0usize..70) {
        let s = random_series(5, 100, seed);
        let t = 90;
        let step = t - back;
        let bumped = s.map_values(|_, v| v);
        let mut rows: Vec<Vec<f64>> = bumped.rows().map(<[f64]>::to_vec).collect();
        rows[series][step] += 1.7;
        let bumped = MultivariateSeries::from_rows(rows).unwrap();
        let scales = [10, 30, 60];
        let a = signature_tensor(&s, t, &scales).unwrap();
        let b = signature_tensor(&bumped, t, &scales).unwrap();
        for (c, &w) in scales.iter().enumerate() {
            for i in 0..5 {
                for j in 0..5 {
                    let changed = a.get(i, j, c) != b.get(i, j, c);
                    if changed {
                        prop_assert!(i == series || j == series);
                        prop_assert!(back <= w);
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_equivariant(seed in 0u64..1000) {
        let s = random_series(5, 80, seed);
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| s.row(p).to_vec()).collect();
        let ps = MultivariateSeries::from_rows(rows).unwrap();
        let a = signature_tensor(&s, 70, &[10, 30, 60]).unwrap();
        let b = signature_tensor(&ps, 70, &[10, 30, 60]).unwrap();
        for c in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(b.get(i, j, c), a.get(perm[i], perm[j], c));
                }
            }
        }
    }
}

#[test]
fn bank_and_cache_round_trip() {
    let s = random_series(4, 300, 6);
    let anchors = anchor_schedule(100..300, &[10, 30], 3, 10).unwrap();
    let bank = SignatureBank::build(&s, &anchors, &[10, 30], 3, 10, Exec::Parallel).unwrap();
    let seq = bank.sequence(anchors[2]).unwrap();
    let direct = signature_sequence(&s, anchors[2], &[10, 30], 3, 10).unwrap();
    for (a, b) in seq.iter().zip(&direct.tensors) {
        assert_eq!(**a, b.data);
    }
    let seq_bank = SignatureBank::build(&s, &anchors, &[10, 30], 3, 10, Exec::Sequential).unwrap();
    assert!(bank.steps().zip(seq_bank.steps()).all(|(x, y)| x == y));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.sig");
    write_cache(&p, &bank).unwrap();
    let (hdr, back) = read_cache(&p).unwrap();
    assert_eq!(
        hdr,
        CacheHeader {
            n: 4,
            scales: vec![10, 30],
            h: 3,
            g: 10
        }
    );
    assert!(bank.steps().zip(back.steps()).all(|(x, y)| x == y));
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"MSSG");
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_cache(&p).is_err());
}

#[test]
fn standardizer_uses_reference_range() {
    let s = random_series(3, 200, 7);
    let st = Standardizer::fit(&s, 0..100);
    let z = st.apply(&s).unwrap();
    let (m, sd) = moments(&z, 0..100);
    assert!(m.iter().all(|v| v.abs() < 1e-12));
    assert!(sd.iter().all(|v| (v - 1.0).abs() < 1e-12));
    let flat = MultivariateSeries::from_rows(vec![vec![2.0; 10], vec![1.0; 10]]).unwrap();
    let st = Standardizer::fit(&flat, 0..10);
    assert_eq!(st.std, [1.0, 1.0]);
}
