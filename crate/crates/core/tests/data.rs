use oar_core::data::{
    attach_orders, dataset_from_bytes, dataset_to_bytes, generate_corpus, load_dataset, save_dataset, split_dataset,
    Background, CorpusSpec,
};
use oar_core::grid::{GridShape, Order};
use oar_core::rng::SeededStream;
use oar_core::Error;
use proptest::prelude::*;

fn spec(classes: usize, per_class: usize, background: Background) -> CorpusSpec {
    CorpusSpec {
        classes,
        per_class,
        background,
        seed: 5,
        ..CorpusSpec::default()
    }
}

#[test]
fn constant_background_is_majority() {
    for class_count in [1, 8] {
        let d = generate_corpus(&spec(class_count, 200, Background::Constant)).unwrap();
        for s in &d.samples {
            let bg = s.tokens.iter().filter(|&&t| t == 0).count();
            assert!(bg * 2 >= s.tokens.len());
        }
    }
}

#[test]
fn noisy_background_uses_noise_range_only() {
    let sp = spec(4, 50, Background::Noisy);
    let d = generate_corpus(&sp).unwrap();
    for i in 0..d.len() {
        let fg = d.foreground_mask(i);
        let class = d.class_of(i);
        let pal = sp.palette(class);
        for (t, f) in d.samples[i].tokens.iter().zip(fg) {
            if f {
                assert!(pal.contains(t));
            } else {
                assert!((48..64).contains(&(*t as usize)));
            }
        }
    }
}

#[test]
fn corpus_is_deterministic() {
    let sp = spec(3, 20, Background::Noisy);
    assert_eq!(generate_corpus(&sp).unwrap(), generate_corpus(&sp).unwrap());
    let mut other = sp.clone();
    other.seed = 6;
    assert_ne!(generate_corpus(&sp).unwrap(), generate_corpus(&other).unwrap());
}

/// Pearson χ² test of homogeneity between two token histograms.
fn chi2_homogeneity(a: &[f64], b: &[f64]) -> (f64, usize) {
    let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let mut stat = 0.0;
    let mut cells = 0;
    for (x, y) in a.iter().zip(b) {
        let tot = x + y;
        if tot == 0.0 {
            continue;
        }
        cells += 1;
        let ea = tot * na / (na + nb);
        let eb = tot * nb / (na + nb);
        stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    (stat, cells - 1)
}

#[test]
fn class_histograms_differ() {
    let d = generate_corpus(&spec(2, 500, Background::Constant)).unwrap();
    let mut h = vec![vec![0.0; 64]; 2];
    for i in 0..d.len() {
        for &t in &d.samples[i].tokens {
            h[d.class_of(i)][t as usize] += 1.0;
        }
    }
    let (stat, dof) = chi2_homogeneity(&h[0], &h[1]);
    // χ² critical value at p = 0.01 is below 2·dof + 10 for these dof.
    assert!(stat > 2.0 * dof as f64 + 10.0, "χ² = {stat} with {dof} dof");
}

#[test]
fn class_encoding_round_trips() {
    let sp = CorpusSpec {
        cond_vocab: 3,
        cond_len: 3,
        classes: 10,
        ..CorpusSpec::default()
    };
    for c in 0..10 {
        let enc = sp.encode_class(c);
        assert_eq!(enc.len(), 3);
        assert_eq!(sp.decode_class(&enc), c);
    }
    assert_eq!(sp.encode_class(5), vec![0, 1, 2]);
}

#[test]
fn invalid_specs_rejected() {
    let mut sp = CorpusSpec::default();
    sp.background_token = 64;
    assert!(matches!(generate_corpus(&sp), Err(Error::Validation(_))));
    let mut sp = CorpusSpec::default();
    sp.background_token = 2;
    assert!(generate_corpus(&sp).is_err());
    let mut sp = CorpusSpec::default();
    sp.classes = 16;
    assert!(generate_corpus(&sp).is_err());
    let mut sp = CorpusSpec::default();
    sp.cond_vocab = 2;
    sp.cond_len = 2;
    assert!(generate_corpus(&sp).is_err());
}

#[test]
fn split_counts_and_union() {
    let d = generate_corpus(&spec(10, 100, Background::Constant)).unwrap();
    let mut s = SeededStream::new(1, 1);
    let (tr, te) = split_dataset(&d, 0.9, &mut s).unwrap();
    assert_eq!((tr.len(), te.len()), (900, 100));
    let mut all: Vec<_> = tr.samples.iter().chain(&te.samples).map(|x| format!("{x:?}")).collect();
    let mut orig: Vec<_> = d.samples.iter().map(|x| format!("{x:?}")).collect();
    all.sort();
    orig.sort();
    assert_eq!(all, orig);
    let mut s2 = SeededStream::new(1, 1);
    assert_eq!(split_dataset(&d, 0.9, &mut s2).unwrap(), (tr, te));
    assert!(split_dataset(&d, 1.0, &mut s2).is_err());
}

#[test]
fn split_is_stratified() {
    let d = generate_corpus(&spec(7, 33, Background::Noisy)).unwrap();
    let mut s = SeededStream::new(2, 1);
    let (tr, _) = split_dataset(&d, 0.9, &mut s).unwrap();
    for c in 0..7 {
        let n = (0..tr.len()).filter(|&i| tr.class_of(i) == c).count();
        assert!((n as f64 - 0.9 * 33.0).abs() <= 1.0);
    }
}

#[test]
fn save_load_round_trip_with_and_without_orders() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_corpus(&spec(2, 5, Background::Noisy)).unwrap();
    let p = dir.path().join("a.oard");
    save_dataset(&d, &p).unwrap();
    let back = load_dataset(&p).unwrap();
    assert_eq!(back, d);
    let p2 = dir.path().join("b.oard");
    save_dataset(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());

    let mut s = SeededStream::new(3, 3);
    let orders: Vec<Order> = (0..d.len())
        .map(|_| oar_core::grid::sample_uniform_order(64, &mut s))
        .collect();
    let labeled = attach_orders(&d, orders.clone()).unwrap();
    let back = dataset_from_bytes(&dataset_to_bytes(&labeled)).unwrap();
    let read: Vec<Order> = back.samples.iter().map(|x| x.order.clone().unwrap()).collect();
    assert_eq!(read, orders);
}

#[test]
fn corruption_and_truncation_reported() {
    let d = generate_corpus(&spec(2, 5, Background::Constant)).unwrap();
    let bytes = dataset_to_bytes(&d);
    let mut bad = bytes.clone();
    bad[100] ^= 0x10;
    match dataset_from_bytes(&bad) {
        Err(Error::Format { message, .. }) => assert!(message.contains("checksum")),
        other => panic!("expected checksum failure, got {other:?}"),
    }
    let mut magic = bytes.clone();
    magic[1] = b'x';
    assert!(matches!(
        dataset_from_bytes(&magic),
        Err(Error::Format { offset: 0, .. })
    ));
    assert!(matches!(dataset_from_bytes(&bytes[..6]), Err(Error::Format { .. })));
    assert!(load_dataset("/nonexistent/x.oard").unwrap_err().is_validation());
}

#[test]
fn attach_orders_validation() {
    let d = generate_corpus(&spec(1, 3, Background::Constant)).unwrap();
    assert!(attach_orders(&d, vec![Order::raster(64); 2]).is_err());
    assert!(attach_orders(&d, vec![Order::raster(63); 3]).is_err());
    let ok = attach_orders(&d, vec![Order::raster(64); 3]).unwrap();
    assert!(ok.samples.iter().all(|s| s.order.as_ref().unwrap().is_raster()));
    assert!(Order::new(vec![0, 0, 1], 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn tokens_in_bounds_for_any_grid(rows in 1usize..7, cols in 1usize..7, seed in 0u64..1000, noisy in any::<bool>()) {
        let sp = CorpusSpec {
            grid: GridShape { rows, cols },
            classes: 5,
            per_class: 4,
            background: if noisy { Background::Noisy } else { Background::Constant },
            seed,
            ..CorpusSpec::default()
        };
        let d = generate_corpus(&sp).unwrap();
        let back = dataset_from_bytes(&dataset_to_bytes(&d)).unwrap();
        prop_assert_eq!(&back, &d);
        for s in &d.samples {
            prop_assert!(s.tokens.iter().all(|&t| (t as usize) < sp.vocab));
            if !noisy {
                let bg = s.tokens.iter().filter(|&&t| t == 0).count();
                prop_assert!(bg * 2 >= s.tokens.len());
            }
        }
    }
}
