use oar_demo_wasm::{gumbel_frequencies, order_distance, truncated_softmax, Demo};

#[test]
fn raster_distance_on_16() {
    let d = order_distance(16, false, 1, 0).unwrap();
    assert!((d - 465.0 / 255.0).abs() < 1e-12);
    let r = order_distance(16, true, 200, 1).unwrap();
    // Mean L∞ distance over ordered pairs of distinct cells: 7.475.
    assert!((r - 7.475).abs() < 0.05, "{r}");
}

#[test]
fn gumbel_frequencies_track_truncated_softmax() {
    let logits = vec![2.0, 1.0, 0.5, -1.0];
    for k in [1, 2, 4] {
        let f = gumbel_frequencies(logits.clone(), k, 20_000, 3).unwrap();
        let p = truncated_softmax(logits.clone(), k);
        let tv: f64 = f.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.02, "k={k} tv={tv}");
        assert_eq!(p.iter().filter(|&&x| x > 0.0).count(), k);
    }
}

#[test]
fn demo_generation_is_a_permutation_and_penalty_shortens_steps() {
    let demo = Demo::new(7).unwrap();
    let (mut near, mut free) = (0.0, 0.0);
    for seed in 0..4 {
        let g = demo.generate(0.0, seed).unwrap();
        let mut r = g.ranks();
        r.sort_unstable();
        assert_eq!(r, (0..64).collect::<Vec<u32>>());
        assert_eq!(g.forward_count(), 64 * 65 / 2);
        free += g.mean_distance();
        near += demo.generate(2.0, seed).unwrap().mean_distance();
    }
    assert!(near < free, "{near} vs {free}");
}
