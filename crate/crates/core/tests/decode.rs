use oar_core::decode::{
    candidate_batch_eval, decode, expected_forward_count, generate, gumbel_stream, gumbel_topk_sample,
    joint_topk_select, promote_candidate, select_location, CacheRegime, CandidateScore, Content, DecodeMode,
    DecodePolicy, Prefix, ScoreDomain,
};
use oar_core::grid::GridShape;
use oar_core::model::{Decoder, KvCacheSecondary, ModelConfig, TransformerWeights};
use oar_core::rng::{Purpose, SeededStream};
use oar_core::tensor::Tensor;
use oar_core::Error;

fn cfg(rows: usize, cols: usize) -> ModelConfig {
    ModelConfig {
        grid: GridShape { rows, cols },
        vocab: 12,
        cond_vocab: 4,
        cond_len: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        head_dim: 4,
        dropout: 0.0,
        img_loss_weight: 7.0,
    }
}

fn weights(c: &ModelConfig, seed: u64) -> TransformerWeights {
    let mut w = TransformerWeights::init(c, seed).unwrap();
    let mut s = SeededStream::keyed(seed, Purpose::Test, &[]);
    for p in &mut w.params {
        for v in p.data_mut() {
            *v += 0.3 * s.normal();
        }
    }
    w
}

fn score(location: usize, logp: f64, distance: usize) -> CandidateScore {
    CandidateScore {
        location,
        token: 0,
        logp,
        distance,
        score: f64::NEG_INFINITY,
    }
}

fn raw_policy(lambda: f64) -> DecodePolicy {
    DecodePolicy {
        lambda,
        normalize_distance: false,
        ..DecodePolicy::ordered(8)
    }
}

#[test]
fn gumbel_k1_is_argmax() {
    let logits = [0.1, 2.0, -1.0, 1.9];
    let mut s = SeededStream::new(1, 1);
    for _ in 0..1000 {
        assert_eq!(gumbel_topk_sample(&logits, 1, &mut s).unwrap().0, 1);
    }
}

#[test]
fn gumbel_samples_softmax() {
    let logits = [3f64.ln(), 0.0];
    let mut s = SeededStream::new(2, 1);
    let n = 100_000;
    let zeros = (0..n)
        .filter(|_| gumbel_topk_sample(&logits, 2, &mut s).unwrap().0 == 0)
        .count();
    assert!((zeros as f64 / n as f64 - 0.75).abs() < 0.01);
}

#[test]
fn gumbel_respects_mask_and_reports_full_logp() {
    let mut s = SeededStream::new(3, 1);
    let logits: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 * 0.05).collect();
    let mut sorted: Vec<usize> = (0..64).collect();
    sorted.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let allowed = &sorted[..8];
    let lse = oar_core::tensor::log_sum_exp(&logits);
    for _ in 0..100_000 {
        let (t, lp) = gumbel_topk_sample(&logits, 8, &mut s).unwrap();
        assert!(allowed.contains(&(t as usize)));
        assert_eq!(lp, logits[t as usize] - lse);
    }
    assert!(matches!(
        gumbel_topk_sample(&logits, 0, &mut s),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        gumbel_topk_sample(&logits, 65, &mut s),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn select_location_examples() {
    let g = GridShape::new(8, 8).unwrap();
    let a = score(3, -1.0, 1);
    let b = score(9, -0.5, 6);
    assert_eq!(select_location(&[a, b], &raw_policy(0.0), g).unwrap().location, 9);
    let chosen = select_location(&[a, b], &raw_policy(0.2), g).unwrap();
    assert_eq!(chosen.location, 3);
    assert!((chosen.score - -1.2).abs() < 1e-12);
    let tie = [score(7, -0.3, 2), score(4, -0.3, 2)];
    assert_eq!(select_location(&tie, &raw_policy(0.5), g).unwrap().location, 4);
    assert!(matches!(
        select_location(&[], &raw_policy(0.0), g),
        Err(Error::Contract(_))
    ));
}

#[test]
fn probability_domain_and_normalization() {
    let g = GridShape::new(8, 8).unwrap();
    let mut p = raw_policy(0.5);
    p.domain = ScoreDomain::Prob;
    p.normalize_distance = true;
    let c = select_location(&[score(1, -1.0, 4), score(2, -2.0, 0)], &p, g).unwrap();
    assert!((c.score - ((-2.0f64).exp())).abs() < 1e-15 || c.location == 1);
    let expect1 = (-1.0f64).exp() - 0.5 * 4.0 / 8.0;
    let expect2 = (-2.0f64).exp();
    assert_eq!(c.location, if expect1 > expect2 { 1 } else { 2 });
}

#[test]
fn batch_eval_equals_sequential_loop() {
    let c = cfg(3, 3);
    let w = weights(&c, 4);
    let policy = DecodePolicy::ordered(c.vocab);
    let mut dec = Decoder::new(&w);
    dec.prefill_condition(&[1, 2]).unwrap();
    let mut prefix = Prefix { step: 0, last: None };
    let mut open: Vec<usize> = (0..9).collect();
    for step in 0..9 {
        prefix.step = step;
        let mut sec = KvCacheSecondary::new();
        let batch = candidate_batch_eval(&dec, &open, prefix, &policy, Content::Sampled, 77, &mut sec).unwrap();
        assert_eq!(batch.len(), open.len());
        for (i, &l) in open.iter().enumerate() {
            let mut one = KvCacheSecondary::new();
            let s = candidate_batch_eval(&dec, &[l], prefix, &policy, Content::Sampled, 77, &mut one).unwrap();
            assert_eq!(s[0], batch[i]);
            assert_eq!(one.row(l, c.dim), sec.row(l, c.dim));
        }
        let chosen = select_location(&batch, &policy, c.grid).unwrap();
        let before = dec.primary.len();
        promote_candidate(&mut sec, chosen.location, &mut dec).unwrap();
        assert_eq!(dec.primary.len(), before + 1);
        open.retain(|&l| l != chosen.location);
        let mut again = KvCacheSecondary::new();
        assert!(candidate_batch_eval(
            &dec,
            &[chosen.location],
            Prefix {
                step: step + 1,
                last: Some((chosen.token, chosen.location))
            },
            &policy,
            Content::Sampled,
            77,
            &mut again
        )
        .is_err());
        prefix.last = Some((chosen.token, chosen.location));
    }
}

#[test]
fn forward_counts_follow_the_law() {
    let c = cfg(2, 3);
    let w = weights(&c, 5);
    for mode in [
        DecodeMode::Raster,
        DecodeMode::Random,
        DecodeMode::Ordered,
        DecodeMode::JointTopk,
    ] {
        let p = DecodePolicy::ordered(c.vocab).with_mode(mode);
        let r = generate(&[0, 3], &w, &p, 9).unwrap();
        assert_eq!(r.forward_count, expected_forward_count(mode, 6));
        assert_eq!(r.order.len(), 6);
    }
    assert_eq!(expected_forward_count(DecodeMode::Ordered, 64), 2080);
    assert_eq!(expected_forward_count(DecodeMode::Raster, 64), 64);
    for mode in [DecodeMode::Raster, DecodeMode::Random, DecodeMode::Ordered] {
        assert_eq!(expected_forward_count(mode, 1), 1);
    }
    let p = DecodePolicy::ordered(c.vocab).with_mode(DecodeMode::Raster);
    assert!(generate(&[0, 3], &w, &p, 9).unwrap().order.is_raster());
}

#[test]
fn single_cell_grid_in_every_mode() {
    let c = cfg(1, 1);
    let w = weights(&c, 6);
    for mode in [
        DecodeMode::Raster,
        DecodeMode::Random,
        DecodeMode::Ordered,
        DecodeMode::JointTopk,
    ] {
        let r = generate(&[1, 1], &w, &DecodePolicy::ordered(c.vocab).with_mode(mode), 2).unwrap();
        assert_eq!(r.forward_count, 1);
        assert_eq!(r.distances, vec![0]);
    }
}

#[test]
fn regimes_agree_bitwise() {
    let c = cfg(3, 4);
    let w = weights(&c, 7);
    for mode in [DecodeMode::Ordered, DecodeMode::JointTopk, DecodeMode::Random] {
        for seed in 0..3 {
            let mut recs = Vec::new();
            for regime in [CacheRegime::Naive, CacheRegime::Recompute, CacheRegime::Cached] {
                let p = DecodePolicy {
                    regime,
                    lambda: 0.3,
                    ..DecodePolicy::ordered(c.vocab).with_mode(mode)
                };
                recs.push(generate(&[2, 1], &w, &p, seed).unwrap());
            }
            assert!(recs[0].same_output(&recs[1]));
            assert!(recs[1].same_output(&recs[2]));
            assert_eq!(recs[0].to_text(), recs[2].to_text());
        }
    }
}

#[test]
fn record_text_is_stable() {
    let c = cfg(2, 2);
    let w = weights(&c, 8);
    let p = DecodePolicy::ordered(c.vocab);
    let a = generate(&[0, 1], &w, &p, 11).unwrap().to_text();
    let b = generate(&[0, 1], &w, &p, 11).unwrap().to_text();
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "grid 2 2");
    assert!(lines.contains(&"step,location,token,logp,d"));
    assert_eq!(lines.len(), 6 + 4 + 2);
}

#[test]
fn joint_topk_single_location_matches_per_location_topk() {
    let g = GridShape::new(2, 2).unwrap();
    let logits = Tensor::new(vec![1, 6], vec![0.5, 1.5, -0.2, 0.9, 0.0, 1.1]).unwrap();
    let policy = DecodePolicy::ordered(6);
    let prefix = Prefix {
        step: 3,
        last: Some((0, 1)),
    };
    for seed in 0..200 {
        let j = joint_topk_select(&logits, &[2], 3, prefix, &policy, g, seed).unwrap();
        let (t, lp) = gumbel_topk_sample(logits.row(0), 3, &mut gumbel_stream(seed, 3, 2)).unwrap();
        assert_eq!((j.token, j.logp), (t, lp));
    }
}

#[test]
fn joint_topk_full_k_equals_select_location() {
    let g = GridShape::new(2, 3).unwrap();
    let mut s = SeededStream::new(9, 0);
    let v = 5;
    let locs = [0usize, 2, 3, 5];
    let data: Vec<f64> = (0..locs.len() * v).map(|_| s.normal()).collect();
    let logits = Tensor::new(vec![locs.len(), v], data).unwrap();
    let policy = DecodePolicy {
        lambda: 0.4,
        ..DecodePolicy::ordered(v)
    };
    let prefix = Prefix {
        step: 2,
        last: Some((1, 4)),
    };
    for seed in 0..200 {
        let j = joint_topk_select(&logits, &locs, locs.len() * v, prefix, &policy, g, seed).unwrap();
        let scores: Vec<CandidateScore> = locs
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let (t, lp) = gumbel_topk_sample(logits.row(i), v, &mut gumbel_stream(seed, 2, l)).unwrap();
                let d = oar_core::grid::linf_distance(g.position(4).unwrap(), g.position(l).unwrap());
                CandidateScore {
                    location: l,
                    token: t,
                    logp: lp,
                    distance: d,
                    score: f64::NEG_INFINITY,
                }
            })
            .collect();
        assert_eq!(j, select_location(&scores, &policy, g).unwrap());
    }
}

#[test]
fn joint_topk_never_picks_masked_pairs() {
    let g = GridShape::new(2, 2).unwrap();
    let logits = Tensor::new(vec![2, 4], vec![3.0, 2.9, -5.0, -6.0, 2.8, -4.0, -4.5, -7.0]).unwrap();
    let policy = DecodePolicy::ordered(4);
    let prefix = Prefix { step: 0, last: None };
    for seed in 0..100_000 {
        let j = joint_topk_select(&logits, &[0, 3], 3, prefix, &policy, g, seed).unwrap();
        let ok = matches!((j.location, j.token), (0, 0) | (0, 1) | (3, 0));
        assert!(ok, "picked masked pair {:?}", (j.location, j.token));
    }
}

#[test]
fn teacher_content_reads_tokens() {
    let c = cfg(2, 3);
    let w = weights(&c, 10);
    let tokens = [3u32, 1, 4, 1, 5, 9];
    let p = DecodePolicy::ordered(c.vocab);
    let r = decode(&[0, 1], &w, &p, Content::Teacher(&tokens), 0).unwrap();
    assert_eq!(r.tokens, tokens);
    let again = decode(&[0, 1], &w, &p, Content::Teacher(&tokens), 99).unwrap();
    assert_eq!(r.order, again.order);
}

#[test]
fn invalid_policy_rejected() {
    let c = cfg(2, 2);
    let w = weights(&c, 11);
    let mut p = DecodePolicy::ordered(c.vocab);
    p.top_k = c.vocab + 1;
    assert!(generate(&[0, 0], &w, &p, 0).is_err());
    p.top_k = 1;
    p.lambda = -0.1;
    assert!(generate(&[0, 0], &w, &p, 0).is_err());
}
