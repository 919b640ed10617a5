use circgen::grammar::{advance, mask, masked_sample, masked_softmax, validate_sequence, ConstraintLevel, GrammarState, Phase};
use circgen::rl::{adapt_kl_coeff, normalize_group, KL_BETA_MAX, KL_BETA_MIN};
use circgen::search::{ga_optimize, tournament_select, GaConfig, Individual};
use circgen::simulate::{compute_reward, Backend, SimMetrics};
use circgen::tokenizer::*;
use circgen::topology::{builtin_library, rwpe_from_adjacency, sample_random_design, TopologyTemplate, MAX_SLOTS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn template(i: usize) -> &'static TopologyTemplate {
    let ts = builtin_library().templates();
    &ts[i % ts.len()]
}

fn prefix(t: &TopologyTemplate) -> Vec<Token> {
    let d = CircuitDesign { topology: t.name.clone(), spec: t.nominal_spec(), components: vec![] };
    let mut tokens = encode_circuit(&d).unwrap().tokens;
    tokens.pop();
    tokens
}

fn random_logits(rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    (0..VOCAB_SIZE).map(|_| rng.random_range(-4.0..4.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bins_are_monotone(a in -12.0f64..6.0, b in -12.0f64..6.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (10f64.powf(lo), 10f64.powf(hi));
        prop_assert!(value_to_bin(x).unwrap().index() <= value_to_bin(y).unwrap().index());
    }

    #[test]
    fn value_round_trip_within_half_bin(e in -12.0f64..=6.0) {
        let v = 10f64.powf(e).clamp(MIN_VALUE, MAX_VALUE);
        let back = bin_to_value(value_to_bin(v).unwrap()).unwrap();
        prop_assert!((back.log10() - v.log10()).abs() <= HALF_BIN_DECADES + 1e-12);
    }

    #[test]
    fn design_round_trip(ti in 0usize..8, seed in any::<u64>()) {
        let t = template(ti);
        let d = sample_random_design(t, &t.nominal_spec(), seed);
        let back = decode_sequence(&encode_circuit(&d).unwrap()).unwrap();
        prop_assert_eq!(&back.topology, &d.topology);
        prop_assert_eq!(back.components.len(), d.components.len());
        for (a, b) in back.components.iter().zip(&d.components) {
            prop_assert_eq!(a.kind, b.kind);
            prop_assert!((a.value.log10() - b.value.log10()).abs() <= HALF_BIN_DECADES + 1e-12);
        }
        for (k, v) in &d.spec {
            prop_assert!((back.spec[k].log10() - v.log10()).abs() <= HALF_BIN_DECADES + 1e-12);
        }
    }

    #[test]
    fn shuffle_keeps_multiset(ti in 0usize..8, seed in any::<u64>()) {
        let t = template(ti);
        let seq = encode_circuit(&sample_random_design(t, &t.nominal_spec(), seed)).unwrap();
        let key = |d: &CircuitDesign| {
            let mut c: Vec<(ComponentKind, u64)> = d.components.iter().map(|c| (c.kind, c.value.to_bits())).collect();
            c.sort();
            c
        };
        let orig = decode_sequence(&seq).unwrap();
        for s in augment_shuffle(&seq, 4, seed).unwrap() {
            let d = decode_sequence(&s).unwrap();
            prop_assert_eq!(key(&d), key(&orig));
            prop_assert_eq!(d.spec, orig.spec.clone());
        }
    }

    #[test]
    fn masked_decoding_is_sound_and_nested(ti in 0usize..8, seed in any::<u64>()) {
        let t = template(ti);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_len = 2 * MAX_SLOTS + 8;
        for level in [ConstraintLevel::Grammar, ConstraintLevel::Topology, ConstraintLevel::Full] {
            let mut s = GrammarState::new(Some(t), level, max_len).unwrap();
            let mut tokens = prefix(t);
            while !s.is_done() {
                let m = mask(&s).unwrap();
                prop_assert!(m.count() >= 1);
                let tok = masked_sample(&random_logits(&mut rng), &m, 1.0, 0, &mut rng).unwrap();
                prop_assert!(m.is_allowed(tok));
                s = advance(&s, tok).unwrap();
                tokens.push(tok);
                prop_assert!(s.position <= max_len);
            }
            prop_assert_eq!(s.phase, Phase::Done);
            if level >= ConstraintLevel::Topology {
                prop_assert!(s.position <= 2 * MAX_SLOTS + 1);
            }
            let r = validate_sequence(&TokenSequence::new(tokens), level, Some(t));
            prop_assert!(r.valid, "{}", r);
        }

        // Same token path through all three levels; allowed sets must nest.
        let levels = [ConstraintLevel::Grammar, ConstraintLevel::Topology, ConstraintLevel::Full];
        let mut states: Vec<GrammarState> = levels.iter().map(|&l| GrammarState::new(Some(t), l, max_len).unwrap()).collect();
        while !states[2].is_done() {
            let masks: Vec<_> = states.iter().map(|s| mask(s).unwrap()).collect();
            prop_assert!(masks[2].is_subset_of(&masks[1]));
            prop_assert!(masks[1].is_subset_of(&masks[0]));
            let tok = masked_sample(&random_logits(&mut rng), &masks[2], 1.0, 0, &mut rng).unwrap();
            for s in states.iter_mut() {
                *s = advance(s, tok).unwrap();
            }
        }
    }

    #[test]
    fn masked_softmax_conserves_probability(seed in any::<u64>(), temp in 0.1f64..3.0, keep in 1usize..VOCAB_SIZE) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..VOCAB_SIZE).map(|_| rng.random_range(-30.0..30.0)).collect();
        let m = circgen::grammar::TokenMask::from_tokens((0..VOCAB_SIZE).filter(|_| rng.random_range(0..VOCAB_SIZE) < keep).map(|i| Token(i as u16)).chain([Token(7)]));
        let p = masked_softmax(&logits, &m, temp).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (i, &pi) in p.iter().enumerate() {
            if !m.is_allowed(Token(i as u16)) {
                prop_assert_eq!(pi, 0.0);
            }
        }
    }

    #[test]
    fn grpo_group_invariants(rewards in prop::collection::vec(0.0f64..8.0, 2..16), shift in -50.0f64..50.0, scale in 0.01f64..100.0) {
        let (_, std, adv) = normalize_group(&rewards, 1e-6).unwrap();
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
        let n = adv.len() as f64;
        let adv_std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        prop_assert!(adv_std <= 1.0 + 1e-12);
        prop_assert!((adv_std - std / (std + 1e-6)).abs() < 1e-9);

        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let (_, _, adv2) = normalize_group(&shifted, 1e-6).unwrap();
        for (a, b) in adv.iter().zip(&adv2) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        if std > 1e-3 {
            let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
            let (_, _, a0) = normalize_group(&rewards, 0.0).unwrap();
            let (_, _, a1) = normalize_group(&scaled, 0.0).unwrap();
            for (a, b) in a0.iter().zip(&a1) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&adv), argmax(&a1));
        }
    }

    #[test]
    fn kl_coefficient_stays_clamped(beta in KL_BETA_MIN..KL_BETA_MAX, kl in 0.0f64..20.0, target in 0.01f64..5.0) {
        let b = adapt_kl_coeff(beta, kl, target);
        prop_assert!((KL_BETA_MIN..=KL_BETA_MAX).contains(&b));
        if kl > 1.5 * target {
            prop_assert!(b >= beta);
        } else if kl < target / 1.5 {
            prop_assert!(b <= beta);
        } else {
            prop_assert_eq!(b, beta);
        }
    }

    #[test]
    fn rewards_are_bounded(ti in 0usize..8, seed in any::<u64>()) {
        let t = template(ti);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = sample_random_design(t, &t.sample_spec(&mut rng), seed);
        let (_, r) = Backend::Analytic.score(t, &d).unwrap();
        let parts = [r.r_struct, r.r_sim, r.r_accuracy, r.r_efficiency, r.r_quality];
        let caps = [1.0, 1.0, 3.0, 2.0, 1.0];
        for (p, c) in parts.iter().zip(caps) {
            prop_assert!((0.0..=c).contains(p));
        }
        prop_assert!((r.total - parts.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert!((0.0..=8.0).contains(&r.total));
        prop_assert_eq!(Backend::Analytic.score(t, &d).unwrap().1, r);
    }

    #[test]
    fn reward_monotone_in_primary_error(ti in 0usize..8, seed in any::<u64>(), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
        let t = template(ti);
        let d = sample_random_design(t, &t.nominal_spec(), seed);
        let mut m = Backend::Analytic.evaluate(t, &d).unwrap();
        prop_assume!(m.plausible());
        let target = t.primary.target.resolve(&d.spec).unwrap();
        let at = |e: f64, m: &mut SimMetrics| {
            m.values.insert(t.primary.metric, target * (1.0 + e));
            compute_reward(t, &d, m).total
        };
        let (small, large) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(at(small, &mut m) >= at(large, &mut m));
    }

    #[test]
    fn rwpe_is_permutation_equivariant(ti in 0usize..8, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let t = template(ti);
        let n = t.adjacency.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<Vec<u8>> = (0..n).map(|i| (0..n).map(|j| t.adjacency[perm[i]][perm[j]]).collect()).collect();
        let a = rwpe_from_adjacency(&t.adjacency, 8).unwrap();
        let b = rwpe_from_adjacency(&permuted, 8).unwrap();
        for i in 0..n {
            prop_assert!(a.features[perm[i]][0] == 0.0);
            for k in 0..8 {
                prop_assert!((b.features[i][k] - a.features[perm[i]][k]).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&b.features[i][k]));
            }
        }
    }

    #[test]
    fn tournament_stays_in_population(fit in prop::collection::vec(-1.0f64..8.0, 1..20), k in 1usize..6, seed in any::<u64>()) {
        let pop: Vec<Individual> = fit.iter().map(|&f| Individual { genes: vec![], fitness: f, evaluated: true }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            prop_assert!(tournament_select(&pop, k, &mut rng) < pop.len());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ga_respects_bounds_and_seed(ti in 0usize..8, seed in any::<u64>()) {
        let t = template(ti);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = t.sample_spec(&mut rng);
        let cfg = GaConfig { population: 6, generations: 3, seed, ..Default::default() };
        let a = ga_optimize(t, &spec, &cfg, &Backend::Analytic, &[]).unwrap();
        prop_assert_eq!(a.evaluations, cfg.evaluations());
        for (c, s) in a.design.components.iter().zip(&t.slots) {
            prop_assert_eq!(c.kind, s.kind);
            prop_assert!(c.value >= s.lo * (1.0 - 1e-9) && c.value <= s.hi * (1.0 + 1e-9));
        }
        prop_assert!(a.history.windows(2).all(|w| w[1] >= w[0]));
        let b = ga_optimize(t, &spec, &cfg, &Backend::Analytic, &[]).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn vocabulary_sizes() {
    let v = vocab();
    assert_eq!(v.len(), VOCAB_SIZE);
    assert_eq!(Category::ALL.iter().map(|&c| v.category_size(c)).sum::<usize>(), 706);
    for i in 1..NUM_VALUE_BINS {
        assert!(bin_center(i) > bin_center(i - 1));
    }
    // The first step of every template's walk never returns.
    for t in builtin_library().templates() {
        assert!(rwpe_from_adjacency(&t.adjacency, 1).unwrap().features.iter().all(|f| f[0] == 0.0));
    }
}
