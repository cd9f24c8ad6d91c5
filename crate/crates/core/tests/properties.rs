use glyphbooth::denoiser::{predict_eps, Architecture, DenoiserParams, LoraSet};
use glyphbooth::diffusion::{forward_noise, transition_logprob, NoiseSchedule, Trajectory};
use glyphbooth::eval::{majority_vote, Choice, Vote, VoteTable};
use glyphbooth::image::{read_grid_text, write_grid_text, Image, Shape};
use glyphbooth::rl::{clipped_surrogate, is_clipped, normalize_advantages, RolloutBatch};
use glyphbooth::rng::{normal_vec, seeded};
use glyphbooth::vocab::{tokenize, PromptTokens, Token};
use proptest::prelude::*;

fn entries(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_monotone(steps in 2usize..80, b0 in 1e-5f64..0.01, span in 0.0f64..0.5) {
        let sched = NoiseSchedule::linear(steps, b0, b0 + span).unwrap();
        let ab = sched.alpha_bars();
        prop_assert!(ab.iter().all(|a| *a > 0.0 && *a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        for t in 1..=steps {
            prop_assert!(sched.beta(t) >= b0 && sched.beta(t) <= b0 + span + 1e-15);
        }
    }

    #[test]
    fn logprob_is_a_sum_of_scalar_densities(x in entries(6), m in entries(6), sigma in 0.01f64..3.0) {
        let shape = Shape::new(2, 3, 1);
        let lp = transition_logprob(
            &Image::from_vec(shape, x.clone()).unwrap(),
            &Image::from_vec(shape, m.clone()).unwrap(),
            sigma,
        )
        .unwrap();
        let scalar: f64 = x
            .iter()
            .zip(&m)
            .map(|(a, b)| -(2.0 * std::f64::consts::PI * sigma * sigma).ln() / 2.0 - (a - b).powi(2) / (2.0 * sigma * sigma))
            .sum();
        prop_assert!((lp - scalar).abs() <= 1e-10 * scalar.abs().max(1.0));
    }

    #[test]
    fn forward_noise_is_affine_in_the_noise(z0 in entries(4), eps in entries(4), t in 1usize..=50) {
        let sched = NoiseSchedule::linear(50, 1e-3, 0.3).unwrap();
        let shape = Shape::new(1, 4, 1);
        let z0 = Image::from_vec(shape, z0).unwrap();
        let zt = forward_noise(&z0, t, &Image::from_vec(shape, eps.clone()).unwrap(), &sched).unwrap();
        let ab = sched.alpha_bar(t);
        for ((z, x), e) in zt.as_slice().iter().zip(z0.as_slice()).zip(&eps) {
            prop_assert!((z - (ab.sqrt() * x + (1.0 - ab).sqrt() * e)).abs() <= 1e-12);
        }
    }

    #[test]
    fn surrogate_is_the_pessimistic_branch(ratio in 0.0f64..3.0, adv in -3.0f64..3.0, clip in 1e-4f64..0.5) {
        let (value, slope) = clipped_surrogate(ratio, adv, clip);
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        prop_assert!((value - (ratio * adv).min(clipped)).abs() <= 1e-12);
        // The slope is d value / d log ratio: ratio * adv on the live branch, 0 on the flat one.
        prop_assert!(slope == 0.0 || (slope - ratio * adv).abs() <= 1e-12);
        if !is_clipped(ratio, clip) {
            prop_assert!((slope - ratio * adv).abs() <= 1e-12);
        }
    }

    #[test]
    fn advantages_are_standardized_per_group(rewards in prop::collection::vec(0.0f64..1.0, 2..24), flags in prop::collection::vec(any::<bool>(), 24)) {
        let id = tokenize("[*] plushie with pens").unwrap();
        let class = tokenize("plushie with pens").unwrap();
        let trajectories: Vec<Trajectory> = rewards
            .iter()
            .zip(&flags)
            .map(|(r, f)| Trajectory {
                prompt: if *f { id.clone() } else { class.clone() },
                states: Vec::new(),
                logprobs: Vec::new(),
                plan: Vec::new(),
                reward: Some(*r),
                guidance_scale: 1.0,
                seed: 0,
            })
            .collect();
        let mut batch = RolloutBatch { epoch: 0, trajectories, advantages: None };
        normalize_advantages(&mut batch);
        let adv = batch.advantages.clone().unwrap();
        for group in [true, false] {
            let a: Vec<f64> = adv.iter().zip(&batch.trajectories).filter(|(_, t)| t.prompt.has_identifier() == group).map(|(a, _)| *a).collect();
            if a.len() >= 2 {
                let mean = a.iter().sum::<f64>() / a.len() as f64;
                let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64;
                prop_assert!(mean.abs() <= 1e-9);
                prop_assert!(var <= 1.0 + 1e-9);
            } else {
                prop_assert!(a.iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn votes_ignore_rater_names_and_order(choices in prop::collection::vec(0u8..3, 5 * 4), seed in any::<u64>()) {
        let choice = |c: u8| [Choice::Good, Choice::Bad, Choice::Pass][c as usize];
        let build = |names: &dyn Fn(usize) -> String| -> Vec<Vote> {
            choices
                .iter()
                .enumerate()
                .map(|(i, c)| Vote { item_id: format!("item{}", i / 5), rater_id: names(i % 5), choice: choice(*c) })
                .collect()
        };
        let plain = majority_vote(&VoteTable::new(build(&|r| format!("r{r}")), 5).unwrap(), true);
        let mut renamed = build(&|r| format!("rater-{}", 4 - r));
        use rand::seq::SliceRandom;
        renamed.shuffle(&mut seeded(seed));
        let other = majority_vote(&VoteTable::new(renamed, 5).unwrap(), true);
        prop_assert_eq!(plain.winners, other.winners);
        prop_assert_eq!(plain.positive_rate, other.positive_rate);
    }

    #[test]
    fn merged_adapters_match_the_adapted_forward(seed in any::<u64>(), rank in 1usize..4, t in 1usize..=6) {
        let mut rng = seeded(seed);
        let shape = Shape::new(2, 2, 3);
        let params = DenoiserParams::init(Architecture::new(shape, 6, 3, 2, vec![5, 4]), &mut rng).unwrap();
        let mut set = LoraSet::attach(&params, &[0, 2], rank, 2.0, &mut rng).unwrap();
        for (v, n) in set.values_mut().iter_mut().zip(normal_vec(&mut rng, 10_000)) {
            *v += 0.5 * n;
        }
        set.set_enabled(true);
        let merged = set.merge_into(&params).unwrap();
        let z = Image::from_vec(shape, normal_vec(&mut rng, shape.len())).unwrap();
        let cond = params.embed_prompt(&tokenize("cup on snow").unwrap());
        let a = predict_eps(&params, Some(&set), &z, t, &cond).unwrap();
        let b = predict_eps(&merged, None, &z, t, &cond).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn image_grids_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 2 * 2 * 3 * 3)) {
        let shape = Shape::new(2, 2, 3);
        let images: Vec<Image> = values.chunks(shape.len()).map(|c| Image::from_vec(shape, c.to_vec()).unwrap()).collect();
        let mut buf = Vec::new();
        write_grid_text(&mut buf, &images).unwrap();
        let back = read_grid_text(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back, images);
    }

    #[test]
    fn prompt_text_round_trips(picks in prop::collection::vec(2usize..13, 1..4), id in any::<bool>()) {
        let mut tokens: Vec<Token> = Vec::new();
        for p in picks {
            let t = Token::from_id(p).unwrap();
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        if id {
            tokens.insert(0, Token::Identifier);
        }
        let prompt = PromptTokens::new(tokens).unwrap();
        prop_assert_eq!(tokenize(&prompt.text()).unwrap(), prompt);
    }
}
