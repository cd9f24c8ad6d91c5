use super::*;
use crate::rng::seeded;
use crate::toyworld::detect::cosine;
use crate::vocab::tokenize;

fn world() -> World {
    World::new(WorldManifest::default()).unwrap()
}

fn prompt(text: &str) -> PromptTokens {
    tokenize(text).unwrap()
}

/// Every describable scene: class × modifier (or none) × context (or none) × offset.
fn all_scenes(w: &World) -> Vec<SceneSpec> {
    let mut out = Vec::new();
    for class in Token::CLASSES {
        for modifier in [
            None,
            Some(Token::Triangular),
            Some(Token::Striped),
            Some(Token::Tall),
        ] {
            for context in std::iter::once(None).chain(Token::CONTEXTS.map(Some)) {
                for &dx in &w.manifest().regions.offsets {
                    let mut s = w.canonical_subject(class).unwrap();
                    match modifier {
                        Some(Token::Triangular) => s.shape = GlyphShape::Triangle,
                        Some(Token::Striped) => s.striped = true,
                        Some(Token::Tall) => s.tall = true,
                        _ => {}
                    }
                    out.push(SceneSpec {
                        subject: s,
                        context,
                        offset: (0, dx),
                    });
                }
            }
        }
    }
    out
}

#[test]
fn night_background_fills_every_non_glyph_pixel() {
    let w = world();
    let spec = w.scene_for_prompt(&prompt("cup at night"), (0, 0)).unwrap();
    let img = w.render_scene(&spec).unwrap();
    let glyph: Vec<(usize, usize)> = w
        .glyph_pixels(&spec.subject, spec.offset)
        .unwrap()
        .into_iter()
        .map(|(r, c, _)| (r, c))
        .collect();
    let night = w.manifest().palette.night;
    for row in 0..16 {
        for col in 0..16 {
            if !glyph.contains(&(row, col)) {
                assert_eq!(img.pixel(row, col), night);
            }
        }
    }
}

#[test]
fn rendering_is_deterministic_and_in_range() {
    let w = world();
    for spec in all_scenes(&w) {
        let a = w.render_scene(&spec).unwrap();
        let b = w.render_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn radius_three_disc_covers_29_pixels() {
    // 29 = lattice points with x² + y² <= 9, brute-force count
    let w = world();
    let s = w.canonical_subject(Token::Plushie).unwrap();
    assert_eq!(w.glyph_pixels(&s, (0, 0)).unwrap().len(), 29);
}

#[test]
fn out_of_area_positions_are_rejected() {
    let w = world();
    let s = w.canonical_subject(Token::Cup).unwrap();
    for offset in [(1, 0), (-1, 0), (0, -3), (0, 4)] {
        let spec = SceneSpec {
            subject: s.clone(),
            context: None,
            offset,
        };
        assert!(
            matches!(w.render_scene(&spec), Err(Error::Parameter(_))),
            "{offset:?}"
        );
    }
}

#[test]
fn subject_colors_must_stand_out() {
    let w = world();
    let mut s = w.canonical_subject(Token::Cup).unwrap();
    s.color = [-0.5, -0.5, -0.3];
    let spec = SceneSpec {
        subject: s,
        context: None,
        offset: (0, 0),
    };
    assert!(w.render_scene(&spec).is_err());
}

#[test]
fn pretraining_pairs_score_high_under_their_own_prompt() {
    let w = world();
    let mut rng = seeded(11);
    for _ in 0..2000 {
        let (img, p) = w.sample_pretrain_example(&mut rng);
        let r = w.reward(&img, &p).unwrap();
        assert!(r >= 0.9, "{p}: {r}");
    }
}

#[test]
fn pretraining_never_emits_the_rare_combination() {
    let w = world();
    let mut rng = seeded(12);
    let mut counts = [0usize; 3];
    let n = 10_000;
    for _ in 0..n {
        let spec = w.sample_pretrain_scene(&mut rng);
        let p = w.scene_prompt(&spec);
        assert!(
            !(p.tokens().contains(&Token::Triangular) && p.tokens().contains(&Token::Plushie)),
            "{p}"
        );
        assert_eq!(
            spec.subject.color,
            w.canonical_subject(spec.subject.class).unwrap().color
        );
        counts[Token::CLASSES
            .iter()
            .position(|c| *c == spec.subject.class)
            .unwrap()] += 1;
    }
    // binomial(n, 1/3): 4σ band
    let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 / 3.0).abs() <= 4.0 * sd, "{counts:?}");
    }
}

#[test]
fn described_scenes_score_high_and_disjoint_contexts_low() {
    let w = world();
    for spec in all_scenes(&w) {
        let img = w.render_scene(&spec).unwrap();
        let p = w.scene_prompt(&spec);
        let e = w.image_embed(&img);
        for t in p.attributes() {
            assert!(e.get(t).unwrap() >= 0.9, "{p}: {t:?} {:?}", e.as_slice());
        }
        for c in Token::CONTEXTS {
            if Some(c) != spec.context {
                assert!(e.get(c).unwrap() <= 0.3, "{p}: {c:?} {:?}", e.as_slice());
            }
        }
        assert!(e.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(w.reward(&img, &p).unwrap() >= 0.9);
    }
}

#[test]
fn flat_zero_image_scores_zero_on_every_detector() {
    // Saliency is zero everywhere and every context color is >= 0.6 from black,
    // past the 0.5 cutoff, so every detector is exactly zero.
    let w = world();
    let img = Image::zeros(w.shape());
    assert!(w.image_embed(&img).as_slice().iter().all(|v| *v == 0.0));
    for spec in all_scenes(&w) {
        assert!(w.reward(&img, &w.scene_prompt(&spec)).unwrap() <= 0.4);
    }
}

#[test]
fn identifier_does_not_change_the_reward() {
    let w = world();
    for spec in all_scenes(&w).into_iter().step_by(7) {
        let img = w.render_scene(&spec).unwrap();
        let plain = w.scene_prompt(&spec);
        let mut tokens = vec![Token::Identifier];
        tokens.extend_from_slice(plain.tokens());
        let with_id = PromptTokens::new(tokens).unwrap();
        assert_eq!(
            w.reward(&img, &plain).unwrap(),
            w.reward(&img, &with_id).unwrap()
        );
    }
}

#[test]
fn unstripped_identifier_counts_as_unrecognized() {
    let w = world().with_identifier_stripping(false);
    let spec = w
        .scene_for_prompt(&prompt("[*] plushie with pens"), (0, 0))
        .unwrap();
    let img = w.render_scene(&spec).unwrap();
    let plain = w.reward(&img, &prompt("plushie with pens")).unwrap();
    let with_id = w.reward(&img, &prompt("[*] plushie with pens")).unwrap();
    assert!((with_id - plain * 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn null_prompt_is_rejected() {
    let w = world();
    let img = Image::zeros(w.shape());
    assert!(matches!(
        w.reward(&img, &PromptTokens::null()),
        Err(Error::Prompt(_))
    ));
    assert!(w.text_embed(&PromptTokens::null()).is_err());
    assert!(w.text_embed(&prompt("[*]")).is_err());
}

#[test]
fn text_embed_is_an_indicator() {
    let w = world();
    let e = w.text_embed(&prompt("plushie on grass")).unwrap();
    assert_eq!(e.as_slice().iter().filter(|v| **v == 1.0).count(), 2);
    assert_eq!(e.as_slice().iter().filter(|v| **v == 0.0).count(), 9);
    assert_eq!(
        w.text_embed(&prompt("[*] plushie")).unwrap(),
        w.text_embed(&prompt("plushie")).unwrap()
    );
}

#[test]
fn reward_is_the_mean_of_selected_embedding_entries() {
    let w = world();
    let mut rng = seeded(4);
    for spec in all_scenes(&w).into_iter().step_by(5) {
        // perturb so detectors land strictly inside (0, 1)
        let mut img = w.render_scene(&spec).unwrap();
        for v in img.as_mut_slice() {
            *v = (*v * 0.7 + 0.3 * crate::rng::normal(&mut rng)).clamp(-1.0, 1.0);
        }
        let p = w.scene_prompt(&spec);
        let e = w.image_embed(&img);
        let t = w.text_embed(&p).unwrap();
        let (mut sum, mut n) = (0.0, 0.0);
        for (ev, tv) in e.as_slice().iter().zip(t.as_slice()) {
            if *tv != 0.0 {
                sum += ev;
                n += 1.0;
            }
        }
        assert!((w.reward(&img, &p).unwrap() - sum / n).abs() <= 1e-12);
    }
}

#[test]
fn reward_is_monotone_along_background_to_scene_interpolation() {
    let w = world();
    for spec in all_scenes(&w) {
        let target = w.render_scene(&spec).unwrap();
        let flat = w
            .render_scene(&SceneSpec {
                subject: spec.subject.clone(),
                context: spec.context.filter(|c| *c == Token::Night),
                offset: spec.offset,
            })
            .unwrap();
        // flat background: the scene's base fill everywhere
        let bg = flat.pixel(4, 0).to_vec();
        let mut base = Image::zeros(w.shape());
        for row in 0..16 {
            for col in 0..16 {
                base.set_pixel(row, col, &bg);
            }
        }
        let p = w.scene_prompt(&spec);
        let mut last = f64::NEG_INFINITY;
        for k in 0..=10 {
            let lambda = k as f64 / 10.0;
            let img = base.lincomb(1.0 - lambda, &target, lambda).unwrap();
            let r = w.reward(&img, &p).unwrap();
            assert!(r >= last - 1e-12, "{p}: step {k} {r} < {last}");
            last = r;
        }
    }
}

#[test]
fn subject_features_fixtures() {
    let w = world();
    let refs = w.reference_images();
    let f: Vec<Vec<f64>> = refs.iter().map(|r| w.subject_features(r)).collect();
    assert!((cosine(&f[0], &f[0]) - 1.0).abs() < 1e-12);
    // translated copies: integer shifts of the same glyph
    assert!(cosine(&f[0], &f[2]) >= 0.99);
    assert!(cosine(&f[0], &f[1]) >= 0.99);
    let disc = w
        .render_scene(&w.scene_for_prompt(&prompt("plushie"), (0, 0)).unwrap())
        .unwrap();
    let cross = w
        .render_scene(&w.scene_for_prompt(&prompt("pot"), (0, 0)).unwrap())
        .unwrap();
    let c = cosine(&w.subject_features(&disc), &w.subject_features(&cross));
    assert!(c <= 0.5, "{c}");
    let empty = w.subject_features(&Image::zeros(w.shape()));
    assert!(empty.iter().all(|v| *v == 0.0));
    assert_eq!(empty.len(), 9 * 9 * 3);
}

#[test]
fn identifier_prompts_render_the_rare_subject() {
    let w = world();
    let spec = w
        .scene_for_prompt(&prompt("[*] plushie with pens"), (0, 0))
        .unwrap();
    assert_eq!(spec.subject, w.rare_subject());
    assert_eq!(spec.context, Some(Token::Pens));
    let plain = w
        .scene_for_prompt(&prompt("plushie with pens"), (0, 0))
        .unwrap();
    assert_eq!(plain.subject.shape, GlyphShape::Disc);
}

#[test]
fn manifest_digest_tracks_content() {
    let a = WorldManifest::default();
    let mut b = a.clone();
    assert_eq!(a.digest(), b.digest());
    b.palette.night[0] = -0.69;
    assert_ne!(a.digest(), b.digest());
    let back: WorldManifest = serde_json::from_str(&a.to_json()).unwrap();
    assert_eq!(back.digest(), a.digest());
}

#[test]
fn committed_manifest_matches_default() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/world.json");
    let text = std::fs::read_to_string(path).unwrap();
    let committed: WorldManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(committed.digest(), WorldManifest::default().digest());
}
