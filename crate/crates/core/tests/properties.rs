use proptest::prelude::*;

use syncgen::codec::{analyze, encode_frames, fit_rvq_with, CodecConfig};
use syncgen::curation::{apply_threshold, embed_audio_clip, embed_video_clip, AvEmbedder};
use syncgen::metrics::{
    frechet_distance, kl_divergence, offset_class, offset_class_value, sync_score, OFFSET_CLASSES,
};
use syncgen::sampler::cfg_mix;
use syncgen::world::io::{ClipPaths, ManifestRecord};
use syncgen::world::{
    corrupt_audio, generate_timeline, render_audio, render_audio_unclipped, Corruption, Event, EventTimeline,
    WorldConfig,
};

fn world(duration_s: f64) -> WorldConfig {
    WorldConfig {
        duration_s,
        ..WorldConfig::default()
    }
}

fn log_probs(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + raw.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    raw.iter().map(|x| x - lse).collect()
}

fn record(id: usize, similarity: f64) -> ManifestRecord {
    ManifestRecord {
        id: format!("r{id:03}"),
        seed: id as u64,
        duration_s: 1.0,
        corruption: Corruption::None,
        paths: ClipPaths {
            audio: String::new(),
            video: String::new(),
            timeline: String::new(),
        },
        similarity: Some(similarity),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn timelines_are_sorted_and_in_range(seed in any::<u64>(), dur in 0.1f64..5.0, rate in 0.5f64..8.0, c in 2usize..12) {
        let tl = generate_timeline(seed, dur, rate, c).unwrap();
        prop_assert!(tl.events.windows(2).all(|w| w[0].t <= w[1].t));
        prop_assert!(tl.events.iter().all(|e| (0.0..dur).contains(&e.t) && e.class_id < c));
    }

    #[test]
    fn clip_lengths_follow_duration(seed in any::<u64>(), dur in 0.2f64..3.0) {
        let w = world(dur);
        let clip = w.clip("p", seed).unwrap();
        prop_assert_eq!(clip.audio.samples.len(), (dur * 8000.0).round() as usize);
        prop_assert_eq!(clip.video.t_v, (dur * 25.0).round() as usize);
        prop_assert!((clip.audio.duration_s() - clip.video.duration_s()).abs() <= 1.0 / 25.0);
        prop_assert!(clip.video.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rendering_is_superposed(seed in any::<u64>()) {
        let tl = generate_timeline(seed, 1.0, 4.0, 8).unwrap();
        let whole = render_audio_unclipped(&tl, 8000).unwrap();
        let mut sum = vec![0.0f64; whole.len()];
        for e in &tl.events {
            let one = EventTimeline::from_events(1.0, 8, vec![*e]).unwrap();
            for (s, v) in sum.iter_mut().zip(render_audio_unclipped(&one, 8000).unwrap()) {
                *s += v;
            }
        }
        for (a, b) in whole.iter().zip(&sum) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn corruption_leaves_video_alone(seed in any::<u64>(), mode in 1usize..4) {
        let mode = [Corruption::None, Corruption::Replace, Corruption::Tone, Corruption::Noise][mode];
        let clip = world(1.0).clip("p", seed).unwrap();
        let bad = corrupt_audio(&clip, mode, seed ^ 1).unwrap();
        prop_assert_eq!(bad.corruption, mode);
        prop_assert_eq!(bad.audio.samples.len(), clip.audio.samples.len());
        let same = clip.video.features.iter().zip(&bad.video.features).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn residual_energy_never_grows(seed in 0u64..1000) {
        let w = world(0.5);
        let feats: Vec<_> = (0..6).map(|i| analyze(&w.clip("p", seed * 7 + i).unwrap().audio, 64, 32).unwrap()).collect();
        let books = fit_rvq_with(&feats, &CodecConfig { n_q: 3, k: 8, iters: 3, seed, ..CodecConfig::default() }).unwrap();
        let probe = analyze(&w.clip("q", seed + 5000).unwrap().audio, 64, 32).unwrap();
        let mut trace = Vec::new();
        let grid = encode_frames(&probe, &books, Some(&mut trace)).unwrap();
        prop_assert!(grid.tokens.iter().all(|&t| (t as usize) < 8));
        for frame in trace.chunks(3) {
            prop_assert!(frame.windows(2).all(|p| p[1] <= p[0] + 1e-9));
        }
    }

    #[test]
    fn guidance_at_one_is_the_conditional(raw in prop::collection::vec(-30.0f64..30.0, 2..64), other in prop::collection::vec(-30.0f64..30.0, 64)) {
        let lc = log_probs(&raw);
        let lu = log_probs(&other[..raw.len()]);
        let mixed = cfg_mix(&lc, &lu, 1.0);
        prop_assert_eq!(&mixed, &cfg_mix(&lc, &lc, 1.0));
        for (a, b) in mixed.iter().zip(&lc) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn guided_distribution_is_normalized(raw in prop::collection::vec(-10.0f64..10.0, 2..64), gamma in 0.0f64..12.0) {
        let lc = log_probs(&raw);
        let lu = log_probs(&raw.iter().rev().copied().collect::<Vec<_>>());
        let total: f64 = cfg_mix(&lc, &lu, gamma).iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embeddings_are_unit_length(seed in any::<u64>()) {
        let clip = world(1.0).clip("p", seed).unwrap();
        let emb = AvEmbedder::new(8, 16).unwrap();
        for e in [embed_audio_clip(&clip.audio, &emb).unwrap(), embed_video_clip(&clip.video, &emb).unwrap()] {
            prop_assert_eq!(e.len(), 8);
            prop_assert!(e.iter().all(|&x| x >= 0.0));
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn thresholds_nest(sims in prop::collection::vec(-1.0f64..1.0, 0..60), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let recs: Vec<_> = sims.iter().enumerate().map(|(i, &s)| record(i, s)).collect();
        let (lo, hi) = (a.min(b), a.max(b));
        let loose: Vec<String> = apply_threshold(&recs, lo).into_iter().map(|r| r.id).collect();
        let tight = apply_threshold(&recs, hi);
        prop_assert!(tight.iter().all(|r| loose.contains(&r.id)));
        let mut reversed = recs.clone();
        reversed.reverse();
        let mut ids: Vec<String> = apply_threshold(&reversed, lo).into_iter().map(|r| r.id).collect();
        ids.sort();
        prop_assert_eq!(ids, loose);
    }

    #[test]
    fn offsets_map_to_one_class(offset in -2.5f64..2.5) {
        let c = offset_class(offset);
        prop_assert!(c < OFFSET_CLASSES);
        let v = offset_class_value(c);
        if offset.abs() <= 2.0 {
            prop_assert!((v - offset).abs() <= 0.1 + 1e-12);
        }
        prop_assert!((offset_class_value(OFFSET_CLASSES - 1 - c) + v).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(0.01f64..1.0, 2..10), q in prop::collection::vec(0.01f64..1.0, 10)) {
        let norm = |v: &[f64]| -> Vec<f64> { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect() };
        let p = norm(&p);
        let q = norm(&q[..p.len()]);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..20), b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..20)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-8);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sync_score_ignores_pair_order(seed in any::<u64>(), shift in 0usize..6) {
        let tls: Vec<EventTimeline> = (0..5)
            .map(|i| {
                EventTimeline::from_events(2.56, 8, vec![Event { t: 0.2 + 0.3 * i as f64, class_id: i, amplitude: 1.0 }]).unwrap()
            })
            .collect();
        let waves: Vec<_> = tls
            .iter()
            .enumerate()
            .map(|(i, tl)| {
                let dt = ((seed as usize + i) % 5) as f64 * 0.04;
                let moved = EventTimeline::from_events(2.56, 8, tl.events.iter().map(|e| Event { t: e.t + dt, ..*e }).collect()).unwrap();
                render_audio(&moved, 8000).unwrap()
            })
            .collect();
        let mut pairs: Vec<_> = waves.iter().zip(&tls).collect();
        let (a, na) = sync_score(&pairs).unwrap();
        let n = pairs.len();
        pairs.rotate_left(shift % n);
        pairs.reverse();
        let (b, nb) = sync_score(&pairs).unwrap();
        prop_assert_eq!(na, nb);
        prop_assert!((a - b).abs() < 1e-9);
    }
}
