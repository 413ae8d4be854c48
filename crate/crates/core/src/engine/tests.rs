use super::*;
use crate::distmath::{blend, softmax};
use crate::mock::{MockBackend, MockConfig, MockModel};
use crate::score::{Segment, TransitionSpec};

fn two_segment(a: f64, b: f64, transition: f64) -> Score {
    let mut score = Score::from_segments(vec![Segment::new("alpha", a), Segment::new("beta", b)]);
    score.transitions = vec![TransitionSpec::with_duration(transition)];
    score
}

fn three_segment() -> Score {
    let mut score = Score::from_segments(vec![
        Segment::new("alpha", 10.0),
        Segment::new("beta", 10.0),
        Segment::new("gamma", 10.0),
    ]);
    score.sampling.seed = 42;
    score
}

fn toy_backend() -> MockBackend {
    MockBackend::new(MockConfig {
        vocab_size: 4,
        channels: 1,
        frame_rate: 1.0,
        bias_size: 1,
        ..MockConfig::default()
    })
}

/// Three frames at 1 fps: alpha, one window frame at w = 1/2, beta.
fn toy_score(mode: SamplingMode, beam_width: usize) -> Score {
    let mut score = two_segment(2.0, 1.0, 0.9);
    score.sampling.base_top_k = 4;
    score.sampling.mode = mode;
    score.sampling.beam_width = beam_width;
    score
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Blended distribution computed straight from the mock formula.
fn oracle_distribution(model: &MockModel, params: &EffectiveParams, prompts: &[&str], last: Option<u32>) -> Distribution {
    let pa = softmax(&model.logits(prompts[params.prompt_index_a], last), params.temperature).unwrap();
    match params.prompt_index_b {
        Some(b) => {
            let pb = softmax(&model.logits(prompts[b], last), params.temperature).unwrap();
            blend(&pa, &pb, params.w).unwrap()
        }
        None => pa,
    }
}

#[test]
fn repeated_runs_are_identical() {
    let mut score = Score::from_segments(vec![Segment::new("alpha", 4.0)]);
    score.sampling.seed = 7;
    let options = GenerateOptions::default();
    let a = generate(&score, MockBackend::default(), &options, None).unwrap();
    let b = generate(&score, MockBackend::default(), &options, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.frames.len(), 200);
    assert!(!a.truncated);
}

#[test]
fn seeds_change_the_stream() {
    let mut score = three_segment();
    let options = GenerateOptions::default();
    let a = generate(&score, MockBackend::default(), &options, None).unwrap();
    score.sampling.seed = 43;
    let b = generate(&score, MockBackend::default(), &options, None).unwrap();
    assert_ne!(a.frames, b.frames);
}

#[test]
fn query_counts_follow_the_weight() {
    let score = two_segment(10.0, 10.0, 4.0);
    let mut decoder = Decoder::new(&score, MockBackend::default(), GenerateOptions::default()).unwrap();
    while !decoder.is_done() {
        let frame = decoder.frame_index();
        let params = decoder.schedule().entries()[frame];
        let before = decoder.backend().stats().logits_queries;
        decoder.step().unwrap();
        let issued = decoder.backend().stats().logits_queries - before;
        let expected = if params.w.is_zero() { 1 } else { 2 };
        assert_eq!(issued, expected, "frame {frame}");
    }
}

#[test]
fn backend_economy() {
    let score = three_segment();
    let mut decoder = Decoder::new(&score, MockBackend::default(), GenerateOptions::default()).unwrap();
    let total = decoder.schedule().total_frames();
    let window = decoder.schedule().window_frames();
    while !decoder.is_done() {
        decoder.step().unwrap();
    }
    let queries = decoder.backend().stats().logits_queries;
    assert_eq!(window, 400);
    assert_eq!(queries, (total - window) + 2 * window);
    assert_eq!(decoder.stats().logits_queries, queries);
    let result = decoder.finish().unwrap();
    assert_eq!(result.stats.contexts_opened, 3);
}

#[test]
fn zero_weight_matches_single_context_decoding() {
    let two = two_segment(10.0, 10.0, 4.0);
    let one = Score::from_segments(vec![Segment::new("alpha", 20.0)]);
    let mut blended = Decoder::new(&two, MockBackend::default(), GenerateOptions::default()).unwrap();
    let mut single = Decoder::new(&one, MockBackend::default(), GenerateOptions::default()).unwrap();
    for _ in 0..400 {
        blended.step().unwrap();
        single.step().unwrap();
        assert_eq!(blended.last_distributions(), single.last_distributions());
    }
}

#[test]
fn greedy_picks_argmax_of_exact_blend() {
    let mut score = two_segment(3.0, 3.0, 0.06);
    score.sampling.mode = SamplingMode::Greedy;
    let model = MockModel::new(64, 8);
    let mut decoder = Decoder::new(&score, MockBackend::default(), GenerateOptions::default()).unwrap();
    let mut checked_half = false;
    while !decoder.is_done() {
        let params = decoder.schedule().entries()[decoder.frame_index()];
        let last = decoder.history().last().map(|f| f[0]);
        let frame = decoder.step().unwrap();
        let exact = oracle_distribution(&model, &params, &["alpha", "beta"], last);
        assert_eq!(frame[0] as usize, argmax(&exact));
        checked_half |= params.w.get() == 0.5;
    }
    assert!(checked_half);
}

#[test]
fn incoming_context_primed_with_short_history() {
    // Window of 50 frames centered on frame 325 opens at frame 300.
    let score = two_segment(6.5, 3.0, 1.0);
    let mut decoder = Decoder::new(&score, MockBackend::default(), GenerateOptions::default()).unwrap();
    while decoder.frame_index() < 300 {
        decoder.step().unwrap();
    }
    assert_eq!(decoder.live_contexts().len(), 1);
    decoder.next_distributions().unwrap();
    let live = decoder.live_contexts();
    assert_eq!(live.len(), 2);
    let incoming = decoder.backend().context_history(live[1].id).unwrap();
    assert_eq!(incoming.len(), 300);
    assert_eq!(incoming, decoder.history());
}

#[test]
fn incoming_context_primed_with_horizon() {
    let score = two_segment(41.0, 3.0, 2.0);
    let mut decoder = Decoder::new(&score, MockBackend::default(), GenerateOptions::default()).unwrap();
    assert_eq!(decoder.schedule().windows()[0].start, 2000);
    while decoder.frame_index() < 2000 {
        decoder.step().unwrap();
    }
    decoder.next_distributions().unwrap();
    let live = decoder.live_contexts();
    let backend = decoder.backend();
    let outgoing = backend.context_history(live[0].id).unwrap();
    let incoming = backend.context_history(live[1].id).unwrap();
    assert_eq!(incoming.len(), 500);
    assert_eq!(incoming, &decoder.history()[1500..]);
    assert!(outgoing.ends_with(incoming));
    assert_eq!(live[1].position, 500);
}

#[test]
fn live_contexts_share_history() {
    let score = three_segment();
    let options = GenerateOptions {
        priming_horizon: 120,
        ..GenerateOptions::default()
    };
    let mut decoder = Decoder::new(&score, MockBackend::default(), options).unwrap();
    while !decoder.is_done() {
        decoder.step().unwrap();
        let history = decoder.history();
        let live = decoder.live_contexts();
        assert_eq!(decoder.backend().live_contexts().len(), live.len());
        for handle in &live {
            let fed = decoder.backend().context_history(handle.id).unwrap();
            assert_eq!(fed.len(), handle.position);
            assert!(history.ends_with(fed), "context {} diverged at frame {}", handle.id, history.len());
        }
    }
    let result = decoder.finish().unwrap();
    assert_eq!(result.frames.len(), 1500);
}

#[test]
fn contexts_are_released() {
    let mut backend = MockBackend::default();
    generate(&three_segment(), &mut backend, &GenerateOptions::default(), None).unwrap();
    assert!(backend.live_contexts().is_empty());
    assert_eq!(backend.stats().contexts_created, backend.stats().contexts_freed);
}

/// The first post-window distribution against what the last window
/// frame's parameters give on the same history, so only the handoff (w to
/// 1 and the boost ending) separates them.
#[test]
fn boundary_divergence_below_within_segment_median() {
    let model = MockModel::new(64, 8);
    for seed in 0..5 {
        let mut score = two_segment(10.0, 10.0, 4.0);
        score.sampling.seed = seed;
        let mut decoder = Decoder::new(&score, MockBackend::default(), GenerateOptions::default()).unwrap();
        let window_end = decoder.schedule().windows()[0].end();
        let last_window = decoder.schedule().entries()[window_end - 1];
        let mut dists = Vec::new();
        let mut boundary = None;
        while !decoder.is_done() {
            if decoder.frame_index() == window_end {
                let last = decoder.history().last().map(|f| f[0]);
                boundary = Some(oracle_distribution(&model, &last_window, &["alpha", "beta"], last));
            }
            decoder.step().unwrap();
            dists.push(decoder.last_distributions()[0].clone());
        }
        let boundary = kl(&dists[window_end], &boundary.unwrap());
        let mut within: Vec<f64> = (window_end + 1..dists.len())
            .map(|f| kl(&dists[f], &dists[f - 1]))
            .collect();
        within.sort_by(f64::total_cmp);
        let median = within[within.len() / 2];
        assert!(boundary < median, "seed {seed}: boundary {boundary} vs median {median}");
    }
}

#[test]
fn per_window_entropy_reported() {
    let result = generate(&three_segment(), MockBackend::default(), &GenerateOptions::default(), None).unwrap();
    let windows = &result.stats.windows;
    assert_eq!(windows.len(), 2);
    assert_eq!((windows[0].start, windows[0].len), (400, 200));
    assert_eq!((windows[1].start, windows[1].len), (900, 200));
    assert!(windows.iter().all(|w| w.mean_entropy > 0.0));
}

#[test]
fn capacity_overflow_aborts_with_partial_result() {
    let backend = MockBackend::new(MockConfig {
        max_context_frames: 120,
        ..MockConfig::default()
    });
    let score = Score::from_segments(vec![Segment::new("alpha", 4.0)]);
    match generate(&score, backend, &GenerateOptions::default(), None) {
        Err(Error::Aborted { partial, source }) => {
            assert!(partial.truncated);
            assert_eq!(partial.frames.len(), 120);
            assert!(matches!(*source, Error::Capacity(_)));
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn progress_reports_every_frame() {
    let score = Score::from_segments(vec![Segment::new("alpha", 1.0)]);
    let mut seen = Vec::new();
    let mut sink = |p: Progress| seen.push(p.frame);
    generate(&score, MockBackend::default(), &GenerateOptions::default(), Some(&mut sink)).unwrap();
    assert_eq!(seen, (1..=50).collect::<Vec<_>>());
}

#[test]
fn beam_of_one_equals_greedy() {
    let mut greedy = three_segment();
    greedy.sampling.mode = SamplingMode::Greedy;
    let mut beam = greedy.clone();
    beam.sampling.mode = SamplingMode::Beam;
    beam.sampling.beam_width = 1;
    let options = GenerateOptions::default();
    let g = generate(&greedy, MockBackend::default(), &options, None).unwrap();
    let b = generate(&beam, MockBackend::default(), &options, None).unwrap();
    assert_eq!(g.frames, b.frames);
}

#[test]
fn wide_beam_finds_exhaustive_optimum() {
    let model = MockModel::new(4, 1);
    for width in [2, 64] {
        let score = toy_score(SamplingMode::Beam, width);
        let mut backend = toy_backend();
        let result = generate(&score, &mut backend, &GenerateOptions::default(), None).unwrap();
        assert!(backend.live_contexts().is_empty());
        let schedule = compile_score(&score, 1.0, &ValidationOptions::default()).unwrap();
        assert_eq!(schedule.entries()[1].w.get(), 0.5);

        let mut best: Option<(f64, [u32; 3])> = None;
        for code in 0..64u32 {
            let seq = [code / 16, (code / 4) % 4, code % 4];
            let mut lp = 0.0;
            for f in 0..3 {
                let last = (f > 0).then(|| seq[f - 1]);
                let d = oracle_distribution(&model, &schedule.entries()[f], &["alpha", "beta"], last);
                lp += d[seq[f] as usize].ln();
            }
            if best.is_none_or(|(b, _)| lp > b) {
                best = Some((lp, seq));
            }
        }
        let (_, want) = best.unwrap();
        let got: Vec<u32> = result.frames.iter().map(|f| f[0]).collect();
        assert_eq!(got, want.to_vec(), "width {width}");
    }
}

#[test]
fn beam_expansion_doubles_in_window() {
    let mut score = two_segment(10.0, 10.0, 4.0);
    score.sampling.mode = SamplingMode::Beam;
    score.sampling.base_top_k = 2;
    score.sampling.beam_width = 3;
    let result = generate(&score, MockBackend::default(), &GenerateOptions::default(), None).unwrap();
    let widths = &result.stats.expansion_width;
    assert_eq!(widths.len(), 1000);
    for (f, &w) in widths.iter().enumerate() {
        let expected = if (400..600).contains(&f) { 4 } else { 2 };
        assert_eq!(w, expected, "frame {f}");
    }
}

#[test]
fn beam_rejected_by_step_decoder() {
    let score = toy_score(SamplingMode::Beam, 2);
    assert!(matches!(
        Decoder::new(&score, toy_backend(), GenerateOptions::default()),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn sequential_and_rayon_agree() {
    let seq = GenerateOptions {
        parallelism: Parallelism::Sequential,
        ..GenerateOptions::default()
    };
    let par = GenerateOptions {
        parallelism: Parallelism::Rayon,
        ..GenerateOptions::default()
    };
    let score = three_segment();
    let seeds = [1, 2, 3, 4];
    let make = || Ok(MockBackend::default());
    let a: Vec<_> = generate_batch(&score, &seeds, make, &seq).into_iter().map(Result::unwrap).collect();
    let b: Vec<_> = generate_batch(&score, &seeds, make, &par).into_iter().map(Result::unwrap).collect();
    assert_eq!(a, b);
    assert_ne!(a[0].frames, a[1].frames);

    let mut beam = two_segment(3.0, 3.0, 1.0);
    beam.sampling.mode = SamplingMode::Beam;
    beam.sampling.beam_width = 8;
    let a = generate(&beam, MockBackend::default(), &seq, None).unwrap();
    let b = generate(&beam, MockBackend::default(), &par, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mixture_mass_matches_oracle() {
    let score = two_segment(10.0, 10.0, 4.0);
    let model = MockModel::new(64, 8);
    let mut decoder = Decoder::new(&score, MockBackend::default(), GenerateOptions::default()).unwrap();
    // w = (i + 1) / 201 is nearest 1/2 at i = 100 (frame 500).
    while decoder.frame_index() < 500 {
        decoder.step().unwrap();
    }
    let params = decoder.schedule().entries()[500];
    assert!((params.w.get() - 0.5).abs() < 0.003);
    let last = decoder.history().last().map(|f| f[0]);
    let dists = decoder.next_distributions().unwrap();
    let exact = oracle_distribution(&model, &params, &["alpha", "beta"], last);
    for (got, want) in dists[0].iter().zip(exact.iter()) {
        assert!((got - want).abs() < 1e-12);
    }
    let beta = model.bias("beta");
    assert!((dists[0].mass_on(&beta) - exact.mass_on(&beta)).abs() < 1e-12);
}
