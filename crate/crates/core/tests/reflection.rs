mod common;

use common::*;
use lqe_core::consistency::{SearchNoise, SearchRequest};
use lqe_core::{
    c_score, expand_search, generate, maybe_correct, reflection_cost, Engine, Error, Event, FrameLatent,
    LatentQueue, Mode, PromptTrack, ReflectionState, ReflectionWindows, WindowEngine,
};
use proptest::prelude::*;

fn resident_queue(n: usize) -> (lqe_core::SchedulerConfig, LatentQueue, lqe_core::PerfectTargetDenoiser) {
    let cfg = config(Mode::Tta, n);
    let den = perfect(&cfg, targets_for(&cfg, 21));
    let queue = {
        let mut engine = Engine::new(cfg.clone(), &den).unwrap();
        let seed = engine.clean_seed(1).unwrap();
        engine.init_zigzag_queue(&seed).unwrap()
    };
    (cfg, queue, den)
}

fn search(
    cfg: &lqe_core::SchedulerConfig,
    queue: &LatentQueue,
    den: &lqe_core::PerfectTargetDenoiser,
    windows: ReflectionWindows,
    n_samp: usize,
    noise: SearchNoise,
) -> lqe_core::consistency::SearchOutcome {
    let engine = Engine::new(cfg.clone(), den).unwrap();
    let windows_engine = WindowEngine::new(cfg.f0);
    let prompts = PromptTrack::single();
    expand_search(
        queue,
        &SearchRequest {
            windows,
            n_samp,
            l_zig: cfg.l_zig,
            engine: &windows_engine,
            denoiser: den,
            sampler: engine.sampler(),
            prompts: &prompts,
            n_deq: 0,
            iteration: 1,
            seed: cfg.seed,
            noise,
        },
    )
    .unwrap()
}

fn windows(f_judg: usize) -> ReflectionWindows {
    ReflectionWindows {
        f_eval: 4,
        f_ref: 8,
        f_judg,
        f_guid: 8,
    }
}

#[test]
fn candidates_cover_the_tail_after_whole_rounds() {
    let (cfg, queue, den) = resident_queue(8);
    assert_eq!(queue.len(), 216);
    let out = search(&cfg, &queue, &den, windows(200), 2, SearchNoise::Fresh { search: 0 });
    assert_eq!(out.rounds, 5);
    assert_eq!(out.candidates.len(), 2);
    assert_eq!(out.passes.len(), 2);
    assert!(out.passes.iter().all(|p| p.len() == 5));
    let tail: Vec<&FrameLatent> = queue.iter().skip(199).collect();
    for c in &out.candidates {
        assert_eq!(c.len(), 17);
        let levels: Vec<usize> = c.iter().map(|f| f.level).collect();
        let expected: Vec<usize> = tail.iter().map(|f| f.level).collect();
        assert_eq!(levels, expected);
        let idx: Vec<usize> = c.iter().map(|f| f.frame_index).collect();
        let expected: Vec<usize> = tail.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, expected);
    }
    assert_ne!(out.candidates[0], out.candidates[1]);
    let cost = reflection_cost(1, 2, queue.len(), 200, cfg.l_zig);
    assert_eq!(out.passes.iter().map(Vec::len).sum::<usize>(), cost);
}

#[test]
fn replaying_enqueue_noise_reproduces_the_tail() {
    let (cfg, queue, den) = resident_queue(8);
    let out = search(&cfg, &queue, &den, windows(200), 1, SearchNoise::Replay);
    let tail: Vec<FrameLatent> = queue.iter().skip(199).cloned().collect();
    let bits = |v: &[FrameLatent]| v.iter().flat_map(|f| f.data.iter().map(|x| x.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&out.candidates[0]), bits(&tail));
}

#[test]
fn search_leaves_queue_and_guidance_untouched() {
    let (cfg, queue, den) = resident_queue(8);
    let before = queue.clone();
    let _ = search(&cfg, &queue, &den, windows(205), 3, SearchNoise::Fresh { search: 4 });
    assert_eq!(queue, before);
}

#[test]
fn search_without_room_for_guidance_is_a_state_error() {
    let (cfg, queue, den) = resident_queue(8);
    let engine = Engine::new(cfg.clone(), &den).unwrap();
    let we = WindowEngine::new(cfg.f0);
    let prompts = PromptTrack::single();
    let req = SearchRequest {
        windows: ReflectionWindows {
            f_guid: 8,
            ..windows(8)
        },
        n_samp: 1,
        l_zig: 4,
        engine: &we,
        denoiser: &den,
        sampler: engine.sampler(),
        prompts: &prompts,
        n_deq: 0,
        iteration: 1,
        seed: 0,
        noise: SearchNoise::Replay,
    };
    assert!(matches!(expand_search(&queue, &req), Err(Error::State(_))));
}

/// `len` latents of shape 2x2 pointing along `dir`.
fn frames(len: usize, dir: [f32; 2], first_index: usize) -> Vec<FrameLatent> {
    (0..len)
        .map(|i| FrameLatent::new(vec![dir[0], dir[1], dir[0], dir[1]], first_index + i, 1))
        .collect()
}

fn toy_queue() -> LatentQueue {
    let mut items = frames(19, [1.0, 0.0], 1);
    items.extend(frames(11, [0.6, 0.8], 20));
    LatentQueue::from_items(items, 1)
}

const TOY: ReflectionWindows = ReflectionWindows {
    f_eval: 2,
    f_ref: 4,
    f_judg: 20,
    f_guid: 6,
};

#[test]
fn incumbent_kept_when_no_candidate_beats_it() {
    let mut q = toy_queue();
    let before = q.clone();
    let c_init = TOY.incumbent_score(&q, 2, 2).unwrap();
    assert!((c_init - 0.6).abs() < 1e-6);
    let cands = vec![frames(11, [0.0, 1.0], 20), frames(11, [0.6, 0.8], 20)];
    let mut state = ReflectionState::with_score(0.9);
    state.n_all = 3;
    let out = maybe_correct(&mut q, &cands, &mut state, &TOY, c_init, 2, 2).unwrap();
    assert_eq!(out.winner, None);
    assert_eq!(q, before);
    assert_eq!((state.n_eval, state.n_corr), (1, 0));
    assert_eq!(state.prev_score, Some(c_init));
}

#[test]
fn best_candidate_spliced_and_ties_go_to_lowest_index() {
    let mut q = toy_queue();
    let c_init = TOY.incumbent_score(&q, 2, 2).unwrap();
    let good = frames(11, [2.0, 0.0], 20);
    let cands = vec![frames(11, [0.0, 1.0], 20), good.clone(), good.clone()];
    let mut state = ReflectionState::with_score(0.9);
    let out = maybe_correct(&mut q, &cands, &mut state, &TOY, c_init, 2, 2).unwrap();
    assert_eq!(out.winner, Some(1));
    assert_eq!(out.accepted, 1.0);
    assert!(out.accepted > out.previous);
    assert_eq!(q.iter().skip(19).cloned().collect::<Vec<_>>(), good);
    assert_eq!((state.n_eval, state.n_corr), (1, 1));
    assert_eq!(state.prev_score, Some(1.0));
}

#[test]
fn misfitting_candidate_is_a_shape_error() {
    let mut q = toy_queue();
    let mut state = ReflectionState::default();
    let res = maybe_correct(&mut q, &[frames(3, [1.0, 0.0], 20)], &mut state, &TOY, 0.5, 2, 2);
    assert!(matches!(res, Err(Error::Shape(_))));
}

#[test]
fn counters_stay_ordered_through_a_drift_run() {
    let cfg = lqe_core::SchedulerConfig {
        delta_adju: 0.003,
        ..config(Mode::TtaDce, 80)
    };
    let den = drift(&cfg, targets_for(&cfg, 22), 0.1, 22);
    let run = generate(&cfg, &den).unwrap();
    let (mut all, mut eval, mut corr) = (0, 0, 0);
    let mut recorded: Option<f64> = None;
    for e in run.trace.events() {
        match e {
            Event::Eval { score, previous, triggered, .. } => {
                all += 1;
                assert_eq!(*previous, recorded);
                if !triggered {
                    recorded = Some(*score);
                }
            }
            Event::Search { incumbent, .. } => {
                eval += 1;
                recorded = Some(*incumbent);
            }
            Event::Correct { previous, score, .. } => {
                corr += 1;
                assert!(score > previous);
                assert!(recorded.unwrap() <= *score);
                recorded = Some(*score);
            }
            _ => {}
        }
        assert!(corr <= eval && eval <= all);
    }
    assert!(eval > 0);
    assert_eq!((all, eval, corr), (run.reflection.n_all, run.reflection.n_eval, run.reflection.n_corr));
}

fn brute(eval: &[Vec<f32>], refs: &[Vec<f32>], d: usize) -> f64 {
    let pooled = |f: &Vec<f32>| {
        let l = f.len() / d;
        let p: Vec<f64> = (0..d).map(|c| (0..l).map(|t| f64::from(f[t * d + c])).sum::<f64>() / l as f64).collect();
        let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        p.into_iter().map(move |v| v / n).collect::<Vec<_>>()
    };
    let mut sum = 0.0;
    for e in eval {
        for r in refs {
            sum += pooled(e).iter().zip(pooled(r)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    sum / (eval.len() * refs.len()) as f64
}

fn frame_set(l: usize, d: usize, max: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(0.1f32..3.0, l * d), 1..max)
}

proptest! {
    #[test]
    fn c_score_properties(
        (l, d, eval, refs) in (1usize..6, 1usize..6).prop_flat_map(|(l, d)| (Just(l), Just(d), frame_set(l, d, 6), frame_set(l, d, 10))),
        alpha in 0.01f32..50.0,
    ) {
        let s = c_score(&eval, &refs, l, d).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - brute(&eval, &refs, d)).abs() <= 1e-9);
        prop_assert!((s - c_score(&refs, &eval, l, d).unwrap()).abs() <= 1e-12);
        let scaled: Vec<Vec<f32>> = eval.iter().map(|f| f.iter().map(|v| v * alpha).collect()).collect();
        prop_assert!((s - c_score(&scaled, &refs, l, d).unwrap()).abs() <= 1e-6);
    }
}
