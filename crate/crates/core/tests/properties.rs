//! Randomized invariant checks: anything the unit tests pin at single
//! points gets exercised here across generated inputs.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Duration;

use etamix::control::{EpsilonSchedule, QLearnerState, ReplayBuffer};
use etamix::env::{Episode, Transition};
use etamix::harness::{
    aggregate, parse_aggregate_csv, parse_raw_csv, raw_csv_string, Reduce, RunRecord, RawRow,
    Task,
};
use etamix::learners::lambda_return_two_forms;
use etamix::oracle::{effective_rank, identity_residual, random_instance, RandomInstance};

fn mrp_transition(s: usize, r: f64, s_next: usize, done: bool) -> Transition {
    Transition { s, a: None, r, s_next, done }
}

/// A chained episode over `n` states with the given rewards, ending done.
fn chained_episode(states: &[usize], rewards: &[f64]) -> Episode {
    let transitions = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| mrp_transition(states[i], r, states[i + 1], i + 1 == rewards.len()))
        .collect();
    Episode { transitions }
}

proptest! {
    #[test]
    fn replay_buffer_keeps_exactly_the_newest_entries(
        capacity in 1usize..20,
        rewards in prop::collection::vec(-100.0f64..100.0, 0..60),
    ) {
        let mut buffer = ReplayBuffer::new(capacity).unwrap();
        for (i, &r) in rewards.iter().enumerate() {
            buffer.push(mrp_transition(i, r, i + 1, false));
            prop_assert!(buffer.len() <= capacity);
            prop_assert_eq!(buffer.len(), (i + 1).min(capacity));
        }
        let kept: Vec<usize> = buffer.iter().map(|t| t.s).collect();
        let expected: Vec<usize> =
            (rewards.len().saturating_sub(capacity)..rewards.len()).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn replay_samples_only_ever_come_from_the_buffer(
        capacity in 1usize..12,
        n_push in 1usize..40,
        n_sample in 1usize..30,
        seed in any::<u64>(),
    ) {
        let mut buffer = ReplayBuffer::new(capacity).unwrap();
        for i in 0..n_push {
            buffer.push(mrp_transition(i, 0.0, i + 1, false));
        }
        let held: Vec<usize> = buffer.iter().map(|t| t.s).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = buffer.sample(n_sample, &mut rng).unwrap();
        prop_assert_eq!(batch.len(), n_sample);
        for t in batch {
            prop_assert!(held.contains(&t.s));
        }
    }

    #[test]
    fn effective_rank_ignores_positive_scaling(
        rows in 1usize..7,
        cols in 1usize..7,
        entries in prop::collection::vec(-100.0f64..100.0, 49),
        log_scale in -6.0f64..6.0,
        delta in 0.001f64..0.5,
    ) {
        let m = DMatrix::from_fn(rows, cols, |i, j| entries[i * 7 + j]);
        let scaled = &m * 10f64.powf(log_scale);
        match (effective_rank(&m, delta), effective_rank(&scaled, delta)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            // Only the all-zero matrix has no rank, and scaling preserves it.
            (Err(_), Err(_)) => prop_assert!(m.iter().all(|&x| x == 0.0)),
            (a, b) => prop_assert!(false, "rank disagreement: {a:?} vs {b:?}"),
        }
    }

    #[test]
    fn effective_rank_shrinks_as_the_tolerated_tail_grows(
        rows in 1usize..7,
        cols in 1usize..7,
        entries in prop::collection::vec(-100.0f64..100.0, 49),
        delta_lo in 0.001f64..0.5,
        gap in 0.0f64..0.4,
    ) {
        let m = DMatrix::from_fn(rows, cols, |i, j| entries[i * 7 + j]);
        prop_assume!(m.iter().any(|&x| x != 0.0));
        let delta_hi = delta_lo + gap;
        let lo = effective_rank(&m, delta_lo).unwrap();
        let hi = effective_rank(&m, delta_hi).unwrap();
        prop_assert!(hi <= lo, "rank rose from {lo} to {hi} as delta grew");
    }

    #[test]
    fn lambda_return_forms_agree_on_generated_episodes(
        n_states in 2usize..8,
        len in 1usize..25,
        seed in any::<u64>(),
        lam in 0.0f64..=1.0,
        gamma in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<usize> =
            (0..=len).map(|_| rand::Rng::random_range(&mut rng, 0..n_states)).collect();
        let rewards: Vec<f64> =
            (0..len).map(|_| rand::Rng::random_range(&mut rng, -10.0..10.0)).collect();
        let episode = chained_episode(&states, &rewards);
        let values =
            DVector::from_fn(n_states, |_, _| rand::Rng::random_range(&mut rng, -10.0..10.0));
        let (a, b) = lambda_return_two_forms(&episode, &values, lam, gamma).unwrap();
        prop_assert_eq!(a.len(), len);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn mixture_identity_residual_vanishes_on_random_instances(
        seed in any::<u64>(),
        eta in 0.0f64..=1.0,
        gamma in 0.0f64..0.99,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let RandomInstance { phi, d, p_pi, r_bar } = random_instance(&mut rng, 6);
        let r = identity_residual(&phi, &d, &p_pi, &r_bar, gamma, eta).unwrap();
        prop_assert!(r < 1e-8, "residual {r:.3e} at gamma={gamma}, eta={eta}");
    }

    #[test]
    fn aggregation_does_not_depend_on_record_order(
        metric_sets in prop::collection::btree_map(
            (0usize..3, 0usize..2, 1u64..5),
            prop::collection::vec(-100.0f64..100.0, 1..4),
            1..12,
        ),
        shuffle_seed in any::<u64>(),
        final_only in any::<bool>(),
    ) {
        let etas = [0.0, 0.5, 1.0];
        let alphas = [0.1, 0.3];
        let records: Vec<RunRecord> = metric_sets
            .into_iter()
            .map(|((e, a, seed), metrics)| RunRecord {
                task: Task::Predict,
                env: "walk".into(),
                eta: etas[e],
                gamma: 1.0,
                alpha: alphas[a],
                alpha_sf: alphas[a],
                alpha_r: alphas[a],
                seed,
                metrics,
                failed: false,
                duration: Duration::ZERO,
            })
            .collect();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let reduce = if final_only { Reduce::Final } else { Reduce::MeanOverEpisodes };
        prop_assert_eq!(aggregate(&records, reduce).unwrap(), aggregate(&shuffled, reduce).unwrap());
    }

    #[test]
    fn epsilon_schedule_interpolates_between_its_endpoints(
        initial in 0.0f64..=1.0,
        final_value in 0.0f64..=1.0,
        anneal in 0usize..1000,
        step in 0usize..2000,
    ) {
        let schedule = EpsilonSchedule::new(initial, final_value, anneal).unwrap();
        let v = schedule.value(step);
        let (lo, hi) = (initial.min(final_value), initial.max(final_value));
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        if step >= anneal {
            prop_assert_eq!(v, final_value);
        }
        // One more step never moves the value against the anneal direction.
        let next = schedule.value(step + 1);
        if initial >= final_value {
            prop_assert!(next <= v + 1e-15);
        } else {
            prop_assert!(next >= v - 1e-15);
        }
    }

    #[test]
    fn value_target_forms_are_algebraically_interchangeable(
        dim in 1usize..5,
        n_actions in 1usize..4,
        eta in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = QLearnerState::new(
            dim, n_actions, eta, 0.9, 0.1, 0.1, 0.1,
            EpsilonSchedule::constant(0.1).unwrap(),
        )
        .unwrap();
        let mut fill = |m: &mut DMatrix<f64>| {
            m.iter_mut().for_each(|x| *x = rand::Rng::random_range(&mut rng, -10.0..10.0));
        };
        fill(&mut state.theta);
        fill(&mut state.xi);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        state.w =
            DVector::from_fn(dim, |_, _| rand::Rng::random_range(&mut rng2, -10.0..10.0));
        let phi_next =
            DVector::from_fn(dim, |_, _| rand::Rng::random_range(&mut rng2, -1.0..1.0));
        let (factored, max_of_mixture) =
            etamix::control::eta_q_target_forms(&state, &phi_next);
        prop_assert!(
            (factored - max_of_mixture).abs() <= 1e-9 * (1.0 + factored.abs()),
            "{factored} vs {max_of_mixture}"
        );
    }

    #[test]
    fn raw_csv_rows_round_trip_exactly(
        task in "[a-z][a-z-]{0,8}",
        env in "[a-zA-Z0-9 ._-]{1,12}",
        eta in prop::num::f64::NORMAL | prop::num::f64::ZERO,
        gamma in -1e300f64..1e300,
        alpha in -1e300f64..1e300,
        seed in any::<u64>(),
        episode in any::<usize>(),
        metric in -1e300f64..1e300,
    ) {
        let row = RawRow {
            task,
            env,
            eta,
            gamma,
            alpha,
            alpha_sf: alpha / 3.0,
            alpha_r: alpha * 7.0,
            seed,
            episode,
            metric,
        };
        let text = raw_csv_string(std::slice::from_ref(&row));
        prop_assert!(text.ends_with('\n') && !text.contains('\r'));
        let parsed = parse_raw_csv(&text).unwrap();
        prop_assert_eq!(parsed, vec![row]);
    }

    #[test]
    fn aggregate_csv_rows_round_trip_exactly(
        env in "[a-zA-Z0-9 ._-]{1,12}",
        eta in 0.0f64..=1.0,
        alpha in prop::num::f64::NORMAL,
        metric_mean in prop::num::f64::NORMAL | prop::num::f64::ZERO,
        ci in 0.0f64..1e300,
        n_seeds in 1usize..1000,
        control in any::<bool>(),
    ) {
        let row = etamix::harness::AggregateRow {
            task: if control { Task::Control } else { Task::Predict },
            env,
            eta,
            alpha,
            metric_mean,
            ci95_half: ci,
            n_seeds,
            single_seed: n_seeds == 1,
        };
        let text = etamix::harness::aggregate_csv_string(std::slice::from_ref(&row));
        let parsed = parse_aggregate_csv(&text).unwrap();
        prop_assert_eq!(parsed, vec![row]);
    }
}
