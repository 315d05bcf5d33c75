//! Property tests for the data, environment and metrics invariants.

use candle_dqn::dqnagent::{Eviction, Experience, ReplayMemory};
use candle_dqn::marketdata::{
    make_states, normalize_window, parse_csv, split, write_csv, Candle, NormScheme, OhlcSeries, RawState, SplitSpec,
    StateMode,
};
use candle_dqn::metrics::{
    arithmetic_return, daily_return_variance, time_weighted_return, total_return, value_at_risk, volatility, EquityCurve,
    VarMethod,
};
use candle_dqn::tradeenv::{execute_equity, positions, reward, Action};
use chrono::{Duration, NaiveDate};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 6, 1).unwrap()
}

/// Valid candles on strictly increasing, possibly gapped dates.
fn series_strategy(min: usize, max: usize) -> impl Strategy<Value = OhlcSeries> {
    prop::collection::vec((1u32..4, 1.0f64..500.0, 0.0f64..0.1, 0.0f64..0.1, 0.0f64..1.0), min..max).prop_map(|rows| {
        let mut date = start();
        let candles = rows
            .into_iter()
            .map(|(gap, open, up, down, mix)| {
                date += Duration::days(gap as i64);
                let high = open * (1.0 + up);
                let low = open * (1.0 - down);
                let close = low + (high - low) * mix;
                Candle::new(date, open, high, low, close).unwrap()
            })
            .collect();
        OhlcSeries::new("P", candles).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(series in series_strategy(2, 40)) {
        let mut buf = Vec::new();
        write_csv(&series, &mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), "P").unwrap();
        prop_assert_eq!(back.skipped_missing + back.skipped_invalid, 0);
        prop_assert_eq!(back.series, series);
    }

    #[test]
    fn windows_slide_by_one_candle(series in series_strategy(12, 40), w in 1usize..8) {
        let mode = StateMode::Windowed { w };
        let seq = make_states(&series, mode, NormScheme::PrevCloseRatio).unwrap();
        prop_assert_eq!(seq.len(), series.len() - (w - 1));
        prop_assert_eq!(seq.closes[0], series.candles()[w - 1].close());
        for pair in seq.states.windows(2) {
            // rows 1..w of one window are rows 0..w-1 of the next
            prop_assert_eq!(&pair[0].values()[4..], &pair[1].values()[..4 * (w - 1)]);
        }
        let rows = normalize_window(series.candles(), None, NormScheme::PrevCloseRatio);
        let last = seq.states.last().unwrap();
        prop_assert_eq!(last.row(w - 1), &rows[rows.len() - 1][..]);
    }

    #[test]
    fn split_then_concat_restores_series(series in series_strategy(6, 40), cut in 2usize..4) {
        let cut = cut.min(series.len() - 2);
        let point = series.candles()[cut].date();
        let spec = SplitSpec::new(series.first_date(), point, series.last_date()).unwrap();
        let (train, test) = split(&series, &spec).unwrap();
        prop_assert!(train.candles().iter().all(|c| c.date() < point));
        prop_assert!(test.candles().iter().all(|c| c.date() >= point));
        prop_assert_eq!(train.concat(&test).unwrap(), series);
    }

    #[test]
    fn twr_never_exceeds_mean_return(xs in prop::collection::vec(-0.5f64..0.5, 1..60)) {
        let twr = time_weighted_return(&xs).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!(twr <= mean + 1e-12);
        if xs.iter().all(|x| *x == xs[0]) {
            prop_assert!((twr - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn total_return_is_scale_invariant(ws in prop::collection::vec(1.0f64..1e4, 2..50), k in 1e-3f64..1e3) {
        let a = total_return(&EquityCurve::new(ws.clone()).unwrap());
        let b = total_return(&EquityCurve::new(ws.iter().map(|w| w * k).collect()).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn variance_is_homogeneous_of_degree_two(xs in prop::collection::vec(-0.2f64..0.2, 2..40), k in 0.1f64..10.0) {
        let v = daily_return_variance(&xs).unwrap();
        let scaled: Vec<f64> = xs.iter().map(|x| x * k).collect();
        let vk = daily_return_variance(&scaled).unwrap();
        prop_assert!((vk - k * k * v).abs() <= 1e-9 * vk.abs().max(1e-12));
        prop_assert!((volatility(&xs).unwrap().powi(2) - v).abs() <= 1e-15 + 1e-12 * v);
    }

    #[test]
    fn cost_free_buy_and_sell_rewards_are_reciprocal(p1 in 0.01f64..1e4, p2 in 0.01f64..1e4) {
        let up = reward(Action::Buy, false, p1, p2, 0.0) / 100.0 + 1.0;
        let down = reward(Action::Sell, true, p1, p2, 0.0) / 100.0 + 1.0;
        prop_assert!((up * down - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noop_follows_the_held_position(p1 in 0.01f64..1e4, p2 in 0.01f64..1e4, tc in 0.0f64..0.1) {
        prop_assert_eq!(reward(Action::Noop, true, p1, p2, tc), reward(Action::Buy, false, p1, p2, tc));
        prop_assert_eq!(reward(Action::Noop, false, p1, p2, tc), reward(Action::Sell, true, p1, p2, tc));
    }

    #[test]
    fn equity_matches_positions(
        closes in prop::collection::vec(1.0f64..200.0, 2..40),
        seed in any::<u64>(),
        tc in 0.0f64..0.05,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actions: Vec<Action> = closes.iter().map(|_| Action::ALL[rng.random_range(0..3)]).collect();
        let curve = execute_equity(&closes, &actions, tc, 1000.0).unwrap();
        prop_assert_eq!(curve.len(), closes.len());
        let pos = positions(&actions);
        let mut w = 1000.0;
        let mut held = false;
        for t in 0..closes.len() - 1 {
            if pos[t] != held {
                w *= 1.0 - tc;
            }
            held = pos[t];
            if held {
                w *= closes[t + 1] / closes[t];
            }
            prop_assert!((curve.values()[t + 1] - w).abs() <= 1e-9 * w);
        }
    }

    #[test]
    fn always_invested_tracks_price(closes in prop::collection::vec(1.0f64..200.0, 2..60)) {
        let mut actions = vec![Action::Noop; closes.len()];
        actions[0] = Action::Buy;
        let curve = execute_equity(&closes, &actions, 0.0, 1000.0).unwrap();
        let want = 1000.0 * closes.last().unwrap() / closes[0];
        prop_assert!((curve.last() - want).abs() <= 1e-9 * want);
        let ar = arithmetic_return(&curve);
        let summed: f64 = curve.returns().iter().map(|r| r * 100.0).sum();
        prop_assert!((ar - summed).abs() <= 1e-9 * ar.abs().max(1.0));
    }

    #[test]
    fn replay_memory_never_exceeds_capacity(cap in 1usize..30, inserts in 0usize..200, fifo in any::<bool>()) {
        let eviction = if fifo { Eviction::Fifo } else { Eviction::Random };
        let mut mem = ReplayMemory::new(cap, eviction).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cap as u64);
        for i in 0..inserts {
            let s = RawState::new(StateMode::Vanilla, vec![i as f64; 4]).unwrap();
            mem.store(Experience { state: s.clone(), action: Action::Buy, reward: 0.0, next_state: s, terminal: false }, &mut rng);
            prop_assert!(mem.len() <= cap);
        }
        prop_assert_eq!(mem.len(), inserts.min(cap));
    }
}

#[test]
fn monte_carlo_var_error_shrinks_with_more_draws() {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = Normal::new(0.001, 0.02).unwrap();
    let returns: Vec<f64> = (0..250).map(|_| d.sample(&mut rng)).collect();
    let exact = value_at_risk(&returns, 5.0, VarMethod::ClosedForm, &mut rng).unwrap().value;
    let mean_err = |sims: usize| {
        (0..20)
            .map(|s| {
                let v = value_at_risk(&returns, 5.0, VarMethod::MonteCarlo { sims }, &mut ChaCha8Rng::seed_from_u64(s))
                    .unwrap()
                    .value;
                (v - exact).abs()
            })
            .sum::<f64>()
            / 20.0
    };
    let (small, large) = (mean_err(1_000), mean_err(100_000));
    assert!(large < small / 3.0, "{large} vs {small}");
}
