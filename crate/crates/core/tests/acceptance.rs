//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails. Waived criteria (missing external data) do not fail.
//!
//! External index data for criterion 8 is picked up from `CANDLE_DQN_HSI_CSV`
//! and `CANDLE_DQN_SP500_CSV`, or from `tests/data/HSI.csv` and
//! `tests/data/GSPC.csv`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_dqn::backtest::{buy_and_hold, run_backtest, CI_SWEEP_WINDOWS};
use candle_dqn::cli::{cmd_evaluate, cmd_sweep, cmd_train, CHECKPOINT_FILE};
use candle_dqn::config::RunConfig;
use candle_dqn::dqnagent::{train, Eviction, Experience, QNetwork, ReplayMemory, TrainConfig};
use candle_dqn::encoders::{EncoderConfig, EncoderKind};
use candle_dqn::marketdata::{
    load_csv, make_states, split, test_states, NormScheme, OhlcSeries, RawState, SplitSpec, StateMode,
};
use candle_dqn::metrics::{full_report, value_at_risk, EquityCurve, ReportOptions, VarMethod};
use candle_dqn::tradeenv::{reward, Action, Environment, RewardParams, TradingEnv, Transition};
use chrono::NaiveDate;
use neuralcore::{Conv1d, Graph, GruCell, Linear, Mode, ParamSet, Result as NcResult, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

enum Status {
    Pass,
    Fail,
    Waived,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: impl Into<String>) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self {
            status,
            detail: detail.into(),
        }
    }
    fn waived(detail: impl Into<String>) -> Self {
        Self {
            status: Status::Waived,
            detail: detail.into(),
        }
    }
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/SYN.csv")
}

fn day0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
}

// ---------------------------------------------------------------- 1. gradients

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn project(g: &mut Graph, y: Var, seed: u64) -> NcResult<Var> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(random_tensor(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc)));
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central-difference check of every scalar in `params`.
fn fd_check<F>(params: &ParamSet, f: F) -> f64
where
    F: Fn(&mut Graph, &ParamSet) -> NcResult<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params).unwrap();
    g.backward(loss).unwrap();
    let mut grads = params.clone();
    g.export_grads(&mut grads).unwrap();
    let eval = |p: &ParamSet| {
        let mut g = Graph::new();
        let l = f(&mut g, p).unwrap();
        g.value(l).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (name, t) in grads.iter() {
        let analytic = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= H;
            worst = worst.max(rel_err(*a, (eval(&plus) - eval(&minus)) / (2.0 * H)));
        }
    }
    worst
}

fn with_input(mut p: ParamSet, name: &str, t: Tensor) -> ParamSet {
    p.insert(name, t).unwrap();
    p
}

fn small_encoder(kind: EncoderKind) -> EncoderConfig {
    let mode = if kind == EncoderKind::Mlp { StateMode::Vanilla } else { StateMode::Windowed { w: 5 } };
    let mut c = EncoderConfig::new(kind, mode);
    c.feature_size = 6;
    c.mlp_hidden = 6;
    c.gru_hidden = 5;
    c.cnn_channels = 3;
    c.cnn_gru_channels = 3;
    c
}

/// Loss of the full network: encoder, Q head, gather at the taken actions
/// and Huber against fixed targets, with batch norm in training mode.
fn q_loss(net: &QNetwork, g: &mut Graph, states: &[&RawState], actions: &[usize], y: &[f64]) -> NcResult<Var> {
    let (q, _) = net.forward(g, states, Mode::Train).map_err(|e| match e {
        candle_dqn::Error::Neural(e) => e,
        other => panic!("{other}"),
    })?;
    let q = g.gather(q, actions)?;
    let t = g.constant(Tensor::from_vec(y.to_vec()));
    g.huber_loss(q, t)
}

fn full_graph_err(kind: EncoderKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_encoder(kind);
    let net = QNetwork::new(cfg, 6, &mut rng).unwrap();
    let states: Vec<RawState> = (0..4)
        .map(|_| RawState::new(cfg.mode, (0..cfg.mode.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let refs: Vec<&RawState> = states.iter().collect();
    let actions: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    // targets spread over both Huber branches
    let y: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
    fd_check(net.params(), |g, p| {
        let mut n = net.clone();
        *n.params_mut() = p.clone();
        q_loss(&n, g, &refs, &actions, &y)
    })
}

fn criterion_gradients() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut track = |name: &'static str, errs: Vec<f64>| {
        worst.push((name, errs.into_iter().fold(0.0, f64::max)));
    };

    track(
        "linear",
        (0..INSTANCES)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let l = Linear::new("l", 4, 5);
                let mut p = ParamSet::new();
                l.init(&mut p, &mut rng).unwrap();
                let p = with_input(p, "x", random_tensor(&[3, 4], &mut rng));
                fd_check(&p, |g, p| {
                    let x = g.param(p, "x")?;
                    let y = l.forward(g, p, x)?;
                    project(g, y, s)
                })
            })
            .collect(),
    );
    track(
        "batch_norm",
        (0..INSTANCES)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
                let mut p = ParamSet::new();
                p.insert("x", random_tensor(&[5, 3], &mut rng)).unwrap();
                p.insert("gamma", random_tensor(&[3], &mut rng)).unwrap();
                p.insert("beta", random_tensor(&[3], &mut rng)).unwrap();
                fd_check(&p, |g, p| {
                    let (x, gm, bt) = (g.param(p, "x")?, g.param(p, "gamma")?, g.param(p, "beta")?);
                    let (y, _) = g.batch_norm_train(x, gm, bt, 1e-5)?;
                    project(g, y, s)
                })
            })
            .collect(),
    );
    track(
        "conv1d",
        (0..INSTANCES)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(200 + s);
                let conv = Conv1d::new("conv", 4, 3, 3);
                let mut p = ParamSet::new();
                conv.init(&mut p, &mut rng).unwrap();
                let p = with_input(p, "x", random_tensor(&[2, 4, 8], &mut rng));
                fd_check(&p, |g, p| {
                    let x = g.param(p, "x")?;
                    let y = conv.forward(g, p, x)?;
                    project(g, y, s)
                })
            })
            .collect(),
    );
    track(
        "gru_cell",
        (0..INSTANCES)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(300 + s);
                let cell = GruCell::new("gru", 4, 5);
                let mut p = ParamSet::new();
                cell.init(&mut p, &mut rng).unwrap();
                let p = with_input(p, "x", random_tensor(&[2, 4], &mut rng));
                let p = with_input(p, "h", random_tensor(&[2, 5], &mut rng));
                fd_check(&p, |g, p| {
                    let (x, h) = (g.param(p, "x")?, g.param(p, "h")?);
                    let h = cell.step(g, p, x, h)?;
                    project(g, h, s)
                })
            })
            .collect(),
    );
    track(
        "huber",
        (0..INSTANCES)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(400 + s);
                let l = Linear::new("l", 3, 1);
                let mut p = ParamSet::new();
                l.init(&mut p, &mut rng).unwrap();
                let mut x = random_tensor(&[6, 3], &mut rng);
                x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
                let p = with_input(p, "x", x);
                let target: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 2.0).collect();
                fd_check(&p, |g, p| {
                    let x = g.param(p, "x")?;
                    let y = l.forward(g, p, x)?;
                    let y = g.reshape(y, &[6])?;
                    let t = g.constant(Tensor::from_vec(target.clone()));
                    g.huber_loss(y, t)
                })
            })
            .collect(),
    );
    for kind in EncoderKind::ALL {
        let name = match kind {
            EncoderKind::Identity => "q_identity",
            EncoderKind::Mlp => "q_mlp",
            EncoderKind::Gru => "q_gru",
            EncoderKind::Cnn => "q_cnn",
            EncoderKind::CnnGru => "q_cnn_gru",
        };
        track(name, (0..INSTANCES).map(|s| full_graph_err(kind, 500 + s)).collect());
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let summary = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::check(max < GRAD_TOL, format!("max rel err {max:.2e} < {GRAD_TOL:.0e} over {INSTANCES} instances each ({summary})"))
}

// ---------------------------------------------------------------- 2. reward

fn reward_oracle(buy_branch: bool, p1: f64, p2: f64, tc: f64) -> f64 {
    let g = if buy_branch { p2 / p1 } else { p1 / p2 };
    ((1.0 - tc) * (1.0 - tc) * g - 1.0) * 100.0
}

fn criterion_reward() -> Outcome {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let mut worst = 0.0f64;
    let examples = [
        (reward(Action::Buy, false, 100.0, 110.0, 0.0), 10.0),
        (reward(Action::Sell, true, 100.0, 100.0, 0.0), 0.0),
        (reward(Action::Noop, false, 100.0, 100.0, 0.0), 0.0),
        (reward(Action::Buy, false, 100.0, 100.0, 0.01), -1.99),
    ];
    for (got, want) in examples {
        let e = if want == 0.0 { got.abs() } else { rel(got, want) };
        worst = worst.max(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let p1 = rng.random_range(1.0..500.0);
        let p2 = p1 * rng.random_range(0.8..1.25);
        let tc = rng.random_range(0.0..0.05);
        let own = rng.random_bool(0.5);
        let action = Action::ALL[rng.random_range(0..3)];
        let buy_branch = action == Action::Buy || (action == Action::Noop && own);
        let want = reward_oracle(buy_branch, p1, p2, tc);
        let got = reward(action, own, p1, p2, tc);
        worst = worst.max(if want == 0.0 { got.abs() } else { rel(got, want) });
    }
    Outcome::check(worst <= 1e-12, format!("4 examples + 50 random cases, max rel err {worst:.1e} <= 1e-12"))
}

// ---------------------------------------------------------------- 3. metrics

struct Naive {
    ar: f64,
    adr: f64,
    rv: f64,
    twr: f64,
    tr: f64,
    sharpe: f64,
    var: f64,
    vol: f64,
}

/// Straight transcription of the metric definitions, in percent units where
/// the report uses them.
fn naive_metrics(w: &[f64]) -> Naive {
    let n = w.len() - 1;
    let mut r = Vec::new();
    for t in 1..=n {
        r.push((w[t] - w[t - 1]) / w[t - 1]);
    }
    let mut sum = 0.0;
    for x in &r {
        sum += x;
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for x in &r {
        ss += (x - mean) * (x - mean);
    }
    let rv = ss / (n as f64 - 1.0);
    let mut prod = 1.0;
    for x in &r {
        prod *= 1.0 + x;
    }
    let sd = rv.sqrt();
    // standard normal 5% quantile
    let z05 = -1.6448536269514722;
    Naive {
        ar: sum * 100.0,
        adr: mean * 100.0,
        rv: rv * 10_000.0,
        twr: prod.powf(1.0 / n as f64) - 1.0,
        tr: (w[n] - w[0]) / w[0] * 100.0,
        sharpe: mean / sd,
        var: (mean + z05 * sd) * 100.0,
        vol: sd * 100.0,
    }
}

fn random_curve(rng: &mut impl Rng, steps: usize) -> Vec<f64> {
    let mu = rng.random_range(-0.002..0.003);
    let sigma = rng.random_range(0.005..0.04);
    let d = Normal::new(mu, sigma).unwrap();
    let mut w = vec![1000.0];
    for _ in 0..steps {
        let x: f64 = d.sample(rng);
        w.push(w.last().unwrap() * (1.0 + x.max(-0.5)));
    }
    w
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = ReportOptions {
        method: VarMethod::ClosedForm,
        ..Default::default()
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    let mut worst = 0.0f64;
    let mut mc_inside = 0;
    let mut gate = None;
    for i in 0..100 {
        let w = random_curve(&mut rng, 250);
        let curve = EquityCurve::new(w.clone()).unwrap();
        let rep = full_report(&curve, &opts).unwrap();
        let o = naive_metrics(&w);
        for (got, want) in [
            (rep.arithmetic_return, o.ar),
            (rep.average_daily_return, o.adr),
            (rep.daily_return_variance, o.rv),
            (rep.time_weighted_return, o.twr),
            (rep.total_return_pct, o.tr),
            (rep.sharpe.unwrap(), o.sharpe),
            (rep.var_alpha, o.var),
            (rep.volatility, o.vol),
            (rep.final_value, w[250]),
        ] {
            worst = worst.max(rel(got, want));
        }
        let returns = curve.returns();
        let sd = o.vol / 100.0;
        let mc = value_at_risk(&returns, 5.0, VarMethod::MonteCarlo { sims: 1000 }, &mut ChaCha8Rng::seed_from_u64(i))
            .unwrap()
            .value;
        let inside = (mc - o.var / 100.0).abs() <= 4.0 * sd / 1000f64.sqrt();
        mc_inside += inside as usize;
        if i == 0 {
            gate = Some(inside);
        }
    }
    let ok = worst <= 1e-9 && gate == Some(true);
    Outcome::check(
        ok,
        format!(
            "100 curves x 250 steps, max rel err {worst:.1e} <= 1e-9; MC VaR (n=1000) within 4σ/√n: gate curve {}, {mc_inside}/100 overall",
            if gate == Some(true) { "yes" } else { "no" }
        ),
    )
}

// ---------------------------------------------------------------- 4. learning

/// Best achievable summed reward by dynamic programming over (t, own_share),
/// which enumerates every action sequence implicitly.
fn optimal_total_reward(closes: &[f64], tc: f64) -> f64 {
    let mut best = [0.0f64, 0.0]; // value-to-go for own_share = false / true
    for t in (0..closes.len() - 1).rev() {
        let mut next = [f64::NEG_INFINITY; 2];
        for (own, slot) in next.iter_mut().enumerate() {
            for a in Action::ALL {
                let r = reward(a, own == 1, closes[t], closes[t + 1], tc);
                let pos = a.next_position(own == 1) as usize;
                *slot = slot.max(r + best[pos]);
            }
        }
        best = next;
    }
    best[0]
}

fn policy_total_reward(env: &TradingEnv, actions: &[Action]) -> f64 {
    let mut s = env.initial_state();
    let mut total = 0.0;
    for a in actions {
        if s.done {
            break;
        }
        let (n, r, _) = env.transition(&s, *a).unwrap();
        total += r;
        s = n;
    }
    total
}

fn criterion_period_two() -> Outcome {
    let closes: Vec<f64> = (0..60).map(|i| if i % 2 == 0 { 100.0 } else { 110.0 }).collect();
    let series = OhlcSeries::from_closes("P2", day0(), &closes).unwrap();
    let market = make_states(&series, StateMode::Vanilla, NormScheme::PrevCloseRatio).unwrap();
    let mut env = TradingEnv::new(market.clone(), RewardParams::default()).unwrap();
    let cfg = TrainConfig {
        episodes: 50,
        seed: 0,
        ..Default::default()
    };
    let out = train(&mut env, EncoderConfig::new(EncoderKind::Mlp, StateMode::Vanilla), &cfg, None).unwrap();
    let actions = out.policy.greedy_policy(&market.states).unwrap();
    let steps = (market.len() - 1) as f64;
    let got = policy_total_reward(&env, &actions) / steps;
    let best = optimal_total_reward(&market.closes, 0.0) / steps;
    let ratio = got / best;
    Outcome::check(
        ratio >= 0.9,
        format!("greedy {got:.3} vs optimal {best:.3} per step ({:.1}% >= 90%) after 50 episodes", ratio * 100.0),
    )
}

fn criterion_uptrend() -> Outcome {
    let closes: Vec<f64> = (0..120).map(|i| 100.0 * 1.005f64.powi(i)).collect();
    let series = OhlcSeries::from_closes("UP", day0(), &closes).unwrap();
    let cut = series.candles()[80].date();
    let spec = SplitSpec::new(series.first_date(), cut, series.last_date()).unwrap();
    let (tr, te) = split(&series, &spec).unwrap();
    let mode = StateMode::Vanilla;
    let mut env = TradingEnv::new(make_states(&tr, mode, NormScheme::PrevCloseRatio).unwrap(), RewardParams::default()).unwrap();
    let out = train(&mut env, EncoderConfig::new(EncoderKind::Mlp, mode), &TrainConfig::default(), None).unwrap();
    let market = test_states(&tr, &te, mode, NormScheme::PrevCloseRatio).unwrap();
    let opts = ReportOptions::default();
    let agent = run_backtest(&out.policy, &market, 0.0, 1000.0, &opts).unwrap().report.total_return_pct;
    let (_, bh) = buy_and_hold(&market.closes, 0.0, 1000.0, &opts).unwrap();
    let rel = (agent - bh.total_return_pct).abs() / bh.total_return_pct.abs();
    Outcome::check(
        rel <= 0.01,
        format!("agent TR {agent:.4}% vs B&H {:.4}% (rel diff {:.2e} <= 1e-2)", bh.total_return_pct, rel),
    )
}

// ---------------------------------------------------------------- 5. toy MDP

const TOY: [[(usize, f64); 3]; 3] = [
    [(1, 0.0), (0, 0.5), (2, 0.0)],
    [(2, 0.0), (0, 0.0), (1, 0.8)],
    [(0, 3.0), (2, 0.5), (1, 1.5)],
];
const TOY_GAMMA: f64 = 0.9;

fn toy_state(s: usize) -> RawState {
    let mut v = vec![0.0; 4];
    v[s] = 1.0;
    RawState::new(StateMode::Vanilla, v).unwrap()
}

/// Deterministic three-state MDP; episodes are cut after `horizon` steps,
/// which ends the episode without making the last state terminal.
struct ToyMdp {
    s: usize,
    t: usize,
    episodes: usize,
    horizon: usize,
}

impl Environment for ToyMdp {
    fn state_mode(&self) -> StateMode {
        StateMode::Vanilla
    }
    fn reset(&mut self) -> candle_dqn::Result<RawState> {
        self.s = self.episodes % 3;
        self.episodes += 1;
        self.t = 0;
        Ok(toy_state(self.s))
    }
    fn step(&mut self, a: Action) -> candle_dqn::Result<Transition> {
        let (next, r) = TOY[self.s][a.index()];
        self.s = next;
        self.t += 1;
        Ok(Transition {
            next_state: toy_state(next),
            reward: r,
            done: self.t == self.horizon,
            terminal: false,
        })
    }
}

fn policy_values(policy: [usize; 3]) -> [f64; 3] {
    let mut v = [0.0; 3];
    for _ in 0..2000 {
        v = std::array::from_fn(|s| {
            let (n, r) = TOY[s][policy[s]];
            r + TOY_GAMMA * v[n]
        });
    }
    v
}

fn criterion_toy_mdp() -> Outcome {
    // brute force over all 27 deterministic policies
    let mut best: Option<([usize; 3], [f64; 3])> = None;
    for code in 0..27 {
        let p = [code % 3, code / 3 % 3, code / 9];
        let v = policy_values(p);
        if best.is_none_or(|(_, b)| v.iter().sum::<f64>() > b.iter().sum::<f64>()) {
            best = Some((p, v));
        }
    }
    let (optimal, v_star) = best.unwrap();
    // value iteration must agree with the brute force
    let mut v = [0.0; 3];
    for _ in 0..2000 {
        v = std::array::from_fn(|s| TOY[s].iter().map(|(n, r)| r + TOY_GAMMA * v[*n]).fold(f64::MIN, f64::max));
    }
    let vi_policy: [usize; 3] = std::array::from_fn(|s| {
        let q: Vec<f64> = TOY[s].iter().map(|(n, r)| r + TOY_GAMMA * v[*n]).collect();
        (0..3).max_by(|a, b| q[*a].total_cmp(&q[*b])).unwrap()
    });
    let dominates = (0..27).all(|code| {
        let vp = policy_values([code % 3, code / 3 % 3, code / 9]);
        (0..3).all(|s| vp[s] <= v_star[s] + 1e-9)
    });

    let mut cfg = TrainConfig {
        episodes: 100,
        gamma: TOY_GAMMA,
        eps_start: 1.0,
        eps_end: 1.0,
        batch_size: 32,
        capacity: 1000,
        target_sync: 100,
        seed: 0,
        ..Default::default()
    };
    cfg.adam.lr = 1e-3;
    let mut env = ToyMdp {
        s: 0,
        t: 0,
        episodes: 0,
        horizon: 20,
    };
    let out = train(&mut env, EncoderConfig::new(EncoderKind::Mlp, StateMode::Vanilla), &cfg, None).unwrap();
    let states: Vec<RawState> = (0..3).map(toy_state).collect();
    let learned: Vec<usize> = out.policy.greedy_policy(&states).unwrap().iter().map(|a| a.index()).collect();
    let names = |p: &[usize]| p.iter().map(|i| Action::ALL[*i].to_string()).collect::<Vec<_>>().join("/");
    Outcome::check(
        learned == optimal && vi_policy == optimal && dominates,
        format!(
            "agent {} vs brute force {} (value iteration {})",
            names(&learned),
            names(&optimal),
            names(&vi_policy)
        ),
    )
}

// ---------------------------------------------------------------- 6. replay

fn chi_square_p(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn dummy_experience(i: usize) -> Experience {
    let s = RawState::new(StateMode::Vanilla, vec![i as f64, 0.0, 0.0, 0.0]).unwrap();
    Experience {
        state: s.clone(),
        action: Action::Noop,
        reward: 0.0,
        next_state: s,
        terminal: false,
    }
}

fn criterion_replay() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mem = ReplayMemory::new(20, Eviction::Random).unwrap();
    let mut replaced = vec![0u64; 20];
    let mut bounded = true;
    for i in 0..100_000 {
        if let Some(slot) = mem.store(dummy_experience(i), &mut rng) {
            replaced[slot] += 1;
        }
        bounded &= mem.len() <= 20;
    }
    let p_replace = chi_square_p(&replaced);
    let mut sampled = vec![0u64; 20];
    for _ in 0..10_000 {
        for i in mem.sample_indices(10, &mut rng).unwrap() {
            sampled[i] += 1;
        }
    }
    let p_sample = chi_square_p(&sampled);
    Outcome::check(
        bounded && p_replace > 0.001 && p_sample > 0.001,
        format!("size <= 20 over 1e5 inserts: {bounded}; replacement p={p_replace:.3}, sampling p={p_sample:.3} (> 0.001)"),
    )
}

// ---------------------------------------------------------------- 7. determinism

fn fixture_config(out: &Path, extra: &str) -> RunConfig {
    RunConfig::from_text(&format!(
        "data.path = {}\nsplit.begin = 2016-01-01\nsplit.point = 2017-03-01\nsplit.end = 2017-12-31\noutput.dir = {}\n{extra}",
        fixture().display(),
        out.display()
    ))
    .unwrap()
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let cfg = fixture_config(&dir, "train.episodes = 3\nrun.seed = 11\neval.tc = 0.001\n");
        cmd_train(&cfg).unwrap();
        cmd_evaluate(&cfg, &dir.join(CHECKPOINT_FILE)).unwrap();
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let files = [CHECKPOINT_FILE, "train_log.csv", "report.json", "report.csv", "profit_curve.csv", "decisions.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    Outcome::check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two seeded runs", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 8. B&H

fn index_data(var: &str, file: &str) -> Option<PathBuf> {
    std::env::var_os(var)
        .map(PathBuf::from)
        .or_else(|| Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(file)))
        .filter(|p| p.is_file())
}

fn criterion_buy_and_hold() -> Outcome {
    let targets = [("HSI", "CANDLE_DQN_HSI_CSV", "HSI.csv", 153.5), ("S&P500", "CANDLE_DQN_SP500_CSV", "GSPC.csv", 168.6)];
    let window = SplitSpec::preset("HSI").unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    let mut seen = 0;
    for (name, var, file, paper) in targets {
        let Some(path) = index_data(var, file) else {
            details.push(format!("{name}: no data"));
            continue;
        };
        seen += 1;
        let series = load_csv(&path).unwrap().series;
        let (_, test) = split(&series, &window).unwrap();
        let (_, rep) = buy_and_hold(&test.closes(), 0.0, 1000.0, &ReportOptions::default()).unwrap();
        let rel = (rep.total_return_pct - paper).abs() / paper;
        ok &= rel <= 0.05;
        details.push(format!("{name}: {:.1}% vs {paper}% (rel {rel:.3})", rep.total_return_pct));
    }
    if seen == 0 {
        return Outcome::waived(format!("index data unavailable ({})", details.join("; ")));
    }
    Outcome::check(ok && seen == 2, details.join("; "))
}

// ---------------------------------------------------------------- 9. sweep

fn criterion_sweep() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, jobs: usize| {
        let cfg = fixture_config(
            &tmp.path().join(name),
            &format!("encoder.kind = cnn\ntrain.episodes = 3\nrun.seed = 5\nrun.jobs = {jobs}\n"),
        );
        assert_eq!(cfg.sweep_windows, CI_SWEEP_WINDOWS);
        cmd_sweep(&cfg).unwrap()
    };
    let a = run("a", 4);
    run("b", 1);
    let in_range = a.entries.iter().all(|e| (0.0..=1.0).contains(&e.normalized));
    let order = a.entries.iter().all(|x| {
        a.entries
            .iter()
            .all(|y| (x.total_return < y.total_return) == (x.normalized < y.normalized))
    });
    let same = std::fs::read(tmp.path().join("a/heatmap.csv")).unwrap() == std::fs::read(tmp.path().join("b/heatmap.csv")).unwrap();
    let ws: Vec<usize> = a.entries.iter().map(|e| e.w).collect();
    Outcome::check(
        in_range && order && same && ws == CI_SWEEP_WINDOWS,
        format!("w={ws:?}: normalized in [0,1] {in_range}, order-preserving {order}, reproducible across --jobs 4/1 {same}"),
    )
}

// ----------------------------------------------------------------

fn main() {
    type Criterion = (&'static str, &'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("1", "gradient correctness", Duration::from_secs(60), criterion_gradients),
        ("2", "reward exactness", Duration::from_secs(10), criterion_reward),
        ("3", "metrics oracle equivalence", Duration::from_secs(60), criterion_metrics),
        ("4a", "period-2 market learning", Duration::from_secs(300), criterion_period_two),
        ("4b", "uptrend market vs B&H", Duration::from_secs(300), criterion_uptrend),
        ("5", "toy MDP Bellman check", Duration::from_secs(60), criterion_toy_mdp),
        ("6", "replay memory statistics", Duration::from_secs(60), criterion_replay),
        ("7", "train/evaluate determinism", Duration::from_secs(300), criterion_determinism),
        ("8", "B&H reproduction on indices", Duration::from_secs(60), criterion_buy_and_hold),
        ("9", "window sweep contract", Duration::from_secs(600), criterion_sweep),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let mut outcome = f();
        let elapsed = start.elapsed();
        if elapsed > budget && matches!(outcome.status, Status::Pass) {
            outcome = Outcome::check(false, format!("{} [over budget {budget:?}]", outcome.detail));
        }
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Waived => "WAIVED",
        };
        println!("[{tag:<6}] {id:<3} {name}: {} ({:.1}s)", outcome.detail, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
