//! Single-asset trading environment with the position-dependent percent reward.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::marketdata::{RawState, StateMode, StateSequence};
use crate::metrics::EquityCurve;

/// Trading signal. Index order (Buy, Sell, Noop) is also the Q-vector order
/// and the argmax tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Buy,
    Sell,
    Noop,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Buy, Action::Sell, Action::Noop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Position after taking this action.
    pub fn next_position(self, own_share: bool) -> bool {
        match self {
            Action::Buy => true,
            Action::Sell => false,
            Action::Noop => own_share,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Buy => "buy",
            Action::Sell => "sell",
            Action::Noop => "noop",
        })
    }
}

impl FromStr for Action {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "buy" => Ok(Action::Buy),
            "sell" => Ok(Action::Sell),
            "noop" | "none" | "hold" => Ok(Action::Noop),
            other => Err(Error::config("action", format!("unknown action `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    transaction_cost: f64,
}

impl RewardParams {
    pub fn new(transaction_cost: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&transaction_cost) {
            return Err(Error::TransactionCost(transaction_cost));
        }
        Ok(Self { transaction_cost })
    }

    pub fn transaction_cost(&self) -> f64 {
        self.transaction_cost
    }
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { transaction_cost: 0.0 }
    }
}

/// Percent reward for acting at close `p1` with the next close `p2`.
///
/// Buy, and Noop while invested, earn the long return `(1-TC)^2 p2/p1 - 1`.
/// Sell, and Noop while in cash, earn the inverse `(1-TC)^2 p1/p2 - 1`.
pub fn reward(action: Action, own_share: bool, p1: f64, p2: f64, tc: f64) -> f64 {
    let drag = (1.0 - tc) * (1.0 - tc);
    let long = match action {
        Action::Buy => true,
        Action::Sell => false,
        Action::Noop => own_share,
    };
    let ratio = if long { p2 / p1 } else { p1 / p2 };
    (drag * ratio - 1.0) * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    /// Index into the state sequence.
    pub t: usize,
    pub own_share: bool,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: RawState,
    pub reward: f64,
    /// The episode is over; the caller must reset.
    pub done: bool,
    /// `next_state` has no successor. Differs from `done` only for
    /// time-limited episodes that are cut short.
    pub terminal: bool,
}

/// Episodic environment as seen by the learning agent.
pub trait Environment {
    fn state_mode(&self) -> StateMode;
    fn reset(&mut self) -> Result<RawState>;
    fn step(&mut self, action: Action) -> Result<Transition>;
}

/// Walks a [`StateSequence`] one state per step. An episode spans the whole
/// sequence, so it has `len - 1` steps.
#[derive(Debug, Clone)]
pub struct TradingEnv {
    market: StateSequence,
    params: RewardParams,
    current: Option<EnvState>,
}

impl TradingEnv {
    pub fn new(market: StateSequence, params: RewardParams) -> Result<Self> {
        if market.len() < 2 {
            return Err(Error::InsufficientLength {
                len: market.len(),
                needed: 2,
            });
        }
        Ok(Self {
            market,
            params,
            current: None,
        })
    }

    pub fn market(&self) -> &StateSequence {
        &self.market
    }

    pub fn params(&self) -> RewardParams {
        self.params
    }

    pub fn initial_state(&self) -> EnvState {
        EnvState {
            t: 0,
            own_share: false,
            done: false,
        }
    }

    /// Pure transition function.
    pub fn transition(&self, state: &EnvState, action: Action) -> Result<(EnvState, f64, bool)> {
        if state.done || state.t + 1 >= self.market.len() {
            return Err(Error::EpisodeFinished);
        }
        let p1 = self.market.closes[state.t];
        let p2 = self.market.closes[state.t + 1];
        let r = reward(action, state.own_share, p1, p2, self.params.transaction_cost);
        let t = state.t + 1;
        let done = t + 1 == self.market.len();
        let next = EnvState {
            t,
            own_share: action.next_position(state.own_share),
            done,
        };
        Ok((next, r, done))
    }

    pub fn current(&self) -> Option<EnvState> {
        self.current
    }
}

impl Environment for TradingEnv {
    fn state_mode(&self) -> StateMode {
        self.market.mode
    }

    fn reset(&mut self) -> Result<RawState> {
        let s = self.initial_state();
        self.current = Some(s);
        Ok(self.market.states[s.t].clone())
    }

    fn step(&mut self, action: Action) -> Result<Transition> {
        let state = self.current.ok_or(Error::EpisodeFinished)?;
        let (next, reward, done) = self.transition(&state, action)?;
        self.current = Some(next);
        Ok(Transition {
            next_state: self.market.states[next.t].clone(),
            reward,
            done,
            terminal: done,
        })
    }
}

/// Wealth path for one action per state over `closes`.
///
/// The action at index `i` fixes the position held over `closes[i] ->
/// closes[i + 1]`; the final action has nothing left to act on. Each executed
/// Buy or Sell costs a `(1 - TC)` factor; a Buy while invested or a Sell
/// while in cash is not a trade.
pub fn execute_equity(closes: &[f64], actions: &[Action], tc: f64, w0: f64) -> Result<EquityCurve> {
    if actions.len() != closes.len() {
        return Err(Error::LengthMismatch {
            expected: closes.len(),
            got: actions.len(),
        });
    }
    RewardParams::new(tc)?;
    let mut wealth = Vec::with_capacity(closes.len());
    let mut w = w0;
    let mut invested = false;
    wealth.push(w);
    for (i, &a) in actions.iter().enumerate().take(closes.len().saturating_sub(1)) {
        let next = a.next_position(invested);
        if next != invested {
            w *= 1.0 - tc;
        }
        invested = next;
        if invested {
            w *= closes[i + 1] / closes[i];
        }
        wealth.push(w);
    }
    EquityCurve::new(wealth)
}

/// Position held after each action, starting from cash.
pub fn positions(actions: &[Action]) -> Vec<bool> {
    actions
        .iter()
        .scan(false, |own, a| {
            *own = a.next_position(*own);
            Some(*own)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{make_states, NormScheme, OhlcSeries};
    use chrono::NaiveDate;

    fn env(closes: &[f64], mode: StateMode, tc: f64) -> TradingEnv {
        let s = OhlcSeries::from_closes("X", NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), closes).unwrap();
        TradingEnv::new(make_states(&s, mode, NormScheme::PrevCloseRatio).unwrap(), RewardParams::new(tc).unwrap())
            .unwrap()
    }

    #[test]
    fn reward_examples() {
        assert!((reward(Action::Buy, false, 100.0, 110.0, 0.0) - 10.0).abs() < 1e-12);
        for a in Action::ALL {
            for own in [false, true] {
                assert_eq!(reward(a, own, 50.0, 50.0, 0.0), 0.0);
            }
        }
        assert!((reward(Action::Buy, false, 100.0, 100.0, 0.01) + 1.99).abs() < 1e-12);
    }

    #[test]
    fn position_transitions() {
        for own in [false, true] {
            assert!(Action::Buy.next_position(own));
            assert!(!Action::Sell.next_position(own));
            assert_eq!(Action::Noop.next_position(own), own);
        }
    }

    #[test]
    fn reset_and_step() {
        let mut e = env(&[100.0, 110.0, 99.0], StateMode::Vanilla, 0.0);
        e.reset().unwrap();
        let first = e.current().unwrap();
        e.reset().unwrap();
        assert_eq!(first, e.current().unwrap());
        assert!(!first.own_share);
        let t1 = e.step(Action::Buy).unwrap();
        assert!((t1.reward - 10.0).abs() < 1e-12);
        assert!(!t1.done);
        let t2 = e.step(Action::Noop).unwrap();
        assert!((t2.reward - (99.0 / 110.0 - 1.0) * 100.0).abs() < 1e-12);
        assert!(t2.done && t2.terminal);
        assert!(matches!(e.step(Action::Noop), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn windowed_reset_aligns_with_tenth_candle() {
        let closes: Vec<f64> = (0..20).map(|i| 100.0 + i as f64).collect();
        let mut e = env(&closes, StateMode::Windowed { w: 10 }, 0.0);
        let s0 = e.reset().unwrap();
        assert_eq!(e.market().closes[0], closes[9]);
        assert_eq!(s0.rows(), 10);
    }

    #[test]
    fn equity_examples() {
        let flat = execute_equity(&[1.0, 2.0, 3.0], &[Action::Noop; 3], 0.0, 1000.0).unwrap();
        assert_eq!(flat.values(), &[1000.0; 3]);
        let path = execute_equity(&[100.0, 110.0, 99.0], &[Action::Buy, Action::Sell, Action::Noop], 0.0, 1000.0).unwrap();
        assert!((path.values()[1] - 1100.0).abs() < 1e-9);
        assert!((path.values()[2] - 1100.0).abs() < 1e-9);
        let hold = execute_equity(&[100.0, 150.0], &[Action::Buy, Action::Noop], 0.01, 1000.0).unwrap();
        assert!((hold.last() - 1485.0).abs() < 1e-9);
        assert!(execute_equity(&[1.0, 2.0], &[Action::Buy], 0.0, 1000.0).is_err());
    }

    #[test]
    fn repeated_buy_is_not_charged() {
        let once = execute_equity(&[100.0, 100.0, 100.0], &[Action::Buy, Action::Noop, Action::Noop], 0.1, 1000.0).unwrap();
        let twice = execute_equity(&[100.0, 100.0, 100.0], &[Action::Buy, Action::Buy, Action::Noop], 0.1, 1000.0).unwrap();
        assert_eq!(once, twice);
        assert!((once.last() - 900.0).abs() < 1e-9);
    }
}
