//! Budget accounting and the synchronized probing controller of a flexible
//! flow.
//!
//! A flexible flow banks the bytes it delivers beyond `alpha` times its fair
//! share (`alpha_budget`) plus the payload it is allowed to drop
//! (`reliability_budget`). Probing cycles of warmup, measure and exploit
//! intervals are aligned network-wide; the fair share is estimated during
//! measure, and the flow goes to low priority for an exploit phase only when
//! its budget covers the worst-case expense of doing so.
//!
//! All budgets are in bytes and rates in bits per second.

use serde::Serialize;
use thiserror::Error;

use crate::types::{Alpha, Bound, FlowSize, PhaseConfig, Priority};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReflexError {
    #[error("budget adjusted before a fair-share estimate exists")]
    FairShareUnset,
    #[error("alpha {0} >= 1 never accrues budget at the fair share")]
    NeverExploits(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Measure,
    Exploit,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Measure => "measure",
            Phase::Exploit => "exploit",
        })
    }
}

/// Phase of the interval with global index `interval`.
pub fn determine_phase(interval: u64, cfg: &PhaseConfig) -> Phase {
    let p = interval % u64::from(cfg.intervals_per_cycle());
    if p < u64::from(cfg.d_warmup) {
        Phase::Warmup
    } else if p < u64::from(cfg.d_warmup + cfg.d_measure) {
        Phase::Measure
    } else {
        Phase::Exploit
    }
}

/// Budget of one flexible flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetState {
    /// Bytes delivered beyond `alpha * R_fair`; negative when behind.
    pub alpha_budget: f64,
    /// Payload that may still be dropped.
    pub reliability_budget: f64,
    /// Bytes acknowledged plus bytes dropped, counted once an estimate exists.
    pub sent: f64,
    pub discarded_total: f64,
}

impl BudgetState {
    pub fn new(size: FlowSize, r: f64) -> Self {
        let reliability_budget = match size {
            Bound::Finite(f) if r < 1.0 => (1.0 - r) * f as f64,
            _ => 0.0,
        };
        BudgetState {
            alpha_budget: 0.0,
            reliability_budget,
            sent: 0.0,
            discarded_total: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.alpha_budget + self.reliability_budget
    }
}

/// `alpha` as used by the budget arithmetic.
///
/// A flow that only relaxes reliability keeps the default unbounded alpha;
/// its payload budget is drained against its plain fair share.
pub fn effective_alpha(alpha: Alpha) -> f64 {
    match alpha {
        Bound::Finite(a) => a,
        Bound::Unbounded => 1.0,
    }
}

/// Account one elapsed period. Returns the bytes taken out of the
/// reliability budget, which the sender drops instead of transmitting.
pub fn adjust_budget(
    state: &mut BudgetState,
    alpha: f64,
    fair_rate: Option<f64>,
    ack_bytes: f64,
    elapsed: f64,
) -> Result<f64, ReflexError> {
    let fair_rate = fair_rate.ok_or(ReflexError::FairShareUnset)?;
    let actual = ack_bytes / elapsed;
    state.sent += ack_bytes;
    state.alpha_budget -= elapsed * (alpha * fair_rate / 8.0 - actual);
    if state.alpha_budget >= 0.0 {
        return Ok(0.0);
    }
    let before = state.reliability_budget;
    state.reliability_budget += state.alpha_budget;
    if state.reliability_budget >= 0.0 {
        state.alpha_budget = 0.0;
    } else {
        state.alpha_budget = state.reliability_budget;
        state.reliability_budget = 0.0;
    }
    let drained = before - state.reliability_budget;
    state.sent += drained;
    state.discarded_total += drained;
    Ok(drained)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    High,
    Low,
    Finished,
}

impl Decision {
    pub fn priority(self) -> Option<Priority> {
        match self {
            Decision::High => Some(Priority::High),
            Decision::Low => Some(Priority::Low),
            Decision::Finished => None,
        }
    }
}

/// Outcome of one controller update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Update {
    pub decision: Decision,
    /// Bytes dropped by this update.
    pub drained: f64,
    /// Phase of the interval that starts now.
    pub upcoming: Phase,
    /// Set when this update was a priority decision point; holds the
    /// budget and potential expense that were compared.
    pub checked: Option<BudgetCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetCheck {
    pub budget: f64,
    pub potential_expense: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    alpha: f64,
    size: f64,
    pub budget: BudgetState,
    /// Fair-share estimate, bits per second.
    pub fair_rate: Option<f64>,
    prev: Option<Phase>,
    pub synced: bool,
    probe_bytes: f64,
    probe_time: f64,
    exploit_low: bool,
}

impl Controller {
    pub fn new(alpha: Alpha, r: f64, size: FlowSize) -> Self {
        Controller {
            alpha: effective_alpha(alpha),
            size: size.bytes(),
            budget: BudgetState::new(size, r),
            fair_rate: None,
            prev: None,
            synced: false,
            probe_bytes: 0.0,
            probe_time: 0.0,
            exploit_low: false,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn previous_phase(&self) -> Option<Phase> {
        self.prev
    }

    pub fn exploit_low(&self) -> bool {
        self.exploit_low
    }

    /// Worst-case budget expense of one exploit phase at the current estimate.
    pub fn potential_expense(&self, cfg: &PhaseConfig) -> Option<f64> {
        self.fair_rate
            .map(|r| self.alpha * r / 8.0 * f64::from(cfg.d_exploit) * cfg.t_int)
    }

    /// Called at every interval boundary with the global index of the
    /// interval about to start and the bytes acknowledged since the last call.
    pub fn update(
        &mut self,
        interval: u64,
        ack_bytes: f64,
        elapsed: f64,
        cfg: &PhaseConfig,
    ) -> Update {
        let mut drained = 0.0;
        if self.fair_rate.is_some() {
            drained = adjust_budget(
                &mut self.budget,
                self.alpha,
                self.fair_rate,
                ack_bytes,
                elapsed,
            )
            .expect("estimate is set");
        }
        let upcoming = determine_phase(interval, cfg);
        if self.budget.sent >= self.size {
            return Update {
                decision: Decision::Finished,
                drained,
                upcoming,
                checked: None,
            };
        }
        if self.prev == Some(Phase::Measure) && self.synced {
            self.probe_bytes += ack_bytes;
            self.probe_time += elapsed;
        }
        if self.prev == Some(Phase::Exploit) && upcoming == Phase::Warmup {
            self.synced = true;
            self.exploit_low = false;
        }
        let entering_exploit = self.prev == Some(Phase::Measure) && upcoming == Phase::Exploit;
        if entering_exploit && self.synced {
            self.fair_rate = Some(self.probe_bytes * 8.0 / self.probe_time);
            self.probe_bytes = 0.0;
            self.probe_time = 0.0;
        }
        let mut checked = None;
        if entering_exploit {
            if let Some(expense) = self.potential_expense(cfg) {
                let budget = self.budget.total();
                self.exploit_low = budget > expense;
                checked = Some(BudgetCheck {
                    budget,
                    potential_expense: expense,
                });
            }
        }
        self.prev = Some(upcoming);
        let decision = if self.exploit_low {
            Decision::Low
        } else {
            Decision::High
        };
        Update {
            decision,
            drained,
            upcoming,
            checked,
        }
    }
}

/// Time from flow start to the first interval spent at low priority, for a
/// flow that starts on a cycle boundary and always receives the same fair
/// share at high priority.
///
/// Follows the controller step by step: the first update fires one interval
/// after the start, synchronization happens at the first exploit-to-warmup
/// boundary, the estimate at the following measure-to-exploit boundary,
/// and budget accrues at `(1 - alpha)` times the fair share from then on.
/// The decision at a boundary sees the budget including that boundary's
/// interval, and requires it to strictly exceed the potential expense.
pub fn time_to_first_exploit(alpha: f64, cfg: &PhaseConfig) -> Result<f64, ReflexError> {
    if alpha >= 1.0 {
        return Err(ReflexError::NeverExploits(alpha));
    }
    let cycle = u64::from(cfg.intervals_per_cycle());
    let first_estimate = cycle + u64::from(cfg.d_warmup + cfg.d_measure);
    // Budget after m cycles, in units of fair share * interval:
    // m * cycle * (1 - alpha); expense: alpha * d_exploit.
    let per_cycle = cycle as f64 * (1.0 - alpha);
    let expense = alpha * f64::from(cfg.d_exploit);
    let mut cycles = (expense / per_cycle).floor() as u64;
    while cycles as f64 * per_cycle <= expense {
        cycles += 1;
    }
    Ok((first_estimate + cycles * cycle) as f64 * cfg.t_int)
}

/// Largest long-run fraction of its fair share a flexible flow can cede to
/// `competitors` backlogged regular flows on one link.
pub fn spend_fraction(cfg: &PhaseConfig, w_high: u32, w_low: u32, competitors: u32) -> f64 {
    let capacity = 1.0;
    let fair = capacity / f64::from(1 + competitors);
    let low = if competitors == 0 || w_high + w_low == 0 {
        capacity
    } else {
        capacity * f64::from(w_low) / f64::from(w_low + w_high)
    };
    cfg.exploit_fraction() * (fair - low.min(fair)) / fair
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Byte per second expressed in bits per second.
    const BYTE_PER_S: f64 = 8.0;

    /// Line-by-line transcription of the budget pseudocode, in bytes and
    /// bytes per second, with no early returns.
    fn reference_adjust(
        s: (f64, f64, f64),
        alpha: f64,
        fair: f64,
        ack: f64,
        elapsed: f64,
    ) -> (f64, f64, f64) {
        let (mut b_alpha, mut b_r, mut sent) = s;
        let r_actual = ack / elapsed;
        sent += ack;
        b_alpha -= elapsed * (alpha * fair - r_actual);
        if b_alpha < 0.0 {
            let b_r_before = b_r;
            b_r += b_alpha;
            if b_r >= 0.0 {
                b_alpha = 0.0;
            } else {
                b_alpha = b_r;
                b_r = 0.0;
            }
            sent += b_r_before - b_r;
        }
        (b_alpha, b_r, sent)
    }

    fn state(alpha_budget: f64, reliability_budget: f64) -> BudgetState {
        BudgetState {
            alpha_budget,
            reliability_budget,
            sent: 0.0,
            discarded_total: 0.0,
        }
    }

    #[test]
    fn phase_of_interval() {
        let cfg = PhaseConfig::default();
        let phases: Vec<Phase> = (0..6).map(|i| determine_phase(i, &cfg)).collect();
        assert_eq!(
            phases,
            [
                Phase::Warmup,
                Phase::Measure,
                Phase::Exploit,
                Phase::Exploit,
                Phase::Exploit,
                Phase::Warmup
            ]
        );
    }

    #[test]
    fn over_delivery_accrues_budget() {
        let mut s = state(0.0, 0.0);
        let drained = adjust_budget(&mut s, 0.9, Some(BYTE_PER_S), 1.0, 1.0).unwrap();
        assert_eq!(drained, 0.0);
        assert_abs_diff_eq!(s.alpha_budget, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn rate_budget_may_go_negative() {
        let mut s = state(0.05, 0.0);
        adjust_budget(&mut s, 0.9, Some(BYTE_PER_S), 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(s.alpha_budget, -0.35, epsilon = 1e-12);
        assert_eq!(s.reliability_budget, 0.0);
        assert_abs_diff_eq!(s.sent, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn deficit_drains_reliability_budget() {
        let size = Bound::Finite(100);
        let mut s = BudgetState::new(size, 0.8);
        assert_abs_diff_eq!(s.reliability_budget, 20.0, epsilon = 1e-12);
        let expected = reference_adjust((0.0, s.reliability_budget, 0.0), 1.0, 1.0, 0.95, 1.0);
        let drained = adjust_budget(&mut s, 1.0, Some(BYTE_PER_S), 0.95, 1.0).unwrap();
        assert_abs_diff_eq!(expected.1, 19.95, epsilon = 1e-12);
        assert_abs_diff_eq!(expected.2, 1.0, epsilon = 1e-12);
        assert_eq!((s.alpha_budget, s.reliability_budget, s.sent), expected);
        assert_abs_diff_eq!(drained, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(s.discarded_total, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn adjusting_without_estimate_fails() {
        let mut s = state(0.0, 0.0);
        assert_eq!(
            adjust_budget(&mut s, 0.5, None, 1.0, 1.0),
            Err(ReflexError::FairShareUnset)
        );
    }

    #[test]
    fn expense_and_estimate_arithmetic() {
        let cfg = PhaseConfig::default();
        let mut c = Controller::new(Bound::Finite(0.9), 1.0, Bound::Finite(u64::MAX));
        c.fair_rate = Some(5e9);
        let expense = c.potential_expense(&cfg).unwrap();
        // 0.9 * 5 Gbit/s * 15 ms = 67.5 Mbit
        assert_abs_diff_eq!(expense * 8.0, 67.5e6, epsilon = 1e-3);

        // 5 Mbit over one 5 ms measure interval -> 1 Gbit/s
        let mut c = Controller::new(Bound::Finite(0.9), 1.0, Bound::Finite(u64::MAX));
        let bytes = 5e6 / 8.0;
        for id in 1..=5 {
            c.update(id, bytes, cfg.t_int, &cfg);
        }
        assert!(c.synced && c.fair_rate.is_none());
        c.update(6, bytes, cfg.t_int, &cfg);
        let u = c.update(7, bytes, cfg.t_int, &cfg);
        assert_abs_diff_eq!(c.fair_rate.unwrap(), 1e9, epsilon = 1e-3);
        assert_eq!(u.checked.unwrap().budget, 0.0);
        assert_eq!(u.decision, Decision::High);
    }

    /// Drive a controller that always sees `rate` and report the interval
    /// index of the first low decision.
    fn first_low(alpha: f64, cfg: &PhaseConfig, start: u64, rate: f64) -> Option<u64> {
        let mut c = Controller::new(Bound::Finite(alpha), 1.0, Bound::Unbounded);
        let bytes = rate / 8.0 * cfg.t_int;
        (start + 1..start + 10_000).find(|&id| {
            let u = c.update(id, bytes, cfg.t_int, cfg);
            if u.decision == Decision::Low {
                assert_eq!(u.upcoming, Phase::Exploit);
                true
            } else {
                false
            }
        })
    }

    #[test]
    fn symbolic_first_exploit_matches_controller() {
        for (w, m, e) in [(1, 1, 3), (1, 1, 1), (2, 1, 5), (1, 2, 10)] {
            let cfg = PhaseConfig {
                t_int: 5e-3,
                d_warmup: w,
                d_measure: m,
                d_exploit: e,
            };
            for alpha in [0.0, 0.1, 0.35, 0.5, 0.8, 0.9, 0.95] {
                let predicted = time_to_first_exploit(alpha, &cfg).unwrap();
                let id = first_low(alpha, &cfg, 0, 5e9).unwrap();
                assert_abs_diff_eq!(predicted, id as f64 * cfg.t_int, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn first_exploit_default_phases() {
        let cfg = PhaseConfig::default();
        let t = time_to_first_exploit(0.9, &cfg).unwrap();
        assert_abs_diff_eq!(t, 0.185, epsilon = 1e-12);
        assert!((t - 0.175).abs() <= cfg.cycle_length());
        // alpha = 0 still waits for one estimate plus one boundary
        assert_abs_diff_eq!(
            time_to_first_exploit(0.0, &cfg).unwrap(),
            0.060,
            epsilon = 1e-12
        );
        assert_eq!(
            time_to_first_exploit(1.0, &cfg),
            Err(ReflexError::NeverExploits(1.0))
        );
    }

    #[test]
    fn flow_starting_mid_cycle_stays_high_until_synced() {
        let cfg = PhaseConfig::default();
        let mut c = Controller::new(Bound::Finite(0.0), 1.0, Bound::Unbounded);
        // starts inside interval 2 (exploit): decisions stay HIGH through the
        // rest of that cycle and the next warmup/measure
        for id in 3..=6 {
            let u = c.update(id, 1e6, cfg.t_int, &cfg);
            assert_eq!(u.decision, Decision::High, "interval {id}");
        }
        assert!(c.synced);
        assert!(c.fair_rate.is_none());
        let u = c.update(7, 1e6, cfg.t_int, &cfg);
        assert!(c.fair_rate.is_some());
        assert_eq!(
            u.decision,
            Decision::High,
            "budget is still zero at the first estimate"
        );
    }

    #[test]
    fn partial_delivery_finishes_early() {
        let cfg = PhaseConfig::default();
        let size = 1_000_000u64;
        let mut c = Controller::new(Bound::Finite(1.0), 0.0, Bound::Finite(size));
        c.fair_rate = Some(8e9);
        c.prev = Some(Phase::Exploit);
        c.synced = true;
        // delivering nothing at a 1 GB/s fair share drains 5 MB per interval
        let u = c.update(10, 0.0, cfg.t_int, &cfg);
        assert_eq!(u.decision, Decision::Finished);
        assert_abs_diff_eq!(u.drained, size as f64, epsilon = 1e-6);
        assert!(c.budget.discarded_total <= size as f64);
    }

    #[test]
    fn spend_fraction_examples() {
        let cfg = PhaseConfig::default();
        assert_abs_diff_eq!(spend_fraction(&cfg, 9, 1, 1), 0.48, epsilon = 1e-12);
        let all_exploit = PhaseConfig {
            d_exploit: 1_000_000,
            ..cfg
        };
        assert_abs_diff_eq!(spend_fraction(&all_exploit, 9, 0, 1), 1.0, epsilon = 1e-5);
        assert_eq!(spend_fraction(&cfg, 9, 1, 0), 0.0);
        assert_eq!(spend_fraction(&cfg, 9, 1, 9), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn budget_invariants_hold(
                alpha in 0.0f64..1.5,
                r in 0.0f64..=1.0,
                size in 1u64..1_000_000_000,
                steps in prop::collection::vec((0.0f64..2e7, 1e-4f64..1e-2), 1..60),
                fair in 1e6f64..1e11,
            ) {
                let mut s = BudgetState::new(Bound::Finite(size), r);
                let cap = (1.0 - r) * size as f64;
                let mut prev_r = s.reliability_budget;
                let mut prev_sent = s.sent;
                for (ack, dt) in steps {
                    let expected = reference_adjust(
                        (s.alpha_budget, s.reliability_budget, s.sent), alpha, fair / 8.0, ack, dt);
                    adjust_budget(&mut s, alpha, Some(fair), ack, dt).unwrap();
                    prop_assert_eq!((s.alpha_budget, s.reliability_budget, s.sent), expected);
                    prop_assert!(s.reliability_budget >= 0.0 && s.reliability_budget <= prev_r);
                    prop_assert!(s.sent >= prev_sent);
                    prop_assert!(s.discarded_total <= cap * (1.0 + 1e-12) + 1e-6);
                    prop_assert!((s.discarded_total - (cap - s.reliability_budget)).abs() <= 1e-6 * cap.max(1.0));
                    prev_r = s.reliability_budget;
                    prev_sent = s.sent;
                }
            }

            #[test]
            fn low_only_in_exploit_and_with_budget(
                alpha in 0.0f64..1.2,
                start in 0u64..20,
                rates in prop::collection::vec(0.0f64..1e10, 200),
            ) {
                let cfg = PhaseConfig::default();
                let mut c = Controller::new(Bound::Finite(alpha), 1.0, Bound::Unbounded);
                let mut decided_low = false;
                for (k, rate) in rates.iter().enumerate() {
                    let id = start + 1 + k as u64;
                    let u = c.update(id, rate / 8.0 * cfg.t_int, cfg.t_int, &cfg);
                    if let Some(check) = u.checked {
                        decided_low = u.decision == Decision::Low;
                        prop_assert_eq!(decided_low, check.budget > check.potential_expense);
                    }
                    if u.decision == Decision::Low {
                        prop_assert_eq!(u.upcoming, Phase::Exploit);
                        prop_assert!(decided_low);
                    }
                }
            }
        }
    }
}
