//! Whole-run properties of the fluid engine.

use proptest::prelude::*;
use reflex_sim::engine::{run, write_series_csv, EngineOptions};
use reflex_sim::metrics::{write_flows_csv, FlowStatus};
use reflex_sim::{
    validate_scenario, FlowKind, FlowSpec, PhaseConfig, Priority, Scenario, Scheme, SimConfig,
    Topology,
};

const G: f64 = 1e9;
const TICK: f64 = 1e-4;

fn single_link(
    flows: Vec<FlowSpec>,
    scheme: Scheme,
    efficiency: f64,
    conv_tau: f64,
    duration: f64,
) -> Scenario {
    let sim = SimConfig {
        duration,
        conv_tau,
        ..SimConfig::default()
    };
    validate_scenario(
        Topology::single_link(10.0 * G, efficiency),
        flows,
        scheme,
        sim,
    )
    .unwrap()
}

/// Completion times of two flows on one link of capacity `c` whose shares
/// while both are active are `shares` (first, second); a lone flow gets `c`.
fn two_flow_schedule(c: f64, sizes: [f64; 2], arrivals: [f64; 2], shares: (f64, f64)) -> [f64; 2] {
    let mut left = [sizes[0] * 8.0, sizes[1] * 8.0];
    let mut done = [f64::NAN; 2];
    let mut t = arrivals[0].min(arrivals[1]);
    while done.iter().any(|d| d.is_nan()) {
        let active: Vec<usize> = (0..2)
            .filter(|&i| arrivals[i] <= t && done[i].is_nan())
            .collect();
        let rate = |i: usize| match active.len() {
            2 => {
                if i == 0 {
                    shares.0
                } else {
                    shares.1
                }
            }
            _ => c,
        };
        let mut next = arrivals
            .iter()
            .copied()
            .filter(|&a| a > t)
            .fold(f64::INFINITY, f64::min);
        for &i in &active {
            if rate(i) > 0.0 {
                next = next.min(t + left[i] / rate(i));
            }
        }
        for &i in &active {
            left[i] -= rate(i) * (next - t);
            if left[i] <= 1e-6 * sizes[i] {
                done[i] = next;
            }
        }
        t = next;
    }
    done
}

fn scheme_shares(scheme: Scheme, c: f64) -> (f64, f64) {
    match scheme {
        Scheme::Baseline => (c / 2.0, c / 2.0),
        Scheme::AbsolutePriority => (0.0, c),
        Scheme::WeightedPriority { w_high, w_low } => {
            let total = f64::from(w_high + w_low);
            (c * f64::from(w_low) / total, c * f64::from(w_high) / total)
        }
        Scheme::ReFlex(_) => unreachable!(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fixed_priority_runs_follow_the_rate_schedule(
        size_a in 1_000_000u64..400_000_000,
        size_b in 1_000_000u64..400_000_000,
        start_a in 0u64..3000,
        start_b in 0u64..3000,
        which in 0usize..3,
    ) {
        let scheme = [
            Scheme::Baseline,
            Scheme::AbsolutePriority,
            Scheme::WeightedPriority { w_high: 9, w_low: 1 },
        ][which];
        let arrivals = [start_a as f64 * TICK, start_b as f64 * TICK];
        let flows = vec![
            FlowSpec::flexible(0, 0, 1, size_a, 0.5, 1.0, arrivals[0]),
            FlowSpec::regular(1, 0, 1, size_b, arrivals[1]),
        ];
        let out = run(&single_link(flows, scheme, 1.0, 0.0, 10.0), EngineOptions::default());
        let want = two_flow_schedule(10.0 * G, [size_a as f64, size_b as f64], arrivals, scheme_shares(scheme, 10.0 * G));
        for (rec, w) in out.records.iter().zip(want) {
            prop_assert!((rec.completion_time.unwrap() - w).abs() <= 2.0 * TICK,
                "flow {} done at {:?}, schedule says {}", rec.flow_id, rec.completion_time, w);
        }
    }

    #[test]
    fn payload_is_conserved_and_discards_bounded(
        size_a in 10_000_000u64..500_000_000,
        size_b in 10_000_000u64..500_000_000,
        alpha in 0.0f64..1.0,
        r in 0.0f64..=1.0,
        start_b in 0u64..2000,
    ) {
        let flows = vec![
            FlowSpec::flexible(0, 0, 1, size_a, alpha, r, 0.0),
            FlowSpec::regular(1, 0, 1, size_b, start_b as f64 * TICK),
        ];
        let s = single_link(flows, Scheme::ReFlex(PhaseConfig::default()), 0.96, 1e-3, 10.0);
        let out = run(&s, EngineOptions::default());
        prop_assert!(out.audit.is_clean(), "{:?}", out.audit);
        for rec in &out.records {
            prop_assert_eq!(rec.status, FlowStatus::Finished);
            let f = rec.size.bytes();
            prop_assert!((rec.delivered + rec.discarded - f).abs() <= 1e-6 * f);
            prop_assert!(rec.discarded <= (1.0 - rec.r) * f + 1e-6);
            prop_assert!(rec.fct.unwrap() > 0.0);
        }
    }
}

#[test]
fn lagged_rates_never_exceed_capacity_on_a_busy_star() {
    let topo = Topology::star(6, 10.0 * G, 0.96);
    let mut flows = Vec::new();
    for i in 0..30u64 {
        let src = (i % 6) as u32;
        let dst = ((i * 7 + 1) % 6) as u32;
        let dst = if dst == src { (dst + 1) % 6 } else { dst };
        let t = i as f64 * 0.013;
        flows.push(if i % 3 == 0 {
            FlowSpec::flexible(i, src, dst, 60_000_000, 0.7, 0.8, t)
        } else {
            FlowSpec::regular(i, src, dst, 5_000_000 + i * 1_000_000, t)
        });
    }
    for scheme in [
        Scheme::Baseline,
        Scheme::AbsolutePriority,
        Scheme::WeightedPriority {
            w_high: 9,
            w_low: 1,
        },
        Scheme::ReFlex(PhaseConfig::default()),
    ] {
        let sim = SimConfig {
            duration: 5.0,
            conv_tau: 1e-3,
            ..SimConfig::default()
        };
        let s = validate_scenario(topo.clone(), flows.clone(), scheme, sim).unwrap();
        let out = run(&s, EngineOptions::default());
        assert_eq!(out.audit.capacity_violations, 0, "{}", scheme.name());
        assert!(out.audit.is_clean(), "{}: {:?}", scheme.name(), out.audit);
        assert!(out.records.iter().all(|r| r.status == FlowStatus::Finished));
    }
}

#[test]
fn reflex_rates_take_allocator_values_between_boundaries() {
    // With instant convergence the flexible flow sees exactly three rates:
    // alone, sharing equally, or in the low class.
    let flows = vec![
        FlowSpec::flexible(0, 0, 1, 2_000_000_000, 0.8, 1.0, 0.0),
        FlowSpec::regular(1, 0, 1, 500_000_000, 0.5),
    ];
    let s = single_link(flows, Scheme::ReFlex(PhaseConfig::default()), 1.0, 0.0, 5.0);
    let out = run(
        &s,
        EngineOptions {
            sample_every: Some(1),
            ..Default::default()
        },
    );
    let regular_done = out.records[1].completion_time.unwrap();
    let mut low_seen = false;
    for row in out.series.iter().filter(|r| r.flow_id.0 == 0) {
        let expected = if row.time <= 0.5 || row.time > regular_done + TICK {
            10.0 * G
        } else if row.priority == Priority::Low {
            low_seen = true;
            1.0 * G
        } else {
            5.0 * G
        };
        if (row.time - regular_done).abs() <= TICK || (row.time - 0.5).abs() <= TICK {
            continue;
        }
        assert!(
            [1.0 * G, 5.0 * G, 10.0 * G]
                .iter()
                .any(|v| (row.rate_bps - v).abs() < 1e-3),
            "rate {} at {}",
            row.rate_bps,
            row.time
        );
        if (row.rate_bps - expected).abs() > 1e-3 {
            // a priority change is sampled before the next reallocation
            let cycles = row.time / 5e-3;
            assert!(
                (cycles - cycles.round()).abs() * 5e-3 <= 1.5 * TICK,
                "mismatch at {}",
                row.time
            );
        }
    }
    assert!(low_seen);
}

#[test]
fn full_alpha_and_reliability_reduce_to_baseline() {
    for (flex_first, size_flex, size_reg) in [
        (true, 5_000_000_000, 250_000_000),
        (false, 250_000_000, 5_000_000_000),
    ] {
        let (t_flex, t_reg) = if flex_first { (0.0, 2.0) } else { (2.0, 0.0) };
        let flows = vec![
            FlowSpec::flexible(0, 0, 1, size_flex, 1.0, 1.0, t_flex),
            FlowSpec::regular(1, 0, 1, size_reg, t_reg),
        ];
        let reflex = run(
            &single_link(
                flows.clone(),
                Scheme::ReFlex(PhaseConfig::default()),
                0.96,
                1e-3,
                10.0,
            ),
            EngineOptions::default(),
        );
        let base = run(
            &single_link(flows, Scheme::Baseline, 0.96, 1e-3, 10.0),
            EngineOptions::default(),
        );
        assert_eq!(reflex.audit.low_decisions, 0);
        for (a, b) in reflex.records.iter().zip(&base.records) {
            let (fa, fb) = (a.fct.unwrap(), b.fct.unwrap());
            assert!((fa - fb).abs() <= 0.02 * fb, "{} vs {}", fa, fb);
        }
    }
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let flows: Vec<FlowSpec> = (0..10)
        .map(|i| {
            if i % 2 == 0 {
                FlowSpec::flexible(i, 0, 1, 100_000_000, 0.6, 0.5, i as f64 * 0.05)
            } else {
                FlowSpec::regular(i, 0, 1, 30_000_000, i as f64 * 0.05)
            }
        })
        .collect();
    let s = single_link(
        flows,
        Scheme::ReFlex(PhaseConfig::default()),
        0.96,
        1e-3,
        5.0,
    );
    let bytes = || {
        let out = run(
            &s,
            EngineOptions {
                sample_every: Some(10),
                ..Default::default()
            },
        );
        let mut a = Vec::new();
        write_flows_csv(&mut a, &out.records).unwrap();
        write_series_csv(&mut a, &out.series).unwrap();
        a
    };
    assert_eq!(bytes(), bytes());
}

#[test]
fn achieved_utilization_matches_offered_load() {
    use reflex_sim::workload::{
        generate, ArrivalKind, ArrivalProcess, EndpointModel, FlowTemplate, SizeModel,
    };
    let p = ArrivalProcess {
        kind: ArrivalKind::Poisson { rate: 1.0 },
        size: SizeModel::Constant(250_000_000),
        template: FlowTemplate::regular(),
        endpoints: EndpointModel::Fixed {
            src: reflex_sim::NodeId(0),
            dst: reflex_sim::NodeId(1),
        },
    };
    let flows = generate(&p, 60.0, 5).unwrap();
    let offered: f64 = flows.iter().map(|f| f.size_bytes() * 8.0).sum::<f64>() / (60.0 * 10.0 * G);
    let s = single_link(flows, Scheme::Baseline, 1.0, 0.0, 61.0);
    let out = run(&s, EngineOptions::default());
    let carried: f64 =
        out.records.iter().map(|r| r.delivered * 8.0).sum::<f64>() / (60.0 * 10.0 * G);
    assert!((offered - 0.2).abs() < 0.02, "offered {offered}");
    assert!((carried - 0.2).abs() < 0.02, "carried {carried}");
    assert!(out.records.iter().all(|r| r.kind == FlowKind::Regular));
}
