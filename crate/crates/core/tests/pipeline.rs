use vslr_core::experiments::{demand_mc, table1, validate};
use vslr_core::reliability::MinTtVariant;
use vslr_core::scenario::Scenario;

fn shipped() -> Scenario {
    Scenario::from_toml(include_str!("../../../scenarios/default.toml")).unwrap()
}

#[test]
fn self_checks_pass_on_shipped_scenario() {
    let rep = validate(&shipped(), 11).unwrap();
    assert_eq!(rep.hard_failures(), 0, "{}", rep.render());
}

#[test]
fn table_rows_are_ordered_and_improve_on_baseline() {
    let rows = table1(&shipped()).unwrap();
    assert_eq!(rows.len(), 10);
    for (pipeline, chunk) in [MinTtVariant::Corrected, MinTtVariant::Verbatim].into_iter().zip(rows.chunks(5)) {
        assert!(chunk.iter().all(|r| r.pipeline == pipeline));
        // configured weights are decreasing, so floors must rise
        for w in chunk[1..].windows(2) {
            assert!(w[1].tau_star > w[0].tau_star);
            assert!(w[1].std_tau < w[0].std_tau);
        }
        assert!(chunk.iter().all(|r| r.delta_j < 0.0 && r.rel_improvement < 0.0 && r.tau_star >= 4.98));
    }
}

#[test]
fn demand_monte_carlo_is_reproducible_and_tracks_targets() {
    let sc = shipped();
    let a = demand_mc(&sc, 40, 5).unwrap();
    let b = demand_mc(&sc, 40, 5).unwrap();
    assert_eq!(a.days, b.days);
    assert_ne!(demand_mc(&sc, 40, 6).unwrap().days, a.days);
    for d in &a.days {
        assert!(d.target_min >= a.r_star - 1e-12);
        assert!(((d.controlled_min - d.target_min) / d.target_min).abs() < 0.05, "{d:?}");
    }
    assert!(a.controlled.std < a.uncontrolled.std);
}
