//! Property tests of the configuration text format.

use proptest::prelude::*;
use rbfpu_flow::cli::{load_config, RunConfig};
use rbfpu_flow::geometry::ObstacleShape;

fn shape() -> impl Strategy<Value = ObstacleShape> {
    prop_oneof![
        Just(ObstacleShape::Circle),
        Just(ObstacleShape::Square),
        (2u32..12).prop_map(ObstacleShape::RoundedSquare),
    ]
}

fn schedule() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..10.0, 1..6).prop_map(|steps| {
        steps
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn settings_round_trip(
        shape in shape(),
        h in 0.01f64..0.5,
        ell in 1.0f64..4.0,
        epsilon in 0.1f64..10.0,
        rho_factor in 0.6f64..5.0,
        schedule in schedule(),
        max_iters in 1usize..500,
    ) {
        let mut cfg = RunConfig { shape, h, ell, epsilon, patch_radius: h * rho_factor, re_schedule: schedule, ..Default::default() };
        cfg.trust_region.max_iters = max_iters;
        let text: String = cfg.settings().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let back = load_config(Some(&text), None, &[]).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn decreasing_schedules_are_rejected(schedule in schedule().prop_filter("two stages", |s| s.len() > 1)) {
        let text: Vec<String> = schedule.iter().rev().map(f64::to_string).collect();
        let flags = vec![("re".to_string(), text.join(","))];
        prop_assert!(load_config(None, None, &flags).is_err());
    }
}
