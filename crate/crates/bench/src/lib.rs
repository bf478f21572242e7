//! Shared fixtures for the criterion benches.

use gymfleet::bench::{bench_task, BENCH_GEOMETRY};
use gymfleet::env_backend::SimState;
use gymfleet::protocol::{Action, ActionPayload, MouseButton};

pub fn bench_state() -> SimState {
    SimState::from_task(&bench_task(15)).expect("bench task configures")
}

/// A short fixed action mix covering every cheap action kind.
pub fn action_mix() -> Vec<Action> {
    let g = BENCH_GEOMETRY;
    vec![
        Action::new(ActionPayload::MouseClick { x: i64::from(g.width / 3), y: i64::from(g.height / 2), button: MouseButton::Left }),
        Action::new(ActionPayload::TypeText { text: "42".into() }),
        Action::new(ActionPayload::KeyPress { key: "down".into() }),
        Action::new(ActionPayload::Scroll { delta: 2 }),
        Action::new(ActionPayload::MouseMove { x: 3, y: 4 }),
        Action::new(ActionPayload::Noop),
    ]
}
