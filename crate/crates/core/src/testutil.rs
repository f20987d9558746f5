//! Shared scene builders for unit tests.

use crate::scene::{Actor, ActorState, Scene, Trajectory, Vec2};

/// Parallel straight-moving actors with full histories and futures; actor i
/// drives along y = 5*i at unit speed. AOI is a0.
pub fn straight_scene(n_actors: usize, horizon: usize) -> Scene {
    let actors = (0..n_actors)
        .map(|i| {
            let y = i as f64 * 5.0;
            let hist = (-2..=0)
                .map(|t| ActorState::new(t, Vec2::new(t as f64, y), true))
                .collect();
            let fut = (1..=horizon as i32)
                .map(|t| ActorState::new(t, Vec2::new(t as f64, y), true))
                .collect();
            Actor {
                id: format!("a{i}"),
                history: Trajectory { states: hist },
                future_gt: Some(Trajectory { states: fut }),
            }
        })
        .collect();
    Scene {
        id: "s".into(),
        dt: 0.1,
        horizon,
        aoi_id: "a0".into(),
        actors,
        lanes: vec![],
    }
}
