//! Physics-level invariants of the MPM solver that go beyond unit scale:
//! Galilean invariance of force-free motion and monotone response to wind.

use pixie_core::grid::{OccupancyMask, SceneBounds};
use pixie_core::materials::{ContinuousParams, MaterialClass, MaterialGrid};
use pixie_core::mpm::{sample_particles, BoundaryConfig, BoundaryKind, MpmState, SimConfig};

fn block_particles(n: usize, lo: usize, hi: usize) -> Vec<pixie_core::mpm::Particle<f64>> {
    let mut materials = MaterialGrid::new_background(n);
    let mut mask = OccupancyMask::new_empty(n);
    let params = ContinuousParams::new(1e4, 0.3, 400.0).unwrap();
    for x in lo..hi {
        for y in lo..hi {
            for z in lo..hi {
                let v = (x * n + y) * n + z;
                materials.set(v, MaterialClass::Elastic, params);
                mask.set(v, true);
            }
        }
    }
    sample_particles(&materials, &mask, &SceneBounds::unit(), 8, 9).unwrap()
}

fn open_config(n: usize) -> SimConfig<f64> {
    SimConfig {
        grid_res: n,
        dx: 1.0 / n as f64,
        dt: 1e-3,
        boundary: BoundaryConfig::uniform(BoundaryKind::Open),
        ..SimConfig::default()
    }
}

#[test]
fn force_free_motion_is_galilean_invariant() {
    // The same block, once at rest and once in uniform translation: after
    // t seconds the moving trajectory equals the resting one shifted by
    // v0 * t, to 1e-8 relative.
    let n = 16usize;
    let steps = 100usize;
    let v0 = [0.3, 0.2, 0.1];

    let rest = block_particles(n, 6, 10);
    let mut moving = rest.clone();
    for p in &mut moving {
        p.velocity[0] += v0[0];
        p.velocity[1] += v0[1];
        p.velocity[2] += v0[2];
    }

    let mut state_a = MpmState::new(open_config(n), rest).unwrap();
    let mut state_b = MpmState::new(open_config(n), moving).unwrap();
    let dt = 1e-3f64;
    for _ in 0..steps {
        state_a.step(dt, 1.0).unwrap();
        state_b.step(dt, 1.0).unwrap();
    }
    let t = steps as f64 * dt;
    let pos_a = state_a.positions();
    let pos_b = state_b.positions();
    assert_eq!(pos_a.len(), pos_b.len());
    for (a, b) in pos_a.iter().zip(&pos_b) {
        for axis in 0..3 {
            let expected = a[axis] + v0[axis] * t;
            let err = (b[axis] - expected).abs();
            assert!(
                err <= 1e-8 * expected.abs().max(1.0),
                "axis {axis}: {} vs {expected}",
                b[axis]
            );
        }
    }
}

#[test]
fn displacement_grows_with_wind_strength() {
    // A free block pushed by wind alone: doubling the wind acceleration
    // strictly increases downwind displacement.
    let n = 16usize;
    let steps = 60usize;
    let mut displacements = Vec::new();
    for wind in [1.0f64, 2.0, 4.0] {
        let particles = block_particles(n, 6, 10);
        let start: Vec<f64> = particles.iter().map(|p| p.position[1]).collect();
        let mut config = open_config(n);
        config.wind = [0.0, wind, 0.0];
        let mut state = MpmState::new(config, particles).unwrap();
        for _ in 0..steps {
            state.step(1e-3, 1.0).unwrap();
        }
        let end = state.positions();
        let mean_dy: f64 = end
            .iter()
            .zip(&start)
            .map(|(p, s)| p[1] - s)
            .sum::<f64>()
            / start.len() as f64;
        displacements.push(mean_dy);
    }
    assert!(
        displacements[0] > 0.0
            && displacements[1] > displacements[0]
            && displacements[2] > displacements[1],
        "downwind displacement must increase with wind: {displacements:?}"
    );
}

#[test]
fn damping_bleeds_kinetic_energy() {
    // Identical moving blocks, one undamped and one damped: after the same
    // number of steps the damped block has strictly smaller speed.
    let n = 16usize;
    let mut speeds = Vec::new();
    for damping in [0.0f64, 50.0] {
        let mut particles = block_particles(n, 6, 10);
        for p in &mut particles {
            p.velocity[0] = 0.4;
        }
        let mut config = open_config(n);
        config.damping = damping;
        let mut state = MpmState::new(config, particles).unwrap();
        for _ in 0..50 {
            state.step(1e-3, 1.0).unwrap();
        }
        let v = state.velocities();
        let mean: f64 = v.iter().map(|u| u[0]).sum::<f64>() / v.len() as f64;
        speeds.push(mean);
    }
    assert!(
        speeds[1] < speeds[0] * 0.9,
        "damped speed {} should be well below undamped {}",
        speeds[1],
        speeds[0]
    );
}
