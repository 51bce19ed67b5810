//! 2D ray-cast range sensor over multiple ego-compensated sweeps.
//!
//! Each sweep casts uniformly spaced rays from the ego pose at that frame;
//! a ray returns the first intersection with any vehicle box edge within
//! range (farther vehicles are occluded). Hit points are formed in the
//! sensor frame of their sweep, then re-expressed in the ego frame of the
//! current (latest) sweep using the known ego motion, so all sweeps share
//! one coordinate frame. A height coordinate is sampled uniformly in a
//! small band to feed the voxelizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SE2Transform;

use super::{Agent, CURRENT_FRAME};

/// Height band the planar sensor smears hits across, meters.
const Z_MIN: f64 = 0.2;
const Z_MAX: f64 = 1.4;

/// Sensor settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    /// Rays per sweep, uniformly spaced over the full circle.
    pub beams: usize,
    /// Maximum return distance, meters.
    pub range: f64,
    /// Number of sweeps ending at the current frame (10 Hz spacing).
    pub sweeps: usize,
}

impl LidarConfig {
    /// Desk-scale default: 720 rays, 60 m range, 3 sweeps.
    pub fn toy() -> Self {
        LidarConfig { beams: 720, range: 60.0, sweeps: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 || self.sweeps == 0 || !(self.range > 0.0) {
            return Err(Error::domain(
                "LidarConfig",
                format!(
                    "beams {}, sweeps {}, range {} must all be positive",
                    self.beams, self.sweeps, self.range
                ),
            ));
        }
        Ok(())
    }
}

/// Point sweeps (oldest first) in the current ego frame, with per-point
/// attribution to the vehicle each ray hit (index into the agent slice the
/// simulation was given).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSet {
    pub points: Vec<Vec<[f64; 3]>>,
    pub hit_agents: Vec<Vec<usize>>,
}

impl SweepSet {
    /// Points of the newest sweep.
    pub fn current(&self) -> &[[f64; 3]] {
        self.points.last().map(|s| s.as_slice()).unwrap_or(&[])
    }
}

/// Distance along the ray `origin + t * dir` to segment `a`-`b`, if they
/// intersect with `t > 0`.
fn ray_segment(origin: [f64; 2], dir: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let e = [b[0] - a[0], b[1] - a[1]];
    let denom = dir[0] * e[1] - dir[1] * e[0];
    if denom.abs() < 1e-12 {
        return None;
    }
    let ao = [a[0] - origin[0], a[1] - origin[1]];
    let t = (ao[0] * e[1] - ao[1] * e[0]) / denom;
    let u = (ao[0] * dir[1] - ao[1] * dir[0]) / denom;
    if t > 1e-9 && (-1e-12..=1.0 + 1e-12).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Cast all sweeps against the moving vehicle boxes.
///
/// `ego` provides the sensor pose per frame; `others` are the reflecting
/// vehicles (the ego body never returns points). Requires every track to
/// cover the sweep frames; sweeps must not outnumber the frames up to and
/// including the current one. Deterministic per `seed` (the seed only
/// drives the height-band sampling).
pub fn simulate_lidar(
    ego: &Agent,
    others: &[Agent],
    config: &LidarConfig,
    seed: u64,
) -> Result<SweepSet> {
    config.validate()?;
    if config.sweeps > CURRENT_FRAME + 1 {
        return Err(Error::domain(
            "simulate_lidar",
            format!(
                "{} sweeps requested but only {} frames exist up to the current one",
                config.sweeps,
                CURRENT_FRAME + 1
            ),
        ));
    }
    let needed = CURRENT_FRAME + 1;
    if ego.track.len() < needed || others.iter().any(|a| a.track.len() < needed) {
        return Err(Error::domain(
            "simulate_lidar",
            format!("every track must cover at least {needed} frames"),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_current = SE2Transform::from_pose(&ego.track[CURRENT_FRAME].pose);
    let to_current_base = t_current.invert();

    let mut points = Vec::with_capacity(config.sweeps);
    let mut hit_agents = Vec::with_capacity(config.sweeps);
    for k in 0..config.sweeps {
        let frame = CURRENT_FRAME + 1 - config.sweeps + k;
        let ego_pose = ego.track[frame].pose;
        let sensor = SE2Transform::from_pose(&ego_pose);
        let sensor_inv = sensor.invert();
        let to_current = to_current_base.compose(&sensor);
        let origin = [ego_pose.x, ego_pose.y];
        let edges: Vec<(usize, [[f64; 2]; 4])> = others
            .iter()
            .enumerate()
            .map(|(i, a)| (i, a.bbox_at(frame).corners()))
            .collect();

        let mut sweep_pts = Vec::new();
        let mut sweep_hits = Vec::new();
        for beam in 0..config.beams {
            let angle =
                ego_pose.theta + 2.0 * std::f64::consts::PI * beam as f64 / config.beams as f64;
            let dir = [angle.cos(), angle.sin()];
            let mut best: Option<(f64, usize)> = None;
            for (agent_idx, corners) in &edges {
                for e in 0..4 {
                    let a = corners[e];
                    let b = corners[(e + 1) % 4];
                    if let Some(t) = ray_segment(origin, dir, a, b) {
                        if t <= config.range && best.map_or(true, |(bt, _)| t < bt) {
                            best = Some((t, *agent_idx));
                        }
                    }
                }
            }
            if let Some((t, agent_idx)) = best {
                let world = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
                let sensor_pt = sensor_inv.apply(world);
                let compensated = to_current.apply(sensor_pt);
                let z = rng.gen_range(Z_MIN..Z_MAX);
                sweep_pts.push([compensated[0], compensated[1], z]);
                sweep_hits.push(agent_idx);
            }
        }
        points.push(sweep_pts);
        hit_agents.push(sweep_hits);
    }
    Ok(SweepSet { points, hit_agents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{OrientedBox, Pose2};
    use crate::scenes::{TrackPoint, TRACK_FRAMES};

    /// Vehicle parked at a fixed pose for the whole window.
    fn parked(id: usize, x: f64, y: f64, theta: f64, length: f64, width: f64) -> Agent {
        Agent {
            id,
            length,
            width,
            track: vec![TrackPoint { pose: Pose2::new(x, y, theta), speed: 0.0 }; TRACK_FRAMES],
        }
    }

    /// Ego driving straight along +x at constant speed, at the origin on
    /// the current frame.
    fn moving_ego(speed: f64) -> Agent {
        let track = (0..TRACK_FRAMES)
            .map(|f| TrackPoint {
                pose: Pose2::new(
                    speed * 0.1 * (f as f64 - CURRENT_FRAME as f64),
                    0.0,
                    0.0,
                ),
                speed,
            })
            .collect();
        Agent { id: 0, length: 4.5, width: 2.0, track }
    }

    fn dist_to_box_boundary(p: [f64; 2], bbox: &OrientedBox) -> f64 {
        let corners = bbox.corners();
        let mut best = f64::INFINITY;
        for e in 0..4 {
            let a = corners[e];
            let b = corners[(e + 1) % 4];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            best = best.min((p[0] - q[0]).hypot(p[1] - q[1]));
        }
        best
    }

    #[test]
    fn single_box_returns_only_facing_edge() {
        let ego = parked(0, 0.0, 0.0, 0.0, 4.5, 2.0);
        let target = parked(1, 10.0, 0.0, 0.0, 4.0, 2.0);
        let out =
            simulate_lidar(&ego, &[target], &LidarConfig { beams: 720, range: 60.0, sweeps: 1 }, 0)
                .unwrap();
        let pts = out.current();
        assert!(!pts.is_empty());
        for p in pts {
            // Near edge of the box sits at x = 8; the far edge at x = 12
            // must never return.
            assert!((p[0] - 8.0).abs() < 1e-9, "hit at x = {}", p[0]);
            assert!(p[1].abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn occluded_box_returns_nothing() {
        let ego = parked(0, 0.0, 0.0, 0.0, 4.5, 2.0);
        let near = parked(1, 10.0, 0.0, 0.0, 4.0, 2.0);
        let far = parked(2, 25.0, 0.0, 0.0, 4.0, 2.0);
        let out = simulate_lidar(
            &ego,
            &[near, far],
            &LidarConfig { beams: 720, range: 60.0, sweeps: 1 },
            0,
        )
        .unwrap();
        assert!(out.hit_agents[0].iter().all(|&a| a == 0), "shadowed vehicle returned a point");
        assert!(out.hit_agents[0].iter().filter(|&&a| a == 0).count() > 0);
    }

    #[test]
    fn beyond_range_returns_nothing() {
        let ego = parked(0, 0.0, 0.0, 0.0, 4.5, 2.0);
        let target = parked(1, 70.0, 0.0, 0.0, 4.0, 2.0);
        let out =
            simulate_lidar(&ego, &[target], &LidarConfig { beams: 720, range: 60.0, sweeps: 3 }, 0)
                .unwrap();
        assert!(out.points.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn static_world_compensation_matches_surfaces() {
        // Moving ego, parked vehicles: every compensated point from every
        // sweep must land exactly on a box boundary in the current frame.
        let ego = moving_ego(6.0);
        let boxes = [
            parked(1, 15.0, 4.0, 0.4, 4.4, 1.9),
            parked(2, 12.0, -6.0, -1.1, 4.8, 2.0),
            parked(3, -10.0, 5.0, 2.2, 4.2, 1.8),
        ];
        let out = simulate_lidar(
            &ego,
            &boxes,
            &LidarConfig { beams: 720, range: 60.0, sweeps: 3 },
            7,
        )
        .unwrap();
        assert_eq!(out.points.len(), 3);
        let footprints: Vec<OrientedBox> =
            boxes.iter().map(|b| b.bbox_at(CURRENT_FRAME)).collect();
        let mut checked = 0;
        for (sweep, hits) in out.points.iter().zip(&out.hit_agents) {
            assert!(!sweep.is_empty(), "a sweep saw nothing");
            for (p, &agent) in sweep.iter().zip(hits) {
                let d = dist_to_box_boundary([p[0], p[1]], &footprints[agent]);
                assert!(d < 1e-9, "compensated point off surface by {d}");
                assert!((Z_MIN..Z_MAX).contains(&p[2]));
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} points across three sweeps");
    }

    #[test]
    fn deterministic_per_seed() {
        let ego = moving_ego(5.0);
        let target = parked(1, 12.0, 2.0, 0.3, 4.5, 2.0);
        let config = LidarConfig::toy();
        let a = simulate_lidar(&ego, std::slice::from_ref(&target), &config, 42).unwrap();
        let b = simulate_lidar(&ego, std::slice::from_ref(&target), &config, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_lidar(&ego, std::slice::from_ref(&target), &config, 43).unwrap();
        assert_ne!(a, c, "different seeds should draw different heights");
    }

    #[test]
    fn too_many_sweeps_is_an_error() {
        let ego = parked(0, 0.0, 0.0, 0.0, 4.5, 2.0);
        let config = LidarConfig { beams: 90, range: 60.0, sweeps: CURRENT_FRAME + 2 };
        assert!(simulate_lidar(&ego, &[], &config, 0).is_err());
        let bad = LidarConfig { beams: 0, range: 60.0, sweeps: 1 };
        assert!(simulate_lidar(&ego, &[], &bad, 0).is_err());
    }
}
