//! Synthetic interacting-traffic scenarios.
//!
//! Two families of scenes at 10 Hz: straight two-way roads where chains of
//! vehicles car-follow under the Intelligent Driver Model behind a lead
//! vehicle with a scripted speed profile (braking waves), and four-way stop
//! intersections where vehicles approach on four arms, follow straight /
//! left / right turn paths, and yield by arrival priority (one vehicle in
//! the conflict zone at a time). One vehicle is designated the ego; a 2D
//! ray-cast sensor ([`lidar`]) produces multi-sweep point clouds from its
//! poses, and every scenario is re-expressed in the ego frame at the
//! current (latest-sweep) timestep.
//!
//! Ground truth is collision-free by construction and checked; generation
//! retries with a perturbed stream on violation. Labels cover the non-ego
//! vehicles that pass the sensor visibility rule, with future waypoints
//! sampled exactly on the forecast time grid.

pub mod io;
pub mod lidar;

pub use io::{read_dataset, write_dataset, DatasetReader, DatasetWriter};
pub use lidar::{simulate_lidar, LidarConfig, SweepSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::is_visible_target;
use crate::error::{Error, Result};
use crate::geometry::{box_iou, se2_relative, OrientedBox, Pose2, SE2Transform};
use crate::raster::MapElement;
use crate::spagnn::{FORECAST_DT, FORECAST_STEPS};

/// Simulation step, seconds (10 Hz).
pub const SIM_DT: f64 = 0.1;
/// Simulated frames before the current one (warm-up and sensor history).
pub const WARMUP_FRAMES: usize = 20;
/// Simulated frames after the current one (the 3 s forecast horizon).
pub const FUTURE_FRAMES: usize = 30;
/// Index of the "now" frame inside every track.
pub const CURRENT_FRAME: usize = WARMUP_FRAMES;
/// Total frames stored per track.
pub const TRACK_FRAMES: usize = WARMUP_FRAMES + 1 + FUTURE_FRAMES;
/// Frames between consecutive label waypoints (0.5 s at 10 Hz).
pub const LABEL_STRIDE: usize = (FORECAST_DT / SIM_DT) as usize;

/// Lane centerline offset from the road axis, meters (right-hand traffic).
pub const LANE_OFFSET: f64 = 1.75;
/// Half-width of a two-lane road, meters.
pub const ROAD_HALF_WIDTH: f64 = 3.5;
/// Half-extent of the square intersection conflict zone, meters.
pub const ZONE_HALF: f64 = 3.5;
/// Gap kept between the stop line and the conflict zone edge, meters.
const STOP_MARGIN: f64 = 1.5;
/// Extra clearance behind the zone before an exit counts, meters.
const CLEAR_MARGIN: f64 = 0.5;
/// How far map geometry extends from the scene center, meters.
const MAP_EXTENT: f64 = 150.0;
/// Half-length of intersection arms, meters.
const ARM_LEN: f64 = 80.0;

const _GRID_ALIGNMENT: () =
    assert!(LABEL_STRIDE * (FORECAST_STEPS - 1) == FUTURE_FRAMES, "label grid must span the horizon");

// ---------------------------------------------------------------------------
// Intelligent Driver Model.
// ---------------------------------------------------------------------------

/// Longitudinal car-following parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Free-road desired speed, m/s.
    pub desired_speed: f64,
    /// Desired time headway, s.
    pub time_headway: f64,
    /// Standstill minimum gap, m.
    pub min_gap: f64,
    /// Maximum acceleration, m/s^2.
    pub max_accel: f64,
    /// Comfortable deceleration, m/s^2.
    pub comfort_decel: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed: 12.0,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.5,
            comfort_decel: 2.0,
        }
    }
}

/// IDM acceleration for a vehicle at `speed` with bumper-to-bumper `gap` to
/// a leader moving at `lead_speed`. Pass `f64::INFINITY` for a free road.
pub fn idm_acceleration(p: &IdmParams, speed: f64, gap: f64, lead_speed: f64) -> f64 {
    let free = (speed / p.desired_speed).powi(4);
    if !gap.is_finite() {
        return p.max_accel * (1.0 - free);
    }
    let gap = gap.max(1e-3);
    let dv = speed - lead_speed;
    let desired_gap = p.min_gap
        + speed * p.time_headway
        + speed * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt());
    p.max_accel * (1.0 - free - (desired_gap.max(0.0) / gap).powi(2))
}

/// The gap at which a follower moving at the leader's (constant) `speed`
/// has exactly zero acceleration — the model's fixed point.
pub fn idm_equilibrium_gap(p: &IdmParams, speed: f64) -> Result<f64> {
    let free = (speed / p.desired_speed).powi(4);
    if speed < 0.0 || free >= 1.0 {
        return Err(Error::domain(
            "idm_equilibrium_gap",
            format!("speed {speed} must be in [0, desired {})", p.desired_speed),
        ));
    }
    Ok((p.min_gap + speed * p.time_headway) / (1.0 - free).sqrt())
}

// ---------------------------------------------------------------------------
// Domain types.
// ---------------------------------------------------------------------------

/// One frame of a vehicle track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub pose: Pose2,
    pub speed: f64,
}

/// A vehicle with its footprint and 10 Hz track over the whole scenario
/// window (warm-up, current frame, 3 s future).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: usize,
    pub length: f64,
    pub width: f64,
    pub track: Vec<TrackPoint>,
}

impl Agent {
    /// Oriented footprint at a track frame.
    pub fn bbox_at(&self, frame: usize) -> OrientedBox {
        let p = self.track[frame].pose;
        OrientedBox::new(p.x, p.y, self.length, self.width, p.theta)
    }

    pub fn current_bbox(&self) -> OrientedBox {
        self.bbox_at(CURRENT_FRAME)
    }
}

/// Scene family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Following,
    Intersection,
    /// Resolved to one of the concrete kinds per scenario seed.
    Mixed,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Following => "following",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Mixed => "mixed",
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "following" => Ok(ScenarioKind::Following),
            "intersection" => Ok(ScenarioKind::Intersection),
            "mixed" => Ok(ScenarioKind::Mixed),
            other => Err(Error::domain(
                "ScenarioKind",
                format!("unknown kind {other:?}; expected following, intersection, or mixed"),
            )),
        }
    }
}

/// Ground truth for one visible non-ego vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub agent_id: usize,
    /// Footprint at the current frame (ego frame).
    pub bbox: OrientedBox,
    /// Poses on the forecast grid: current frame plus every 0.5 s to 3 s.
    pub waypoints: Vec<Pose2>,
}

/// A complete self-contained scene in the current-ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Record schema version tag.
    pub schema: String,
    pub seed: u64,
    /// Concrete kind (a mixed request records what it resolved to).
    pub kind: ScenarioKind,
    pub ego: Agent,
    /// Non-ego vehicles.
    pub agents: Vec<Agent>,
    pub map: Vec<MapElement>,
    /// Sensor sweeps, oldest first, compensated into the current ego frame.
    pub sweeps: Vec<Vec<[f64; 3]>>,
    pub labels: Vec<SceneLabel>,
}

impl Scenario {
    /// Label boxes at the current frame, in label order.
    pub fn label_boxes(&self) -> Vec<OrientedBox> {
        self.labels.iter().map(|l| l.bbox).collect()
    }

    pub fn agent(&self, id: usize) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }
}

/// Generation knobs beyond (kind, count, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub kind: ScenarioKind,
    /// Number of non-ego vehicles.
    pub n_agents: usize,
    pub lidar: LidarConfig,
    /// Attempts before giving up on the non-collision invariant.
    pub retry_budget: usize,
}

impl GenConfig {
    pub fn new(kind: ScenarioKind, n_agents: usize) -> Self {
        GenConfig { kind, n_agents, lidar: LidarConfig::toy(), retry_budget: 25 }
    }
}

/// Generate one scenario with toy sensor settings.
pub fn gen_scenario(kind: ScenarioKind, n_agents: usize, seed: u64) -> Result<Scenario> {
    gen_with(&GenConfig::new(kind, n_agents), seed)
}

// ---------------------------------------------------------------------------
// Paths.
// ---------------------------------------------------------------------------

/// Arc-length-parameterized polyline path.
#[derive(Debug, Clone)]
struct Path {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Path {
    fn new(pts: Vec<[f64; 2]>) -> Path {
        debug_assert!(pts.len() >= 2);
        let mut cum = Vec::with_capacity(pts.len());
        let mut total = 0.0;
        cum.push(0.0);
        for pair in pts.windows(2) {
            total += (pair[1][0] - pair[0][0]).hypot(pair[1][1] - pair[0][1]);
            cum.push(total);
        }
        Path { pts, cum }
    }

    fn total_len(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Pose at arc length `s` (clamped to the path ends); heading follows
    /// the local segment direction.
    fn pose_at(&self, s: f64) -> Pose2 {
        let s = s.clamp(0.0, self.total_len());
        // Segment whose [cum[i], cum[i+1]] interval contains s.
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i - 1,
        };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        Pose2::new(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), heading)
    }

    /// First and last arc length at which the path is inside the square
    /// conflict zone `|x|, |y| <= half` (sampled at quarter-meter steps).
    fn zone_window(&self, half: f64) -> Option<(f64, f64)> {
        let step = 0.25;
        let n = (self.total_len() / step).ceil() as usize;
        let mut enter = None;
        let mut exit = None;
        for k in 0..=n {
            let s = (k as f64 * step).min(self.total_len());
            let p = self.pose_at(s);
            if p.x.abs() <= half && p.y.abs() <= half {
                if enter.is_none() {
                    enter = Some(s);
                }
                exit = Some(s);
            }
        }
        enter.zip(exit)
    }
}

/// Quarter-turn arc sample points from `a0` to `a1` around `center`.
fn arc_points(center: [f64; 2], radius: f64, a0: f64, a1: f64, step: f64) -> Vec<[f64; 2]> {
    let n = ((a1 - a0).abs() * radius / step).ceil().max(2.0) as usize;
    (0..=n)
        .map(|k| {
            let a = a0 + (a1 - a0) * k as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Rotate a point set by `angle` about the origin.
fn rotate_pts(pts: &[[f64; 2]], angle: f64) -> Vec<[f64; 2]> {
    let (s, c) = angle.sin_cos();
    pts.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Maneuver {
    Straight,
    Right,
    Left,
}

/// Canonical arm-0 (eastbound, approaching from the west) path for a
/// maneuver, then rotated into arm `arm`. Right turns hug the near corner
/// (radius 1.75), left turns sweep the far corner (radius 5.25).
fn junction_path(arm: usize, maneuver: Maneuver) -> Path {
    let lane = LANE_OFFSET;
    let mut pts: Vec<[f64; 2]> = vec![[-ARM_LEN, -lane]];
    match maneuver {
        Maneuver::Straight => {
            pts.push([ARM_LEN, -lane]);
        }
        Maneuver::Right => {
            // The arc's first sample is the zone entry point itself.
            let r = ZONE_HALF - lane;
            pts.extend(arc_points(
                [-ZONE_HALF, -ZONE_HALF],
                r,
                std::f64::consts::FRAC_PI_2,
                0.0,
                0.1,
            ));
            pts.push([-lane, -ARM_LEN]);
        }
        Maneuver::Left => {
            let r = ZONE_HALF + lane;
            pts.extend(arc_points(
                [-ZONE_HALF, ZONE_HALF],
                r,
                -std::f64::consts::FRAC_PI_2,
                0.0,
                0.1,
            ));
            pts.push([lane, ARM_LEN]);
        }
    }
    Path::new(rotate_pts(&pts, arm as f64 * std::f64::consts::FRAC_PI_2))
}

// ---------------------------------------------------------------------------
// Simulation.
// ---------------------------------------------------------------------------

/// Scripted lead-vehicle speed profile: constant, with an optional braking
/// event toward a target speed.
#[derive(Debug, Clone, Copy)]
struct SpeedProfile {
    brake_frame: Option<usize>,
    decel: f64,
    target: f64,
}

#[derive(Debug, Clone)]
enum Control {
    /// Scripted profile (chain leaders).
    Profile(SpeedProfile),
    /// IDM behind another simulated vehicle sharing the same path.
    Follow { ahead: usize },
    /// Intersection driving: optional same-arm predecessor, plus the stop
    /// rule against higher-priority vehicles.
    Junction {
        ahead: Option<JunctionLead>,
        /// Smaller = earlier turn at the stop intersection.
        priority: usize,
        /// Arc length of the stop line on this vehicle's path.
        stop_s: f64,
        /// Arc length where this path enters the conflict zone.
        entry_s: f64,
        /// Arc length where this path leaves the conflict zone.
        exit_s: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct JunctionLead {
    index: usize,
    /// The predecessor follows the identical path geometry, so plain
    /// arc-length gaps stay valid beyond the zone.
    same_path: bool,
}

#[derive(Debug, Clone)]
struct SimAgent {
    length: f64,
    width: f64,
    path_idx: usize,
    s: f64,
    speed: f64,
    control: Control,
}

struct SimWorld {
    paths: Vec<Path>,
    agents: Vec<SimAgent>,
}

impl SimWorld {
    /// Advance every vehicle one step, synchronously (all accelerations
    /// from the pre-step state).
    fn step(&mut self, frame: usize, idm: &IdmParams) {
        let snapshot: Vec<(f64, f64)> = self.agents.iter().map(|a| (a.s, a.speed)).collect();
        let exited: Vec<bool> = self
            .agents
            .iter()
            .map(|a| match &a.control {
                Control::Junction { exit_s, .. } => a.s - 0.5 * a.length > exit_s + CLEAR_MARGIN,
                _ => true,
            })
            .collect();
        let priorities: Vec<usize> = self
            .agents
            .iter()
            .map(|a| match &a.control {
                Control::Junction { priority, .. } => *priority,
                _ => 0,
            })
            .collect();

        let mut accels = Vec::with_capacity(self.agents.len());
        for (i, agent) in self.agents.iter().enumerate() {
            let (s, v) = snapshot[i];
            let a = match &agent.control {
                Control::Profile(profile) => match profile.brake_frame {
                    Some(bf) if frame >= bf && v > profile.target => {
                        (-profile.decel).max((profile.target - v) / SIM_DT)
                    }
                    _ => 0.0,
                },
                Control::Follow { ahead } => {
                    let (s_lead, v_lead) = snapshot[*ahead];
                    let gap =
                        s_lead - s - 0.5 * (self.agents[*ahead].length + agent.length);
                    idm_acceleration(idm, v, gap, v_lead)
                }
                Control::Junction { ahead, priority, stop_s, entry_s, .. } => {
                    let mut a = idm_acceleration(idm, v, f64::INFINITY, v);
                    if let Some(lead) = ahead {
                        let (s_lead, v_lead) = snapshot[lead.index];
                        let lead_entry = match &self.agents[lead.index].control {
                            Control::Junction { entry_s, .. } => *entry_s,
                            _ => f64::INFINITY,
                        };
                        // Same-arm distance: identical paths compare arc
                        // lengths directly; diverging turns compare
                        // distance-to-zone while the leader is still on the
                        // shared approach.
                        let gap = if lead.same_path {
                            Some(s_lead - s)
                        } else if s_lead < lead_entry {
                            Some((entry_s - s) - (lead_entry - s_lead))
                        } else {
                            None
                        };
                        if let Some(gap) = gap {
                            let gap =
                                gap - 0.5 * (self.agents[lead.index].length + agent.length);
                            a = a.min(idm_acceleration(idm, v, gap, v_lead));
                        }
                    }
                    let my_turn = (0..self.agents.len())
                        .all(|j| j == i || exited[j] || priorities[j] > *priority);
                    if !my_turn {
                        let gap = stop_s - (s + 0.5 * agent.length);
                        a = a.min(idm_acceleration(idm, v, gap, 0.0));
                    }
                    a
                }
            };
            accels.push(a);
        }
        for (agent, a) in self.agents.iter_mut().zip(accels) {
            agent.speed = (agent.speed + a * SIM_DT).max(0.0);
            agent.s += agent.speed * SIM_DT;
        }
    }

    /// Run the full window, returning per-agent tracks in world frame.
    fn run(&mut self, idm: &IdmParams) -> Vec<Vec<TrackPoint>> {
        let mut tracks = vec![Vec::with_capacity(TRACK_FRAMES); self.agents.len()];
        for frame in 0..TRACK_FRAMES {
            for (i, agent) in self.agents.iter().enumerate() {
                tracks[i].push(TrackPoint {
                    pose: self.paths[agent.path_idx].pose_at(agent.s),
                    speed: agent.speed,
                });
            }
            if frame + 1 < TRACK_FRAMES {
                self.step(frame, idm);
            }
        }
        tracks
    }
}

// ---------------------------------------------------------------------------
// Scenario builders.
// ---------------------------------------------------------------------------

struct BuiltWorld {
    world: SimWorld,
    map: Vec<MapElement>,
}

fn build_following(n_vehicles: usize, rng: &mut ChaCha8Rng, idm: &IdmParams) -> BuiltWorld {
    // Two-way straight road along x; eastbound lane below the axis.
    let east_path = Path::new(vec![[-MAP_EXTENT, -LANE_OFFSET], [MAP_EXTENT, -LANE_OFFSET]]);
    let west_path = Path::new(vec![[MAP_EXTENT, LANE_OFFSET], [-MAP_EXTENT, LANE_OFFSET]]);
    let paths = vec![east_path, west_path];

    let east_count = if n_vehicles == 1 {
        1
    } else {
        rng.gen_range(1..n_vehicles)
    };
    let mut agents: Vec<SimAgent> = Vec::with_capacity(n_vehicles);
    for (path_idx, count, front_x) in [
        (0usize, east_count, rng.gen_range(5.0..25.0)),
        (1usize, n_vehicles - east_count, rng.gen_range(-25.0..-5.0)),
    ] {
        if count == 0 {
            continue;
        }
        let speed = rng.gen_range(5.0..10.0);
        let profile = if rng.gen_bool(0.65) {
            SpeedProfile {
                brake_frame: Some(rng.gen_range(4..35)),
                decel: rng.gen_range(1.0..2.0),
                target: rng.gen_range(0.0..0.5 * speed),
            }
        } else {
            SpeedProfile { brake_frame: None, decel: 0.0, target: 0.0 }
        };
        // Leader at the chain front, followers at equilibrium-ish gaps.
        let mut s_front = if path_idx == 0 { MAP_EXTENT + front_x } else { MAP_EXTENT - front_x };
        for k in 0..count {
            let length = rng.gen_range(4.0..5.2);
            let width = rng.gen_range(1.7..2.1);
            let control = if k == 0 {
                Control::Profile(profile)
            } else {
                Control::Follow { ahead: agents.len() - 1 }
            };
            if k > 0 {
                let gap = idm_equilibrium_gap(idm, speed).expect("speed below desired")
                    * rng.gen_range(1.0..1.3);
                s_front -= gap + 0.5 * (length + agents.last().unwrap().length);
            }
            agents.push(SimAgent { length, width, path_idx, s: s_front, speed, control });
        }
    }

    let map = vec![
        MapElement {
            semantic: "road_polygon".into(),
            points: vec![
                [-MAP_EXTENT, -ROAD_HALF_WIDTH],
                [MAP_EXTENT, -ROAD_HALF_WIDTH],
                [MAP_EXTENT, ROAD_HALF_WIDTH],
                [-MAP_EXTENT, ROAD_HALF_WIDTH],
            ],
            filled: true,
        },
        MapElement {
            semantic: "lane_centerline".into(),
            points: vec![[-MAP_EXTENT, -LANE_OFFSET], [MAP_EXTENT, -LANE_OFFSET]],
            filled: false,
        },
        MapElement {
            semantic: "lane_centerline".into(),
            points: vec![[-MAP_EXTENT, LANE_OFFSET], [MAP_EXTENT, LANE_OFFSET]],
            filled: false,
        },
    ];
    BuiltWorld { world: SimWorld { paths, agents }, map }
}

fn build_intersection(n_vehicles: usize, rng: &mut ChaCha8Rng, idm: &IdmParams) -> BuiltWorld {
    // Choose arms: the first four vehicles take distinct (shuffled) arms,
    // extras queue on random arms.
    let mut arm_order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        arm_order.swap(i, rng.gen_range(0..=i));
    }
    let mut paths: Vec<Path> = Vec::new();
    let mut path_ids: Vec<(usize, Maneuver)> = Vec::new();
    let mut agents: Vec<SimAgent> = Vec::new();
    // Per arm: the last spawned vehicle and its rear position (distance to
    // the stop line grows down the queue).
    let mut arm_tail: [Option<(usize, f64)>; 4] = [None; 4];

    for k in 0..n_vehicles {
        let arm = if k < 4 { arm_order[k] } else { arm_order[rng.gen_range(0..4)] };
        let roll: f64 = rng.gen();
        let maneuver = if roll < 0.5 {
            Maneuver::Straight
        } else if roll < 0.75 {
            Maneuver::Right
        } else {
            Maneuver::Left
        };
        let path_idx = match path_ids.iter().position(|&(a, m)| a == arm && m == maneuver) {
            Some(i) => i,
            None => {
                paths.push(junction_path(arm, maneuver));
                path_ids.push((arm, maneuver));
                paths.len() - 1
            }
        };
        let (entry_s, exit_s) =
            paths[path_idx].zone_window(ZONE_HALF).expect("every junction path crosses the zone");
        let stop_s = entry_s - STOP_MARGIN;
        let length = rng.gen_range(4.0..5.2);
        let width = rng.gen_range(1.7..2.1);
        // Distance from the front bumper back to the stop line.
        let (ahead, dist_to_stop) = match arm_tail[arm] {
            None => (None, rng.gen_range(6.0..22.0)),
            Some((lead_idx, lead_dist)) => {
                let lead = &agents[lead_idx];
                let gap = idm_equilibrium_gap(idm, 4.0).expect("below desired speed")
                    * rng.gen_range(0.8..1.2);
                let same_path = path_ids[lead.path_idx] == path_ids[path_idx];
                (
                    Some(JunctionLead { index: lead_idx, same_path }),
                    lead_dist + 0.5 * (lead.length + length) + gap,
                )
            }
        };
        arm_tail[arm] = Some((agents.len(), dist_to_stop));
        let s = stop_s - dist_to_stop - 0.5 * length;
        let speed_cap = (2.0 * 2.0 * (dist_to_stop - 1.0).max(1.0)).sqrt();
        let speed = rng.gen_range(3.0..7.0f64).min(speed_cap);
        agents.push(SimAgent {
            length,
            width,
            path_idx,
            s,
            speed,
            control: Control::Junction { ahead, priority: 0, stop_s, entry_s, exit_s },
        });
    }

    // Priority: across arms by estimated arrival at the stop line; within
    // an arm strictly by queue position (a vehicle can never outrank the
    // one physically ahead of it).
    let mut order: Vec<usize> = (0..agents.len()).collect();
    let eta = |a: &SimAgent| -> f64 {
        let stop_s = match &a.control {
            Control::Junction { stop_s, .. } => *stop_s,
            _ => unreachable!(),
        };
        (stop_s - a.s).max(0.0) / a.speed.max(0.5)
    };
    order.sort_by(|&i, &j| eta(&agents[i]).partial_cmp(&eta(&agents[j])).unwrap());
    // Stable fix-up: reassign each arm's slots in physical order.
    let arm_of = |a: &SimAgent, ids: &[(usize, Maneuver)]| ids[a.path_idx].0;
    for arm in 0..4 {
        let slots: Vec<usize> =
            (0..order.len()).filter(|&pos| arm_of(&agents[order[pos]], &path_ids) == arm).collect();
        let mut members: Vec<usize> =
            slots.iter().map(|&pos| order[pos]).collect();
        members.sort_by(|&i, &j| {
            let si = agents[i].s;
            let sj = agents[j].s;
            sj.partial_cmp(&si).unwrap()
        });
        for (slot, member) in slots.into_iter().zip(members) {
            order[slot] = member;
        }
    }
    for (rank, &idx) in order.iter().enumerate() {
        if let Control::Junction { priority, .. } = &mut agents[idx].control {
            *priority = rank;
        }
    }

    let mut map = vec![
        MapElement {
            semantic: "road_polygon".into(),
            points: vec![
                [-MAP_EXTENT, -ROAD_HALF_WIDTH],
                [MAP_EXTENT, -ROAD_HALF_WIDTH],
                [MAP_EXTENT, ROAD_HALF_WIDTH],
                [-MAP_EXTENT, ROAD_HALF_WIDTH],
            ],
            filled: true,
        },
        MapElement {
            semantic: "road_polygon".into(),
            points: vec![
                [-ROAD_HALF_WIDTH, -MAP_EXTENT],
                [ROAD_HALF_WIDTH, -MAP_EXTENT],
                [ROAD_HALF_WIDTH, MAP_EXTENT],
                [-ROAD_HALF_WIDTH, MAP_EXTENT],
            ],
            filled: true,
        },
        MapElement {
            semantic: "intersection_polygon".into(),
            points: vec![
                [-ZONE_HALF, -ZONE_HALF],
                [ZONE_HALF, -ZONE_HALF],
                [ZONE_HALF, ZONE_HALF],
                [-ZONE_HALF, ZONE_HALF],
            ],
            filled: true,
        },
    ];
    for (a, b) in [
        ([-MAP_EXTENT, -LANE_OFFSET], [MAP_EXTENT, -LANE_OFFSET]),
        ([-MAP_EXTENT, LANE_OFFSET], [MAP_EXTENT, LANE_OFFSET]),
        ([-LANE_OFFSET, -MAP_EXTENT], [-LANE_OFFSET, MAP_EXTENT]),
        ([LANE_OFFSET, -MAP_EXTENT], [LANE_OFFSET, MAP_EXTENT]),
    ] {
        map.push(MapElement {
            semantic: "lane_centerline".into(),
            points: vec![a, b],
            filled: false,
        });
    }
    BuiltWorld { world: SimWorld { paths, agents }, map }
}

/// Any pair of ground-truth boxes overlapping at any frame?
fn tracks_collide(dims: &[(f64, f64)], tracks: &[Vec<TrackPoint>]) -> bool {
    for frame in 0..TRACK_FRAMES {
        for i in 0..tracks.len() {
            let pi = tracks[i][frame].pose;
            let bi = OrientedBox::new(pi.x, pi.y, dims[i].0, dims[i].1, pi.theta);
            for j in i + 1..tracks.len() {
                let pj = tracks[j][frame].pose;
                let bj = OrientedBox::new(pj.x, pj.y, dims[j].0, dims[j].1, pj.theta);
                if box_iou(&bi, &bj) > 0.0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Generate one scenario. Deterministic per (config, seed); retries with a
/// perturbed stream when the non-collision invariant fails.
pub fn gen_with(config: &GenConfig, seed: u64) -> Result<Scenario> {
    if config.n_agents == 0 {
        return Err(Error::domain("gen_with", "at least one non-ego agent required"));
    }
    if config.lidar.sweeps > WARMUP_FRAMES + 1 {
        return Err(Error::domain(
            "gen_with",
            format!(
                "{} sweeps exceed the {} available frames",
                config.lidar.sweeps,
                WARMUP_FRAMES + 1
            ),
        ));
    }
    let idm = IdmParams::default();
    for attempt in 0..config.retry_budget.max(1) as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(attempt.wrapping_add(1)),
        );
        let n_vehicles = config.n_agents + 1;
        let kind = match config.kind {
            ScenarioKind::Mixed => {
                if rng.gen_bool(0.5) {
                    ScenarioKind::Following
                } else {
                    ScenarioKind::Intersection
                }
            }
            concrete => concrete,
        };
        let built = match kind {
            ScenarioKind::Following => build_following(n_vehicles, &mut rng, &idm),
            ScenarioKind::Intersection => build_intersection(n_vehicles, &mut rng, &idm),
            ScenarioKind::Mixed => unreachable!("resolved above"),
        };
        let mut world = built.world;
        let dims: Vec<(f64, f64)> = world.agents.iter().map(|a| (a.length, a.width)).collect();
        let tracks = world.run(&idm);
        if tracks_collide(&dims, &tracks) {
            continue;
        }

        // Designate the ego and re-express everything in its current frame.
        let ego_idx = rng.gen_range(0..n_vehicles);
        let ego_pose = tracks[ego_idx][CURRENT_FRAME].pose;
        let to_ego = |track: &[TrackPoint]| -> Vec<TrackPoint> {
            track
                .iter()
                .map(|tp| TrackPoint { pose: se2_relative(&ego_pose, &tp.pose), speed: tp.speed })
                .collect()
        };
        let ego = Agent {
            id: 0,
            length: dims[ego_idx].0,
            width: dims[ego_idx].1,
            track: to_ego(&tracks[ego_idx]),
        };
        let mut agents = Vec::with_capacity(config.n_agents);
        let mut next_id = 1;
        for (i, track) in tracks.iter().enumerate() {
            if i == ego_idx {
                continue;
            }
            agents.push(Agent {
                id: next_id,
                length: dims[i].0,
                width: dims[i].1,
                track: to_ego(track),
            });
            next_id += 1;
        }
        let ego_inv = SE2Transform::from_pose(&ego_pose).invert();
        let map: Vec<MapElement> = built
            .map
            .iter()
            .map(|e| MapElement {
                semantic: e.semantic.clone(),
                points: e.points.iter().map(|&p| ego_inv.apply(p)).collect(),
                filled: e.filled,
            })
            .collect();

        let sweep_seed = seed ^ 0x5EED_11DAu64 ^ attempt.rotate_left(17);
        let sweep_set = simulate_lidar(&ego, &agents, &config.lidar, sweep_seed)?;
        let labels = build_labels(&agents, &sweep_set);
        return Ok(Scenario {
            schema: io::SCHEMA_VERSION.to_string(),
            seed,
            kind,
            ego,
            agents,
            map,
            sweeps: sweep_set.points,
            labels,
        });
    }
    Err(Error::Generation(format!(
        "could not satisfy the non-collision invariant within {} attempts (seed {seed})",
        config.retry_budget.max(1)
    )))
}

/// Labels: non-ego vehicles passing the sensor visibility rule, with poses
/// sampled on the forecast grid.
fn build_labels(agents: &[Agent], sweeps: &SweepSet) -> Vec<SceneLabel> {
    let last = sweeps.hit_agents.len().saturating_sub(1);
    agents
        .iter()
        .enumerate()
        .filter(|(idx, _)| {
            let current = sweeps.hit_agents[last].iter().filter(|&&a| a == *idx).count();
            let prev: usize = sweeps.hit_agents[..last]
                .iter()
                .map(|sweep| sweep.iter().filter(|&&a| a == *idx).count())
                .sum();
            is_visible_target(current, prev)
        })
        .map(|(_, agent)| SceneLabel {
            agent_id: agent.id,
            bbox: agent.current_bbox(),
            waypoints: (0..FORECAST_STEPS)
                .map(|k| agent.track[CURRENT_FRAME + k * LABEL_STRIDE].pose)
                .collect(),
        })
        .collect()
}
