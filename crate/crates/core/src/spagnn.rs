//! Relational motion forecaster over detected actors.
//!
//! Each detection anchors a rotated region of interest in a shared
//! bird's-eye-view feature grid. A small conv stack plus feature-wise max
//! pool turns the crop into the actor's hidden state, and an initial output
//! head emits a first trajectory distribution. A fully connected directed
//! graph over the actors then runs `K` rounds of message passing: every
//! edge re-expresses the sender's predicted trajectory distribution in the
//! receiver's local frame, an edge MLP turns the pair's states into a
//! message, incoming messages are aggregated feature-wise by max, a GRU
//! folds the aggregate into the hidden state, and the output head re-emits
//! the trajectory distribution after every round.
//!
//! Trajectories are per-actor distributions over [`FORECAST_STEPS`]
//! waypoints half a second apart: a bivariate Gaussian over position and a
//! Von Mises distribution over heading, parameterized in the actor's local
//! frame (x forward along the detected heading). A world-frame view is
//! produced alongside for metrics and rendering.
//!
//! Ablation [`Variant`]s prune the message inputs (no graph at all, hidden
//! states only, plus box encodings in world or receiver-relative
//! coordinates, plus projected output states) so the contribution of each
//! ingredient can be measured.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::distributions::{channel, Gauss2, VonMisesDist, PARAMS_PER_STEP};
use crate::error::{Error, Result};
use crate::geometry::{se2_between, Pose2, SE2Transform, OrientedBox};
use crate::nn::{Conv2dLayer, GruCell, Mlp, MlpSpec, NdArray, ParamStore, Tape, Var};
use crate::raster::{rroi_taps, GroundGrid, RroiConfig};

/// Number of forecast waypoints, covering 0 s to 3 s inclusive.
pub const FORECAST_STEPS: usize = 7;
/// Seconds between consecutive forecast waypoints.
pub const FORECAST_DT: f64 = 0.5;
/// Output channels per actor: seven distribution parameters per waypoint.
pub const OUTPUT_COLS: usize = FORECAST_STEPS * PARAMS_PER_STEP;
/// Box encoding fed to the edge MLP: (x, y, sin heading, cos heading,
/// length, width).
pub const BOX_ENCODING_DIM: usize = 6;

/// The waypoint time grid in seconds: 0.0, 0.5, ..., 3.0.
pub fn forecast_times() -> [f64; FORECAST_STEPS] {
    let mut times = [0.0; FORECAST_STEPS];
    for (i, t) in times.iter_mut().enumerate() {
        *t = i as f64 * FORECAST_DT;
    }
    times
}

// ---------------------------------------------------------------------------
// Variants.
// ---------------------------------------------------------------------------

/// Ablation variants controlling what the edge MLP sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No graph: every actor keeps its initial per-actor prediction.
    MlpOnly,
    /// Messages from hidden states only.
    GnnPlain,
    /// Hidden states plus box encodings in world coordinates.
    GnnGlobalBox,
    /// Hidden states plus box encodings in the receiver's frame.
    GnnRelativeBox,
    /// Relative boxes plus the sender's output state projected into the
    /// receiver's frame — the complete model.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::MlpOnly,
        Variant::GnnPlain,
        Variant::GnnGlobalBox,
        Variant::GnnRelativeBox,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MlpOnly => "mlp-only",
            Variant::GnnPlain => "gnn-plain",
            Variant::GnnGlobalBox => "gnn-global-box",
            Variant::GnnRelativeBox => "gnn-relative-box",
            Variant::Full => "full",
        }
    }

    pub fn uses_graph(self) -> bool {
        !matches!(self, Variant::MlpOnly)
    }

    pub fn uses_boxes(self) -> bool {
        matches!(self, Variant::GnnGlobalBox | Variant::GnnRelativeBox | Variant::Full)
    }

    /// Box encodings expressed in the receiver's frame (vs. world frame).
    pub fn relative_boxes(self) -> bool {
        matches!(self, Variant::GnnRelativeBox | Variant::Full)
    }

    /// Sender output states projected into the receiver's frame are part of
    /// the message input.
    pub fn uses_projected_states(self) -> bool {
        matches!(self, Variant::Full)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::domain(
                    "Variant",
                    format!("unknown variant {s:?}; expected one of {}", names.join(", ")),
                )
            })
    }
}

// ---------------------------------------------------------------------------
// Configuration and parameters.
// ---------------------------------------------------------------------------

/// Forecaster hyper-parameters.
///
/// The hidden dimension is the last entry of `reducer_channels` (the conv
/// stack ends in the feature-wise max pool that produces the hidden state).
/// The message dimension is the last edge width and must match the GRU
/// input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpagnnConfig {
    pub variant: Variant,
    /// Channels of the feature grid the rotated RoI samples.
    pub in_channels: usize,
    pub rroi: RroiConfig,
    /// Conv stack applied to each RoI crop (3x3, stride 1, same padding);
    /// the last entry is the hidden dimension.
    pub reducer_channels: Vec<usize>,
    /// Hidden width of the 2-layer MLP emitting the initial output state.
    pub init_hidden: usize,
    /// Widths of the 3-layer edge MLP; the last is the message dimension.
    pub edge_widths: [usize; 3],
    /// Hidden width of the 2-layer MLP re-emitting the output state.
    pub output_hidden: usize,
    /// Message-passing rounds.
    pub k_steps: usize,
}

impl SpagnnConfig {
    /// Desk-scale default: hidden dim 64, edge widths (128, 128, 64),
    /// 16 m x 10 m RoI at 1 m/cell with 12 m ahead, three rounds.
    pub fn toy(in_channels: usize, variant: Variant) -> Self {
        SpagnnConfig {
            variant,
            in_channels,
            rroi: RroiConfig::toy(),
            reducer_channels: vec![32, 64],
            init_hidden: 128,
            edge_widths: [128, 128, 64],
            output_hidden: 128,
            k_steps: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rroi.validate()?;
        if self.in_channels == 0 || self.reducer_channels.is_empty() {
            return Err(Error::domain(
                "SpagnnConfig",
                "input channels and reducer stack must be non-empty",
            ));
        }
        if self.reducer_channels.iter().any(|&c| c == 0)
            || self.edge_widths.iter().any(|&w| w == 0)
            || self.init_hidden == 0
            || self.output_hidden == 0
        {
            return Err(Error::domain("SpagnnConfig", "all layer widths must be positive"));
        }
        Ok(())
    }

    /// Hidden-state dimension (feature-wise max over the last reducer
    /// conv's channels).
    pub fn hidden_dim(&self) -> usize {
        *self.reducer_channels.last().expect("validated non-empty")
    }

    /// Message dimension = GRU input width.
    pub fn message_dim(&self) -> usize {
        self.edge_widths[2]
    }

    /// Edge MLP input width for this variant. The concatenation order is
    /// frozen: sender hidden, receiver hidden, then (full variant) the
    /// sender's output state projected into the receiver's frame and the
    /// receiver's output state, then (box variants) the sender and receiver
    /// box encodings.
    pub fn edge_input_dim(&self) -> usize {
        let mut dim = 2 * self.hidden_dim();
        if self.variant.uses_projected_states() {
            dim += 2 * OUTPUT_COLS;
        }
        if self.variant.uses_boxes() {
            dim += 2 * BOX_ENCODING_DIM;
        }
        dim
    }
}

/// Learned components. The edge MLP, GRU, and per-round output head exist
/// only for graph variants; all components are shared across every
/// propagation round.
#[derive(Debug, Clone)]
pub struct SpagnnParams {
    config: SpagnnConfig,
    reducer: Vec<Conv2dLayer>,
    init_head: Mlp,
    edge: Option<Mlp>,
    update: Option<GruCell>,
    output: Option<Mlp>,
}

const REDUCER_PREFIX: &str = "forecaster.reduce";
const INIT_NAME: &str = "forecaster.init";
const EDGE_NAME: &str = "forecaster.edge";
const UPDATE_NAME: &str = "forecaster.update";
const OUTPUT_NAME: &str = "forecaster.output";

impl SpagnnParams {
    /// Register freshly initialized parameters in `store`.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: SpagnnConfig) -> Result<Self> {
        config.validate()?;
        let mut reducer = Vec::with_capacity(config.reducer_channels.len());
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.reducer_channels.iter().enumerate() {
            reducer.push(Conv2dLayer::new(
                store,
                rng,
                &format!("{REDUCER_PREFIX}{i}"),
                c_in,
                c_out,
                3,
                1,
                1,
            )?);
            c_in = c_out;
        }
        let d = config.hidden_dim();
        let init_head =
            Mlp::new(store, rng, INIT_NAME, MlpSpec::new(d, &[config.init_hidden, OUTPUT_COLS]))?;
        let (edge, update, output) = if config.variant.uses_graph() {
            let edge = Mlp::new(
                store,
                rng,
                EDGE_NAME,
                MlpSpec::new(config.edge_input_dim(), &config.edge_widths),
            )?;
            let update = GruCell::new(store, rng, UPDATE_NAME, config.message_dim(), d)?;
            let output = Mlp::new(
                store,
                rng,
                OUTPUT_NAME,
                MlpSpec::new(d, &[config.output_hidden, OUTPUT_COLS]),
            )?;
            (Some(edge), Some(update), Some(output))
        } else {
            (None, None, None)
        };
        Ok(SpagnnParams { config, reducer, init_head, edge, update, output })
    }

    /// Rebuild from a store that already holds the parameters (checkpoint
    /// load), validating shapes.
    pub fn from_store(store: &ParamStore, config: SpagnnConfig) -> Result<Self> {
        config.validate()?;
        let mut reducer = Vec::with_capacity(config.reducer_channels.len());
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.reducer_channels.iter().enumerate() {
            reducer.push(Conv2dLayer::from_store(
                store,
                &format!("{REDUCER_PREFIX}{i}"),
                c_in,
                c_out,
                3,
                1,
                1,
            )?);
            c_in = c_out;
        }
        let d = config.hidden_dim();
        let init_head =
            Mlp::from_store(store, INIT_NAME, MlpSpec::new(d, &[config.init_hidden, OUTPUT_COLS]))?;
        let (edge, update, output) = if config.variant.uses_graph() {
            let edge = Mlp::from_store(
                store,
                EDGE_NAME,
                MlpSpec::new(config.edge_input_dim(), &config.edge_widths),
            )?;
            let update = GruCell::from_store(store, UPDATE_NAME, config.message_dim(), d)?;
            let output = Mlp::from_store(
                store,
                OUTPUT_NAME,
                MlpSpec::new(d, &[config.output_hidden, OUTPUT_COLS]),
            )?;
            (Some(edge), Some(update), Some(output))
        } else {
            (None, None, None)
        };
        Ok(SpagnnParams { config, reducer, init_head, edge, update, output })
    }

    pub fn config(&self) -> &SpagnnConfig {
        &self.config
    }
}

// ---------------------------------------------------------------------------
// Graph.
// ---------------------------------------------------------------------------

/// One detected actor entering the interaction graph. Hidden and output
/// states live in batched `[N, dim]` tape arrays during propagation; this
/// struct carries the per-actor identity and geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorNode {
    /// Position of the detection in the input detection list.
    pub id: usize,
    /// Detected box: the actor's current pose and footprint.
    pub bbox: OrientedBox,
    pub score: f64,
    /// Ground-truth label index when the detection came from the oracle.
    pub source_label: Option<usize>,
}

impl ActorNode {
    pub fn from_detection(id: usize, det: &Detection) -> Self {
        ActorNode { id, bbox: det.bbox, score: det.score, source_label: det.source_label }
    }

    /// The actor's local frame: origin at the box center, x along heading.
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.bbox.center[0], self.bbox.center[1], self.bbox.heading)
    }
}

/// Fully connected directed interaction graph with cached pairwise frame
/// transforms. Edges enumerate all ordered pairs `(sender, receiver)`,
/// sender-major: `(0,1), (0,2), ..., (1,0), (1,2), ...`; `|edges| = N(N-1)`.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    pub nodes: Vec<ActorNode>,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// Per edge: the transform taking sender-local coordinates into the
    /// receiver's frame.
    pub transforms: Vec<SE2Transform>,
}

impl InteractionGraph {
    pub fn build(nodes: Vec<ActorNode>) -> Self {
        let n = nodes.len();
        let mut senders = Vec::with_capacity(n.saturating_sub(1) * n);
        let mut receivers = Vec::with_capacity(senders.capacity());
        let mut transforms = Vec::with_capacity(senders.capacity());
        for u in 0..n {
            for v in 0..n {
                if u == v {
                    continue;
                }
                senders.push(u);
                receivers.push(v);
                transforms.push(se2_between(&nodes[u].pose(), &nodes[v].pose()));
            }
        }
        InteractionGraph { nodes, senders, receivers, transforms }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }
}

/// Body-frame box encoding of `node`'s box as seen from `frame` (pass the
/// node's own pose to get the trivial self-encoding, world origin for the
/// world frame).
fn encode_box_in_frame(node: &ActorNode, frame: Option<&Pose2>) -> [f64; BOX_ENCODING_DIM] {
    let pose = node.pose();
    let rel = match frame {
        Some(f) => crate::geometry::se2_relative(f, &pose),
        None => pose,
    };
    [rel.x, rel.y, rel.theta.sin(), rel.theta.cos(), node.bbox.length, node.bbox.width]
}

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------

/// Batched per-actor states on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PropagationState {
    /// Hidden states `[N, hidden_dim]`.
    pub h: Var,
    /// Raw (unconstrained) output states `[N, OUTPUT_COLS]`.
    pub o_raw: Var,
    /// Constrained output states `[N, OUTPUT_COLS]`.
    pub o_con: Var,
}

/// One waypoint's predicted distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaypointDist {
    pub position: Gauss2,
    pub heading: VonMisesDist,
}

/// Decoded forecast for one actor, world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorForecast {
    pub node: ActorNode,
    /// [`FORECAST_STEPS`] waypoint distributions on the shared time grid.
    pub waypoints: Vec<WaypointDist>,
}

/// Forecaster output for one scene.
#[derive(Debug, Clone)]
pub struct ForecastOutput {
    pub graph: InteractionGraph,
    /// Constrained local-frame outputs after every round; index 0 is the
    /// initial state, the last entry the final prediction. Each
    /// `[N, OUTPUT_COLS]`.
    pub steps: Vec<Var>,
    /// Final constrained local-frame output (same node as `steps.last()`).
    pub local: Var,
    /// Final output re-expressed in the world frame, `[N, OUTPUT_COLS]`.
    pub world: Var,
    /// Detached world-frame view of the final prediction.
    pub actors: Vec<ActorForecast>,
}

/// Per-actor state initialization: rotated-RoI crop of the feature grid,
/// conv reducer, feature-wise max pool into the hidden state, then the
/// initial output head. An empty detection list yields an empty (zero-row)
/// state, which every downstream op handles.
pub fn init_states(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SpagnnParams,
    features: Var,
    grid: &GroundGrid,
    detections: &[Detection],
) -> Result<(InteractionGraph, PropagationState)> {
    let config = &params.config;
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 3
        || shape[0] != config.in_channels
        || shape[1] != grid.len_cells()
        || shape[2] != grid.wid_cells()
    {
        return Err(Error::domain(
            "init_states",
            format!(
                "expected features [{}, {}, {}], got {:?}",
                config.in_channels,
                grid.len_cells(),
                grid.wid_cells(),
                shape
            ),
        ));
    }

    let (rows, cols) = (config.rroi.rows(), config.rroi.cols());
    let mut hidden_rows = Vec::with_capacity(detections.len());
    for det in detections {
        let taps = rroi_taps(grid, &det.bbox, &config.rroi)?;
        let mut crop = tape.bilinear_gather(features, taps, rows, cols);
        for conv in &params.reducer {
            crop = conv.forward(tape, store, crop);
            crop = tape.relu(crop);
        }
        hidden_rows.push(tape.global_max_pool(crop));
    }
    let h = if hidden_rows.is_empty() {
        tape.constant(NdArray::zeros(&[0, config.hidden_dim()]))
    } else {
        tape.stack_rows(&hidden_rows)
    };

    let nodes: Vec<ActorNode> =
        detections.iter().enumerate().map(|(i, d)| ActorNode::from_detection(i, d)).collect();
    let graph = InteractionGraph::build(nodes);
    let state = emit_output(tape, store, &params.init_head, h);
    Ok((graph, state))
}

/// Run one output head over hidden states and constrain the result.
fn emit_output(tape: &mut Tape, store: &ParamStore, head: &Mlp, h: Var) -> PropagationState {
    let o_raw = head.forward(tape, store, h);
    let o_con = tape.row_constrain(o_raw);
    PropagationState { h, o_raw, o_con }
}

/// All edge messages for one round, `[E, message_dim]`, computed from the
/// previous round's states (synchronous semantics). Input concatenation
/// order is frozen: sender hidden, receiver hidden, then for the full
/// variant the projected sender output state and the receiver output state,
/// then for box variants the sender and receiver box encodings.
fn step_messages(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SpagnnParams,
    graph: &InteractionGraph,
    state: &PropagationState,
    box_encodings: Option<(Var, Var)>,
) -> Var {
    let edge = params.edge.as_ref().expect("graph variants carry an edge MLP");
    let h_u = tape.gather_rows(state.h, graph.senders.clone());
    let h_v = tape.gather_rows(state.h, graph.receivers.clone());
    let mut parts = vec![h_u, h_v];
    if params.config.variant.uses_projected_states() {
        let o_u = tape.gather_rows(state.o_con, graph.senders.clone());
        let rots: Vec<f64> = graph.transforms.iter().map(|t| t.rot).collect();
        let trans: Vec<[f64; 2]> = graph.transforms.iter().map(|t| t.trans).collect();
        let projected = tape.row_transform(o_u, rots, trans);
        let o_v = tape.gather_rows(state.o_con, graph.receivers.clone());
        parts.push(projected);
        parts.push(o_v);
    }
    if let Some((enc_u, enc_v)) = box_encodings {
        parts.push(enc_u);
        parts.push(enc_v);
    }
    let input = tape.concat_cols(&parts);
    edge.forward(tape, store, input)
}

/// Sender/receiver box encodings for every edge, as tape constants
/// (detections are inputs, not learned quantities). `None` for variants
/// that do not feed boxes.
fn edge_box_encodings(
    tape: &mut Tape,
    params: &SpagnnParams,
    graph: &InteractionGraph,
) -> Option<(Var, Var)> {
    if !params.config.variant.uses_boxes() {
        return None;
    }
    let relative = params.config.variant.relative_boxes();
    let e = graph.num_edges();
    let mut enc_u = NdArray::zeros(&[e, BOX_ENCODING_DIM]);
    let mut enc_v = NdArray::zeros(&[e, BOX_ENCODING_DIM]);
    for i in 0..e {
        let (u, v) = (graph.senders[i], graph.receivers[i]);
        let frame = relative.then(|| graph.nodes[v].pose());
        let eu = encode_box_in_frame(&graph.nodes[u], frame.as_ref());
        let ev = encode_box_in_frame(&graph.nodes[v], frame.as_ref());
        for c in 0..BOX_ENCODING_DIM {
            enc_u.set2(i, c, eu[c]);
            enc_v.set2(i, c, ev[c]);
        }
    }
    Some((tape.constant(enc_u), tape.constant(enc_v)))
}

/// Message-passing rounds from an initialized state to the final forecast.
///
/// Per round, all messages are computed from the previous round's states,
/// aggregated per receiver by feature-wise max (absent neighborhoods
/// aggregate to zeros), folded into the hidden state by the GRU, and the
/// output head re-emits a constrained output state. `k_steps = 0` — and the
/// graph-free variant at any `k` — returns the initial states untouched.
pub fn propagate(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SpagnnParams,
    graph: InteractionGraph,
    init: PropagationState,
) -> Result<ForecastOutput> {
    let config = &params.config;
    let rounds = if config.variant.uses_graph() { config.k_steps } else { 0 };
    let mut steps = Vec::with_capacity(rounds + 1);
    steps.push(init.o_con);
    let mut state = init;
    if rounds > 0 {
        let update = params.update.as_ref().expect("graph variants carry a GRU");
        let output = params.output.as_ref().expect("graph variants carry an output head");
        let box_encodings = edge_box_encodings(tape, params, &graph);
        for _ in 0..rounds {
            let messages = step_messages(tape, store, params, &graph, &state, box_encodings);
            let aggregated =
                tape.scatter_max(messages, &graph.receivers, graph.num_nodes());
            let h_next = update.forward(tape, store, aggregated, state.h);
            state = emit_output(tape, store, output, h_next);
            steps.push(state.o_con);
        }
    }

    let local = *steps.last().expect("at least the initial step");
    let rots: Vec<f64> = graph.nodes.iter().map(|n| n.bbox.heading).collect();
    let trans: Vec<[f64; 2]> = graph.nodes.iter().map(|n| n.bbox.center).collect();
    let world = tape.row_transform(local, rots, trans);
    let actors = decode_actors(tape.value(world), &graph.nodes);
    Ok(ForecastOutput { graph, steps, local, world, actors })
}

/// End-to-end forecaster: state initialization from the feature grid, graph
/// construction with cached pairwise transforms, and propagation.
/// Detections must lie inside `grid` (see [`filter_in_roi`]).
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SpagnnParams,
    features: Var,
    grid: &GroundGrid,
    detections: &[Detection],
) -> Result<ForecastOutput> {
    let (graph, state) = init_states(tape, store, params, features, grid, detections)?;
    propagate(tape, store, params, graph, state)
}

/// Propagation from externally supplied hidden states `[N, hidden_dim]`,
/// bypassing the raster pipeline. This is the harness for frame-invariance
/// experiments: grid sampling is inherently tied to the grid axes, so
/// rigid-motion properties of the relational stage are tested by holding
/// the hidden states fixed while moving every actor.
pub fn forward_from_hidden(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SpagnnParams,
    detections: &[Detection],
    h: Var,
) -> Result<ForecastOutput> {
    let shape = tape.value(h).shape().to_vec();
    if shape.len() != 2
        || shape[0] != detections.len()
        || shape[1] != params.config.hidden_dim()
    {
        return Err(Error::domain(
            "forward_from_hidden",
            format!(
                "expected hidden states [{}, {}], got {:?}",
                detections.len(),
                params.config.hidden_dim(),
                shape
            ),
        ));
    }
    let nodes: Vec<ActorNode> =
        detections.iter().enumerate().map(|(i, d)| ActorNode::from_detection(i, d)).collect();
    let graph = InteractionGraph::build(nodes);
    let state = emit_output(tape, store, &params.init_head, h);
    propagate(tape, store, params, graph, state)
}

/// Keep only detections whose box center lies inside the grid (the
/// precondition of the rotated-RoI crop).
pub fn filter_in_roi(detections: &[Detection], grid: &GroundGrid) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| grid.cell_index(d.bbox.center[0], d.bbox.center[1]).is_some())
        .copied()
        .collect()
}

/// Decode a `[N, OUTPUT_COLS]` constrained parameter matrix into per-actor
/// waypoint distributions.
fn decode_actors(world: &NdArray, nodes: &[ActorNode]) -> Vec<ActorForecast> {
    let mut out = Vec::with_capacity(nodes.len());
    for (r, node) in nodes.iter().enumerate() {
        let row = &world.data()[r * OUTPUT_COLS..(r + 1) * OUTPUT_COLS];
        let mut waypoints = Vec::with_capacity(FORECAST_STEPS);
        for t in 0..FORECAST_STEPS {
            let block = &row[t * PARAMS_PER_STEP..(t + 1) * PARAMS_PER_STEP];
            waypoints.push(WaypointDist {
                position: Gauss2 {
                    mean: [block[channel::MU_X], block[channel::MU_Y]],
                    sigma: [block[channel::SIGMA_X], block[channel::SIGMA_Y]],
                    rho: block[channel::RHO],
                },
                heading: VonMisesDist { eta: block[channel::ETA], kappa: block[channel::KAPPA] },
            });
        }
        out.push(ActorForecast { node: *node, waypoints });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;
    use crate::distributions::SIGMA_FLOOR;
    use crate::geometry::{se2_embed, wrap_angle};
    use crate::nn::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    /// Small everything: 2-channel features on an 8 m x 8 m grid, 4 x 2 m
    /// RoI, hidden dim 6.
    fn tiny_config(variant: Variant) -> SpagnnConfig {
        SpagnnConfig {
            variant,
            in_channels: 2,
            rroi: RroiConfig { length: 4.0, width: 2.0, front: 3.0, resolution: 1.0 },
            reducer_channels: vec![4, 6],
            init_hidden: 6,
            edge_widths: [8, 8, 6],
            output_hidden: 6,
            k_steps: 2,
        }
    }

    fn tiny_grid() -> GroundGrid {
        GroundGrid::new(8.0, 8.0, 1.0).unwrap()
    }

    fn tiny_scene() -> Vec<Detection> {
        vec![
            Detection::new(0.9, OrientedBox::new(-1.5, -1.0, 3.0, 1.5, 0.3)),
            Detection::new(0.8, OrientedBox::new(1.5, 1.0, 3.0, 1.5, -0.4)),
        ]
    }

    fn build(
        seed: u64,
        variant: Variant,
    ) -> (ParamStore, SpagnnParams, NdArray) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = SpagnnParams::new(&mut store, &mut rng, tiny_config(variant)).unwrap();
        let features = NdArray::randn(&mut rng, &[2, 8, 8], 0.8);
        (store, params, features)
    }

    fn run_forward(
        store: &ParamStore,
        params: &SpagnnParams,
        features: &NdArray,
        detections: &[Detection],
    ) -> (Tape, ForecastOutput) {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = forward(&mut tape, store, params, f, &tiny_grid(), detections).unwrap();
        (tape, out)
    }

    #[test]
    fn edge_input_dims_match_variant() {
        let toy = |v| SpagnnConfig::toy(6, v).edge_input_dim();
        assert_eq!(toy(Variant::Full), 2 * 64 + 2 * OUTPUT_COLS + 2 * BOX_ENCODING_DIM); // 238
        assert_eq!(toy(Variant::GnnRelativeBox), 2 * 64 + 2 * BOX_ENCODING_DIM); // 140
        assert_eq!(toy(Variant::GnnGlobalBox), 140);
        assert_eq!(toy(Variant::GnnPlain), 128);
        assert_eq!(OUTPUT_COLS, 49);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn zero_parameters_emit_base_distribution() {
        let (mut store, params, features) = build(0, Variant::Full);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let (tape, out) = run_forward(&store, &params, &features, &tiny_scene());
        let local = tape.value(out.local);
        assert_eq!(local.shape(), [2, OUTPUT_COLS]);
        for r in 0..2 {
            for t in 0..FORECAST_STEPS {
                let base = r * OUTPUT_COLS + t * PARAMS_PER_STEP;
                let b = &local.data()[base..base + PARAMS_PER_STEP];
                assert_eq!(b[channel::MU_X], 0.0);
                assert_eq!(b[channel::MU_Y], 0.0);
                assert!((b[channel::SIGMA_X] - (LN_2 + SIGMA_FLOOR)).abs() < 1e-15);
                assert!((b[channel::SIGMA_Y] - (LN_2 + SIGMA_FLOOR)).abs() < 1e-15);
                assert_eq!(b[channel::RHO], 0.0);
                assert_eq!(b[channel::ETA], 0.0);
                assert!((b[channel::KAPPA] - LN_2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn node_and_edge_counts() {
        let (store, params, features) = build(1, Variant::Full);
        let mut scene = tiny_scene();
        scene.push(Detection::new(0.7, OrientedBox::new(0.0, 2.5, 3.0, 1.5, 1.0)));
        let (tape, out) = run_forward(&store, &params, &features, &scene);
        assert_eq!(out.graph.num_nodes(), 3);
        assert_eq!(out.graph.num_edges(), 6);
        assert_eq!(out.steps.len(), params.config().k_steps + 1);
        assert_eq!(tape.value(out.local).shape(), [3, OUTPUT_COLS]);
        assert_eq!(out.actors.len(), 3);
        for (i, a) in out.actors.iter().enumerate() {
            assert_eq!(a.node.id, i);
            assert_eq!(a.waypoints.len(), FORECAST_STEPS);
        }
    }

    #[test]
    fn empty_detections_are_valid() {
        let (store, params, features) = build(2, Variant::Full);
        let (tape, out) = run_forward(&store, &params, &features, &[]);
        assert_eq!(out.graph.num_nodes(), 0);
        assert_eq!(tape.value(out.local).shape(), [0, OUTPUT_COLS]);
        assert!(out.actors.is_empty());
    }

    #[test]
    fn single_actor_is_well_defined() {
        let (store, params, features) = build(3, Variant::Full);
        let scene = vec![tiny_scene()[0]];
        let (tape, out) = run_forward(&store, &params, &features, &scene);
        assert_eq!(out.graph.num_edges(), 0);
        // Hidden state still updates from the zero-fill aggregate, and the
        // output stays finite and constrained.
        assert_eq!(out.steps.len(), 3);
        for &step in &out.steps {
            assert!(tape.value(step).data().iter().all(|v| v.is_finite()));
        }
        // With no neighbors the three rounds must still differ from the
        // initial state (the GRU blends toward the zero message).
        let first = tape.value(out.steps[0]).data().to_vec();
        let last = tape.value(out.local).data();
        assert!(first.iter().zip(last).any(|(a, b)| (a - b).abs() > 1e-12));
    }

    #[test]
    fn k_zero_returns_initial_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mut config = tiny_config(Variant::Full);
        config.k_steps = 0;
        let params = SpagnnParams::new(&mut store, &mut rng, config).unwrap();
        let features = NdArray::randn(&mut rng, &[2, 8, 8], 0.8);
        let (tape, out) = run_forward(&store, &params, &features, &tiny_scene());
        assert_eq!(out.steps.len(), 1);
        assert_eq!(tape.value(out.local).data(), tape.value(out.steps[0]).data());
    }

    #[test]
    fn mlp_only_ignores_propagation_rounds() {
        // Same seed: identical reducer and init head; graph components of
        // the full model must not change the graph-free variant's output.
        let (store_a, params_a, features) = build(5, Variant::MlpOnly);
        let (tape_a, out_a) = run_forward(&store_a, &params_a, &features, &tiny_scene());
        assert_eq!(out_a.steps.len(), 1, "no propagation rounds without a graph");

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store_b = ParamStore::new();
        let mut config = tiny_config(Variant::MlpOnly);
        config.k_steps = 7;
        let params_b = SpagnnParams::new(&mut store_b, &mut rng, config).unwrap();
        let features_b = NdArray::randn(&mut rng, &[2, 8, 8], 0.8);
        assert_eq!(features.data(), features_b.data(), "same seed, same stream");
        let (tape_b, out_b) = run_forward(&store_b, &params_b, &features_b, &tiny_scene());
        assert_eq!(tape_a.value(out_a.local).data(), tape_b.value(out_b.local).data());
    }

    #[test]
    fn zero_edge_weights_give_zero_messages() {
        let (mut store, params, features) = build(6, Variant::Full);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with(EDGE_NAME) {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let f = tape.constant(features);
        let (graph, state) =
            init_states(&mut tape, &store, &params, f, &tiny_grid(), &tiny_scene()).unwrap();
        let encodings = edge_box_encodings(&mut tape, &params, &graph);
        let messages = step_messages(&mut tape, &store, &params, &graph, &state, encodings);
        assert_eq!(tape.value(messages).shape(), [2, params.config().message_dim()]);
        assert!(tape.value(messages).data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn identical_poses_give_identity_transform() {
        let d = Detection::new(1.0, OrientedBox::new(1.0, -2.0, 3.0, 1.5, 0.7));
        let nodes = vec![ActorNode::from_detection(0, &d), ActorNode::from_detection(1, &d)];
        let graph = InteractionGraph::build(nodes);
        for t in &graph.transforms {
            assert_eq!(t.rot, 0.0);
            assert_eq!(t.trans, [0.0, 0.0]);
        }
        // Projecting an output state through the identity is (numerically)
        // a no-op.
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = tape.constant(NdArray::randn(&mut rng, &[2, OUTPUT_COLS], 0.5));
        let con = tape.row_constrain(raw);
        let moved = tape.row_transform(con, vec![0.0; 2], vec![[0.0, 0.0]; 2]);
        let a = tape.value(con).data();
        let b = tape.value(moved).data();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Apply a rigid motion to a detection (box center and heading).
    fn move_detection(d: &Detection, g: &SE2Transform) -> Detection {
        let pose = g.apply_pose(&Pose2::new(d.bbox.center[0], d.bbox.center[1], d.bbox.heading));
        Detection {
            score: d.score,
            bbox: OrientedBox::new(pose.x, pose.y, d.bbox.length, d.bbox.width, pose.theta),
            source_label: d.source_label,
        }
    }

    fn rigid_harness(
        variant: Variant,
        seed: u64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<ActorForecast>, Vec<ActorForecast>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = SpagnnParams::new(&mut store, &mut rng, tiny_config(variant)).unwrap();
        let h = NdArray::randn(&mut rng, &[3, 6], 0.8);
        let scene = vec![
            Detection::new(0.9, OrientedBox::new(-4.0, -2.0, 3.0, 1.5, 0.3)),
            Detection::new(0.8, OrientedBox::new(3.0, 1.0, 3.0, 1.5, -0.4)),
            Detection::new(0.7, OrientedBox::new(0.0, 4.0, 3.0, 1.5, 1.2)),
        ];
        let g = SE2Transform::new(0.9, [13.0, -7.0]);
        let moved: Vec<Detection> = scene.iter().map(|d| move_detection(d, &g)).collect();

        let mut tape_a = Tape::new();
        let h_a = tape_a.constant(h.clone());
        let out_a = forward_from_hidden(&mut tape_a, &store, &params, &scene, h_a).unwrap();
        let mut tape_b = Tape::new();
        let h_b = tape_b.constant(h);
        let out_b = forward_from_hidden(&mut tape_b, &store, &params, &moved, h_b).unwrap();
        (
            tape_a.value(out_a.local).data().to_vec(),
            tape_b.value(out_b.local).data().to_vec(),
            tape_a.value(out_a.world).data().to_vec(),
            tape_b.value(out_b.world).data().to_vec(),
            out_a.actors,
            out_b.actors,
        )
    }

    #[test]
    fn full_variant_is_rigidly_equivariant() {
        let (local_a, local_b, _, _, actors_a, actors_b) = rigid_harness(Variant::Full, 8);
        // Local-frame outputs are invariant.
        let max_local = local_a
            .iter()
            .zip(&local_b)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_local < 1e-9, "local outputs moved by {max_local}");

        // World-frame means transform with the scene; spreads are carried
        // along (sigma axes re-expressed, kappa untouched); headings shift
        // by the rotation.
        let g = SE2Transform::new(0.9, [13.0, -7.0]);
        for (fa, fb) in actors_a.iter().zip(&actors_b) {
            for (wa, wb) in fa.waypoints.iter().zip(&fb.waypoints) {
                let mapped = g.apply(wa.position.mean);
                assert!((mapped[0] - wb.position.mean[0]).abs() < 1e-6);
                assert!((mapped[1] - wb.position.mean[1]).abs() < 1e-6);
                assert!((wa.heading.kappa - wb.heading.kappa).abs() < 1e-9);
                let eta_shift = wrap_angle(wb.heading.eta - wa.heading.eta - g.rot);
                assert!(eta_shift.abs() < 1e-6, "eta shifted by {eta_shift}");
                // The covariance rotates as a tensor: compare full matrices.
                let rot = SE2Transform::new(g.rot, [0.0, 0.0]);
                let ca = wa.position.covariance();
                let cb = wb.position.covariance();
                let (s, c) = rot.rot.sin_cos();
                // R C R^T with R = [[c, -s], [s, c]].
                let r00 = c * ca[0][0] - s * ca[0][1];
                let r01 = c * ca[0][1] - s * ca[1][1];
                let r10 = s * ca[0][0] + c * ca[0][1];
                let r11 = s * ca[0][1] + c * ca[1][1];
                let m00 = r00 * c - r01 * s;
                let m01 = r00 * s + r01 * c;
                let m11 = r10 * s + r11 * c;
                assert!((m00 - cb[0][0]).abs() < 1e-6);
                assert!((m01 - cb[0][1]).abs() < 1e-6);
                assert!((m11 - cb[1][1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn relative_box_variant_is_rigidly_equivariant() {
        let (local_a, local_b, _, _, _, _) = rigid_harness(Variant::GnnRelativeBox, 9);
        let max_local = local_a
            .iter()
            .zip(&local_b)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_local < 1e-9);
    }

    #[test]
    fn global_box_variant_breaks_rigid_invariance() {
        let (local_a, local_b, _, _, _, _) = rigid_harness(Variant::GnnGlobalBox, 10);
        let max_local = local_a
            .iter()
            .zip(&local_b)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            max_local > 1e-6,
            "world-frame box encodings should react to a rigid scene motion"
        );
    }

    #[test]
    fn permutation_relabels_outputs_exactly() {
        let (store, params, features) = build(11, Variant::Full);
        let mut scene = tiny_scene();
        scene.push(Detection::new(0.7, OrientedBox::new(0.5, 2.8, 3.0, 1.5, 2.0)));
        scene.push(Detection::new(0.6, OrientedBox::new(-2.5, 1.8, 3.0, 1.5, -2.6)));
        let (tape_a, out_a) = run_forward(&store, &params, &features, &scene);

        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Detection> = perm.iter().map(|&i| scene[i]).collect();
        let (tape_b, out_b) = run_forward(&store, &params, &features, &permuted);

        let a = tape_a.value(out_a.world);
        let b = tape_b.value(out_b.world);
        for (new_row, &old_row) in perm.iter().enumerate() {
            let ra = &a.data()[old_row * OUTPUT_COLS..(old_row + 1) * OUTPUT_COLS];
            let rb = &b.data()[new_row * OUTPUT_COLS..(new_row + 1) * OUTPUT_COLS];
            for (x, y) in ra.iter().zip(rb) {
                assert!(
                    (x - y).abs() <= 1e-12,
                    "actor {old_row} moved to {new_row}: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn every_step_satisfies_distribution_constraints() {
        let (store, params, features) = build(12, Variant::Full);
        let (tape, out) = run_forward(&store, &params, &features, &tiny_scene());
        assert_eq!(out.steps.len(), 3);
        for &step in &out.steps {
            let value = tape.value(step);
            for r in 0..value.rows() {
                for t in 0..FORECAST_STEPS {
                    let base = r * OUTPUT_COLS + t * PARAMS_PER_STEP;
                    let b = &value.data()[base..base + PARAMS_PER_STEP];
                    assert!(b[channel::SIGMA_X] > 0.0 && b[channel::SIGMA_Y] > 0.0);
                    assert!(b[channel::RHO].abs() < 1.0);
                    assert!(b[channel::ETA].abs() <= std::f64::consts::PI);
                    assert!(b[channel::KAPPA] > 0.0);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let (store_a, params_a, features_a) = build(13, Variant::Full);
        let (store_b, params_b, features_b) = build(13, Variant::Full);
        let (tape_a, out_a) = run_forward(&store_a, &params_a, &features_a, &tiny_scene());
        let (tape_b, out_b) = run_forward(&store_b, &params_b, &features_b, &tiny_scene());
        assert_eq!(tape_a.value(out_a.world).data(), tape_b.value(out_b.world).data());
    }

    #[test]
    fn from_store_reproduces_forward() {
        let (store, params, features) = build(14, Variant::Full);
        let rebuilt = SpagnnParams::from_store(&store, tiny_config(Variant::Full)).unwrap();
        let (tape_a, out_a) = run_forward(&store, &params, &features, &tiny_scene());
        let (tape_b, out_b) = run_forward(&store, &rebuilt, &features, &tiny_scene());
        assert_eq!(tape_a.value(out_a.world).data(), tape_b.value(out_b.world).data());
    }

    #[test]
    fn world_embedding_matches_per_actor_transform() {
        let (store, params, features) = build(15, Variant::Full);
        let scene = tiny_scene();
        let (tape, out) = run_forward(&store, &params, &features, &scene);
        let local = tape.value(out.local);
        for (r, actor) in out.actors.iter().enumerate() {
            let pose = actor.node.pose();
            for t in 0..FORECAST_STEPS {
                let base = r * OUTPUT_COLS + t * PARAMS_PER_STEP;
                let b = &local.data()[base..base + PARAMS_PER_STEP];
                let world_mean = se2_embed(
                    &pose,
                    &Pose2::new(b[channel::MU_X], b[channel::MU_Y], b[channel::ETA]),
                );
                let wp = &actor.waypoints[t];
                assert!((world_mean.x - wp.position.mean[0]).abs() < 1e-9);
                assert!((world_mean.y - wp.position.mean[1]).abs() < 1e-9);
                assert!(wrap_angle(world_mean.theta - wp.heading.eta).abs() < 1e-9);
            }
        }
    }

    /// Finite differences through the whole path: RoI crop, reducer convs,
    /// max pool, init head, projected states, edge MLP, scatter-max, GRU,
    /// output head, constraint map, and the trajectory likelihood.
    #[test]
    fn gradient_check_through_full_forecaster() {
        let grid = tiny_grid();
        let scene = tiny_scene();
        let targets: Vec<crate::nn::WaypointTargets> = (0..scene.len())
            .map(|i| {
                (0..FORECAST_STEPS)
                    .map(|t| {
                        let s = 0.3 * t as f64;
                        [s + 0.2 * i as f64, 0.1 * s, 0.05 * s]
                    })
                    .collect()
            })
            .collect();
        let mut viable = 0;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let params =
                SpagnnParams::new(&mut store, &mut rng, tiny_config(Variant::Full)).unwrap();
            let features = NdArray::randn(&mut rng, &[2, 8, 8], 0.8);
            store.add("features", features).unwrap();
            let report = match check_gradients(&mut store, |tape, store| {
                let f = tape.param(store, store.id("features").unwrap());
                let out = forward(tape, store, &params, f, &grid, &scene).unwrap();
                let rows: Vec<usize> = (0..scene.len()).collect();
                tape.trajectory_nll(out.local, rows, targets.clone()).0
            }) {
                Ok(r) => r,
                Err(_) => continue,
            };
            assert!(
                report.max_rel_err < 1e-6,
                "seed {seed}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
            viable += 1;
            if viable >= 10 {
                return;
            }
        }
        panic!("fewer than 10 viable seeds for the forecaster gradient check");
    }

    #[test]
    fn filter_in_roi_drops_outside_centers() {
        let grid = tiny_grid();
        let inside = Detection::new(0.9, OrientedBox::new(1.0, 1.0, 3.0, 1.5, 0.0));
        let outside = Detection::new(0.8, OrientedBox::new(9.0, 0.0, 3.0, 1.5, 0.0));
        let kept = filter_in_roi(&[inside, outside], &grid);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox.center, [1.0, 1.0]);
    }
}
