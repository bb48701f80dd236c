//! Social-pooling encoder-decoder behind the CSP and FC-CSP policies.
//!
//! Tracks are embedded step by step (relative position and velocity, both
//! scaled), run through an LSTM encoder, and the final hidden states of the
//! neighbors are scattered into the social grid. A convolution, leaky ReLU
//! and max pool reduce the grid to a context vector. The decoder LSTM is fed
//! the target's dynamics embedding, the context, and a one-hot maneuver, and
//! emits per-step velocity offsets from the target's constant-velocity
//! estimate (integrated into positions) and Gaussian spreads. The future-conditional variant adds a
//! second, identically shaped pooling block over the neighbors' predicted
//! futures whose context enters the maneuver head and the decoder through
//! separate weight blocks (`maneuver.w_fut`, `dec.w_fut`).
//!
//! All network coordinates are relative to the target's last observed position.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::kernels::{softmax, GaussianStep};
use crate::nn::{init_uniform, Graph, ParameterStore, Var};
use crate::policy::config::CspConfig;
use crate::policy::cv::CV_WINDOW_S;
use crate::policy::grid::{assign_cells, SocialGrid};
use crate::scene::{velocity_estimate, AgentId, Cov2, MixtureMode, MixturePrediction, Point, SceneHistory, TrajectoryGaussian};

const HIST: &str = "hist";
const FUT: &str = "fut";

/// Names of the arrays that exist only in the future-conditional network.
pub const FUTURE_BRANCH_PREFIXES: [&str; 3] = ["fut.", "maneuver.w_fut", "dec.w_fut"];

pub fn is_future_branch(name: &str) -> bool {
    FUTURE_BRANCH_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Seeded initialisation, uniform in `±1/sqrt(fan_in)`.
///
/// History-branch arrays are drawn first and in a fixed order, so a CSP and
/// an FC-CSP store built from the same seed share identical history weights.
pub fn init_params(config: &CspConfig, future_branch: bool, zero_future_gates: bool, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    let e = config.embed_size;
    let h = config.encoder_hidden;
    let hd = config.decoder_hidden;
    let f = config.conv_filters;
    let (kh, kw) = config.conv_kernel;
    let ctx = config.context_dim();
    let modes = config.num_modes;
    let feats = CspConfig::STEP_FEATURES;

    let add = |s: &mut ParameterStore, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
        s.insert(name, init_uniform(shape, fan_in, rng)).map(|_| ())
    };
    let encoder = |s: &mut ParameterStore, prefix: &str, rng: &mut ChaCha8Rng| -> Result<()> {
        add(s, &format!("{prefix}.embed.w"), &[e, feats], feats, rng)?;
        add(s, &format!("{prefix}.embed.b"), &[e], feats, rng)?;
        add(s, &format!("{prefix}.lstm.w_ih"), &[4 * h, e], e, rng)?;
        add(s, &format!("{prefix}.lstm.w_hh"), &[4 * h, h], h, rng)?;
        add(s, &format!("{prefix}.lstm.b"), &[4 * h], h, rng)?;
        add(s, &format!("{prefix}.conv.k"), &[f, h, kh, kw], h * kh * kw, rng)?;
        add(s, &format!("{prefix}.conv.b"), &[f], h * kh * kw, rng)
    };

    encoder(&mut s, HIST, &mut rng)?;
    add(&mut s, "dyn.w", &[e, h], h, &mut rng)?;
    add(&mut s, "dyn.b", &[e], h, &mut rng)?;
    add(&mut s, "maneuver.w", &[modes, e + ctx], e + ctx, &mut rng)?;
    add(&mut s, "maneuver.b", &[modes], e + ctx, &mut rng)?;
    add(&mut s, "dec.w_ih", &[4 * hd, e + ctx + modes], e + ctx + modes, &mut rng)?;
    add(&mut s, "dec.w_hh", &[4 * hd, hd], hd, &mut rng)?;
    add(&mut s, "dec.b", &[4 * hd], hd, &mut rng)?;
    add(&mut s, "out.w", &[GaussianStep::WIDTH, hd], hd, &mut rng)?;
    add(&mut s, "out.b", &[GaussianStep::WIDTH], hd, &mut rng)?;

    if future_branch {
        encoder(&mut s, FUT, &mut rng)?;
        add(&mut s, "maneuver.w_fut", &[modes, ctx], e + 2 * ctx, &mut rng)?;
        add(&mut s, "dec.w_fut", &[4 * hd, ctx], e + 2 * ctx + modes, &mut rng)?;
        if zero_future_gates {
            s.get_mut("maneuver.w_fut")?.fill(0.0);
            s.get_mut("dec.w_fut")?.fill(0.0);
        }
    }
    Ok(s)
}

/// Scaled per-step features `[x, y, vx, vy]` relative to `origin`.
///
/// `before` is the position preceding `points[0]`; without it the first
/// velocity repeats the second.
pub fn track_features(points: &[Point], before: Option<Point>, origin: Point, config: &CspConfig) -> Vec<f64> {
    let ps = config.position_scale;
    let vs = config.velocity_scale;
    let rate = config.sample_rate;
    let mut out = Vec::with_capacity(points.len() * CspConfig::STEP_FEATURES);
    for (k, p) in points.iter().enumerate() {
        let prev = if k > 0 { Some(points[k - 1]) } else { before };
        let v = match prev {
            Some(q) => [(p[0] - q[0]) * rate, (p[1] - q[1]) * rate],
            None if points.len() > 1 => [(points[1][0] - p[0]) * rate, (points[1][1] - p[1]) * rate],
            None => [0.0, 0.0],
        };
        out.extend_from_slice(&[(p[0] - origin[0]) / ps, (p[1] - origin[1]) / ps, v[0] / vs, v[1] / vs]);
    }
    out
}

/// Dynamics embedding and pooled social context of one target.
#[derive(Clone, Debug)]
pub struct HistoryContext {
    pub dynamics: Var,
    pub context: Var,
    pub grid: Var,
    pub origin: Point,
    /// Constant-velocity estimate the decoded velocities are added to.
    pub base_velocity: Point,
    pub occupancy: BTreeMap<usize, AgentId>,
}

#[derive(Clone, Copy, Debug)]
pub struct PolicyNet<'c> {
    pub config: &'c CspConfig,
}

impl<'c> PolicyNet<'c> {
    pub fn new(config: &'c CspConfig) -> Self {
        Self { config }
    }

    /// Final encoder hidden state for one track.
    fn encode(&self, g: &mut Graph<'_>, branch: &str, features: Vec<f64>) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let steps = features.len() / CspConfig::STEP_FEATURES;
        let x = g.input(features);
        let ew = g.param(&format!("{branch}.embed.w"))?;
        let eb = g.param(&format!("{branch}.embed.b"))?;
        let emb = g.linear(x, ew, Some(eb))?;
        let emb = g.leaky_relu(emb, slope);
        let w_ih = g.param(&format!("{branch}.lstm.w_ih"))?;
        let w_hh = g.param(&format!("{branch}.lstm.w_hh"))?;
        let b = g.param(&format!("{branch}.lstm.b"))?;
        let pre = g.linear(emb, w_ih, None)?;
        let mut state = None;
        for row in 0..steps {
            state = Some(g.lstm_step(pre, row, state, w_hh, b)?);
        }
        let state = state.ok_or_else(|| Error::InvalidArgument("cannot encode an empty track".into()))?;
        g.slice(state, 0, self.config.encoder_hidden)
    }

    /// Convolution, activation and pooling over a scattered grid.
    fn pool(&self, g: &mut Graph<'_>, branch: &str, grid: Var) -> Result<Var> {
        let c = self.config;
        let k = g.param(&format!("{branch}.conv.k"))?;
        let b = g.param(&format!("{branch}.conv.b"))?;
        let (conv, shape) = g.conv2d(grid, [c.encoder_hidden, c.grid_rows, c.grid_cols], k, b, (1, 1), (0, 0))?;
        let act = g.leaky_relu(conv, c.leaky_slope);
        let (pooled, _) = g.max_pool2d(act, shape, c.pool_window)?;
        Ok(pooled)
    }

    fn neighbor_cells(&self, scene: &SceneHistory, target: AgentId, include: impl Fn(AgentId) -> bool) -> Result<(Point, BTreeMap<usize, AgentId>)> {
        let origin = scene.current_position(target)?;
        let neighbors = scene
            .tracks()
            .filter(|t| t.agent_id() != target && include(t.agent_id()))
            .map(|t| (t.agent_id(), t.last_position()));
        Ok((origin, assign_cells(origin, neighbors, self.config)))
    }

    pub fn history_context(&self, g: &mut Graph<'_>, scene: &SceneHistory, target: AgentId) -> Result<HistoryContext> {
        let c = self.config;
        let track = scene.track(target)?;
        if track.len() < c.history_steps {
            return Err(Error::InsufficientHistory { agent: target, have: track.len(), need: c.history_steps });
        }
        let (origin, occupancy) = self.neighbor_cells(scene, target, |_| true)?;
        let own: Vec<Point> = track.tail(c.history_steps).iter().map(|s| s.position()).collect();
        let h = self.encode(g, HIST, track_features(&own, None, origin, c))?;
        let dw = g.param("dyn.w")?;
        let db = g.param("dyn.b")?;
        let dynamics = g.linear(h, dw, Some(db))?;
        let dynamics = g.leaky_relu(dynamics, c.leaky_slope);

        let mut items = Vec::with_capacity(occupancy.len());
        for (&cell, &id) in &occupancy {
            let pts: Vec<Point> = scene.track(id)?.tail(c.history_steps).iter().map(|s| s.position()).collect();
            let enc = self.encode(g, HIST, track_features(&pts, None, origin, c))?;
            items.push((enc, cell));
        }
        let grid = g.scatter(&items, c.encoder_hidden, c.cells())?;
        let context = self.pool(g, HIST, grid)?;
        let base_velocity = velocity_estimate(track, c.sample_rate, CV_WINDOW_S)?;
        Ok(HistoryContext { dynamics, context, grid, origin, base_velocity, occupancy })
    }

    /// Pooled context over the predicted futures of the target's neighbors.
    ///
    /// Returns the pooled context, the raw grid, and the cell occupancy.
    pub fn future_context(
        &self,
        g: &mut Graph<'_>,
        scene: &SceneHistory,
        target: AgentId,
        futures: &BTreeMap<AgentId, TrajectoryGaussian>,
    ) -> Result<(Var, Var, BTreeMap<usize, AgentId>)> {
        let c = self.config;
        for (id, f) in futures {
            if f.horizon() != c.horizon_steps {
                return Err(Error::HorizonMismatch { expected: c.horizon_steps, got: f.horizon() });
            }
            if !scene.contains(*id) {
                return Err(Error::UnknownAgent(*id));
            }
        }
        let (origin, occupancy) = self.neighbor_cells(scene, target, |id| futures.contains_key(&id))?;
        let mut items = Vec::with_capacity(occupancy.len());
        for (&cell, &id) in &occupancy {
            let before = scene.current_position(id)?;
            let feats = track_features(futures[&id].means(), Some(before), origin, c);
            items.push((self.encode(g, FUT, feats)?, cell));
        }
        let grid = g.scatter(&items, c.encoder_hidden, c.cells())?;
        Ok((self.pool(g, FUT, grid)?, grid, occupancy))
    }

    pub fn maneuver_logits(&self, g: &mut Graph<'_>, hist: &HistoryContext, future: Option<Var>) -> Result<Var> {
        let x = g.concat(&[hist.dynamics, hist.context]);
        let w = g.param("maneuver.w")?;
        let b = g.param("maneuver.b")?;
        let logits = g.linear(x, w, Some(b))?;
        match future {
            Some(fctx) => {
                let wf = g.param("maneuver.w_fut")?;
                let extra = g.linear(fctx, wf, None)?;
                g.add(logits, extra)
            }
            None => Ok(logits),
        }
    }

    /// Decodes one mode into `[horizon, 5]` Gaussian parameters `(mu_x, mu_y, sigma_x, sigma_y, rho)`
    /// relative to the target's last position. Decoded velocities are offsets from the
    /// target's constant-velocity estimate.
    pub fn decode(&self, g: &mut Graph<'_>, hist: &HistoryContext, future: Option<Var>, mode: usize) -> Result<Var> {
        let c = self.config;
        if mode >= c.num_modes {
            return Err(Error::ClassOutOfRange { index: mode, classes: c.num_modes });
        }
        let mut one_hot = vec![0.0; c.num_modes];
        one_hot[mode] = 1.0;
        let one_hot = g.input(one_hot);
        let x = g.concat(&[hist.dynamics, hist.context, one_hot]);
        let w_ih = g.param("dec.w_ih")?;
        let mut pre = g.linear(x, w_ih, None)?;
        if let Some(fctx) = future {
            let wf = g.param("dec.w_fut")?;
            let extra = g.linear(fctx, wf, None)?;
            pre = g.add(pre, extra)?;
        }
        let w_hh = g.param("dec.w_hh")?;
        let b = g.param("dec.b")?;
        let mut state = None;
        let mut hidden = Vec::with_capacity(c.horizon_steps);
        for _ in 0..c.horizon_steps {
            let s = g.lstm_step(pre, 0, state, w_hh, b)?;
            hidden.push(g.slice(s, 0, c.decoder_hidden)?);
            state = Some(s);
        }
        let stacked = g.concat(&hidden);
        let ow = g.param("out.w")?;
        let ob = g.param("out.b")?;
        let raw = g.linear(stacked, ow, Some(ob))?;
        let head = g.trajectory_head(raw, c.velocity_scale / c.sample_rate)?;
        let dt = c.dt();
        let v = hist.base_velocity;
        let mut drift = vec![0.0; c.horizon_steps * GaussianStep::WIDTH];
        for (k, row) in drift.chunks_exact_mut(GaussianStep::WIDTH).enumerate() {
            let t = (k + 1) as f64 * dt;
            row[0] = v[0] * t;
            row[1] = v[1] * t;
        }
        let drift = g.input(drift);
        g.add(head, drift)
    }

    /// Training loss for one target: Gaussian NLL of the ground-truth
    /// maneuver's mode plus maneuver cross-entropy.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        scene: &SceneHistory,
        target: AgentId,
        truth: &[Point],
        label: usize,
        futures: Option<&BTreeMap<AgentId, TrajectoryGaussian>>,
    ) -> Result<Var> {
        if truth.len() != self.config.horizon_steps {
            return Err(Error::HorizonMismatch { expected: self.config.horizon_steps, got: truth.len() });
        }
        let hist = self.history_context(g, scene, target)?;
        let fut = futures.map(|f| self.future_context(g, scene, target, f)).transpose()?.map(|(ctx, _, _)| ctx);
        let logits = self.maneuver_logits(g, &hist, fut)?;
        let ce = g.softmax_cross_entropy(logits, label)?;
        let params = self.decode(g, &hist, fut, label)?;
        let rel: Vec<Point> = truth.iter().map(|p| [p[0] - hist.origin[0], p[1] - hist.origin[1]]).collect();
        let nll = g.gaussian_nll(params, rel)?;
        Ok(g.weighted_sum(&[(nll, 1.0), (ce, 1.0)]))
    }
}

fn to_trajectory(values: &[f64], origin: Point, agent: AgentId) -> Result<TrajectoryGaussian> {
    let mut means = Vec::with_capacity(values.len() / GaussianStep::WIDTH);
    let mut covs = Vec::with_capacity(means.capacity());
    for v in values.chunks_exact(GaussianStep::WIDTH) {
        means.push([v[0] + origin[0], v[1] + origin[1]]);
        covs.push(Cov2::from_sigma_rho(v[2], v[3], v[4]));
    }
    TrajectoryGaussian::new(agent, means, covs)
}

/// Network outputs for one target, relative to its last position.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeOutput {
    pub weights: Vec<f64>,
    /// Per mode, `[horizon, 5]` Gaussian parameters.
    pub modes: Vec<Vec<f64>>,
    pub origin: Point,
}

fn run(
    scene: &SceneHistory,
    target: AgentId,
    futures: Option<&BTreeMap<AgentId, TrajectoryGaussian>>,
    params: &ParameterStore,
    config: &CspConfig,
) -> Result<RelativeOutput> {
    let net = PolicyNet::new(config);
    let mut g = Graph::new(params);
    let hist = net.history_context(&mut g, scene, target)?;
    let fut = futures.map(|f| net.future_context(&mut g, scene, target, f)).transpose()?.map(|(ctx, _, _)| ctx);
    let logits = net.maneuver_logits(&mut g, &hist, fut)?;
    let weights = softmax(g.value(logits));
    let mut modes = Vec::with_capacity(config.num_modes);
    for m in 0..config.num_modes {
        let out = net.decode(&mut g, &hist, fut, m)?;
        modes.push(g.value(out).to_vec());
    }
    Ok(RelativeOutput { weights, modes, origin: hist.origin })
}

/// Relative-coordinate outputs of the history-only network.
pub fn csp_relative(scene: &SceneHistory, target: AgentId, params: &ParameterStore, config: &CspConfig) -> Result<RelativeOutput> {
    run(scene, target, None, params, config)
}

/// Relative-coordinate outputs of the future-conditional network.
pub fn fccsp_relative(
    scene: &SceneHistory,
    target: AgentId,
    futures: &BTreeMap<AgentId, TrajectoryGaussian>,
    params: &ParameterStore,
    config: &CspConfig,
) -> Result<RelativeOutput> {
    run(scene, target, Some(futures), params, config)
}

fn to_mixture(out: RelativeOutput, agent: AgentId) -> Result<MixturePrediction> {
    let modes = out
        .weights
        .iter()
        .zip(&out.modes)
        .map(|(w, m)| Ok(MixtureMode { weight: *w, trajectory: to_trajectory(m, out.origin, agent)? }))
        .collect::<Result<Vec<_>>>()?;
    MixturePrediction::new(modes)
}

/// Six-mode Gaussian mixture over the target's future, conditioned on history only.
pub fn csp_forward(scene: &SceneHistory, target: AgentId, params: &ParameterStore, config: &CspConfig) -> Result<MixturePrediction> {
    to_mixture(csp_relative(scene, target, params, config)?, target)
}

/// Six-mode mixture conditioned on history and the neighbors' predicted futures.
pub fn fccsp_forward(
    scene: &SceneHistory,
    target: AgentId,
    futures: &BTreeMap<AgentId, TrajectoryGaussian>,
    params: &ParameterStore,
    config: &CspConfig,
) -> Result<MixturePrediction> {
    to_mixture(fccsp_relative(scene, target, futures, params, config)?, target)
}

/// Highest-weight mode only; decodes a single mode instead of all six.
pub fn top_mode_forward(
    scene: &SceneHistory,
    target: AgentId,
    futures: Option<&BTreeMap<AgentId, TrajectoryGaussian>>,
    params: &ParameterStore,
    config: &CspConfig,
) -> Result<TrajectoryGaussian> {
    let net = PolicyNet::new(config);
    let mut g = Graph::new(params);
    let hist = net.history_context(&mut g, scene, target)?;
    let fut = futures.map(|f| net.future_context(&mut g, scene, target, f)).transpose()?.map(|(ctx, _, _)| ctx);
    let logits = net.maneuver_logits(&mut g, &hist, fut)?;
    let weights = softmax(g.value(logits));
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    let out = net.decode(&mut g, &hist, fut, best)?;
    to_trajectory(g.value(out), hist.origin, target)
}

fn grid_from(g: &Graph<'_>, grid: Var, occupancy: &BTreeMap<usize, AgentId>, config: &CspConfig) -> SocialGrid {
    let mut occ = vec![None; config.cells()];
    for (&cell, &id) in occupancy {
        occ[cell] = Some(id);
    }
    SocialGrid {
        channels: config.encoder_hidden,
        rows: config.grid_rows,
        cols: config.grid_cols,
        values: g.value(grid).to_vec(),
        occupancy: occ,
    }
}

/// Encoded neighbor histories placed at their current-position cells.
pub fn build_history_grid(scene: &SceneHistory, target: AgentId, params: &ParameterStore, config: &CspConfig) -> Result<SocialGrid> {
    let mut g = Graph::new(params);
    let hist = PolicyNet::new(config).history_context(&mut g, scene, target)?;
    Ok(grid_from(&g, hist.grid, &hist.occupancy, config))
}

/// Encoded predicted neighbor futures placed at the neighbors' current-position cells.
pub fn build_future_grid(
    scene: &SceneHistory,
    target: AgentId,
    futures: &BTreeMap<AgentId, TrajectoryGaussian>,
    params: &ParameterStore,
    config: &CspConfig,
) -> Result<SocialGrid> {
    let mut g = Graph::new(params);
    let (_, grid, occupancy) = PolicyNet::new(config).future_context(&mut g, scene, target, futures)?;
    Ok(grid_from(&g, grid, &occupancy, config))
}
