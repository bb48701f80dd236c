//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfrbp_core::data::ngsim::read_trajectories;
use mfrbp_core::data::synth::SyntheticTraffic;
use mfrbp_core::data::{
    build_split_datasets, parse_trajectories, sample_egos, segment_dataset, split_train_test, synthesize_scenes,
    write_trajectories, Dataset, SegmentConfig, SynthConfig, TrackSet,
};
use mfrbp_core::eval::{horizon_errors, run_experiment, EvalConfig, Experiment, RmseTable};
use mfrbp_core::nn::{check_layer, finite_difference_check, GradCheckConfig, Graph, Layer, ParameterStore};
use mfrbp_core::policy::cv::CV_WINDOW_S;
use mfrbp_core::policy::net::{is_future_branch, PolicyNet};
use mfrbp_core::policy::train::{init_models, train_policies};
use mfrbp_core::policy::{
    csp_forward, cv_predict, fccsp_forward, init_params, top_mode_forward, CspConfig, CspPolicy, Policy, PolicyInput,
    PolicyModels, PolicyRef, TrainConfig, TrainingScheme,
};
use mfrbp_core::recursion::{make_l1_mfrbp, make_planning_aware, run_mfrbp, ReasoningAssignment, SensorConfig};
use mfrbp_core::{build_scene, AgentId, Point, SceneHistory, TrackHistory, TrajectoryGaussian};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || format!("{what} took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
}

fn tiny() -> CspConfig {
    CspConfig { encoder_hidden: 3, embed_size: 3, conv_filters: 2, decoder_hidden: 3, ..CspConfig::at_rate(2.0) }
}

/// Target 1 at the origin plus up to `max_neighbors` random neighbors, each
/// with a slightly wavy constant-speed history.
fn random_scene(rng: &mut ChaCha8Rng, config: &CspConfig, max_neighbors: usize) -> SceneHistory {
    let n = config.history_steps + rng.random_range(0..3);
    let count = rng.random_range(0..=max_neighbors);
    let mut tracks = Vec::new();
    for id in 1..=count as u64 + 1 {
        let (x0, lane) = if id == 1 { (0.0, 0) } else { (rng.random_range(-45.0..45.0), rng.random_range(-1..=1)) };
        let v = rng.random_range(8.0..32.0);
        let wobble = rng.random_range(0.0..0.3);
        let pts: Vec<Point> = (0..n)
            .map(|k| {
                let t = k as f64 / config.sample_rate;
                [x0 + v * t, 3.66 * lane as f64 + wobble * (1.3 * t).sin()]
            })
            .collect();
        tracks.push(TrackHistory::from_positions(AgentId(id), 100, &pts).unwrap());
    }
    build_scene(tracks, config.sample_rate).unwrap()
}

fn cv_futures(scene: &SceneHistory, target: AgentId, config: &CspConfig) -> BTreeMap<AgentId, TrajectoryGaussian> {
    scene
        .tracks()
        .filter(|t| t.agent_id() != target)
        .map(|t| (t.agent_id(), cv_predict(t, config.horizon_steps, config.sample_rate, 0.5).unwrap()))
        .collect()
}

// ---------------------------------------------------------------- criterion 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let seeds = 20u64;
    let mut worst = 0.0f64;
    for layer in Layer::ALL {
        for seed in 0..seeds {
            let report = check_layer(layer, seed, cfg).map_err(err)?;
            check(report.passed(), || format!("{} seed {seed}\n{}", layer.name(), report.summary()))?;
            worst = worst.max(report.max_rel_error());
        }
    }
    let c = tiny();
    for future in [false, true] {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = init_params(&c, future, false, seed).map_err(err)?;
            let sc = random_scene(&mut rng, &c, 4);
            let futures = cv_futures(&sc, AgentId(1), &c);
            let truth: Vec<Point> = (1..=c.horizon_steps)
                .map(|k| [rng.random_range(0.5..1.5) * 10.0 * k as f64 / c.sample_rate, rng.random_range(-0.5..0.5)])
                .collect();
            let label = rng.random_range(0..c.num_modes);
            let loss_at = |store: &ParameterStore| {
                let mut g = Graph::new(store);
                let l = PolicyNet::new(&c).loss(&mut g, &sc, AgentId(1), &truth, label, future.then_some(&futures))?;
                Ok(g.value(l)[0])
            };
            let mut g = Graph::new(&params);
            let l = PolicyNet::new(&c).loss(&mut g, &sc, AgentId(1), &truth, label, future.then_some(&futures)).map_err(err)?;
            let analytic = g.backward(l);
            let report = finite_difference_check(&params, &analytic, loss_at, cfg).map_err(err)?;
            let name = if future { "FC-CSP" } else { "CSP" };
            check(report.passed(), || format!("{name} loss seed {seed}\n{}", report.summary()))?;
            worst = worst.max(report.max_rel_error());
        }
    }
    within(start.elapsed(), 120.0, "gradient suite")?;
    Ok(format!("6 layers + CSP + FC-CSP over {seeds} seeds, max rel err {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 2

const STUB_HORIZON: usize = 8;

/// Encodes `(agent, level)` in its first mean and, after it, the level it
/// saw for every other agent.
struct Stub {
    level: usize,
}

fn marker(agent: AgentId, level: usize) -> f64 {
    (agent.0 * 1000 + level as u64) as f64
}

impl Policy for Stub {
    fn name(&self) -> String {
        format!("stub{}", self.level)
    }

    fn future_conditional(&self) -> bool {
        self.level > 0
    }

    fn predict(&self, input: &PolicyInput<'_>) -> mfrbp_core::Result<TrajectoryGaussian> {
        assert_eq!(input.level, self.level, "policy called at the wrong level");
        assert_eq!(input.others.is_none(), self.level == 0, "level-0 policies see no futures");
        let mut means = vec![[marker(input.target, self.level), 0.0]];
        if let Some(others) = input.others {
            assert!(!others.contains_key(&input.target));
            for (j, p) in others {
                means.push([j.0 as f64, p.means()[0][0] - (j.0 * 1000) as f64]);
            }
        }
        means.resize(STUB_HORIZON, [-1.0, -1.0]);
        TrajectoryGaussian::deterministic(input.target, means)
    }
}

fn stub_ladder(level: usize) -> Vec<PolicyRef> {
    (0..=level).map(|l| Arc::new(Stub { level: l }) as PolicyRef).collect()
}

fn point_scene(n: u64) -> SceneHistory {
    let tracks = (1..=n).map(|id| {
        let pts: Vec<Point> = (0..4).map(|k| [k as f64 + 10.0 * id as f64, 0.0]).collect();
        TrackHistory::from_positions(AgentId(id), 0, &pts).unwrap()
    });
    build_scene(tracks, 10.0).unwrap()
}

fn check_wiring(levels: &[usize]) -> Result<(), String> {
    let scene = point_scene(levels.len() as u64);
    let mut a = ReasoningAssignment::new();
    for (i, &k) in levels.iter().enumerate() {
        a.assign(AgentId(i as u64 + 1), stub_ladder(k)).map_err(err)?;
    }
    let (pred, trace) = run_mfrbp(&scene, &a).map_err(err)?;
    for (i, &ki) in levels.iter().enumerate() {
        let id = AgentId(i as u64 + 1);
        check(trace.levels(id).len() == ki + 1, || format!("{levels:?}: agent {id} has {} levels", trace.levels(id).len()))?;
        check(Some(&pred[&id]) == trace.get(id, ki), || format!("{levels:?}: output of {id} is not its level-{ki} entry"))?;
        for k in 0..=ki {
            let p = trace.get(id, k).ok_or_else(|| format!("missing level {k} of {id}"))?;
            check(p.means()[0][0] == marker(id, k), || format!("{levels:?}: {id} level {k} used the wrong policy"))?;
            if k == 0 {
                continue;
            }
            let seen: BTreeMap<u64, usize> =
                p.means()[1..].iter().take_while(|m| m[0] >= 0.0).map(|m| (m[0] as u64, m[1] as usize)).collect();
            let expected: BTreeMap<u64, usize> = levels
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, &kj)| (j as u64 + 1, kj.min(k - 1)))
                .collect();
            check(seen == expected, || format!("{levels:?}: {id} at level {k} saw {seen:?}, expected {expected:?}"))?;
        }
    }
    Ok(())
}

fn recursion_wiring() -> Outcome {
    let start = Instant::now();
    for pair in [[0, 0], [1, 0], [1, 1], [2, 1]] {
        check_wiring(&pair)?;
        check_wiring(&[pair[1], pair[0]])?;
    }
    check_wiring(&[2, 0, 1, 1, 3])?;

    // all-zero levels are the plain level-0 pass
    let scene = point_scene(4);
    let mut a = ReasoningAssignment::new();
    for id in scene.agent_ids() {
        a.assign(id, stub_ladder(0)).map_err(err)?;
    }
    let (pred, _) = run_mfrbp(&scene, &a).map_err(err)?;
    for id in scene.agent_ids() {
        let direct = Stub { level: 0 }.predict(&PolicyInput { scene: &scene, target: id, level: 0, others: None }).map_err(err)?;
        check(pred[&id] == direct, || format!("all-zero run differs from the level-0 pass for {id}"))?;
    }
    let c = tiny();
    let models = Arc::new(init_models(&c, &TrainConfig::default(), 5).map_err(err)?);
    let sc = random_scene(&mut ChaCha8Rng::seed_from_u64(9), &c, 5);
    let mut a = ReasoningAssignment::new();
    for id in sc.agent_ids() {
        a.assign(id, vec![Arc::new(CspPolicy { models: models.clone() })]).map_err(err)?;
    }
    let (pred, _) = run_mfrbp(&sc, &a).map_err(err)?;
    for id in sc.agent_ids() {
        let direct = top_mode_forward(&sc, id, None, &models.csp, &c).map_err(err)?;
        check(pred[&id] == direct, || format!("all-zero CSP run differs from direct CSP for {id}"))?;
    }
    within(start.elapsed(), 10.0, "wiring checks")?;
    Ok("min(k_j, k-1) rule for (0,0) (1,0) (1,1) (2,1) and a mixed scene; all-zero degenerates to level 0".into())
}

// ---------------------------------------------------------------- criterion 3

fn fccsp_reduces_to_csp() -> Outcome {
    let c = CspConfig::desk(10.0);
    let scenes = 120;
    for seed in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let csp = init_params(&c, false, false, seed).map_err(err)?;
        let mut fc = init_params(&c, true, false, seed + 7).map_err(err)?;
        fc.copy_shared_from(&csp).map_err(err)?;
        let names: Vec<String> = fc.names().iter().filter(|n| is_future_branch(n)).cloned().collect();
        for n in names {
            fc.get_mut(&n).map_err(err)?.data_mut().fill(0.0);
        }
        let sc = random_scene(&mut rng, &c, 8);
        let futures = cv_futures(&sc, AgentId(1), &c);
        let a = csp_forward(&sc, AgentId(1), &csp, &c).map_err(err)?;
        let b = fccsp_forward(&sc, AgentId(1), &futures, &fc, &c).map_err(err)?;
        check(a == b, || format!("scene {seed}: outputs differ"))?;
    }
    Ok(format!("bit-identical mixtures on {scenes} random scenes"))
}

// ---------------------------------------------------------------- criterion 4

fn cv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let rate = [2.0, 5.0, 10.0][rng.random_range(0..3)];
        let len = rng.random_range(2..40);
        let pts: Vec<Point> = (0..len).map(|_| [rng.random_range(-500.0..500.0), rng.random_range(-10.0..10.0)]).collect();
        let track = TrackHistory::from_positions(AgentId(1), rng.random_range(0..1000), &pts).unwrap();
        let horizon = rng.random_range(1..60);
        let p = cv_predict(&track, horizon, rate, 0.5).map_err(err)?;
        // brute force: mean per-frame displacement over the last second (or
        // all history), added once per future frame
        let frames = ((CV_WINDOW_S * rate).round() as usize).clamp(1, len - 1);
        let mut step = [0.0; 2];
        for w in pts[len - 1 - frames..].windows(2) {
            step[0] += (w[1][0] - w[0][0]) / frames as f64;
            step[1] += (w[1][1] - w[0][1]) / frames as f64;
        }
        let b = pts[len - 1];
        for (k, m) in p.means().iter().enumerate() {
            let n = (k + 1) as f64;
            for axis in 0..2 {
                let want = b[axis] + step[axis] * n;
                worst = worst.max((m[axis] - want).abs() / (1.0 + want.abs()));
            }
        }
    }
    check(worst <= 1e-12, || format!("cv_predict deviates from the oracle by {worst:e}"))?;

    let synth = SynthConfig { braking_probability: 0.0, noise_sigma: 0.0, episodes: 4, ..SynthConfig::default() };
    let traffic = synthesize_scenes(&synth).map_err(err)?;
    let d = segment_dataset(&traffic.tracks, None, SegmentConfig::at_rate(synth.sample_rate)).map_err(err)?;
    let horizons = EvalConfig::default().horizons_s;
    let rows: Vec<Vec<f64>> = d
        .segments
        .iter()
        .map(|s| {
            let p = cv_predict(d.window_of(s).history.track(s.target)?, d.horizon_steps(), d.sample_rate, 0.5)?;
            horizon_errors(&p, d.target_future(s)?, d.sample_rate, &horizons)
        })
        .collect::<mfrbp_core::Result<_>>()
        .map_err(err)?;
    let table = RmseTable::from_errors(&horizons, rows.iter().map(Vec::as_slice)).map_err(err)?;
    let max = table.rmse.iter().copied().fold(0.0, f64::max);
    check(max <= 1e-9, || format!("CV RMSE on noise-free CV traffic is {max:e}"))?;
    Ok(format!("oracle rel err {worst:.1e}; CV traffic RMSE {max:.1e} over {} segments", d.len()))
}

// ------------------------------------------------------------ criteria 5 and 6

const TRAIN_SEED: u64 = 2;
const EVAL_SEED: u64 = 7;

struct Desk {
    traffic: SyntheticTraffic,
    train: Dataset,
    test: Dataset,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let traffic = synthesize_scenes(&SynthConfig::default()).unwrap();
        let sets = std::slice::from_ref(&traffic.tracks);
        let split = split_train_test(sets, 1);
        let (train, test) = build_split_datasets(sets, &split, SegmentConfig::at_rate(10.0)).unwrap();
        Desk { traffic, train, test }
    })
}

fn train_desk(scheme: TrainingScheme) -> Result<(Arc<PolicyModels>, Vec<f64>, Duration), String> {
    let start = Instant::now();
    let r = train_policies(&desk().train, &CspConfig::desk(10.0), &TrainConfig::default(), scheme, TRAIN_SEED).map_err(err)?;
    Ok((Arc::new(r.models), r.loss_curve, start.elapsed()))
}

fn training_improves() -> Outcome {
    let d = desk();
    check((1800..=2200).contains(&d.train.len()), || format!("{} training segments", d.train.len()))?;
    let (models, curve, elapsed) = train_desk(TrainingScheme::L1Rbp)?;
    within(elapsed, 600.0, "training")?;
    check(curve.len() == 11 && curve[10] < curve[0], || format!("loss curve {curve:?}"))?;

    let eval = EvalConfig::default();
    let rows: Vec<Vec<f64>> = d
        .test
        .segments
        .iter()
        .map(|s| {
            let p = cv_predict(d.test.window_of(s).history.track(s.target)?, d.test.horizon_steps(), 10.0, 0.5)?;
            horizon_errors(&p, d.test.target_future(s)?, 10.0, &eval.horizons_s)
        })
        .collect::<mfrbp_core::Result<_>>()
        .map_err(err)?;
    let cv = RmseTable::from_errors(&eval.horizons_s, rows.iter().map(Vec::as_slice)).map_err(err)?;
    let r = run_experiment(Experiment::L1Rbp, &d.test, &models, &SensorConfig::default(), &eval, EVAL_SEED).map_err(err)?;
    let (cv5, csp5, l15) = (cv.at(5.0).unwrap(), r.level0_table.at(5.0).unwrap(), r.table.at(5.0).unwrap());
    check(csp5 < cv5, || format!("CSP@5s {csp5:.4} not below CV@5s {cv5:.4}"))?;
    check(l15 <= csp5, || format!("L1-RBP@5s {l15:.4} above CSP@5s {csp5:.4}"))?;
    Ok(format!(
        "{} segments, loss {:.2} -> {:.2} in {:.0} s; @5s CV {cv5:.3} CSP {csp5:.3} L1-RBP {l15:.3}",
        d.train.len(),
        curve[0],
        curve[10],
        elapsed.as_secs_f64()
    ))
}

/// Follower error at every test window where its platoon leader (the ego)
/// starts braking within the next 3 s.
fn braking_follower_errors(models: &Arc<PolicyModels>, planning: bool) -> Result<Vec<Vec<f64>>, String> {
    let d = desk();
    let sensor = SensorConfig::default();
    let h = d.test.horizon_steps();
    let horizons = EvalConfig::default().horizons_s;
    let mut rows = Vec::new();
    for w in &d.test.windows {
        let now = w.history.current_frame();
        for p in &d.traffic.platoons {
            let (lead, follower) = (p[0], p[1]);
            if !w.has_full_future(lead, h) || !w.has_full_future(follower, h) || !w.history.contains(lead) || !w.history.contains(follower) {
                continue;
            }
            let brakes = d.traffic.braking_events.iter().any(|e| e.vehicle == lead && e.start_frame > now && e.start_frame <= now + 30);
            if !brakes {
                continue;
            }
            let s = sensor.for_ego(lead);
            let (scene, a) = if planning {
                make_planning_aware(&w.history, &s, w.future(lead, h).map_err(err)?, models)
            } else {
                make_l1_mfrbp(&w.history, &s, models)
            }
            .map_err(err)?;
            let pred = run_mfrbp(&scene, &a).map_err(err)?.0;
            let fp = pred.get(&follower).ok_or_else(|| format!("follower {follower} outside the ego's sensor range"))?;
            rows.push(horizon_errors(fp, w.future(follower, h).map_err(err)?, d.test.sample_rate, &horizons).map_err(err)?);
        }
    }
    Ok(rows)
}

fn planning_helps_followers() -> Outcome {
    let sensor = SensorConfig::default();
    let (plain, _, _) = train_desk(TrainingScheme::L1Mfrbp { sensor })?;
    let (planning, _, _) = train_desk(TrainingScheme::Planning { sensor })?;
    let horizons = EvalConfig::default().horizons_s;
    let plain_rows = braking_follower_errors(&plain, false)?;
    let planning_rows = braking_follower_errors(&planning, true)?;
    check(!plain_rows.is_empty(), || "no braking-leader scenes".into())?;
    let a = RmseTable::from_errors(&horizons, plain_rows.iter().map(Vec::as_slice)).map_err(err)?.at(5.0).unwrap();
    let b = RmseTable::from_errors(&horizons, planning_rows.iter().map(Vec::as_slice)).map_err(err)?.at(5.0).unwrap();
    check(b <= a, || format!("planning-aware {b:.4} above plain L1-MFRBP {a:.4} at 5 s"))?;
    Ok(format!("{} follower scenes; @5s planning-aware {b:.4} <= L1-MFRBP {a:.4}", plain_rows.len()))
}

// ---------------------------------------------------------------- criterion 7

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/ngsim_sample.txt"))
}

/// Segments per vehicle by direct enumeration of window start frames.
fn window_oracle(track: &TrackHistory, cfg: SegmentConfig) -> usize {
    let (first, last) = (track.first_frame(), track.last_frame());
    let need = (cfg.history_steps + cfg.horizon_steps) as u64;
    let mut n = 0;
    let mut start = first;
    while start + need - 1 <= last {
        n += 1;
        start += cfg.stride_steps as u64;
    }
    n
}

fn data_pipeline() -> Outcome {
    // fixture round trip
    let parsed = read_trajectories(fixture()).map_err(err)?;
    check(parsed.len() == 3, || format!("fixture has {} vehicles", parsed.len()))?;
    let text = write_trajectories(&parsed).map_err(err)?;
    let again = parse_trajectories(&text).map_err(err)?;
    check(again == parsed, || "fixture does not round-trip".into())?;
    check(write_trajectories(&again).map_err(err)? == text, || "rewritten text differs".into())?;

    // segment counts
    let tracks = parsed.iter().map(|t| t.longest_run()).collect::<mfrbp_core::Result<Vec<_>>>().map_err(err)?;
    let set = TrackSet::new("fixture", 10.0, tracks).map_err(err)?;
    let traffic = synthesize_scenes(&SynthConfig { episodes: 3, ..SynthConfig::default() }).map_err(err)?;
    let mut segments_checked = 0;
    for (s, rate) in [(&set, 10.0), (&traffic.tracks, 10.0), (&traffic.tracks.downsampled(2).map_err(err)?, 5.0)] {
        let cfg = SegmentConfig::at_rate(rate);
        let d = segment_dataset(s, None, cfg).map_err(err)?;
        let mut counts: BTreeMap<AgentId, usize> = BTreeMap::new();
        for seg in &d.segments {
            *counts.entry(seg.target).or_default() += 1;
        }
        for (id, t) in &s.tracks {
            let want = window_oracle(t, cfg);
            let got = counts.get(id).copied().unwrap_or(0);
            check(got == want, || format!("{}: vehicle {id} has {got} segments, oracle {want}", s.subset))?;
        }
        segments_checked += d.len();
    }

    // seeded quarter split
    let sets = [traffic.tracks.clone(), set.clone()];
    let split = split_train_test(&sets, 11);
    for s in &sets {
        let all = s.vehicle_ids();
        let test = split.test.get(&s.subset).cloned().unwrap_or_default();
        let train = split.train.get(&s.subset).cloned().unwrap_or_default();
        let quarter = (all.len() as f64 / 4.0).round() as usize;
        check(test.len() == quarter, || format!("{}: {} test of {}", s.subset, test.len(), all.len()))?;
        check(test.is_disjoint(&train) && test.union(&train).copied().collect::<BTreeSet<_>>() == all, || {
            format!("{}: split is not a partition", s.subset)
        })?;
    }
    check(split == split_train_test(&sets, 11), || "split is not reproducible".into())?;
    check(split != split_train_test(&sets, 12), || "split ignores the seed".into())?;

    // ego coverage and pass averaging
    let (_, test) = build_split_datasets(&sets[..1], &split, SegmentConfig::at_rate(10.0)).map_err(err)?;
    let sensor = SensorConfig::default();
    for pass in 0..10u64 {
        let egos = sample_egos(&test, &sensor, pass).map_err(err)?;
        let covered: BTreeSet<(usize, AgentId)> = egos.iter().flat_map(|e| e.covered.iter().map(move |t| (e.window, *t))).collect();
        let wanted: BTreeSet<(usize, AgentId)> = test.segments.iter().map(|s| (s.window, s.target)).collect();
        check(covered == wanted, || format!("pass {pass} covers {} of {} test segments", covered.len(), wanted.len()))?;
        let assigned: usize = egos.iter().map(|e| e.covered.len()).sum();
        check(assigned == wanted.len(), || format!("pass {pass} scores some targets twice"))?;
    }
    let c = CspConfig::desk(10.0);
    let models = Arc::new(init_models(&c, &TrainConfig::default(), 3).map_err(err)?);
    let eval = EvalConfig { passes: 10, ..EvalConfig::default() };
    let r = run_experiment(Experiment::L1Mfrbp, &test, &models, &sensor, &eval, 5).map_err(err)?;
    check(r.pass_tables.len() == 10, || format!("{} pass tables", r.pass_tables.len()))?;
    let mut weighted = vec![0.0; eval.horizons_s.len()];
    let mut total = vec![0usize; eval.horizons_s.len()];
    for (pass, t) in r.pass_tables.iter().enumerate() {
        // every covered target except the egos themselves is scored
        let egos = sample_egos(&test, &sensor, 5 + pass as u64).map_err(err)?;
        let scored: usize = egos.iter().map(|e| e.covered.iter().filter(|t| **t != e.ego).count()).sum();
        check(t.counts.iter().all(|n| *n == scored), || format!("pass {pass} scored {:?}, expected {scored}", t.counts))?;
        for i in 0..weighted.len() {
            weighted[i] += t.rmse[i] * t.counts[i] as f64;
            total[i] += t.counts[i];
        }
    }
    for i in 0..weighted.len() {
        let mean = weighted[i] / total[i] as f64;
        check((mean - r.table.rmse[i]).abs() <= 1e-12 * mean.max(1.0), || format!("horizon {i}: {mean} vs {}", r.table.rmse[i]))?;
    }
    Ok(format!("fixture round-trips; {segments_checked} segments match the oracle; quarter split; 10/10 passes cover all egos"))
}

// ---------------------------------------------------------------- criterion 8

fn mfrbp(args: &[&str], out_root: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mfrbp")).args(args).env("MFRBP_OUT", out_root).output().map_err(err)?;
    check(out.status.success(), || format!("mfrbp {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

const DETERMINISM_CONFIG: &str = "\
[model]
encoder_hidden = 6
embed_size = 6
conv_filters = 4
decoder_hidden = 6
[train]
epochs = 2
[synth]
episodes = 3
[eval]
passes = 3
plot_count = 2
";

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    std::fs::write(root.join("run.toml"), DETERMINISM_CONFIG).map_err(err)?;
    mfrbp(&["synth", "--config", &p("run.toml"), "--seed", "5", "--out", &p("data")], root)?;
    mfrbp(&["train", "--data", &p("data"), "--config", &p("run.toml"), "--seed", "3", "--scheme", "l1mfrbp", "--ckpt-out", &p("a.ckpt")], root)?;
    mfrbp(&["train", "--data", &p("data"), "--config", &p("run.toml"), "--seed", "3", "--scheme", "l1mfrbp", "--ckpt-out", &p("b.ckpt")], root)?;
    let read = |f: &str| std::fs::read(root.join(f)).map_err(|e| format!("{f}: {e}"));
    check(read("a.ckpt")? == read("b.ckpt")?, || "retraining produced a different checkpoint".into())?;

    let files = ["rmse.tsv", "rmse_level0.tsv", "passes.tsv", "segments.tsv", "loss_curve.tsv", "manifest.json"];
    for exp in ["1", "2", "3"] {
        for run in ["x", "y"] {
            let out = p(&format!("eval{exp}{run}"));
            mfrbp(&["eval", "--experiment", exp, "--data", &p("data"), "--ckpt", &p("a.ckpt"), "--seed", "9", "--out", &out], root)?;
        }
        for f in files {
            let (x, y) = (read(&format!("eval{exp}x/{f}"))?, read(&format!("eval{exp}y/{f}"))?);
            check(x == y, || format!("experiment {exp}: {f} differs between identical runs"))?;
        }
    }
    mfrbp(&["eval", "--experiment", "2", "--data", &p("data"), "--ckpt", &p("a.ckpt"), "--seed", "10", "--out", &p("eval2z")], root)?;
    check(read("eval2x/manifest.json")? != read("eval2z/manifest.json")?, || "manifest ignores the seed".into())?;
    Ok("synth/train/eval twice: identical checkpoints, tables and manifests for experiments 1-3".into())
}

// ----------------------------------------------------------------------- main

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "gradient suite", gradient_suite),
        (2, "recursion wiring", recursion_wiring),
        (3, "FC-CSP reduces to CSP", fccsp_reduces_to_csp),
        (4, "constant-velocity oracle", cv_oracle),
        (5, "desk training", training_improves),
        (6, "planning-aware followers", planning_helps_followers),
        (7, "data pipeline", data_pipeline),
        (8, "CLI determinism", cli_determinism),
    ];
    let only: Option<u8> = std::env::var("MFRBP_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} PASS  {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} FAIL  {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
