//! Files written for an evaluation run.
//!
//! ```text
//! rmse.tsv           headline RMSE by horizon
//! rmse_level0.tsv    same agents, level-0 predictions
//! passes.tsv         per-pass tables
//! segments.tsv       one row per scored prediction
//! loss_curve.tsv     training loss by epoch (when known)
//! manifest.json      seed and input hashes
//! plots/*.svg        history, ground truth, level-0 and final means with covariance ellipses
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, SceneWindow};
use crate::error::{Error, Result};
use crate::eval::experiment::{EvalConfig, ExperimentResult, RunRecord};
use crate::eval::horizon_index;
use crate::scene::{Cov2, Point, TrajectoryGaussian};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Inputs and outputs identifying a run; contains no timestamps or paths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: u8,
    pub seed: u64,
    pub passes: usize,
    pub config_sha256: String,
    pub checkpoint_sha256: String,
    pub dataset_sha256: String,
    pub scored_predictions: usize,
    pub rmse_sha256: String,
}

impl Manifest {
    pub fn new(result: &ExperimentResult, passes: usize, config: &[u8], checkpoint: &[u8], dataset: &[u8]) -> Self {
        Self {
            tool: "mfrbp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            experiment: result.experiment.id(),
            seed: result.seed,
            passes,
            config_sha256: sha256_hex(config),
            checkpoint_sha256: sha256_hex(checkpoint),
            dataset_sha256: sha256_hex(dataset),
            scored_predictions: result.segments.len(),
            rmse_sha256: sha256_hex(result.table.to_tsv().as_bytes()),
        }
    }
}

/// Principal semi-axes `(major, minor)` scaled by `confidence`, and the major
/// axis angle in radians.
pub fn ellipse_axes(cov: &Cov2, confidence: f64) -> (f64, f64, f64) {
    let ([l1, l2], dir) = cov.eigen();
    (confidence * l1.sqrt(), confidence * l2.sqrt(), dir[1].atan2(dir[0]))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn segments_tsv(result: &ExperimentResult, horizons_s: &[f64]) -> String {
    let mut s = String::from("pass\twindow\ttarget\tego\tlevel");
    for h in horizons_s {
        let _ = write!(s, "\terr_{h}s");
    }
    for h in horizons_s {
        let _ = write!(s, "\tlevel0_err_{h}s");
    }
    s.push('\n');
    for r in &result.segments {
        let ego = r.ego.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
        let _ = write!(s, "{}\t{}\t{}\t{}\t{}", r.pass, r.window, r.target, ego, r.level);
        for e in r.errors.iter().chain(&r.level0_errors) {
            let _ = write!(s, "\t{e}");
        }
        s.push('\n');
    }
    s
}

pub fn passes_tsv(result: &ExperimentResult) -> String {
    let mut s = String::from("pass\thorizon_s\trmse_m\tcount\n");
    for (p, t) in result.pass_tables.iter().enumerate() {
        for i in 0..t.rmse.len() {
            let _ = writeln!(s, "{p}\t{}\t{}\t{}", t.horizons_s[i], t.rmse[i], t.counts[i]);
        }
    }
    s
}

pub fn loss_curve_tsv(curve: &[f64]) -> String {
    let mut s = String::from("epoch\tloss\n");
    for (e, l) in curve.iter().enumerate() {
        let _ = writeln!(s, "{e}\t{l}");
    }
    s
}

/// Writes every artifact of `result` into `out_dir`, overwriting earlier files.
pub fn emit_artifacts(
    result: &ExperimentResult,
    dataset: &Dataset,
    config: &EvalConfig,
    manifest: &Manifest,
    loss_curve: Option<&[f64]>,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("rmse.tsv"), &result.table.to_tsv())?;
    write(&out_dir.join("rmse_level0.tsv"), &result.level0_table.to_tsv())?;
    write(&out_dir.join("passes.tsv"), &passes_tsv(result))?;
    write(&out_dir.join("segments.tsv"), &segments_tsv(result, &config.horizons_s))?;
    if let Some(curve) = loss_curve {
        write(&out_dir.join("loss_curve.tsv"), &loss_curve_tsv(curve))?;
    }
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    write(&out_dir.join("manifest.json"), &(json + "\n"))?;
    let plots = out_dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    for run in result.runs.iter().take(config.plot_count) {
        let name = format!("window{}_{}.svg", run.window, run.ego.map(|e| format!("ego{e}")).unwrap_or_else(|| "all".into()));
        let w = &dataset.windows[run.window];
        write(&plots.join(name), &plot_run(run, w, dataset.horizon_steps(), config)?)?;
    }
    Ok(())
}

struct Frame {
    min: Point,
    scale: f64,
    height: f64,
}

impl Frame {
    const MARGIN: f64 = 20.0;
    const WIDTH: f64 = 1000.0;

    fn new(points: impl Iterator<Item = Point>) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        if !min[0].is_finite() {
            min = [0.0, 0.0];
            max = [1.0, 1.0];
        }
        min[1] -= 4.0;
        max[1] += 4.0;
        let scale = (Self::WIDTH - 2.0 * Self::MARGIN) / (max[0] - min[0]).max(1.0);
        let height = (max[1] - min[1]) * scale + 2.0 * Self::MARGIN;
        Self { min, scale, height }
    }

    // lateral axis points up
    fn px(&self, p: Point) -> (f64, f64) {
        (Self::MARGIN + (p[0] - self.min[0]) * self.scale, self.height - Self::MARGIN - (p[1] - self.min[1]) * self.scale)
    }
}

fn polyline(out: &mut String, frame: &Frame, pts: &[Point], color: &str, dash: bool) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts.iter().map(|p| frame.px(*p)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dash { " stroke-dasharray=\"4 3\"" } else { "" };
    let _ = writeln!(out, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>", coords.join(" "));
}

fn ellipses(out: &mut String, frame: &Frame, pred: &TrajectoryGaussian, rate: f64, config: &EvalConfig, color: &str) {
    for &h in &config.horizons_s {
        let Ok(i) = horizon_index(h, rate) else { continue };
        let (Some(m), Some(c)) = (pred.means().get(i), pred.covariances().get(i)) else { continue };
        let (a, b, angle) = ellipse_axes(c, config.ellipse_confidence);
        let (cx, cy) = frame.px(*m);
        let _ = writeln!(
            out,
            "<ellipse cx=\"{cx:.2}\" cy=\"{cy:.2}\" rx=\"{:.2}\" ry=\"{:.2}\" transform=\"rotate({:.2} {cx:.2} {cy:.2})\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"{color}\"/>",
            a * frame.scale,
            b * frame.scale,
            -angle.to_degrees()
        );
    }
}

/// SVG of one recursion run: every agent's history, the scored targets' ground
/// truth, and their level-0 and final means.
pub fn plot_run(run: &RunRecord, w: &SceneWindow, horizon: usize, config: &EvalConfig) -> Result<String> {
    let rate = w.history.sample_rate();
    let agents: Vec<_> = run.trace.agents().collect();
    let mut all = Vec::new();
    for a in &agents {
        all.extend(w.history.track(*a)?.positions());
        for p in run.trace.levels(*a) {
            all.extend(p.means().iter().copied());
        }
    }
    let frame = Frame::new(all.into_iter());
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{:.0}\" viewBox=\"0 0 {} {:.0}\">",
        Frame::WIDTH,
        frame.height,
        Frame::WIDTH,
        frame.height
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    for a in &agents {
        let hist: Vec<Point> = w.history.track(*a)?.positions().collect();
        let color = if Some(*a) == run.ego { "#222222" } else { "#999999" };
        polyline(&mut s, &frame, &hist, color, false);
    }
    for t in &run.targets {
        let levels = run.trace.levels(*t);
        if let Ok(truth) = w.future(*t, horizon) {
            polyline(&mut s, &frame, truth, "#2a9d3c", false);
        }
        if let Some(l0) = levels.first() {
            polyline(&mut s, &frame, l0.means(), "#1f5fbf", true);
            ellipses(&mut s, &frame, l0, rate, config, "#1f5fbf");
        }
        if levels.len() > 1 {
            let last = &levels[levels.len() - 1];
            polyline(&mut s, &frame, last.means(), "#c0392b", true);
            ellipses(&mut s, &frame, last, rate, config, "#c0392b");
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_axes_of_diagonal_covariance() {
        let c = Cov2::diagonal(9.0, 4.0);
        let (a, b, angle) = ellipse_axes(&c, 2.0);
        assert_eq!((a, b, angle), (6.0, 4.0, 0.0));
        let (a, b, angle) = ellipse_axes(&Cov2::diagonal(1.0, 16.0), 1.5);
        assert_eq!((a, b), (6.0, 1.5));
        assert!((angle - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn rotated_covariance_axes_match_eigenvalues() {
        // rotate diag(9, 1) by 30 degrees: R diag R^T
        let t = 30f64.to_radians();
        let (c, s) = (t.cos(), t.sin());
        let cov = Cov2 { xx: 9.0 * c * c + s * s, xy: (9.0 - 1.0) * c * s, yy: 9.0 * s * s + c * c };
        let (a, b, angle) = ellipse_axes(&cov, 1.0);
        assert!((a - 3.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        assert!((angle - t).abs() < 1e-12);
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
