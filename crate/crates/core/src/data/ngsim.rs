//! NGSIM-style trajectory text.
//!
//! One record per line, fields separated by whitespace or commas:
//!
//! ```text
//! vehicle_id frame_id local_x local_y [lane_id]
//! ```
//!
//! `local_x` is the lateral and `local_y` the longitudinal coordinate, both in
//! feet. Lines starting with `#` and a leading header line are skipped. Lines
//! with 18 or more fields are read as full NGSIM rows (vehicle id, frame id,
//! local x, local y, lane id in columns 1, 2, 5, 6, 14). Internally `x` is
//! longitudinal and `y` lateral, in meters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{AgentId, AgentState, TrackHistory};

pub const FEET_TO_METERS: f64 = 0.3048;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawTrajectoryRecord {
    pub vehicle_id: AgentId,
    pub frame_id: u64,
    /// Longitudinal position, meters.
    pub x: f64,
    /// Lateral position, meters.
    pub y: f64,
    pub lane_id: Option<i64>,
}

/// All records of one vehicle in frame order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedTrack {
    pub vehicle_id: AgentId,
    pub records: Vec<RawTrajectoryRecord>,
    /// Frames that follow a gap in the recording.
    pub gaps: Vec<u64>,
}

impl ParsedTrack {
    /// Contiguous pieces of the track.
    pub fn runs(&self) -> Result<Vec<TrackHistory>> {
        let mut runs = Vec::new();
        let mut current: Vec<AgentState> = Vec::new();
        for r in &self.records {
            if current.last().is_some_and(|s| s.frame + 1 != r.frame_id) {
                runs.push(TrackHistory::new(self.vehicle_id, std::mem::take(&mut current))?);
            }
            current.push(AgentState::new(r.x, r.y, r.frame_id));
        }
        if !current.is_empty() {
            runs.push(TrackHistory::new(self.vehicle_id, current)?);
        }
        Ok(runs)
    }

    /// Longest contiguous piece (earliest on ties).
    pub fn longest_run(&self) -> Result<TrackHistory> {
        let mut best: Option<TrackHistory> = None;
        for r in self.runs()? {
            if best.as_ref().is_none_or(|b| r.len() > b.len()) {
                best = Some(r);
            }
        }
        best.ok_or_else(|| Error::InvalidTrack { agent: self.vehicle_id, reason: "no records".into() })
    }
}

fn field<T: std::str::FromStr>(fields: &[&str], idx: usize, name: &str, line: usize) -> Result<T> {
    let raw = fields.get(idx).ok_or_else(|| Error::Parse { line, message: format!("missing {name}") })?;
    raw.parse().map_err(|_| Error::Parse { line, message: format!("invalid {name} {raw:?}") })
}

fn finite_feet(fields: &[&str], idx: usize, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field(fields, idx, name, line)?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("{name} is not finite") });
    }
    Ok(v * FEET_TO_METERS)
}

/// Parses trajectory text into per-vehicle tracks, ordered by vehicle id.
pub fn parse_trajectories(text: &str) -> Result<Vec<ParsedTrack>> {
    let mut tracks: BTreeMap<AgentId, ParsedTrack> = BTreeMap::new();
    let mut seen_data = false;
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        if !seen_data && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            seen_data = true;
            continue; // header
        }
        seen_data = true;
        let (id_col, frame_col, lx_col, ly_col, lane_col) =
            if fields.len() >= 18 { (0, 1, 4, 5, Some(13)) } else { (0, 1, 2, 3, (fields.len() >= 5).then_some(4)) };
        if fields.len() < 4 {
            return Err(Error::Parse { line, message: format!("expected at least 4 fields, found {}", fields.len()) });
        }
        let vehicle_id = AgentId(field(&fields, id_col, "vehicle_id", line)?);
        let frame: i64 = field(&fields, frame_col, "frame_id", line)?;
        if frame < 0 {
            return Err(Error::Parse { line, message: format!("negative frame_id {frame}") });
        }
        let y = finite_feet(&fields, lx_col, "local_x", line)?;
        let x = finite_feet(&fields, ly_col, "local_y", line)?;
        let lane_id = lane_col.map(|c| field::<i64>(&fields, c, "lane_id", line)).transpose()?;
        let rec = RawTrajectoryRecord { vehicle_id, frame_id: frame as u64, x, y, lane_id };

        let track = tracks.entry(vehicle_id).or_insert_with(|| ParsedTrack { vehicle_id, records: Vec::new(), gaps: Vec::new() });
        if let Some(prev) = track.records.last() {
            if rec.frame_id <= prev.frame_id {
                return Err(Error::NonMonotoneFrames { vehicle: vehicle_id, frame, line });
            }
            if rec.frame_id != prev.frame_id + 1 {
                track.gaps.push(rec.frame_id);
            }
        }
        track.records.push(rec);
    }
    Ok(tracks.into_values().collect())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<ParsedTrack>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectories(&text)
}

/// Shortest decimal feet value whose conversion reproduces `meters` exactly.
fn feet_for(meters: f64) -> Result<String> {
    let guess = meters / FEET_TO_METERS;
    let mut best: Option<String> = None;
    for d in -4i64..=4 {
        let cand = step_ulps(guess, d);
        if cand * FEET_TO_METERS == meters {
            let s = format!("{cand}");
            if best.as_ref().is_none_or(|b| s.len() < b.len()) {
                best = Some(s);
            }
        }
    }
    best.ok_or_else(|| Error::Format(format!("{meters} m has no exact feet representation")))
}

fn step_ulps(v: f64, n: i64) -> f64 {
    let mut out = v;
    for _ in 0..n.unsigned_abs() {
        out = if n > 0 { out.next_up() } else { out.next_down() };
    }
    out
}

/// Writes tracks in the five-column format, one vehicle after another.
///
/// Parsing the output reproduces the tracks exactly.
pub fn write_trajectories(tracks: &[ParsedTrack]) -> Result<String> {
    let mut out = String::from("vehicle_id,frame_id,local_x,local_y,lane_id\n");
    for t in tracks {
        for r in &t.records {
            let lane = r.lane_id.map(|l| l.to_string()).unwrap_or_default();
            let sep = if r.lane_id.is_some() { "," } else { "" };
            writeln!(out, "{},{},{},{}{sep}{lane}", r.vehicle_id, r.frame_id, feet_for(r.y)?, feet_for(r.x)?)
                .expect("writing to a String cannot fail");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feet_converted_and_axes_swapped() {
        let t = parse_trajectories("1 0 10.0 100.0 2\n").unwrap();
        let r = t[0].records[0];
        assert_eq!(r.y, 10.0 * 0.3048);
        assert!((r.y - 3.048).abs() < 1e-12);
        assert_eq!(r.x, 100.0 * 0.3048);
        assert_eq!(r.lane_id, Some(2));
    }

    #[test]
    fn interleaved_rows_group_by_vehicle() {
        let text = "# comment\nvehicle,frame,x,y\n2,0,1,1\n1,0,2,2\n2,1,1,2\n1,1,2,3\n";
        let t = parse_trajectories(text).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].vehicle_id, AgentId(1));
        assert_eq!(t[1].records.iter().map(|r| r.frame_id).collect::<Vec<_>>(), vec![0, 1]);
        assert!(t[0].gaps.is_empty());
    }

    #[test]
    fn gaps_flagged_and_split() {
        let t = parse_trajectories("1 0 0 0\n1 1 0 1\n1 5 0 2\n1 6 0 3\n1 7 0 4\n").unwrap();
        assert_eq!(t[0].gaps, vec![5]);
        let runs = t[0].runs().unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(t[0].longest_run().unwrap().first_frame(), 5);
    }

    #[test]
    fn malformed_rows_report_line() {
        assert!(matches!(parse_trajectories("1 0 0 0\n1 x 0 0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_trajectories("1 0 0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trajectories("1 3 0 0\n1 2 0 0\n"), Err(Error::NonMonotoneFrames { line: 2, .. })));
        assert!(matches!(parse_trajectories("1 3 0 0\n1 3 0 0\n"), Err(Error::NonMonotoneFrames { .. })));
    }

    #[test]
    fn full_ngsim_rows() {
        let row = "7 12 500 1118846980200 16.467 35.381 6451203.054 1873252.943 14.5 4.9 2 40.00 0.00 2 0 13 0.00 0.00";
        let t = parse_trajectories(row).unwrap();
        let r = t[0].records[0];
        assert_eq!((r.vehicle_id, r.frame_id, r.lane_id), (AgentId(7), 12, Some(2)));
        assert_eq!(r.y, 16.467 * FEET_TO_METERS);
        assert_eq!(r.x, 35.381 * FEET_TO_METERS);
    }

    #[test]
    fn write_parse_round_trip() {
        let text = "1,0,16.467,35.381,2\n1,1,16.47,39.4,2\n2,0,-3.125,0.001\n";
        let t = parse_trajectories(text).unwrap();
        let again = parse_trajectories(&write_trajectories(&t).unwrap()).unwrap();
        assert_eq!(again, t);
        for (a, b) in again.iter().flat_map(|t| &t.records).zip(t.iter().flat_map(|t| &t.records)) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }
    }
}
