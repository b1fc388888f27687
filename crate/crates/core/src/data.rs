//! Trajectory data: scene ingestion, windowing, normalization, the synthetic
//! multi-modal generator, and dataset splits.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// One observed/future pair. Positions are stored normalized: translated so
/// the last observed point is the origin, then divided by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub history: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
    /// Last observed position in scene units.
    pub origin: [f64; 2],
    pub scale: f64,
    pub scene: String,
    pub agent: i64,
    pub start_frame: i64,
    /// Generating mode for synthetic data.
    pub mode: Option<usize>,
}

impl TrajectoryWindow {
    /// Normalizes absolute positions around the last observed point.
    pub fn from_absolute(history: &[[f64; 2]], future: &[[f64; 2]], scale: f64) -> Result<Self> {
        let Some(&origin) = history.last() else {
            return Err(Error::InvalidArgument("empty history".into()));
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        let norm = |p: &[f64; 2]| [(p[0] - origin[0]) / scale, (p[1] - origin[1]) / scale];
        Ok(Self {
            history: history.iter().map(norm).collect(),
            future: future.iter().map(norm).collect(),
            origin,
            scale,
            scene: String::new(),
            agent: 0,
            start_frame: 0,
            mode: None,
        })
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale + self.origin[0], p[1] * self.scale + self.origin[1]]
    }

    pub fn denormalize_path(&self, path: &[[f64; 2]]) -> Vec<[f64; 2]> {
        path.iter().map(|&p| self.denormalize(p)).collect()
    }

    /// Ground-truth future in scene units.
    pub fn future_abs(&self) -> Vec<[f64; 2]> {
        self.denormalize_path(&self.future)
    }

    pub fn history_abs(&self) -> Vec<[f64; 2]> {
        self.denormalize_path(&self.history)
    }
}

// ---------------------------------------------------------------------------
// scenes

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub frame: i64,
    pub agent: i64,
    pub x: f64,
    pub y: f64,
}

/// Raw `frame agent x y` records from one scene file, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawScene {
    pub name: String,
    pub records: Vec<Record>,
}

/// A run of consecutive frames for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub agent: i64,
    pub start_frame: i64,
    pub points: Vec<[f64; 2]>,
}

/// Supported scene formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SceneFormat {
    #[serde(rename = "ethucy-txt")]
    EthUcyTxt,
}

/// Parses whitespace-separated `frame_id agent_id x y` lines. Blank lines and
/// lines starting with `#` are skipped. Frame and agent ids may be written as
/// floats (`10.0`) as long as they are integral.
pub fn load_scene(path: &Path, _format: SceneFormat) -> Result<RawScene> {
    let text = fs::read_to_string(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_scene(&text, &name, path)
}

pub fn parse_scene(text: &str, name: &str, path: &Path) -> Result<RawScene> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut records = Vec::new();
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| err(line_no, format!("bad {what} {s:?}")))?;
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite {what}")));
            }
            Ok(v)
        };
        let id = |s: &str, what: &str| -> Result<i64> {
            let v = num(s, what)?;
            if v.fract() != 0.0 {
                return Err(err(line_no, format!("{what} {s:?} is not an integer")));
            }
            Ok(v as i64)
        };
        let rec = Record {
            frame: id(fields[0], "frame id")?,
            agent: id(fields[1], "agent id")?,
            x: num(fields[2], "x")?,
            y: num(fields[3], "y")?,
        };
        if let Some(prev) = seen.insert((rec.frame, rec.agent), line_no) {
            return Err(err(line_no, format!("duplicate frame {} agent {} (first on line {prev})", rec.frame, rec.agent)));
        }
        records.push(rec);
    }
    Ok(RawScene { name: name.to_string(), records })
}

impl RawScene {
    /// Spacing between consecutive frames: the smallest positive increment
    /// seen for any agent, 1 when undetermined.
    pub fn frame_step(&self) -> i64 {
        let mut last: HashMap<i64, i64> = HashMap::new();
        let mut step: Option<i64> = None;
        for r in &self.records {
            if let Some(prev) = last.insert(r.agent, r.frame) {
                let d = r.frame - prev;
                if d > 0 {
                    step = Some(step.map_or(d, |s: i64| s.min(d)));
                }
            }
        }
        step.unwrap_or(1)
    }

    /// Per-agent runs of consecutive frames, in order of first appearance.
    /// Any break in the frame sequence (a gap or a step backwards) starts a
    /// new segment.
    pub fn segments(&self) -> Vec<Segment> {
        let step = self.frame_step();
        let mut segments: Vec<Segment> = Vec::new();
        let mut open: HashMap<i64, (usize, i64)> = HashMap::new();
        for r in &self.records {
            match open.get_mut(&r.agent) {
                Some((idx, last)) if r.frame == *last + step => {
                    segments[*idx].points.push([r.x, r.y]);
                    *last = r.frame;
                }
                _ => {
                    segments.push(Segment { agent: r.agent, start_frame: r.frame, points: vec![[r.x, r.y]] });
                    open.insert(r.agent, (segments.len() - 1, r.frame));
                }
            }
        }
        segments
    }
}

/// Sliding windows of `t_init + t_pred` frames over every segment.
pub fn make_windows(scene: &RawScene, t_init: usize, t_pred: usize, stride: usize, scale: f64) -> Result<Vec<TrajectoryWindow>> {
    if t_init == 0 || t_pred == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window lengths and stride must be positive".into()));
    }
    let span = t_init + t_pred;
    let step = scene.frame_step();
    let mut out = Vec::new();
    for seg in scene.segments() {
        if seg.points.len() < span {
            continue;
        }
        for start in (0..=seg.points.len() - span).step_by(stride) {
            let pts = &seg.points[start..start + span];
            let mut w = TrajectoryWindow::from_absolute(&pts[..t_init], &pts[t_init..], scale)?;
            w.scene = scene.name.clone();
            w.agent = seg.agent;
            w.start_frame = seg.start_frame + start as i64 * step;
            out.push(w);
        }
    }
    Ok(out)
}

/// Splits named scene files for leave-one-out evaluation: every scene except
/// `holdout` trains, `holdout` tests.
pub fn leave_one_out<'a>(scenes: &'a [RawScene], holdout: &str) -> Result<(Vec<&'a RawScene>, &'a RawScene)> {
    let test = scenes
        .iter()
        .find(|s| s.name == holdout)
        .ok_or_else(|| Error::InvalidArgument(format!("holdout scene {holdout:?} not among inputs")))?;
    Ok((scenes.iter().filter(|s| s.name != holdout).collect(), test))
}

pub fn load_scenes(paths: &[PathBuf], format: SceneFormat) -> Result<Vec<RawScene>> {
    paths.iter().map(|p| load_scene(p, format)).collect()
}

/// Index order for one epoch, reproducible from the seed and epoch number.
pub fn shuffled_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15), Stream::Shuffle);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

// ---------------------------------------------------------------------------
// synthetic data

/// Agents walk straight along +x for the observed window and then follow one
/// of `modes` circular arcs with evenly spaced turn rates in
/// `[-max_turn, max_turn]` (a single mode goes straight). Every position gets
/// isotropic Gaussian jitter of standard deviation `noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub modes: usize,
    pub noise: f64,
    pub count: usize,
    pub seed: u64,
    /// Distance per frame.
    pub speed: f64,
    /// Heading change per frame for the outermost modes, radians.
    pub max_turn: f64,
    pub t_init: usize,
    pub t_pred: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { modes: 3, noise: 0.05, count: 2000, seed: 0, speed: 0.25, max_turn: 0.12, t_init: 8, t_pred: 12 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.count == 0 || self.t_init == 0 || self.t_pred == 0 {
            return Err(Error::InvalidArgument("synthetic modes, count and lengths must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.speed > 0.0 && self.max_turn >= 0.0) {
            return Err(Error::InvalidArgument("synthetic noise/speed/turn out of range".into()));
        }
        Ok(())
    }

    pub fn turn_rate(&self, mode: usize) -> f64 {
        if self.modes == 1 {
            0.0
        } else {
            -self.max_turn + 2.0 * self.max_turn * mode as f64 / (self.modes - 1) as f64
        }
    }

    /// Noise-free future of one mode, relative to the last observed point.
    pub fn centerline(&self, mode: usize) -> Vec<[f64; 2]> {
        let w = self.turn_rate(mode);
        let mut p = [0.0, 0.0];
        (1..=self.t_pred)
            .map(|t| {
                let heading = w * t as f64;
                p[0] += self.speed * heading.cos();
                p[1] += self.speed * heading.sin();
                p
            })
            .collect()
    }

    /// Half of the smallest average displacement between two centerlines.
    /// A prediction closer than this to a centerline unambiguously belongs to
    /// that mode.
    pub fn mode_halfwidth(&self) -> f64 {
        let lines: Vec<_> = (0..self.modes).map(|m| self.centerline(m)).collect();
        let mut best = f64::INFINITY;
        for i in 0..lines.len() {
            for j in i + 1..lines.len() {
                best = best.min(crate::evaluation::ade(&lines[i], &lines[j]).expect("equal lengths"));
            }
        }
        if best.is_finite() {
            0.5 * best
        } else {
            f64::INFINITY
        }
    }

    pub fn generate(&self) -> Result<Vec<TrajectoryWindow>> {
        self.validate()?;
        let mut rng = rng::stream(self.seed, Stream::Synthetic);
        let centerlines: Vec<_> = (0..self.modes).map(|m| self.centerline(m)).collect();
        let jitter = |rng: &mut rng::Rng| -> [f64; 2] {
            if self.noise == 0.0 {
                return [0.0, 0.0];
            }
            let n = rng::standard_normal_vec(rng, 2);
            [self.noise * n[0], self.noise * n[1]]
        };
        let mut out = Vec::with_capacity(self.count);
        for i in 0..self.count {
            let mode = rng.gen_range(0..self.modes);
            let origin = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let history: Vec<[f64; 2]> = (0..self.t_init)
                .map(|t| {
                    let back = (self.t_init - 1 - t) as f64 * self.speed;
                    let j = jitter(&mut rng);
                    [origin[0] - back + j[0], origin[1] + j[1]]
                })
                .collect();
            let future: Vec<[f64; 2]> = centerlines[mode]
                .iter()
                .map(|c| {
                    let j = jitter(&mut rng);
                    [origin[0] + c[0] + j[0], origin[1] + c[1] + j[1]]
                })
                .collect();
            let mut w = TrajectoryWindow::from_absolute(&history, &future, 1.0)?;
            w.scene = "synthetic".into();
            w.agent = i as i64;
            w.mode = Some(mode);
            out.push(w);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(text: &str) -> Result<RawScene> {
        parse_scene(text, "t", Path::new("t.txt"))
    }

    #[test]
    fn empty_and_comment_only_files() {
        assert!(scene("").unwrap().records.is_empty());
        assert!(scene("# header\n\n   \n").unwrap().records.is_empty());
    }

    #[test]
    fn single_line() {
        let s = scene("10.0\t1.0\t3.5\t-2.25\n").unwrap();
        assert_eq!(s.records, vec![Record { frame: 10, agent: 1, x: 3.5, y: -2.25 }]);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        match scene("0 1 0 0\n\n10 1 0 zz\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(scene("0 1 0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(scene("0.5 1 0 0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(scene("0 1 0 0\n0 1 1 1\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn gap_splits_segment() {
        // agent 1: frames 0..=90 step 10, gap, then 150..=240 -> 10 + 10 lines
        let mut text = String::new();
        for f in (0..=90).step_by(10) {
            text.push_str(&format!("{f} 1 {}.0 0.0\n", f / 10));
        }
        for f in (150..=240).step_by(10) {
            text.push_str(&format!("{f} 1 {}.0 1.0\n", f / 10));
        }
        let s = scene(&text).unwrap();
        assert_eq!(s.records.len(), 20);
        assert_eq!(s.frame_step(), 10);
        let segs = s.segments();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].points.len(), 10);
        assert_eq!(segs[1].start_frame, 150);
    }

    #[test]
    fn backwards_frame_splits_instead_of_failing() {
        let s = scene("0 1 0 0\n1 1 0 0\n2 1 0 0\n0 2 0 0\n1 2 0 0\n").unwrap();
        assert_eq!(s.segments().len(), 2);
        let s = scene("5 1 0 0\n6 1 0 0\n2 1 0 0\n3 1 0 0\n").unwrap();
        assert_eq!(s.segments().len(), 2);
    }

    fn straight_scene(frames: usize) -> RawScene {
        let text: String = (0..frames).map(|f| format!("{} 7 {} {}\n", f * 10, f as f64 * 0.5, 1.0)).collect();
        scene(&text).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&straight_scene(19), 8, 12, 1, 1.0).unwrap().len(), 0);
        assert_eq!(make_windows(&straight_scene(20), 8, 12, 1, 1.0).unwrap().len(), 1);
        assert_eq!(make_windows(&straight_scene(25), 8, 12, 1, 1.0).unwrap().len(), 6);
        assert_eq!(make_windows(&straight_scene(25), 8, 12, 2, 1.0).unwrap().len(), 3);
    }

    #[test]
    fn windows_are_normalized_and_tagged() {
        let ws = make_windows(&straight_scene(21), 8, 12, 1, 2.0).unwrap();
        let w = &ws[1];
        assert_eq!(w.history[7], [0.0, 0.0]);
        assert_eq!(w.origin, [4.0, 1.0]);
        assert_eq!(w.start_frame, 10);
        assert_eq!(w.agent, 7);
        assert_eq!(w.future[0], [0.25, 0.0]);
        assert_eq!(w.future_abs()[0], [4.5, 1.0]);
    }

    #[test]
    fn windows_do_not_mix_agents() {
        let mut text = String::new();
        for f in 0..12 {
            text.push_str(&format!("{f} 1 0 0\n{f} 2 5 5\n"));
        }
        for f in 12..20 {
            text.push_str(&format!("{f} 2 5 5\n"));
        }
        let ws = make_windows(&scene(&text).unwrap(), 8, 12, 1, 1.0).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].agent, 2);
    }

    #[test]
    fn leave_one_out_split() {
        let scenes = vec![
            RawScene { name: "a".into(), records: vec![] },
            RawScene { name: "b".into(), records: vec![] },
            RawScene { name: "c".into(), records: vec![] },
        ];
        let (train, test) = leave_one_out(&scenes, "b").unwrap();
        assert_eq!(test.name, "b");
        assert_eq!(train.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), vec!["a", "c"]);
        assert!(leave_one_out(&scenes, "z").is_err());
    }

    #[test]
    fn shuffle_is_reproducible_permutation() {
        let a = shuffled_order(50, 3, 1);
        assert_eq!(a, shuffled_order(50, 3, 1));
        assert_ne!(a, shuffled_order(50, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn noiseless_single_mode_futures_identical() {
        let spec = SyntheticSpec { modes: 1, noise: 0.0, count: 20, ..SyntheticSpec::default() };
        let ws = spec.generate().unwrap();
        let close = |a: &[[f64; 2]], b: &[[f64; 2]]| a.iter().zip(b).all(|(p, q)| (p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        let line = spec.centerline(0);
        assert!(ws.iter().all(|w| close(&w.future, &line) && close(&w.history, &ws[0].history)));
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec { count: 30, ..SyntheticSpec::default() };
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(spec.generate().unwrap(), other.generate().unwrap());
    }

    #[test]
    fn mode_frequencies_are_uniform() {
        let spec = SyntheticSpec { count: 10_000, ..SyntheticSpec::default() };
        let ws = spec.generate().unwrap();
        let mut counts = [0usize; 3];
        for w in &ws {
            counts[w.mode.unwrap()] += 1;
        }
        let expected = 10_000.0 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 2 degrees of freedom, 0.1% critical value
        assert!(chi2 < 13.816, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn centerlines_separate_modes() {
        let spec = SyntheticSpec::default();
        let hw = spec.mode_halfwidth();
        assert!(hw > 0.2 && hw < 1.0, "{hw}");
        assert_eq!(spec.centerline(1).last().unwrap()[1], 0.0);
        let left = spec.centerline(2);
        let right = spec.centerline(0);
        assert!((left[11][1] + right[11][1]).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trip() {
        let spec = SyntheticSpec { count: 50, ..SyntheticSpec::default() };
        let mut rng = rng::stream(2, Stream::Synthetic);
        for _ in 0..50 {
            let h: Vec<[f64; 2]> = (0..8).map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)]).collect();
            let f: Vec<[f64; 2]> = (0..12).map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)]).collect();
            let w = TrajectoryWindow::from_absolute(&h, &f, rng.gen_range(0.1..3.0)).unwrap();
            for (a, b) in w.future_abs().iter().zip(&f).chain(w.history_abs().iter().zip(&h)) {
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
        assert!(spec.generate().unwrap().iter().all(|w| w.history[7] == [0.0, 0.0]));
    }
}
