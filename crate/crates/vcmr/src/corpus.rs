//! Manifest management and corpus curation.
//!
//! A manifest is a line-delimited UTF-8 file: the first line is a JSON
//! header carrying `schema_version`, every following line is one JSON
//! [`TrackRecord`]. Scene lists live in sidecar files (`<track_id>.scenes`,
//! one boundary in seconds per line) and drive the scene-length curation
//! filter: any video containing a scene longer than the threshold is
//! discarded.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One media item: audio, optional paired video, tags and split assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRecord {
    pub track_id: String,
    pub audio_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_path: Option<String>,
    pub duration_s: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

/// Scene boundaries in seconds: starts at 0, ends at the video duration,
/// strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneList {
    boundaries_s: Vec<f64>,
}

impl SceneList {
    pub fn new(boundaries_s: Vec<f64>) -> Result<Self> {
        if boundaries_s.len() < 2 {
            return Err(Error::InvalidInput(
                "scene list needs at least start and end boundaries".into(),
            ));
        }
        if boundaries_s[0] != 0.0 {
            return Err(Error::InvalidInput("scene boundaries must start at 0".into()));
        }
        if !boundaries_s.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput("scene boundaries must be strictly increasing".into()));
        }
        Ok(SceneList { boundaries_s })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries_s
    }

    pub fn duration_s(&self) -> f64 {
        *self.boundaries_s.last().unwrap()
    }

    pub fn scene_lengths(&self) -> Vec<f64> {
        self.boundaries_s.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn longest_scene_s(&self) -> f64 {
        self.scene_lengths().into_iter().fold(0.0, f64::max)
    }

    /// Sidecar format: one boundary (seconds) per line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut boundaries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|_| Error::Data(format!("bad scene boundary {line:?} in {}", path.display())))?;
            boundaries.push(v);
        }
        SceneList::new(boundaries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for b in &self.boundaries_s {
            out.push_str(&format!("{b}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<TrackRecord>,
    pub schema_version: u32,
}

impl Manifest {
    pub fn new(records: Vec<TrackRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.track_id.clone()) {
                return Err(Error::Data(format!("duplicate track_id {:?} in manifest", r.track_id)));
            }
        }
        Ok(Manifest { records, schema_version: MANIFEST_SCHEMA_VERSION })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrackRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, track_id: &str) -> Option<&TrackRecord> {
        self.records.iter().find(|r| r.track_id == track_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("empty manifest {}", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        struct Header {
            schema_version: u32,
        }
        let header: Header = serde_json::from_str(&header)
            .map_err(|e| Error::Data(format!("bad manifest header in {}: {e}", path.display())))?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest schema_version {} (expected {})",
                header.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrackRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("bad record on line {} of {}: {e}", i + 2, path.display())))?;
            records.push(rec);
        }
        Manifest::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", serde_json::json!({ "schema_version": self.schema_version }))
            .map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Declare a cut between consecutive frames whose mean-intensity difference
/// exceeds `cut_threshold`; boundaries are the cut times plus 0 and the end.
pub fn detect_scenes(
    frame_intensity_series: &[f64],
    fps: f64,
    cut_threshold: f64,
) -> Result<SceneList> {
    if frame_intensity_series.is_empty() {
        return Err(Error::InvalidInput("empty frame intensity series".into()));
    }
    if fps <= 0.0 {
        return Err(Error::InvalidInput("fps must be positive".into()));
    }
    if cut_threshold <= 0.0 {
        return Err(Error::InvalidInput("cut threshold must be positive".into()));
    }
    let duration = frame_intensity_series.len() as f64 / fps;
    let mut boundaries = vec![0.0];
    for (i, w) in frame_intensity_series.windows(2).enumerate() {
        if (w[1] - w[0]).abs() > cut_threshold {
            // cut between frame i and i+1, at the time frame i+1 starts
            boundaries.push((i + 1) as f64 / fps);
        }
    }
    boundaries.push(duration);
    SceneList::new(boundaries)
}

/// Outcome of the scene-length filter: the surviving manifest plus the
/// track ids skipped because no scene list was available.
#[derive(Debug)]
pub struct CurationOutcome {
    pub manifest: Manifest,
    pub skipped: Vec<String>,
}

/// Keep exactly the records whose longest scene is `<= max_scene_s`
/// (the discard rule is strictly "more than"). Records without video are
/// dropped; video records missing a scene list are reported and excluded.
pub fn filter_by_scene_length(
    manifest: &Manifest,
    scenes: &BTreeMap<String, SceneList>,
    max_scene_s: f64,
) -> Result<CurationOutcome> {
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for r in &manifest.records {
        if r.video_path.is_none() {
            continue;
        }
        match scenes.get(&r.track_id) {
            Some(list) => {
                if list.longest_scene_s() <= max_scene_s {
                    kept.push(r.clone());
                }
            }
            None => skipped.push(r.track_id.clone()),
        }
    }
    Ok(CurationOutcome { manifest: Manifest::new(kept)?, skipped })
}

/// Deterministic uniform subsample of the train split; valid/test untouched.
/// The subset size is `round(fraction * n_train)`.
pub fn subsample_training(manifest: &Manifest, fraction: f64, seed: u64) -> Result<Manifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction {fraction} outside (0, 1]")));
    }
    let train: Vec<&TrackRecord> = manifest.split(Split::Train).collect();
    let n_keep = (fraction * train.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let keep: HashSet<usize> = idx.into_iter().take(n_keep).collect();

    let mut records = Vec::new();
    let mut train_pos = 0usize;
    for r in &manifest.records {
        if r.split == Split::Train {
            if keep.contains(&train_pos) {
                records.push(r.clone());
            }
            train_pos += 1;
        } else {
            records.push(r.clone());
        }
    }
    Manifest::new(records)
}

/// One evaluation window. `padded` marks a track shorter than the segment,
/// which is zero-padded up to segment length downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub padded: bool,
}

/// Overlapping evaluation windows: hop = segment * (1 - overlap), all windows
/// inside [0, duration], with a final end-aligned window appended when the
/// hop grid does not reach the end. A track shorter than one segment yields
/// a single padded window spanning the whole track.
pub fn chunk_for_eval(duration_s: f64, segment_s: f64, overlap: f64) -> Result<Vec<EvalWindow>> {
    if segment_s <= 0.0 {
        return Err(Error::InvalidInput("segment length must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidInput(format!("overlap {overlap} outside [0, 1)")));
    }
    if duration_s < segment_s {
        return Ok(vec![EvalWindow { start_s: 0.0, end_s: duration_s, padded: true }]);
    }
    let hop = segment_s * (1.0 - overlap);
    let mut windows = Vec::new();
    let mut start = 0.0;
    let eps = 1e-9 * segment_s.max(1.0);
    while start + segment_s <= duration_s + eps {
        windows.push(EvalWindow { start_s: start, end_s: (start + segment_s).min(duration_s), padded: false });
        start += hop;
    }
    let last_end = windows.last().map(|w| w.end_s).unwrap_or(0.0);
    if duration_s - last_end > eps {
        windows.push(EvalWindow { start_s: duration_s - segment_s, end_s: duration_s, padded: false });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(id: &str, split: Split, video: bool) -> TrackRecord {
        TrackRecord {
            track_id: id.into(),
            audio_path: format!("{id}.wav"),
            video_path: video.then(|| format!("{id}.frames")),
            duration_s: 10.0,
            split,
            tags: None,
        }
    }

    #[test]
    fn detect_scenes_constant_series_is_single_scene() {
        let s = detect_scenes(&[5.0; 10], 2.0, 0.1).unwrap();
        assert_eq!(s.boundaries(), &[0.0, 5.0]);
    }

    #[test]
    fn detect_scenes_single_cut() {
        let s = detect_scenes(&[0.0, 0.0, 0.0, 100.0, 100.0, 100.0], 1.0, 50.0).unwrap();
        assert_eq!(s.boundaries(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn detect_scenes_alternating_series_cuts_everywhere() {
        let s = detect_scenes(&[0.0, 100.0, 0.0, 100.0], 1.0, 50.0).unwrap();
        assert_eq!(s.boundaries(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.scene_lengths().len(), 4);
    }

    #[test]
    fn detect_scenes_rejects_empty_series() {
        assert!(detect_scenes(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn detect_scenes_lengths_sum_to_duration() {
        let series: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 20.0).collect();
        let fps = 5.0;
        let s = detect_scenes(&series, fps, 50.0).unwrap();
        let total: f64 = s.scene_lengths().iter().sum();
        assert_relative_eq!(total, series.len() as f64 / fps, epsilon = 1.0 / fps);
    }

    #[test]
    fn scene_filter_threshold_is_strict() {
        let manifest = Manifest::new(vec![
            record("keep", Split::Train, true),
            record("drop", Split::Train, true),
            record("exact", Split::Train, true),
            record("noscenes", Split::Train, true),
            record("novideo", Split::Train, false),
        ])
        .unwrap();
        let mut scenes = BTreeMap::new();
        scenes.insert("keep".into(), SceneList::new(vec![0.0, 10.0, 35.0]).unwrap());
        scenes.insert("drop".into(), SceneList::new(vec![0.0, 10.0, 45.0]).unwrap());
        scenes.insert("exact".into(), SceneList::new(vec![0.0, 30.0]).unwrap());
        let out = filter_by_scene_length(&manifest, &scenes, 30.0).unwrap();
        let ids: Vec<&str> = out.manifest.records.iter().map(|r| r.track_id.as_str()).collect();
        assert_eq!(ids, vec!["keep", "exact"]);
        assert_eq!(out.skipped, vec!["noscenes".to_string()]);
    }

    #[test]
    fn scene_filter_is_idempotent() {
        let manifest = Manifest::new(vec![record("a", Split::Train, true), record("b", Split::Test, true)]).unwrap();
        let mut scenes = BTreeMap::new();
        scenes.insert("a".into(), SceneList::new(vec![0.0, 25.0]).unwrap());
        scenes.insert("b".into(), SceneList::new(vec![0.0, 31.0]).unwrap());
        let once = filter_by_scene_length(&manifest, &scenes, 30.0).unwrap().manifest;
        let twice = filter_by_scene_length(&once, &scenes, 30.0).unwrap().manifest;
        assert_eq!(once.records.len(), twice.records.len());
    }

    #[test]
    fn subsample_identity_and_count() {
        let records: Vec<TrackRecord> =
            (0..100).map(|i| record(&format!("t{i}"), Split::Train, false)).collect();
        let manifest = Manifest::new(records).unwrap();
        let full = subsample_training(&manifest, 1.0, 7).unwrap();
        assert_eq!(full.records.len(), 100);
        let tenth = subsample_training(&manifest, 0.10, 7).unwrap();
        assert_eq!(tenth.split(Split::Train).count(), 10);
        let again = subsample_training(&manifest, 0.10, 7).unwrap();
        let a: Vec<_> = tenth.records.iter().map(|r| &r.track_id).collect();
        let b: Vec<_> = again.records.iter().map(|r| &r.track_id).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_leaves_other_splits_untouched() {
        let mut records: Vec<TrackRecord> =
            (0..20).map(|i| record(&format!("t{i}"), Split::Train, false)).collect();
        records.push(record("v", Split::Valid, false));
        records.push(record("s", Split::Test, false));
        let manifest = Manifest::new(records).unwrap();
        let sub = subsample_training(&manifest, 0.5, 3).unwrap();
        assert_eq!(sub.split(Split::Train).count(), 10);
        assert_eq!(sub.split(Split::Valid).count(), 1);
        assert_eq!(sub.split(Split::Test).count(), 1);
    }

    #[test]
    fn subsample_rejects_bad_fraction() {
        let manifest = Manifest::new(vec![record("a", Split::Train, false)]).unwrap();
        assert!(subsample_training(&manifest, 0.0, 1).is_err());
        assert!(subsample_training(&manifest, 1.5, 1).is_err());
    }

    #[test]
    fn chunk_windows_hand_checked() {
        let w = chunk_for_eval(12.30, 6.15, 0.5).unwrap();
        assert_eq!(w.len(), 3);
        assert_relative_eq!(w[0].start_s, 0.0);
        assert_relative_eq!(w[1].start_s, 3.075);
        assert_relative_eq!(w[2].start_s, 6.15);
        assert_relative_eq!(w[2].end_s, 12.30);
        assert!(w.iter().all(|w| !w.padded));
    }

    #[test]
    fn chunk_exact_fit_is_single_window() {
        let w = chunk_for_eval(6.15, 6.15, 0.5).unwrap();
        assert_eq!(w.len(), 1);
        assert_relative_eq!(w[0].end_s, 6.15);
    }

    #[test]
    fn chunk_appends_end_aligned_tail() {
        let w = chunk_for_eval(10.0, 6.15, 0.5).unwrap();
        assert_eq!(w.len(), 3);
        assert_relative_eq!(w[1].start_s, 3.075);
        assert_relative_eq!(w[2].start_s, 10.0 - 6.15);
        assert_relative_eq!(w[2].end_s, 10.0);
    }

    #[test]
    fn chunk_short_track_pads() {
        let w = chunk_for_eval(3.0, 6.15, 0.5).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].padded);
        assert_relative_eq!(w[0].end_s, 3.0);
    }

    #[test]
    fn chunk_windows_cover_every_instant() {
        for duration in [6.15, 7.0, 10.0, 12.3, 61.4] {
            let windows = chunk_for_eval(duration, 6.15, 0.5).unwrap();
            for i in 0..1000 {
                let t = duration * i as f64 / 999.0;
                assert!(
                    windows.iter().any(|w| w.start_s - 1e-9 <= t && t <= w.end_s + 1e-9),
                    "instant {t} uncovered for duration {duration}"
                );
            }
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let manifest = Manifest::new(vec![record("a", Split::Train, true), record("b", Split::Test, false)]).unwrap();
        manifest.save(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.records[0].track_id, "a");
        assert_eq!(loaded.schema_version, MANIFEST_SCHEMA_VERSION);
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        assert!(Manifest::new(vec![record("a", Split::Train, false), record("a", Split::Test, false)]).is_err());
    }
}
