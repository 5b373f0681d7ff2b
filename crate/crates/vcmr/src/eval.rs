//! Multi-label tagging metrics, overlap-window inference, and tag-group reports.
//!
//! ROC-AUC uses the tie-averaged rank (Mann–Whitney) formulation; PR-AUC is
//! average precision computed over distinct score thresholds, which makes tied
//! blocks order-independent. Tags whose test labels contain a single class are
//! skipped (an AUC is undefined there) and reported by name rather than
//! propagating NaN through macro averages.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;

use crate::corpus::chunk_for_eval;
use crate::error::{Error, Result};
use crate::features::AudioWaveform;

/// Scores for `n_tracks x n_tags`, each in [0, 1], with row/column names.
#[derive(Debug, Clone)]
pub struct PredictionMatrix {
    pub scores: Array2<f64>,
    pub track_ids: Vec<String>,
    pub tag_vocabulary: Vec<String>,
}

impl PredictionMatrix {
    pub fn new(
        scores: Array2<f64>,
        track_ids: Vec<String>,
        tag_vocabulary: Vec<String>,
    ) -> Result<Self> {
        if scores.shape() != [track_ids.len(), tag_vocabulary.len()] {
            return Err(Error::Shape {
                expected: format!("({}, {})", track_ids.len(), tag_vocabulary.len()),
                actual: format!("{:?}", scores.shape()),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("prediction matrix contains non-finite scores".into()));
        }
        Ok(PredictionMatrix { scores, track_ids, tag_vocabulary })
    }
}

/// Binary labels aligned with a [`PredictionMatrix`].
#[derive(Debug, Clone)]
pub struct LabelMatrix {
    pub labels: Array2<u8>,
}

impl LabelMatrix {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("labels must be 0/1".into()));
        }
        Ok(LabelMatrix { labels })
    }
}

/// Which of the two macro metrics to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    RocAuc,
    PrAuc,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::RocAuc => "roc_auc",
            MetricKind::PrAuc => "pr_auc",
        })
    }
}

fn check_metric_input(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", scores.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("metric input is empty".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("scores contain non-finite values".into()));
    }
    if labels.iter().any(|&v| v > 1) {
        return Err(Error::InvalidInput("labels must be 0/1".into()));
    }
    Ok(())
}

/// Tie-averaged ranks (1-based); equal scores share the mean of their ranks.
fn averaged_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// Returns `None` (the tag-skip signal) when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_metric_input(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let ranks = averaged_ranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels.iter())
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| *r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

/// Average precision over distinct score thresholds (descending):
/// AP = Σ_t precision(t) · Δrecall(t). Tied blocks contribute at their common
/// threshold, so the value is independent of the input order.
/// Returns `None` when there are no positives.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_metric_input(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let block_tp: usize = order[i..=j].iter().filter(|&&idx| labels[idx] == 1).count();
        tp += block_tp;
        seen += j - i + 1;
        if block_tp > 0 {
            let precision = tp as f64 / seen as f64;
            ap += precision * block_tp as f64 / n_pos as f64;
        }
        i = j + 1;
    }
    Ok(Some(ap))
}

/// Macro average over tags plus the skipped-tag report.
#[derive(Debug, Clone)]
pub struct MacroSummary {
    pub value: f64,
    /// per-tag metric in vocabulary order; `None` marks a skipped tag
    pub per_tag: Vec<Option<f64>>,
    pub skipped_tags: Vec<String>,
}

/// Unweighted mean of the per-tag metric over non-skipped tags.
pub fn macro_average(
    kind: MetricKind,
    predictions: &PredictionMatrix,
    labels: &LabelMatrix,
) -> Result<MacroSummary> {
    if predictions.scores.shape() != labels.labels.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", predictions.scores.shape()),
            actual: format!("{:?}", labels.labels.shape()),
        });
    }
    let mut per_tag = Vec::with_capacity(predictions.tag_vocabulary.len());
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (t, tag) in predictions.tag_vocabulary.iter().enumerate() {
        let scores: Vec<f64> = predictions.scores.column(t).to_vec();
        let labs: Vec<u8> = labels.labels.column(t).to_vec();
        let v = match kind {
            MetricKind::RocAuc => roc_auc(&scores, &labs)?,
            MetricKind::PrAuc => pr_auc(&scores, &labs)?,
        };
        match v {
            Some(x) => {
                sum += x;
                kept += 1;
            }
            None => skipped.push(tag.clone()),
        }
        per_tag.push(v);
    }
    if kept == 0 {
        return Err(Error::Data("every tag was skipped: no tag has both classes".into()));
    }
    Ok(MacroSummary { value: sum / kept as f64, per_tag, skipped_tags: skipped })
}

/// Anything that can score one fixed-length waveform window.
pub trait TagPredictor {
    fn n_tags(&self) -> usize;
    /// Number of input samples one window must contain.
    fn window_samples(&self) -> usize;
    fn predict_window(&mut self, samples: &[f64]) -> Result<Vec<f64>>;
}

/// Scores a whole track: 50%-overlap windows, zero-padded at the edges,
/// window predictions averaged per tag.
pub fn overlap_inference(
    waveform: &AudioWaveform,
    model: &mut dyn TagPredictor,
    overlap: f64,
) -> Result<Vec<f64>> {
    let sr = waveform.sample_rate_hz as f64;
    let win = model.window_samples();
    let segment_s = win as f64 / sr;
    let duration_s = waveform.samples.len() as f64 / sr;
    let windows = chunk_for_eval(duration_s, segment_s, overlap)?;

    let mut acc = vec![0.0; model.n_tags()];
    for w in &windows {
        let start = (w.start_s * sr).round() as usize;
        let mut slice = vec![0.0; win];
        let available = waveform.samples.len().saturating_sub(start).min(win);
        slice[..available].copy_from_slice(&waveform.samples[start..start + available]);
        let scores = model.predict_window(&slice)?;
        if scores.len() != acc.len() {
            return Err(Error::Shape {
                expected: format!("{} tag scores", acc.len()),
                actual: format!("{}", scores.len()),
            });
        }
        for (a, s) in acc.iter_mut().zip(scores) {
            *a += s;
        }
    }
    let n = windows.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// The four semantic categories of the tag-group report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TagGroup {
    Genre,
    Mood,
    Instruments,
    Vocals,
}

impl TagGroup {
    pub const ALL: [TagGroup; 4] =
        [TagGroup::Genre, TagGroup::Mood, TagGroup::Instruments, TagGroup::Vocals];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "genre" => Ok(TagGroup::Genre),
            "mood" => Ok(TagGroup::Mood),
            "instruments" => Ok(TagGroup::Instruments),
            "vocals" => Ok(TagGroup::Vocals),
            other => Err(Error::InvalidInput(format!(
                "unknown tag group `{other}` (expected genre|mood|instruments|vocals)"
            ))),
        }
    }
}

impl fmt::Display for TagGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagGroup::Genre => "genre",
            TagGroup::Mood => "mood",
            TagGroup::Instruments => "instruments",
            TagGroup::Vocals => "vocals",
        })
    }
}

/// Curated default mapping for the MagnaTagATune top-50 vocabulary,
/// shipped as an editable text table.
pub const DEFAULT_TAG_GROUPS: &str = include_str!("../data/mtat_tag_groups.tsv");

/// tag name → semantic group, loaded from a tab-separated text table.
#[derive(Debug, Clone)]
pub struct TagGroupMap {
    map: BTreeMap<String, TagGroup>,
}

impl TagGroupMap {
    /// Parses `<tag>\t<group>` lines; `#` starts a comment, blank lines skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, group) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidInput(format!(
                    "tag group table line {}: expected <tag><TAB><group>",
                    lineno + 1
                ))
            })?;
            let tag = tag.trim().to_string();
            if map.insert(tag.clone(), TagGroup::parse(group.trim())?).is_some() {
                return Err(Error::InvalidInput(format!("duplicate tag `{tag}` in group table")));
            }
        }
        if map.is_empty() {
            return Err(Error::InvalidInput("tag group table is empty".into()));
        }
        Ok(TagGroupMap { map })
    }

    pub fn default_mtat() -> Self {
        TagGroupMap::parse(DEFAULT_TAG_GROUPS).expect("shipped table parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        TagGroupMap::parse(&text)
    }

    pub fn group_of(&self, tag: &str) -> Option<TagGroup> {
        self.map.get(tag).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One row of the group report.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub group: TagGroup,
    pub mean: f64,
    pub n_tags: usize,
}

/// Mean per-tag metric within each semantic group. Skipped tags are excluded;
/// a tag missing from the map is an error naming it. Groups with no evaluated
/// tags are omitted from the report.
pub fn tag_group_report(
    per_tag: &[Option<f64>],
    vocabulary: &[String],
    groups: &TagGroupMap,
) -> Result<Vec<GroupRow>> {
    if per_tag.len() != vocabulary.len() {
        return Err(Error::Shape {
            expected: format!("{} per-tag values", vocabulary.len()),
            actual: format!("{}", per_tag.len()),
        });
    }
    let mut sums: BTreeMap<TagGroup, (f64, usize)> = BTreeMap::new();
    for (tag, value) in vocabulary.iter().zip(per_tag) {
        let group = groups
            .group_of(tag)
            .ok_or_else(|| Error::InvalidInput(format!("tag `{tag}` missing from group map")))?;
        if let Some(v) = value {
            let entry = sums.entry(group).or_insert((0.0, 0));
            entry.0 += v;
            entry.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(group, (sum, n))| GroupRow { group, mean: sum / n as f64, n_tags: n })
        .collect())
}

/// Writes a CSV file: a header row then stringified cells, comma-separated.
/// Cells are written verbatim; callers keep cells free of commas/newlines.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::InvalidInput(format!(
                "CSV row has {} cells, header has {}",
                row.len(),
                header.len()
            )));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Reads back a CSV written by [`write_csv`]: (header, rows).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty CSV", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

/// One named line in a line plot.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Emits a minimal static SVG line plot with axes, tick labels, and a legend.
pub fn write_line_plot_svg(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[PlotSeries],
) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::InvalidInput("plot needs at least one point".into()));
    }
    let (width, height) = (640.0, 440.0);
    let (ml, mr, mt, mb) = (70.0, 30.0, 50.0, 60.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(p.0), b.max(p.0))
    });
    let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(p.1), b.max(p.1))
    });
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        width / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = mt + ph,
        r = ml + pw
    ));
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n",
            sx(fx),
            mt + ph + 18.0,
            fx,
            ml - 8.0,
            sy(fy) + 4.0,
            fy
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>\n",
        ml + pw / 2.0,
        height - 14.0,
        mt + ph / 2.0,
        mt + ph / 2.0
    ));
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> =
            s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        for (x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                sx(*x),
                sy(*y)
            ));
        }
        let ly = mt + 14.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            ml + pw - 130.0,
            ly,
            ml + pw - 116.0,
            ly + 9.0,
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// One row of the resolution ablation table.
#[derive(Debug, Clone)]
pub struct ResolutionRow {
    /// "audio-only" or "vcmr"
    pub model: String,
    pub first_kernel: usize,
    pub duration_s: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

/// Trains and evaluates both the audio-only and the video-conditioned (VCMR)
/// variant at every first-kernel value in `cfg.eval.resolution_k_grid`,
/// then emits `resolution.csv` and `resolution.svg` under `out_dir`.
/// Every k is validated against the resolution calculus before any training.
pub fn run_resolution_ablation(
    manifest: &crate::corpus::Manifest,
    cache_dir: &Path,
    cfg: &crate::config::AppConfig,
    out_dir: &Path,
) -> Result<Vec<ResolutionRow>> {
    use crate::train::{evaluate_tagging, finetune, pretrain_audio, pretrain_multimodal};

    let mut grid = Vec::new();
    for &k in &cfg.eval.resolution_k_grid {
        let mut samplecnn = cfg.samplecnn.clone();
        samplecnn.first_kernel = k;
        samplecnn.validate()?;
        let mut cfg_k = cfg.clone();
        cfg_k.samplecnn = samplecnn;
        grid.push((k, cfg_k));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rows = Vec::new();
    for (k, cfg_k) in &grid {
        let duration_s = cfg_k.samplecnn.input_duration_s();
        let base = out_dir.join(format!("k{k}"));
        let stage1 = pretrain_audio(manifest, cfg_k, &base.join("stage1"), None)?;

        let ft_audio = finetune(manifest, &stage1.checkpoint_path, cfg_k, &base.join("ft_audio"))?;
        let report = evaluate_tagging(
            manifest,
            crate::corpus::Split::Test,
            &ft_audio.checkpoint_path,
            cfg_k.eval.segment_overlap,
        )?;
        rows.push(ResolutionRow {
            model: "audio-only".into(),
            first_kernel: *k,
            duration_s,
            roc_auc: report.macro_roc_auc,
            pr_auc: report.macro_pr_auc,
        });

        let stage2 = pretrain_multimodal(
            manifest,
            &stage1.checkpoint_path,
            cfg_k,
            cache_dir,
            &base.join("stage2"),
        )?;
        let backbone = stage2.export_path.as_ref().unwrap_or(&stage2.checkpoint_path);
        let ft_vcmr = finetune(manifest, backbone, cfg_k, &base.join("ft_vcmr"))?;
        let report = evaluate_tagging(
            manifest,
            crate::corpus::Split::Test,
            &ft_vcmr.checkpoint_path,
            cfg_k.eval.segment_overlap,
        )?;
        rows.push(ResolutionRow {
            model: "vcmr".into(),
            first_kernel: *k,
            duration_s,
            roc_auc: report.macro_roc_auc,
            pr_auc: report.macro_pr_auc,
        });
    }

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.first_kernel.to_string(),
                format!("{:.4}", r.duration_s),
                format!("{:.6}", r.roc_auc),
                format!("{:.6}", r.pr_auc),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("resolution.csv"),
        &["model", "first_kernel", "duration_s", "roc_auc", "pr_auc"],
        &csv_rows,
    )?;
    let series: Vec<PlotSeries> = ["audio-only", "vcmr"]
        .iter()
        .map(|model| PlotSeries {
            name: (*model).to_string(),
            points: rows
                .iter()
                .filter(|r| r.model == *model)
                .map(|r| (r.duration_s, r.roc_auc))
                .collect(),
        })
        .collect();
    write_line_plot_svg(
        &out_dir.join("resolution.svg"),
        "tagging performance vs input resolution",
        "segment duration (s)",
        "macro ROC-AUC",
        &series,
    )?;
    Ok(rows)
}

/// One row of the data-scarcity ablation table.
#[derive(Debug, Clone)]
pub struct ScarcityRow {
    pub fraction: f64,
    pub n_train: usize,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

/// Fine-tunes on each training fraction in `cfg.eval.scarcity_fractions`
/// (always evaluating on the full test split), emits `scarcity.csv` and
/// `scarcity.svg`, and returns the rows plus soft-check warnings: a
/// non-monotone trend is reported, not failed.
pub fn run_scarcity_ablation(
    manifest: &crate::corpus::Manifest,
    backbone_ckpt: &Path,
    cfg: &crate::config::AppConfig,
    out_dir: &Path,
) -> Result<(Vec<ScarcityRow>, Vec<String>)> {
    use crate::corpus::{subsample_training, Split};
    use crate::train::{evaluate_tagging, finetune};

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut fractions = cfg.eval.scarcity_fractions.clone();
    fractions.sort_by(|a, b| a.partial_cmp(b).expect("finite fractions"));

    let mut rows = Vec::new();
    for fraction in &fractions {
        let sub = subsample_training(manifest, *fraction, cfg.seed)?;
        let n_train = sub.split(Split::Train).count();
        if n_train == 0 {
            return Err(Error::Data(format!(
                "fraction {fraction} leaves no training records"
            )));
        }
        let run_dir = out_dir.join(format!("f{:03}", (fraction * 100.0).round() as usize));
        let ft = finetune(&sub, backbone_ckpt, cfg, &run_dir)?;
        // the full test split, never subsampled
        let report = evaluate_tagging(
            manifest,
            Split::Test,
            &ft.checkpoint_path,
            cfg.eval.segment_overlap,
        )?;
        rows.push(ScarcityRow {
            fraction: *fraction,
            n_train,
            roc_auc: report.macro_roc_auc,
            pr_auc: report.macro_pr_auc,
        });
    }

    let mut warnings = Vec::new();
    for pair in rows.windows(2) {
        if pair[1].roc_auc < pair[0].roc_auc {
            warnings.push(format!(
                "ROC-AUC not monotone: {:.4} at fraction {} vs {:.4} at fraction {}",
                pair[1].roc_auc, pair[1].fraction, pair[0].roc_auc, pair[0].fraction
            ));
        }
    }

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.fraction),
                r.n_train.to_string(),
                format!("{:.6}", r.roc_auc),
                format!("{:.6}", r.pr_auc),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("scarcity.csv"),
        &["fraction", "n_train", "roc_auc", "pr_auc"],
        &csv_rows,
    )?;
    write_line_plot_svg(
        &out_dir.join("scarcity.svg"),
        "tagging performance vs training data fraction",
        "training fraction",
        "macro ROC-AUC",
        &[PlotSeries {
            name: "vcmr".into(),
            points: rows.iter().map(|r| (r.fraction, r.roc_auc)).collect(),
        }],
    )?;
    Ok((rows, warnings))
}
