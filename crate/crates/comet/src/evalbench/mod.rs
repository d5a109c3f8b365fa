//! Dataset ingestion, synthetic sequence generation, one-pass-evaluation
//! metrics (precision / success / AUC), attribute breakdown and reports.

pub mod image;
pub mod synth;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BoxXYWH};
use crate::{Error, Result};
use image::Image;

pub use synth::{synth_batch, synth_sequence, Preset, SynthConfig, SYNTH_SCHEMA_VERSION};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Frames either resident in memory (synthetic) or on disk (ingested).
#[derive(Debug, Clone)]
pub enum FrameSource {
    Paths(Vec<PathBuf>),
    Memory(Vec<Image>),
}

/// One annotated sequence: frames, per-frame ground truth, attribute codes.
#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: FrameSource,
    pub gt_boxes: Vec<BoxXYWH>,
    pub attributes: Vec<String>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.gt_boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_boxes.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<Image> {
        match &self.frames {
            FrameSource::Paths(paths) => {
                let p = paths.get(i).ok_or_else(|| {
                    Error::Sequence(format!("{}: frame index {i} out of range", self.name))
                })?;
                Image::read_ppm(p)
            }
            FrameSource::Memory(frames) => frames
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Sequence(format!("{}: frame index {i} out of range", self.name))),
        }
    }

    /// Materializes the sequence on disk in the standard layout:
    /// `frames/NNNNNN.ppm`, `groundtruth.txt`, `attributes.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir)?;
        for i in 0..self.len() {
            let img = self.frame(i)?;
            img.write_ppm(&frames_dir.join(format!("{i:06}.ppm")))?;
        }
        let mut gt = String::new();
        for b in &self.gt_boxes {
            gt.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
        }
        std::fs::write(dir.join("groundtruth.txt"), gt)?;
        let attrs = serde_json::json!({ "attributes": self.attributes });
        std::fs::write(dir.join("attributes.json"), format!("{attrs}\n"))?;
        Ok(())
    }
}

fn parse_gt_line(line: &str, lineno: usize) -> Result<BoxXYWH> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 4 comma-separated fields, found {}", fields.len()),
        });
    }
    let mut vals = [0.0f64; 4];
    for (i, f) in fields.iter().enumerate() {
        vals[i] = f.trim().parse::<f64>().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("field {}: {e}", i + 1),
        })?;
    }
    Ok(BoxXYWH::new(vals[0], vals[1], vals[2], vals[3]))
}

/// Parses a whole annotation file ("x,y,w,h" per line, LF or CRLF).
pub fn parse_groundtruth(text: &str) -> Result<Vec<BoxXYWH>> {
    let mut boxes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        boxes.push(parse_gt_line(line, i + 1)?);
    }
    Ok(boxes)
}

#[derive(Debug, Deserialize)]
struct AttributesFile {
    attributes: Vec<String>,
}

/// Loads a sequence directory: `frames/*.ppm` (sorted by file name),
/// `groundtruth.txt`, optional `attributes.json`.
pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let frames_dir = dir.join("frames");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&frames_dir)
        .map_err(|e| Error::Sequence(format!("{}: {e}", frames_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    paths.sort();

    let gt_path = dir.join("groundtruth.txt");
    let gt_text = std::fs::read_to_string(&gt_path)
        .map_err(|e| Error::Sequence(format!("{}: {e}", gt_path.display())))?;
    let gt_boxes = parse_groundtruth(&gt_text)?;

    if gt_boxes.len() != paths.len() {
        return Err(Error::Sequence(format!(
            "{}: {} annotation lines but {} frames",
            dir.display(),
            gt_boxes.len(),
            paths.len()
        )));
    }
    if paths.is_empty() {
        return Err(Error::Sequence(format!("{}: no frames found", dir.display())));
    }
    for (i, b) in gt_boxes.iter().enumerate() {
        if !b.is_valid() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("degenerate ground-truth box {}x{}", b.w, b.h),
            });
        }
    }

    let attributes = match std::fs::read_to_string(dir.join("attributes.json")) {
        Ok(text) => serde_json::from_str::<AttributesFile>(&text)?.attributes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());
    Ok(SequenceRecord { name, frames: FrameSource::Paths(paths), gt_boxes, attributes })
}

/// Per-sequence one-pass-evaluation result.
///
/// Curves are sampled at 51 points each: precision over integer pixel
/// thresholds 0..=50, success over overlap thresholds i/50 for i in 0..=50.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub center_errors: Vec<f64>,
    pub overlaps: Vec<f64>,
    pub precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    pub precision_at_20: f64,
    pub success_at_0_5: f64,
}

pub const CURVE_POINTS: usize = 51;

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / 50.0
}

/// Computes precision/success curves and their scalars for one sequence.
/// Ties count toward success: a frame with overlap exactly equal to the
/// threshold passes (the `>=` convention).
pub fn ope_metrics(pred_boxes: &[BoxXYWH], gt_boxes: &[BoxXYWH]) -> Result<EvalResult> {
    if pred_boxes.len() != gt_boxes.len() {
        return Err(Error::Contract(format!(
            "prediction count {} != ground-truth count {}",
            pred_boxes.len(),
            gt_boxes.len()
        )));
    }
    if gt_boxes.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty sequence".to_string()));
    }
    for g in gt_boxes {
        g.check("ope_metrics ground truth")?;
    }
    let n = gt_boxes.len() as f64;
    let mut center_errors = Vec::with_capacity(gt_boxes.len());
    let mut overlaps = Vec::with_capacity(gt_boxes.len());
    for (p, g) in pred_boxes.iter().zip(gt_boxes) {
        let (cgx, cgy) = g.center();
        let (cpx, cpy) = p.center();
        center_errors.push((cgx - cpx).hypot(cgy - cpy));
        // A degenerate prediction scores zero overlap instead of failing the
        // whole evaluation.
        overlaps.push(if p.is_valid() { iou(g, p)? } else { 0.0 });
    }
    let precision_curve: Vec<f64> = (0..CURVE_POINTS)
        .map(|t| center_errors.iter().filter(|&&e| e <= t as f64).count() as f64 / n)
        .collect();
    let success_curve: Vec<f64> = (0..CURVE_POINTS)
        .map(|t| overlaps.iter().filter(|&&o| o >= success_threshold(t)).count() as f64 / n)
        .collect();
    let auc = success_curve.iter().sum::<f64>() / CURVE_POINTS as f64;
    let precision_at_20 = precision_curve[20];
    let success_at_0_5 = success_curve[25];
    Ok(EvalResult {
        center_errors,
        overlaps,
        precision_curve,
        success_curve,
        auc,
        precision_at_20,
        success_at_0_5,
    })
}

/// One row of the attribute table: scalar means over the sequences that
/// carry the attribute.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttributeRow {
    pub sequences: usize,
    pub precision_at_20: f64,
    pub auc: f64,
}

/// Averages per-sequence scalars by attribute code. Every sequence counts
/// toward "Overall"; sequences without attributes count only there.
pub fn attribute_breakdown(
    results: &BTreeMap<String, EvalResult>,
    records: &[SequenceRecord],
) -> Result<BTreeMap<String, AttributeRow>> {
    let by_name: BTreeMap<&str, &SequenceRecord> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut sums: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for (name, res) in results {
        let rec = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Contract(format!("no sequence record named {name} for attribute table"))
        })?;
        let mut codes: Vec<&str> = rec.attributes.iter().map(|s| s.as_str()).collect();
        codes.push("Overall");
        for code in codes {
            let e = sums.entry(code.to_string()).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += res.precision_at_20;
            e.2 += res.auc;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(code, (k, p, a))| {
            (code, AttributeRow { sequences: k, precision_at_20: p / k as f64, auc: a / k as f64 })
        })
        .collect())
}

/// Aggregate curves: unweighted mean of per-sequence curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverallSummary {
    pub sequences: usize,
    pub precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    pub precision_at_20: f64,
    pub success_at_0_5: f64,
}

pub fn overall_summary(results: &BTreeMap<String, EvalResult>) -> Result<OverallSummary> {
    if results.is_empty() {
        return Err(Error::Contract("cannot summarize zero sequences".to_string()));
    }
    let k = results.len() as f64;
    let mut precision_curve = vec![0.0; CURVE_POINTS];
    let mut success_curve = vec![0.0; CURVE_POINTS];
    for res in results.values() {
        for i in 0..CURVE_POINTS {
            precision_curve[i] += res.precision_curve[i] / k;
            success_curve[i] += res.success_curve[i] / k;
        }
    }
    let auc = success_curve.iter().sum::<f64>() / CURVE_POINTS as f64;
    Ok(OverallSummary {
        sequences: results.len(),
        precision_at_20: precision_curve[20],
        success_at_0_5: success_curve[25],
        auc,
        precision_curve,
        success_curve,
    })
}

/// Full evaluation report, serialized as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Effective configuration the run was invoked with.
    pub config: serde_json::Value,
    pub overall: OverallSummary,
    pub attributes: BTreeMap<String, AttributeRow>,
    pub per_sequence: BTreeMap<String, EvalResult>,
}

impl Report {
    pub fn build(
        results: BTreeMap<String, EvalResult>,
        records: &[SequenceRecord],
        config: serde_json::Value,
    ) -> Result<Report> {
        Ok(Report {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            overall: overall_summary(&results)?,
            attributes: attribute_breakdown(&results, records)?,
            per_sequence: results,
        })
    }
}

fn curves_csv(overall: &OverallSummary) -> String {
    let mut out = String::new();
    out.push_str("# One-pass evaluation curves (aggregate over sequences).\n");
    out.push_str("# 52 data rows, indices 0..=51. The native grids hold 51 samples each:\n");
    out.push_str("#   precision thresholds 0..=50 px (step 1), success thresholds 0..=1 (step 0.02).\n");
    out.push_str("# Row 51 pads the table by repeating the index-50 samples so the row count\n");
    out.push_str("# stays rectangular; read rows 0..=50 for the exact grids.\n");
    out.push_str("index,precision_threshold_px,precision,success_threshold,success\n");
    for i in 0..=CURVE_POINTS {
        let j = i.min(CURVE_POINTS - 1);
        out.push_str(&format!(
            "{i},{j},{},{},{}\n",
            overall.precision_curve[j],
            success_threshold(j),
            overall.success_curve[j]
        ));
    }
    out
}

/// Renders one curve as a self-contained SVG with exactly two polylines:
/// the axis (an L shape) and the curve itself.
fn curve_svg(title: &str, x_label: &str, x_max_label: &str, curve: &[f64]) -> String {
    let (w, h) = (480.0, 360.0);
    let (left, right, top, bottom) = (50.0, 20.0, 24.0, 40.0);
    let (x0, y0) = (left, h - bottom);
    let (x1, y1) = (w - right, top);
    let n = curve.len();
    let mut pts = String::new();
    for (i, v) in curve.iter().enumerate() {
        let x = x0 + (x1 - x0) * i as f64 / (n - 1) as f64;
        let y = y0 - (y0 - y1) * v.clamp(0.0, 1.0);
        if i > 0 {
            pts.push(' ');
        }
        pts.push_str(&format!("{x:.2},{y:.2}"));
    }
    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
        (x0 + x1) / 2.0
    ));
    svg.push_str(&format!(
        "<polyline points=\"{x0:.2},{y1:.2} {x0:.2},{y0:.2} {x1:.2},{y0:.2}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n"
    ));
    svg.push_str(&format!(
        "<polyline points=\"{pts}\" fill=\"none\" stroke=\"#1f6fd0\" stroke-width=\"2\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n",
        (x0 + x1) / 2.0,
        h - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">1.0</text>\n",
        x0 - 6.0,
        y1 + 4.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">0.0</text>\n",
        x0 - 6.0,
        y0 + 4.0
    ));
    svg.push_str(&format!(
        "<text x=\"{x0:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">0</text>\n",
        y0 + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{x1:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{x_max_label}</text>\n",
        y0 + 16.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Writes `report.json`, `curves.csv`, `precision.svg` and `success.svg`
/// into `dir` (created if needed).
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("curves.csv"), curves_csv(&report.overall))?;
    let precision = curve_svg(
        "Precision plot",
        "center error threshold (px)",
        "50",
        &report.overall.precision_curve,
    );
    std::fs::write(dir.join("precision.svg"), precision)?;
    let success =
        curve_svg("Success plot", "overlap threshold", "1.0", &report.overall.success_curve);
    std::fs::write(dir.join("success.svg"), success)?;
    Ok(())
}

/// Writes a tracker output file: one "x,y,w,h" line per frame.
pub fn write_tracker_output<W: Write>(mut w: W, boxes: &[BoxXYWH]) -> Result<()> {
    for b in boxes {
        writeln!(w, "{},{},{},{}", b.x, b.y, b.w, b.h)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoxXYWH {
        BoxXYWH::new(x, y, w, h)
    }

    #[test]
    fn groundtruth_parser_handles_reals_and_spaces() {
        let boxes = parse_groundtruth("0,0,10,10\r\n1.5, 2.25, 3, 4\n").unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[1].y, 2.25);
    }

    #[test]
    fn groundtruth_parser_reports_line_numbers() {
        let err = parse_groundtruth("0,0,10,10\n1, 2, 3\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains('3'), "{msg}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn three_field_line_fails_at_line_one() {
        let err = parse_groundtruth("1, 2, 3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn load_sequence_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_sequences: 1,
            frames: 3,
            width: 96,
            height: 96,
            ..SynthConfig::default()
        };
        let rec = synth_sequence(&cfg, 0, 1).unwrap();
        let dir = tmp.path().join(&rec.name);
        rec.write_to_dir(&dir).unwrap();

        let loaded = load_sequence(&dir).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.name, rec.name);
        assert_eq!(loaded.attributes, rec.attributes);
        for i in 0..3 {
            assert_eq!(loaded.frame(i).unwrap(), rec.frame(i).unwrap());
            assert_eq!(loaded.gt_boxes[i].x, rec.gt_boxes[i].x);
        }
    }

    #[test]
    fn count_mismatch_names_both_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("seq");
        std::fs::create_dir_all(dir.join("frames")).unwrap();
        for i in 0..3 {
            Image::new(4, 4).write_ppm(&dir.join("frames").join(format!("{i:06}.ppm"))).unwrap();
        }
        std::fs::write(dir.join("groundtruth.txt"), "0,0,2,2\n0,0,2,2\n").unwrap();
        let err = load_sequence(&dir).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn precision_at_20_counts_two_of_three() {
        // gt center (5,5); prediction centers at distances {5, 25, 10}.
        let gt = vec![b(0.0, 0.0, 10.0, 10.0); 3];
        let pred = vec![b(5.0, 0.0, 10.0, 10.0), b(25.0, 0.0, 10.0, 10.0), b(10.0, 0.0, 10.0, 10.0)];
        let res = ope_metrics(&pred, &gt).unwrap();
        assert_eq!(res.center_errors, vec![5.0, 25.0, 10.0]);
        assert_eq!(res.precision_at_20, 2.0 / 3.0);
    }

    #[test]
    fn perfect_tracking_gives_all_ones() {
        let gt = vec![b(3.0, 4.0, 12.0, 9.0); 5];
        let res = ope_metrics(&gt, &gt).unwrap();
        assert!(res.precision_curve.iter().all(|&v| v == 1.0));
        assert!(res.success_curve.iter().all(|&v| v == 1.0));
        assert_eq!(res.auc, 1.0);
    }

    #[test]
    fn exact_half_overlap_counts_as_success() {
        // Overlap exactly 0.5: half-height prediction inside the gt box.
        let gt = vec![b(0.0, 0.0, 10.0, 10.0); 2];
        let pred = vec![b(0.0, 0.0, 10.0, 5.0); 2];
        let res = ope_metrics(&pred, &gt).unwrap();
        assert_eq!(res.overlaps, vec![0.5, 0.5]);
        assert_eq!(res.success_at_0_5, 1.0);
    }

    #[test]
    fn curves_are_monotone_and_auc_is_mean() {
        let gt: Vec<BoxXYWH> = (0..20).map(|i| b(i as f64, 0.0, 10.0, 10.0)).collect();
        let pred: Vec<BoxXYWH> =
            (0..20).map(|i| b(i as f64 + (i % 7) as f64, (i % 5) as f64, 11.0, 9.0)).collect();
        let res = ope_metrics(&pred, &gt).unwrap();
        for i in 1..CURVE_POINTS {
            assert!(res.precision_curve[i] >= res.precision_curve[i - 1]);
            assert!(res.success_curve[i] <= res.success_curve[i - 1]);
        }
        let mean = res.success_curve.iter().sum::<f64>() / 51.0;
        assert!((res.auc - mean).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0); 3];
        let pred = vec![b(0.0, 0.0, 10.0, 10.0); 2];
        assert!(ope_metrics(&pred, &gt).is_err());
    }

    fn result_with(p20: f64, auc: f64) -> EvalResult {
        EvalResult {
            center_errors: vec![0.0],
            overlaps: vec![1.0],
            precision_curve: vec![p20; CURVE_POINTS],
            success_curve: vec![auc; CURVE_POINTS],
            auc,
            precision_at_20: p20,
            success_at_0_5: auc,
        }
    }

    fn record_with(name: &str, attrs: &[&str]) -> SequenceRecord {
        SequenceRecord {
            name: name.to_string(),
            frames: FrameSource::Memory(vec![Image::new(4, 4)]),
            gt_boxes: vec![b(0.0, 0.0, 2.0, 2.0)],
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn attribute_rows_average_member_sequences() {
        let mut results = BTreeMap::new();
        results.insert("a".to_string(), result_with(0.8, 0.5));
        results.insert("c".to_string(), result_with(0.6, 0.7));
        let records = vec![record_with("a", &["SO"]), record_with("c", &["SO"])];
        let table = attribute_breakdown(&results, &records).unwrap();
        assert!((table["SO"].precision_at_20 - 0.7).abs() < 1e-12);
        assert_eq!(table["SO"].sequences, 2);
        assert_eq!(table["Overall"].sequences, 2);
    }

    #[test]
    fn singleton_attribute_row_echoes_the_sequence() {
        let mut results = BTreeMap::new();
        results.insert("a".to_string(), result_with(0.9, 0.4));
        let records = vec![record_with("a", &["SO"])];
        let table = attribute_breakdown(&results, &records).unwrap();
        assert_eq!(table["SO"].precision_at_20, 0.9);
    }

    #[test]
    fn no_attributes_leaves_only_overall() {
        let mut results = BTreeMap::new();
        results.insert("a".to_string(), result_with(1.0, 1.0));
        let records = vec![record_with("a", &[])];
        let table = attribute_breakdown(&results, &records).unwrap();
        assert_eq!(table.len(), 1);
        assert!(table.contains_key("Overall"));
    }

    #[test]
    fn report_directory_holds_exactly_four_files() {
        let tmp = tempfile::tempdir().unwrap();
        let mut results = BTreeMap::new();
        results.insert("a".to_string(), result_with(0.75, 0.5));
        let records = vec![record_with("a", &["SO"])];
        let report = Report::build(results, &records, serde_json::json!({"seed": 1})).unwrap();
        let dir = tmp.path().join("report");
        emit_report(&report, &dir).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, vec!["curves.csv", "precision.svg", "report.json", "success.svg"]);

        // JSON round trip preserves curves exactly.
        let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
        let back: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(back.overall.precision_curve, report.overall.precision_curve);
        assert_eq!(back.per_sequence["a"].success_curve, report.per_sequence["a"].success_curve);

        // CSV: 52 data rows after the column header.
        let csv = std::fs::read_to_string(dir.join("curves.csv")).unwrap();
        let data_rows = csv
            .lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty() && !l.starts_with("index,"))
            .count();
        assert_eq!(data_rows, 52);

        // SVGs: valid XML shell with exactly two polylines each.
        for name in ["precision.svg", "success.svg"] {
            let svg = std::fs::read_to_string(dir.join(name)).unwrap();
            assert!(svg.starts_with("<?xml"));
            assert!(svg.trim_end().ends_with("</svg>"));
            assert_eq!(svg.matches("<polyline").count(), 2, "{name}");
        }
    }

    #[test]
    fn tracker_output_round_trips_through_parser() {
        let boxes = vec![b(1.5, 2.0, 10.25, 8.0), b(3.0, 4.0, 9.0, 9.5)];
        let mut buf = Vec::new();
        write_tracker_output(&mut buf, &boxes).unwrap();
        let back = parse_groundtruth(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].w, 10.25);
        assert_eq!(back[1].h, 9.5);
    }
}
