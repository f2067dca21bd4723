//! Dataset containers, the IDX loader and the trace CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use fedgame_core::train::TrainingTrace;
use fedgame_core::LabeledDataset;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const FGDS_MAGIC: &[u8; 4] = b"FGDS";
pub const FGDS_VERSION: u32 = 1;
const FGDS_HEADER: usize = 4 + 4 + 8 + 4 + 4;

/// `FGDS` container: little-endian header (magic, version u32, n u64, d u32,
/// I u32), row-major f32 features, then u16 labels.
pub fn encode_fgds(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(FGDS_HEADER + ds.features().len() * 4 + ds.len() * 2);
    out.extend_from_slice(FGDS_MAGIC);
    out.extend_from_slice(&FGDS_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.classes() as u32).to_le_bytes());
    for x in ds.features() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for y in ds.labels() {
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

pub fn decode_fgds(bytes: &[u8], path: &Path) -> Result<LabeledDataset> {
    let bad = |reason: String| HarnessError::format(path, reason);
    if bytes.len() < FGDS_HEADER {
        return Err(bad(format!(
            "expected at least {FGDS_HEADER} header bytes, found {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != FGDS_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FGDS_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u32_at(16) as usize;
    let classes = u32_at(20) as usize;
    let expected = FGDS_HEADER + n * d * 4 + n * 2;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let feat_end = FGDS_HEADER + n * d * 4;
    let features = bytes[FGDS_HEADER..feat_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = bytes[feat_end..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabeledDataset::new(features, labels, d, classes).map_err(|e| bad(e.to_string()))
}

pub fn write_fgds(ds: &LabeledDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_fgds(ds)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_fgds(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_fgds(&bytes, path)
}

/// Inspection CSV: `label,x0,..,x{d-1}`.
pub fn write_dataset_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.len() {
        let mut row = vec![ds.label(i).to_string()];
        row.extend(ds.row(i).iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::format(path, e.to_string())
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], o: usize) -> u32 {
    u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap())
}

/// Parses an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(
    images: &[u8],
    labels: &[u8],
    classes: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<LabeledDataset> {
    if images.len() < 16 {
        return Err(HarnessError::format(
            images_path,
            format!("expected at least 16 header bytes, found {}", images.len()),
        ));
    }
    let magic = be_u32(images, 0);
    if magic != IDX_IMAGES {
        return Err(HarnessError::format(
            images_path,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES:08x}"),
        ));
    }
    let (n, rows, cols) = (
        be_u32(images, 4) as usize,
        be_u32(images, 8) as usize,
        be_u32(images, 12) as usize,
    );
    let d = rows * cols;
    let expected = 16 + n * d;
    if images.len() != expected {
        return Err(HarnessError::format(
            images_path,
            format!("expected {expected} bytes, found {}", images.len()),
        ));
    }
    if labels.len() < 8 {
        return Err(HarnessError::format(
            labels_path,
            format!("expected at least 8 header bytes, found {}", labels.len()),
        ));
    }
    let magic = be_u32(labels, 0);
    if magic != IDX_LABELS {
        return Err(HarnessError::format(
            labels_path,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS:08x}"),
        ));
    }
    let m = be_u32(labels, 4) as usize;
    if m != n {
        return Err(HarnessError::format(
            labels_path,
            format!("label count {m} does not match image count {n}"),
        ));
    }
    if labels.len() != 8 + n {
        return Err(HarnessError::format(
            labels_path,
            format!("expected {} bytes, found {}", 8 + n, labels.len()),
        ));
    }
    let ys = &labels[8..];
    if let Some((i, y)) = ys.iter().enumerate().find(|(_, &y)| y as usize >= classes) {
        return Err(HarnessError::format(
            labels_path,
            format!("label {y} at index {i} not below I = {classes}"),
        ));
    }
    let features = images[16..].iter().map(|&p| p as f32 / 255.0).collect();
    LabeledDataset::new(features, ys.iter().map(|&y| y as u16).collect(), d, classes)
        .map_err(|e| HarnessError::format(images_path, e.to_string()))
}

pub fn load_idx_dataset(
    images_path: &Path,
    labels_path: &Path,
    classes: usize,
) -> Result<LabeledDataset> {
    let images = fs::read(images_path).map_err(|e| HarnessError::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| HarnessError::io(labels_path, e))?;
    parse_idx(&images, &labels, classes, images_path, labels_path)
}

pub const TRACE_VERSION_LINE: &str = "# fedgame-trace v1";

/// One `round,epoch,agent_id,metric,value` row. Global metrics leave
/// `agent_id` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub epoch: usize,
    pub agent_id: Option<usize>,
    pub metric: String,
    pub value: f64,
}

/// Trace rows plus the `# key=value` header lines following the version line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceFile {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<TraceRow>,
}

impl TraceFile {
    pub fn from_trace(trace: &TrainingTrace, meta: BTreeMap<String, String>) -> Self {
        let mut rows = Vec::new();
        let mut push =
            |round: usize, epoch: usize, agent: Option<usize>, metric: &str, value: f64| {
                rows.push(TraceRow {
                    round,
                    epoch,
                    agent_id: agent,
                    metric: metric.to_string(),
                    value,
                })
            };
        for e in &trace.epochs {
            let (r, t) = (e.round, e.epoch);
            push(r, t, None, "eta", e.eta);
            push(r, t, None, "divergence", e.divergence);
            push(r, t, None, "divergence_bound", e.divergence_bound);
            if let (Some(l), Some(a)) = (e.test_loss, e.test_accuracy) {
                push(r, t, None, "test_loss", l);
                push(r, t, None, "test_accuracy", a);
            }
            for (k, (l, a)) in e.agent_loss.iter().zip(&e.agent_accuracy).enumerate() {
                push(r, t, Some(k), "loss", *l);
                push(r, t, Some(k), "accuracy", *a);
            }
            if let Some(g) = &e.gradient_gap {
                for k in 0..g.gaps.len() {
                    push(r, t, Some(k), "grad_gap", g.gaps[k]);
                    push(r, t, Some(k), "grad_gap_bound", g.bounds[k]);
                    push(r, t, Some(k), "grad_gap_delta", g.mixture_deltas[k]);
                    push(r, t, Some(k), "direct_grad_gap", g.direct_gaps[k]);
                    push(r, t, Some(k), "grad_norm", g.raw_norms[k]);
                    push(r, t, Some(k), "max_sample_grad_norm", g.max_sample_norms[k]);
                }
            }
        }
        let e = trace.epochs.len().saturating_sub(1) / trace.rounds.len().max(1);
        for rr in &trace.rounds {
            let (r, t) = (rr.round, (rr.round + 1) * e);
            push(
                r,
                t,
                None,
                "pre_aggregation_divergence",
                rr.pre_aggregation_divergence,
            );
            push(r, t, None, "empirical_lipschitz", rr.empirical_lipschitz);
            push(r, t, None, "clipped_fraction", rr.clipped_fraction);
            for (k, d) in rr.deltas.iter().enumerate() {
                push(r, t, Some(k), "delta", *d);
            }
            for (k, (l, a)) in rr
                .local_test_loss
                .iter()
                .zip(&rr.local_test_accuracy)
                .enumerate()
            {
                push(r, t, Some(k), "local_test_loss", *l);
                push(r, t, Some(k), "local_test_accuracy", *a);
            }
        }
        TraceFile { meta, rows }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(TRACE_VERSION_LINE);
        s.push('\n');
        for (k, v) in &self.meta {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str("round,epoch,agent_id,metric,value\n");
        for r in &self.rows {
            let agent = r.agent_id.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.round, r.epoch, agent, r.metric, r.value
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
        f.write_all(self.render().as_bytes())
            .map_err(|e| HarnessError::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == TRACE_VERSION_LINE => {}
            other => {
                return Err(HarnessError::format(
                    path,
                    format!(
                        "first line must be `{TRACE_VERSION_LINE}`, found {:?}",
                        other.map(|o| o.1)
                    ),
                ))
            }
        }
        let mut meta = BTreeMap::new();
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (i, line) in lines {
            let bad = |what: &str| HarnessError::format(path, format!("line {}: {what}", i + 1));
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| bad("metadata line without `=`"))?;
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            if !header_seen {
                if line != "round,epoch,agent_id,metric,value" {
                    return Err(bad("unexpected column header"));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            rows.push(TraceRow {
                round: f[0].parse().map_err(|_| bad("bad round"))?,
                epoch: f[1].parse().map_err(|_| bad("bad epoch"))?,
                agent_id: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad("bad agent_id"))?)
                },
                metric: f[3].to_string(),
                value: f[4].parse().map_err(|_| bad("bad value"))?,
            });
        }
        Ok(TraceFile { meta, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        TraceFile::parse(&text, path)
    }

    pub fn metric<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a TraceRow> + 'a {
        self.rows.iter().filter(move |r| r.metric == name)
    }
}

/// Per-trace summary, computed from the trace rows alone so that `report`
/// reproduces it without retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    pub epochs: usize,
    pub divergence_checked: usize,
    pub divergence_violations: usize,
    pub max_divergence_ratio: f64,
    pub grad_gap_checked: usize,
    pub grad_gap_violations: usize,
    pub max_grad_gap_ratio: f64,
    pub max_sample_grad_norm: f64,
}

pub fn summarize(trace: &TraceFile) -> TraceSummary {
    let last = |name: &str| {
        trace
            .metric(name)
            .filter(|r| r.agent_id.is_none())
            .max_by_key(|r| r.epoch)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    };
    let pair = |a: &str, b: &str| -> Vec<(f64, f64)> {
        let bounds: BTreeMap<(usize, Option<usize>), f64> = trace
            .metric(b)
            .map(|r| ((r.epoch, r.agent_id), r.value))
            .collect();
        trace
            .metric(a)
            .filter_map(|r| bounds.get(&(r.epoch, r.agent_id)).map(|&bd| (r.value, bd)))
            .collect()
    };
    let ratio = |v: f64, b: f64| if v > 0.0 { v / b } else { 0.0 };
    let div = pair("divergence", "divergence_bound");
    let gap = pair("grad_gap", "grad_gap_bound");
    TraceSummary {
        final_test_loss: last("test_loss"),
        final_test_accuracy: last("test_accuracy"),
        epochs: trace.metric("eta").count(),
        divergence_checked: div.len(),
        divergence_violations: div.iter().filter(|(v, b)| v > b).count(),
        max_divergence_ratio: div.iter().map(|&(v, b)| ratio(v, b)).fold(0.0, f64::max),
        grad_gap_checked: gap.len(),
        grad_gap_violations: gap.iter().filter(|(v, b)| v > b).count(),
        max_grad_gap_ratio: gap.iter().map(|&(v, b)| ratio(v, b)).fold(0.0, f64::max),
        max_sample_grad_norm: trace
            .metric("max_sample_grad_norm")
            .map(|r| r.value)
            .fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        LabeledDataset::new(vec![0.5, -1.0, 2.0, 0.25, 3.0, 4.0], vec![0, 2, 1], 2, 3).unwrap()
    }

    #[test]
    fn fgds_round_trip() {
        let ds = tiny();
        let bytes = encode_fgds(&ds);
        assert_eq!(&bytes[..4], b"FGDS");
        assert_eq!(bytes.len(), 24 + 6 * 4 + 3 * 2);
        assert_eq!(decode_fgds(&bytes, Path::new("x")).unwrap(), ds);
    }

    #[test]
    fn fgds_rejects_corruption() {
        let mut bytes = encode_fgds(&tiny());
        assert!(decode_fgds(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(decode_fgds(&bytes, Path::new("x")).is_err());
    }

    fn idx_pair(n: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend((0..n * 4).map(|i| (i * 17 % 256) as u8));
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_parses_and_scales() {
        let (img, lab) = idx_pair(3, &[1, 0, 9]);
        let ds = parse_idx(&img, &lab, 10, Path::new("i"), Path::new("l")).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.classes()), (3, 4, 10));
        assert!(ds.features().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(ds.row(0)[1], 17.0 / 255.0);
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = idx_pair(3, &[1, 0, 9]);
        let err = parse_idx(
            &img[..img.len() - 2],
            &lab,
            10,
            Path::new("i"),
            Path::new("l"),
        )
        .unwrap_err();
        assert!(
            err.to_string().contains("expected 28 bytes, found 26"),
            "{err}"
        );
        let mut wrong = img.clone();
        wrong[3] = 0x01;
        assert!(parse_idx(&wrong, &lab, 10, Path::new("i"), Path::new("l"))
            .unwrap_err()
            .to_string()
            .contains("0x00000801"));
        let (img, lab) = idx_pair(3, &[1, 12, 9]);
        let err = parse_idx(&img, &lab, 10, Path::new("i"), Path::new("l")).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
        let (img, lab) = idx_pair(3, &[1, 2]);
        assert!(parse_idx(&img, &lab, 10, Path::new("i"), Path::new("l"))
            .unwrap_err()
            .to_string()
            .contains("count"));
    }

    #[test]
    fn trace_round_trip() {
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "3".to_string());
        let t = TraceFile {
            meta,
            rows: vec![
                TraceRow {
                    round: 0,
                    epoch: 0,
                    agent_id: None,
                    metric: "divergence".into(),
                    value: 0.0,
                },
                TraceRow {
                    round: 0,
                    epoch: 0,
                    agent_id: None,
                    metric: "divergence_bound".into(),
                    value: 0.1 + 0.2,
                },
                TraceRow {
                    round: 0,
                    epoch: 1,
                    agent_id: Some(2),
                    metric: "loss".into(),
                    value: 1e-300,
                },
            ],
        };
        let text = t.render();
        assert!(
            text.starts_with("# fedgame-trace v1\n# seed=3\nround,epoch,agent_id,metric,value\n")
        );
        assert_eq!(TraceFile::parse(&text, Path::new("t")).unwrap(), t);
        assert!(TraceFile::parse("round,epoch\n", Path::new("t")).is_err());
    }
}
