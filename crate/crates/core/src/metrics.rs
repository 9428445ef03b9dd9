//! Overlap and boundary metrics, aggregation, and embedding similarity.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("masks differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("spacings differ: {a:?} vs {b:?}")]
    SpacingMismatch { a: [f64; 3], b: [f64; 3] },
    #[error("both masks are empty")]
    BothEmpty,
    #[error("a mask is empty")]
    EitherEmpty,
    #[error("vector {0} has zero norm")]
    ZeroVector(usize),
    #[error("vector {index} has length {len}, expected {expected}")]
    LengthMismatch { index: usize, len: usize, expected: usize },
    #[error("no records to aggregate")]
    NoRecords,
}

/// Report columns, best direction marked.
pub const COLUMNS: [&str; 3] = ["Dice ↑", "IoU ↑", "HD ↓"];

pub const REPORT_SCHEMA: u32 = 1;

fn check_dims(p: &Volume, g: &Volume) -> Result<(), MetricsError> {
    if p.dims() != g.dims() {
        return Err(MetricsError::DimensionMismatch { a: p.dims(), b: g.dims() });
    }
    Ok(())
}

/// `(|P|, |G|, |P ∩ G|)`.
pub fn counts(p: &Volume, g: &Volume) -> Result<(usize, usize, usize), MetricsError> {
    check_dims(p, g)?;
    let (mut np, mut ng, mut both) = (0, 0, 0);
    for (&a, &b) in p.data().iter().zip(g.data()) {
        let (a, b) = (a > 0.0, b > 0.0);
        np += a as usize;
        ng += b as usize;
        both += (a && b) as usize;
    }
    Ok((np, ng, both))
}

/// `2|P ∩ G| / (|P| + |G|)`.
pub fn dice(p: &Volume, g: &Volume) -> Result<f64, MetricsError> {
    let (np, ng, both) = counts(p, g)?;
    if np + ng == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(2.0 * both as f64 / (np + ng) as f64)
}

/// `|P ∩ G| / |P ∪ G|`.
pub fn iou(p: &Volume, g: &Volume) -> Result<f64, MetricsError> {
    let (np, ng, both) = counts(p, g)?;
    if np + ng == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(both as f64 / (np + ng - both) as f64)
}

/// One 1D pass of the lower-envelope squared distance transform with sample
/// spacing `s` (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = s * s;
    let cost = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = (cost(q) - cost(p)) / (2.0 * s2 * (q - p) as f64);
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = s * q.abs_diff(v[k]) as f64;
        *o = f[v[k]] + d * d;
    }
}

/// Squared Euclidean distance in mm from every voxel to the nearest
/// foreground voxel of `mask`.
pub fn squared_distance_map(mask: &Volume) -> Vec<f64> {
    let [nx, ny, nz] = mask.dims();
    let sp = mask.spacing();
    let mut d: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.0 { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut out = Vec::new();
    let dims = [nx, ny, nz];
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = dims[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let base = i * strides[a] + j * strides[b];
                for k in 0..n {
                    line[k] = d[base + k * strides[axis]];
                }
                edt_1d(&line, sp[axis], &mut out, &mut v, &mut z);
                for k in 0..n {
                    d[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    d
}

fn check_pair(p: &Volume, g: &Volume) -> Result<(), MetricsError> {
    check_dims(p, g)?;
    if p.spacing() != g.spacing() {
        return Err(MetricsError::SpacingMismatch {
            a: p.spacing(),
            b: g.spacing(),
        });
    }
    if p.foreground_count() == 0 || g.foreground_count() == 0 {
        return Err(MetricsError::EitherEmpty);
    }
    Ok(())
}

/// Distances in mm from each foreground voxel of `from` to the nearest
/// foreground voxel of `to`.
fn directed<'a>(from: &'a Volume, to_map: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    from.data()
        .iter()
        .zip(to_map)
        .filter(|(&m, _)| m > 0.0)
        .map(|(_, &d2)| d2.sqrt())
}

/// Symmetric Hausdorff distance in mm between the foreground voxel centres of
/// `p` and `g`, using the masks' spacing.
pub fn hausdorff_mm(p: &Volume, g: &Volume) -> Result<f64, MetricsError> {
    check_pair(p, g)?;
    let to_g = squared_distance_map(g);
    let to_p = squared_distance_map(p);
    let a = directed(p, &to_g).fold(0.0, f64::max);
    let b = directed(g, &to_p).fold(0.0, f64::max);
    Ok(a.max(b))
}

/// 95th percentile of the pooled directed distances. Reported on request
/// only; never used in place of [`hausdorff_mm`].
pub fn hausdorff95_mm(p: &Volume, g: &Volume) -> Result<f64, MetricsError> {
    check_pair(p, g)?;
    let to_g = squared_distance_map(g);
    let to_p = squared_distance_map(p);
    let mut all: Vec<f64> = directed(p, &to_g).chain(directed(g, &to_p)).collect();
    all.sort_by(f64::total_cmp);
    Ok(crate::profiler::quantile(&all, 0.95))
}

/// Pairwise cosine similarity `<v_i, v_j> / (|v_i| |v_j|)`.
pub fn cosine_similarity_matrix(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MetricsError> {
    let Some(first) = vectors.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    let mut norms = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != len {
            return Err(MetricsError::LengthMismatch {
                index: i,
                len: v.len(),
                expected: len,
            });
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(MetricsError::ZeroVector(i));
        }
        norms.push(n);
    }
    let n = vectors.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let c = dot / (norms[i] * norms[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Quality of one structure under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case_id: String,
    pub structure: String,
    pub config_id: String,
    pub dice: f64,
    pub iou: f64,
    /// Absent when the prediction is empty.
    pub hausdorff_mm: Option<f64>,
    /// Total milliseconds per stage; empty unless profiling was on.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
}

/// Scores a prediction against a non-empty ground truth. An empty
/// prediction scores 0 overlap and no Hausdorff distance.
pub fn evaluate(
    pred: &Volume,
    gt: &Volume,
    case_id: &str,
    structure: &str,
    config_id: &str,
) -> Result<MetricsRecord, MetricsError> {
    let (np, ng, _) = counts(pred, gt)?;
    if ng == 0 {
        return Err(if np == 0 {
            MetricsError::BothEmpty
        } else {
            MetricsError::EitherEmpty
        });
    }
    let hausdorff_mm = if np == 0 { None } else { Some(hausdorff_mm(pred, gt)?) };
    Ok(MetricsRecord {
        case_id: case_id.into(),
        structure: structure.into(),
        config_id: config_id.into(),
        dice: dice(pred, gt)?,
        iou: iou(pred, gt)?,
        hausdorff_mm,
        timings: BTreeMap::new(),
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub dice: Stat,
    pub iou: Stat,
    /// `None` when every record lacks a Hausdorff distance.
    pub hausdorff_mm: Option<Stat>,
    /// Records left out of the Hausdorff statistics.
    pub hausdorff_excluded: usize,
}

impl Summary {
    fn of(records: &[&MetricsRecord]) -> Summary {
        let dice: Vec<f64> = records.iter().map(|r| r.dice).collect();
        let iou: Vec<f64> = records.iter().map(|r| r.iou).collect();
        let hd: Vec<f64> = records.iter().filter_map(|r| r.hausdorff_mm).collect();
        Summary {
            count: records.len(),
            dice: Stat::of(&dice).expect("non-empty group"),
            iou: Stat::of(&iou).expect("non-empty group"),
            hausdorff_mm: Stat::of(&hd),
            hausdorff_excluded: records.len() - hd.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_class: BTreeMap<String, Summary>,
    pub overall: Summary,
}

/// Per-structure and overall statistics.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Aggregate, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let mut groups: BTreeMap<&str, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.structure).or_default().push(r);
    }
    Ok(Aggregate {
        per_class: groups.iter().map(|(k, v)| (k.to_string(), Summary::of(v))).collect(),
        overall: Summary::of(&records.iter().collect::<Vec<_>>()),
    })
}

fn pm(s: &Stat) -> String {
    format!("{:.3} ± {:.3}", s.mean, s.std)
}

/// Markdown table with one row per class and an overall row. HD is in mm.
pub fn render_table(agg: &Aggregate) -> String {
    let mut out = format!("| Class | {} | {} | {} (mm) | n | HD excluded |\n", COLUMNS[0], COLUMNS[1], COLUMNS[2]);
    out.push_str("|---|---|---|---|---|---|\n");
    let row = |name: &str, s: &Summary| {
        format!(
            "| {name} | {} | {} | {} | {} | {} |\n",
            pm(&s.dice),
            pm(&s.iou),
            s.hausdorff_mm.as_ref().map(pm).unwrap_or_else(|| "n/a".into()),
            s.count,
            s.hausdorff_excluded
        )
    };
    for (name, s) in &agg.per_class {
        out.push_str(&row(name, s));
    }
    out.push_str(&row("overall", &agg.overall));
    out
}

/// One CSV row per record.
pub fn write_records_csv(records: &[MetricsRecord], out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_id", "case_id", "structure", "dice", "iou", "hausdorff_mm"])?;
    for r in records {
        w.write_record([
            r.config_id.clone(),
            r.case_id.clone(),
            r.structure.clone(),
            format!("{:.6}", r.dice),
            format!("{:.6}", r.iou),
            r.hausdorff_mm.map(|h| format!("{h:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Nested `config -> class -> summary` report with schema version and units.
pub fn json_report(records: &[MetricsRecord]) -> serde_json::Value {
    let mut by_config: BTreeMap<&str, Vec<MetricsRecord>> = BTreeMap::new();
    for r in records {
        by_config.entry(&r.config_id).or_default().push(r.clone());
    }
    let configs: serde_json::Map<String, serde_json::Value> = by_config
        .into_iter()
        .map(|(k, v)| {
            let agg = aggregate(&v).expect("non-empty group");
            (k.to_string(), serde_json::to_value(agg).expect("serializable"))
        })
        .collect();
    serde_json::json!({
        "schema": REPORT_SCHEMA,
        "columns": COLUMNS,
        "hausdorff_units": "mm",
        "configs": configs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Volume {
        Volume::mask_from_fn(dims, [1.0; 3], |x, y, z| on.contains(&[x, y, z])).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let g = mask([4, 1, 1], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let p = mask([4, 1, 1], &[[0, 0, 0], [1, 0, 0]]);
        assert!((dice(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&p, &g).unwrap(), 0.5);
        assert_eq!(dice(&g, &g).unwrap(), 1.0);
        let q = mask([4, 1, 1], &[[3, 0, 0]]);
        assert_eq!(dice(&p, &q).unwrap(), 0.0);
        let empty = mask([4, 1, 1], &[]);
        assert_eq!(dice(&empty, &empty), Err(MetricsError::BothEmpty));
    }

    #[test]
    fn hausdorff_three_four_five() {
        let p = mask([5, 5, 1], &[[0, 0, 0]]);
        let g = mask([5, 5, 1], &[[3, 4, 0]]);
        assert_eq!(hausdorff_mm(&p, &g).unwrap(), 5.0);
        assert_eq!(hausdorff_mm(&g, &g).unwrap(), 0.0);
        let empty = mask([5, 5, 1], &[]);
        assert_eq!(hausdorff_mm(&p, &empty), Err(MetricsError::EitherEmpty));
    }

    #[test]
    fn interior_voxel_can_be_farthest() {
        // the centre of P is 3 voxels from every point of G, the P surface at most sqrt(6)
        let mut on = Vec::new();
        for x in 2..5 {
            for y in 2..5 {
                for z in 2..5 {
                    on.push([x, y, z]);
                }
            }
        }
        let p = mask([7, 7, 7], &on);
        let g = mask(
            [7, 7, 7],
            &[[0, 3, 3], [6, 3, 3], [3, 0, 3], [3, 6, 3], [3, 3, 0], [3, 3, 6]],
        );
        assert_eq!(hausdorff_mm(&p, &g).unwrap(), 3.0);
    }

    #[test]
    fn anisotropic_spacing() {
        let p = Volume::mask_from_fn([1, 1, 4], [0.5, 0.5, 2.0], |_, _, z| z == 0).unwrap();
        let g = Volume::mask_from_fn([1, 1, 4], [0.5, 0.5, 2.0], |_, _, z| z == 3).unwrap();
        assert_eq!(hausdorff_mm(&p, &g).unwrap(), 6.0);
    }

    #[test]
    fn hd95_not_above_max() {
        let p = mask([6, 1, 1], &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]);
        let g = mask([6, 1, 1], &[[0, 0, 0], [5, 0, 0]]);
        assert!(hausdorff95_mm(&p, &g).unwrap() <= hausdorff_mm(&p, &g).unwrap());
    }

    #[test]
    fn cosine_examples() {
        let m = cosine_similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[0][2], 1.0);
        assert_eq!(m[1][1], 1.0);
        assert_eq!(
            cosine_similarity_matrix(&[vec![1.0], vec![0.0]]),
            Err(MetricsError::ZeroVector(1))
        );
    }

    fn record(structure: &str, dice: f64, hd: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            case_id: "c".into(),
            structure: structure.into(),
            config_id: "cfg".into(),
            dice,
            iou: dice / (2.0 - dice),
            hausdorff_mm: hd,
            timings: BTreeMap::new(),
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[record("femur", 0.8, Some(2.0))]).unwrap();
        assert_eq!(one.overall.dice, Stat { mean: 0.8, std: 0.0 });
        let two = aggregate(&[record("femur", 0.8, Some(2.0)), record("femur", 0.9, None)]).unwrap();
        assert!((two.per_class["femur"].dice.mean - 0.85).abs() < 1e-12);
        assert_eq!(two.per_class["femur"].hausdorff_excluded, 1);
        assert_eq!(two.per_class["femur"].hausdorff_mm.unwrap().mean, 2.0);
        assert_eq!(aggregate(&[]), Err(MetricsError::NoRecords));
    }

    #[test]
    fn table_header_columns() {
        let t = render_table(&aggregate(&[record("sacrum", 0.7, None)]).unwrap());
        let header = t.lines().next().unwrap();
        let cells: Vec<&str> = header.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
        assert_eq!(&cells[1..4], &["Dice ↑", "IoU ↑", "HD ↓ (mm)"]);
        assert!(t.contains("n/a"));
    }

    #[test]
    fn empty_prediction_policy() {
        let g = mask([3, 1, 1], &[[1, 0, 0]]);
        let p = mask([3, 1, 1], &[]);
        let r = evaluate(&p, &g, "c", "s", "cfg").unwrap();
        assert_eq!((r.dice, r.iou, r.hausdorff_mm), (0.0, 0.0, None));
    }

    #[test]
    fn csv_and_json_reports() {
        let recs = [record("femur", 0.5, Some(1.5))];
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("config_id,case_id,structure,dice,iou,hausdorff_mm\n"));
        let j = json_report(&recs);
        assert_eq!(j["schema"], 1);
        assert_eq!(j["configs"]["cfg"]["per_class"]["femur"]["count"], 1);
    }
}
