//! Consolidated tables over completed result directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};
use serde::Serialize;
use volprop::config::RunConfig;
use volprop::metrics::{aggregate, Stat, Summary};

use crate::runner::{load_completed, Completed};

/// Column labels for the preset configurations, in table order.
pub const PRESET_COLUMNS: [(&str, &str); 5] = [
    ("np", "NP"),
    ("baseline", "Base"),
    ("sps", "SPS"),
    ("is", "IS"),
    ("is+sps", "IS + SPS"),
];

/// `dir` itself when it holds one run, plus every completed `dir/configs/*`.
pub fn collect(dir: &Path) -> Result<Vec<Completed>> {
    let mut out = Vec::new();
    if let Some(c) = load_completed(dir)? {
        out.push(c);
    }
    let configs = dir.join("configs");
    if configs.is_dir() {
        let mut dirs: Vec<_> = std::fs::read_dir(&configs)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            if let Some(c) = load_completed(&d)? {
                out.push(c);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigSummary {
    pub config_id: String,
    pub name: String,
    pub count: usize,
    pub dice: Option<Stat>,
    pub iou: Option<Stat>,
    pub hausdorff_mm: Option<Stat>,
    /// Mean Dice of this config minus the baseline's.
    pub delta_dice: Option<f64>,
    #[serde(skip)]
    pub per_class: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassRow {
    pub class: String,
    /// Column label to mean `(dice, iou)`.
    pub cells: BTreeMap<String, (f64, f64)>,
    pub delta_dice: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema: u32,
    pub baseline: String,
    pub compare: String,
    pub configs: Vec<ConfigSummary>,
    pub class_columns: Vec<String>,
    pub per_class: Vec<ClassRow>,
}

fn summarize(c: &Completed) -> ConfigSummary {
    let agg = aggregate(&c.records).ok();
    ConfigSummary {
        config_id: c.config.config_id(),
        name: c.config.name.clone(),
        count: c.records.len(),
        dice: agg.as_ref().map(|a| a.overall.dice),
        iou: agg.as_ref().map(|a| a.overall.iou),
        hausdorff_mm: agg.as_ref().and_then(|a| a.overall.hausdorff_mm),
        delta_dice: None,
        per_class: agg.map(|a| a.per_class).unwrap_or_default(),
    }
}

/// Match by name, then id, then the id of the preset called `key`.
fn find<'a>(configs: &'a [ConfigSummary], key: &str) -> Option<&'a ConfigSummary> {
    let preset_id = RunConfig::preset(key).ok().map(|c| c.config_id());
    configs
        .iter()
        .find(|c| c.name == key)
        .or_else(|| configs.iter().find(|c| c.config_id == key))
        .or_else(|| configs.iter().find(|c| Some(&c.config_id) == preset_id.as_ref()))
}

fn label_for(name: &str) -> String {
    PRESET_COLUMNS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, l)| l.to_string())
        .unwrap_or_else(|| name.to_string())
}

/// Builds the report with Δ-Dice taken as `variant - baseline`. `baseline`
/// and `compare` are config names or ids; `compare` defaults to `is+sps`
/// when present and otherwise to the baseline itself.
pub fn build(completed: &[Completed], baseline: &str, compare: Option<&str>) -> Result<Report> {
    if completed.is_empty() {
        bail!("no completed results found");
    }
    let mut configs: Vec<ConfigSummary> = completed.iter().map(summarize).collect();
    configs.sort_by(|a, b| (&a.name, &a.config_id).cmp(&(&b.name, &b.config_id)));
    configs.dedup_by(|a, b| a.config_id == b.config_id && a.name == b.name);
    let Some(base) = find(&configs, baseline).cloned() else {
        bail!("baseline `{baseline}` not among completed configs");
    };
    let cmp = match compare {
        Some(key) => match find(&configs, key) {
            Some(c) => c.clone(),
            None => bail!("comparison config `{key}` not among completed configs"),
        },
        None => find(&configs, "is+sps").unwrap_or(&base).clone(),
    };
    let base_dice = base.dice.map(|s| s.mean);
    for c in &mut configs {
        c.delta_dice = match (c.dice, base_dice) {
            (Some(d), Some(b)) => Some(d.mean - b),
            _ => None,
        };
    }

    let mut columns: Vec<&ConfigSummary> = PRESET_COLUMNS
        .iter()
        .filter_map(|(name, _)| configs.iter().find(|c| c.name == *name))
        .collect();
    for c in [&base, &cmp] {
        if !columns.iter().any(|x| x.config_id == c.config_id && x.name == c.name) {
            columns.push(c);
        }
    }
    let class_columns: Vec<String> = columns.iter().map(|c| label_for(&c.name)).collect();
    let classes: std::collections::BTreeSet<&String> = columns.iter().flat_map(|c| c.per_class.keys()).collect();
    let per_class = classes
        .into_iter()
        .map(|class| {
            let cells = columns
                .iter()
                .zip(&class_columns)
                .filter_map(|(c, label)| c.per_class.get(class).map(|s| (label.clone(), (s.dice.mean, s.iou.mean))))
                .collect();
            let delta_dice = match (cmp.per_class.get(class), base.per_class.get(class)) {
                (Some(v), Some(b)) => Some(v.dice.mean - b.dice.mean),
                _ => None,
            };
            ClassRow {
                class: class.clone(),
                cells,
                delta_dice,
            }
        })
        .collect();
    Ok(Report {
        schema: 1,
        baseline: base.config_id.clone(),
        compare: cmp.config_id.clone(),
        configs,
        class_columns,
        per_class,
    })
}

fn pm(s: Option<Stat>) -> String {
    s.map(|s| format!("{:.3} ± {:.3}", s.mean, s.std)).unwrap_or_else(|| "n/a".into())
}

fn signed(d: Option<f64>) -> String {
    match d {
        // avoid printing -0.000
        Some(d) if d.abs() < 5e-4 => "+0.000".into(),
        Some(d) => format!("{d:+.3}"),
        None => "n/a".into(),
    }
}

pub fn render(r: &Report) -> String {
    let mut s = String::new();
    let base_name = r
        .configs
        .iter()
        .find(|c| c.config_id == r.baseline)
        .map(|c| c.name.as_str())
        .unwrap_or("");
    writeln!(s, "## Configurations (Δ Dice vs `{base_name}`)\n").unwrap();
    writeln!(s, "| Config | config_id | n | Dice ↑ | IoU ↑ | HD ↓ (mm) | Δ Dice |").unwrap();
    writeln!(s, "|---|---|---|---|---|---|---|").unwrap();
    for c in &r.configs {
        writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            c.name,
            c.config_id,
            c.count,
            pm(c.dice),
            pm(c.iou),
            pm(c.hausdorff_mm),
            signed(c.delta_dice)
        )
        .unwrap();
    }
    writeln!(s, "\n## Per class (Dice / IoU)\n").unwrap();
    let mut header = String::from("| Class |");
    let mut rule = String::from("|---|");
    for col in &r.class_columns {
        write!(header, " {col} |").unwrap();
        rule.push_str("---|");
    }
    writeln!(s, "{header} Δ Dice |").unwrap();
    writeln!(s, "{rule}---|").unwrap();
    for row in &r.per_class {
        let mut line = format!("| {} |", row.class);
        for col in &r.class_columns {
            match row.cells.get(col) {
                Some((d, i)) => write!(line, " {d:.3} / {i:.3} |").unwrap(),
                None => line.push_str(" n/a |"),
            }
        }
        writeln!(s, "{line} {} |", signed(row.delta_dice)).unwrap();
    }
    s
}

