use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::model::{Activation, MixerConfig, MixerKind, ModelConfig};

/// Values to sweep; an empty axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    pub context_len: Vec<usize>,
    pub filter_len: Vec<usize>,
    pub filter_count: Vec<usize>,
    pub mixer: Vec<MixerConfig>,
    pub activation: Vec<Activation>,
    pub include_action_tokens: Vec<bool>,
    pub projection_layer: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    ContextLen(usize),
    FilterLen(usize),
    FilterCount(usize),
    Mixer(MixerConfig),
    Activation(Activation),
    IncludeActionTokens(bool),
    ProjectionLayer(bool),
}

impl AxisValue {
    pub fn axis(&self) -> &'static str {
        match self {
            AxisValue::ContextLen(_) => "K",
            AxisValue::FilterLen(_) => "L",
            AxisValue::FilterCount(_) => "filters",
            AxisValue::Mixer(_) => "mixer",
            AxisValue::Activation(_) => "activation",
            AxisValue::IncludeActionTokens(_) => "actions",
            AxisValue::ProjectionLayer(_) => "projection",
        }
    }

    fn apply(&self, c: &mut ModelConfig) {
        match *self {
            AxisValue::ContextLen(v) => c.context_len = v,
            AxisValue::FilterLen(v) => c.filter_len = v,
            AxisValue::FilterCount(v) => c.filter_count = v,
            AxisValue::Mixer(v) => c.mixer = v,
            AxisValue::Activation(v) => c.activation = v,
            AxisValue::IncludeActionTokens(v) => c.include_action_tokens = v,
            AxisValue::ProjectionLayer(v) => c.projection_layer = v,
        }
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::ContextLen(v) | AxisValue::FilterLen(v) | AxisValue::FilterCount(v) => write!(f, "{v}"),
            AxisValue::Mixer(m) => f.write_str(m.as_str()),
            AxisValue::Activation(a) => f.write_str(match a {
                Activation::Gelu => "gelu",
                Activation::Relu => "relu",
            }),
            AxisValue::IncludeActionTokens(b) | AxisValue::ProjectionLayer(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    /// Position in the full grid, before skipping.
    pub index: usize,
    pub values: Vec<AxisValue>,
    pub config: ModelConfig,
}

impl AblationCell {
    /// `K=8;L=6`, or `base` for a grid without axes.
    pub fn descriptor(&self) -> String {
        if self.values.is_empty() {
            return "base".into();
        }
        self.values
            .iter()
            .map(|v| format!("{}={v}", v.axis()))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Cartesian product of the non-empty axes in declaration order (the last
/// axis varies fastest). Cells whose filter would reach past the token
/// sequence, or whose config is otherwise invalid, come back in the second
/// list with the reason.
pub fn expand_grid(base: &ModelConfig, axes: &AblationAxes) -> (Vec<AblationCell>, Vec<(AblationCell, String)>) {
    let lists: Vec<Vec<AxisValue>> = [
        axes.context_len.iter().map(|&v| AxisValue::ContextLen(v)).collect::<Vec<_>>(),
        axes.filter_len.iter().map(|&v| AxisValue::FilterLen(v)).collect(),
        axes.filter_count.iter().map(|&v| AxisValue::FilterCount(v)).collect(),
        axes.mixer.iter().map(|&v| AxisValue::Mixer(v)).collect(),
        axes.activation.iter().map(|&v| AxisValue::Activation(v)).collect(),
        axes.include_action_tokens.iter().map(|&v| AxisValue::IncludeActionTokens(v)).collect(),
        axes.projection_layer.iter().map(|&v| AxisValue::ProjectionLayer(v)).collect(),
    ]
    .into_iter()
    .filter(|l| !l.is_empty())
    .collect();

    let mut combos: Vec<Vec<AxisValue>> = vec![vec![]];
    for list in &lists {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                list.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(*v);
                    c
                })
            })
            .collect();
    }

    let (mut cells, mut skipped) = (vec![], vec![]);
    for (index, values) in combos.into_iter().enumerate() {
        let mut config = base.clone();
        values.iter().for_each(|v| v.apply(&mut config));
        let cell = AblationCell { index, values, config };
        let c = &cell.config;
        let n = c.layout().seq_len();
        let has_conv = c.block_kinds().contains(&MixerKind::Conv);
        if has_conv && c.filter_len > n {
            let reason = format!("filter_len {} exceeds the {n}-token sequence at K={}", c.filter_len, c.context_len);
            skipped.push((cell, reason));
        } else if let Err(e) = c.validate() {
            skipped.push((cell, e.to_string()));
        } else {
            cells.push(cell);
        }
    }
    (cells, skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub cell: AblationCell,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

impl AblationResult {
    pub fn new(cell: AblationCell, metric: &str, seeds: Vec<u64>, values: Vec<f64>) -> Self {
        assert_eq!(seeds.len(), values.len(), "one value per seed");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            cell,
            metric: metric.into(),
            seeds,
            values,
            mean,
            std,
        }
    }
}

/// One row per (cell, seed), ordered by grid position.
pub fn runs_csv(results: &[AblationResult]) -> String {
    let mut sorted: Vec<&AblationResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.cell.index);
    let axes: Vec<&str> = sorted
        .first()
        .map(|r| r.cell.values.iter().map(|v| v.axis()).collect())
        .unwrap_or_default();
    let mut out = String::from("cell");
    for a in &axes {
        let _ = write!(out, ",{a}");
    }
    out.push_str(",seed,metric,value\n");
    for r in sorted {
        for (s, v) in r.seeds.iter().zip(&r.values) {
            out.push_str(&r.cell.descriptor());
            for x in &r.cell.values {
                let _ = write!(out, ",{x}");
            }
            let _ = writeln!(out, ",{s},{},{v}", r.metric);
        }
    }
    out
}

/// Summary table with one column pair (`<value>_mean`, `<value>_std`) per
/// value of `col_axis`, and one row per combination of the other axes.
/// `K x L` grids pivoted on `L` give rows `K=8`, `K=20`; a lone axis gives
/// a single `all` row. Missing (skipped) cells are left empty.
pub fn pivot_csv(results: &[AblationResult], col_axis: &str) -> String {
    let mut sorted: Vec<&AblationResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.cell.index);
    let mut cols: Vec<String> = vec![];
    let mut rows: Vec<String> = vec![];
    let mut table: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
    for r in &sorted {
        let col = r
            .cell
            .values
            .iter()
            .find(|v| v.axis() == col_axis)
            .map(|v| v.to_string())
            .unwrap_or_else(|| "base".into());
        let rest: Vec<String> = r
            .cell
            .values
            .iter()
            .filter(|v| v.axis() != col_axis)
            .map(|v| format!("{}={v}", v.axis()))
            .collect();
        let row = if rest.is_empty() { "all".into() } else { rest.join(";") };
        if !cols.contains(&col) {
            cols.push(col.clone());
        }
        if !rows.contains(&row) {
            rows.push(row.clone());
        }
        table.insert((row, col), (r.mean, r.std));
    }
    let mut out = String::from("row");
    for c in &cols {
        let _ = write!(out, ",{col_axis}={c}_mean,{col_axis}={c}_std");
    }
    out.push('\n');
    for row in &rows {
        out.push_str(row);
        for c in &cols {
            match table.get(&(row.clone(), c.clone())) {
                Some((m, s)) => {
                    let _ = write!(out, ",{m},{s}");
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}
