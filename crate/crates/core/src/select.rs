//! (β, λ) selection over aggregated sweep results by augmented Tchebycheff
//! scalarization of two min-max normalized objectives: reconstruction error
//! `f1` and an entanglement score `f2`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::sweep::{AggregateRow, Procedure, Summary};

pub const DEFAULT_RHO: f64 = 1e-3;
/// Zero preference weights are raised to this value.
pub const MIN_WEIGHT: f64 = 1e-9;
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Disentanglement metric behind `f2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F2Metric {
    /// `f2 = 1 − MIG`.
    Mig,
    /// `f2 = 1 − I_m / max over the grid of I_m`.
    Im,
}

/// Which cell statistic feeds the objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub beta: f64,
    pub lambda: f64,
    pub f1: f64,
    pub f2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveGrid {
    pub cells: Vec<GridCell>,
    pub metric: F2Metric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectFlag {
    /// Only one cell: it is selected by default.
    SingleCell,
    /// Objective `index` (1 or 2) is constant over the grid.
    ConstantObjective { index: usize },
}

impl fmt::Display for SelectFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectFlag::SingleCell => f.write_str("single_cell"),
            SelectFlag::ConstantObjective { index } => write!(f, "constant_f{index}"),
        }
    }
}

impl Serialize for SelectFlag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalizedCell {
    pub beta: f64,
    pub lambda: f64,
    pub f1: f64,
    pub f2: f64,
    pub f1_norm: f64,
    pub f2_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizedGrid {
    pub cells: Vec<NormalizedCell>,
    pub metric: F2Metric,
    pub flags: Vec<SelectFlag>,
}

impl ObjectiveGrid {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Usage("empty objective grid".into()));
        }
        for (i, c) in self.cells.iter().enumerate() {
            if !(c.f1.is_finite() && c.f2.is_finite() && c.beta.is_finite() && c.lambda.is_finite()) {
                return Err(Error::Domain(format!(
                    "cell (β={}, λ={}) has a non-finite entry",
                    c.beta, c.lambda
                )));
            }
            if self.cells[..i].iter().any(|d| d.beta == c.beta && d.lambda == c.lambda) {
                return Err(Error::Domain(format!("duplicate cell (β={}, λ={})", c.beta, c.lambda)));
            }
        }
        Ok(())
    }
}

fn min_max(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// Min-max normalization of each objective over the grid. A constant
/// objective maps to all zeros and is flagged.
pub fn normalize_objectives(grid: &ObjectiveGrid) -> Result<NormalizedGrid> {
    grid.validate()?;
    let mut flags = Vec::new();
    if grid.cells.len() == 1 {
        flags.push(SelectFlag::SingleCell);
    }
    let (lo1, hi1) = min_max(grid.cells.iter().map(|c| c.f1));
    let (lo2, hi2) = min_max(grid.cells.iter().map(|c| c.f2));
    let scale = |x: f64, lo: f64, hi: f64| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
    if !(hi1 > lo1) {
        flags.push(SelectFlag::ConstantObjective { index: 1 });
    }
    if !(hi2 > lo2) {
        flags.push(SelectFlag::ConstantObjective { index: 2 });
    }
    let cells = grid
        .cells
        .iter()
        .map(|c| NormalizedCell {
            beta: c.beta,
            lambda: c.lambda,
            f1: c.f1,
            f2: c.f2,
            f1_norm: scale(c.f1, lo1, hi1),
            f2_norm: scale(c.f2, lo2, hi2),
        })
        .collect();
    Ok(NormalizedGrid {
        cells,
        metric: grid.metric,
        flags,
    })
}

/// Checks `w` and raises zero entries to [`MIN_WEIGHT`].
pub fn effective_weights(w: (f64, f64)) -> Result<(f64, f64)> {
    let (w1, w2) = w;
    if !(w1 >= 0.0 && w2 >= 0.0) {
        return Err(Error::Domain(format!("weights must be nonnegative, got ({w1}, {w2})")));
    }
    if (w1 + w2 - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Domain(format!("weights must sum to 1, got ({w1}, {w2})")));
    }
    Ok((w1.max(MIN_WEIGHT), w2.max(MIN_WEIGHT)))
}

/// `max(w1 f̄1, w2 f̄2) + ρ (w1 f̄1 + w2 f̄2)`; lower is better.
pub fn tchebycheff_score(fbar: (f64, f64), w: (f64, f64), rho: f64) -> Result<f64> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!("rho must be nonnegative, got {rho}")));
    }
    let (w1, w2) = effective_weights(w)?;
    let (a, b) = (w1 * fbar.0, w2 * fbar.1);
    Ok(a.max(b) + rho * (a + b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedCell {
    pub rank: usize,
    #[serde(flatten)]
    pub cell: NormalizedCell,
    pub score: f64,
    pub pareto: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub beta: f64,
    pub lambda: f64,
    pub weights: (f64, f64),
    pub rho: f64,
    pub metric: F2Metric,
    /// Best first.
    pub ranked: Vec<RankedCell>,
    pub flags: Vec<SelectFlag>,
}

/// Minimizes the score over the grid; equal scores go to the smaller β,
/// then the smaller λ.
pub fn select_config(grid: &NormalizedGrid, w: (f64, f64), rho: f64) -> Result<Selection> {
    if grid.cells.is_empty() {
        return Err(Error::Usage("empty objective grid".into()));
    }
    let front = pareto_mask(&grid.cells.iter().map(|c| (c.f1, c.f2)).collect::<Vec<_>>());
    let mut ranked = grid
        .cells
        .iter()
        .zip(front)
        .map(|(c, pareto)| {
            Ok(RankedCell {
                rank: 0,
                cell: *c,
                score: tchebycheff_score((c.f1_norm, c.f2_norm), w, rho)?,
                pareto,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.cell.beta.total_cmp(&b.cell.beta))
            .then(a.cell.lambda.total_cmp(&b.cell.lambda))
    });
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(Selection {
        beta: ranked[0].cell.beta,
        lambda: ranked[0].cell.lambda,
        weights: w,
        rho,
        metric: grid.metric,
        ranked,
        flags: grid.flags.clone(),
    })
}

fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// `true` for points no other point dominates. Sort-and-sweep, O(k log k).
fn pareto_mask(points: &[(f64, f64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .0
            .total_cmp(&points[j].0)
            .then(points[i].1.total_cmp(&points[j].1))
    });
    let mut mask = vec![false; points.len()];
    // Best f2 among points with strictly smaller f1.
    let mut best_prev = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let f1 = points[order[k]].0;
        let mut end = k;
        while end < order.len() && points[order[end]].0 == f1 {
            end += 1;
        }
        // Within a run of equal f1 the first entry has the least f2.
        let group_min = points[order[k]].1;
        for &i in &order[k..end] {
            let f2 = points[i].1;
            mask[i] = f2 < best_prev && f2 == group_min;
        }
        best_prev = best_prev.min(group_min);
        k = end;
    }
    mask
}

/// Cells not dominated in raw `(f1, f2)`, in grid order.
pub fn pareto_front(grid: &ObjectiveGrid) -> Result<Vec<GridCell>> {
    grid.validate()?;
    let pts: Vec<(f64, f64)> = grid.cells.iter().map(|c| (c.f1, c.f2)).collect();
    Ok(grid
        .cells
        .iter()
        .zip(pareto_mask(&pts))
        .filter_map(|(c, keep)| keep.then_some(*c))
        .collect())
}

/// Quadratic reference for the front, used to cross-check [`pareto_front`].
pub fn pareto_front_naive(cells: &[GridCell]) -> Vec<GridCell> {
    cells
        .iter()
        .filter(|c| !cells.iter().any(|d| dominates((d.f1, d.f2), (c.f1, c.f2))))
        .copied()
        .collect()
}

fn stat_of(s: Option<&Summary>, stat: Statistic) -> Option<f64> {
    let s = s?;
    match stat {
        Statistic::Mean => s.mean,
        Statistic::Median => s.median,
    }
}

/// Builds `(f1, f2)` per `(β, λ)` from aggregate rows of one procedure, with
/// `f1` the reconstruction NLL statistic.
pub fn grid_from_aggregates(
    rows: &[AggregateRow],
    procedure: Procedure,
    metric: F2Metric,
    stat: Statistic,
) -> Result<ObjectiveGrid> {
    let rows: Vec<&AggregateRow> = rows.iter().filter(|r| r.procedure == procedure).collect();
    if rows.is_empty() {
        return Err(Error::Usage(format!("no aggregate rows for procedure {procedure}")));
    }
    let missing = |r: &AggregateRow, what: &str| {
        Error::Domain(format!("cell (β={}, λ={}) has no {what} values", r.beta, r.lambda))
    };
    let mut raw = Vec::with_capacity(rows.len());
    for r in &rows {
        let f1 = stat_of(r.summary("recon_nll"), stat).ok_or_else(|| missing(r, "recon_nll"))?;
        let key = match metric {
            F2Metric::Mig => "mig",
            F2Metric::Im => "im",
        };
        let d = stat_of(r.summary(key), stat).ok_or_else(|| missing(r, key))?;
        raw.push((r.beta, r.lambda, f1, d));
    }
    let cells = match metric {
        F2Metric::Mig => raw
            .into_iter()
            .map(|(beta, lambda, f1, mig)| GridCell {
                beta,
                lambda,
                f1,
                f2: 1.0 - mig,
            })
            .collect(),
        F2Metric::Im => {
            let max = raw.iter().map(|r| r.3).fold(0.0, f64::max);
            raw.into_iter()
                .map(|(beta, lambda, f1, im)| GridCell {
                    beta,
                    lambda,
                    f1,
                    f2: if max > 0.0 { 1.0 - im / max } else { 1.0 },
                })
                .collect()
        }
    };
    let grid = ObjectiveGrid { cells, metric };
    grid.validate()?;
    Ok(grid)
}

pub fn write_ranked_csv<W: Write>(sel: &Selection, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rank", "beta", "lambda", "f1", "f2", "f1_norm", "f2_norm", "score", "pareto"])?;
    for r in &sel.ranked {
        let c = &r.cell;
        w.write_record([
            r.rank.to_string(),
            format!("{:.16e}", c.beta),
            format!("{:.16e}", c.lambda),
            format!("{:.16e}", c.f1),
            format!("{:.16e}", c.f2),
            format!("{:.16e}", c.f1_norm),
            format!("{:.16e}", c.f2_norm),
            format!("{:.16e}", r.score),
            r.pareto.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Coarse viridis stops, dark purple to yellow.
const PALETTE: [(u8, u8, u8); 6] = [
    (68, 1, 84),
    (65, 68, 135),
    (42, 120, 142),
    (34, 168, 132),
    (122, 209, 81),
    (253, 231, 37),
];

fn palette(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (PALETTE.len() - 1) as f64;
    let i = (x.floor() as usize).min(PALETTE.len() - 2);
    let f = x - i as f64;
    let lerp = |a: u8, b: u8| (a as f64 + f * (b as f64 - a as f64)).round() as u8;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

fn label(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e9 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Score heatmap: β across, λ down, the selected cell outlined in red.
pub fn render_heatmap_svg(sel: &Selection, title: &str) -> String {
    let mut betas: Vec<f64> = sel.ranked.iter().map(|r| r.cell.beta).collect();
    let mut lambdas: Vec<f64> = sel.ranked.iter().map(|r| r.cell.lambda).collect();
    for v in [&mut betas, &mut lambdas] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let (cw, ch, left, top) = (64.0, 40.0, 70.0, 50.0);
    let width = left + cw * betas.len() as f64 + 20.0;
    let height = top + ch * lambdas.len() as f64 + 50.0;
    let (lo, hi) = min_max(sel.ranked.iter().map(|r| r.score));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg += &format!(
        "<text x=\"{}\" y=\"20\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        escape(title)
    );
    for r in &sel.ranked {
        let c = &r.cell;
        let col = betas.iter().position(|&b| b == c.beta).unwrap_or(0);
        let row = lambdas.iter().position(|&l| l == c.lambda).unwrap_or(0);
        let (x, y) = (left + cw * col as f64, top + ch * row as f64);
        let t = if hi > lo { (r.score - lo) / (hi - lo) } else { 0.0 };
        svg += &format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{}\"/>\n",
            palette(1.0 - t)
        );
        let ink = if t > 0.6 { "#ffffff" } else { "#000000" };
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{:.3}</text>\n",
            x + cw / 2.0,
            y + ch / 2.0 + 4.0,
            r.score
        );
    }
    if let Some(best) = sel.ranked.first() {
        let col = betas.iter().position(|&b| b == best.cell.beta).unwrap_or(0);
        let row = lambdas.iter().position(|&l| l == best.cell.lambda).unwrap_or(0);
        svg += &format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"3\"/>\n",
            left + cw * col as f64 + 1.5,
            top + ch * row as f64 + 1.5,
            cw - 3.0,
            ch - 3.0
        );
    }
    for (i, b) in betas.iter().enumerate() {
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            left + cw * (i as f64 + 0.5),
            top + ch * lambdas.len() as f64 + 16.0,
            label(*b)
        );
    }
    for (j, l) in lambdas.iter().enumerate() {
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            left - 8.0,
            top + ch * (j as f64 + 0.5) + 4.0,
            label(*l)
        );
    }
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">β</text>\n",
        left + cw * betas.len() as f64 / 2.0,
        height - 10.0
    );
    svg += &format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\">λ</text>\n",
        top + ch * lambdas.len() as f64 / 2.0
    );
    svg += "</svg>\n";
    svg
}
