use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FusionPoint;

use super::grid::{run_cells, Cell, GridOptions, GridOutcome, GridSpec, ResultTable};
use super::{ExperimentData, Method, Variant};

/// `variant` column value of the RGB-only reference rows.
pub const BASELINE_VARIANT: &str = "baseline";

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub grid: GridOutcome,
    /// (label, mean accuracy in percent) per variant, in run order.
    pub summary: Vec<(String, f64)>,
}

fn depth_name(depth: usize) -> String {
    format!("depth-{depth}")
}

/// Bar label for a `variant` column value.
fn display_label(variant: &str) -> String {
    if variant == BASELINE_VARIANT {
        return "Baseline".into();
    }
    if let Some(d) = variant.strip_prefix("depth-") {
        return format!("Conv-{d}");
    }
    variant
        .parse::<FusionPoint>()
        .map(|p| p.label().to_owned())
        .unwrap_or_else(|_| variant.to_owned())
}

/// Mean accuracy (percent) of every variant over all its seed rows, in
/// order of first appearance.
pub fn summarize_ablation(table: &ResultTable) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for (v, r) in &table.rows {
        let name = v.as_deref().unwrap_or(BASELINE_VARIANT);
        match out.iter_mut().find(|(n, _, _)| n == name) {
            Some(e) => {
                e.1 += r.accuracy;
                e.2 += 1;
            }
            None => out.push((name.to_owned(), r.accuracy, 1)),
        }
    }
    out.into_iter()
        .map(|(n, sum, count)| (display_label(&n), 100.0 * sum / count as f64))
        .collect()
}

/// One `label value` line per bar, value with one decimal.
pub fn render_summary(summary: &[(String, f64)]) -> String {
    summary.iter().map(|(l, v)| format!("{l} {v:.1}\n")).collect()
}

fn with_baseline(spec: &GridSpec, mut cells: Vec<Cell>) -> Vec<Cell> {
    for &k in &spec.k_values {
        for &seed in &spec.seeds {
            cells.push(Cell {
                label: Some(BASELINE_VARIANT.into()),
                variant: spec.variant,
                method: Method::BaselineRgb,
                k,
                seed,
            });
        }
    }
    cells
}

fn approach_b_cells(spec: &GridSpec, label: String, variant: Variant) -> Vec<Cell> {
    spec.k_values
        .iter()
        .flat_map(|&k| {
            let label = label.clone();
            spec.seeds.iter().map(move |&seed| Cell {
                label: Some(label.clone()),
                variant,
                method: Method::ApproachB,
                k,
                seed,
            })
        })
        .collect()
}

fn finish(grid: GridOutcome) -> AblationOutcome {
    let summary = summarize_ablation(&grid.table);
    AblationOutcome { grid, summary }
}

/// Approach B for each saliency depth at the spec's fusion point, plus
/// the baseline. `spec.methods` is ignored.
pub fn ablate_saliency_depth(
    data: &ExperimentData,
    spec: &GridSpec,
    depths: &[usize],
    csv_path: &Path,
    opts: &GridOptions,
) -> Result<AblationOutcome> {
    check_common(spec, depths.len())?;
    let mut cells = Vec::new();
    for &d in depths {
        if !(1..=4).contains(&d) {
            return Err(Error::Config(format!("saliency depth {d} outside 1..=4")));
        }
        let variant = Variant {
            saliency_depth: d,
            ..spec.variant
        };
        cells.extend(approach_b_cells(spec, depth_name(d), variant));
    }
    run_cells(data, &spec.protocol, with_baseline(spec, cells), csv_path, opts).map(finish)
}

/// Approach B for each fusion point at the spec's saliency depth, plus
/// the baseline. `spec.methods` is ignored.
pub fn ablate_fusion_point(
    data: &ExperimentData,
    spec: &GridSpec,
    points: &[FusionPoint],
    csv_path: &Path,
    opts: &GridOptions,
) -> Result<AblationOutcome> {
    check_common(spec, points.len())?;
    let cells = points
        .iter()
        .flat_map(|&p| {
            let variant = Variant {
                fusion_point: p,
                ..spec.variant
            };
            approach_b_cells(spec, p.as_str().to_owned(), variant)
        })
        .collect();
    run_cells(data, &spec.protocol, with_baseline(spec, cells), csv_path, opts).map(finish)
}

fn check_common(spec: &GridSpec, variants: usize) -> Result<()> {
    let probe = GridSpec {
        methods: vec![Method::ApproachB],
        ..spec.clone()
    };
    probe.validate()?;
    if variants == 0 {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::KShot;
    use crate::experiment::RunResult;

    #[test]
    fn labels() {
        assert_eq!(display_label("depth-3"), "Conv-3");
        assert_eq!(display_label("after-conv4"), "After Conv-4");
        assert_eq!(display_label("baseline"), "Baseline");
    }

    #[test]
    fn summary_averages_all_rows_of_a_variant() {
        let mk = |v: &str, seed, acc| {
            (
                Some(v.to_owned()),
                RunResult {
                    method: Method::ApproachB,
                    k: KShot::Count(5),
                    seed,
                    accuracy: acc,
                    epochs: 1,
                    wall_time_s: 0.0,
                    config_hash: String::new(),
                },
            )
        };
        let t = ResultTable::with_means(vec![mk("depth-2", 0, 0.5), mk("depth-2", 1, 0.75), mk("baseline", 0, 0.25)]);
        assert_eq!(render_summary(&summarize_ablation(&t)), "Conv-2 62.5\nBaseline 25.0\n");
    }
}
