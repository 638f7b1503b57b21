//! Static SVG plots of training curves and appearance latents.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::manipulation::LatentRow;
use crate::trainer::MetricsLogRow;

/// What a plot contains, for callers that want to report or check it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSummary {
    pub path: PathBuf,
    /// `(series name, number of points)`.
    pub series: Vec<(String, usize)>,
}

const PALETTE: [RGBColor; 10] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
    RGBColor(188, 189, 34),
    RGBColor(23, 190, 207),
];

fn plot_err(path: &Path) -> impl Fn(String) -> Error + '_ {
    move |message| Error::Format {
        path: path.to_path_buf(),
        message,
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let err = plot_err(path);
    let (x0, x1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Writes `loss.svg` and, when the log has evaluation rows, `eval.svg`.
pub fn plot_metrics(rows: &[MetricsLogRow], out_dir: &Path) -> Result<Vec<PlotSummary>> {
    if rows.is_empty() {
        return Err(Error::Argument("metrics log has no rows".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::new();

    let loss: Vec<(String, Vec<(f64, f64)>)> = ["recon", "total"]
        .into_iter()
        .map(|name| {
            let pts = rows
                .iter()
                .map(|r| {
                    let v = if name == "recon" { r.loss.recon } else { r.loss.total };
                    (r.step as f64, v)
                })
                .filter(|p| p.1.is_finite())
                .collect();
            (name.to_string(), pts)
        })
        .collect();
    let path = out_dir.join("loss.svg");
    line_chart(&path, "Training loss", "loss", &loss)?;
    out.push(PlotSummary {
        path,
        series: loss.iter().map(|s| (s.0.clone(), s.1.len())).collect(),
    });

    let eval: Vec<(String, Vec<(f64, f64)>)> = [("AP", 0), ("ACC", 1), ("NMI", 2)]
        .into_iter()
        .map(|(name, k)| {
            let pts = rows
                .iter()
                .filter_map(|r| [r.ap, r.acc, r.nmi][k].map(|v| (r.step as f64, v)))
                .collect();
            (name.to_string(), pts)
        })
        .collect();
    if eval.iter().any(|s| !s.1.is_empty()) {
        let path = out_dir.join("eval.svg");
        line_chart(&path, "Evaluation during training", "score", &eval)?;
        out.push(PlotSummary {
            path,
            series: eval.iter().map(|s| (s.0.clone(), s.1.len())).collect(),
        });
    }
    Ok(out)
}

/// Projects rows onto their two leading principal components.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::Argument("nothing to project".into()));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("latent rows differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Vec<f64> {
        match order.get(k) {
            Some(&c) => {
                let v = eig.eigenvectors.column(c);
                // Fix the sign so the projection is reproducible.
                let s = if v.iter().fold(0.0, |acc: f64, &e| if e.abs() > acc.abs() { e } else { acc }) < 0.0 {
                    -1.0
                } else {
                    1.0
                };
                v.iter().map(|e| s * e).collect()
            }
            None => vec![0.0; d],
        }
    };
    let (a, b) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let pa = row.iter().zip(&a).map(|(x, y)| x * y).sum();
            let pb = row.iter().zip(&b).map(|(x, y)| x * y).sum();
            (pa, pb)
        })
        .collect())
}

/// Scatter of the latent export in its first two principal components,
/// colored by ground-truth class.
pub fn plot_latents(rows: &[LatentRow], path: &Path) -> Result<PlotSummary> {
    if rows.is_empty() {
        return Err(Error::Argument("latent export has no rows".into()));
    }
    let pts = pca_2d(&rows.iter().map(|r| r.z.clone()).collect::<Vec<_>>())?;
    let mut classes: Vec<u8> = rows.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let err = plot_err(path);
    let (x0, x1) = range(pts.iter().map(|p| p.0));
    let (y0, y1) = range(pts.iter().map(|p| p.1));
    let root = SVGBackend::new(path, (700, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Appearance latents (PCA)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("PC 1")
        .y_desc("PC 2")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    let mut series = Vec::new();
    for (i, &class) in classes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let members: Vec<(f64, f64)> = rows
            .iter()
            .zip(&pts)
            .filter(|(r, _)| r.class == class)
            .map(|(_, &p)| p)
            .collect();
        let name = format!("class {class}");
        series.push((name.clone(), members.len()));
        chart
            .draw_series(members.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(e.to_string()))?
            .label(name)
            .legend(move |(x, y)| Circle::new((x + 8, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(PlotSummary {
        path: path.to_path_buf(),
        series,
    })
}
