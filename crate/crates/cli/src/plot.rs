//! 2-D projection of exported embeddings and a static SVG scatter plot.
//!
//! The projection is PCA onto the two leading principal axes. It is linear
//! and deterministic, so identical embeddings land on identical points.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use plotters::prelude::*;

use clonealign::retrieval::{read_embeddings, EmbeddingRow};

use crate::{ColorBy, PlotArgs};

/// Rows projected onto the first two principal components.
pub fn project(rows: &[EmbeddingRow]) -> Result<Vec<(f64, f64)>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.embedding.dim());
    if n == 0 || d == 0 {
        anyhow::bail!(clonealign::Error::EmptyInput);
    }
    if rows.iter().any(|r| r.embedding.dim() != d) {
        anyhow::bail!(clonealign::Error::Validation("embeddings of mixed dimension".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].embedding.values()[j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        let Some(&col) = order.get(k) else {
            return nalgebra::DVector::zeros(d);
        };
        let mut v = eig.eigenvectors.column(col).into_owned();
        // fix the sign so the largest component is positive
        let lead = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        v
    };
    let (a, b) = (axis(0), axis(1));
    let pa = &centered * a;
    let pb = &centered * b;
    Ok((0..n).map(|i| (pa[i], pb[i])).collect())
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

pub fn draw(rows: &[EmbeddingRow], points: &[(f64, f64)], color_by: ColorBy, out: &Path) -> Result<()> {
    let languages: Vec<&str> = rows
        .iter()
        .map(|r| r.language.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let problems: BTreeMap<&str, usize> = rows
        .iter()
        .map(|r| r.problem_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p, i))
        .collect();
    let lang_index = |l: &str| languages.iter().position(|x| *x == l).unwrap_or(0);
    let color = |r: &EmbeddingRow| match color_by {
        ColorBy::Language => Palette99::pick(lang_index(&r.language)).to_rgba(),
        ColorBy::Problem => Palette99::pick(problems[r.problem_id.as_str()]).to_rgba(),
    };

    let root = SVGBackend::new(out, (900, 700)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("drawing {}: {e}", out.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let (x0, x1) = span(points.iter().map(|p| p.0));
    let (y0, y1) = span(points.iter().map(|p| p.1));
    let caption = match color_by {
        ColorBy::Language => "Program embeddings (PCA), colored by language",
        ColorBy::Problem => "Program embeddings (PCA), colored by problem",
    };
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("PC 1")
        .y_desc("PC 2")
        .draw()
        .map_err(|e| err(&e))?;

    // marker shape always encodes the language so the legend can name it
    for (li, lang) in languages.iter().enumerate() {
        let members: Vec<(usize, &EmbeddingRow)> = rows.iter().enumerate().filter(|(_, r)| r.language == *lang).collect();
        let legend_color = match color_by {
            ColorBy::Language => Palette99::pick(li).to_rgba(),
            ColorBy::Problem => BLACK.to_rgba(),
        };
        let anno = match li % 3 {
            0 => chart.draw_series(members.iter().map(|&(i, r)| Circle::new(points[i], 4, color(r).filled()))),
            1 => chart.draw_series(members.iter().map(|&(i, r)| TriangleMarker::new(points[i], 5, color(r).filled()))),
            _ => chart.draw_series(members.iter().map(|&(i, r)| Cross::new(points[i], 4, color(r).stroke_width(2)))),
        }
        .map_err(|e| err(&e))?;
        anno.label(*lang).legend(move |(x, y)| match li % 3 {
            0 => Circle::new((x + 10, y), 4, legend_color.filled()).into_dyn(),
            1 => TriangleMarker::new((x + 10, y), 5, legend_color.filled()).into_dyn(),
            _ => Cross::new((x + 10, y), 4, legend_color.stroke_width(2)).into_dyn(),
        });
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

pub fn run(a: &PlotArgs) -> Result<()> {
    let rows = read_embeddings(&a.embeddings)?;
    let points = project(&rows)?;
    draw(&rows, &points, a.color_by, &a.out)?;
    if let Some(path) = &a.coords_out {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        for (r, (x, y)) in rows.iter().zip(&points) {
            writeln!(f, "{}\t{}\t{}\t{x:.16e}\t{y:.16e}", r.id, r.language, r.problem_id)?;
        }
        f.flush()?;
    }
    println!("plotted {} points to {}", rows.len(), a.out.display());
    Ok(())
}
