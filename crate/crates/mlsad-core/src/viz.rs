//! Rasters and plots: image grids, score heatmaps, ROC curves, bar charts.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::ImageTensor;

fn to_u8(v: f64) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lossless PNG grid of a batch, `cols` images per row with a 2px gutter.
pub fn export_image_grid(images: &ImageTensor, cols: usize, path: &Path) -> Result<()> {
    let n = images.batch();
    if n == 0 || cols == 0 {
        return Err(Error::invalid("empty grid"));
    }
    let side = images.side();
    let ch = images.channels();
    let rows = n.div_ceil(cols);
    let pad = 2usize;
    let width = cols * side + (cols + 1) * pad;
    let height = rows * side + (rows + 1) * pad;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([32, 32, 32]));
    for k in 0..n {
        let (r, c) = (k / cols, k % cols);
        let y0 = pad + r * (side + pad);
        let x0 = pad + c * (side + pad);
        for i in 0..side {
            for j in 0..side {
                let px = if ch >= 3 {
                    Rgb([
                        to_u8(images.data()[(k, i, j, 0)]),
                        to_u8(images.data()[(k, i, j, 1)]),
                        to_u8(images.data()[(k, i, j, 2)]),
                    ])
                } else {
                    let g = to_u8(images.data()[(k, i, j, 0)]);
                    Rgb([g, g, g])
                };
                img.put_pixel((x0 + j) as u32, (y0 + i) as u32, px);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Grayscale heatmap of values in [0, 1].
pub fn heatmap_png(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty heatmap"));
    }
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((i, j), &v) in map.indexed_iter() {
        img.put_pixel(j as u32, i as u32, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
    }
    img.save(path)?;
    Ok(())
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn svg_header() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    )
}

/// ROC curve with the chance diagonal.
pub fn roc_curve_svg(points: &[(f64, f64)], title: &str, path: &Path) -> Result<()> {
    let px = |x: f64| MARGIN + x * (SVG_W - 2.0 * MARGIN);
    let py = |y: f64| SVG_H - MARGIN - y * (SVG_H - 2.0 * MARGIN);
    let mut svg = svg_header();
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        SVG_W / 2.0,
        title
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
        px(0.0), py(0.0), px(1.0), py(1.0)
    ));
    for (a, b) in [((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0))] {
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            px(a.0), py(a.1), px(b.0), py(b.1)
        ));
    }
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{},{}", px(*x), py(*y))).collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.5\"/>\n",
        pts.join(" ")
    ));
    svg.push_str("<text x=\"240\" y=\"350\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">false positive rate</text>\n");
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Vertical bar chart of labeled values in [0, 1].
pub fn bar_chart_svg(labels: &[String], values: &[f64], title: &str, path: &Path) -> Result<()> {
    if labels.len() != values.len() || labels.is_empty() {
        return Err(Error::invalid("bar chart needs matching non-empty labels/values"));
    }
    let n = labels.len() as f64;
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let bw = plot_w / (1.5 * n + 0.5);
    let mut svg = svg_header();
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        SVG_W / 2.0,
        title
    ));
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = MARGIN + bw * (0.5 + 1.5 * i as f64);
        let h = v.clamp(0.0, 1.0) * plot_h;
        let y = SVG_H - MARGIN - h;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{h:.1}\" fill=\"#2980b9\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            x + bw / 2.0,
            SVG_H - MARGIN + 14.0,
            label
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"9\">{:.3}</text>\n",
            x + bw / 2.0,
            y - 4.0,
            v
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN,
        SVG_H - MARGIN,
        SVG_W - MARGIN,
        SVG_H - MARGIN
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Two-row grid: initial batch on top, found batch below.
pub fn export_probe_grid(init: &ImageTensor, found: &ImageTensor, path: &Path) -> Result<()> {
    if init.batch() != found.batch() || init.side() != found.side() {
        return Err(Error::invalid("probe grids need matched batches"));
    }
    let n = init.batch();
    let side = init.side();
    let ch = init.channels();
    let mut stacked = ndarray::Array4::zeros((2 * n, side, side, ch));
    for k in 0..n {
        stacked
            .index_axis_mut(ndarray::Axis(0), k)
            .assign(&init.data().index_axis(ndarray::Axis(0), k));
        stacked
            .index_axis_mut(ndarray::Axis(0), n + k)
            .assign(&found.data().index_axis(ndarray::Axis(0), k));
    }
    export_image_grid(&ImageTensor::new_unchecked(stacked), n, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn grid_and_heatmap_write_files() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = ImageTensor::new(Array4::zeros((5, 8, 8, 3))).unwrap();
        let gpath = dir.path().join("grid.png");
        export_image_grid(&imgs, 3, &gpath).unwrap();
        assert!(gpath.is_file());
        let hpath = dir.path().join("heat.png");
        heatmap_png(&Array2::from_elem((4, 4), 0.5), &hpath).unwrap();
        assert!(hpath.is_file());
    }

    #[test]
    fn svg_plots_write_files() {
        let dir = tempfile::tempdir().unwrap();
        let rpath = dir.path().join("roc.svg");
        roc_curve_svg(&[(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)], "roc", &rpath).unwrap();
        assert!(std::fs::read_to_string(&rpath).unwrap().contains("polyline"));
        let bpath = dir.path().join("bars.svg");
        bar_chart_svg(&["a".into(), "b".into()], &[0.5, 0.9], "bars", &bpath).unwrap();
        assert!(std::fs::read_to_string(&bpath).unwrap().contains("rect"));
    }
}
