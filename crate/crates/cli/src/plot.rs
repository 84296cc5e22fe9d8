//! Line and bar figures via plotters. Text needs a system TrueType font; without one,
//! figures are drawn without labels.

use std::path::Path;
use std::sync::OnceLock;

use plotters::coord::Shift;
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::commands::CliResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Png,
    Svg,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Png => "png",
            Format::Svg => "svg",
        }
    }
}

pub struct Series {
    pub label: String,
    pub values: Vec<f32>,
}

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

fn fonts_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        for path in FONT_PATHS {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no TrueType font found; plots will have no text");
        false
    })
}

fn color(i: usize) -> RGBColor {
    let (r, g, b) = Palette99::pick(i).to_rgba().rgb();
    RGBColor(r, g, b)
}

fn plotting<E: std::fmt::Debug>(e: E) -> Box<dyn std::error::Error> {
    format!("plotting failed: {e:?}").into()
}

fn draw_lines<DB: DrawingBackend>(area: &DrawingArea<DB, Shift>, title: &str, series: &[Series]) -> CliResult<()>
where
    DB::ErrorType: 'static,
{
    let text = fonts_ready();
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(1).max(2);
    let (mut lo, mut hi) = series
        .iter()
        .flat_map(|s| s.values.iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let mut builder = ChartBuilder::on(area);
    builder.margin(10);
    if text {
        builder.caption(title, ("sans-serif", 18)).x_label_area_size(30).y_label_area_size(50);
    }
    let mut chart = builder
        .build_cartesian_2d(0f32..(n - 1) as f32, (lo - pad)..(hi + pad))
        .map_err(plotting)?;
    if text {
        chart.configure_mesh().x_desc("channel").draw().map_err(plotting)?;
    }
    for (i, s) in series.iter().enumerate() {
        let c = color(i);
        let line = chart
            .draw_series(LineSeries::new(s.values.iter().enumerate().map(|(x, &y)| (x as f32, y)), c.stroke_width(2)))
            .map_err(plotting)?;
        if text {
            line.label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c.stroke_width(2)));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plotting)?;
    }
    Ok(())
}

fn stats_on<DB: DrawingBackend>(root: DrawingArea<DB, Shift>, site: &str, means: &[Series], vars: &[Series]) -> CliResult<()>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(plotting)?;
    let panels = root.split_evenly((2, 1));
    draw_lines(&panels[0], &format!("{site}: running mean"), means)?;
    draw_lines(&panels[1], &format!("{site}: running variance"), vars)?;
    root.present().map_err(plotting)?;
    Ok(())
}

/// Two stacked panels: per-domain running means and variances across channels.
pub fn stats_figure(path: &Path, format: Format, site: &str, means: &[Series], vars: &[Series]) -> CliResult<()> {
    let size = (800, 700);
    match format {
        Format::Png => stats_on(BitMapBackend::new(path, size).into_drawing_area(), site, means, vars),
        Format::Svg => stats_on(SVGBackend::new(path, size).into_drawing_area(), site, means, vars),
    }
}

fn bars_on<DB: DrawingBackend>(root: DrawingArea<DB, Shift>, labels: &[String], a: &[f64], b: &[f64]) -> CliResult<()>
where
    DB::ErrorType: 'static,
{
    let text = fonts_ready();
    root.fill(&WHITE).map_err(plotting)?;
    let n = labels.len().max(1);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if text {
        builder
            .caption("pseudo-label Dice", ("sans-serif", 20))
            .x_label_area_size(30)
            .y_label_area_size(45);
    }
    let mut chart = builder.build_cartesian_2d(0f64..n as f64, 0f64..1.0).map_err(plotting)?;
    if text {
        let names = labels.to_vec();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n * 2 + 1)
            .x_label_formatter(&move |x| {
                let i = x.floor() as usize;
                if (x - x.floor() - 0.5).abs() < 1e-6 && i < names.len() {
                    names[i].clone()
                } else {
                    String::new()
                }
            })
            .draw()
            .map_err(plotting)?;
    }
    let groups = [("individual", a, color(0)), ("mixed", b, color(1))];
    for (j, (name, values, c)) in groups.into_iter().enumerate() {
        let rects = values.iter().enumerate().map(move |(i, &v)| {
            let x0 = i as f64 + 0.1 + 0.4 * j as f64;
            Rectangle::new([(x0, 0.0), (x0 + 0.38, v.clamp(0.0, 1.0))], c.filled())
        });
        let drawn = chart.draw_series(rects).map_err(plotting)?;
        if text {
            drawn
                .label(name)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], c.filled()));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plotting)?;
    }
    root.present().map_err(plotting)?;
    Ok(())
}

/// Per-domain bars for individual and mixed normalization.
pub fn paired_bars(path: &Path, format: Format, labels: &[String], individual: &[f64], mixed: &[f64]) -> CliResult<()> {
    let size = (700, 450);
    match format {
        Format::Png => bars_on(BitMapBackend::new(path, size).into_drawing_area(), labels, individual, mixed),
        Format::Svg => bars_on(SVGBackend::new(path, size).into_drawing_area(), labels, individual, mixed),
    }
}
