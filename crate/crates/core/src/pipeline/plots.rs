//! Plot data as CSV plus small static line charts.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::LengthMismatch(r.len(), header.len()));
        }
        w.write_record(r.iter().map(|s| s.as_ref())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("csv: {other:?}")),
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];
const MARGIN: u32 = 12;

/// Renders each series as a polyline on a shared, auto-scaled axis box.
/// Series are colored in order from a fixed palette. No text is drawn;
/// the matching CSV carries the labels.
pub fn line_chart_png(path: &Path, series: &[Vec<(f64, f64)>], width: u32, height: u32) -> Result<()> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::InvalidConfig(format!("chart size {width}x{height}")));
    }
    let pts: Vec<(f64, f64)> = series.iter().flatten().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if pts.is_empty() {
        return Err(Error::Empty("chart data"));
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let (pw, ph) = (f64::from(width - 2 * MARGIN), f64::from(height - 2 * MARGIN));
    let to_px = |(x, y): (f64, f64)| {
        let px = f64::from(MARGIN) + (x - x0) / (x1 - x0) * pw;
        let py = f64::from(MARGIN) + (1.0 - (y - y0) / (y1 - y0)) * ph;
        (px.round() as i64, py.round() as i64)
    };
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, bottom) = (i64::from(MARGIN), i64::from(height - MARGIN));
    draw_line(&mut img, (left, i64::from(MARGIN)), (left, bottom), axis);
    draw_line(&mut img, (left, bottom), (i64::from(width - MARGIN), bottom), axis);
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let finite: Vec<_> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        for w in finite.windows(2) {
            draw_line(&mut img, to_px(w[0]), to_px(w[1]), color);
        }
        if let [only] = finite.as_slice() {
            draw_line(&mut img, to_px(*only), to_px(*only), color);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Bresenham, clipped to the image.
fn draw_line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_csv(&p, &["x", "y"], &[vec!["1", "2"]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "x,y\n1,2\n");
        assert!(write_csv(&p, &["x", "y"], &[vec!["1"]]).is_err());
    }

    #[test]
    fn chart_draws_series_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        line_chart_png(&p, &[vec![(0.0, 0.0), (1.0, 1.0)], vec![(0.0, 1.0)]], 64, 48).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (64, 48));
        // (0, 0) maps to the bottom-left corner of the plot box.
        assert_eq!(img.get_pixel(12, 36), &Rgb(PALETTE[0]));
        assert_eq!(img.get_pixel(52, 12), &Rgb(PALETTE[0]));
        assert_eq!(img.get_pixel(12, 12), &Rgb(PALETTE[1]));
        assert!(line_chart_png(&p, &[vec![]], 64, 48).is_err());
    }
}
