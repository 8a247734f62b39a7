//! Static PNG charts drawn straight onto a pixel buffer. There is no text
//! rendering: panel order and colours are fixed and documented on each
//! function instead.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const PANEL_W: u32 = 480;
const PANEL_H: u32 = 160;
const MARGIN: u32 = 12;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([120, 120, 120]);
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

struct Panel {
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
}

impl Panel {
    fn frame(&self, img: &mut RgbImage) {
        for k in 1..4 {
            let y = self.y0 + self.h * k / 4;
            line(img, (self.x0 as f64, y as f64), ((self.x0 + self.w) as f64, y as f64), GRID);
        }
        let (x1, y1) = ((self.x0 + self.w) as f64, (self.y0 + self.h) as f64);
        let (x0, y0) = (self.x0 as f64, self.y0 as f64);
        line(img, (x0, y1), (x1, y1), AXIS);
        line(img, (x0, y0), (x0, y1), AXIS);
    }

    /// Draws `(x, y)` points mapped from `[xmin, xmax] x [ymin, ymax]`.
    fn series(&self, img: &mut RgbImage, pts: &[(f64, f64)], xr: (f64, f64), yr: (f64, f64), color: Rgb<u8>) {
        let sx = |x: f64| self.x0 as f64 + (x - xr.0) / (xr.1 - xr.0).max(f64::MIN_POSITIVE) * self.w as f64;
        let sy = |y: f64| (self.y0 + self.h) as f64 - (y - yr.0) / (yr.1 - yr.0).max(f64::MIN_POSITIVE) * self.h as f64;
        for w in pts.windows(2) {
            line(img, (sx(w[0].0), sy(w[0].1)), (sx(w[1].0), sy(w[1].1)), color);
        }
        if let [p] = pts {
            line(img, (sx(p.0) - 2.0, sy(p.1)), (sx(p.0) + 2.0, sy(p.1)), color);
        }
    }
}

/// Two-pixel-wide segment by uniform sampling along the longer axis.
fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
            let (px, py) = (x + dx, y + dy);
            if px >= 0.0 && py >= 0.0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::ingestion(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::ingestion(path, e.to_string()))?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::ingestion(path, format!("missing column `{name}`")))
}

fn number(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<f64> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::ingestion(path, format!("bad number in row {rec:?}")))
}

/// Per-epoch mean loss curves from `metrics.csv`: one panel per term, top
/// to bottom `l_id`, `l_hctri`, `l_pose`, `l_kd`, `total`, each scaled to its
/// own range. Iteration-level values are drawn in grey behind the means.
pub fn plot_loss_curves(metrics_csv: &Path, out: &Path) -> Result<()> {
    const TERMS: [&str; 5] = ["l_id", "l_hctri", "l_pose", "l_kd", "total"];
    let (header, rows) = read_rows(metrics_csv)?;
    if rows.is_empty() {
        return Err(Error::ingestion(metrics_csv, "no metrics rows"));
    }
    let epoch_col = column(&header, "epoch", metrics_csv)?;
    let mut img = RgbImage::from_pixel(PANEL_W + 2 * MARGIN, TERMS.len() as u32 * (PANEL_H + MARGIN) + MARGIN, BACKGROUND);
    for (t, term) in TERMS.iter().enumerate() {
        let col = column(&header, term, metrics_csv)?;
        let mut raw = Vec::with_capacity(rows.len());
        let mut per_epoch: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for (i, rec) in rows.iter().enumerate() {
            let v = number(rec, col, metrics_csv)?;
            let e = number(rec, epoch_col, metrics_csv)? as u64;
            raw.push((i as f64, v));
            let slot = per_epoch.entry(e).or_insert((0.0, 0));
            slot.0 += v;
            slot.1 += 1;
        }
        let n_per_epoch = rows.len() as f64 / per_epoch.len() as f64;
        let means: Vec<(f64, f64)> = per_epoch
            .values()
            .enumerate()
            .map(|(i, &(s, n))| ((i as f64 + 0.5) * n_per_epoch, s / n as f64))
            .collect();
        let panel = Panel {
            x0: MARGIN,
            y0: MARGIN + t as u32 * (PANEL_H + MARGIN),
            w: PANEL_W,
            h: PANEL_H,
        };
        panel.frame(&mut img);
        let xr = (0.0, rows.len() as f64);
        let yr = range(raw.iter().map(|p| p.1));
        panel.series(&mut img, &raw, xr, yr, Rgb([190, 190, 190]));
        panel.series(&mut img, &means, xr, yr, PALETTE[t % PALETTE.len()]);
    }
    img.save(out)?;
    Ok(())
}

/// CMC curves from a `cmc.csv` (`protocol,feature_set,rank,rate`), one
/// colour per `(protocol, feature set)` in order of first appearance, on a
/// shared `[0, 1]` rate axis.
pub fn plot_cmc(cmc_csv: &Path, out: &Path) -> Result<()> {
    let (header, rows) = read_rows(cmc_csv)?;
    let (pc, fc) = (column(&header, "protocol", cmc_csv)?, column(&header, "feature_set", cmc_csv)?);
    let (rc, vc) = (column(&header, "rank", cmc_csv)?, column(&header, "rate", cmc_csv)?);
    let mut order: Vec<String> = Vec::new();
    let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in &rows {
        let key = format!("{}/{}", rec.get(pc).unwrap_or(""), rec.get(fc).unwrap_or(""));
        if !curves.contains_key(&key) {
            order.push(key.clone());
        }
        curves
            .entry(key)
            .or_default()
            .push((number(rec, rc, cmc_csv)?, number(rec, vc, cmc_csv)?));
    }
    if order.is_empty() {
        return Err(Error::ingestion(cmc_csv, "no CMC rows"));
    }
    let max_rank = curves.values().flatten().map(|p| p.0).fold(1.0, f64::max);
    let mut img = RgbImage::from_pixel(PANEL_W + 2 * MARGIN, 2 * PANEL_H + 2 * MARGIN, BACKGROUND);
    let panel = Panel {
        x0: MARGIN,
        y0: MARGIN,
        w: PANEL_W,
        h: 2 * PANEL_H,
    };
    panel.frame(&mut img);
    for (i, key) in order.iter().enumerate() {
        panel.series(&mut img, &curves[key], (1.0, max_rank), (0.0, 1.0), PALETTE[i % PALETTE.len()]);
    }
    img.save(out)?;
    Ok(())
}
