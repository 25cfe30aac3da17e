//! Segmentation metrics: Dice, HD95 and cross-site spread.

use std::fmt::Write as _;

use thiserror::Error;

use crate::grid::Mask;
use crate::sim::data::{CUP, DISC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("mask shapes differ")]
    ShapeMismatch,
    #[error("need at least two sites, got {0}")]
    TooFewSites(usize),
}

/// Binary mask view: a flat boolean grid.
#[derive(Debug, Clone, Copy)]
pub struct BinaryMask<'a> {
    pub height: usize,
    pub width: usize,
    pub pixels: &'a [bool],
}

impl<'a> BinaryMask<'a> {
    pub fn new(height: usize, width: usize, pixels: &'a [bool]) -> Self {
        assert_eq!(pixels.len(), height * width);
        Self { height, width, pixels }
    }

    fn check_shape(&self, other: &BinaryMask<'_>) -> Result<(), MetricError> {
        if self.height != other.height || self.width != other.width {
            return Err(MetricError::ShapeMismatch);
        }
        Ok(())
    }
}

/// `2|P∩T| / (|P|+|T|)`; 1 when both masks are empty.
pub fn dice(pred: BinaryMask<'_>, truth: BinaryMask<'_>) -> Result<f64, MetricError> {
    pred.check_shape(&truth)?;
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.pixels.iter().zip(truth.pixels) {
        np += p as usize;
        nt += t as usize;
        inter += (p && t) as usize;
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// Mask pixels with at least one 4-neighbour that is background. Pixels
/// outside the grid count as background.
pub fn boundary(mask: BinaryMask<'_>) -> Vec<bool> {
    let (h, w) = (mask.height, mask.width);
    let at = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.pixels[r as usize * w + c as usize]
    };
    let mut out = vec![false; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            if !at(r, c) {
                continue;
            }
            let edge = !at(r - 1, c) || !at(r + 1, c) || !at(r, c - 1) || !at(r, c + 1);
            out[r as usize * w + c as usize] = edge;
        }
    }
    out
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// of `features` (Felzenszwalb and Huttenlocher lower-envelope transform,
/// rows then columns). `INFINITY` everywhere when there is no feature.
pub fn squared_distance_transform(height: usize, width: usize, features: &[bool]) -> Vec<f64> {
    let mut grid: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for c in 0..width {
        line.clear();
        line.extend((0..height).map(|r| grid[r * width + c]));
        lower_envelope(&line, &mut out);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        line.clear();
        line.extend_from_slice(&grid[r * width..(r + 1) * width]);
        lower_envelope(&line, &mut out);
        grid[r * width..(r + 1) * width].copy_from_slice(&out);
    }
    grid
}

/// 1-D transform `out[q] = min_p (q - p)^2 + f[p]` over finite `f[p]`.
fn lower_envelope(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let intersect = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            continue;
        }
        let mut s = intersect(*v.last().unwrap(), q);
        while s <= *z.last().unwrap() {
            v.pop();
            z.pop();
            if v.is_empty() {
                break;
            }
            s = intersect(*v.last().unwrap(), q);
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            v.push(q);
            z.push(s);
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *slot = d * d + f[v[k]];
    }
}

/// Linear-interpolation percentile over sorted data, `pct` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// 95th percentile of the symmetric boundary-to-boundary nearest distances.
/// 0 when both masks are empty, `INFINITY` when exactly one is.
pub fn hd95(pred: BinaryMask<'_>, truth: BinaryMask<'_>) -> Result<f64, MetricError> {
    pred.check_shape(&truth)?;
    let p_empty = !pred.pixels.iter().any(|&x| x);
    let t_empty = !truth.pixels.iter().any(|&x| x);
    match (p_empty, t_empty) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let (h, w) = (pred.height, pred.width);
    let bp = boundary(pred);
    let bt = boundary(truth);
    let dt_to_t = squared_distance_transform(h, w, &bt);
    let dt_to_p = squared_distance_transform(h, w, &bp);
    let mut dists: Vec<f64> = bp
        .iter()
        .zip(&dt_to_t)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .chain(bt.iter().zip(&dt_to_p).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()))
        .collect();
    dists.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&dists, 95.0))
}

/// Population standard deviation across sites.
pub fn site_std(values: &[f64]) -> Result<f64, MetricError> {
    if values.len() < 2 {
        return Err(MetricError::TooFewSites(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}

/// Foreground classes evaluated one-vs-rest, with report names.
pub const EVAL_CLASSES: [(u8, &str); 2] = [(DISC, "disc"), (CUP, "cup")];

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub class: u8,
    pub name: &'static str,
    pub dice: f64,
    /// Mean over images with a finite HD95; `INFINITY` when none is finite.
    pub hd95: f64,
    /// Images whose HD95 was infinite (exactly one mask empty).
    pub hd95_infinite: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteResult {
    pub site_id: String,
    pub classes: Vec<ClassScore>,
}

impl SiteResult {
    /// Macro average of per-class Dice.
    pub fn mean_dice(&self) -> f64 {
        self.classes.iter().map(|c| c.dice).sum::<f64>() / self.classes.len() as f64
    }

    /// Macro average of per-class HD95.
    pub fn mean_hd95(&self) -> f64 {
        self.classes.iter().map(|c| c.hd95).sum::<f64>() / self.classes.len() as f64
    }

    pub fn class(&self, name: &str) -> Option<&ClassScore> {
        self.classes.iter().find(|c| c.name == name)
    }
}

/// Per-class metrics averaged over the images of one site.
pub fn evaluate_site(site_id: &str, preds: &[Mask], truths: &[Mask]) -> Result<SiteResult, MetricError> {
    if preds.len() != truths.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let mut classes = Vec::new();
    for (class, name) in EVAL_CLASSES {
        let mut dice_sum = 0.0;
        let mut hd_sum = 0.0;
        let mut hd_finite = 0usize;
        for (p, t) in preds.iter().zip(truths) {
            if (p.height(), p.width()) != (t.height(), t.width()) {
                return Err(MetricError::ShapeMismatch);
            }
            let pb = p.binary(class);
            let tb = t.binary(class);
            let pm = BinaryMask::new(p.height(), p.width(), &pb);
            let tm = BinaryMask::new(t.height(), t.width(), &tb);
            dice_sum += dice(pm, tm)?;
            let hd = hd95(pm, tm)?;
            if hd.is_finite() {
                hd_sum += hd;
                hd_finite += 1;
            }
        }
        let n = preds.len().max(1) as f64;
        classes.push(ClassScore {
            class,
            name,
            dice: dice_sum / n,
            hd95: if hd_finite > 0 { hd_sum / hd_finite as f64 } else { f64::INFINITY },
            hd95_infinite: preds.len() - hd_finite,
        });
    }
    Ok(SiteResult {
        site_id: site_id.to_string(),
        classes,
    })
}

/// One line per site x class x metric.
pub fn format_records(prefix: &str, result: &SiteResult) -> String {
    let mut out = String::new();
    for c in &result.classes {
        let _ = writeln!(
            out,
            "{prefix}site={} class={} metric=dice value={:.6}",
            result.site_id, c.name, c.dice
        );
        let _ = writeln!(
            out,
            "{prefix}site={} class={} metric=hd95 value={:.6} infinite={}",
            result.site_id, c.name, c.hd95, c.hd95_infinite
        );
    }
    out
}
