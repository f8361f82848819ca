//! Overlap and boundary-distance metrics between binary masks, and the
//! aggregate report table.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mask::{Mask, MaskError};

pub fn dice(a: &Mask, b: &Mask) -> Result<f64, MaskError> {
    a.check_same_shape(b)?;
    let (inter, sa, sb) = overlap(a, b);
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64, MaskError> {
    a.check_same_shape(b)?;
    let (inter, sa, sb) = overlap(a, b);
    let union = sa + sb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
    }
    (inter, a.count(), b.count())
}

/// Foreground pixels with at least one 4-neighbour in the background; pixels
/// beyond the image border count as background. Raster order.
pub fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dr, dc)| !mask.get_signed(ri + dr, ci + dc));
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Distances from each point of `from` to the nearest point of `to`, in the
/// order of `from`. `to` must be nonempty and sorted by row.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    let rows: Vec<usize> = to.iter().map(|p| p.0).collect();
    from.iter()
        .map(|&(r, c)| {
            let start = rows.partition_point(|&x| x < r);
            let mut best = u64::MAX;
            let sq = |p: &(usize, usize)| {
                let dr = p.0 as i64 - r as i64;
                let dc = p.1 as i64 - c as i64;
                (dr * dr + dc * dc) as u64
            };
            // scan outward from the query row and stop once the row gap alone
            // exceeds the best distance found
            for p in &to[start..] {
                let dr = (p.0 - r) as u64;
                if dr * dr > best {
                    break;
                }
                best = best.min(sq(p));
            }
            for p in to[..start].iter().rev() {
                let dr = (r - p.0) as u64;
                if dr * dr > best {
                    break;
                }
                best = best.min(sq(p));
            }
            (best as f64).sqrt()
        })
        .collect()
}

/// Average symmetric surface distance and nearest-rank 95th percentile of the
/// pooled directed distances, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub asd: f64,
    pub hd95: f64,
}

impl SurfaceDistances {
    /// Reported when either mask is empty.
    pub const UNDEFINED: SurfaceDistances = SurfaceDistances {
        asd: f64::NAN,
        hd95: f64::NAN,
    };

    pub fn is_defined(&self) -> bool {
        self.asd.is_finite() && self.hd95.is_finite()
    }
}

pub fn surface_distances(a: &Mask, b: &Mask) -> Result<SurfaceDistances, MaskError> {
    a.check_same_shape(b)?;
    let ba = boundary(a);
    let bb = boundary(b);
    if ba.is_empty() || bb.is_empty() {
        log::warn!("surface distance undefined for an empty mask");
        return Ok(SurfaceDistances::UNDEFINED);
    }
    let mut pooled = directed(&ba, &bb);
    pooled.extend(directed(&bb, &ba));
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok(SurfaceDistances {
        asd,
        hd95: nearest_rank(&mut pooled, 0.95),
    })
}

/// The `ceil(q·n)`-th smallest value (1-based).
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|x, y| x.total_cmp(y));
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub jaccard: f64,
    /// NaN when a mask is empty.
    pub asd: f64,
    /// NaN when a mask is empty.
    pub hd95: f64,
}

impl MetricReport {
    pub fn compute(pred: &Mask, reference: &Mask) -> Result<Self, MaskError> {
        let sd = surface_distances(pred, reference)?;
        Ok(Self {
            dice: dice(pred, reference)?,
            jaccard: jaccard(pred, reference)?,
            asd: sd.asd,
            hd95: sd.hd95,
        })
    }

    pub const NAMES: [&'static str; 4] = ["dice", "jaccard", "asd", "hd95"];

    pub fn values(&self) -> [f64; 4] {
        [self.dice, self.jaccard, self.asd, self.hd95]
    }
}

/// Mean and population standard deviation of the finite entries; `n` counts them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Summary {
        mean,
        std: var.sqrt(),
        n,
    }
}

/// Averages reports metric by metric, skipping undefined distances.
pub fn aggregate(reports: &[MetricReport]) -> [Summary; 4] {
    std::array::from_fn(|k| {
        let column: Vec<f64> = reports.iter().map(|r| r.values()[k]).collect();
        summarize(&column)
    })
}

/// One row of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub metric: String,
    /// Mean over test samples, averaged over runs.
    pub mean: f64,
    /// Standard deviation over test samples, averaged over runs.
    pub std: f64,
    /// Standard deviation of the per-run means.
    pub seed_std: f64,
    pub runs: usize,
}

/// Builds the aggregate table from per-run test-set reports grouped by method.
pub fn aggregate_runs(runs: &[(String, Vec<MetricReport>)]) -> Vec<AggregateRow> {
    let mut methods: Vec<&str> = Vec::new();
    for (m, _) in runs {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
    }
    let mut rows = Vec::new();
    for method in methods {
        let per_run: Vec<[Summary; 4]> = runs
            .iter()
            .filter(|(m, _)| m == method)
            .map(|(_, reports)| aggregate(reports))
            .collect();
        for (k, name) in MetricReport::NAMES.iter().enumerate() {
            let means: Vec<f64> = per_run.iter().map(|s| s[k].mean).collect();
            let stds: Vec<f64> = per_run.iter().map(|s| s[k].std).collect();
            let over_seeds = summarize(&means);
            rows.push(AggregateRow {
                method: method.to_string(),
                metric: name.to_string(),
                mean: over_seeds.mean,
                std: summarize(&stds).mean,
                seed_std: over_seeds.std,
                runs: per_run.len(),
            });
        }
    }
    rows
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
