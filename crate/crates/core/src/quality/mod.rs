// SPDX-License-Identifier: Apache-2.0

//! Objective quality: point-to-point (D1) and point-to-plane (D2) geometry
//! PSNR, colour PSNR, bits per point and Bjontegaard deltas.
//!
//! Both geometry metrics take the worse of the two directional MSEs and use
//! the peak `3·(2^p − 1)²`. Nearest neighbours are exact, ties going to the
//! lower point index. A lossless comparison reports `f64::INFINITY`.

mod bd;

pub use bd::{bd_metrics, polyfit, BdMetrics, RdPoint};

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::spatial::GridIndex;
use crate::{Error, PointCloud, Result};

/// Neighbourhood size of the reference normal estimate.
pub const NORMAL_NEIGHBOURS: usize = 12;

pub fn psnr_from_mse(mse: f64, peak_sq: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak_sq / mse).log10()
    }
}

pub fn geometry_peak_sq(precision: u8) -> f64 {
    let p = ((1u64 << precision) - 1) as f64;
    3.0 * p * p
}

fn require_points(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidCloud("quality metrics need non-empty clouds".into()));
    }
    Ok(())
}

/// For each point of `from`, the index of its nearest point in `to`.
pub fn nearest_indices(from: &[[i64; 3]], to: &GridIndex) -> Vec<usize> {
    from.par_iter().map(|&p| to.nearest(p).expect("non-empty").1).collect()
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

fn disp(a: [i64; 3], b: [i64; 3]) -> [f64; 3] {
    [(a[0] - b[0]) as f64, (a[1] - b[1]) as f64, (a[2] - b[2]) as f64]
}

/// Symmetric point-to-point MSE.
pub fn mse_d1(reference: &PointCloud, test: &PointCloud) -> Result<f64> {
    require_points(reference, test)?;
    let (r, t) = (reference.coords_i64(), test.coords_i64());
    let (ri, ti) = (GridIndex::new(&r), GridIndex::new(&t));
    let one = |from: &[[i64; 3]], idx: &GridIndex| {
        mean(
            from.par_iter()
                .map(|&p| idx.nearest(p).expect("non-empty").0 as f64)
                .collect::<Vec<_>>()
                .into_iter(),
            from.len(),
        )
    };
    Ok(one(&r, &ti).max(one(&t, &ri)))
}

pub fn psnr_d1(reference: &PointCloud, test: &PointCloud, precision: u8) -> Result<f64> {
    Ok(psnr_from_mse(mse_d1(reference, test)?, geometry_peak_sq(precision)))
}

/// Unit normal of the least-variance direction of `pts`, or `None` when
/// the neighbourhood does not span a plane.
pub fn pca_normal(pts: &[[i64; 3]]) -> Option<[f64; 3]> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for a in 0..3 {
            c[a] += p[a] as f64 / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in pts {
        let d = [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += d[i] * d[j] / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lmin, lmid) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let lmax = eig.eigenvalues[order[2]];
    if lmax <= 0.0 || lmid <= 1e-9 * lmax || lmid <= lmin {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]);
    Some([v[0], v[1], v[2]])
}

/// Normals of every reference point from its [`NORMAL_NEIGHBOURS`]
/// nearest reference points (itself included).
pub fn reference_normals(points: &[[i64; 3]], index: &GridIndex) -> Vec<Option<[f64; 3]>> {
    points
        .par_iter()
        .map(|&p| {
            let nb: Vec<[i64; 3]> = index
                .knn(p, NORMAL_NEIGHBOURS, None)
                .into_iter()
                .map(|(_, i)| index.point(i))
                .collect();
            pca_normal(&nb)
        })
        .collect()
}

/// Squared point-to-plane error of displacement `d` against normal `n`,
/// falling back to the full squared distance without a normal.
pub fn plane_error(d: [f64; 3], n: Option<[f64; 3]>) -> f64 {
    match n {
        Some(n) => {
            let dot = d[0] * n[0] + d[1] * n[1] + d[2] * n[2];
            dot * dot
        }
        None => d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
    }
}

/// Symmetric point-to-plane MSE; both directions project onto the
/// reference normal of the reference point in the matched pair.
pub fn mse_d2(reference: &PointCloud, test: &PointCloud) -> Result<f64> {
    require_points(reference, test)?;
    let (r, t) = (reference.coords_i64(), test.coords_i64());
    let (ri, ti) = (GridIndex::new(&r), GridIndex::new(&t));
    let normals = reference_normals(&r, &ri);
    let fwd: Vec<f64> = nearest_indices(&r, &ti)
        .into_iter()
        .enumerate()
        .map(|(i, j)| plane_error(disp(t[j], r[i]), normals[i]))
        .collect();
    let bwd: Vec<f64> = nearest_indices(&t, &ri)
        .into_iter()
        .enumerate()
        .map(|(i, j)| plane_error(disp(t[i], r[j]), normals[j]))
        .collect();
    Ok(mean(fwd.into_iter(), r.len()).max(mean(bwd.into_iter(), t.len())))
}

pub fn psnr_d2(reference: &PointCloud, test: &PointCloud, precision: u8) -> Result<f64> {
    Ok(psnr_from_mse(mse_d2(reference, test)?, geometry_peak_sq(precision)))
}

/// BT.709 full-range RGB → YUV with chroma centred on 128.
pub fn rgb_to_yuv(c: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = c.map(|v| v as f64);
    let y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    [y, (b - y) / 1.8556 + 128.0, (r - y) / 1.5748 + 128.0]
}

/// Colour PSNRs (peak 255) for each channel and the combined figures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorPsnr {
    pub y: f64,
    pub u: f64,
    pub v: f64,
    /// `(6·Y + U + V) / 8` weighting of the channel MSEs.
    pub yuv: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    /// Mean of the three RGB channel MSEs.
    pub rgb: f64,
}

/// Per-channel colour MSEs `[Y, U, V, R, G, B]`, each the worse of the two
/// directions.
pub fn color_mse(reference: &PointCloud, test: &PointCloud) -> Result<[f64; 6]> {
    require_points(reference, test)?;
    let (rc, tc) = match (reference.colors(), test.colors()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidCloud("colour metrics need coloured clouds".into())),
    };
    let (r, t) = (reference.coords_i64(), test.coords_i64());
    let (ri, ti) = (GridIndex::new(&r), GridIndex::new(&t));
    let dir = |from: &[[u8; 3]], matches: Vec<usize>, to: &[[u8; 3]]| {
        let mut acc = [0.0; 6];
        for (i, j) in matches.into_iter().enumerate() {
            let (a, b) = (from[i], to[j]);
            let (ya, yb) = (rgb_to_yuv(a), rgb_to_yuv(b));
            for ch in 0..3 {
                acc[ch] += (ya[ch] - yb[ch]).powi(2);
                acc[3 + ch] += (a[ch] as f64 - b[ch] as f64).powi(2);
            }
        }
        acc.map(|v| v / from.len() as f64)
    };
    let fwd = dir(rc, nearest_indices(&r, &ti), tc);
    let bwd = dir(tc, nearest_indices(&t, &ri), rc);
    Ok(std::array::from_fn(|i| fwd[i].max(bwd[i])))
}

pub fn psnr_color(reference: &PointCloud, test: &PointCloud) -> Result<ColorPsnr> {
    let m = color_mse(reference, test)?;
    let p = |mse: f64| psnr_from_mse(mse, 255.0 * 255.0);
    Ok(ColorPsnr {
        y: p(m[0]),
        u: p(m[1]),
        v: p(m[2]),
        yuv: p((6.0 * m[0] + m[1] + m[2]) / 8.0),
        r: p(m[3]),
        g: p(m[4]),
        b: p(m[5]),
        rgb: p((m[3] + m[4] + m[5]) / 3.0),
    })
}

/// Bits per input point.
pub fn bpp(bytes: usize, n_input_points: usize) -> Result<f64> {
    if n_input_points == 0 {
        return Err(Error::arg("bits per point of an empty cloud"));
    }
    Ok(8.0 * bytes as f64 / n_input_points as f64)
}

pub const CSV_HEADER: &str = "pc_name,rate_bpp,d1,d2,y,yuv,rgb";

/// One measurement row of a metric report; colour fields are empty for
/// geometry-only clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub pc_name: String,
    pub rate_bpp: f64,
    pub d1: f64,
    pub d2: f64,
    pub color: Option<ColorPsnr>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl ReportRow {
    pub fn measure(pc_name: &str, reference: &PointCloud, test: &PointCloud, bytes: usize) -> Result<Self> {
        let precision = reference.precision().max(test.precision());
        let color = if reference.has_colors() && test.has_colors() {
            Some(psnr_color(reference, test)?)
        } else {
            None
        };
        Ok(ReportRow {
            pc_name: pc_name.to_string(),
            rate_bpp: bpp(bytes, reference.len())?,
            d1: psnr_d1(reference, test, precision)?,
            d2: psnr_d2(reference, test, precision)?,
            color,
        })
    }

    pub fn to_csv(&self) -> String {
        let (y, yuv, rgb) = match &self.color {
            Some(c) => (fmt_db(c.y), fmt_db(c.yuv), fmt_db(c.rgb)),
            None => Default::default(),
        };
        format!(
            "{},{:.6},{},{},{},{},{}",
            self.pc_name,
            self.rate_bpp,
            fmt_db(self.d1),
            fmt_db(self.d2),
            y,
            yuv,
            rgb
        )
    }
}
