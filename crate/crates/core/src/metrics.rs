//! Fusion quality metrics. Every metric works on `[0, 1]` double-precision
//! copies of its inputs; histogram metrics quantize to 256 levels first.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::NormalizedImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const QG_T: f64 = 0.9994;
const QG_K: f64 = -15.0;
const QG_D: f64 = 0.5;
const QA_T: f64 = 0.9879;
const QA_K: f64 = -22.0;
const QA_D: f64 = 0.8;
/// Visual noise variance on the 0–255 scale.
const VIF_SIGMA_NSQ: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

/// Row-major `[0, 1]` plane.
#[derive(Clone, Debug, PartialEq)]
struct Plane {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Plane {
    fn of<T: Scalar>(img: &NormalizedImage<T>) -> Self {
        let u = img.to_unit();
        Self {
            h: u.height(),
            w: u.width(),
            px: u.pixels().to_vec(),
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.px[y * self.w + x]
    }

    fn levels(&self) -> Vec<u8> {
        self.px
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            px: self.px.iter().map(|v| v * s).collect(),
        }
    }
}

fn check_dims<T: Scalar>(imgs: &[&NormalizedImage<T>]) -> Result<()> {
    let d = imgs[0].dims();
    if imgs.iter().any(|i| i.dims() != d) {
        return Err(Error::Shape(format!(
            "metric inputs differ in size: {:?}",
            imgs.iter().map(|i| i.dims()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn entropy_of(counts: &[u64], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn histogram(levels: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &l in levels {
        h[l as usize] += 1;
    }
    h
}

/// Shannon entropy in bits of the 256-level histogram.
pub fn entropy<T: Scalar>(img: &NormalizedImage<T>) -> f64 {
    let l = Plane::of(img).levels();
    entropy_of(&histogram(&l), l.len() as u64)
}

/// Population standard deviation.
pub fn std_dev<T: Scalar>(img: &NormalizedImage<T>) -> f64 {
    let p = Plane::of(img);
    let n = p.px.len() as f64;
    let mean = p.px.iter().sum::<f64>() / n;
    (p.px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `√(RF² + CF²)`; squared first differences summed over valid pairs and
/// divided by the pixel count.
pub fn spatial_frequency<T: Scalar>(img: &NormalizedImage<T>) -> f64 {
    let p = Plane::of(img);
    let n = (p.h * p.w) as f64;
    let mut rf = 0.0;
    let mut cf = 0.0;
    for y in 0..p.h {
        for x in 0..p.w {
            if x > 0 {
                rf += (p.at(y, x) - p.at(y, x - 1)).powi(2);
            }
            if y > 0 {
                cf += (p.at(y, x) - p.at(y - 1, x)).powi(2);
            }
        }
    }
    (rf / n + cf / n).sqrt()
}

fn mi_levels(a: &[u8], b: &[u8]) -> f64 {
    let mut joint = vec![0u64; 256 * 256];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * 256 + y as usize] += 1;
    }
    let n = a.len() as u64;
    let ha = entropy_of(&histogram(a), n);
    let hb = entropy_of(&histogram(b), n);
    let hab = entropy_of(&joint, n);
    (ha + hb - hab).max(0.0)
}

/// Mutual information in bits between two images.
pub fn mutual_information_pair<T: Scalar>(a: &NormalizedImage<T>, b: &NormalizedImage<T>) -> Result<f64> {
    check_dims(&[a, b])?;
    Ok(mi_levels(&Plane::of(a).levels(), &Plane::of(b).levels()))
}

/// `MI(f, ir) + MI(f, vis)`.
pub fn mutual_information<T: Scalar>(fused: &NormalizedImage<T>, ir: &NormalizedImage<T>, vis: &NormalizedImage<T>) -> Result<f64> {
    check_dims(&[fused, ir, vis])?;
    let f = Plane::of(fused).levels();
    Ok(mi_levels(&f, &Plane::of(ir).levels()) + mi_levels(&f, &Plane::of(vis).levels()))
}

/// Interior Sobel strength and orientation, `(h − 2) × (w − 2)`.
fn sobel_polar(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (ih, iw) = (p.h - 2, p.w - 2);
    let mut g = Vec::with_capacity(ih * iw);
    let mut a = Vec::with_capacity(ih * iw);
    for y in 1..p.h - 1 {
        for x in 1..p.w - 1 {
            let v = |dy: isize, dx: isize| p.at((y as isize + dy) as usize, (x as isize + dx) as usize);
            let sx = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
            let sy = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
            g.push(sx.hypot(sy));
            a.push(if sx == 0.0 { FRAC_PI_2 } else { (sy / sx).atan() });
        }
    }
    (g, a)
}

fn edge_preservation(gs: &[f64], as_: &[f64], gf: &[f64], af: &[f64]) -> Vec<f64> {
    gs.iter()
        .zip(as_)
        .zip(gf.iter().zip(af))
        .map(|((&g1, &a1), (&g2, &a2))| {
            let g = if g1 == 0.0 || g2 == 0.0 {
                0.0
            } else if g1 > g2 {
                g2 / g1
            } else {
                g1 / g2
            };
            let a = 1.0 - (a1 - a2).abs() / FRAC_PI_2;
            let qg = QG_T / (1.0 + (QG_K * (g - QG_D)).exp());
            let qa = QA_T / (1.0 + (QA_K * (a - QA_D)).exp());
            qg * qa
        })
        .collect()
}

/// Edge-preservation index weighted by source edge strength; 0 when the
/// images are smaller than 3×3 or the sources have no edges.
pub fn qabf<T: Scalar>(fused: &NormalizedImage<T>, ir: &NormalizedImage<T>, vis: &NormalizedImage<T>) -> Result<f64> {
    check_dims(&[fused, ir, vis])?;
    let (h, w) = fused.dims();
    if h < 3 || w < 3 {
        return Ok(0.0);
    }
    let (gf, af) = sobel_polar(&Plane::of(fused));
    let (ga, aa) = sobel_polar(&Plane::of(ir));
    let (gb, ab) = sobel_polar(&Plane::of(vis));
    let qa = edge_preservation(&ga, &aa, &gf, &af);
    let qb = edge_preservation(&gb, &ab, &gf, &af);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ga.len() {
        num += qa[i] * ga[i] + qb[i] * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 })
}

/// Separable Gaussian correlation over valid positions.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (oh, ow) = (p.h + 1 - n, p.w + 1 - n);
    let mut rows = vec![0.0; p.h * ow];
    for y in 0..p.h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p.at(y, x + i)).sum();
        }
    }
    let mut px = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            px[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    Plane { h: oh, w: ow, px }
}

fn gaussian_1d(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn decimate(p: &Plane) -> Plane {
    let (h, w) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            px.push(p.at(2 * y, 2 * x));
        }
    }
    Plane { h, w, px }
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        h: a.h,
        w: a.w,
        px: a.px.iter().zip(&b.px).map(|(x, y)| x * y).collect(),
    }
}

/// Pixel-domain VIF of `dist` against `reference` over four scales, on the
/// 0–255 intensity scale. Scales whose window no longer fits are skipped.
fn vifp(reference: &Plane, dist: &Plane) -> f64 {
    let mut r = reference.scaled(255.0);
    let mut d = dist.scaled(255.0);
    let mut num = 0.0;
    let mut den = 0.0;
    for scale in 1..=4u32 {
        let n = (1usize << (5 - scale)) + 1;
        let k = gaussian_1d(n, n as f64 / 5.0);
        if scale > 1 {
            if r.h < n || r.w < n {
                break;
            }
            r = decimate(&filter_valid(&r, &k));
            d = decimate(&filter_valid(&d, &k));
        }
        if r.h < n || r.w < n {
            continue;
        }
        let mu1 = filter_valid(&r, &k);
        let mu2 = filter_valid(&d, &k);
        let e11 = filter_valid(&product(&r, &r), &k);
        let e22 = filter_valid(&product(&d, &d), &k);
        let e12 = filter_valid(&product(&r, &d), &k);
        for i in 0..mu1.px.len() {
            let (m1, m2) = (mu1.px[i], mu2.px[i]);
            let mut s1 = (e11.px[i] - m1 * m1).max(0.0);
            let s2 = (e22.px[i] - m2 * m2).max(0.0);
            let s12 = e12.px[i] - m1 * m2;
            let mut g = s12 / (s1 + VIF_EPS);
            let mut sv = s2 - g * s12;
            if s1 < VIF_EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(VIF_EPS);
            num += (1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ)).log10();
            den += (1.0 + s1 / VIF_SIGMA_NSQ).log10();
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Mean over both sources of the fused image's visual information fidelity.
pub fn vif<T: Scalar>(fused: &NormalizedImage<T>, ir: &NormalizedImage<T>, vis: &NormalizedImage<T>) -> Result<f64> {
    check_dims(&[fused, ir, vis])?;
    let f = Plane::of(fused);
    Ok(0.5 * (vifp(&Plane::of(ir), &f) + vifp(&Plane::of(vis), &f)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub vif: f64,
    pub qabf: f64,
    pub mi: f64,
    pub n_pairs: usize,
}

pub const METRIC_NAMES: [&str; 6] = ["en", "sd", "sf", "vif", "qabf", "mi"];

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [self.en, self.sd, self.sf, self.vif, self.qabf, self.mi]
    }

    pub fn from_values(v: [f64; 6], n_pairs: usize) -> Self {
        Self {
            en: v[0],
            sd: v[1],
            sf: v[2],
            vif: v[3],
            qabf: v[4],
            mi: v[5],
            n_pairs,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Arithmetic mean per metric; `n_pairs` sums.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::InsufficientPairs { needed: 1, available: 0 });
        }
        let mut acc = [0.0; 6];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let n = reports.len() as f64;
        Ok(Self::from_values(
            acc.map(|a| a / n),
            reports.iter().map(|r| r.n_pairs).sum(),
        ))
    }
}

pub fn evaluate<T: Scalar>(fused: &NormalizedImage<T>, ir: &NormalizedImage<T>, vis: &NormalizedImage<T>) -> Result<MetricReport> {
    check_dims(&[fused, ir, vis])?;
    Ok(MetricReport {
        en: entropy(fused),
        sd: std_dev(fused),
        sf: spatial_frequency(fused),
        vif: vif(fused, ir, vis)?,
        qabf: qabf(fused, ir, vis)?,
        mi: mutual_information(fused, ir, vis)?,
        n_pairs: 1,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    en: f64,
    sd: f64,
    sf: f64,
    vif: f64,
    qabf: f64,
    mi: f64,
}

pub const MEAN_ROW_ID: &str = "mean";

/// One row per pair followed by a mean row.
pub fn write_report_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<MetricReport> {
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let mean = MetricReport::mean(&reports)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (id, r) in rows.iter().map(|(i, r)| (i.as_str(), r)).chain([(MEAN_ROW_ID, &mean)]) {
        w.serialize(CsvRow {
            id: id.to_string(),
            en: r.en,
            sd: r.sd,
            sf: r.sf,
            vif: r.vif,
            qabf: r.qabf,
            mi: r.mi,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(mean)
}

/// Per-pair rows of a report CSV, without the mean row.
pub fn read_report_csv(path: &Path) -> Result<Vec<(String, MetricReport)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: CsvRow = row.map_err(|e| csv_err(path, e))?;
        if row.id == MEAN_ROW_ID {
            continue;
        }
        out.push((
            row.id,
            MetricReport::from_values([row.en, row.sd, row.sf, row.vif, row.qabf, row.mi], 1),
        ));
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}
