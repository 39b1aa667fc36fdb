//! Kernel taxonomy by k-means on padded-kernel spectra, and the location and
//! amplitude of each kernel's spectral peak before and after transfer.

use std::fmt::Write as _;

use rand::Rng;

use crate::cnn::CnnModel;
use crate::error::{Error, Result};
use crate::fft::signed_index;
use crate::seed;
use crate::specanalysis::{kernel_spectra, KernelSpectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumScaling {
    /// Each map divided by its own maximum.
    UnitMax,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iter: 300,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning run.
    pub inertia_history: Vec<f64>,
    pub k: usize,
    pub seed: u64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    chosen = i;
                    break;
                }
                r -= di;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].to_vec());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(points: &[&[f64]], mut centers: Vec<Vec<f64>>, max_iter: usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let k = centers.len();
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centers);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
            dists[i] = d;
            inertia += d;
        }
        history.push(inertia);
        if !changed && history.len() > 1 {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assign) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // an empty cluster takes over the point farthest from its center
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("non-empty point set");
                centers[j] = points[far].to_vec();
                dists[far] = 0.0;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &j)| dist2(p, &centers[j]))
        .sum::<f64>();
    if history.last().is_none_or(|&h| inertia < h) {
        history.push(inertia);
    }
    (centers, assign, history)
}

/// Lloyd's algorithm with k-means++ seeding on equal-length vectors.
pub fn kmeans(points: &[&[f64]], cfg: &KMeansConfig) -> Result<ClusterResult> {
    if points.is_empty() {
        return Err(Error::Argument("no points to cluster".into()));
    }
    if cfg.k == 0 || cfg.k > points.len() {
        return Err(Error::Argument(format!("k = {} must lie in 1..={}", cfg.k, points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Argument("points differ in dimension".into()));
    }
    let mut best: Option<ClusterResult> = None;
    for run in 0..cfg.n_init.max(1) {
        let mut rng = seed::rng(cfg.seed, &format!("kmeans/{run}"));
        let init = plus_plus(points, cfg.k, &mut rng);
        let (centers, assignments, history) = lloyd(points, init, cfg.max_iter);
        let inertia = *history.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(ClusterResult {
                centers,
                assignments,
                inertia,
                inertia_history: history,
                k: cfg.k,
                seed: cfg.seed,
            });
        }
    }
    Ok(best.expect("at least one run"))
}

/// Clusters kernel magnitude maps.
pub fn cluster_kernel_spectra(
    spectra: &[KernelSpectrum],
    cfg: &KMeansConfig,
    scaling: SpectrumScaling,
) -> Result<ClusterResult> {
    let maps: Vec<Vec<f64>> = spectra
        .iter()
        .map(|s| match scaling {
            SpectrumScaling::Raw => s.magnitude.clone(),
            SpectrumScaling::UnitMax => {
                let m = s.magnitude.iter().fold(0.0f64, |a, v| a.max(*v));
                if m > 0.0 {
                    s.magnitude.iter().map(|v| v / m).collect()
                } else {
                    s.magnitude.clone()
                }
            }
        })
        .collect();
    let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
    kmeans(&refs, cfg)
}

/// Final inertia for each `k`, for choosing the number of clusters.
pub fn elbow(points: &[&[f64]], ks: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| Ok((k, kmeans(points, &KMeansConfig::new(k, seed))?.inertia)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaximaRecord {
    pub in_channel: usize,
    pub out_channel: usize,
    /// Signed wavenumber indices of the peak.
    pub kx: i64,
    pub ky: i64,
    pub amplitude: f64,
    /// `sqrt(kx^2 + ky^2)`.
    pub kappa: f64,
}

/// Amplitudes within this relative distance of the maximum count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Peak of one magnitude map; ties go to the lowest radial wavenumber, then the
/// lexicographically smallest signed `(kx, ky)`.
pub fn spectrum_peak(magnitude: &[f64], n: usize) -> (i64, i64, f64) {
    let max = magnitude.iter().fold(0.0f64, |a, v| a.max(*v));
    let mut best: Option<(i64, i64, i64)> = None;
    for j in 0..n {
        for i in 0..n {
            if magnitude[j * n + i] >= max * (1.0 - TIE_TOLERANCE) {
                let (kx, ky) = (signed_index(i, n), signed_index(j, n));
                let key = (kx * kx + ky * ky, kx, ky);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
    }
    let (_, kx, ky) = best.expect("non-empty map");
    (kx, ky, max)
}

pub fn maxima_of(spectra: &[KernelSpectrum]) -> Vec<MaximaRecord> {
    spectra
        .iter()
        .map(|s| {
            let (kx, ky, amplitude) = spectrum_peak(&s.magnitude, s.n);
            MaximaRecord {
                in_channel: s.in_channel,
                out_channel: s.out_channel,
                kx,
                ky,
                amplitude,
                kappa: ((kx * kx + ky * ky) as f64).sqrt(),
            }
        })
        .collect()
}

/// Spectral peak of every kernel of a (one-based) layer, padded to the model grid.
pub fn kernel_maxima(model: &CnnModel, layer: usize) -> Result<Vec<MaximaRecord>> {
    Ok(maxima_of(&kernel_spectra(model, layer, model.n)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaximaHistogram {
    /// Folded histograms count `(|kx|, |ky|)`.
    pub folded: bool,
    /// Sorted `((kx, ky), count)` for occupied bins.
    pub bins: Vec<((i64, i64), usize)>,
}

impl MaximaHistogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.1).sum()
    }

    pub fn count(&self, kx: i64, ky: i64) -> usize {
        self.bins
            .binary_search_by(|b| b.0.cmp(&(kx, ky)))
            .map(|i| self.bins[i].1)
            .unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kx,ky,count\n");
        for ((kx, ky), c) in &self.bins {
            let _ = writeln!(s, "{kx},{ky},{c}");
        }
        s
    }
}

pub fn maxima_histogram(records: &[MaximaRecord], folded: bool) -> Result<MaximaHistogram> {
    if records.is_empty() {
        return Err(Error::Argument("no maxima to count".into()));
    }
    let mut map = std::collections::BTreeMap::new();
    for r in records {
        let key = if folded { (r.kx.abs(), r.ky.abs()) } else { (r.kx, r.ky) };
        *map.entry(key).or_insert(0usize) += 1;
    }
    Ok(MaximaHistogram {
        folded,
        bins: map.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnchangedPeak {
    pub index: usize,
    pub kx: i64,
    pub ky: i64,
    /// `amplitude_tl / amplitude_base`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedPeak {
    pub index: usize,
    pub before: (i64, i64),
    pub after: (i64, i64),
    pub kappa_before: f64,
    pub kappa_after: f64,
}

impl ShiftedPeak {
    pub fn delta(&self) -> f64 {
        self.kappa_after - self.kappa_before
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaximaComparison {
    pub unchanged: Vec<UnchangedPeak>,
    pub shifted: Vec<ShiftedPeak>,
}

impl MaximaComparison {
    /// Mean amplitude ratio over unchanged peaks; `None` if every peak moved.
    pub fn mean_ratio(&self) -> Option<f64> {
        if self.unchanged.is_empty() {
            None
        } else {
            Some(self.unchanged.iter().map(|u| u.ratio).sum::<f64>() / self.unchanged.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,status,kx_before,ky_before,kx_after,ky_after,kappa_before,kappa_after,amplitude_ratio\n");
        for u in &self.unchanged {
            let k = ((u.kx * u.kx + u.ky * u.ky) as f64).sqrt();
            let _ = writeln!(s, "{},unchanged,{},{},{},{},{k},{k},{}", u.index, u.kx, u.ky, u.kx, u.ky, u.ratio);
        }
        for sh in &self.shifted {
            let _ = writeln!(
                s,
                "{},shifted,{},{},{},{},{},{},",
                sh.index, sh.before.0, sh.before.1, sh.after.0, sh.after.1, sh.kappa_before, sh.kappa_after
            );
        }
        s
    }
}

/// Splits kernels into those whose peak stayed put and those whose peak moved.
pub fn compare_maxima(base: &[MaximaRecord], tl: &[MaximaRecord]) -> Result<MaximaComparison> {
    if base.len() != tl.len() {
        return Err(Error::shape(base.len(), tl.len()));
    }
    let mut out = MaximaComparison {
        unchanged: Vec::new(),
        shifted: Vec::new(),
    };
    for (index, (b, t)) in base.iter().zip(tl).enumerate() {
        if (b.in_channel, b.out_channel) != (t.in_channel, t.out_channel) {
            return Err(Error::Argument(format!("kernel {index} is not aligned between record sets")));
        }
        if (b.kx, b.ky) == (t.kx, t.ky) {
            out.unchanged.push(UnchangedPeak {
                index,
                kx: b.kx,
                ky: b.ky,
                ratio: t.amplitude / b.amplitude,
            });
        } else {
            out.shifted.push(ShiftedPeak {
                index,
                before: (b.kx, b.ky),
                after: (t.kx, t.ky),
                kappa_before: b.kappa,
                kappa_after: t.kappa,
            });
        }
    }
    Ok(out)
}

/// Long-format CSV of cluster centers: `cluster,ky,kx,value` with signed wavenumbers.
pub fn centers_to_csv(result: &ClusterResult, n: usize) -> String {
    let mut s = String::from("cluster,ky,kx,value\n");
    for (c, center) in result.centers.iter().enumerate() {
        for j in 0..n {
            for i in 0..n {
                let _ = writeln!(s, "{c},{},{},{:e}", signed_index(j, n), signed_index(i, n), center[j * n + i]);
            }
        }
    }
    s
}
