//! Reading-weight imagery and connectivity-graph deduction.
//!
//! For every module we build the effective reading matrix over the center —
//! the |Φ| × |c| magnitudes that decide which center positions feed which
//! context elements. Static readers expose their weights directly; the fast
//! readers are probed with recorded feature vectors and their mixture
//! weights averaged. Images are percentile-clipped for rendering, and the
//! block structure over module feature slices is condensed into a directed
//! connectivity graph using a fixed share threshold, making the deduction
//! reproducible instead of visual.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{collect_features, ThalNetConfig, ThalNetParams};
use crate::numerics::{gaussian_density, softplus, Tensor};
use crate::params::ParamSet;
use crate::routing::{ReaderParams, VARIANCE_EPSILON};

/// Edge threshold multiplier: module j feeds module i when j's share of
/// reader i's mass reaches `tau / module_count`.
pub const DEFAULT_TAU: f64 = 1.5;
pub const DEFAULT_PROBE_COUNT: usize = 100;

// ── Effective reading matrices ───────────────────────────────────────────

/// Magnitudes of the effective reading weights, shaped [|Φ| × |c|]: entry
/// (k, j) is how strongly center position k feeds context element j.
///
/// Static readers (linear, weight-normed) report their parameter magnitudes;
/// the fast readers report mixture weights averaged over the probe rows
/// (one probe per row of `probes`, each a module feature vector).
pub fn effective_read_matrix(
    pset: &ParamSet,
    reader: &ReaderParams,
    center_size: usize,
    probes: Option<&Tensor>,
) -> Result<Tensor> {
    match reader {
        ReaderParams::Linear { w } => {
            let wt = pset.value(*w);
            expect_center_rows(wt, center_size)?;
            let data = wt.data().iter().map(|v| v.abs()).collect();
            Tensor::from_vec(wt.shape(), data)
        }
        ReaderParams::WeightNorm { w, beta } => {
            let wt = pset.value(*w);
            expect_center_rows(wt, center_size)?;
            let frob: f64 = wt.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if frob == 0.0 {
                return Err(Error::Domain {
                    op: "effective_read_matrix",
                    msg: "weight matrix has zero Frobenius norm".into(),
                });
            }
            let gain = pset.value(*beta).item() / frob;
            let data = wt.data().iter().map(|v| (gain * v).abs()).collect();
            Tensor::from_vec(wt.shape(), data)
        }
        ReaderParams::FastSoftmax {
            w,
            b,
            center_size: cs,
        } => {
            if *cs != center_size {
                return Err(Error::Argument(format!(
                    "reader was built for a center of {cs}, not {center_size}"
                )));
            }
            let probes = require_probes(probes, pset.value(*w).shape()[0])?;
            let wt = pset.value(*w);
            let bt = pset.value(*b);
            let (f, cols) = (wt.shape()[0], wt.shape()[1]);
            let context = cols / center_size;
            let (n, _) = (probes.shape()[0], probes.shape()[1]);
            let mut out = vec![0.0; center_size * context];
            for row in 0..n {
                let phi = &probes.data()[row * f..(row + 1) * f];
                for j in 0..context {
                    let logits: Vec<f64> = (0..center_size)
                        .map(|k| {
                            let col = j * center_size + k;
                            bt.data()[col]
                                + (0..f)
                                    .map(|p| phi[p] * wt.data()[p * cols + col])
                                    .sum::<f64>()
                        })
                        .collect();
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (k, e) in exps.iter().enumerate() {
                        out[k * context + j] += e / sum / n as f64;
                    }
                }
            }
            Tensor::from_vec(&[center_size, context], out)
        }
        ReaderParams::FastGaussian { w, b, u, d } => {
            let probes = require_probes(probes, pset.value(*w).shape()[0])?;
            let wt = pset.value(*w);
            let bt = pset.value(*b);
            let ut = pset.value(*u);
            let dt = pset.value(*d);
            let (f, context) = (wt.shape()[0], wt.shape()[1]);
            let n = probes.shape()[0];
            let mut out = vec![0.0; center_size * context];
            for row in 0..n {
                let phi = &probes.data()[row * f..(row + 1) * f];
                for j in 0..context {
                    let mu = bt.data()[j]
                        + (0..f)
                            .map(|p| phi[p] * wt.data()[p * context + j])
                            .sum::<f64>();
                    let raw = dt.data()[j]
                        + (0..f)
                            .map(|p| phi[p] * ut.data()[p * context + j])
                            .sum::<f64>();
                    let var = softplus(raw) + VARIANCE_EPSILON;
                    for k in 0..center_size {
                        out[k * context + j] +=
                            gaussian_density((k + 1) as f64, mu, var)? / n as f64;
                    }
                }
            }
            Tensor::from_vec(&[center_size, context], out)
        }
    }
}

fn expect_center_rows(w: &Tensor, center_size: usize) -> Result<()> {
    if w.shape()[0] != center_size {
        return Err(Error::Argument(format!(
            "reading weights cover a center of {}, not {center_size}",
            w.shape()[0]
        )));
    }
    Ok(())
}

fn require_probes(probes: Option<&Tensor>, feature_size: usize) -> Result<&Tensor> {
    let p = probes.ok_or_else(|| {
        Error::Argument("a probe feature batch is required for dynamic readers".into())
    })?;
    if p.shape().len() != 2 || p.shape()[1] != feature_size {
        return Err(Error::Argument(format!(
            "probe batch shape {:?} does not match [n, {feature_size}]",
            p.shape()
        )));
    }
    Ok(p)
}

// ── Percentile clipping ──────────────────────────────────────────────────

/// One module's rendered reading image: values clipped to the [lo, hi]
/// percentile band of the raw magnitudes and rescaled into [0, 1].
#[derive(Debug, Clone)]
pub struct WeightImage {
    pub module: usize,
    /// |Φ|: center positions.
    pub rows: usize,
    /// |c|: context elements.
    pub cols: usize,
    /// Row-major [rows × cols] pixel values in [0, 1].
    pub pixels: Vec<f64>,
    /// Percentile clip bounds over the raw magnitudes.
    pub lo: f64,
    pub hi: f64,
}

/// Percentile by linear interpolation over the sorted values, `p` in 0..=100.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Clip a magnitude matrix to its [lo_pct, hi_pct] percentile band and
/// rescale linearly into [0, 1]. A constant matrix maps to all 0.5.
pub fn percentile_clip(
    module: usize,
    matrix: &Tensor,
    lo_pct: f64,
    hi_pct: f64,
) -> Result<WeightImage> {
    if matrix.shape().len() != 2 {
        return Err(Error::Argument(format!(
            "expected a matrix, got shape {:?}",
            matrix.shape()
        )));
    }
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::Argument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct} and {hi_pct}"
        )));
    }
    let mut sorted = matrix.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, lo_pct);
    let hi = percentile(&sorted, hi_pct);
    let pixels = matrix
        .data()
        .iter()
        .map(|&v| {
            if hi == lo {
                0.5
            } else {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok(WeightImage {
        module,
        rows: matrix.shape()[0],
        cols: matrix.shape()[1],
        pixels,
        lo,
        hi,
    })
}

// ── Connectivity deduction ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Module whose feature block supplies the mass.
    pub from: usize,
    /// Module whose reader concentrates on it.
    pub to: usize,
    pub strength: f64,
}

#[derive(Debug, Clone)]
pub struct ConnectivityGraph {
    pub modules: usize,
    /// shares[i][j]: fraction of reader i's mass on module j's block;
    /// each row sums to 1.
    pub shares: Vec<Vec<f64>>,
    pub tau: f64,
    pub edges: Vec<Edge>,
}

/// Condense raw reading matrices into a directed graph. For reader i and
/// source module j, the block share is the mean magnitude over j's center
/// slice normalized across sources; the edge j→i exists when the share
/// reaches `tau / module_count`. A reader with no mass at all gets uniform
/// shares (and therefore no edges).
pub fn deduce_graph(
    matrices: &[Tensor],
    boundaries: &[(usize, usize)],
    tau: f64,
) -> Result<ConnectivityGraph> {
    let modules = boundaries.len();
    if matrices.len() != modules || modules == 0 {
        return Err(Error::Argument(format!(
            "{} matrices for {modules} module slices",
            matrices.len()
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Argument(format!("tau must be positive, got {tau}")));
    }
    let center: usize = boundaries.iter().map(|&(_, len)| len).sum();
    let mut shares = Vec::with_capacity(modules);
    let mut edges = Vec::new();
    let threshold = tau / modules as f64;
    for (i, m) in matrices.iter().enumerate() {
        if m.shape().len() != 2 || m.shape()[0] != center {
            return Err(Error::Argument(format!(
                "matrix {i} has shape {:?}, expected {center} center rows",
                m.shape()
            )));
        }
        let cols = m.shape()[1];
        let mut means = Vec::with_capacity(modules);
        for &(offset, len) in boundaries {
            let mass: f64 = m.data()[offset * cols..(offset + len) * cols]
                .iter()
                .map(|v| v.abs())
                .sum();
            means.push(mass / (len * cols) as f64);
        }
        let total: f64 = means.iter().sum();
        let row: Vec<f64> = if total == 0.0 {
            vec![1.0 / modules as f64; modules]
        } else {
            means.iter().map(|m| m / total).collect()
        };
        for (j, &s) in row.iter().enumerate() {
            if s >= threshold {
                edges.push(Edge {
                    from: j,
                    to: i,
                    strength: s,
                });
            }
        }
        shares.push(row);
    }
    Ok(ConnectivityGraph {
        modules,
        shares,
        tau,
        edges,
    })
}

// ── Exports ──────────────────────────────────────────────────────────────

/// Binary portable graymap with one row per context element and one column
/// per center position (the stored matrix transposed), maxval 255.
pub fn export_pgm(path: &Path, image: &WeightImage) -> Result<()> {
    let (width, height) = (image.rows, image.cols);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for j in 0..height {
        for k in 0..width {
            let p = image.pixels[k * image.cols + j];
            bytes.push((p * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Graphviz text: one node per module (1-based), one labeled edge per
/// deduced connection.
pub fn export_dot(path: &Path, graph: &ConnectivityGraph) -> Result<()> {
    let mut text = String::from("digraph connectivity {\n");
    for i in 0..graph.modules {
        text.push_str(&format!("  m{} [label=\"module {}\"];\n", i + 1, i + 1));
    }
    for e in &graph.edges {
        text.push_str(&format!(
            "  m{} -> m{} [label=\"{:.2}\"];\n",
            e.from + 1,
            e.to + 1,
            e.strength
        ));
    }
    text.push_str("}\n");
    fs::write(path, text)?;
    Ok(())
}

// ── Whole-model analysis ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AnalysisReport {
    /// Raw magnitude matrices per module, [|Φ| × |c^i|].
    pub matrices: Vec<Tensor>,
    pub images: Vec<WeightImage>,
    pub graph: ConnectivityGraph,
}

/// Per-module probe batches: module feature vectors recorded while running
/// the model over `inputs`, stacked to at most `max_probes` rows each.
pub fn collect_probes(
    cfg: &ThalNetConfig,
    tp: &ThalNetParams,
    pset: &ParamSet,
    inputs: &[Tensor],
    max_probes: usize,
) -> Result<Vec<Tensor>> {
    if max_probes == 0 {
        return Err(Error::Argument("at least one probe row required".into()));
    }
    let steps = collect_features(cfg, tp, pset, inputs)?;
    let mut out = Vec::with_capacity(cfg.modules.len());
    for (i, spec) in cfg.modules.iter().enumerate() {
        let f = spec.feature_size();
        let mut rows: Vec<f64> = Vec::new();
        let mut count = 0;
        'outer: for step in &steps {
            let features = &step[i];
            let batch = features.shape()[0];
            for row in 0..batch {
                rows.extend_from_slice(&features.data()[row * f..(row + 1) * f]);
                count += 1;
                if count == max_probes {
                    break 'outer;
                }
            }
        }
        out.push(Tensor::from_vec(&[count, f], rows)?);
    }
    Ok(out)
}

/// Build reading images and the connectivity graph for a full model. Fast
/// readers require `probe_inputs` (a token sequence fed through the model to
/// record feature vectors); static readers ignore it.
pub fn analyze_thalnet(
    cfg: &ThalNetConfig,
    tp: &ThalNetParams,
    pset: &ParamSet,
    probe_inputs: Option<&[Tensor]>,
    tau: f64,
    probe_count: usize,
) -> Result<AnalysisReport> {
    cfg.validate()?;
    let probes = match probe_inputs {
        Some(inputs) => Some(collect_probes(cfg, tp, pset, inputs, probe_count)?),
        None => {
            if cfg.reader.is_dynamic() {
                return Err(Error::Argument(
                    "a probe feature batch is required for dynamic readers".into(),
                ));
            }
            None
        }
    };
    let center = cfg.center_size();
    let mut boundaries = Vec::with_capacity(cfg.modules.len());
    let mut offset = 0;
    for m in &cfg.modules {
        boundaries.push((offset, m.feature_size()));
        offset += m.feature_size();
    }
    let mut matrices = Vec::with_capacity(cfg.modules.len());
    let mut images = Vec::with_capacity(cfg.modules.len());
    for (i, reader) in tp.readers.iter().enumerate() {
        let probe = probes.as_ref().map(|p| &p[i]);
        let matrix = effective_read_matrix(pset, reader, center, probe)?;
        images.push(percentile_clip(i, &matrix, 5.0, 95.0)?);
        matrices.push(matrix);
    }
    let graph = deduce_graph(&matrices, &boundaries, tau)?;
    Ok(AnalysisReport {
        matrices,
        images,
        graph,
    })
}

/// Write `module-<i>.pgm` per module plus `connectivity.dot` into `dir`.
pub fn export_analysis(dir: &Path, report: &AnalysisReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    for image in &report.images {
        export_pgm(&dir.join(format!("module-{}.pgm", image.module)), image)?;
    }
    export_dot(&dir.join("connectivity.dot"), &report.graph)?;
    Ok(())
}
