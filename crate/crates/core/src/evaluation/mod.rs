//! Informativeness (mutual information between images and each latent chunk),
//! 2-D latent projections, attribute-swap grids and pixel-level factor probes.
//!
//! Images are reduced with PCA before the k-NN estimator; the number of
//! components is part of every report. Codes are taken at the posterior mean
//! (`z_u = mu_u`) with batch norm in eval mode.

mod ksg;
mod pca;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

pub use ksg::{estimate_mi_ksg, MIEstimate, KSG_ESTIMATOR};
pub use pca::Pca;

use crate::data::FactorDataset;
use crate::diffcore::Tensor;
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::model::{decode, encode_with_eps, swap_attribute, LatentCode, ModelParams};
use crate::rng::RngState;

pub const DEFAULT_PCA_DIMS: usize = 32;
pub const DEFAULT_K_NEIGHBORS: usize = 3;
pub const FOREGROUND_THRESHOLD: f64 = 0.1;
const ENCODE_CHUNK: usize = 128;

/// `z_f1 … z_fk, z_u`.
pub fn chunk_labels(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("z_f{i}")).chain(["z_u".to_string()]).collect()
}

/// Deterministic code of every image: zero noise, so `z_u = mu_u`.
pub fn encode_mean(images: &Tensor, params: &ModelParams) -> Result<LatentCode> {
    let n = images.shape().first().copied().unwrap_or(0);
    let d = params.config.latent_dim;
    let mut parts = Vec::new();
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let rows: Vec<usize> = (start..n.min(start + ENCODE_CHUNK)).collect();
        let x = images.select_rows(&rows)?;
        parts.push(encode_with_eps(&x, params, &Tensor::zeros(&[rows.len(), d]))?);
    }
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one part"));
    }
    let cat = |f: fn(&LatentCode) -> &Tensor| Tensor::concat_rows(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>());
    Ok(LatentCode {
        z_f: cat(|p| &p.z_f)?,
        mu_u: cat(|p| &p.mu_u)?,
        logvar_u: cat(|p| &p.logvar_u)?,
        z_u: cat(|p| &p.z_u)?,
        eps: cat(|p| &p.eps)?,
    })
}

/// One `n×d` matrix per chunk, in [`chunk_labels`] order.
pub fn chunk_matrices(code: &LatentCode) -> Vec<DMatrix<f64>> {
    let s = code.z_f.shape();
    let (n, k, d) = (s[0], s[1], s[2]);
    let zf = code.z_f.data();
    let mut out: Vec<DMatrix<f64>> = (0..k)
        .map(|i| DMatrix::from_fn(n, d, |r, c| zf[(r * k + i) * d + c] as f64))
        .collect();
    let zu = code.z_u.data();
    out.push(DMatrix::from_fn(n, d, |r, c| zu[r * d + c] as f64));
    out
}

fn flatten(images: &Tensor) -> DMatrix<f64> {
    let n = images.shape()[0];
    let dim = images.numel() / n.max(1);
    DMatrix::from_row_slice(n, dim, &images.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
}

/// `n` distinct dataset rows: all rows in order if `n == N`, otherwise a
/// seeded sample.
pub fn sample_rows(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(config_err!("n_samples must be in 1..={len}, got {n}"));
    }
    let mut rows: Vec<usize> = (0..len).collect();
    if n < len {
        RngState::new(seed).shuffle(&mut rows);
        rows.truncate(n);
        rows.sort_unstable();
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkEstimate {
    pub chunk: String,
    pub estimate: MIEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InformativenessReport {
    /// `k + 1` entries, `z_u` last.
    pub chunks: Vec<ChunkEstimate>,
    pub pca_dims: usize,
    /// Share of image variance kept by the PCA reduction.
    pub pca_explained: f64,
}

/// MI between PCA-reduced images and each latent chunk.
pub fn informativeness_from_codes(
    images: &Tensor,
    code: &LatentCode,
    pca_dims: usize,
    k_neighbors: usize,
) -> Result<InformativenessReport> {
    let x = flatten(images);
    if pca_dims == 0 || pca_dims > x.ncols() {
        return Err(config_err!(
            "pca_dims must be in 1..={} (flattened image size), got {pca_dims}",
            x.ncols()
        ));
    }
    if code.batch_size() != x.nrows() {
        return Err(dim_err!("{} images but {} codes", x.nrows(), code.batch_size()));
    }
    let pca = Pca::fit(&x, pca_dims)?;
    let reduced = pca.transform(&x);
    let k = code.z_f.shape()[1];
    let chunks = chunk_labels(k)
        .into_iter()
        .zip(chunk_matrices(code))
        .map(|(chunk, z)| Ok(ChunkEstimate { chunk, estimate: estimate_mi_ksg(&reduced, &z, k_neighbors)? }))
        .collect::<Result<_>>()?;
    Ok(InformativenessReport {
        chunks,
        pca_dims,
        pca_explained: pca.explained_ratio().iter().sum::<f64>().min(1.0),
    })
}

/// Encodes `n_samples` dataset images (seeded choice) and reports the MI of
/// each chunk with the images.
pub fn informativeness_report(
    params: &ModelParams,
    ds: &FactorDataset,
    n_samples: usize,
    pca_dims: usize,
    k_neighbors: usize,
    seed: u64,
) -> Result<InformativenessReport> {
    let rows = sample_rows(ds.len(), n_samples, seed)?;
    let images = ds.images.select_rows(&rows)?;
    let code = encode_mean(&images, params)?;
    informativeness_from_codes(&images, &code, pca_dims, k_neighbors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    /// Grouped by chunk: all samples' first chunk, then the second, ...
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    /// Fraction of total variance along each axis.
    pub explained: [f64; 2],
}

/// PCA of labelled rows to two dimensions.
pub fn project_2d(data: &DMatrix<f64>, labels: Vec<String>) -> Result<ProjectionReport> {
    if data.nrows() < 3 {
        return Err(config_err!("projection needs at least 3 points, got {}", data.nrows()));
    }
    if labels.len() != data.nrows() {
        return Err(dim_err!("{} labels for {} points", labels.len(), data.nrows()));
    }
    if data.ncols() < 2 {
        return Err(config_err!("projection needs at least 2 dimensions"));
    }
    let pca = Pca::fit(data, 2)?;
    let proj = pca.transform(data);
    let ratio = pca.explained_ratio();
    Ok(ProjectionReport {
        points: proj.row_iter().map(|r| [r[0], r[1]]).collect(),
        labels,
        explained: [ratio[0], ratio[1]],
    })
}

pub fn project_latents_2d(params: &ModelParams, ds: &FactorDataset, n_samples: usize, seed: u64) -> Result<ProjectionReport> {
    let rows = sample_rows(ds.len(), n_samples, seed)?;
    let code = encode_mean(&ds.images.select_rows(&rows)?, params)?;
    let mats = chunk_matrices(&code);
    let (n, d) = (rows.len(), params.config.latent_dim);
    let mut stacked = DMatrix::zeros(n * mats.len(), d);
    let mut labels = Vec::with_capacity(n * mats.len());
    for (c, (m, label)) in mats.iter().zip(chunk_labels(params.config.num_attributes)).enumerate() {
        stacked.rows_mut(c * n, n).copy_from(m);
        labels.extend(std::iter::repeat_n(label, n));
    }
    project_2d(&stacked, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapGrid {
    pub recon_a: Tensor,
    pub recon_b: Tensor,
    pub swapped: Tensor,
    /// `3 × 3H × nW`: the three rows above stacked vertically.
    pub image: Tensor,
}

/// Reconstructions of `a` and `b` and the decoding of `a`'s code with chunk
/// `attribute` (1-based) taken from `b`.
pub fn render_swap_grid(params: &ModelParams, a: &Tensor, b: &Tensor, attribute: usize) -> Result<SwapGrid> {
    if a.shape() != b.shape() || a.shape().len() != 4 || a.shape()[0] == 0 {
        return Err(dim_err!("swap batches must share a B×3×H×W shape, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let code_a = encode_mean(a, params)?;
    let code_b = encode_mean(b, params)?;
    let swapped_code = swap_attribute(&code_a, &code_b, attribute)?;
    let recon_a = decode(&code_a.z_f, &code_a.z_u, params)?;
    let recon_b = decode(&code_b.z_f, &code_b.z_u, params)?;
    let swapped = decode(&swapped_code.z_f, &swapped_code.z_u, params)?;
    let image = tile_rows(&[&recon_a, &recon_b, &swapped])?;
    Ok(SwapGrid { recon_a, recon_b, swapped, image })
}

/// Renders the swap grid and writes it to `out_path` as binary PPM.
pub fn swap_grid(params: &ModelParams, a: &Tensor, b: &Tensor, attribute: usize, out_path: &Path) -> Result<SwapGrid> {
    let grid = render_swap_grid(params, a, b, attribute)?;
    write_ppm(&grid.image, out_path)?;
    Ok(grid)
}

/// Lays out each `n×3×H×W` batch as one row of `n` tiles.
pub fn tile_rows(rows: &[&Tensor]) -> Result<Tensor> {
    let shape = rows.first().ok_or_else(|| contract_err!("no rows to tile"))?.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if rows.iter().any(|r| r.shape() != shape) {
        return Err(dim_err!("grid rows have different shapes"));
    }
    let (gh, gw) = (rows.len() * h, n * w);
    let mut out = vec![0.0f32; c * gh * gw];
    for (r, batch) in rows.iter().enumerate() {
        let src = batch.data();
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let s = ((i * c + ch) * h + y) * w;
                    let d = (ch * gh + r * h + y) * gw + i * w;
                    out[d..d + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
    }
    Tensor::new(&[c, gh, gw], out)
}

/// Binary PPM (P6) bytes of a `3×H×W` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(dim_err!("PPM needs a 3×H×W image, got {:?}", image.shape()));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Foreground summary of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    /// Chroma-weighted circular mean hue in `[0, 1)`; `None` if the
    /// foreground is achromatic.
    pub hue: Option<f64>,
    /// `(row, col)` mean of foreground pixel centers.
    pub centroid: (f64, f64),
    pub pixels: usize,
}

fn hue_chroma(rgb: [f64; 3]) -> (f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let chroma = max - r.min(g).min(b);
    if chroma <= 0.0 {
        return (0.0, 0.0);
    }
    let h = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    (h / 6.0, chroma)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per image: the background is the per-channel median of the border
/// pixels, the foreground every pixel further than 0.1 from it in L∞.
/// Images with no foreground give `None`.
pub fn factor_probe(images: &Tensor) -> Result<Vec<Option<Probe>>> {
    let &[b, 3, h, w] = images.shape() else {
        return Err(dim_err!("factor_probe needs B×3×H×W images, got {:?}", images.shape()));
    };
    let plane = h * w;
    let border: Vec<usize> = (0..plane)
        .filter(|p| {
            let (y, x) = (p / w, p % w);
            y == 0 || x == 0 || y + 1 == h || x + 1 == w
        })
        .collect();
    let mut out = Vec::with_capacity(b);
    for img in images.data().chunks(3 * plane) {
        let px = |c: usize, p: usize| img[c * plane + p] as f64;
        let bg: Vec<f64> = (0..3).map(|c| median(border.iter().map(|&p| px(c, p)).collect())).collect();
        let (mut n, mut sy, mut sx, mut hc, mut hs, mut wsum) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
        for p in 0..plane {
            let rgb = [px(0, p), px(1, p), px(2, p)];
            let dist = (0..3).map(|c| (rgb[c] - bg[c]).abs()).fold(0.0, f64::max);
            if dist <= FOREGROUND_THRESHOLD {
                continue;
            }
            n += 1;
            sy += (p / w) as f64 + 0.5;
            sx += (p % w) as f64 + 0.5;
            let (hue, chroma) = hue_chroma(rgb);
            let angle = std::f64::consts::TAU * hue;
            hc += chroma * angle.cos();
            hs += chroma * angle.sin();
            wsum += chroma;
        }
        out.push((n > 0).then(|| Probe {
            hue: (wsum > 0.0 && (hc != 0.0 || hs != 0.0))
                .then(|| (hs.atan2(hc) / std::f64::consts::TAU).rem_euclid(1.0)),
            centroid: (sy / n as f64, sx / n as f64),
            pixels: n,
        }));
    }
    Ok(out)
}

/// Circular distance between hues in `[0, 1)`, at most ½.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Generator factor indices `[color, x, y]` implied by a probe of a
/// color-position image.
pub fn probe_to_factors(probe: &Probe, n_colors: usize, n_x: usize, n_y: usize, image_size: usize) -> Option<[usize; 3]> {
    let hue = probe.hue?;
    let color = (hue * n_colors as f64).round() as usize % n_colors;
    let (row, col) = probe.centroid;
    let cx = (col / (image_size / n_x) as f64) as usize;
    let cy = (row / (image_size / n_y) as f64) as usize;
    (cx < n_x && cy < n_y).then_some([color, cx, cy])
}

pub fn informativeness_csv(report: &InformativenessReport) -> String {
    let mut s = String::from("chunk,mi_nats,estimator,k,n\n");
    for c in &report.chunks {
        let e = &c.estimate;
        let _ = writeln!(s, "{},{},{},{},{}", c.chunk, e.value, e.estimator, e.k_neighbors, e.n);
    }
    s
}

pub fn projection_csv(report: &ProjectionReport) -> String {
    let mut s = String::from("x,y,chunk_label\n");
    for (p, l) in report.points.iter().zip(&report.labels) {
        let _ = writeln!(s, "{},{},{l}", p[0], p[1]);
    }
    s
}

#[cfg(test)]
mod tests;
