//! Synthetic color × position dataset, the DSCT tensor file format and the
//! on-disk dataset layout.
//!
//! DSCT layout (little-endian): magic `DSCT`, u32 version, u32 ndim,
//! `ndim` × u32 dims, u8 dtype (0 = f32), then the f32 payload.
//!
//! A dataset directory holds `images.dsct` (N×3×H×W), `factors.dsct`
//! (N×F, integer indices stored as f32) and `meta.txt` with one
//! `name:cardinality` line per factor.

use std::fs;
use std::path::Path;

use crate::augment::{Applied, PositiveTransform, TransformRanges};
use crate::diffcore::Tensor;
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::RngState;

pub const DSCT_MAGIC: &[u8; 4] = b"DSCT";
pub const DSCT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_NDIM: u32 = 16;

/// Side of the generated square, in pixels.
pub const SQUARE_SIDE: usize = 8;
pub const PALETTE_SIZE: usize = 12;
/// Upper bound on the random background gray level.
pub const MAX_BACKGROUND: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorDataset {
    /// `N×3×H×W`, values in `[0, 1]`.
    pub images: Tensor,
    /// Row-major `N×F` factor indices.
    pub factors: Vec<usize>,
    pub factor_names: Vec<String>,
    pub cardinalities: Vec<usize>,
}

impl FactorDataset {
    pub fn new(images: Tensor, factors: Vec<usize>, factor_names: Vec<String>, cardinalities: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[1] != 3 {
            return Err(dim_err!("dataset images must be N×3×H×W, got {:?}", images.shape()));
        }
        let n = images.shape()[0];
        let f = factor_names.len();
        if cardinalities.len() != f || factors.len() != n * f {
            return Err(dim_err!(
                "{n} images with {f} named factors need {} factor entries and {f} cardinalities, got {} and {}",
                n * f,
                factors.len(),
                cardinalities.len()
            ));
        }
        for (j, &v) in factors.iter().enumerate() {
            if v >= cardinalities[j % f] {
                return Err(dim_err!(
                    "factor '{}' of image {} is {v}, cardinality {}",
                    factor_names[j % f],
                    j / f,
                    cardinalities[j % f]
                ));
            }
        }
        Ok(Self {
            images,
            factors,
            factor_names,
            cardinalities,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_factors(&self) -> usize {
        self.factor_names.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn factors_of(&self, i: usize) -> &[usize] {
        let f = self.num_factors();
        &self.factors[i * f..(i + 1) * f]
    }

    pub fn subset(&self, rows: &[usize]) -> Result<FactorDataset> {
        Ok(FactorDataset {
            images: self.images.select_rows(rows)?,
            factors: rows.iter().flat_map(|&i| self.factors_of(i).to_vec()).collect(),
            factor_names: self.factor_names.clone(),
            cardinalities: self.cardinalities.clone(),
        })
    }
}

/// Fully saturated color with hue `h ∈ [0, 1)`.
pub fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Top-left corner of grid cell `(cx, cy)` for an 8-px square.
pub fn square_origin(cx: usize, cy: usize, n_x: usize, n_y: usize, image_size: usize) -> (usize, usize) {
    let (cw, ch) = (image_size / n_x, image_size / n_y);
    (cy * ch + (ch - SQUARE_SIDE) / 2, cx * cw + (cw - SQUARE_SIDE) / 2)
}

/// One image per (color, x, y) combination: a square of hue `color/n_colors`
/// on a uniform gray background drawn from `[0, 0.2]`.
pub fn generate_color_position(n_colors: usize, n_x: usize, n_y: usize, image_size: usize, seed: u64) -> Result<FactorDataset> {
    if n_colors == 0 || n_colors > PALETTE_SIZE {
        return Err(config_err!("n_colors must be in 1..={PALETTE_SIZE}, got {n_colors}"));
    }
    if n_x == 0 || n_y == 0 || image_size / n_x < SQUARE_SIDE || image_size / n_y < SQUARE_SIDE {
        return Err(config_err!(
            "a {n_x}×{n_y} grid of {SQUARE_SIDE}-px squares does not fit a {image_size}-px image"
        ));
    }
    let mut rng = RngState::new(seed);
    let n = n_colors * n_x * n_y;
    let plane = image_size * image_size;
    let mut data = vec![0.0f32; n * 3 * plane];
    let mut factors = Vec::with_capacity(n * 3);
    for (idx, img) in data.chunks_mut(3 * plane).enumerate() {
        let color = idx / (n_x * n_y);
        let cx = (idx / n_y) % n_x;
        let cy = idx % n_y;
        let bg = rng.uniform_range(0.0, MAX_BACKGROUND) as f32;
        img.fill(bg);
        let rgb = hue_to_rgb(color as f64 / n_colors as f64);
        let (top, left) = square_origin(cx, cy, n_x, n_y, image_size);
        for (c, v) in rgb.iter().enumerate() {
            for y in top..top + SQUARE_SIDE {
                let row = c * plane + y * image_size;
                img[row + left..row + left + SQUARE_SIDE].fill(*v as f32);
            }
        }
        factors.extend([color, cx, cy]);
    }
    let images = Tensor::new(&[n, 3, image_size, image_size], data)?;
    FactorDataset::new(
        images,
        factors,
        vec!["color".into(), "x".into(), "y".into()],
        vec![n_colors, n_x, n_y],
    )
}

/// Repeats the dataset `times` times. Copies after the first get per-image
/// noise and smoothing, each applied with probability ½.
pub fn oversample(ds: &FactorDataset, times: usize, seed: u64) -> Result<FactorDataset> {
    if times == 0 {
        return Err(config_err!("oversample factor must be at least 1"));
    }
    let mut rng = RngState::new(seed);
    let ranges = TransformRanges::default();
    let mut parts = Vec::with_capacity(times * ds.len());
    for copy in 0..times {
        for i in 0..ds.len() {
            let mut img = ds.images.row(i)?;
            if copy > 0 {
                for which in [PositiveTransform::GaussianNoise, PositiveTransform::GaussianSmooth] {
                    if rng.bernoulli(0.5) {
                        img = Applied::sample_positive(which, &ranges, &mut rng).apply(&img)?;
                    }
                }
            }
            parts.push(img);
        }
    }
    let factors = (0..times).flat_map(|_| ds.factors.iter().copied()).collect();
    FactorDataset::new(
        Tensor::concat_rows(&parts)?,
        factors,
        ds.factor_names.clone(),
        ds.cardinalities.clone(),
    )
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(DSCT_MAGIC);
    out.extend_from_slice(&DSCT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_F32);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little-endian cursor that reports running out of bytes as corruption.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corruption(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// `ndim` followed by that many positive dims; the element count is
    /// checked against the bytes actually left.
    pub fn shape(&mut self, what: &str) -> Result<Vec<usize>> {
        let ndim = self.u32(what)?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Corruption(format!("{what}: implausible rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let d = self.u32(what)?;
            if d == 0 {
                return Err(Error::Corruption(format!("{what}: zero-sized dimension")));
            }
            dims.push(d as usize);
        }
        Ok(dims)
    }

    pub fn f32s(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corruption(format!("{what}: dims {shape:?} overflow")))?;
        if count > self.remaining() {
            return Err(Error::Corruption(format!(
                "{what}: dims {shape:?} need {count} payload bytes, {} left",
                self.remaining()
            )));
        }
        let data = self
            .take(count, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic").map_err(|_| Error::Format("file shorter than the DSCT magic".into()))?;
    if magic != DSCT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected DSCT")));
    }
    let version = r.u32("version")?;
    if version != DSCT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: DSCT_VERSION,
        });
    }
    let shape = r.shape("tensor header")?;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    let t = r.f32s(&shape, "tensor payload")?;
    if r.remaining() != 0 {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after the payload",
            r.remaining()
        )));
    }
    Ok(t)
}

pub fn write_tensor_file(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_dataset(ds: &FactorDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor_file(&ds.images, &dir.join("images.dsct"))?;
    let factors = Tensor::new(
        &[ds.len(), ds.num_factors()],
        ds.factors.iter().map(|&v| v as f32).collect(),
    )?;
    write_tensor_file(&factors, &dir.join("factors.dsct"))?;
    let meta: String = ds
        .factor_names
        .iter()
        .zip(&ds.cardinalities)
        .map(|(n, c)| format!("{n}:{c}\n"))
        .collect();
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<FactorDataset> {
    let images = read_tensor_file(&dir.join("images.dsct"))?;
    let factors = read_tensor_file(&dir.join("factors.dsct"))?;
    let path = dir.join("meta.txt");
    let meta = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut names = Vec::new();
    let mut cards = Vec::new();
    for (i, line) in meta.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, card) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("meta.txt line {}: expected name:cardinality", i + 1)))?;
        let card = card
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("meta.txt line {}: bad cardinality '{card}'", i + 1)))?;
        names.push(name.trim().to_string());
        cards.push(card);
    }
    let fs_shape = factors.shape();
    if fs_shape.len() != 2 || fs_shape[0] != images.shape()[0] || fs_shape[1] != names.len() {
        return Err(Error::Corruption(format!(
            "factors.dsct shape {fs_shape:?} does not match {} images and {} meta entries",
            images.shape()[0],
            names.len()
        )));
    }
    let idx = factors
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Corruption(format!("non-integer factor value {v}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    FactorDataset::new(images, idx, names, cards)
        .map_err(|e| Error::Corruption(e.to_string()))
}

/// Shuffled index batches of size `batch_size`; the incomplete tail is dropped.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(config_err!("batch size {batch_size} must be in 1..={n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(shuffle_seed).shuffle(&mut order);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    /// Row-major `B×F`.
    pub factors: Vec<usize>,
}

pub fn iterate_batches(
    ds: &FactorDataset,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
    let batches = batch_indices(ds.len(), batch_size, shuffle_seed)?;
    Ok(batches.into_iter().map(move |indices| {
        let sub = ds.subset(&indices)?;
        Ok(Batch {
            indices,
            images: sub.images,
            factors: sub.factors,
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn enumeration_and_determinism() {
        let ds = generate_color_position(8, 4, 4, 32, 7).unwrap();
        assert_eq!(ds.len(), 128);
        assert_eq!(ds.images.shape(), &[128, 3, 32, 32]);
        let combos: HashSet<&[usize]> = (0..128).map(|i| ds.factors_of(i)).collect();
        assert_eq!(combos.len(), 128);
        assert_eq!(ds, generate_color_position(8, 4, 4, 32, 7).unwrap());
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn red_square_in_top_left_cell() {
        let ds = generate_color_position(8, 4, 4, 64, 1).unwrap();
        let i = (0..ds.len()).find(|&i| ds.factors_of(i) == [0, 0, 0]).unwrap();
        let img = ds.images.row(i).unwrap();
        let (top, left) = square_origin(0, 0, 4, 4, 64);
        assert_eq!((top, left), (4, 4));
        let px = |c: usize, y: usize, x: usize| img.data()[(c * 64 + y) * 64 + x];
        assert_eq!([px(0, 8, 8), px(1, 8, 8), px(2, 8, 8)], [1.0, 0.0, 0.0]);
        assert!(px(0, 40, 40) <= MAX_BACKGROUND as f32);
    }

    #[test]
    fn background_differs_from_square_by_at_least_point_two() {
        let ds = generate_color_position(12, 4, 4, 32, 3).unwrap();
        for i in 0..ds.len() {
            let f = ds.factors_of(i);
            let img = ds.images.row(i).unwrap();
            let (top, left) = square_origin(f[1], f[2], 4, 4, 32);
            let corner = if top == 0 && left == 0 { 1023 } else { 0 };
            let bg: Vec<f32> = (0..3).map(|c| img.data()[c * 1024 + corner]).collect();
            let fg: Vec<f32> = (0..3).map(|c| img.data()[c * 1024 + top * 32 + left]).collect();
            let linf = bg.iter().zip(&fg).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(linf >= 0.2);
        }
    }

    #[test]
    fn hue_palette() {
        assert_eq!(hue_to_rgb(0.0), [1.0, 0.0, 0.0]);
        assert_eq!(hue_to_rgb(1.0 / 3.0), [0.0, 1.0, 0.0]);
        assert_eq!(hue_to_rgb(2.0 / 3.0), [0.0, 0.0, 1.0]);
        assert_eq!(hue_to_rgb(0.5), [0.0, 1.0, 1.0]);
    }

    #[test]
    fn overfull_grid_is_a_config_error() {
        assert!(matches!(generate_color_position(8, 5, 4, 32, 0), Err(Error::Config(_))));
        assert!(matches!(generate_color_position(13, 4, 4, 32, 0), Err(Error::Config(_))));
    }

    #[test]
    fn oversampling_keeps_factors_aligned() {
        let ds = generate_color_position(2, 2, 2, 32, 4).unwrap();
        let big = oversample(&ds, 3, 5).unwrap();
        assert_eq!(big.len(), 24);
        for i in 0..24 {
            assert_eq!(big.factors_of(i), ds.factors_of(i % 8));
        }
        assert_eq!(big.images.row(3).unwrap(), ds.images.row(3).unwrap());
        assert!(big.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(big, oversample(&ds, 3, 5).unwrap());
    }

    #[test]
    fn tensor_file_round_trip() {
        let mut rng = RngState::new(9);
        let t = Tensor::from_fn(&[10, 3, 64, 64], |_| rng.normal() as f32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dsct");
        write_tensor_file(&t, &path).unwrap();
        let back = read_tensor_file(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tensor_file_error_kinds() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f32);
        let good = encode_tensor(&t);
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"ABCD");
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_tensor(&v2), Err(Error::Version { found: 2, .. })));
        let mut dtype = good.clone();
        dtype[20] = 1;
        assert!(matches!(decode_tensor(&dtype), Err(Error::Format(_))));
        let mut dims = good.clone();
        dims[12] = 3;
        assert!(matches!(decode_tensor(&dims), Err(Error::Corruption(_))));
        assert!(matches!(decode_tensor(&good[..good.len() - 1]), Err(Error::Corruption(_))));
        assert!(matches!(
            read_tensor_file(Path::new("/nonexistent/x.dsct")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn fuzzed_headers_never_panic() {
        let good = encode_tensor(&Tensor::from_fn(&[4, 5], |i| i as f32));
        let mut rng = RngState::new(11);
        for _ in 0..1000 {
            let mut b = good.clone();
            for _ in 0..1 + rng.below(4) {
                let pos = rng.below(21);
                b[pos] = rng.next_u64() as u8;
            }
            if rng.bernoulli(0.3) {
                b.truncate(rng.below(b.len()));
            }
            let _ = decode_tensor(&b);
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let ds = generate_color_position(3, 2, 2, 32, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("meta.txt")).unwrap(),
            "color:3\nx:2\ny:2\n"
        );
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn batching() {
        let b = batch_indices(128, 64, 3).unwrap();
        assert_eq!(b.len(), 2);
        let all: HashSet<usize> = b.iter().flatten().copied().collect();
        assert_eq!(all.len(), 128);
        assert_eq!(b, batch_indices(128, 64, 3).unwrap());
        assert_eq!(batch_indices(130, 64, 3).unwrap().len(), 2);
        assert!(matches!(batch_indices(10, 11, 0), Err(Error::Config(_))));

        let ds = generate_color_position(2, 2, 2, 32, 0).unwrap();
        let batches: Vec<Batch> = iterate_batches(&ds, 3, 1).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(batches.len(), 2);
        for batch in &batches {
            for (r, &i) in batch.indices.iter().enumerate() {
                assert_eq!(batch.images.row(r).unwrap(), ds.images.row(i).unwrap());
                assert_eq!(&batch.factors[r * 3..r * 3 + 3], ds.factors_of(i));
            }
        }
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_give_typed_errors(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let mut framed = b"DSCT".to_vec();
            framed.extend_from_slice(&bytes);
            let _ = decode_tensor(&bytes);
            let _ = decode_tensor(&framed);
        }
    }
}
