//! Dense feature images and the linear algebra around teacher features:
//! PCA reduction and its inverse, per-pixel normalization, sliding-window
//! patch grids, text-query heatmaps and PCA part segmentation.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Teacher,
    Student,
    PcaReduced,
}

/// `height × width × dim` values, row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub provenance: Provenance,
}

impl FeatureImage {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("feature dimension must be at least 1"));
        }
        if data.len() != height * width * dim {
            return Err(Error::domain(format!(
                "feature buffer has {} values, expected {height}x{width}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("feature image contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
            provenance,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize, provenance: Provenance) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
            provenance,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Pixel by flat index `y * width + x`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Unit-length copy; the zero vector stays zero and reports `false`.
pub fn normalized(v: &[f64]) -> (Vec<f64>, bool) {
    let n = l2_norm(v);
    if n == 0.0 {
        (v.to_vec(), false)
    } else {
        (v.iter().map(|x| x / n).collect(), true)
    }
}

/// Per-pixel L2 normalization. The returned flags mark pixels that were
/// zero vectors and so stayed zero.
pub fn normalize(f: &FeatureImage) -> (FeatureImage, Vec<bool>) {
    let mut out = f.clone();
    let zero = (0..f.pixels())
        .map(|i| {
            let (v, ok) = normalized(f.pixel(i));
            out.pixel_mut(i).copy_from_slice(&v);
            !ok
        })
        .collect();
    (out, zero)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub d_in: usize,
    pub d_out: usize,
    pub mean: Vec<f64>,
    /// `d_out × d_in`, orthonormal rows, strongest direction first.
    pub basis: Vec<f64>,
    pub explained: Vec<f64>,
}

impl PcaModel {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.basis[r * self.d_in..(r + 1) * self.d_in]
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        (0..self.d_out)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(v.iter().zip(&self.mean))
                    .map(|(b, (x, m))| b * (x - m))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (r, zr) in z.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.row(r)) {
                *o += zr * b;
            }
        }
        out
    }

    /// The leading `k` components of this model as a model of its own.
    pub fn truncated(&self, k: usize) -> Result<PcaModel> {
        if k > self.d_out {
            return Err(Error::domain(format!(
                "cannot keep {k} of {} components",
                self.d_out
            )));
        }
        Ok(PcaModel {
            d_in: self.d_in,
            d_out: k,
            mean: self.mean.clone(),
            basis: self.basis[..k * self.d_in].to_vec(),
            explained: self.explained[..k].to_vec(),
        })
    }
}

/// Principal components of `samples` (row-major `n × d_in`).
///
/// The basis comes from the eigenvectors of the sample covariance, sorted by
/// decreasing eigenvalue; each row is sign-fixed so its largest-magnitude
/// entry is positive.
pub fn fit_pca(samples: &[f64], d_in: usize, d_out: usize) -> Result<PcaModel> {
    if d_in == 0 || !samples.len().is_multiple_of(d_in) {
        return Err(Error::domain("sample buffer is not a whole number of rows"));
    }
    if d_out > d_in {
        return Err(Error::domain(format!(
            "PCA output dim {d_out} exceeds input dim {d_in}"
        )));
    }
    let n = samples.len() / d_in;
    if n < 2 {
        return Err(Error::domain("PCA needs at least two samples"));
    }
    let mut mean = vec![0.0; d_in];
    for row in samples.chunks_exact(d_in) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d_in, d_in);
    let mut centred = vec![0.0; d_in];
    for row in samples.chunks_exact(d_in) {
        for ((c, v), m) in centred.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d_in {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d_in {
                cov[(i, j)] += ci * centred[j];
            }
        }
    }
    for i in 0..d_in {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut basis = Vec::with_capacity(d_out * d_in);
    let mut explained = Vec::with_capacity(d_out);
    for &k in order.iter().take(d_out) {
        let col = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 1..d_in {
            if col[i].abs() > col[pivot].abs() + 1e-12 {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.extend(col.iter().map(|v| v * sign));
        explained.push(if total > 0.0 {
            eig.eigenvalues[k].max(0.0) / total
        } else {
            0.0
        });
    }
    Ok(PcaModel {
        d_in,
        d_out,
        mean,
        basis,
        explained,
    })
}

/// Fits one model over every pixel of every image.
pub fn fit_pca_images(images: &[&FeatureImage], d_out: usize) -> Result<PcaModel> {
    let d_in = images
        .first()
        .map(|f| f.dim)
        .ok_or_else(|| Error::domain("no feature images to fit"))?;
    if images.iter().any(|f| f.dim != d_in) {
        return Err(Error::domain("feature images disagree on dimension"));
    }
    let mut samples = Vec::new();
    for f in images {
        samples.extend_from_slice(&f.data);
    }
    fit_pca(&samples, d_in, d_out)
}

pub fn apply_pca(pca: &PcaModel, f: &FeatureImage) -> Result<FeatureImage> {
    if f.dim != pca.d_in {
        return Err(Error::domain(format!(
            "feature dim {} does not match PCA input dim {}",
            f.dim, pca.d_in
        )));
    }
    let mut data = Vec::with_capacity(f.pixels() * pca.d_out);
    for i in 0..f.pixels() {
        data.extend(pca.project(f.pixel(i)));
    }
    FeatureImage::new(f.height, f.width, pca.d_out, data, Provenance::PcaReduced)
}

pub fn invert_pca(pca: &PcaModel, f: &FeatureImage) -> Result<FeatureImage> {
    if f.dim != pca.d_out {
        return Err(Error::domain(format!(
            "feature dim {} does not match PCA output dim {}",
            f.dim, pca.d_out
        )));
    }
    let mut data = Vec::with_capacity(f.pixels() * pca.d_in);
    for i in 0..f.pixels() {
        data.extend(pca.reconstruct(f.pixel(i)));
    }
    FeatureImage::new(f.height, f.width, pca.d_in, data, f.provenance)
}

pub fn patch_grid_dims(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    if patch == 0 || stride == 0 {
        return Err(Error::domain("patch and stride must be positive"));
    }
    if height < patch || width < patch {
        return Err(Error::domain(format!(
            "image {height}x{width} is smaller than the {patch}px patch"
        )));
    }
    Ok(((height - patch) / stride + 1, (width - patch) / stride + 1))
}

/// Sliding-window embedding: grid cell `(i, j)` holds `embed` of the
/// `patch × patch` window whose top-left corner is `(j·stride, i·stride)`.
/// The window is handed over as a row-major `patch × patch × channels` buffer.
pub fn patch_grid_features(
    image: &FeatureImage,
    patch: usize,
    stride: usize,
    embed: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<FeatureImage> {
    let (gh, gw) = patch_grid_dims(image.height, image.width, patch, stride)?;
    let c = image.dim;
    let mut window = vec![0.0; patch * patch * c];
    let mut data = Vec::new();
    let mut dim = None;
    for i in 0..gh {
        for j in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    let src = image.at(j * stride + x, i * stride + y);
                    window[(y * patch + x) * c..(y * patch + x + 1) * c].copy_from_slice(src);
                }
            }
            let e = embed(&window);
            match dim {
                None => dim = Some(e.len()),
                Some(d) if d != e.len() => {
                    return Err(Error::domain("patch embedding changed dimension"))
                }
                _ => {}
            }
            data.extend(e);
        }
    }
    FeatureImage::new(gh, gw, dim.unwrap_or(0), data, Provenance::Teacher)
}

/// Bilinear upsampling of a patch grid back to `height × width`, treating
/// each cell as located at its window centre.
pub fn upsample_patch_grid(
    grid: &FeatureImage,
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> FeatureImage {
    let mut out = FeatureImage::zeros(height, width, grid.dim, grid.provenance);
    let half = patch as f64 / 2.0;
    let coord = |p: usize, cells: usize| -> (usize, usize, f64) {
        let u = ((p as f64 + 0.5 - half) / stride as f64).clamp(0.0, (cells - 1) as f64);
        let u0 = u.floor() as usize;
        let u1 = (u0 + 1).min(cells - 1);
        (u0, u1, u - u0 as f64)
    };
    for y in 0..height {
        let (y0, y1, ay) = coord(y, grid.height);
        for x in 0..width {
            let (x0, x1, ax) = coord(x, grid.width);
            let dst = out.pixel_mut(y * width + x);
            for (cx, cy, w) in [
                (x0, y0, (1.0 - ax) * (1.0 - ay)),
                (x1, y0, ax * (1.0 - ay)),
                (x0, y1, (1.0 - ax) * ay),
                (x1, y1, ax * ay),
            ] {
                for (o, v) in dst.iter_mut().zip(grid.at(cx, cy)) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

/// Cosine similarity of every pixel against a text embedding projected into
/// the feature space with the scene's PCA.
pub fn text_query_heatmap(f: &FeatureImage, text: &[f64], pca: &PcaModel) -> Result<Vec<f64>> {
    if text.len() != pca.d_in {
        return Err(Error::domain(format!(
            "text embedding has dim {}, PCA expects {}",
            text.len(),
            pca.d_in
        )));
    }
    if f.dim != pca.d_out {
        return Err(Error::domain(format!(
            "feature dim {} does not match PCA output dim {}",
            f.dim, pca.d_out
        )));
    }
    if l2_norm(text) == 0.0 {
        return Err(Error::domain("text embedding is the zero vector"));
    }
    let (query, ok) = normalized(&pca.project(text));
    if !ok {
        return Err(Error::domain("text embedding projects to zero"));
    }
    Ok((0..f.pixels())
        .map(|i| cosine(f.pixel(i), &query).clamp(-1.0, 1.0))
        .collect())
}

/// Otsu's threshold over a 256-bin histogram of `values`.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi <= lo {
        return lo;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, c)| i as f64 * *c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += *c as f64;
        sum0 += i as f64 * *c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    lo + (best_bin + 1) as f64 * width
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegeneratePolicy {
    Error,
    AllForeground,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartSegmentation {
    pub threshold: f64,
    /// One mask per input image, `true` = background.
    pub background: Vec<Vec<bool>>,
    /// One `pixels × 3` colouring per image in `[0, 1]`; background is 0.
    pub colours: Vec<Vec<f64>>,
}

/// PCA part segmentation: the first principal component (fit jointly over
/// all images) separates background below `threshold` (Otsu when `None`);
/// a second PCA on the foreground pixels gives the part colouring.
pub fn part_seg_pca(
    images: &[&FeatureImage],
    threshold: Option<f64>,
    policy: DegeneratePolicy,
) -> Result<PartSegmentation> {
    if images.iter().any(|f| f.dim < 3) {
        return Err(Error::domain(
            "part segmentation needs at least 3 feature channels",
        ));
    }
    let pca = fit_pca_images(images, 3)?;
    let scores: Vec<Vec<[f64; 3]>> = images
        .iter()
        .map(|f| {
            (0..f.pixels())
                .map(|i| {
                    let p = pca.project(f.pixel(i));
                    [p[0], p[1], p[2]]
                })
                .collect()
        })
        .collect();
    let first: Vec<f64> = scores.iter().flatten().map(|s| s[0]).collect();
    let spread = first.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if spread < 1e-12 {
        return match policy {
            DegeneratePolicy::Error => Err(Error::domain("features carry no variance")),
            DegeneratePolicy::AllForeground => Ok(PartSegmentation {
                threshold: threshold.unwrap_or(0.0),
                background: images.iter().map(|f| vec![false; f.pixels()]).collect(),
                colours: images.iter().map(|f| vec![0.5; f.pixels() * 3]).collect(),
            }),
        };
    }
    let thr = threshold.unwrap_or_else(|| otsu_threshold(&first));
    let background: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| s.iter().map(|p| p[0] < thr).collect())
        .collect();
    let mut fg = Vec::new();
    let d = images[0].dim;
    for (f, bg) in images.iter().zip(&background) {
        for (i, is_bg) in bg.iter().enumerate() {
            if !is_bg {
                fg.extend_from_slice(f.pixel(i));
            }
        }
    }
    if fg.is_empty() {
        return Err(Error::domain(
            "no foreground pixels left after thresholding",
        ));
    }
    let mut colours: Vec<Vec<f64>> = images.iter().map(|f| vec![0.0; f.pixels() * 3]).collect();
    if fg.len() / d < 2 {
        for (c, bg) in colours.iter_mut().zip(&background) {
            for (i, is_bg) in bg.iter().enumerate() {
                if !is_bg {
                    c[i * 3..i * 3 + 3].copy_from_slice(&[0.5; 3]);
                }
            }
        }
        return Ok(PartSegmentation {
            threshold: thr,
            background,
            colours,
        });
    }
    let fg_pca = fit_pca(&fg, d, 3)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut projected: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    for (f, bg) in images.iter().zip(&background) {
        let mut per = Vec::with_capacity(f.pixels());
        for (i, is_bg) in bg.iter().enumerate() {
            if *is_bg {
                per.push(None);
                continue;
            }
            let p = fg_pca.project(f.pixel(i));
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
            per.push(Some(p));
        }
        projected.push(per);
    }
    for (c, per) in colours.iter_mut().zip(&projected) {
        for (i, p) in per.iter().enumerate() {
            if let Some(p) = p {
                for ch in 0..3 {
                    let range = hi[ch] - lo[ch];
                    c[i * 3 + ch] = if range > 0.0 {
                        (p[ch] - lo[ch]) / range
                    } else {
                        0.5
                    };
                }
            }
        }
    }
    Ok(PartSegmentation {
        threshold: thr,
        background,
        colours,
    })
}

const FEAT_MAGIC: &[u8; 4] = b"GSNF";
const FEAT_VERSION: u32 = 1;
const PCA_MAGIC: &[u8; 4] = b"GSNP";
const PCA_VERSION: u32 = 1;

pub fn encode_feat(f: &FeatureImage) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + f.data.len() * 4);
    buf.extend_from_slice(FEAT_MAGIC);
    for v in [FEAT_VERSION, f.height as u32, f.width as u32, f.dim as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &f.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_feat(bytes: &[u8], path: &Path, provenance: Provenance) -> Result<FeatureImage> {
    if bytes.len() < 20 || &bytes[..4] != FEAT_MAGIC {
        return Err(Error::format(path, "missing GSNF magic"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, h, w, d) = (word(0), word(1), word(2), word(3));
    if version as u32 != FEAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported feature version {version}"),
        ));
    }
    let n = h * w * d;
    if bytes.len() != 20 + n * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes for {h}x{w}x{d}, found {}",
                20 + n * 4,
                bytes.len()
            ),
        ));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureImage::new(h, w, d, data, provenance).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_feat(f: &FeatureImage, path: &Path) -> Result<()> {
    fs::write(path, encode_feat(f)).map_err(|e| Error::io(path, e))
}

pub fn read_feat(path: &Path, provenance: Provenance) -> Result<FeatureImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feat(&bytes, path, provenance)
}

pub fn encode_pca(p: &PcaModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PCA_MAGIC);
    for v in [PCA_VERSION, p.d_in as u32, p.d_out as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in p.mean.iter().chain(&p.basis).chain(&p.explained) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_pca(bytes: &[u8], path: &Path) -> Result<PcaModel> {
    if bytes.len() < 16 || &bytes[..4] != PCA_MAGIC {
        return Err(Error::format(path, "missing GSNP magic"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, d_in, d_out) = (word(0), word(1), word(2));
    if version as u32 != PCA_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported PCA version {version}"),
        ));
    }
    let n = d_in + d_out * d_in + d_out;
    if bytes.len() != 16 + n * 8 {
        return Err(Error::format(
            path,
            "PCA file length does not match its header",
        ));
    }
    let vals: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(PcaModel {
        d_in,
        d_out,
        mean: vals[..d_in].to_vec(),
        basis: vals[d_in..d_in + d_out * d_in].to_vec(),
        explained: vals[d_in + d_out * d_in..].to_vec(),
    })
}

pub fn write_pca(p: &PcaModel, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pca(p)).map_err(|e| Error::io(path, e))
}

pub fn read_pca(path: &Path) -> Result<PcaModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pca(&bytes, path)
}
