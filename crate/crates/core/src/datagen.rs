//! Controlled multi-domain dataset generation and dataset I/O.
//!
//! Two generators:
//!
//! - [`gen_biased_domains`]: feature vectors with a shared class-informative
//!   block plus one bias block per training domain. A domain's own bias block
//!   correlates with the label inside that domain and is pure noise
//!   elsewhere; the extra "external" domain carries a configurable (possibly
//!   reversed) correlation on every bias block. Classifiers that lean on the
//!   bias blocks look great internally and fall over externally.
//! - [`gen_rotated`]: rotated-glyph domains (one rotation angle per domain),
//!   either from procedurally rendered 16x16 glyphs or from user-supplied
//!   IDX image files.
//!
//! Datasets round-trip through a JSON manifest plus flat little-endian f64
//! matrix files.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

/// Mix a purpose tag into a base seed (FNV-1a over the tag bytes). Distinct
/// tags give independent deterministic streams, so consumers of one stream
/// do not shift another consumer's draws.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    seed ^ h
}

/// Derive an independent RNG stream from a base seed and a purpose tag.
pub fn seed_stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Contiguous row ranges for the three splits; together they partition
/// `0..n_rows`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl SplitRanges {
    /// Roughly 7:1:2, within one sample of exact rounding.
    pub fn ratio_7_1_2(n: usize) -> Self {
        let n_train = (0.7 * n as f64).round() as usize;
        let n_val = (0.1 * n as f64).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        SplitRanges {
            train: (0, n_train),
            val: (n_train, n_train + n_val),
            test: (n_train + n_val, n),
        }
    }

    pub fn range(&self, s: Split) -> Range<usize> {
        let (a, b) = match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        };
        a..b
    }

    pub fn n_rows(&self) -> usize {
        self.test.1
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
        let ok = self.train.0 == 0
            && self.train.1 >= self.train.0
            && self.train.1 == self.val.0
            && self.val.1 >= self.val.0
            && self.val.1 == self.test.0
            && self.test.1 >= self.test.0
            && self.test.1 == n_rows;
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "split ranges {:?} do not partition 0..{} contiguously",
                self, n_rows
            )))
        }
    }
}

/// Where a dataset came from; stored verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub params: serde_json::Value,
}

/// One domain's worth of data: features, labels, split ranges, entity ids.
///
/// Rows are ordered train, val, test. Rows sharing an entity id always share
/// a split (and, for generators that reuse entities across domains, the same
/// split in every domain), so nothing leaks between train and test.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    /// n x d feature matrix.
    pub x: Tensor,
    /// n x L label matrix (one-hot or multi-hot).
    pub y: Tensor,
    pub splits: SplitRanges,
    pub entity_ids: Vec<u64>,
    pub provenance: Provenance,
}

impl DomainDataset {
    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn n_labels(&self) -> usize {
        self.y.cols()
    }

    pub fn split_x(&self, s: Split) -> Tensor {
        let r = self.splits.range(s);
        self.x.slice_rows(r.start, r.end)
    }

    pub fn split_y(&self, s: Split) -> Tensor {
        let r = self.splits.range(s);
        self.y.slice_rows(r.start, r.end)
    }

    pub fn split_entities(&self, s: Split) -> &[u64] {
        let r = self.splits.range(s);
        &self.entity_ids[r]
    }

    fn validate(&self) -> Result<()> {
        self.splits.validate(self.n_rows())?;
        if self.y.rows() != self.x.rows() {
            return Err(Error::Format(format!(
                "labels have {} rows, features {}",
                self.y.rows(),
                self.x.rows()
            )));
        }
        if self.entity_ids.len() != self.n_rows() {
            return Err(Error::Format(format!(
                "{} entity ids for {} rows",
                self.entity_ids.len(),
                self.n_rows()
            )));
        }
        self.x.ensure_finite("dataset features")?;
        self.y.ensure_finite("dataset labels")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Confounded-feature generator

/// Spec for the confounded multi-domain generator. Produces `n_internal + 1`
/// domains; the last one is the "external" domain whose bias blocks carry
/// `rho_external` on every slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundSpec {
    pub n_internal: usize,
    pub d_common: usize,
    pub d_bias: usize,
    pub n_classes: usize,
    /// Signal strength of the class-direction displacement.
    pub mu: f64,
    /// Relative strength of the common block (common displacement is
    /// `common_scale * mu`). Below 1, the per-domain bias slots carry more
    /// signal than the stable features, which is what makes them tempting
    /// shortcuts.
    #[serde(default = "default_common_scale")]
    pub common_scale: f64,
    /// Own-slot label correlation per internal domain, in [-1, 1].
    pub rho: Vec<f64>,
    /// Correlation applied to every bias slot of the external domain
    /// (0 = pure noise, negative = reversed).
    pub rho_external: f64,
    pub sigma: f64,
    pub samples_per_domain: usize,
}

impl ConfoundSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_internal == 0 || self.d_common == 0 || self.d_bias == 0 {
            return Err(Error::Config("confound spec dims must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.rho.len() != self.n_internal {
            return Err(Error::Config(format!(
                "{} rho values for {} internal domains",
                self.rho.len(),
                self.n_internal
            )));
        }
        for &r in self.rho.iter().chain(std::iter::once(&self.rho_external)) {
            if !(-1.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("rho {r} outside [-1, 1]")));
            }
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.common_scale < 0.0 || !self.common_scale.is_finite() {
            return Err(Error::Config(format!(
                "common_scale must be >= 0, got {}",
                self.common_scale
            )));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::Config("samples_per_domain must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.d_common + self.n_internal * self.d_bias
    }
}

fn default_common_scale() -> f64 {
    1.0
}

/// Unit direction per class, drawn once per (seed, block).
fn class_directions(rng: &mut ChaCha8Rng, n_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|_| {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    return v.into_iter().map(|x| x / norm).collect();
                }
            }
        })
        .collect()
}

/// Generate `n_internal + 1` confounded domains (external last).
pub fn gen_biased_domains(spec: &ConfoundSpec, seed: u64) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let n_domains = spec.n_internal + 1;
    let d = spec.n_features();
    let n = spec.samples_per_domain;

    let mut dir_rng = seed_stream(seed, "confound-dirs");
    let common_dirs = class_directions(&mut dir_rng, spec.n_classes, spec.d_common);
    let slot_dirs: Vec<Vec<Vec<f64>>> = (0..spec.n_internal)
        .map(|_| class_directions(&mut dir_rng, spec.n_classes, spec.d_bias))
        .collect();

    let params = serde_json::to_value(spec)?;
    let mut out = Vec::with_capacity(n_domains);
    for dom in 0..n_domains {
        let external = dom == spec.n_internal;
        let mut rng = seed_stream(seed, &format!("confound-domain-{dom}"));
        let mut x = Vec::with_capacity(n * d);
        let mut y = vec![0.0; n * spec.n_classes];
        for row in 0..n {
            let class = rng.gen_range(0..spec.n_classes);
            y[row * spec.n_classes + class] = 1.0;
            for k in 0..spec.d_common {
                let noise: f64 = StandardNormal.sample(&mut rng);
                x.push(spec.common_scale * spec.mu * common_dirs[class][k] + spec.sigma * noise);
            }
            for slot in 0..spec.n_internal {
                let rho = if external {
                    spec.rho_external
                } else if slot == dom {
                    spec.rho[dom]
                } else {
                    0.0
                };
                for k in 0..spec.d_bias {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    x.push(rho * spec.mu * slot_dirs[slot][class][k] + spec.sigma * noise);
                }
            }
        }
        let name = if external { "ext".to_string() } else { format!("dom{dom}") };
        let ds = DomainDataset {
            domain_id: dom,
            name,
            x: Tensor::new(vec![n, d], x)?,
            y: Tensor::new(vec![n, spec.n_classes], y)?,
            splits: SplitRanges::ratio_7_1_2(n),
            entity_ids: (0..n as u64).map(|r| ((dom as u64) << 32) | r).collect(),
            provenance: Provenance {
                generator: "confounded".into(),
                seed,
                params: params.clone(),
            },
        };
        ds.validate()?;
        out.push(ds);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rotated-glyph generator

/// Image rotation by `deg` (visually counterclockwise, row 0 at top) around
/// the pixel-grid center, with bilinear interpolation. Angles that are exact
/// multiples of 90 degrees take a lossless index-permutation path.
pub fn rotate_image(src: &[f64], w: usize, h: usize, deg: f64) -> Vec<f64> {
    assert_eq!(src.len(), w * h, "image buffer does not match dims");
    let norm = deg.rem_euclid(360.0);
    let quarter = (norm / 90.0).round();
    if (norm - quarter * 90.0).abs() < 1e-9 && w == h {
        let n = w;
        let k = (quarter as usize) % 4;
        if k == 0 {
            return src.to_vec();
        }
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (u, v) = match k {
                    1 => (n - 1 - y, x),
                    2 => (n - 1 - x, n - 1 - y),
                    _ => (y, n - 1 - x),
                };
                out[y * n + x] = src[v * n + u];
            }
        }
        return out;
    }

    let theta = norm.to_radians();
    let (s, c) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse map of a visual-CCW rotation in (x right, y down) coords
            let u = c * dx - s * dy + cx;
            let v = s * dx + c * dy + cy;
            out[y * w + x] = bilinear(src, w, h, u, v);
        }
    }
    out
}

fn bilinear(src: &[f64], w: usize, h: usize, u: f64, v: f64) -> f64 {
    if u < -1.0 || v < -1.0 || u > w as f64 || v > h as f64 {
        return 0.0;
    }
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let sample = |ix: i64, iy: i64| -> f64 {
        if ix < 0 || iy < 0 || ix >= w as i64 || iy >= h as i64 {
            0.0
        } else {
            src[iy as usize * w + ix as usize]
        }
    };
    let (i0, j0) = (u0 as i64, v0 as i64);
    sample(i0, j0) * (1.0 - fu) * (1.0 - fv)
        + sample(i0 + 1, j0) * fu * (1.0 - fv)
        + sample(i0, j0 + 1) * (1.0 - fu) * fv
        + sample(i0 + 1, j0 + 1) * fu * fv
}

/// Glyph classes available to the procedural renderer.
pub const GLYPH_CLASSES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotatedSpec {
    /// One domain per angle (degrees).
    pub angles_deg: Vec<f64>,
    pub n_classes: usize,
    pub samples_per_domain: usize,
    pub img_size: usize,
    /// Std of per-copy additive pixel noise.
    pub noise_sigma: f64,
    /// Max per-instance translation jitter in pixels.
    pub max_shift: f64,
    /// Per-instance scale jitter range.
    pub scale_range: (f64, f64),
    /// Per-instance base rotation jitter in degrees.
    pub max_base_rot_deg: f64,
}

impl Default for RotatedSpec {
    fn default() -> Self {
        RotatedSpec {
            angles_deg: vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0],
            n_classes: 4,
            samples_per_domain: 1000,
            img_size: 16,
            noise_sigma: 0.05,
            max_shift: 1.5,
            scale_range: (0.9, 1.1),
            max_base_rot_deg: 3.0,
        }
    }
}

impl RotatedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.angles_deg.is_empty() {
            return Err(Error::Config("need at least one rotation angle".into()));
        }
        if self.n_classes < 2 || self.n_classes > GLYPH_CLASSES {
            return Err(Error::Config(format!(
                "n_classes must be in 2..={GLYPH_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.img_size < 8 {
            return Err(Error::Config("img_size must be >= 8".into()));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::Config("samples_per_domain must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RotatedSource {
    Procedural,
    IdxFiles { images: std::path::PathBuf, labels: std::path::PathBuf },
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
}

fn dist_segment(p: (f64, f64), cap: &Capsule) -> f64 {
    let (ax, ay) = cap.a;
    let (bx, by) = cap.b;
    let (px, py) = p;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Distance from a point to the skeleton of the glyph class, in glyph units.
fn glyph_distance(class: usize, p: (f64, f64)) -> f64 {
    let seg = |ax: f64, ay: f64, bx: f64, by: f64| Capsule { a: (ax, ay), b: (bx, by) };
    match class {
        // vertical bar
        0 => dist_segment(p, &seg(0.0, -4.5, 0.0, 4.5)),
        // L: vertical stroke with a foot to the right (y grows downward)
        1 => dist_segment(p, &seg(-1.5, -4.5, -1.5, 4.5))
            .min(dist_segment(p, &seg(-1.5, 4.5, 3.5, 4.5))),
        // T: top bar plus stem
        2 => dist_segment(p, &seg(0.0, -4.5, 0.0, 4.5))
            .min(dist_segment(p, &seg(-4.0, -4.5, 4.0, -4.5))),
        // ring
        3 => ((p.0 * p.0 + p.1 * p.1).sqrt() - 3.8).abs(),
        // cross
        4 => dist_segment(p, &seg(0.0, -4.5, 0.0, 4.5))
            .min(dist_segment(p, &seg(-4.5, 0.0, 4.5, 0.0))),
        // V
        5 => dist_segment(p, &seg(-3.5, -4.5, 0.0, 4.5))
            .min(dist_segment(p, &seg(3.5, -4.5, 0.0, 4.5))),
        _ => unreachable!("glyph class out of range"),
    }
}

struct GlyphInstance {
    class: usize,
    shift: (f64, f64),
    scale: f64,
    base_rot_deg: f64,
    intensity: f64,
}

fn render_glyph(inst: &GlyphInstance, size: usize) -> Vec<f64> {
    const STROKE: f64 = 1.2;
    const SOFT: f64 = 0.8;
    let c = (size as f64 - 1.0) / 2.0;
    // glyph shapes are authored for a 16px canvas; scale with the canvas
    let canvas_scale = size as f64 / 16.0;
    let theta = inst.base_rot_deg.to_radians();
    let (s, co) = theta.sin_cos();
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut px = (x as f64 - c - inst.shift.0) / (inst.scale * canvas_scale);
            let mut py = (y as f64 - c - inst.shift.1) / (inst.scale * canvas_scale);
            // undo base rotation (visual CCW, y-down coords)
            let (rx, ry) = (co * px - s * py, s * px + co * py);
            px = rx;
            py = ry;
            let d = glyph_distance(inst.class, (px, py));
            let cov = ((STROKE + SOFT - d) / (2.0 * SOFT)).clamp(0.0, 1.0);
            img[y * size + x] = inst.intensity * cov;
        }
    }
    img
}

/// Generate one domain per rotation angle. The same base instances (entities)
/// appear in every domain at the domain's angle, and every domain uses the
/// same entity-to-split assignment.
pub fn gen_rotated(spec: &RotatedSpec, seed: u64, source: &RotatedSource) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let (bases, classes, size, n_classes) = match source {
        RotatedSource::Procedural => {
            let mut rng = seed_stream(seed, "rotated-base");
            let n = spec.samples_per_domain;
            let mut bases = Vec::with_capacity(n);
            let mut classes = Vec::with_capacity(n);
            for _ in 0..n {
                let class = rng.gen_range(0..spec.n_classes);
                let inst = GlyphInstance {
                    class,
                    shift: (
                        rng.gen_range(-spec.max_shift..=spec.max_shift),
                        rng.gen_range(-spec.max_shift..=spec.max_shift),
                    ),
                    scale: rng.gen_range(spec.scale_range.0..=spec.scale_range.1),
                    base_rot_deg: rng.gen_range(-spec.max_base_rot_deg..=spec.max_base_rot_deg),
                    intensity: rng.gen_range(0.75..=1.0),
                };
                bases.push(render_glyph(&inst, spec.img_size));
                classes.push(class);
            }
            (bases, classes, spec.img_size, spec.n_classes)
        }
        RotatedSource::IdxFiles { images, labels } => {
            let (imgs, w, h) = read_idx_images(images)?;
            if w != h {
                return Err(Error::Format(format!("idx images must be square, got {w}x{h}")));
            }
            let lbls = read_idx_labels(labels)?;
            if lbls.len() != imgs.len() {
                return Err(Error::Format(format!(
                    "{} labels for {} images",
                    lbls.len(),
                    imgs.len()
                )));
            }
            let n = spec.samples_per_domain.min(imgs.len());
            let classes: Vec<usize> = lbls[..n].iter().map(|&l| l as usize).collect();
            let n_classes = classes.iter().max().map_or(0, |m| m + 1).max(2);
            (imgs[..n].to_vec(), classes, w, n_classes)
        }
    };

    let n = bases.len();
    // entity order shuffled once; all domains share it, so split membership
    // is consistent across domains
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed_stream(seed, "rotated-splits"));
    let splits = SplitRanges::ratio_7_1_2(n);
    let params = serde_json::to_value(spec)?;

    let mut out = Vec::with_capacity(spec.angles_deg.len());
    for (dom, &angle) in spec.angles_deg.iter().enumerate() {
        let mut noise_rng = seed_stream(seed, &format!("rotated-noise-{dom}"));
        let d = size * size;
        let mut x = Vec::with_capacity(n * d);
        let mut y = vec![0.0; n * n_classes];
        let mut entity_ids = Vec::with_capacity(n);
        for (row, &e) in order.iter().enumerate() {
            let mut img = rotate_image(&bases[e], size, size, angle);
            if spec.noise_sigma > 0.0 {
                for v in img.iter_mut() {
                    let noise: f64 = StandardNormal.sample(&mut noise_rng);
                    *v += spec.noise_sigma * noise;
                }
            }
            x.extend_from_slice(&img);
            y[row * n_classes + classes[e]] = 1.0;
            entity_ids.push(e as u64);
        }
        let ds = DomainDataset {
            domain_id: dom,
            name: format!("rot{angle:03.0}"),
            x: Tensor::new(vec![n, d], x)?,
            y: Tensor::new(vec![n, n_classes], y)?,
            splits: splits.clone(),
            entity_ids,
            provenance: Provenance {
                generator: "rotated".into(),
                seed,
                params: params.clone(),
            },
        };
        ds.validate()?;
        out.push(ds);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// IDX image/label files

fn read_exact_at<'a>(data: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    data.get(offset..offset + len).ok_or_else(|| {
        Error::Format(format!(
            "idx file truncated reading {what} at byte {offset}: need {len} bytes, have {}",
            data.len().saturating_sub(offset)
        ))
    })
}

fn be_u32(data: &[u8], offset: usize, what: &str) -> Result<u32> {
    let b = read_exact_at(data, offset, 4, what)?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Read an IDX3 unsigned-byte image file; pixels normalized to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let magic = be_u32(&data, 0, "magic")?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!(
            "bad idx image magic {magic:#010x} at byte 0 (expected 0x00000803)"
        )));
    }
    let n = be_u32(&data, 4, "image count")? as usize;
    let h = be_u32(&data, 8, "image height")? as usize;
    let w = be_u32(&data, 12, "image width")? as usize;
    let body = read_exact_at(&data, 16, n * h * w, "pixel data")?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(
            body[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
        );
    }
    Ok((out, w, h))
}

/// Read an IDX1 unsigned-byte label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let magic = be_u32(&data, 0, "magic")?;
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!(
            "bad idx label magic {magic:#010x} at byte 0 (expected 0x00000801)"
        )));
    }
    let n = be_u32(&data, 4, "label count")? as usize;
    let body = read_exact_at(&data, 8, n, "label data")?;
    Ok(body.to_vec())
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out

/// Indices (into the input slice) of internal and external domains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LodoSplit {
    pub internal: Vec<usize>,
    pub external: Vec<usize>,
}

/// Hold out the named domain: external = {holdout}, internal = the rest.
pub fn lodo_split(datasets: &[DomainDataset], holdout: &str) -> Result<LodoSplit> {
    let pos = datasets
        .iter()
        .position(|d| d.name == holdout)
        .ok_or_else(|| Error::Config(format!("holdout domain {holdout} not found")))?;
    let internal: Vec<usize> = (0..datasets.len()).filter(|&i| i != pos).collect();
    if internal.is_empty() {
        return Err(Error::Config("lodo split leaves no internal domains".into()));
    }
    Ok(LodoSplit { internal, external: vec![pos] })
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    domain_id: usize,
    name: String,
    n_rows: usize,
    n_features: usize,
    n_labels: usize,
    splits: SplitRanges,
    entity_ids: Vec<u64>,
    provenance: Provenance,
}

const SCHEMA_VERSION: u32 = 1;

fn write_f64_le(path: &Path, data: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

fn read_f64_le(path: &Path, expected: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{what}: expected {} bytes ({expected} f64 values), found {}",
            expected * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}

/// Write `manifest.json`, `features.bin`, `labels.bin` into `dir`.
pub fn write_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        domain_id: ds.domain_id,
        name: ds.name.clone(),
        n_rows: ds.n_rows(),
        n_features: ds.n_features(),
        n_labels: ds.n_labels(),
        splits: ds.splits.clone(),
        entity_ids: ds.entity_ids.clone(),
        provenance: ds.provenance.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_f64_le(&dir.join("features.bin"), ds.x.data())?;
    write_f64_le(&dir.join("labels.bin"), ds.y.data())?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`], validating sizes and ranges.
pub fn read_dataset(dir: &Path) -> Result<DomainDataset> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset schema version {}",
            manifest.schema_version
        )));
    }
    let x = read_f64_le(
        &dir.join("features.bin"),
        manifest.n_rows * manifest.n_features,
        "features.bin",
    )?;
    let y = read_f64_le(&dir.join("labels.bin"), manifest.n_rows * manifest.n_labels, "labels.bin")?;
    let ds = DomainDataset {
        domain_id: manifest.domain_id,
        name: manifest.name,
        x: Tensor::new(vec![manifest.n_rows, manifest.n_features], x)?,
        y: Tensor::new(vec![manifest.n_rows, manifest.n_labels], y)?,
        splits: manifest.splits,
        entity_ids: manifest.entity_ids,
        provenance: manifest.provenance,
    };
    ds.validate()?;
    Ok(ds)
}
