//! Corpora, splits, and forget-set selection.
//!
//! A corpus is a flat [n, input] sample matrix with integer labels. `split`
//! deals it into four disjoint, class-stratified subsets: the target model's
//! train/test halves and the shadow model's in/out halves. Forget sets are
//! chosen from the target train split, per class, by how confidently a
//! membership attack flags each sample as training data.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    /// [n, input_dim]
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Corpus {
    pub fn new(name: &str, samples: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Corpus> {
        let n = samples.rows();
        if labels.len() != n {
            return Err(Error::Input(format!("{n} samples but {} labels", labels.len())));
        }
        if class_count < 2 {
            return Err(Error::Input(format!("need >= 2 classes, got {class_count}")));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Input(format!("label {bad} out of range for {class_count} classes")));
        }
        samples.assert_finite("corpus samples")?;
        Ok(Corpus { name: name.to_string(), samples, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.samples.row_len()
    }

    /// Indices of each class, ascending.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// Gathers rows `indices` into a batch tensor plus aligned labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Input("empty index set".into()));
        }
        let w = self.input_dim();
        let mut out = Tensor::zeros(&[indices.len(), w]);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Input(format!("index {i} out of range for corpus of {}", self.len())));
            }
            out.data[row * w..(row + 1) * w].copy_from_slice(self.samples.row(i));
            labels.push(self.labels[i]);
        }
        Ok((out, labels))
    }
}

/// Gaussian blob generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Noise scale around each class center.
    pub sigma: f64,
    /// Euclidean distance between any two class centers.
    pub center_distance: f64,
    /// Fraction of samples whose recorded label is flipped to another class.
    /// Flipped samples can only be fit by memorization, which makes them the
    /// sharpest membership evidence a model can carry.
    pub label_noise: f64,
    pub seed: u64,
}

const LABEL_NOISE_TAG: u64 = 0x6c61_6265_6c5f_6e7a;

/// Axis-aligned Gaussian blobs: class c sits at (d/sqrt(2)) * e_c, so every
/// pair of centers is exactly `center_distance` apart.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.classes < 2 || spec.per_class == 0 || spec.dim == 0 {
        return Err(Error::Input(format!(
            "blob spec wants classes >= 2, per_class >= 1, dim >= 1; got {spec:?}"
        )));
    }
    if spec.classes > spec.dim {
        return Err(Error::Input(format!(
            "blob scheme needs dim >= classes ({} > {})",
            spec.classes, spec.dim
        )));
    }
    if spec.sigma < 0.0 || spec.center_distance < 0.0 {
        return Err(Error::Input("sigma and center_distance must be >= 0".into()));
    }
    if !(0.0..1.0).contains(&spec.label_noise) {
        return Err(Error::Input(format!(
            "label_noise must be in [0,1), got {}",
            spec.label_noise
        )));
    }
    let n = spec.classes * spec.per_class;
    let radius = spec.center_distance / std::f64::consts::SQRT_2;
    let mut samples = Tensor::zeros(&[n, spec.dim]);
    let mut labels = Vec::with_capacity(n);
    let mut r = rng::rng(spec.seed);
    for c in 0..spec.classes {
        for i in 0..spec.per_class {
            let row = c * spec.per_class + i;
            let base = row * spec.dim;
            for d in 0..spec.dim {
                let center = if d == c { radius } else { 0.0 };
                samples.data[base + d] = center + spec.sigma * rng::randn(&mut r);
            }
            labels.push(c);
        }
    }
    if spec.label_noise > 0.0 {
        // Separate stream: adding noise never changes the geometry draw.
        let mut nr = rng::rng(rng::derive(spec.seed, LABEL_NOISE_TAG));
        for l in labels.iter_mut() {
            if nr.gen::<f64>() < spec.label_noise {
                let shift = 1 + (nr.gen::<u64>() as usize) % (spec.classes - 1);
                *l = (*l + shift) % spec.classes;
            }
        }
    }
    Corpus::new(
        &format!("blobs-k{}-d{}", spec.classes, spec.dim),
        samples,
        labels,
        spec.classes,
    )
}

/// Four disjoint index sets covering a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_in: Vec<usize>,
    pub shadow_out: Vec<usize>,
}

impl SplitPlan {
    pub fn subsets(&self) -> [&[usize]; 4] {
        [&self.target_train, &self.target_test, &self.shadow_in, &self.shadow_out]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::at(dir))?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("split plan to json: {e}")))?;
        fs::write(path, json).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitPlan> {
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("split plan from json: {e}")))
    }
}

/// Stratified 4-way split: within each class, indices are shuffled by `seed`
/// and dealt round-robin, so per-class subset sizes differ by at most one.
/// Subset lists interleave classes, which keeps any prefix roughly balanced.
pub fn split(corpus: &Corpus, seed: u64) -> Result<SplitPlan> {
    let by_class = corpus.class_members();
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < 4) {
        return Err(Error::Input(format!(
            "class {c} has {} samples; need >= 4 for a 4-way split",
            members.len()
        )));
    }
    let mut buckets: [Vec<Vec<usize>>; 4] = std::array::from_fn(|_| vec![Vec::new(); corpus.class_count]);
    for (c, members) in by_class.iter().enumerate() {
        let mut order = members.clone();
        order.shuffle(&mut rng::rng(rng::derive(seed, c as u64)));
        for (i, idx) in order.into_iter().enumerate() {
            buckets[i % 4][c].push(idx);
        }
    }
    let interleave = |per_class: &Vec<Vec<usize>>| -> Vec<usize> {
        let deepest = per_class.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::new();
        for depth in 0..deepest {
            for class_list in per_class {
                if let Some(&idx) = class_list.get(depth) {
                    out.push(idx);
                }
            }
        }
        out
    };
    Ok(SplitPlan {
        seed,
        target_train: interleave(&buckets[0]),
        target_test: interleave(&buckets[1]),
        shadow_in: interleave(&buckets[2]),
        shadow_out: interleave(&buckets[3]),
    })
}

/// The samples chosen for removal; always a subset of the target train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetSet {
    pub ratio: f64,
    pub indices: Vec<usize>,
}

impl ForgetSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::at(dir))?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("forget set to json: {e}")))?;
        fs::write(path, json).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ForgetSet> {
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("forget set from json: {e}")))
    }
}

/// Picks round(ratio * |train|) samples: per-class quotas are floored shares
/// with the remainder going to the lowest class ids; within a class the
/// highest `member_probs` win, ties breaking to the lower corpus index.
/// `member_probs[i]` belongs to `plan.target_train[i]`.
pub fn select_forget_set(
    corpus: &Corpus,
    plan: &SplitPlan,
    member_probs: &[f64],
    ratio: f64,
) -> Result<ForgetSet> {
    let train = &plan.target_train;
    if member_probs.len() != train.len() {
        return Err(Error::Input(format!(
            "{} member probabilities for {} train samples",
            member_probs.len(),
            train.len()
        )));
    }
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::Input(format!("forget ratio must be in (0, 1), got {ratio}")));
    }
    let total = (ratio * train.len() as f64).round() as usize;
    if total == 0 {
        return Err(Error::Input(format!(
            "ratio {ratio} rounds to an empty forget set on {} train samples",
            train.len()
        )));
    }

    // Position lists per class, position = offset into plan.target_train.
    let mut by_class = vec![Vec::new(); corpus.class_count];
    for (pos, &idx) in train.iter().enumerate() {
        by_class[corpus.labels[idx]].push(pos);
    }
    let mut quotas: Vec<usize> =
        by_class.iter().map(|m| (ratio * m.len() as f64).floor() as usize).collect();
    let mut assigned: usize = quotas.iter().sum();
    let mut c = 0;
    while assigned < total {
        if quotas[c] < by_class[c].len() {
            quotas[c] += 1;
            assigned += 1;
        }
        c = (c + 1) % corpus.class_count;
    }

    let mut indices = Vec::with_capacity(total);
    for (c, positions) in by_class.iter().enumerate() {
        let mut ranked = positions.clone();
        // Highest probability first; equal probabilities keep ascending index.
        ranked.sort_by(|&a, &b| {
            member_probs[b]
                .partial_cmp(&member_probs[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(train[a].cmp(&train[b]))
        });
        indices.extend(ranked.into_iter().take(quotas[c]).map(|pos| train[pos]));
    }
    indices.sort_unstable();
    Ok(ForgetSet { ratio, indices })
}

/// Loader options shared by the file-backed corpus readers.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Bilinear-resize images to side x side.
    pub resize: Option<usize>,
    /// Standardize features with the dataset's own mean and std.
    #[serde(default)]
    pub normalize: bool,
}

/// Reads an IDX image/label file pair (the MNIST family container format).
/// Images: magic 2051, u8 pixels, rescaled to [0, 1]. Labels: magic 2049.
pub fn load_idx(images_path: &Path, labels_path: &Path, opts: &LoadOptions) -> Result<Corpus> {
    let images = fs::read(images_path).map_err(Error::at(images_path))?;
    let labels = fs::read(labels_path).map_err(Error::at(labels_path))?;

    let (n, h, w, pixels) = parse_idx_images(&images)?;
    let label_vals = parse_idx_labels(&labels)?;
    if label_vals.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            label_vals.len()
        )));
    }
    let class_count = label_vals.iter().copied().max().unwrap_or(0) as usize + 1;
    if class_count < 2 {
        return Err(Error::Format("label file holds fewer than 2 classes".into()));
    }

    let (out_h, out_w) = match opts.resize {
        Some(side) if side == 0 => return Err(Error::Input("resize side must be > 0".into())),
        Some(side) => (side, side),
        None => (h, w),
    };
    let mut samples = Tensor::zeros(&[n, out_h * out_w]);
    for i in 0..n {
        let src = &pixels[i * h * w..(i + 1) * h * w];
        let dst = &mut samples.data[i * out_h * out_w..(i + 1) * out_h * out_w];
        if (out_h, out_w) == (h, w) {
            for (d, &p) in dst.iter_mut().zip(src) {
                *d = p as f64 / 255.0;
            }
        } else {
            bilinear_resize(src, h, w, dst, out_h, out_w);
        }
    }
    if opts.normalize {
        standardize(&mut samples.data);
    }
    let name = images_path.file_stem().and_then(|s| s.to_str()).unwrap_or("idx").to_string();
    Corpus::new(&name, samples, label_vals.into_iter().map(|v| v as usize).collect(), class_count)
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!("image file too short: {} bytes", bytes.len())));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != 2051 {
        return Err(Error::Format(format!("image magic {magic}, want 2051")));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let want = 16 + n * h * w;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "image payload is {} bytes, header promises {want}",
            bytes.len()
        )));
    }
    Ok((n, h, w, &bytes[16..]))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!("label file too short: {} bytes", bytes.len())));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != 2049 {
        return Err(Error::Format(format!("label magic {magic}, want 2049")));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format(format!(
            "label payload is {} bytes, header promises {}",
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..].to_vec())
}

fn bilinear_resize(src: &[u8], h: usize, w: usize, dst: &mut [f64], oh: usize, ow: usize) {
    for y in 0..oh {
        let fy = if oh == 1 { 0.0 } else { y as f64 * (h - 1) as f64 / (oh - 1) as f64 };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = if ow == 1 { 0.0 } else { x as f64 * (w - 1) as f64 / (ow - 1) as f64 };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let p = |yy: usize, xx: usize| src[yy * w + xx] as f64 / 255.0;
            let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
            let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
            dst[y * ow + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
}

fn standardize(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    for v in data.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Schema for tabular CSV corpora: every column except the label column is a
/// feature, in header order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    /// Expected class count; inferred as max label + 1 when absent.
    pub class_count: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { label_column: "label".into(), class_count: None }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Corpus> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("open csv {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("csv headers: {e}")))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| Error::Format(format!("csv lacks label column '{}'", schema.label_column)))?;

    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let width = headers.len() - 1;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("csv row {line}: {e}")))?;
        if record.len() != headers.len() {
            return Err(Error::Format(format!(
                "csv row {line} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for (i, field) in record.iter().enumerate() {
            if i == label_col {
                let y: usize = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Input(format!("csv row {line}: label '{field}' is not a class id")))?;
                labels.push(y);
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("csv row {line}: '{field}' is not a number")))?;
                rows.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("csv has no data rows".into()));
    }
    let class_count = match schema.class_count {
        Some(k) => k,
        None => labels.iter().copied().max().unwrap() + 1,
    };
    if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::Input(format!("label {bad} out of range for {class_count} classes")));
    }
    let samples = Tensor::from_vec(&[labels.len(), width], rows)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
    Corpus::new(&name, samples, labels, class_count)
}
