//! Datasets: the IDX binary container, a CSV fallback, and seeded synthetic
//! image generation.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled images with pixels in `[0, 1]`, stored `(N, C, H, W)` row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split_id: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split_id: &str) -> Result<Self> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "dataset images must be (N, C, H, W), got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::CountMismatch { images: shape[0], labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        Ok(Self { images, labels, num_classes, split_id: split_id.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_id(&self) -> &str {
        &self.split_id
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Per-image shape `(C, H, W)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_numel(&self) -> usize {
        let [c, h, w] = self.image_shape();
        c * h * w
    }

    /// Copy of the images at `indices` as a batch tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.image_numel();
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![indices.len(), c, h, w], data).unwrap(), labels)
    }

    /// Deterministic prefix/suffix split; no shuffling, so interleaved
    /// synthetic data stays class-balanced on both sides.
    pub fn split(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::InvalidArgument(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let n_train = (self.len() as f64 * train_fraction).round() as usize;
        let idx_train: Vec<usize> = (0..n_train).collect();
        let idx_val: Vec<usize> = (n_train..self.len()).collect();
        let (ti, tl) = self.batch(&idx_train);
        let (vi, vl) = self.batch(&idx_val);
        Ok((
            Dataset::new(ti, tl, self.num_classes, &format!("{}-train", self.split_id))?,
            Dataset::new(vi, vl, self.num_classes, &format!("{}-val", self.split_id))?,
        ))
    }

    /// New dataset with the images replaced (same labels and class count).
    pub fn with_images(&self, images: Tensor, split_id: &str) -> Result<Dataset> {
        Dataset::new(images, self.labels.clone(), self.num_classes, split_id)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated { what: what.to_string() });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Load an IDX image/label pair (the MNIST container layout): big-endian
/// dimensions, `u8` pixels scaled by 1/255, channel axis inserted as `C = 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;
    parse_idx(&img_bytes, &lbl_bytes)
}

/// Parse IDX bytes directly; exposed so malformed-input fuzzing does not
/// need temp files.
pub fn parse_idx(img_bytes: &[u8], lbl_bytes: &[u8]) -> Result<Dataset> {
    let img_magic = read_u32_be(img_bytes, 0, "image magic")?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { what: "idx images", found: img_bytes[..4].to_vec() });
    }
    let lbl_magic = read_u32_be(lbl_bytes, 0, "label magic")?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { what: "idx labels", found: lbl_bytes[..4].to_vec() });
    }
    let n = read_u32_be(img_bytes, 4, "image count")? as usize;
    let h = read_u32_be(img_bytes, 8, "image rows")? as usize;
    let w = read_u32_be(img_bytes, 12, "image cols")? as usize;
    let n_lbl = read_u32_be(lbl_bytes, 4, "label count")? as usize;
    if n != n_lbl {
        return Err(Error::CountMismatch { images: n, labels: n_lbl });
    }
    let pixels = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Truncated { what: "image dimensions overflow".into() })?;
    let img_payload = &img_bytes[16..];
    if img_payload.len() < pixels {
        return Err(Error::Truncated { what: "image pixel data".to_string() });
    }
    let lbl_payload = &lbl_bytes[8..];
    if lbl_payload.len() < n {
        return Err(Error::Truncated { what: "label data".to_string() });
    }
    let data: Vec<f64> = img_payload[..pixels].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_payload[..n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, num_classes, "idx")
}

/// Write a dataset to the IDX pair layout (pixels quantized to `u8`).
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::InvalidArgument(format!(
            "idx container stores single-channel images, got C = {c}"
        )));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(ds.images().data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels().iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lbl)?;
    Ok(())
}

/// CSV dataset container: header `label,p0,p1,...`, one flattened image per
/// row. Pixels keep full double precision, which the 8-bit IDX container
/// cannot represent, so perturbed batches are stored in this format.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let d = ds.image_shape().iter().product::<usize>();
    let mut out = String::from("label");
    for p in 0..d {
        out.push_str(&format!(",p{p}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&ds.labels()[i].to_string());
        for v in &ds.images().data()[i * d..(i + 1) * d] {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Load the CSV dataset container. The per-image shape cannot be recovered
/// from the flat rows, so the caller provides it.
pub fn load_csv(path: &Path, image_shape: [usize; 3]) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let d: usize = image_shape.iter().product();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Truncated { what: "csv header".into() })?;
    if !header.starts_with("label,p0") {
        return Err(Error::FieldMismatch {
            field: "csv header".into(),
            detail: format!("expected `label,p0,...`, got `{header}`"),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::FieldMismatch { field: format!("row {row} label"), detail: line.into() })?;
        labels.push(label);
        let mut count = 0;
        for f in fields {
            let v: f64 = f.parse().map_err(|_| Error::FieldMismatch {
                field: format!("row {row} pixel {count}"),
                detail: f.into(),
            })?;
            data.push(v);
            count += 1;
        }
        if count != d {
            return Err(Error::FieldMismatch {
                field: format!("row {row}"),
                detail: format!("expected {d} pixels, got {count}"),
            });
        }
    }
    let n = labels.len();
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    let [c, h, w] = image_shape;
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes, "csv")
}

/// Seeded synthetic K-class image data: one smooth random template per
/// class plus Gaussian pixel noise, clipped to `[0, 1]`. Classes are
/// interleaved so any prefix split stays balanced within one sample.
pub fn gen_synthetic(classes: usize, n: usize, hw: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::InvalidArgument(format!("need n >= classes, got n = {n}")));
    }
    let d = hw * hw;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|k| class_template(hw, util::mix_seed(seed, 0x7E4D_0000 + k as u64)))
        .collect();

    let mut noise_rng = util::rng_from_seed(util::mix_seed(seed, 0xA11C_E5));
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for &t in &templates[k] {
            let v = t + 0.15 * util::normal(&mut noise_rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, hw, hw], data)?, labels, classes, "synth")
}

/// Smooth per-class template: blurred seeded noise, centered on 0.5 with a
/// moderate contrast so the additive sample noise keeps classes overlapping
/// but separable.
fn class_template(hw: usize, seed: u64) -> Vec<f64> {
    let mut rng = util::rng_from_seed(seed);
    let d = hw * hw;
    let mut field: Vec<f64> = (0..d).map(|_| util::uniform(&mut rng)).collect();
    // Two passes of 3x3 box blur with clamped borders.
    for _ in 0..2 {
        let src = field.clone();
        for y in 0..hw {
            for x in 0..hw {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, hw as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, hw as i64 - 1) as usize;
                        acc += src[yy * hw + xx];
                    }
                }
                field[y * hw + x] = acc / 9.0;
            }
        }
    }
    let mean = field.iter().sum::<f64>() / d as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let std = var.sqrt().max(1e-9);
    field
        .iter()
        .map(|v| (0.5 + 0.16 * (v - mean) / std).clamp(0.05, 0.95))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx_pair() -> (Vec<u8>, Vec<u8>) {
        // 2 images of 2x2, pixels 0..=255 walk; labels 1 and 0.
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 255, 128, 64, 10, 20, 30, 40]);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[1, 0]);
        (img, lbl)
    }

    #[test]
    fn idx_hand_built_pair_loads() {
        let (img, lbl) = tiny_idx_pair();
        let ds = parse_idx(&img, &lbl).unwrap();
        assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.images().data()[0], 0.0);
        assert_eq!(ds.images().data()[1], 1.0); // byte 255 -> 1.0
    }

    #[test]
    fn idx_count_mismatch_detected() {
        let (img, mut lbl) = tiny_idx_pair();
        lbl[4..8].copy_from_slice(&3u32.to_be_bytes());
        lbl.push(2);
        match parse_idx(&img, &lbl) {
            Err(Error::CountMismatch { images: 2, labels: 3 }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn idx_bad_magic_detected() {
        let (mut img, lbl) = tiny_idx_pair();
        img[3] = 0x99;
        assert!(matches!(parse_idx(&img, &lbl), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn idx_truncation_detected() {
        let (img, lbl) = tiny_idx_pair();
        assert!(matches!(
            parse_idx(&img[..20], &lbl),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = gen_synthetic(3, 10, 4, 99).unwrap();
        let b = gen_synthetic(3, 10, 4, 99).unwrap();
        assert_eq!(a.images().data(), b.images().data());
        let counts: Vec<usize> =
            (0..3).map(|k| a.labels().iter().filter(|&&l| l == k).count()).collect();
        assert_eq!(counts, vec![4, 3, 3]);
    }

    #[test]
    fn synthetic_pixels_in_range() {
        let ds = gen_synthetic(4, 40, 8, 5).unwrap();
        assert!(ds.images().data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = gen_synthetic(2, 6, 3, 11).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, ds.image_shape()).unwrap();
        assert_eq!(back.images().data(), ds.images().data());
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn split_keeps_balance() {
        let ds = gen_synthetic(2, 10, 3, 1).unwrap();
        let (train, val) = ds.split(0.8).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        assert_eq!(train.labels().iter().filter(|&&l| l == 0).count(), 4);
    }
}
