//! Data ingestion: the CIFAR-100 binary format, the top/bottom image
//! split that feeds the two model halves, and a seeded synthetic task for
//! fast deterministic experiments.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;
use crate::store::ImageId;
use crate::tensor::Tensor;

pub const CIFAR_IMAGE_DIM: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_IMAGE_DIM * CIFAR_IMAGE_DIM * CIFAR_CHANNELS;
/// One record: coarse label byte, fine label byte, 3072 pixel bytes.
pub const CIFAR_RECORD_LEN: usize = 2 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 100;
/// Flattened length of one image half (16 rows x 32 cols x 3 channels).
pub const CIFAR_HALF_LEN: usize = CIFAR_PIXELS / 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cifar file length {len} is not a multiple of {CIFAR_RECORD_LEN}")]
    BadFileLength { len: u64 },
    #[error("record {record}: fine label {label} out of range (< {CIFAR_CLASSES})")]
    BadLabel { record: usize, label: u8 },
    #[error("expected a {CIFAR_PIXELS}-value image, got {got}")]
    BadImageLength { got: usize },
    #[error("expected a {CIFAR_HALF_LEN}-value half image, got {got}")]
    BadHalfLength { got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One parsed CIFAR-100 record. Pixels are channel-major (the full red
/// plane, then green, then blue; each plane row-major) scaled to [0,1].
/// The coarse label is retained so records re-serialize byte-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CifarRecord {
    pub coarse: u8,
    pub fine: u8,
    pub pixels: Vec<f32>,
}

pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<CifarRecord>, DataError> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DataError::BadFileLength { len: bytes.len() as u64 });
    }
    let mut records = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    for (i, chunk) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let fine = chunk[1];
        if fine as usize >= CIFAR_CLASSES {
            return Err(DataError::BadLabel { record: i, label: fine });
        }
        records.push(CifarRecord {
            coarse: chunk[0],
            fine,
            pixels: chunk[2..].iter().map(|&b| b as f32 / 255.0).collect(),
        });
    }
    Ok(records)
}

pub fn load_cifar100(path: &Path) -> Result<Vec<CifarRecord>, DataError> {
    parse_cifar100(&fs::read(path)?)
}

/// Inverse of [`parse_cifar100`]: reproduces the exact input bytes for
/// any parsed file (pixel values round back to their source bytes).
pub fn serialize_cifar100(records: &[CifarRecord]) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_LEN);
    for r in records {
        if r.pixels.len() != CIFAR_PIXELS {
            return Err(DataError::BadImageLength { got: r.pixels.len() });
        }
        out.push(r.coarse);
        out.push(r.fine);
        out.extend(r.pixels.iter().map(|&p| (p * 255.0).round() as u8));
    }
    Ok(out)
}

/// Splits a channel-major 32x32x3 image into its top half (rows 0-15,
/// the fastgear-side features) and bottom half (rows 16-31, the raw
/// dense-side input), each flattened channel-major.
pub fn split_top_bottom(pixels: &[f32]) -> Result<(Tensor, Tensor), DataError> {
    if pixels.len() != CIFAR_PIXELS {
        return Err(DataError::BadImageLength { got: pixels.len() });
    }
    let plane = CIFAR_IMAGE_DIM * CIFAR_IMAGE_DIM;
    let half_plane = plane / 2;
    let mut top = Vec::with_capacity(CIFAR_HALF_LEN);
    let mut bottom = Vec::with_capacity(CIFAR_HALF_LEN);
    for ch in 0..CIFAR_CHANNELS {
        let base = ch * plane;
        top.extend_from_slice(&pixels[base..base + half_plane]);
        bottom.extend_from_slice(&pixels[base + half_plane..base + plane]);
    }
    Ok((Tensor::vector(top), Tensor::vector(bottom)))
}

/// Reassembles a full image from its two halves; exact inverse of
/// [`split_top_bottom`].
pub fn concat_top_bottom(top: &Tensor, bottom: &Tensor) -> Result<Vec<f32>, DataError> {
    if top.len() != CIFAR_HALF_LEN {
        return Err(DataError::BadHalfLength { got: top.len() });
    }
    if bottom.len() != CIFAR_HALF_LEN {
        return Err(DataError::BadHalfLength { got: bottom.len() });
    }
    let half_plane = CIFAR_IMAGE_DIM * CIFAR_IMAGE_DIM / 2;
    let mut out = Vec::with_capacity(CIFAR_PIXELS);
    for ch in 0..CIFAR_CHANNELS {
        out.extend_from_slice(&top.data()[ch * half_plane..(ch + 1) * half_plane]);
        out.extend_from_slice(&bottom.data()[ch * half_plane..(ch + 1) * half_plane]);
    }
    Ok(out)
}

/// One training sample as the fastgear sees it. The matching dense-side
/// raw input lives in the slowgear's kv-store under `sample_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: ImageId,
    pub sparse_input: Tensor,
    pub label: usize,
}

/// A full in-memory task: the fastgear-side samples plus the dense blobs
/// keyed by image id (insertion order fixed for reproducibility).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    pub dense_inputs: Vec<(ImageId, Vec<f32>)>,
    pub num_classes: usize,
    pub sparse_dim: usize,
    pub dense_dim: usize,
}

/// Builds the experiment task out of CIFAR records: top half as the
/// sparse input, bottom half as the dense blob, fine label as the class,
/// record ordinal as the image id.
pub fn cifar_to_dataset(records: &[CifarRecord]) -> Result<Dataset, DataError> {
    let mut samples = Vec::with_capacity(records.len());
    let mut dense_inputs = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let (top, bottom) = split_top_bottom(&r.pixels)?;
        samples.push(SampleRecord {
            sample_id: i as ImageId,
            sparse_input: top,
            label: r.fine as usize,
        });
        dense_inputs.push((i as ImageId, bottom.into_data()));
    }
    Ok(Dataset {
        samples,
        dense_inputs,
        num_classes: CIFAR_CLASSES,
        sparse_dim: CIFAR_HALF_LEN,
        dense_dim: CIFAR_HALF_LEN,
    })
}

/// Distance between class means in the synthetic task.
const SYNTH_SEPARATION: f64 = 2.0;

/// Seeded synthetic task in which each class mean is split across the two
/// halves so that neither half alone identifies the class.
///
/// Classes are laid out on an `a x a` grid, `a = ceil(sqrt(C))`: the
/// sparse half carries the column direction of `class mod a` and the
/// dense half the row direction of `class div a`, so classes sharing a
/// column are indistinguishable from the sparse half alone and vice
/// versa. Labels are assigned round-robin, hence uniform.
pub fn synth_generate(
    seed: u64,
    n: usize,
    sparse_dim: usize,
    dense_dim: usize,
    num_classes: usize,
) -> Dataset {
    synth_generate_shared(seed, n, n, sparse_dim, dense_dim, num_classes, 0.5)
}

/// Variant with a reduced image pool: samples cycle over `num_images`
/// distinct dense blobs (`sample_id = i mod num_images`), recreating the
/// regime where many training steps revisit the same dense input and the
/// DFV cache and gradient accumulator actually engage.
pub fn synth_generate_shared(
    seed: u64,
    n: usize,
    num_images: usize,
    sparse_dim: usize,
    dense_dim: usize,
    num_classes: usize,
    noise: f64,
) -> Dataset {
    assert!(n >= 1 && num_images >= 1 && sparse_dim >= 1 && dense_dim >= 1 && num_classes >= 1);
    let mut rng = Rng::new(seed);
    let grid = (num_classes as f64).sqrt().ceil() as usize;

    // Draw order is part of the contract: column directions, row
    // directions, per-image dense blobs, then per-sample sparse noise.
    let col_means: Vec<Vec<f64>> = (0..grid).map(|_| unit_vector(&mut rng, sparse_dim)).collect();
    let row_means: Vec<Vec<f64>> = (0..grid).map(|_| unit_vector(&mut rng, dense_dim)).collect();

    let mut dense_inputs = Vec::with_capacity(num_images);
    for img in 0..num_images {
        let label = img % num_classes;
        let mean = &row_means[label / grid];
        let blob: Vec<f32> = mean
            .iter()
            .map(|&m| (SYNTH_SEPARATION * m + noise * rng.next_normal()) as f32)
            .collect();
        dense_inputs.push((img as ImageId, blob));
    }

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sample_id = (i % num_images) as ImageId;
        let label = (sample_id as usize) % num_classes;
        let mean = &col_means[label % grid];
        let sparse: Vec<f32> = mean
            .iter()
            .map(|&m| (SYNTH_SEPARATION * m + noise * rng.next_normal()) as f32)
            .collect();
        samples.push(SampleRecord { sample_id, sparse_input: Tensor::vector(sparse), label });
    }

    Dataset { samples, dense_inputs, num_classes, sparse_dim, dense_dim }
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_bytes(records: usize) -> Vec<u8> {
        let mut bytes = Vec::new();
        for r in 0..records {
            bytes.push(r as u8); // coarse
            bytes.push((r * 7 % CIFAR_CLASSES) as u8); // fine
            for p in 0..CIFAR_PIXELS {
                bytes.push(((p + r * 13) % 256) as u8);
            }
        }
        bytes
    }

    #[test]
    fn parses_crafted_two_record_file() {
        let bytes = fixture_bytes(2);
        let records = parse_cifar100(&bytes).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].coarse, 0);
        assert_eq!(records[0].fine, 0);
        assert_eq!(records[1].fine, 7);
        assert_eq!(records[0].pixels[0], 0.0);
        assert_eq!(records[0].pixels[255], 1.0);
        assert_eq!(records[1].pixels[0], 13.0 / 255.0);
        assert_eq!(records[0].pixels.len(), CIFAR_PIXELS);
    }

    #[test]
    fn empty_file_gives_empty_list() {
        assert!(parse_cifar100(&[]).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut bytes = fixture_bytes(1);
        bytes.pop();
        assert!(matches!(parse_cifar100(&bytes), Err(DataError::BadFileLength { .. })));
    }

    #[test]
    fn out_of_range_fine_label_is_rejected() {
        let mut bytes = fixture_bytes(1);
        bytes[1] = 100;
        match parse_cifar100(&bytes) {
            Err(DataError::BadLabel { record: 0, label: 100 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn serializer_reproduces_input_bytes_for_all_pixel_values() {
        // 2 records cover every byte value 0..=255 in the pixel area.
        let bytes = fixture_bytes(2);
        let records = parse_cifar100(&bytes).unwrap();
        assert_eq!(serialize_cifar100(&records).unwrap(), bytes);
    }

    #[test]
    fn load_reads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        fs::write(&path, fixture_bytes(3)).unwrap();
        assert_eq!(load_cifar100(&path).unwrap().len(), 3);
    }

    #[test]
    fn split_constant_image_gives_constant_halves() {
        let pixels = vec![0.25f32; CIFAR_PIXELS];
        let (top, bottom) = split_top_bottom(&pixels).unwrap();
        assert_eq!(top.len(), CIFAR_HALF_LEN);
        assert_eq!(bottom.len(), CIFAR_HALF_LEN);
        assert!(top.data().iter().all(|&p| p == 0.25));
        assert!(bottom.data().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn split_separates_rows_by_index() {
        // Encode the row index in every pixel of every channel.
        let mut pixels = Vec::with_capacity(CIFAR_PIXELS);
        for _ch in 0..CIFAR_CHANNELS {
            for row in 0..CIFAR_IMAGE_DIM {
                for _col in 0..CIFAR_IMAGE_DIM {
                    pixels.push(row as f32);
                }
            }
        }
        let (top, bottom) = split_top_bottom(&pixels).unwrap();
        let top_max = top.data().iter().cloned().fold(f32::MIN, f32::max);
        let bottom_min = bottom.data().iter().cloned().fold(f32::MAX, f32::min);
        assert_eq!(top_max, 15.0);
        assert_eq!(bottom_min, 16.0);
    }

    #[test]
    fn split_then_concat_is_identity() {
        let records = parse_cifar100(&fixture_bytes(2)).unwrap();
        for r in &records {
            let (top, bottom) = split_top_bottom(&r.pixels).unwrap();
            assert_eq!(concat_top_bottom(&top, &bottom).unwrap(), r.pixels);
        }
    }

    #[test]
    fn split_rejects_wrong_shape() {
        assert!(split_top_bottom(&[0.0; 10]).is_err());
        assert!(concat_top_bottom(
            &Tensor::vector(vec![0.0; 3]),
            &Tensor::vector(vec![0.0; CIFAR_HALF_LEN])
        )
        .is_err());
    }

    #[test]
    fn cifar_dataset_wires_halves_and_ids() {
        let records = parse_cifar100(&fixture_bytes(2)).unwrap();
        let ds = cifar_to_dataset(&records).unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.samples[0].sample_id, 0);
        assert_eq!(ds.samples[1].sample_id, 1);
        assert_eq!(ds.samples[1].label, 7);
        assert_eq!(ds.sparse_dim, CIFAR_HALF_LEN);
        let rebuilt =
            concat_top_bottom(&ds.samples[0].sparse_input, &Tensor::vector(ds.dense_inputs[0].1.clone()))
                .unwrap();
        assert_eq!(rebuilt, records[0].pixels);
    }

    #[test]
    fn synth_same_seed_is_identical() {
        let a = synth_generate(7, 50, 6, 5, 4);
        let b = synth_generate(7, 50, 6, 5, 4);
        assert_eq!(a, b);
        let c = synth_generate(8, 50, 6, 5, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn synth_labels_are_uniform() {
        let n = 10_000;
        let ds = synth_generate(3, n, 4, 4, 7);
        let mut counts = vec![0usize; 7];
        for s in &ds.samples {
            counts[s.label] += 1;
        }
        for &c in &counts {
            let share = c as f64 / n as f64;
            assert!((share - 1.0 / 7.0).abs() < 0.03, "share {share}");
        }
    }

    #[test]
    fn synth_shared_pool_reuses_dense_blobs() {
        let ds = synth_generate_shared(5, 100, 8, 4, 4, 4, 0.5);
        assert_eq!(ds.dense_inputs.len(), 8);
        assert_eq!(ds.samples.len(), 100);
        assert!(ds.samples.iter().all(|s| s.sample_id < 8));
        // Label is a property of the image, so repeats agree.
        assert_eq!(ds.samples[0].label, ds.samples[8].label);
        assert_eq!(ds.samples[0].sample_id, ds.samples[8].sample_id);
        assert_ne!(ds.samples[0].sparse_input, ds.samples[8].sparse_input);
    }

    /// Multinomial logistic regression by gradient descent on the given
    /// features; returns final training accuracy. Deliberately simple —
    /// it is only a probe.
    fn linear_probe_accuracy(features: &[Vec<f32>], labels: &[usize], classes: usize) -> f64 {
        let dim = features[0].len();
        let n = features.len();
        let mut w = vec![0.0f64; dim * classes];
        let lr = 0.5;
        for _ in 0..300 {
            let mut grad = vec![0.0f64; dim * classes];
            for (x, &y) in features.iter().zip(labels) {
                let mut logits = vec![0.0f64; classes];
                for (c, l) in logits.iter_mut().enumerate() {
                    for (d, &xv) in x.iter().enumerate() {
                        *l += w[d * classes + c] * xv as f64;
                    }
                }
                let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (c, &e) in exps.iter().enumerate() {
                    let p = e / sum - if c == y { 1.0 } else { 0.0 };
                    for (d, &xv) in x.iter().enumerate() {
                        grad[d * classes + c] += p * xv as f64 / n as f64;
                    }
                }
            }
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv -= lr * g;
            }
        }
        let mut hits = 0;
        for (x, &y) in features.iter().zip(labels) {
            let mut best = (f64::MIN, 0usize);
            for c in 0..classes {
                let mut l = 0.0;
                for (d, &xv) in x.iter().enumerate() {
                    l += w[d * classes + c] * xv as f64;
                }
                if l > best.0 {
                    best = (l, c);
                }
            }
            if best.1 == y {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn each_half_alone_is_strictly_weaker_than_both() {
        let ds = synth_generate(11, 400, 6, 6, 4);
        let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
        let sparse: Vec<Vec<f32>> =
            ds.samples.iter().map(|s| s.sparse_input.data().to_vec()).collect();
        let dense: Vec<Vec<f32>> =
            ds.samples.iter().map(|s| ds.dense_inputs[s.sample_id as usize].1.clone()).collect();
        let both: Vec<Vec<f32>> = sparse
            .iter()
            .zip(&dense)
            .map(|(s, d)| s.iter().chain(d).cloned().collect())
            .collect();

        let acc_sparse = linear_probe_accuracy(&sparse, &labels, 4);
        let acc_dense = linear_probe_accuracy(&dense, &labels, 4);
        let acc_both = linear_probe_accuracy(&both, &labels, 4);
        assert!(
            acc_both > acc_sparse + 0.1 && acc_both > acc_dense + 0.1,
            "both {acc_both}, sparse {acc_sparse}, dense {acc_dense}"
        );
        assert!(acc_both > 0.9, "task should be solvable with both halves: {acc_both}");
    }
}
