//! Dataset ingestion, resizing, splitting, mini-batching, and the synthetic
//! salt-image generator used for desk-scale testing.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Result, SaltError};
use crate::image_io::{read_gray, write_gray, GrayImage};
use crate::model::{INPUT_HW, OUTPUT_HW};
use crate::ops::resize_nearest_forward;
use crate::tensor::Tensor;

pub const NATIVE_HW: usize = 101;

/// One paired seismic image and binary salt mask, both 101x101.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// (1, 101, 101), values in [0, 1]
    pub image: Tensor,
    /// (1, 101, 101), values in {0, 1}
    pub mask: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Disk,
    Synthetic,
}

/// Samples are reference-counted so splits and folds share pixel storage
/// instead of copying it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Arc<Sample>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            shuffle_seed: 0,
        }
    }
}

fn tensor_from_gray(img: &GrayImage, scale: bool) -> Tensor {
    let data = img
        .pixels
        .iter()
        .map(|&p| {
            if scale {
                p as f64 / 255.0
            } else if p >= 128 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![1, img.height, img.width], data).unwrap()
}

/// Load `<images_dir>/<id>.(png|pgm)` with same-named masks from
/// `masks_dir`. Images scale to [0,1]; masks binarize at 128. Samples come
/// back sorted by id.
pub fn load_dataset(images_dir: &Path, masks_dir: &Path) -> Result<Dataset> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(images_dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if ext == "png" || ext == "pgm" {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| SaltError::Data(format!("bad file name {}", path.display())))?
                .to_string();
            ids.push((id, path));
        }
    }
    ids.sort_by(|a, b| a.0.cmp(&b.0));

    let mut samples = Vec::with_capacity(ids.len());
    for (id, image_path) in ids {
        let mask_path = ["pgm", "png"]
            .iter()
            .map(|ext| masks_dir.join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| SaltError::Data(format!("missing mask for id '{id}'")))?;
        let image = read_gray(&image_path)?;
        let mask = read_gray(&mask_path)?;
        for (img, path) in [(&image, &image_path), (&mask, &mask_path)] {
            if img.width != NATIVE_HW || img.height != NATIVE_HW {
                return Err(SaltError::Data(format!(
                    "{}: expected {NATIVE_HW}x{NATIVE_HW}, got {}x{}",
                    path.display(),
                    img.width,
                    img.height
                )));
            }
        }
        samples.push(Arc::new(Sample {
            id,
            image: tensor_from_gray(&image, true),
            mask: tensor_from_gray(&mask, false),
        }));
    }
    Ok(Dataset {
        samples,
        provenance: Provenance::Disk,
    })
}

/// Write a dataset as `<root>/images/<id>.pgm` and `<root>/masks/<id>.pgm`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    for s in &dataset.samples {
        let to_bytes = |t: &Tensor, scale: f64| GrayImage {
            width: NATIVE_HW,
            height: NATIVE_HW,
            pixels: t
                .data()
                .iter()
                .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
                .collect(),
        };
        write_gray(&images.join(format!("{}.pgm", s.id)), &to_bytes(&s.image, 255.0))?;
        write_gray(&masks.join(format!("{}.pgm", s.id)), &to_bytes(&s.mask, 255.0))?;
    }
    Ok(())
}

/// Nearest-neighbor resize of a (1, 101, 101) image to the 128x128 network
/// input.
pub fn prepare_image(image: &Tensor) -> Tensor {
    let img = Tensor::new(vec![1, 1, NATIVE_HW, NATIVE_HW], image.data().to_vec()).unwrap();
    resize_nearest_forward(&img, INPUT_HW, INPUT_HW).unwrap()
}

/// As `prepare_image` for a sample. The mask is never resized.
pub fn prepare_input(sample: &Sample) -> Tensor {
    prepare_image(&sample.image)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Seeded shuffle then prefix/suffix split; |train| = round(fraction * N).
pub fn split(dataset: &Dataset, cfg: &SplitConfig) -> Result<(Dataset, Dataset)> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(SaltError::Validation(format!(
            "train_fraction {} outside (0, 1)",
            cfg.train_fraction
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(SaltError::Validation("need at least 2 samples to split".into()));
    }
    let n_train = (cfg.train_fraction * n as f64).round() as usize;
    let idx = shuffled_indices(n, cfg.shuffle_seed);
    let pick = |range: &[usize]| Dataset {
        samples: range.iter().map(|&i| dataset.samples[i].clone()).collect(),
        provenance: dataset.provenance,
    };
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

/// Seeded k-fold partition; fold i is validation in pair i, fold sizes
/// differ by at most one.
pub fn kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    let n = dataset.len();
    if k < 2 {
        return Err(SaltError::Validation(format!("k = {k} must be at least 2")));
    }
    if k > n {
        return Err(SaltError::Validation(format!(
            "k = {k} exceeds dataset size {n}"
        )));
    }
    let idx = shuffled_indices(n, seed);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut pos = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(&idx[pos..pos + size]);
        pos += size;
    }
    let pick = |ix: &[&[usize]]| Dataset {
        samples: ix
            .iter()
            .flat_map(|s| s.iter())
            .map(|&i| dataset.samples[i].clone())
            .collect(),
        provenance: dataset.provenance,
    };
    Ok((0..k)
        .map(|i| {
            let train: Vec<&[usize]> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, f)| *f)
                .collect();
            (pick(&train), pick(&[folds[i]]))
        })
        .collect())
}

/// Stack samples into (input N x 1 x 128 x 128, target N x 1 x 101 x 101).
pub fn stack_batch(samples: &[&Sample]) -> (Tensor, Tensor) {
    let n = samples.len();
    let mut input = Vec::with_capacity(n * INPUT_HW * INPUT_HW);
    let mut target = Vec::with_capacity(n * OUTPUT_HW * OUTPUT_HW);
    for s in samples {
        input.extend_from_slice(prepare_input(s).data());
        target.extend_from_slice(s.mask.data());
    }
    (
        Tensor::new(vec![n, 1, INPUT_HW, INPUT_HW], input).unwrap(),
        Tensor::new(vec![n, 1, OUTPUT_HW, OUTPUT_HW], target).unwrap(),
    )
}

/// One epoch of mini-batches with a per-epoch reshuffle seeded by
/// (shuffle_seed, epoch). The final short batch is kept.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Vec<(Tensor, Tensor)> {
    assert!(batch_size >= 1);
    let seed = shuffle_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch);
    let idx = shuffled_indices(dataset.len(), seed);
    idx.chunks(batch_size)
        .map(|chunk| {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &*dataset.samples[i]).collect();
            stack_batch(&picked)
        })
        .collect()
}

/// Parameters of one synthetic sample, exposed so tests can rasterize the
/// mask independently.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub bands: Vec<(f64, f64, f64)>, // (frequency, phase, amplitude)
    pub ripple: (f64, f64),          // (frequency, amplitude) along x
    pub ellipses: Vec<Ellipse>,
}

#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / self.rx;
        let dy = (y as f64 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Deterministic per-sample parameters for the synthetic generator.
pub fn synth_params(seed: u64, index: u64) -> SynthParams {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut rng = ChaCha20Rng::seed_from_u64(mixed);
    let bands = (0..3)
        .map(|_| {
            (
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.05..0.15),
            )
        })
        .collect();
    let ripple = (rng.gen_range(2.0..6.0), rng.gen_range(0.01..0.04));
    let count = rng.gen_range(0..=3u32);
    let ellipses = (0..count)
        .map(|_| {
            let bright = rng.gen_bool(0.5);
            Ellipse {
                cx: rng.gen_range(15.0..86.0),
                cy: rng.gen_range(15.0..86.0),
                rx: rng.gen_range(6.0..18.0),
                ry: rng.gen_range(6.0..18.0),
                intensity: if bright {
                    rng.gen_range(0.85..1.0)
                } else {
                    rng.gen_range(0.0..0.15)
                },
            }
        })
        .collect();
    SynthParams {
        bands,
        ripple,
        ellipses,
    }
}

/// Render one synthetic sample: horizontally layered low-frequency
/// background plus the ellipse interiors; the mask is exactly the union of
/// those interiors.
pub fn synth_render(params: &SynthParams, id: String) -> Sample {
    let hw = NATIVE_HW;
    let mut image = vec![0.0; hw * hw];
    let mut mask = vec![0.0; hw * hw];
    for y in 0..hw {
        let mut base = 0.5;
        for &(f, phase, amp) in &params.bands {
            base += amp * (std::f64::consts::TAU * f * y as f64 / hw as f64 + phase).sin();
        }
        for x in 0..hw {
            let ripple = params.ripple.1
                * (std::f64::consts::TAU * params.ripple.0 * x as f64 / hw as f64).sin();
            let mut v = base + ripple;
            let mut salted = false;
            for e in &params.ellipses {
                if e.contains(x, y) {
                    v = e.intensity;
                    salted = true;
                }
            }
            image[y * hw + x] = v.clamp(0.0, 1.0);
            mask[y * hw + x] = f64::from(salted);
        }
    }
    Sample {
        id,
        image: Tensor::new(vec![1, hw, hw], image).unwrap(),
        mask: Tensor::new(vec![1, hw, hw], mask).unwrap(),
    }
}

/// Generate a deterministic synthetic dataset of `n` samples.
pub fn synth_generate(n: usize, seed: u64) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            Arc::new(synth_render(
                &synth_params(seed, i as u64),
                format!("synth_{seed}_{i:05}"),
            ))
        })
        .collect();
    Dataset {
        samples,
        provenance: Provenance::Synthetic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(8, 7);
        let b = synth_generate(8, 7);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn zero_ellipses_means_empty_mask() {
        // Scan until a parameter draw with no ellipses shows up.
        let (seed, idx) = (0..200u64)
            .find_map(|i| {
                if synth_params(3, i).ellipses.is_empty() {
                    Some((3, i))
                } else {
                    None
                }
            })
            .expect("no zero-ellipse sample in 200 draws");
        let s = synth_render(&synth_params(seed, idx), "t".into());
        assert!(s.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_matches_ellipse_rasterization() {
        for i in 0..16 {
            let params = synth_params(11, i);
            let s = synth_render(&params, "t".into());
            let expected: usize = (0..NATIVE_HW)
                .flat_map(|y| (0..NATIVE_HW).map(move |x| (x, y)))
                .filter(|&(x, y)| params.ellipses.iter().any(|e| e.contains(x, y)))
                .count();
            let got = s.mask.data().iter().filter(|&&v| v == 1.0).count();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = synth_generate(10, 1);
        let cfg = SplitConfig {
            train_fraction: 0.8,
            shuffle_seed: 5,
        };
        let (train, test) = split(&ds, &cfg).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        let all: HashSet<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
        let mut joined: HashSet<&str> = train.samples.iter().map(|s| s.id.as_str()).collect();
        for s in &test.samples {
            assert!(joined.insert(s.id.as_str()), "overlap on {}", s.id);
        }
        assert_eq!(joined, all);

        let (train2, _) = split(&ds, &cfg).unwrap();
        let ids1: Vec<&str> = train.samples.iter().map(|s| s.id.as_str()).collect();
        let ids2: Vec<&str> = train2.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids1, ids2);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = synth_generate(4, 1);
        for f in [0.0, 1.0, -0.5, 1.5] {
            assert!(split(
                &ds,
                &SplitConfig {
                    train_fraction: f,
                    shuffle_seed: 0
                }
            )
            .is_err());
        }
    }

    #[test]
    fn kfold_partition() {
        let ds = synth_generate(10, 2);
        let folds = kfold(&ds, 10, 4).unwrap();
        assert_eq!(folds.len(), 10);
        let mut seen = HashSet::new();
        for (train, val) in &folds {
            assert_eq!(val.len(), 1);
            assert_eq!(train.len(), 9);
            assert!(seen.insert(val.samples[0].id.clone()));
        }
        assert_eq!(seen.len(), 10);
        assert!(kfold(&ds, 11, 0).is_err());
        assert!(kfold(&ds, 1, 0).is_err());
    }

    #[test]
    fn batches_cover_dataset() {
        let ds = synth_generate(7, 3);
        let bs = batches(&ds, 3, 1, 0);
        let sizes: Vec<usize> = bs.iter().map(|(i, _)| i.dims()[0]).collect();
        assert_eq!(sizes, vec![3, 3, 1]);
        let again = batches(&ds, 3, 1, 0);
        for ((a, _), (b, _)) in bs.iter().zip(&again) {
            assert_eq!(a, b);
        }
        let other_epoch = batches(&ds, 3, 1, 1);
        assert!(bs.iter().zip(&other_epoch).any(|((a, _), (b, _))| a != b));
    }

    #[test]
    fn prepare_input_preserves_constants() {
        let mut s = (*synth_generate(1, 1).samples.remove(0)).clone();
        s.image = Tensor::filled(&[1, NATIVE_HW, NATIVE_HW], 0.25);
        let prepared = prepare_input(&s);
        assert_eq!(prepared.dims(), &[1, 1, INPUT_HW, INPUT_HW]);
        assert!(prepared.data().iter().all(|&v| v == 0.25));
        assert_eq!(s.mask.dims(), &[1, NATIVE_HW, NATIVE_HW]);
    }

    #[test]
    fn prepare_input_only_copies_source_pixels() {
        let s = &synth_generate(1, 9).samples[0];
        let prepared = prepare_input(s);
        let source: HashSet<u64> = s.image.data().iter().map(|v| v.to_bits()).collect();
        assert!(prepared.data().iter().all(|v| source.contains(&v.to_bits())));
    }

    #[test]
    fn disk_round_trip() {
        let ds = synth_generate(4, 5);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&dir.path().join("images"), &dir.path().join("masks")).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_mask_is_reported_with_id() {
        let ds = synth_generate(2, 6);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(
            dir.path()
                .join("masks")
                .join(format!("{}.pgm", ds.samples[1].id)),
        )
        .unwrap();
        let err = load_dataset(&dir.path().join("images"), &dir.path().join("masks"))
            .unwrap_err()
            .to_string();
        assert!(err.contains(&ds.samples[1].id), "{err}");
    }

    #[test]
    fn wrong_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let masks = dir.path().join("masks");
        std::fs::create_dir_all(&images).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        let img = GrayImage {
            width: 32,
            height: 32,
            pixels: vec![0; 32 * 32],
        };
        write_gray(&images.join("a.pgm"), &img).unwrap();
        write_gray(&masks.join("a.pgm"), &img).unwrap();
        assert!(load_dataset(&images, &masks).is_err());
    }
}
