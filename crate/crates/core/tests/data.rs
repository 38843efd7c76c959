use eaanet::autograd::{Param, Tape};
use eaanet::data::{
    augment_image, batch_iter, encode_records, load_cifar10, parse_records, read_cifar_file, standardize,
    synthetic_dataset, write_cifar_file, Dataset, Split, CIFAR_MEAN, CIFAR_STD, IMAGE_LEN, PAD, RECORD_BYTES, SIDE,
    TEST_FILE, TRAIN_FILES,
};
use eaanet::tensor::Tensor;
use eaanet::Error;
use proptest::prelude::*;

fn two_records() -> Dataset {
    let mut images = Vec::with_capacity(2 * IMAGE_LEN);
    for r in 0..2 {
        for i in 0..IMAGE_LEN {
            images.push(((i * 7 + r * 13) % 256) as f32 / 255.0);
        }
    }
    Dataset::new(images, vec![3, 9], Split::Train).unwrap()
}

#[test]
fn write_then_read_recovers_pixels_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    let ds = two_records();
    write_cifar_file(&path, &ds).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 2 * RECORD_BYTES as u64);
    let back = read_cifar_file(&path, Split::Train).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.images, ds.images);
}

#[test]
fn byte_layout_is_label_then_planar_rgb() {
    let mut bytes = vec![0u8; RECORD_BYTES];
    bytes[0] = 7;
    bytes[1] = 255; // R(0,0)
    bytes[1 + 1024 + 33] = 51; // G(1,1)
    bytes[1 + 2048 + 1023] = 102; // B(31,31)
    let ds = parse_records(&bytes, Split::Test).unwrap();
    assert_eq!(ds.labels, vec![7]);
    let img = ds.image(0);
    assert_eq!(img[0], 1.0);
    assert_eq!(img[1024 + SIDE + 1], 0.2);
    assert_eq!(img[2048 + 1023], 0.4);
    assert!(img.iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(10_000 * RECORD_BYTES, 30_730_000);
}

#[test]
fn malformed_files_are_format_errors() {
    let err = parse_records(&vec![0u8; RECORD_BYTES + 5], Split::Train).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
    let mut bytes = encode_records(&two_records());
    bytes[RECORD_BYTES] = 10;
    let msg = parse_records(&bytes, Split::Train).unwrap_err().to_string();
    assert!(msg.contains("record 1"), "{msg}");
}

#[test]
fn full_layout_loads_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("cifar-10-batches-bin");
    std::fs::create_dir(&nested).unwrap();
    let ds = two_records();
    for f in TRAIN_FILES.iter().chain([&TEST_FILE]) {
        write_cifar_file(&nested.join(f), &ds).unwrap();
    }
    let (train, test) = load_cifar10(dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (10, 2));
    assert_eq!(train.split, Split::Train);
    assert_eq!(&train.labels[..2], &ds.labels[..]);
    assert!(load_cifar10(&dir.path().join("missing")).is_err());
}

#[test]
fn batch_sizes_and_determinism() {
    let ds = synthetic_dataset(10, 2, 1);
    let sizes: Vec<usize> = batch_iter::<f32>(&ds, 4, 7, false).unwrap().map(|b| b.labels.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    let a: Vec<_> = batch_iter::<f32>(&ds, 4, 7, false).unwrap().collect();
    let b: Vec<_> = batch_iter::<f32>(&ds, 4, 7, false).unwrap().collect();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.images.bit_eq(&y.images));
        assert_eq!(x.labels, y.labels);
    }
    let empty = Dataset::new(vec![], vec![], Split::Test).unwrap();
    assert_eq!(batch_iter::<f32>(&empty, 4, 0, true).unwrap().count(), 0);
    assert!(batch_iter::<f32>(&ds, 0, 0, false).is_err());
}

#[test]
fn shuffle_is_a_permutation_and_depends_on_seed() {
    let ds = synthetic_dataset(50, 10, 2);
    let order = |seed| -> Vec<usize> {
        batch_iter::<f32>(&ds, 8, seed, false).unwrap().flat_map(|b| b.labels).collect()
    };
    let mut a = order(1);
    assert_ne!(a, order(2));
    let mut orig: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
    a.sort();
    orig.sort();
    assert_eq!(a, orig);
}

#[test]
fn flip_mirrors_columns_on_asymmetric_probe() {
    let src: Vec<f32> = (0..IMAGE_LEN).map(|i| (i % SIDE) as f32 + 100.0 * (i / (SIDE * SIDE)) as f32).collect();
    let mut out = vec![0.0; IMAGE_LEN];
    augment_image(&src, &mut out, PAD, PAD, true);
    for c in 0..3 {
        for y in 0..SIDE {
            for j in 0..SIDE {
                let at = |img: &[f32], x: usize| img[c * SIDE * SIDE + y * SIDE + x];
                assert_eq!(at(&out, j), at(&src, SIDE - 1 - j));
            }
        }
    }
}

#[test]
fn crop_shift_reads_reflected_border() {
    let src: Vec<f32> = (0..IMAGE_LEN).map(|i| i as f32).collect();
    let mut out = vec![0.0; IMAGE_LEN];
    augment_image(&src, &mut out, 0, 0, false);
    // output (0, 0) sits at padded (-4, -4), reflected to source (4, 4)
    assert_eq!(out[0], src[4 * SIDE + 4]);
    // output (4, 4) is source (0, 0)
    assert_eq!(out[4 * SIDE + 4], src[0]);
    augment_image(&src, &mut out, 2 * PAD, 2 * PAD, false);
    // output (31, 31) sits at padded (35, 35), reflected to source (27, 27)
    assert_eq!(out[31 * SIDE + 31], src[27 * SIDE + 27]);
}

#[test]
fn batches_are_standardized() {
    let ds = two_records();
    let b = batch_iter::<f64>(&ds, 2, 0, false).unwrap().next().unwrap();
    let first = b.labels[0];
    let i = ds.labels.iter().position(|&l| l as usize == first).unwrap();
    for (k, &v) in b.images.data()[..IMAGE_LEN].iter().enumerate() {
        let want = standardize(ds.image(i)[k], k / (SIDE * SIDE)) as f64;
        assert_eq!(v, want);
    }
    assert!((standardize(CIFAR_MEAN[1] + CIFAR_STD[1], 1) - 1.0).abs() < 1e-6);
}

#[test]
fn synthetic_fixture_is_balanced_deterministic_and_in_range() {
    let ds = synthetic_dataset(100, 2, 5);
    assert_eq!(ds.len(), 100);
    let ones = ds.labels.iter().filter(|&&l| l == 1).count();
    assert!((49..=51).contains(&ones));
    assert_eq!(ds, synthetic_dataset(100, 2, 5));
    assert_ne!(ds.images, synthetic_dataset(100, 2, 6).images);
    assert!(ds.images.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn standardized_channel_means_near_zero() {
    let ds = synthetic_dataset(500, 10, 9);
    for m in ds.standardized_channel_means() {
        assert!(m.abs() < 0.02, "{m}");
    }
    let dir = std::env::var_os("EAANET_DATA_DIR").map(std::path::PathBuf::from);
    if let Some(dir) = dir.filter(|d| eaanet::data::cifar10_present(d)) {
        let (train, _) = load_cifar10(&dir).unwrap();
        assert!(!train.images.iter().any(|p| p.is_nan()));
        for m in train.standardized_channel_means() {
            assert!(m.abs() < 0.02, "{m}");
        }
    }
}

#[test]
fn linear_probe_separates_synthetic_classes() {
    let train = synthetic_dataset(400, 10, 11);
    let test = synthetic_dataset(200, 10, 12);
    let mut w = Param::new("w", Tensor::<f32>::zeros(&[10, IMAGE_LEN]));
    let mut b = Param::new("b", Tensor::<f32>::zeros(&[10]));
    let lr = 0.05f32;
    let mut batches = Cycle {
        ds: &train,
        batch: 100,
        epoch: 0,
        it: batch_iter(&train, 100, 0, false).unwrap(),
    };
    for _ in 0..50 {
        let batch = batches.next_batch();
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.reshape(&[batch.labels.len(), IMAGE_LEN]).unwrap());
        let (wv, bv) = (tape.param(&w), tape.param(&b));
        let y = tape.linear(x, wv, Some(bv)).unwrap();
        let loss = tape.cross_entropy(y, &batch.labels).unwrap();
        w.zero_grad();
        b.zero_grad();
        tape.backward_into(loss, [&mut w, &mut b]).unwrap();
        for p in [&mut w, &mut b] {
            let g = p.grad.clone();
            for (v, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * g;
            }
        }
    }
    let all = batch_iter::<f32>(&test, test.len(), 0, false).unwrap().next().unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(all.images.reshape(&[test.len(), IMAGE_LEN]).unwrap());
    let (wv, bv) = (tape.param(&w), tape.param(&b));
    let y = tape.linear(x, wv, Some(bv)).unwrap();
    let acc = eaanet::train::topk_accuracy(tape.value(y), &all.labels, 1).unwrap();
    assert!(acc >= 90.0, "linear probe accuracy {acc}");
}

/// Endless stream of epochs over one dataset.
struct Cycle<'a> {
    ds: &'a Dataset,
    batch: usize,
    epoch: u64,
    it: eaanet::data::BatchIter<'a, f32>,
}

impl<'a> Cycle<'a> {
    fn next_batch(&mut self) -> eaanet::data::Batch<f32> {
        loop {
            if let Some(b) = self.it.next() {
                return b;
            }
            self.epoch += 1;
            self.it = batch_iter(self.ds, self.batch, self.epoch, false).unwrap();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_preserves_labels_and_shape(seed in 0u64..1000, n in 1usize..12, batch in 1usize..5) {
        let ds = synthetic_dataset(n, 10, seed);
        let plain: Vec<_> = batch_iter::<f32>(&ds, batch, seed, false).unwrap().collect();
        let aug: Vec<_> = batch_iter::<f32>(&ds, batch, seed, true).unwrap().collect();
        prop_assert_eq!(plain.len(), aug.len());
        for (p, a) in plain.iter().zip(&aug) {
            prop_assert_eq!(&p.labels, &a.labels);
            prop_assert_eq!(p.images.shape(), a.images.shape());
            prop_assert_eq!(a.images.shape()[1..].to_vec(), vec![3, 32, 32]);
            prop_assert!(!a.images.has_non_finite());
        }
    }
}
