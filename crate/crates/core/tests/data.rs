use std::fs;
use std::path::Path;

use icfd::data::{
    export_split, generate_synthetic, load_folder, load_folder_split, read_luma, ClassDifficulty, Dataset, DatasetSpec, FolderLayout,
};
use nalgebra::{DMatrix, DVector};
use icfd::Error;

fn spec(per_class: usize, size: usize) -> DatasetSpec {
    DatasetSpec {
        counts: vec![per_class; 4],
        image_size: size,
        ..DatasetSpec::default()
    }
}

const LAGS: [usize; 6] = [1, 2, 3, 4, 6, 8];
const F: usize = LAGS.len() + 1;

/// Mean intensity plus the normalized autocorrelation at a few lags,
/// averaged over both axes. Grain size sets how fast it decays.
fn features(px: &[f32], n: usize) -> [f64; F] {
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
    let c: Vec<f64> = px.iter().map(|&v| v as f64 - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64;
    let mut out = [0.0; F];
    out[0] = mean;
    for (j, &lag) in LAGS.iter().enumerate() {
        let mut acc = 0.0;
        for y in 0..n - lag {
            for x in 0..n - lag {
                acc += c[y * n + x] * (c[y * n + x + lag] + c[(y + lag) * n + x]);
            }
        }
        out[j + 1] = acc / (2.0 * ((n - lag) * (n - lag)) as f64 * var.max(1e-12));
    }
    out
}

fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let n = train.height();
    let k = train.num_classes();
    let feats = |ds: &Dataset| -> Vec<([f64; F], usize)> {
        ds.images().iter().map(|im| (features(im.pixels(), n), im.label())).collect()
    };
    let (tr, te) = (feats(train), feats(test));
    let mut scale = [0.0; F];
    for d in 0..F {
        let mu = tr.iter().map(|f| f.0[d]).sum::<f64>() / tr.len() as f64;
        scale[d] = (tr.iter().map(|f| (f.0[d] - mu).powi(2)).sum::<f64>() / tr.len() as f64).sqrt().max(1e-12);
    }
    let mut centroid = vec![[0.0; F]; k];
    let mut count = vec![0usize; k];
    for (f, y) in &tr {
        for d in 0..F {
            centroid[*y][d] += f[d] / scale[d];
        }
        count[*y] += 1;
    }
    for (c, m) in centroid.iter_mut().zip(&count) {
        c.iter_mut().for_each(|v| *v /= *m as f64);
    }
    let hits = te
        .iter()
        .filter(|(f, y)| {
            let dist = |c: &[f64; F]| (0..F).map(|d| (f[d] / scale[d] - c[d]).powi(2)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&centroid[a]).total_cmp(&dist(&centroid[b]))).unwrap();
            best == *y
        })
        .count();
    hits as f64 / te.len() as f64
}

#[test]
fn default_synthetic_classes_are_separable() {
    let split = generate_synthetic(&spec(60, 64)).unwrap();
    let acc = nearest_centroid_accuracy(&split.train, &split.test);
    assert!(acc > 0.7, "nearest-centroid accuracy {acc}");
}

/// Ridge-regularized least squares on raw pixels with +-1 targets.
fn least_squares_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.height() * train.width() + 1;
    let design = |ds: &Dataset| {
        DMatrix::from_fn(ds.len(), d, |i, j| if j + 1 == d { 1.0 } else { ds.images()[i].pixels()[j] as f64 })
    };
    let target = |ds: &Dataset| DVector::from_iterator(ds.len(), ds.labels().iter().map(|&y| if y == 0 { -1.0 } else { 1.0 }));
    let (x, y) = (design(train), target(train));
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * 1e-2;
    let w = gram.cholesky().expect("positive definite").solve(&(x.transpose() * y));
    let scores = design(test) * w;
    let hits = scores.iter().zip(test.labels()).filter(|(s, y)| (**s > 0.0) == (*y == 1)).count();
    hits as f64 / test.len() as f64
}

fn two_class(a: ClassDifficulty, b: ClassDifficulty) -> DatasetSpec {
    DatasetSpec {
        classes: vec![a, b],
        counts: vec![150, 150],
        image_size: 16,
        seed: 21,
    }
}

#[test]
fn identical_classes_are_indistinguishable() {
    let c = ClassDifficulty::new(3.0, 0.25, 0.0);
    let split = generate_synthetic(&two_class(c, c)).unwrap();
    let acc = least_squares_accuracy(&split.train, &split.test);
    assert!((acc - 0.5).abs() < 0.15, "least-squares accuracy {acc} on identical classes");
}

#[test]
fn wider_separation_is_easier() {
    let accs: Vec<f64> = [0.0, 0.03, 0.1]
        .iter()
        .map(|&shift| {
            let split = generate_synthetic(&two_class(
                ClassDifficulty::new(3.0, 0.25, 0.0),
                ClassDifficulty::new(3.0, 0.25, shift),
            ))
            .unwrap();
            nearest_centroid_accuracy(&split.train, &split.test)
        })
        .collect();
    assert!(accs[0] < accs[1] && accs[1] < accs[2], "{accs:?}");
}

#[test]
fn export_then_load_matches_to_8_bits() {
    let split = generate_synthetic(&spec(6, 16)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_split(&split, dir.path()).unwrap();
    let rows = fs::read_to_string(&manifest).unwrap().lines().count();
    assert_eq!(rows, 1 + split.train.len() + split.test.len());

    let back = load_folder_split(dir.path(), &FolderLayout::default(), 0).unwrap();
    for (a, b) in [(&split.train, &back.train), (&split.test, &back.test)] {
        assert_eq!(a.class_names(), b.class_names());
        assert_eq!(a.labels(), b.labels());
        for (x, y) in a.images().iter().zip(b.images()) {
            for (p, q) in x.pixels().iter().zip(y.pixels()) {
                assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}

fn write_rgb(path: &Path, rgb: [u8; 3], side: u32) {
    image::RgbImage::from_pixel(side, side, image::Rgb(rgb)).save(path).unwrap();
}

#[test]
fn colour_images_are_reduced_to_luma() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.png");
    write_rgb(&p, [200, 40, 90], 16);
    let (px, h, w) = read_luma(&p, None).unwrap();
    assert_eq!((h, w), (16, 16));
    let want = (0.299 * 200.0 + 0.587 * 40.0 + 0.114 * 90.0) / 255.0;
    assert!(px.iter().all(|&v| (v as f64 - want).abs() < 1e-5));

    let (small, h, w) = read_luma(&p, Some(8)).unwrap();
    assert_eq!((h, w, small.len()), (8, 8, 64));
}

#[test]
fn corrupt_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["a", "b"] {
        fs::create_dir(dir.path().join(class)).unwrap();
        write_rgb(&dir.path().join(class).join("0.png"), [10, 10, 10], 16);
    }
    let bad = dir.path().join("b").join("1.png");
    fs::write(&bad, b"\x89PNG garbage").unwrap();
    match load_folder(dir.path(), &FolderLayout::default()) {
        Err(Error::Item { path, .. }) => assert_eq!(path, bad),
        Err(other) => panic!("expected an item error, got {other}"),
        Ok(_) => panic!("corrupt file accepted"),
    }
}

#[test]
fn single_class_folder_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("only")).unwrap();
    write_rgb(&dir.path().join("only").join("0.png"), [1, 2, 3], 16);
    assert!(load_folder(dir.path(), &FolderLayout::default()).is_err());
}
