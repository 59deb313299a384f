mod common;

use capsule_classify::augment::{apply_pipeline, gaussian_blur, hflip, resize_bilinear, vflip, AugmentConfig};
use capsule_classify::data_io::{
    decode_image, load_manifest, read_predictions_csv, save_image, write_predictions_csv, Checkpoint,
};
use capsule_classify::ensemble::{align, ensemble_average, ModelOutputs, OutputKind};
use capsule_classify::image::InputSpec;
use capsule_classify::loss::{focal_loss, FocalConfig, Reduction};
use capsule_classify::metrics::auc_ovr;
use capsule_classify::nn::{init_params, log_softmax_row, softmax, Arch};
use capsule_classify::sampling::AliasTable;
use capsule_classify::{ClassCatalog, ImageBuffer, Matrix};
use common::brute_auc;
use proptest::prelude::*;

fn logits(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 2..=max_cols)
        .prop_flat_map(|(n, k)| (Just(n), Just(k), prop::collection::vec(-30.0..30.0f64, n * k)))
}

fn image(max_side: usize) -> impl Strategy<Value = ImageBuffer> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0..=1.0f64, 3 * w * h).prop_map(move |data| ImageBuffer::new(w, h, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_are_distributions((n, k, z) in logits(6, 8)) {
        let p = softmax(&Matrix::from_vec(n, k, z).unwrap()).unwrap();
        for i in 0..n {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_loss_bounded_by_cross_entropy((n, k, z) in logits(5, 6), gamma in 0.0..5.0f64, seed in 0usize..100) {
        let targets: Vec<usize> = (0..n).map(|i| (i + seed) % k).collect();
        let m = Matrix::from_vec(n, k, z).unwrap();
        let ce = focal_loss(&m, &targets, &FocalConfig::new(k).with_gamma(0.0)).unwrap();
        let fl = focal_loss(&m, &targets, &FocalConfig::new(k).with_gamma(gamma)).unwrap();
        for (i, &t) in targets.iter().enumerate() {
            let direct = -log_softmax_row(m.row(i))[t];
            prop_assert!((ce.per_sample[i] - direct.min(-(1e-12f64).ln())).abs() <= 1e-12 * direct.max(1.0));
            prop_assert!(fl.per_sample[i] >= 0.0);
            prop_assert!(fl.per_sample[i] <= ce.per_sample[i] + 1e-15);
        }
        let sum = FocalConfig { reduction: Reduction::Sum, ..FocalConfig::new(k).with_gamma(gamma) };
        let total = focal_loss(&m, &targets, &sum).unwrap().total;
        prop_assert!((total / n as f64 - fl.total).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn auc_matches_pairs_and_flips(scores in prop::collection::vec(0u8..6, 2..60), mask in prop::collection::vec(any::<bool>(), 60)) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let pos = &mask[..s.len()];
        let got = auc_ovr(&s, pos).unwrap();
        prop_assert_eq!(got, brute_auc(&s, pos));
        if let Some(a) = got {
            prop_assert!((0.0..=1.0).contains(&a));
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let flipped = auc_ovr(&neg, pos).unwrap().unwrap();
            prop_assert!((a + flipped - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alias_table_reproduces_weights(w in prop::collection::vec(0.0..10.0f64, 1..20)) {
        prop_assume!(w.iter().any(|&x| x > 0.0));
        let t = AliasTable::new(&w).unwrap();
        let total: f64 = w.iter().sum();
        for (p, x) in t.probabilities().iter().zip(&w) {
            prop_assert!((p - x / total).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_is_convex_and_aligned(
        m in 1usize..6,
        n in 1usize..6,
        k in 2usize..5,
        raw in prop::collection::vec(0.01..1.0f64, 150),
        rotate in 0usize..6,
    ) {
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let members: Vec<ModelOutputs> = (0..m).map(|j| {
            let mut v = Vec::new();
            for i in 0..n {
                let row: Vec<f64> = (0..k).map(|c| raw[(j * 25 + i * 5 + c) % raw.len()]).collect();
                let s: f64 = row.iter().sum();
                v.extend(row.iter().map(|x| x / s));
            }
            let mut order = ids.clone();
            let mut mat = Matrix::from_vec(n, k, v).unwrap();
            if j > 0 {
                order.rotate_left(rotate % n);
                let mut rotated = Matrix::zeros(n, k);
                for (dst, id) in order.iter().enumerate() {
                    let src = ids.iter().position(|x| x == id).unwrap();
                    rotated.row_mut(dst).copy_from_slice(mat.row(src));
                }
                mat = rotated;
            }
            ModelOutputs::new(format!("m{j}"), order, mat, OutputKind::Probabilities).unwrap()
        }).collect();
        let aligned = align(members.clone()).unwrap();
        let avg = ensemble_average(&aligned).unwrap();
        for (i, id) in ids.iter().enumerate() {
            for c in 0..k {
                let vals: Vec<f64> = members.iter().map(|mm| {
                    let r = mm.image_ids.iter().position(|x| x == id).unwrap();
                    mm.values.get(r, c)
                }).collect();
                let v = avg.row(i)[c];
                prop_assert!(vals.iter().cloned().fold(f64::INFINITY, f64::min) <= v);
                prop_assert!(v <= vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
            prop_assert!((avg.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flips_are_involutions(img in image(9)) {
        prop_assert_eq!(hflip(&hflip(&img)), img.clone());
        prop_assert_eq!(vflip(&vflip(&img)), img.clone());
    }

    #[test]
    fn resize_and_blur_stay_in_range(img in image(9), w in 1usize..12, h in 1usize..12, sigma in 0.1..2.0f64) {
        let r = resize_bilinear(&img, w, h).unwrap();
        prop_assert_eq!((r.width(), r.height()), (w, h));
        let b = gaussian_blur(&r, sigma).unwrap();
        let (lo, hi) = img.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        prop_assert!(b.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn pipeline_output_has_target_shape(img in image(12), seed in any::<u64>(), index in any::<u64>()) {
        let cfg = AugmentConfig { target_size: (7, 5), ..AugmentConfig::default() };
        let out = apply_pipeline(&img, &cfg, seed, index).unwrap();
        prop_assert_eq!((out.width(), out.height()), (7, 5));
        prop_assert!(out.is_normalized());
        prop_assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predictions_csv_round_trip((n, k, z) in logits(8, 5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = softmax(&Matrix::from_vec(n, k, z).unwrap()).unwrap();
        let cat = ClassCatalog::new((0..k).map(|i| format!("c{i}"))).unwrap();
        let ids: Vec<String> = (0..n).map(|i| format!("d/{i}.png")).collect();
        write_predictions_csv(&path, &ids, p.matrix(), &cat).unwrap();
        let back = read_predictions_csv(&path).unwrap();
        prop_assert_eq!(&back.catalog, &cat);
        for i in 0..n {
            prop_assert_eq!(&back.image_ids[i], &format!("{i}.png"));
            for c in 0..k {
                prop_assert!((back.probs.row(i)[c] - p.row(i)[c]).abs() <= 5e-7);
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(hidden in 1usize..6, k in 2usize..5, seed in any::<u64>(), epoch in 0u64..100, score in 0.0..1.0f64) {
        let arch = Arch::mlp(vec![12, hidden, k]).unwrap();
        let cat = ClassCatalog::new((0..k).map(|i| format!("class {i}"))).unwrap();
        let input = InputSpec { width: 2, height: 2, normalization: Default::default() };
        let ckpt = Checkpoint::new(&init_params(&arch, seed), epoch, score, seed, cat, input).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        let mut bad = bytes.clone();
        let at = 8 + (seed as usize % (bytes.len() - 16));
        bad[at] ^= 1;
        prop_assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn manifest_preserves_rows(labels in prop::collection::vec(0usize..10, 0..40)) {
        let dir = tempfile::tempdir().unwrap();
        let cat = ClassCatalog::default();
        let mut text = String::from("image_path,label\n");
        for (i, &l) in labels.iter().enumerate() {
            text.push_str(&format!("sub/{i}.jpg,{}\n", cat.name(l).unwrap()));
        }
        let path = dir.path().join("m.csv");
        std::fs::write(&path, text).unwrap();
        let m = load_manifest(&path, &cat).unwrap();
        prop_assert_eq!(m.labels(), labels.clone());
        for (i, r) in m.records().iter().enumerate() {
            prop_assert_eq!(&r.image_id, &format!("sub/{i}.jpg"));
        }
    }

    #[test]
    fn png_decode_in_unit_range(img in image(8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image(&path, &img).unwrap();
        let back = decode_image(&path).unwrap();
        prop_assert_eq!((back.width(), back.height()), (img.width(), img.height()));
        prop_assert!(!back.is_normalized());
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
