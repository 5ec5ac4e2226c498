mod common;

use common::{brute_in_hull, channel, concat_channels, naive_conv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2d::geometry::trusted_region_mask;
use s2d::image::DepthMap;
use s2d::layers::{self, ConvNodes};
use s2d::losses::{berhu, berhu_threshold, loss_berhu, loss_l1, loss_l2};
use s2d::{compute_metrics, Shape, Tape, Tensor, ValidMask};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tape_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let wi = tape.constant(w.clone());
    let bi = b.map(|b| tape.constant(b.clone()));
    let y = layers::conv2d(
        &mut tape,
        xi,
        &ConvNodes {
            weight: wi,
            bias: bi,
            stride,
            pad,
        },
    )
    .unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(1);
    let x = Tensor::randn([2, 3, 9, 9], 1.0, &mut r);
    let w = Tensor::randn([4, 3, 3, 3], 1.0, &mut r);
    let b = Tensor::randn([1, 4, 1, 1], 1.0, &mut r);
    let got = tape_conv(&x, &w, Some(&b), 2, 1);
    assert_eq!(got.shape(), Shape::new(2, 4, 5, 5));
    assert!(got.max_rel_diff(&naive_conv(&x, &w, Some(&b), 2, 1), 1e-300).unwrap() <= 1e-12);

    for seed in 0..40 {
        let mut r = rng(100 + seed);
        let (n, c, o) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let k = r.gen_range(1..=5);
        let (h, wd) = (r.gen_range(k..=9), r.gen_range(k..=9));
        let stride = r.gen_range(1..=3);
        let pad = r.gen_range(0..=k / 2);
        let x = Tensor::randn([n, c, h, wd], 1.0, &mut r);
        let w = Tensor::randn([o, c, k, k], 1.0, &mut r);
        let got = tape_conv(&x, &w, None, stride, pad);
        let want = naive_conv(&x, &w, None, stride, pad);
        assert!(got.max_rel_diff(&want, 1e-300).unwrap() <= 1e-12, "case {seed}");
    }
}

#[test]
fn identity_kernel_is_identity() {
    let mut r = rng(2);
    let x = Tensor::randn([1, 1, 5, 6], 1.0, &mut r);
    let got = tape_conv(&x, &Tensor::ones([1, 1, 1, 1]), Some(&Tensor::zeros([1, 1, 1, 1])), 1, 0);
    assert_eq!(got, x);
}

/// ⟨T(y), x⟩ = ⟨y, C(x)⟩ where C is the strided convolution whose adjoint
/// the transposed convolution is. For k = 3 the 2H output crop corresponds
/// to zero-padding x to 2H+1 before convolving.
fn adjoint_gap(k: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, a, b, h, w) = (2, 3, 2, 4, 5);
    let y = Tensor::randn([n, a, h, w], 1.0, &mut r);
    let weight = Tensor::randn([a, b, k, k], 1.0, &mut r);
    let x = Tensor::randn([n, b, 2 * h, 2 * w], 1.0, &mut r);

    let mut tape = Tape::new();
    let yi = tape.constant(y.clone());
    let wi = tape.constant(weight.clone());
    let t = layers::transposed_conv2d(&mut tape, yi, wi, None).unwrap();
    let lhs = tape.value(t).dot(&x).unwrap();

    let extra = k - 2;
    let mut xp = Tensor::zeros([n, b, 2 * h + extra, 2 * w + extra]);
    for i in 0..n {
        for c in 0..b {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    xp.set(i, c, yy, xx, x.get(i, c, yy, xx));
                }
            }
        }
    }
    let cx = naive_conv(&xp, &weight, None, 2, 0);
    let rhs = y.dot(&cx).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
}

#[test]
fn transposed_conv_is_adjoint() {
    for seed in 0..10 {
        assert!(adjoint_gap(2, seed) <= 1e-10);
        assert!(adjoint_gap(3, seed) <= 1e-10);
    }
}

#[test]
fn depthwise_equals_per_channel_then_pointwise() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let (c, o, k) = (4, 16, 7);
        let x = Tensor::randn([2, c, 13, 11], 1.0, &mut r);
        let spatial = Tensor::randn([c, 1, k, k], 1.0, &mut r);
        let pw = Tensor::randn([o, c, 1, 1], 1.0, &mut r);
        let bias = Tensor::randn([1, o, 1, 1], 1.0, &mut r);

        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let si = tape.constant(spatial.clone());
        let pi = tape.constant(pw.clone());
        let bi = tape.constant(bias.clone());
        let out = layers::depthwise_separable_conv(
            &mut tape,
            xi,
            si,
            2,
            3,
            &ConvNodes {
                weight: pi,
                bias: Some(bi),
                stride: 1,
                pad: 0,
            },
        )
        .unwrap();

        let per_channel: Vec<Tensor> = (0..c)
            .map(|ch| {
                let kernel = Tensor::from_vec([1, 1, k, k], spatial.plane(ch, 0).to_vec()).unwrap();
                naive_conv(&channel(&x, ch), &kernel, None, 2, 3)
            })
            .collect();
        let want = naive_conv(&concat_channels(&per_channel), &pw, Some(&bias), 1, 0);
        assert!(tape.value(out).max_rel_diff(&want, 1e-300).unwrap() <= 1e-12);
    }
    // Parameter count for 4 → 16 channels with a 7×7 kernel.
    assert_eq!(4 * 49 + 16 * 4, 260);
}

#[test]
fn metrics_hand_example() {
    let m = compute_metrics(&[1.0, 5.0], &[2.0, 4.0], &[true, true]).unwrap();
    assert_eq!(m.rmse, 1.0);
    assert_eq!(m.rel, 0.375);
    assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 50.0, 50.0));
    assert_eq!(m.pixel_count, 2);

    let id = compute_metrics(&[3.0, 4.5], &[3.0, 4.5], &[true, true]).unwrap();
    assert_eq!((id.rmse, id.rel, id.delta1, id.delta3), (0.0, 0.0, 100.0, 100.0));
    assert!(compute_metrics(&[1.0], &[0.0], &[true]).is_err());
    assert!(compute_metrics(&[1.0], &[1.0], &[false]).is_err());
}

fn loss_value(kind: &str, pred: &[f64], gt: &[f64]) -> f64 {
    let shape = Shape::new(1, 1, 1, pred.len());
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_vec(shape, pred.to_vec()).unwrap());
    let g = Tensor::from_vec(shape, gt.to_vec()).unwrap();
    let mask = ValidMask::new(shape, vec![true; pred.len()]).unwrap();
    let l = match kind {
        "l1" => loss_l1(&mut tape, p, &g, &mask),
        "l2" => loss_l2(&mut tape, p, &g, &mask),
        _ => loss_berhu(&mut tape, p, &g, &mask),
    }
    .unwrap();
    tape.value(l).item()
}

#[test]
fn loss_hand_examples() {
    assert_eq!(loss_value("l2", &[1.0, 2.0], &[0.0, 0.0]), 2.5);
    assert_eq!(loss_value("l1", &[1.0, -2.0], &[0.0, 0.0]), 1.5);
    assert_eq!(loss_value("berhu", &[1.0, 10.0], &[0.0, 0.0]), 13.5);
    assert_eq!((berhu(1.0, 2.0), berhu(10.0, 2.0)), (1.0, 26.0));
    for kind in ["l1", "l2", "berhu"] {
        assert_eq!(loss_value(kind, &[1.5, 2.5], &[1.5, 2.5]), 0.0);
    }
    let (c, idx) = berhu_threshold(&[1.0, -10.0, 3.0], &[0.0; 3], &[true, true, true]).unwrap();
    assert_eq!((c, idx), (2.0, 1));
}

#[test]
fn hull_mask_matches_exhaustive_test() {
    for seed in 0..300 {
        let mut r = rng(500 + seed);
        let count = r.gen_range(1..=12);
        let mut sparse = DepthMap::zeros(16, 16);
        let mut pts = Vec::new();
        for _ in 0..count {
            let (y, x) = (r.gen_range(0..16), r.gen_range(0..16));
            sparse.set(y, x, 1.0);
            pts.push((x as i64, y as i64));
        }
        let mask = trusted_region_mask(&sparse).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(mask[y * 16 + x], brute_in_hull(&pts, (x as i64, y as i64)), "seed {seed} at ({x},{y})");
            }
        }
    }
}
