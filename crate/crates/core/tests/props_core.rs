use std::collections::VecDeque;

use pgr_core::labelio::{zscore_foreground, Gray8, ImageGrid, LabelGrid};
use pgr_core::numerics::{Tape, Tensor};
use pgr_core::prior::{
    connected_components, detect_peaks, extract_priors, scale_distribution, PriorConfig,
};
use pgr_core::retention::{
    decay_mask, retention_parallel, retention_recurrent, HeadWeights, RetentionParams,
};
use pgr_core::Exec;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn grid(max: usize) -> impl Strategy<Value = LabelGrid> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop::bool::weighted(0.35), h * w).prop_map(move |bits| {
            LabelGrid::new(h, w, bits.into_iter().map(u8::from).collect()).unwrap()
        })
    })
}

/// Flood fill from every unvisited foreground pixel.
fn bfs_count(g: &LabelGrid) -> usize {
    let mut seen = vec![false; g.height * g.width];
    let mut count = 0;
    for start in 0..seen.len() {
        if seen[start] || g.labels[start] == 0 {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(p) = q.pop_front() {
            let (y, x) = ((p / g.width) as i64, (p % g.width) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= g.height as i64 || nx >= g.width as i64 {
                        continue;
                    }
                    let np = ny as usize * g.width + nx as usize;
                    if !seen[np] && g.labels[np] != 0 {
                        seen[np] = true;
                        q.push_back(np);
                    }
                }
            }
        }
    }
    count
}

/// Masks of the given size holding a few filled squares each.
fn square_corpus(size: usize) -> impl Strategy<Value = Vec<LabelGrid>> {
    let square = (4..=14usize, 0..size, 0..size);
    prop::collection::vec(prop::collection::vec(square, 1..=3), 1..=12).prop_map(move |masks| {
        masks
            .into_iter()
            .map(|sq| {
                let mut g = LabelGrid::zeros(size, size);
                for (s, y0, x0) in sq {
                    for y in y0..(y0 + s).min(size) {
                        for x in x0..(x0 + s).min(size) {
                            g.set(y, x, 1);
                        }
                    }
                }
                g
            })
            .collect()
    })
}

fn head(d: usize, dh: usize, gamma: f64, seed: &[f64]) -> HeadWeights {
    let take = |off: usize| {
        let data = (0..d * dh).map(|i| seed[(off + i * 7) % seed.len()]).collect();
        Tensor::new(vec![d, dh], data).unwrap()
    };
    HeadWeights {
        w_q: take(0),
        w_k: take(3),
        w_v: take(5),
        gamma,
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(t in (1..6usize, 1..9usize).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let s = tape.softmax(v).unwrap();
        let cols = t.shape()[1];
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_matmul_is_bitwise_neutral(
        (a, b) in (1..6usize, 1..6usize, 1..6usize)
            .prop_flat_map(|(m, k, n)| (tensor(vec![m, k]), tensor(vec![k, n])))
    ) {
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b));
        let eye = tape.constant(Tensor::eye(a.shape()[1]));
        let ai = tape.matmul(av, eye).unwrap();
        let lhs = tape.matmul(ai, bv).unwrap();
        let rhs = tape.matmul(av, bv).unwrap();
        prop_assert_eq!(tape.value(lhs).data(), tape.value(rhs).data());
    }

    #[test]
    fn pgm_round_trips(
        img in (1..20usize, 1..20usize).prop_flat_map(|(w, h)| {
            prop::collection::vec(any::<u8>(), w * h).prop_map(move |p| Gray8::new(w, h, p).unwrap())
        })
    ) {
        let bytes = img.encode();
        let back = Gray8::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn zscore_keeps_background_and_is_idempotent(
        pixels in prop::collection::vec(prop_oneof![Just(0u8), 1u8..=255], 64)
    ) {
        let g = Gray8::new(8, 8, pixels.clone()).unwrap();
        let img = ImageGrid::from_grays(&[g]).unwrap();
        let once = zscore_foreground(&img);
        for (a, b) in pixels.iter().zip(once.image.channel(0)) {
            if *a == 0 {
                prop_assert_eq!(*b, 0.0);
            }
        }
        let twice = zscore_foreground(&once.image);
        for (a, b) in once.image.channel(0).iter().zip(twice.image.channel(0)) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn component_count_matches_flood_fill(g in grid(24)) {
        prop_assert_eq!(connected_components(&g, &[1]).len(), bfs_count(&g));
    }

    #[test]
    fn component_geometry(g in grid(24)) {
        for c in connected_components(&g, &[1]) {
            let (x0, y0, x1, y1) = c.bbox;
            prop_assert_eq!(c.w, x1 - x0 + 1);
            prop_assert_eq!(c.h, y1 - y0 + 1);
            prop_assert_eq!(c.s, c.h.max(c.w));
            prop_assert_eq!(c.center, ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0));
        }
    }

    #[test]
    fn priors_ignore_corpus_order(corpus in square_corpus(40), rot in 0..12usize) {
        let cfg = PriorConfig { s_min: 3, s_valid: 4, d_min: 3, neighbor_radius: 10.0, n: 5, ..PriorConfig::default() };
        let a = extract_priors(&corpus, &cfg, Exec::Sequential).unwrap();
        let mut shuffled = corpus.clone();
        shuffled.rotate_left(rot % corpus.len());
        shuffled.reverse();
        let b = extract_priors(&shuffled, &cfg, Exec::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn peaks_are_spaced_and_bounded(corpus in square_corpus(48), d_min in 1..8usize, n in 1..6usize) {
        let cfg = PriorConfig { s_min: 3, s_valid: 4, d_min, neighbor_radius: 10.0, n, ..PriorConfig::default() };
        let comps: Vec<_> = corpus.iter().flat_map(|m| connected_components(m, &[1])).collect();
        let dist = scale_distribution(&comps, cfg.s_valid);
        let peaks = detect_peaks(&dist, d_min, n);
        prop_assert!(peaks.len() <= n);
        for (i, a) in peaks.iter().enumerate() {
            for b in &peaks[i + 1..] {
                prop_assert!(a.abs_diff(*b) >= d_min);
            }
        }
        let set = extract_priors(&corpus, &cfg, Exec::Sequential).unwrap();
        prop_assert!(set.len() <= n);
        for p in &set.priors {
            prop_assert_eq!(p.r * 48.0, p.peak_size as f64);
            prop_assert!(p.r > 0.0 && p.r <= 1.0);
        }
        for w in set.priors.windows(2) {
            prop_assert!(w[0].support >= w[1].support);
        }
    }

    #[test]
    fn retention_forms_agree(
        n in 1..=64usize,
        d in 1..=32usize,
        heads in 1..=4usize,
        vals in prop::collection::vec(-0.5f64..0.5, 97),
        gammas in prop::collection::vec(0.5f64..=1.0, 4),
    ) {
        let dh = (d / heads).max(1);
        let params = RetentionParams {
            heads: (0..heads).map(|h| head(d, dh, gammas[h], &vals[h..])).collect(),
        };
        let x = Tensor::new(vec![n, d], (0..n * d).map(|i| vals[(i * 13 + 5) % vals.len()]).collect()).unwrap();
        let p = retention_parallel(&x, &params).unwrap();
        let r = retention_recurrent(&x, &params).unwrap();
        let scale = p.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        prop_assert!(p.max_abs_diff(&r) / scale <= 1e-5);
    }

    #[test]
    fn retention_is_causal(
        n in 2..=24usize,
        t in 0..24usize,
        vals in prop::collection::vec(-1.0f64..1.0, 61),
        bump in 0.1f64..2.0,
    ) {
        let t = t % n;
        let d = 4;
        let params = RetentionParams { heads: vec![head(d, 2, 0.9, &vals), head(d, 2, 0.97, &vals[9..])] };
        let mut x = Tensor::new(vec![n, d], (0..n * d).map(|i| vals[(i * 11) % vals.len()]).collect()).unwrap();
        let before = retention_parallel(&x, &params).unwrap();
        x.data_mut()[t * d + 1] += bump;
        let after = retention_parallel(&x, &params).unwrap();
        let w = params.out_dim();
        prop_assert_eq!(&before.data()[..t * w], &after.data()[..t * w]);
    }

    #[test]
    fn decay_shrinks_with_distance(n in 1..40usize, gamma in 0.01f64..=1.0) {
        let m = decay_mask(n, gamma).unwrap();
        for i in 0..n {
            for j in 1..=i {
                prop_assert!(m.at(&[i, j - 1]).abs() <= m.at(&[i, j]).abs());
            }
        }
    }
}
