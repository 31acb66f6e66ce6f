use coda_core::density::{generate_density, PointAnnotation, SigmaMode};
use coda_core::kernels::{block_sum_forward, conv2d_forward, ConvSpec};
use coda_core::metrics::{gmae, map_count};
use coda_core::pyramid::{build_pyramid, Rect};
use coda_core::{losses, DenseGrid, Tape};
use proptest::prelude::*;

fn points(w: usize, h: usize, max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64), 0..=max)
}

fn sigma_mode() -> impl Strategy<Value = SigmaMode> {
    prop_oneof![
        (0.5..6.0f64).prop_map(|sigma| SigmaMode::Fixed { sigma }),
        (1usize..5, 0.1..0.5f64).prop_map(|(k, beta)| SigmaMode::Adaptive { k, beta, fallback_sigma: 3.0 }),
    ]
}

fn grid(h: usize, w: usize) -> impl Strategy<Value = DenseGrid> {
    prop::collection::vec(0.0..2.0f64, h * w).prop_map(move |v| DenseGrid::from_2d(h, w, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn density_integral_is_point_count(
        pts in points(40, 28, 30),
        mode in sigma_mode(),
        scale in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let ann = PointAnnotation::new("p", 40, 28, pts.clone()).unwrap();
        let map = generate_density(&ann, mode, scale).unwrap();
        let n = pts.len() as f64;
        prop_assert!((map.grid.sum() - n).abs() <= 1e-6 * n.max(1.0));
        prop_assert!(map.grid.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn density_is_translation_equivariant(
        // coordinates on a 1/256 grid so that adding the offset is exact
        pts in prop::collection::vec((2560u32..5120, 2560u32..5120), 1..6)
            .prop_map(|v| v.into_iter().map(|(x, y)| (x as f64 / 256.0, y as f64 / 256.0)).collect::<Vec<_>>()),
        sigma in 0.5..2.5f64,
        dx in 0usize..6,
        dy in 0usize..6,
    ) {
        let mode = SigmaMode::Fixed { sigma };
        let a = generate_density(&PointAnnotation::new("a", 40, 40, pts.clone()).unwrap(), mode, 1).unwrap().grid;
        let moved: Vec<_> = pts.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect();
        let b = generate_density(&PointAnnotation::new("b", 40, 40, moved).unwrap(), mode, 1).unwrap().grid;
        for y in 0..40 - dy {
            for x in 0..40 - dx {
                prop_assert_eq!(a.at(0, 0, y, x), b.at(0, 0, y + dy, x + dx));
            }
        }
    }

    #[test]
    fn pyramid_crops_nest_and_counts_grow(
        (w, h) in (20usize..120, 20usize..120),
        frac in 0.3..1.0f64,
        pts in points(120, 120, 40),
    ) {
        let pw = ((w as f64 * frac) as usize).max(20).min(w);
        let ph = ((h as f64 * frac) as usize).max(20).min(h);
        let rect = Rect::new(w - pw, 0, w, ph);
        let pts: Vec<_> = pts.into_iter().filter(|&(x, y)| x < w as f64 && y < h as f64).collect();
        let ann = PointAnnotation::new("p", w, h, pts).unwrap();
        let img = DenseGrid::zeros([1, 1, h, w]);
        let pyr = build_pyramid(&img, rect, &[0.8, 0.6, 0.4], (32, 32), Some(&ann)).unwrap();
        let (cx, cy) = rect.center();
        for pair in pyr.levels.windows(2) {
            prop_assert!(pair[1].rect.contains_rect(&pair[0].rect));
        }
        for l in &pyr.levels {
            let (lx, ly) = l.rect.center();
            prop_assert!((lx - cx).abs() <= 0.5 && (ly - cy).abs() <= 0.5);
        }
        let counts = pyr.gt_counts().unwrap();
        prop_assert!(counts.windows(2).all(|c| c[0] <= c[1]));
        let mut t = Tape::new();
        let vars: Vec<_> = counts.iter().map(|&c| t.constant(DenseGrid::scalar(c))).collect();
        let r = losses::ranking_loss(&mut t, &vars, 0.0).unwrap();
        prop_assert_eq!(t.scalar_value(r), 0.0);
    }

    #[test]
    fn gmae_grows_with_level_and_starts_at_count_error(pred in grid(8, 8), gt in grid(8, 8)) {
        let g: Vec<f64> = (0..4).map(|l| gmae(&pred, &gt, l, None).unwrap()).collect();
        prop_assert_eq!(g[0], (map_count(&pred, None) - map_count(&gt, None)).abs());
        prop_assert!(g.windows(2).all(|p| p[0] <= p[1] + 1e-12));
    }

    #[test]
    fn same_padding_preserves_spatial_shape(h in 4usize..14, w in 4usize..14, d in 1usize..4, c in 1usize..3) {
        let x = DenseGrid::zeros([1, c, h, w]);
        let k = DenseGrid::zeros([2, c, 3, 3]);
        let y = conv2d_forward(&x, &k, None, ConvSpec::new(1, d, d)).unwrap();
        prop_assert_eq!(y.shape(), [1, 2, h, w]);
    }

    #[test]
    fn block_sum_conserves_mass(x in grid(16, 12), f in prop::sample::select(vec![1usize, 2, 4])) {
        let y = block_sum_forward(&x, f).unwrap();
        prop_assert!((y.sum() - x.sum()).abs() < 1e-9);
    }
}
