use cobl::compositor::{composite, panoptic_project, LayerImage, LayerStack, PanopticMap, DEFAULT_DELTA};
use cobl::eval::{ari, hungarian_match, solve_assignment};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 8;

fn random_layer(rng: &mut ChaCha8Rng, opaque: bool) -> LayerImage {
    let color = Array3::from_shape_simple_fn((SIDE, SIDE, 3), || rng.gen());
    let alpha = if opaque {
        Array2::ones((SIDE, SIDE))
    } else {
        let p = rng.gen_range(0.0..1.0);
        Array2::from_shape_simple_fn((SIDE, SIDE), || f64::from(u8::from(rng.gen_bool(p))))
    };
    LayerImage::new(color, alpha).unwrap()
}

fn random_stack(rng: &mut ChaCha8Rng, n: usize) -> LayerStack {
    let mut layers = vec![random_layer(rng, true)];
    layers.extend((1..n).map(|_| random_layer(rng, false)));
    LayerStack::new(layers).unwrap()
}

fn shuffled_foreground(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (1..n).collect();
    perm.shuffle(rng);
    perm.insert(0, 0);
    perm
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn disjoint_layers_commute(seed in any::<u64>(), n_fg in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let owner = Array2::from_shape_simple_fn((SIDE, SIDE), || rng.gen_range(0..=n_fg));
        let mut layers = vec![random_layer(&mut rng, true)];
        for k in 1..=n_fg {
            let color = Array3::from_shape_simple_fn((SIDE, SIDE, 3), || rng.gen());
            layers.push(LayerImage::new(color, owner.mapv(|o| f64::from(u8::from(o == k)))).unwrap());
        }
        let stack = LayerStack::new(layers).unwrap();
        let perm = shuffled_foreground(&mut rng, n_fg + 1);
        let a = composite(&stack, DEFAULT_DELTA).unwrap();
        let b = composite(&stack.permuted(&perm), DEFAULT_DELTA).unwrap();
        let worst = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-9);
    }

    #[test]
    fn trailing_empty_layers_change_nothing(seed in any::<u64>(), n in 1usize..5, extra in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = random_stack(&mut rng, n);
        let padded = stack.clone().padded(n + extra);
        prop_assert_eq!(panoptic_project(&stack), panoptic_project(&padded));
        prop_assert_eq!(composite(&stack, DEFAULT_DELTA).unwrap(), composite(&padded, DEFAULT_DELTA).unwrap());
    }

    #[test]
    fn matching_ignores_prediction_order(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_stack(&mut rng, n);
        let pred = random_stack(&mut rng, n);
        let perm = shuffled_foreground(&mut rng, n);
        let a = hungarian_match(&pred, &truth).unwrap();
        let b = hungarian_match(&pred.permuted(&perm), &truth).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-9 * (1.0 + a.total));
    }

    #[test]
    fn matching_a_shuffled_copy_is_free(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_stack(&mut rng, n);
        let perm = shuffled_foreground(&mut rng, n);
        let m = hungarian_match(&truth.permuted(&perm), &truth).unwrap();
        prop_assert!(m.total.abs() <= 1e-12);
    }

    #[test]
    fn assignment_is_a_permutation(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let mut cols = solve_assignment(&cost).unwrap().columns;
        cols.sort_unstable();
        prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn ari_is_symmetric_and_ignores_label_names(seed in any::<u64>(), k in 1u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_simple_fn((SIDE, SIDE), || rng.gen_range(0..k));
        let b = Array2::from_shape_simple_fn((SIDE, SIDE), || rng.gen_range(0..k));
        let mut names: Vec<u32> = (100..100 + k).collect();
        names.shuffle(&mut rng);
        let pa = PanopticMap { labels: a.clone() };
        let pb = PanopticMap { labels: b };
        let renamed = PanopticMap { labels: a.mapv(|l| names[l as usize]) };
        let base = ari(&pa, &pb).unwrap();
        prop_assert!((base - ari(&pb, &pa).unwrap()).abs() <= 1e-12);
        prop_assert!((base - ari(&renamed, &pb).unwrap()).abs() <= 1e-12);
        prop_assert!(base <= 1.0 + 1e-12);
    }
}
