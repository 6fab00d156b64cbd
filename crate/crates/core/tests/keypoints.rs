//! Heatmap/offset rendering and decoding.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xformer::keypoint::{decode_keypoints, render_gt_maps, Keypoints2D};

const SIZE: usize = 128;

/// Pixel coordinates on the quarter-pixel lattice inside the image.
fn quarter_grid(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let q = |rng: &mut ChaCha8Rng| rng.random_range(0..SIZE * 4) as f64 / 4.0;
    [q(rng), q(rng)]
}

#[test]
fn decode_inverts_render_on_a_thousand_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    while checked < 1000 {
        let coords: Vec<[f64; 2]> = (0..10).map(|_| quarter_grid(&mut rng)).collect();
        let kp = Keypoints2D::new(coords.clone(), vec![true; coords.len()]).unwrap();
        let maps = render_gt_maps(&kp, SIZE, SIZE, 2.0).unwrap();
        let back = decode_keypoints(&maps, 0.05).unwrap();
        assert_eq!(back.coords, coords);
        assert!(back.visible.iter().all(|&v| v));
        checked += coords.len();
    }
}

#[test]
fn gaussian_profile_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        // keypoint on a cell centre, so the peak cell is exactly 1
        let (cx, cy) = (rng.random_range(0..SIZE / 4), rng.random_range(0..SIZE / 4));
        let kp = Keypoints2D::new(vec![[4.0 * cx as f64, 4.0 * cy as f64]], vec![true]).unwrap();
        let maps = render_gt_maps(&kp, SIZE, SIZE, 2.0).unwrap();
        assert_eq!(maps.heatmaps.get(&[0, cy, cx]), 1.0);
        for y in 0..SIZE / 4 {
            for x in 0..SIZE / 4 {
                let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                let expected = (-d2 / 8.0).exp();
                assert!((maps.heatmaps.get(&[0, y, x]) - expected).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn offsets_stay_within_two_cells(xs in prop::collection::vec((-20.0f64..150.0, -20.0f64..150.0), 1..6)) {
        let coords: Vec<[f64; 2]> = xs.iter().map(|&(x, y)| [x, y]).collect();
        let kp = Keypoints2D::new(coords.clone(), vec![true; coords.len()]).unwrap();
        let maps = render_gt_maps(&kp, SIZE, SIZE, 2.0).unwrap();
        prop_assert!(maps.offsets.data().iter().all(|o| (-2.0..=2.0).contains(o)));
        prop_assert!(maps.heatmaps.data().iter().all(|h| (0.0..=1.0).contains(h)));
    }

    #[test]
    fn decoded_coordinates_land_inside_the_image(xs in prop::collection::vec((0.0f64..128.0, 0.0f64..128.0), 1..6)) {
        let coords: Vec<[f64; 2]> = xs.iter().map(|&(x, y)| [x, y]).collect();
        let kp = Keypoints2D::new(coords.clone(), vec![true; coords.len()]).unwrap();
        let back = decode_keypoints(&render_gt_maps(&kp, SIZE, SIZE, 2.0).unwrap(), 0.05).unwrap();
        for (a, b) in back.coords.iter().zip(&coords) {
            // arbitrary coordinates decode to within rounding of the true point
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn invisible_keypoints_decode_as_invisible() {
    let kp = Keypoints2D::new(vec![[10.0, 12.0], [50.0, 60.0]], vec![true, false]).unwrap();
    let back = decode_keypoints(&render_gt_maps(&kp, SIZE, SIZE, 2.0).unwrap(), 0.05).unwrap();
    assert_eq!(back.visible, vec![true, false]);
    assert_eq!(back.coords[0], [10.0, 12.0]);
}
