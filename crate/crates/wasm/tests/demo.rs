use dptrack_wasm::{to_rgba, Demo, MAX_LEVELS};

fn demo() -> Demo {
    Demo::try_new(5, 0.3, 0.05, 3).unwrap()
}

#[test]
fn rgba_layout() {
    let img = [0.0, 1.0, 0.5, 0.5, 1.0, 0.0];
    assert_eq!(to_rgba(&img, 1, 2), vec![0, 128, 255, 255, 255, 128, 0, 255]);
}

#[test]
fn pyramid_levels_halve() {
    let d = demo();
    for level in 0..=MAX_LEVELS {
        let side = 256 >> level;
        assert_eq!(d.try_pyramid_level(1, level, false).unwrap().len(), 4 * side * side);
        if level < MAX_LEVELS {
            assert_eq!(d.try_pyramid_level(1, level, true).unwrap().len(), 4 * side * side);
        }
    }
    assert!(d.try_pyramid_level(0, MAX_LEVELS, true).is_err());
    assert!(d.try_pyramid_level(9, 0, false).is_err());
}

#[test]
fn zero_offsets_give_a_plain_mean_filter() {
    let d = demo();
    let out = d.try_deform(0, 1.0, 0.0, 0.0).unwrap();
    let frame = d.try_pyramid_level(0, 0, false).unwrap();
    // Interior pixel: mean of its 3x3 neighbourhood, up to byte rounding.
    let (y, x) = (100, 120);
    for c in 0..3 {
        let mut acc = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                acc += frame[((y + dy - 1) * 256 + x + dx - 1) * 4 + c] as f64;
            }
        }
        let got = out[(y * 256 + x) * 4 + c] as f64;
        assert!((got - acc / 9.0).abs() <= 2.0, "channel {c}: {got} vs {}", acc / 9.0);
    }
}

#[test]
fn whole_pixel_shift_moves_the_image() {
    let d = demo();
    let base = d.try_deform(0, 1.0, 0.0, 0.0).unwrap();
    let shifted = d.try_deform(0, 1.0, 2.0, 0.0).unwrap();
    let (y, x) = (80, 90);
    for c in 0..4 {
        assert_eq!(shifted[(y * 256 + x) * 4 + c], base[(y * 256 + x + 2) * 4 + c]);
    }
}
