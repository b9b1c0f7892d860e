use pqvit::raster::{rasterize, ImageSpec};
use pqvit::signal::{sample_params, synthesize_clean, DisturbanceClass, DisturbanceParams, TimeGrid};
use proptest::prelude::*;

/// Rows (counted from the bottom) holding trace pixels.
fn traced_rows(samples: &[f64], spec: &ImageSpec) -> Vec<usize> {
    let img = rasterize(samples, spec).unwrap();
    (0..img.height)
        .filter(|&r| (0..img.width).any(|c| img.get(r, c, 0) == spec.line_value))
        .map(|r| img.height - 1 - r)
        .collect()
}

fn unit_sine() -> Vec<f64> {
    let g = TimeGrid::default();
    synthesize_clean(DisturbanceClass::Normal, &DisturbanceParams::normal(0.0), &g)
        .unwrap()
        .samples
}

#[test]
fn unit_sine_peaks_at_row_162() {
    let spec = ImageSpec::default();
    let samples = unit_sine();
    let rows = traced_rows(&samples, &spec);
    assert_eq!(*rows.iter().max().unwrap(), 162);

    // Brute-force point plot: every sample's own pixel must be traced.
    let img = rasterize(&samples, &spec).unwrap();
    let n = samples.len();
    for (k, v) in samples.iter().enumerate() {
        let col = (k as f64 * 223.0 / (n - 1) as f64).round() as usize;
        let from_bottom = ((223.0 * (v + 2.2) / 4.4).floor() as usize).min(223);
        assert_eq!(img.get(223 - from_bottom, col, 0), 0.0, "sample {k}");
    }
}

#[test]
fn larger_swell_reaches_higher() {
    let g = TimeGrid::default();
    let spec = ImageSpec::default();
    let mut params = sample_params(DisturbanceClass::Swell, 5, &g);
    params.swell.as_mut().unwrap().beta = 0.2;
    let low = synthesize_clean(DisturbanceClass::Swell, &params, &g).unwrap();
    params.swell.as_mut().unwrap().beta = 0.7;
    let high = synthesize_clean(DisturbanceClass::Swell, &params, &g).unwrap();
    let top = |s: &[f64]| *traced_rows(s, &spec).iter().max().unwrap();
    assert!(top(&high.samples) > top(&low.samples));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trace_is_binary_and_covers_every_column(class_id in 0u8..17, seed in any::<u64>(), side in 16usize..96) {
        let g = TimeGrid::default();
        let class = DisturbanceClass::from_id(class_id).unwrap();
        let s = synthesize_clean(class, &sample_params(class, seed, &g), &g).unwrap();
        let spec = ImageSpec::square(side);
        let img = rasterize(&s.samples, &spec).unwrap();
        prop_assert!(img.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
        for c in 0..side {
            prop_assert!((0..side).any(|r| img.get(r, c, 0) == 0.0), "column {} empty", c);
        }
    }

    #[test]
    fn columns_follow_time_order(n in 2usize..2000, width in 2usize..400) {
        let spec = ImageSpec { width, ..ImageSpec::default() };
        let cols: Vec<usize> = (0..n).map(|k| spec.column(k, n)).collect();
        prop_assert_eq!(cols[0], 0);
        prop_assert_eq!(cols[n - 1], width - 1);
        prop_assert!(cols.windows(2).all(|w| w[0] <= w[1]));
    }
}
