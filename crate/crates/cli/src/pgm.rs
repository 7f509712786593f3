use cvcs::Tensor;

/// Binary 8-bit PGM of a `rows x cols` buffer already scaled to `[0, 1]`.
pub fn encode(rows: usize, cols: usize, unit: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(
        unit.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Max-normalized rendering of the trailing two axes; an all-zero (or
/// all-negative) map renders black.
pub fn max_normalized(t: &Tensor) -> Vec<u8> {
    let (h, w) = t.hw();
    let m = t.max();
    let unit: Vec<f64> = if m > 0.0 {
        t.data().iter().map(|v| v.max(0.0) / m).collect()
    } else {
        vec![0.0; t.len()]
    };
    encode(h, w, &unit)
}

/// Min-max rendering, for maps with an offset such as log distances.
pub fn min_max(t: &Tensor) -> Vec<u8> {
    let (h, w) = t.hw();
    let (lo, hi) = (t.min(), t.max());
    let span = hi - lo;
    let unit: Vec<f64> = t
        .data()
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    encode(h, w, &unit)
}
