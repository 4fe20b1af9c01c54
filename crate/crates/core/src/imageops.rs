//! Plane-level pixel operations shared by the data generator and defenses.

/// Normalized 1-D Gaussian taps, radius `floor(truncate * sigma + 0.5)`.
pub fn gaussian_kernel_1d(sigma: f64, truncate: f64) -> Vec<f64> {
    let radius = (truncate * sigma + 0.5).floor() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Index into `[0, n)` under half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`).
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable convolution of an `h x w` plane with a symmetric 1-D kernel,
/// reflect-padded at the borders.
pub fn convolve_separable_reflect(plane: &[f32], h: usize, w: usize, kernel: &[f64]) -> Vec<f32> {
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let sx = reflect_index(x as i64 + t as i64 - radius, w);
                acc += kv * plane[y * w + sx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let sy = reflect_index(y as i64 + t as i64 - radius, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Horizontal mirror then integer translation of a `[C, H, W]` buffer;
/// vacated pixels take `fill`.
pub fn flip_and_shift(data: &[f32], dims: (usize, usize, usize), flip: bool, dx: i64, dy: i64, fill: f32) -> Vec<f32> {
    let (c, h, w) = dims;
    let mut out = vec![fill; data.len()];
    for ch in 0..c {
        let src = &data[ch * h * w..][..h * w];
        let dst = &mut out[ch * h * w..][..h * w];
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx = x - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                let sx = if flip { w as i64 - 1 - sx } else { sx };
                dst[(y as usize) * w + x as usize] = src[(sy as usize) * w + sx as usize];
            }
        }
    }
    out
}
