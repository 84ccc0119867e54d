//! Non-learned image statistics: Sobel magnitude, local variance, map fusion
//! and normalization, reconstruction-error maps, visit history, and the
//! six-channel sampler input.
//!
//! Images are (channels, h, w); single-channel maps are (h, w). All border
//! handling uses mirror indexing so derived maps keep the source extents.

use crate::dense::{DenseArray, Shape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAP_NORM_EPS: f64 = 1e-8;

/// Mirror an index into [0, n); `reflect(-1) == 1`, `reflect(n) == n - 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn image_dims<T: Scalar>(img: &DenseArray<T>) -> Result<(usize, usize, usize)> {
    let s = img.shape();
    match s.ndim() {
        2 => Ok((1, s.at(0), s.at(1))),
        3 => Ok((s.at(0), s.at(1), s.at(2))),
        _ => Err(Error::config(format!(
            "expected (c, h, w) or (h, w) image, got {s}"
        ))),
    }
}

/// Channel-averaged Sobel gradient magnitude with mirrored borders.
pub fn sobel_magnitude<T: Scalar>(img: &DenseArray<T>) -> Result<DenseArray<T>> {
    let (c, h, w) = image_dims(img)?;
    if h < 3 || w < 3 {
        return Err(Error::config(format!(
            "sobel_magnitude needs at least 3x3, got {h}x{w}"
        )));
    }
    let mut out = DenseArray::zeros(Shape::d2(h, w));
    let inv_c = T::one() / T::of_usize(c);
    let two = T::of_f64(2.0);
    for ci in 0..c {
        let plane = &img.data()[ci * h * w..(ci + 1) * h * w];
        let at = |y: isize, x: isize| plane[reflect(y, h) * w + reflect(x, w)];
        for y in 0..h {
            let yi = y as isize;
            for x in 0..w {
                let xi = x as isize;
                // Sobel x: [-1 0 1; -2 0 2; -1 0 1], y is its transpose.
                // The difference form cancels exactly on constant images.
                let gx = (at(yi - 1, xi + 1) - at(yi - 1, xi - 1))
                    + two * (at(yi, xi + 1) - at(yi, xi - 1))
                    + (at(yi + 1, xi + 1) - at(yi + 1, xi - 1));
                let gy = (at(yi + 1, xi - 1) - at(yi - 1, xi - 1))
                    + two * (at(yi + 1, xi) - at(yi - 1, xi))
                    + (at(yi + 1, xi + 1) - at(yi - 1, xi + 1));
                let mag = (gx * gx + gy * gy).sqrt();
                out.data_mut()[y * w + x] = out.data_mut()[y * w + x] + mag * inv_c;
            }
        }
    }
    Ok(out)
}

/// Normalized Gaussian taps at integer offsets; radius is ceil(3 sigma).
pub fn gaussian_kernel_1d<T: Scalar>(sigma: f64) -> Vec<T> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k.into_iter().map(T::of_f64).collect()
}

/// Separable blur of a (h, w) map with an arbitrary normalized 1-d kernel
/// centered at `center`, mirrored at borders.
pub fn blur_with_kernel<T: Scalar>(
    map: &DenseArray<T>,
    kernel: &[T],
    center: usize,
) -> Result<DenseArray<T>> {
    let s = map.shape();
    if s.ndim() != 2 {
        return Err(Error::config(format!("blur expects (h, w), got {s}")));
    }
    let (h, w) = (s.at(0), s.at(1));
    let mut tmp = DenseArray::<T>::zeros(s);
    // horizontal pass
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - center as isize, w);
                acc = acc + kv * map.data()[y * w + sx];
            }
            tmp.data_mut()[y * w + x] = acc;
        }
    }
    // vertical pass
    let mut out = DenseArray::<T>::zeros(s);
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - center as isize, h);
                acc = acc + kv * tmp.data()[sy * w + x];
            }
            out.data_mut()[y * w + x] = acc;
        }
    }
    Ok(out)
}

pub fn gaussian_blur<T: Scalar>(map: &DenseArray<T>, sigma: f64) -> Result<DenseArray<T>> {
    let k = gaussian_kernel_1d::<T>(sigma);
    let center = k.len() / 2;
    blur_with_kernel(map, &k, center)
}

/// Local variance via the blurred squared image minus the squared blurred
/// image, clamped at zero, channel-averaged.
pub fn local_variance<T: Scalar>(img: &DenseArray<T>, blur_sigma: f64) -> Result<DenseArray<T>> {
    let k = gaussian_kernel_1d::<T>(blur_sigma);
    local_variance_with_kernel(img, &k, k.len() / 2)
}

/// Same computation with a caller-supplied separable kernel.
pub fn local_variance_with_kernel<T: Scalar>(
    img: &DenseArray<T>,
    kernel: &[T],
    center: usize,
) -> Result<DenseArray<T>> {
    let (c, h, w) = image_dims(img)?;
    let mut out = DenseArray::zeros(Shape::d2(h, w));
    let inv_c = T::of_usize(c).recip();
    for ci in 0..c {
        let plane = DenseArray::new(
            Shape::d2(h, w),
            img.data()[ci * h * w..(ci + 1) * h * w].to_vec(),
        )?;
        let sq = plane.map(|v| v * v);
        let b = blur_with_kernel(&plane, kernel, center)?;
        let b2 = blur_with_kernel(&sq, kernel, center)?;
        for i in 0..h * w {
            let v = (b2.data()[i] - b.data()[i] * b.data()[i]).max(T::zero());
            out.data_mut()[i] = out.data_mut()[i] + v * inv_c;
        }
    }
    Ok(out)
}

/// Weighted elementwise sum of the three statistic maps, before normalization.
pub fn fuse_maps<T: Scalar>(
    mae: &DenseArray<T>,
    var: &DenseArray<T>,
    grad: &DenseArray<T>,
    weights: (f64, f64, f64),
) -> Result<DenseArray<T>> {
    if mae.shape() != var.shape() || mae.shape() != grad.shape() {
        return Err(Error::config(format!(
            "fuse_maps extents differ: {} / {} / {}",
            mae.shape(),
            var.shape(),
            grad.shape()
        )));
    }
    let (wm, wv, wg) = (
        T::of_f64(weights.0),
        T::of_f64(weights.1),
        T::of_f64(weights.2),
    );
    let mut out = DenseArray::zeros(mae.shape());
    for i in 0..out.len() {
        out.data_mut()[i] = wm * mae.data()[i] + wv * var.data()[i] + wg * grad.data()[i];
    }
    Ok(out)
}

/// Affine rescale to [0, 1]: (v - min) / (max - min + eps). Constant maps
/// come out identically zero.
pub fn normalize_map<T: Scalar>(map: &DenseArray<T>) -> DenseArray<T> {
    let lo = map.min_value();
    let hi = map.max_value();
    let denom = hi - lo + T::of_f64(MAP_NORM_EPS);
    map.map(|v| (v - lo) / denom)
}

/// Per-pixel absolute reconstruction error, averaged over channels.
pub fn are_map<T: Scalar>(
    image: &DenseArray<T>,
    reconstruction: &DenseArray<T>,
) -> Result<DenseArray<T>> {
    if image.shape() != reconstruction.shape() {
        return Err(Error::config(format!(
            "are_map shapes differ: {} vs {}",
            image.shape(),
            reconstruction.shape()
        )));
    }
    let (c, h, w) = image_dims(image)?;
    let mut out = DenseArray::zeros(Shape::d2(h, w));
    let inv_c = T::of_usize(c).recip();
    for ci in 0..c {
        let base = ci * h * w;
        for i in 0..h * w {
            let d = (image.data()[base + i] - reconstruction.data()[base + i]).abs();
            out.data_mut()[i] = out.data_mut()[i] + d * inv_c;
        }
    }
    Ok(out)
}

/// Pixel rectangle: `y0/x0` inclusive origin plus extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn centered(cy: usize, cx: usize, size: usize) -> Rect {
        Rect {
            y0: cy - size / 2,
            x0: cx - size / 2,
            h: size,
            w: size,
        }
    }
}

/// Per-image visit counter over pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryMap {
    pub image_id: String,
    h: usize,
    w: usize,
    counts: Vec<u32>,
}

impl HistoryMap {
    pub fn new(image_id: impl Into<String>, h: usize, w: usize) -> Self {
        HistoryMap {
            image_id: image_id.into(),
            h,
            w,
            counts: vec![0; h * w],
        }
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Increment every cell covered by `rect` by one. Crop logic clamps
    /// before calling, so an out-of-bounds rectangle is a bug.
    pub fn update(&mut self, rect: Rect) -> Result<()> {
        if rect.y0 + rect.h > self.h || rect.x0 + rect.w > self.w {
            return Err(Error::internal(format!(
                "history update rect {rect:?} outside {}x{} map",
                self.h, self.w
            )));
        }
        for y in rect.y0..rect.y0 + rect.h {
            for x in rect.x0..rect.x0 + rect.w {
                self.counts[y * self.w + x] += 1;
            }
        }
        Ok(())
    }

    /// Counts divided by the running maximum (1 when the map is untouched).
    pub fn normalized<T: Scalar>(&self) -> DenseArray<T> {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let inv = T::of_f64(1.0 / max as f64);
        DenseArray::from_fn(Shape::d2(self.h, self.w), |i| {
            T::of_f64(self.counts[i] as f64) * inv
        })
    }

    /// Mean normalized count over `rect`; the coverage penalty reads this.
    pub fn normalized_mean(&self, rect: Rect) -> Result<f64> {
        if rect.y0 + rect.h > self.h || rect.x0 + rect.w > self.w {
            return Err(Error::internal(format!(
                "history mean rect {rect:?} outside {}x{} map",
                self.h, self.w
            )));
        }
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let mut acc = 0.0;
        for y in rect.y0..rect.y0 + rect.h {
            for x in rect.x0..rect.x0 + rect.w {
                acc += self.counts[y * self.w + x] as f64 / max;
            }
        }
        Ok(acc / (rect.h * rect.w) as f64)
    }
}

/// Normalized fusion of the three statistic maps with the weights recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedMap<T: Scalar> {
    pub values: DenseArray<T>,
    pub weights: (f64, f64, f64),
}

impl<T: Scalar> FusedMap<T> {
    pub fn compute(
        mae: &DenseArray<T>,
        var: &DenseArray<T>,
        grad: &DenseArray<T>,
        weights: (f64, f64, f64),
    ) -> Result<Self> {
        let fused = fuse_maps(mae, var, grad, weights)?;
        Ok(FusedMap {
            values: normalize_map(&fused),
            weights,
        })
    }
}

/// The six-channel policy input: RGB, fused statistics, normalized history,
/// previous reconstruction error.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerInput<T: Scalar> {
    data: DenseArray<T>,
}

pub const SAMPLER_CHANNELS: usize = 6;

impl<T: Scalar> SamplerInput<T> {
    pub fn build(
        rgb: &DenseArray<T>,
        fused: &FusedMap<T>,
        history: &HistoryMap,
        prev_are: &DenseArray<T>,
    ) -> Result<Self> {
        let s = rgb.shape();
        if s.ndim() != 3 || s.at(0) != 3 {
            return Err(Error::config(format!(
                "sampler input rgb must be (3, h, w), got {s}"
            )));
        }
        let (h, w) = (s.at(1), s.at(2));
        let plane = h * w;
        let check = |name: &str, sh: Shape| -> Result<()> {
            if sh.dims() != [h, w] {
                return Err(Error::config(format!(
                    "sampler input {name} extents {sh} do not match image {h}x{w}"
                )));
            }
            Ok(())
        };
        check("fused map", fused.values.shape())?;
        check("previous error map", prev_are.shape())?;
        if history.extents() != (h, w) {
            return Err(Error::config(format!(
                "sampler input history extents {:?} do not match image {h}x{w}",
                history.extents()
            )));
        }
        let hist = history.normalized::<T>();
        let one = T::one();
        let mut data = DenseArray::zeros(Shape::d3(SAMPLER_CHANNELS, h, w));
        data.data_mut()[..3 * plane].copy_from_slice(rgb.data());
        data.data_mut()[3 * plane..4 * plane].copy_from_slice(fused.values.data());
        data.data_mut()[4 * plane..5 * plane].copy_from_slice(hist.data());
        for (d, &v) in data.data_mut()[5 * plane..6 * plane]
            .iter_mut()
            .zip(prev_are.data())
        {
            *d = v.min(one).max(T::zero());
        }
        Ok(SamplerInput { data })
    }

    pub fn data(&self) -> &DenseArray<T> {
        &self.data
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.data.shape().at(1), self.data.shape().at(2))
    }

    /// Extract a (6, size, size) crop; the rectangle must be in bounds.
    pub fn crop(&self, rect: Rect) -> Result<DenseArray<T>> {
        crop_channels(&self.data, rect)
    }
}

/// Extract a channel-stack crop from a (c, h, w) array.
pub fn crop_channels<T: Scalar>(src: &DenseArray<T>, rect: Rect) -> Result<DenseArray<T>> {
    let s = src.shape();
    let (c, h, w) = (s.at(0), s.at(1), s.at(2));
    if rect.y0 + rect.h > h || rect.x0 + rect.w > w {
        return Err(Error::internal(format!(
            "crop rect {rect:?} outside ({c}, {h}, {w})"
        )));
    }
    let mut out = DenseArray::zeros(Shape::d3(c, rect.h, rect.w));
    for ci in 0..c {
        for y in 0..rect.h {
            let src_base = ci * h * w + (rect.y0 + y) * w + rect.x0;
            let dst_base = ci * rect.h * rect.w + y * rect.w;
            out.data_mut()[dst_base..dst_base + rect.w]
                .copy_from_slice(&src.data()[src_base..src_base + rect.w]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> DenseArray<f64> {
        DenseArray::from_fn(Shape::d3(1, h, w), |i| f(i / w, i % w))
    }

    #[test]
    fn sobel_constant_is_zero() {
        let img = DenseArray::full(Shape::d3(3, 5, 5), 0.42f64);
        let m = sobel_magnitude(&img).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_step_edge_response_is_four() {
        // columns 0,0,1,1,1: pixels in column 1 and 2 sit next to the edge
        let img = gray(5, 5, |_, x| if x >= 2 { 1.0 } else { 0.0 });
        let m = sobel_magnitude(&img).unwrap();
        for y in 1..4 {
            assert!((m.data()[y * 5 + 1] - 4.0).abs() < 1e-12, "col 1");
            assert!((m.data()[y * 5 + 2] - 4.0).abs() < 1e-12, "col 2");
            assert_eq!(m.data()[y * 5 + 4], 0.0, "far side");
        }
    }

    #[test]
    fn sobel_rotation_equivariance() {
        let img = gray(6, 6, |y, x| ((y * 13 + x * 7) % 11) as f64 / 11.0);
        let m = sobel_magnitude(&img).unwrap();
        // rotate image 90 degrees clockwise: (y, x) -> (x, 5 - y)
        let rot = gray(6, 6, |y, x| {
            img.data()[(5 - x) * 6 + y]
        });
        let mr = sobel_magnitude(&rot).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let a = m.data()[(5 - x) * 6 + y];
                let b = mr.data()[y * 6 + x];
                assert!((a - b).abs() < 1e-10, "({y},{x}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn sobel_too_small_rejected() {
        let img = DenseArray::<f64>::zeros(Shape::d3(1, 2, 5));
        assert!(sobel_magnitude(&img).is_err());
    }

    #[test]
    fn variance_constant_is_zero() {
        let img = DenseArray::full(Shape::d3(1, 8, 8), 0.77f64);
        let v = local_variance(&img, 2.0).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn variance_bernoulli_half() {
        // uniform two-tap kernel over alternating columns: the window sees
        // exactly half zeros and half ones everywhere
        let img = gray(4, 8, |_, x| (x % 2) as f64);
        let k = [0.5f64, 0.5];
        let v = local_variance_with_kernel(&img, &k, 0).unwrap();
        for &x in v.data() {
            assert!((x - 0.25).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn fuse_spec_values() {
        let ones = DenseArray::full(Shape::d2(3, 3), 1.0f64);
        let zeros = DenseArray::zeros(Shape::d2(3, 3));
        let w = (0.7, 0.1, 0.2);
        let a = fuse_maps(&zeros, &zeros, &zeros, w).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
        let b = fuse_maps(&ones, &zeros, &zeros, w).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let c = fuse_maps(&ones, &ones, &ones, w).unwrap();
        assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let bad = DenseArray::<f64>::zeros(Shape::d2(2, 3));
        assert!(fuse_maps(&ones, &bad, &zeros, w).is_err());
    }

    #[test]
    fn normalize_examples() {
        let m = DenseArray::new(Shape::d2(1, 3), vec![0.0f64, 5.0, 10.0]).unwrap();
        let n = normalize_map(&m);
        assert!(n.data()[0].abs() < 1e-9);
        assert!((n.data()[1] - 0.5).abs() < 1e-8);
        assert!((n.data()[2] - 1.0).abs() < 1e-8);
        let c = DenseArray::full(Shape::d2(2, 2), 3.0f64);
        assert!(normalize_map(&c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn are_map_examples() {
        let a = DenseArray::full(Shape::d3(3, 2, 2), 1.0f64);
        let b = DenseArray::zeros(Shape::d3(3, 2, 2));
        let m = are_map(&a, &b).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        assert!(are_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        // per-channel errors 0.3, 0.0, 0.6 average to 0.3
        let mut r = a.clone();
        r.data_mut()[0] = 0.7;
        r.data_mut()[4] = 1.0;
        r.data_mut()[8] = 0.4;
        let m2 = are_map(&a, &r).unwrap();
        assert!((m2.data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn history_counting() {
        let mut hm = HistoryMap::new("img", 256, 256);
        let r = Rect::centered(128, 128, 64);
        hm.update(r).unwrap();
        assert_eq!(hm.counts().iter().filter(|&&c| c == 1).count(), 64 * 64);
        assert_eq!(hm.total(), 64 * 64);
        hm.update(r).unwrap();
        assert_eq!(hm.counts().iter().filter(|&&c| c == 2).count(), 64 * 64);
        let r2 = Rect {
            y0: 0,
            x0: 0,
            h: 64,
            w: 64,
        };
        hm.update(r2).unwrap();
        assert_eq!(hm.total(), 3 * 64 * 64);
        // out of bounds is an internal error
        let bad = Rect {
            y0: 200,
            x0: 200,
            h: 64,
            w: 64,
        };
        assert!(hm.update(bad).is_err());
    }

    #[test]
    fn sampler_input_channel_order() {
        let h = 8;
        let rgb = DenseArray::from_fn(Shape::d3(3, h, h), |i| (i % 17) as f64 / 17.0);
        let fused = FusedMap {
            values: DenseArray::full(Shape::d2(h, h), 0.25f64),
            weights: (0.7, 0.1, 0.2),
        };
        let hist = HistoryMap::new("x", h, h);
        let prev = DenseArray::full(Shape::d2(h, h), 1.5f64); // clamps to 1
        let si = SamplerInput::build(&rgb, &fused, &hist, &prev).unwrap();
        let d = si.data();
        assert_eq!(d.shape().dims(), &[6, h, h]);
        // channel 1 bit-equals the red plane
        assert_eq!(&d.data()[..h * h], &rgb.data()[..h * h]);
        // zero history gives an all-zero channel 5
        assert!(d.data()[4 * h * h..5 * h * h].iter().all(|&v| v == 0.0));
        // previous error clamps into [0, 1]
        assert!(d.data()[5 * h * h..].iter().all(|&v| v == 1.0));
    }
}
