//! Lifting a convolution to a linear map over patch columns (im2col).
//!
//! A lifted column gathers the k×k window of every input channel that feeds
//! one output position. Within the column, channels are outermost and each
//! window is laid out row-major, so entry `d·k² + r·k + c` is tap `(r, c)` of
//! channel `d`. Windows start at `(x1·stride − pad, x2·stride − pad)` and taps
//! outside the image read zero. Kernels are applied in correlation order.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::distribution::ProbabilityVector;
use crate::dump::LayerDump;
use crate::error::{Error, Result};
use crate::geometry::ConvGeometry;
use crate::tensor::Tensor;

/// `(sample, output row, output column)`.
pub type Position = (usize, usize, usize);

/// Lifted regression problem of one layer.
#[derive(Debug, Clone)]
pub struct RegressionDataset {
    pub layer_id: String,
    pub geometry: ConvGeometry,
    /// `k²D × T*` lifted inputs, one column per point.
    pub x: DMatrix<f64>,
    /// `M × T*` responses.
    pub y: DMatrix<f64>,
    pub origin: Vec<Position>,
}

impl RegressionDataset {
    pub fn new(
        layer_id: impl Into<String>,
        geometry: ConvGeometry,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        origin: Vec<Position>,
    ) -> Result<Self> {
        let layer_id = layer_id.into();
        geometry.validate()?;
        if x.nrows() != geometry.lifted_len() || y.nrows() != geometry.out_channels {
            return Err(Error::Shape(format!(
                "layer {layer_id}: lifted data is {}x{} / {}x{}, geometry needs {} and {} rows",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols(),
                geometry.lifted_len(),
                geometry.out_channels
            )));
        }
        if x.ncols() != y.ncols() || x.ncols() != origin.len() {
            return Err(Error::Shape(format!(
                "layer {layer_id}: {} input columns, {} output columns, {} origins",
                x.ncols(),
                y.ncols(),
                origin.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Shape(format!("layer {layer_id}: no data points")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("layer {layer_id}: non-finite lifted data")));
        }
        Ok(Self {
            layer_id,
            geometry,
            x,
            y,
            origin,
        })
    }

    /// Data of a dense layer: `x` is `D × T`, `y` is `M × T`.
    pub fn from_linear(layer_id: impl Into<String>, x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        let geometry = ConvGeometry::dense(x.nrows(), y.nrows())?;
        let origin = (0..x.ncols()).map(|t| (t, 0, 0)).collect();
        Self::new(layer_id, geometry, x, y, origin)
    }

    /// Number of points T*.
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn channels(&self) -> usize {
        self.geometry.in_channels
    }

    pub fn outputs(&self) -> usize {
        self.geometry.out_channels
    }
}

/// Every output position of a dump in `(t, x1, x2)` lexicographic order.
pub fn all_positions(dump: &LayerDump) -> Vec<Position> {
    let (oh, ow) = dump.output_hw();
    let mut out = Vec::with_capacity(dump.num_positions());
    for t in 0..dump.samples() {
        for i in 0..oh {
            for j in 0..ow {
                out.push((t, i, j));
            }
        }
    }
    out
}

/// Writes the lifted column of position `(t, x1, x2)` into `col`.
///
/// `x` is a row-major `T × D × H × W` buffer.
pub fn lift_column(x: &[f64], g: &ConvGeometry, hw: (usize, usize), pos: Position, col: &mut [f64]) {
    let (h, w) = hw;
    let (t, x1, x2) = pos;
    let k = g.kernel;
    let d_count = g.in_channels;
    let top = (x1 * g.stride) as isize - g.padding as isize;
    let left = (x2 * g.stride) as isize - g.padding as isize;
    for d in 0..d_count {
        let plane = &x[(t * d_count + d) * h * w..][..h * w];
        for r in 0..k {
            let row = top + r as isize;
            let dst = &mut col[d * k * k + r * k..][..k];
            if row < 0 || row >= h as isize {
                dst.fill(0.0);
                continue;
            }
            let src = &plane[row as usize * w..][..w];
            for (c, v) in dst.iter_mut().enumerate() {
                let cc = left + c as isize;
                *v = if cc < 0 || cc >= w as isize { 0.0 } else { src[cc as usize] };
            }
        }
    }
}

/// Lifts the given output positions of a dump into a regression dataset.
pub fn extract_patches(dump: &LayerDump, positions: &[Position]) -> Result<RegressionDataset> {
    let g = dump.geometry;
    let (oh, ow) = dump.output_hw();
    let t_count = dump.samples();
    if let Some(p) = positions
        .iter()
        .find(|&&(t, i, j)| t >= t_count || i >= oh || j >= ow)
    {
        return Err(Error::Index(format!(
            "position {p:?} outside the {t_count}x{oh}x{ow} output domain of layer {}",
            dump.layer_id
        )));
    }
    let rows = g.lifted_len();
    let m = g.out_channels;
    let hw = dump.input_hw();
    let xs = dump.x.data();
    let ys = dump.y.data();

    let mut x = DMatrix::<f64>::zeros(rows, positions.len());
    x.as_mut_slice()
        .par_chunks_mut(rows)
        .zip(positions.par_iter())
        .for_each(|(col, &pos)| lift_column(xs, &g, hw, pos, col));

    let mut y = DMatrix::<f64>::zeros(m, positions.len());
    for (col, &(t, i, j)) in y.as_mut_slice().chunks_mut(m).zip(positions) {
        for (o, v) in col.iter_mut().enumerate() {
            *v = ys[((t * m + o) * oh + i) * ow + j];
        }
    }
    RegressionDataset::new(dump.layer_id.clone(), g, x, y, positions.to_vec())
}

/// Flattens `D × M × k × k` kernels into the `M × k²D` matrix whose row `j`
/// concatenates the row-major kernels `Q[d, j]` over `d`.
pub fn vectorize_kernels(q: &Tensor) -> Result<DMatrix<f64>> {
    let s = q.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Shape(format!(
            "kernels must be D x M x k x k, got {s:?}"
        )));
    }
    let (d_count, m, kk) = (s[0], s[1], s[2] * s[3]);
    let data = q.data();
    Ok(DMatrix::from_fn(m, kk * d_count, |j, col| {
        let (d, l) = (col / kk, col % kk);
        data[(d * m + j) * kk + l]
    }))
}

/// Inverse of [`vectorize_kernels`].
pub fn devectorize_kernels(qvec: &DMatrix<f64>, geometry: &ConvGeometry) -> Result<Tensor> {
    let kk = geometry.taps();
    if !qvec.ncols().is_multiple_of(kk) {
        return Err(Error::Shape(format!(
            "{} columns are not a multiple of k² = {kk}",
            qvec.ncols()
        )));
    }
    if qvec.ncols() != geometry.lifted_len() || qvec.nrows() != geometry.out_channels {
        return Err(Error::Shape(format!(
            "kernel matrix is {}x{}, geometry needs {}x{}",
            qvec.nrows(),
            qvec.ncols(),
            geometry.out_channels,
            geometry.lifted_len()
        )));
    }
    let (d_count, m, k) = (geometry.in_channels, geometry.out_channels, geometry.kernel);
    let mut data = vec![0.0; d_count * m * kk];
    for d in 0..d_count {
        for j in 0..m {
            for l in 0..kk {
                data[(d * m + j) * kk + l] = qvec[(j, d * kk + l)];
            }
        }
    }
    Tensor::new(vec![d_count, m, k, k], data)
}

/// Swaps the two leading axes of a 4-d kernel tensor, converting between the
/// solver's `D × M × k × k` layout and the network's `M × D × k × k`.
pub fn swap_kernel_axes(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected a 4-d kernel tensor, got {s:?}")));
    }
    let (a, b, kk) = (s[0], s[1], s[2] * s[3]);
    let src = t.data();
    let mut data = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            data[(j * a + i) * kk..][..kk].copy_from_slice(&src[(i * b + j) * kk..][..kk]);
        }
    }
    Tensor::new(vec![b, a, s[2], s[3]], data)
}

/// Diagonal of D(w): each `w_d` repeated k² times.
pub fn channel_scale(w: &[f64], taps: usize) -> Vec<f64> {
    w.iter()
        .flat_map(|&v| std::iter::repeat_n(v, taps))
        .collect()
}

/// Computes D(w)·X, scaling row block `d` of X by `w_d`.
pub fn apply_channel_weights(x: &DMatrix<f64>, w: &ProbabilityVector) -> Result<DMatrix<f64>> {
    if w.is_empty() || !x.nrows().is_multiple_of(w.len()) {
        return Err(Error::Shape(format!(
            "{} rows cannot be split into {} channel blocks",
            x.nrows(),
            w.len()
        )));
    }
    let scale = channel_scale(w.as_slice(), x.nrows() / w.len());
    let mut out = x.clone();
    for (mut row, &s) in out.row_iter_mut().zip(&scale) {
        row *= s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dump_with(g: ConvGeometry, t: usize, h: usize, w: usize, x: Vec<f64>) -> LayerDump {
        let (oh, ow) = (g.output_extent(h).unwrap(), g.output_extent(w).unwrap());
        LayerDump::new(
            "l",
            g,
            Tensor::new(vec![t, g.in_channels, h, w], x).unwrap(),
            Tensor::zeros(vec![t, g.out_channels, oh, ow]),
        )
        .unwrap()
    }

    #[test]
    fn centered_window_covers_whole_image() {
        let g = ConvGeometry::new(3, 1, 1, 1, 1).unwrap();
        let vals: Vec<f64> = (1..=9).map(f64::from).collect();
        let dump = dump_with(g, 1, 3, 3, vals.clone());
        let ds = extract_patches(&dump, &[(0, 1, 1)]).unwrap();
        assert_eq!(ds.x.column(0).iter().copied().collect::<Vec<_>>(), vals);
    }

    #[test]
    fn corner_window_zero_pads_five_slots() {
        let g = ConvGeometry::new(3, 1, 1, 1, 1).unwrap();
        let dump = dump_with(g, 1, 3, 3, (1..=9).map(f64::from).collect());
        let ds = extract_patches(&dump, &[(0, 0, 0)]).unwrap();
        let col: Vec<f64> = ds.x.column(0).iter().copied().collect();
        assert_eq!(col, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        assert_eq!(col.iter().filter(|v| **v == 0.0).count(), 5);
    }

    #[test]
    fn out_of_range_positions_are_rejected() {
        let g = ConvGeometry::new(3, 1, 1, 1, 1).unwrap();
        let dump = dump_with(g, 1, 3, 3, vec![0.0; 9]);
        assert!(matches!(
            extract_patches(&dump, &[(0, 3, 0)]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            extract_patches(&dump, &[(1, 0, 0)]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn pointwise_lifting_is_the_channel_vector() {
        let g = ConvGeometry::new(1, 1, 0, 3, 1).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 2 * 2).map(f64::from).collect();
        let dump = dump_with(g, 2, 2, 2, x.clone());
        let ds = extract_patches(&dump, &all_positions(&dump)).unwrap();
        for (j, &(t, i, jj)) in ds.origin.iter().enumerate() {
            for d in 0..3 {
                assert_eq!(ds.x[(d, j)], x[((t * 3 + d) * 2 + i) * 2 + jj]);
            }
        }
    }

    #[test]
    fn vectorize_orders_channels_then_taps() {
        let q = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let v = vectorize_kernels(&q).unwrap();
        assert_eq!(v.iter().copied().collect::<Vec<_>>(), (1..=9).map(f64::from).collect::<Vec<_>>());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d_count, m, k) = (3, 2, 3);
        let data: Vec<f64> = (0..d_count * m * k * k).map(|_| rng.random()).collect();
        let q = Tensor::new(vec![d_count, m, k, k], data.clone()).unwrap();
        let v = vectorize_kernels(&q).unwrap();
        for d in 0..d_count {
            for j in 0..m {
                for l in 0..k * k {
                    assert_eq!(v[(j, d * k * k + l)], data[d * m * k * k + j * k * k + l]);
                }
            }
        }
    }

    #[test]
    fn devectorize_inverts_vectorize() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let d_count = rng.random_range(1..5);
            let m = rng.random_range(1..5);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let g = ConvGeometry::new(k, 1, 0, d_count, m).unwrap();
            let data = (0..d_count * m * k * k).map(|_| rng.random()).collect();
            let q = Tensor::new(vec![d_count, m, k, k], data).unwrap();
            assert_eq!(devectorize_kernels(&vectorize_kernels(&q).unwrap(), &g).unwrap(), q);
        }
        let g = ConvGeometry::new(3, 1, 0, 1, 1).unwrap();
        assert!(devectorize_kernels(&DMatrix::zeros(1, 10), &g).is_err());
    }

    #[test]
    fn swap_axes_is_an_involution() {
        let q = Tensor::new(vec![2, 3, 1, 1], (0..6).map(f64::from).collect()).unwrap();
        let s = swap_kernel_axes(&q).unwrap();
        assert_eq!(s.shape(), &[3, 2, 1, 1]);
        assert_eq!(s.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(swap_kernel_axes(&s).unwrap(), q);
    }

    #[test]
    fn channel_weights_match_dense_diagonal_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(12, 7, |_, _| rng.random::<f64>() - 0.5);
        let w = ProbabilityVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let mut diag = DMatrix::zeros(12, 12);
        for i in 0..12 {
            diag[(i, i)] = w.as_slice()[i / 4];
        }
        let got = apply_channel_weights(&x, &w).unwrap();
        assert!((got - &diag * &x).abs().max() < 1e-15);

        let u = apply_channel_weights(&x, &ProbabilityVector::uniform(3)).unwrap();
        assert!((u - &x / 3.0).abs().max() < 1e-15);
        let o = apply_channel_weights(&x, &ProbabilityVector::one_hot(3, 1)).unwrap();
        assert!(o.rows(0, 4).iter().chain(o.rows(8, 4).iter()).all(|v| *v == 0.0));
        assert!(apply_channel_weights(&DMatrix::zeros(10, 1), &w).is_err());
    }

    /// Correlation by explicit loops over output position, channel and tap.
    fn loop_conv(x: &[f64], q: &[f64], g: &ConvGeometry, t: usize, h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (g.output_extent(h).unwrap(), g.output_extent(w).unwrap());
        let (d_count, m, k) = (g.in_channels, g.out_channels, g.kernel);
        let mut y = vec![0.0; t * m * oh * ow];
        for s in 0..t {
            for j in 0..m {
                for a in 0..oh {
                    for b in 0..ow {
                        let mut acc = 0.0;
                        for d in 0..d_count {
                            for r in 0..k {
                                for c in 0..k {
                                    let ii = (a * g.stride + r) as isize - g.padding as isize;
                                    let jj = (b * g.stride + c) as isize - g.padding as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                        acc += x[((s * d_count + d) * h + ii as usize) * w + jj as usize]
                                            * q[((d * m + j) * k + r) * k + c];
                                    }
                                }
                            }
                        }
                        y[((s * m + j) * oh + a) * ow + b] = acc;
                    }
                }
            }
        }
        y
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lifted_product_equals_loop_convolution(
            d_count in 1usize..=4, m in 1usize..=4, h in 4usize..=8, w in 4usize..=8,
            k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..=2,
            pad_frac in 0usize..=2, seed in any::<u64>(),
        ) {
            let fits = k.saturating_sub(h.min(w)).div_ceil(2);
            let padding = pad_frac.min(k / 2).max(fits);
            let g = ConvGeometry::new(k, stride, padding, d_count, m).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = 2;
            let x: Vec<f64> = (0..t * d_count * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
            let q: Vec<f64> = (0..d_count * m * k * k).map(|_| rng.random::<f64>() - 0.5).collect();
            let y = loop_conv(&x, &q, &g, t, h, w);
            let (oh, ow) = (g.output_extent(h).unwrap(), g.output_extent(w).unwrap());
            let dump = LayerDump::new(
                "l", g,
                Tensor::new(vec![t, d_count, h, w], x).unwrap(),
                Tensor::new(vec![t, m, oh, ow], y).unwrap(),
            ).unwrap();
            let ds = extract_patches(&dump, &all_positions(&dump)).unwrap();
            let qvec = vectorize_kernels(&Tensor::new(vec![d_count, m, k, k], q).unwrap()).unwrap();
            let pred = &qvec * &ds.x;
            prop_assert!((pred - &ds.y).abs().max() < 1e-10);
        }
    }
}
