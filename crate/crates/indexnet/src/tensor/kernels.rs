use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Output extents of a square-window, strided, zero-padded scan over a map.
///
/// Width is the first spatial axis (index `l`), height the second (index `m`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_width: usize,
    pub in_height: usize,
    pub receptive_field: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_width: usize,
    pub out_height: usize,
}

fn out_extent(n: usize, r: usize, s: usize, p: usize) -> Result<usize> {
    let span = n + 2 * p;
    if s == 0 || r == 0 {
        return Err(Error::Geometry("stride and receptive field must be positive".into()));
    }
    if r > span {
        return Err(Error::Geometry(format!(
            "receptive field {r} exceeds padded extent {span}"
        )));
    }
    if (span - r) % s != 0 {
        return Err(Error::Geometry(format!(
            "({n} + 2*{p} - {r}) / {s} is not an integer"
        )));
    }
    Ok((span - r) / s + 1)
}

impl ConvGeometry {
    pub fn new(
        in_width: usize,
        in_height: usize,
        receptive_field: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(ConvGeometry {
            in_width,
            in_height,
            receptive_field,
            stride,
            padding,
            out_width: out_extent(in_width, receptive_field, stride, padding)?,
            out_height: out_extent(in_height, receptive_field, stride, padding)?,
        })
    }

    /// Stride 1 with padding `(R-1)/2`, which preserves the map size.
    pub fn same(in_width: usize, in_height: usize, receptive_field: usize) -> Result<Self> {
        if receptive_field % 2 == 0 {
            return Err(Error::Geometry(format!(
                "same mode needs an odd receptive field, got {receptive_field}"
            )));
        }
        Self::new(in_width, in_height, receptive_field, 1, (receptive_field - 1) / 2)
    }

    pub fn padded_width(&self) -> usize {
        self.in_width + 2 * self.padding
    }

    pub fn padded_height(&self) -> usize {
        self.in_height + 2 * self.padding
    }

    pub fn out_positions(&self) -> usize {
        self.out_width * self.out_height
    }
}

/// Zero-pads the last two axes by `p` on each side.
pub fn pad2d(x: &Tensor, p: usize) -> Tensor {
    if p == 0 {
        return x.clone();
    }
    let r = x.rank();
    assert!(r >= 2, "pad2d needs at least two axes");
    let (n, t) = (x.dim(r - 2), x.dim(r - 1));
    let (np, tp) = (n + 2 * p, t + 2 * p);
    let mut shape = x.shape().to_vec();
    shape[r - 2] = np;
    shape[r - 1] = tp;
    let maps = x.len() / (n * t).max(1);
    let mut out = Tensor::zeros(&shape);
    let (src, dst) = (x.data(), out.data_mut());
    for b in 0..maps {
        for l in 0..n {
            let s = b * n * t + l * t;
            let d = b * np * tp + (l + p) * tp + p;
            dst[d..d + t].copy_from_slice(&src[s..s + t]);
        }
    }
    out
}

/// Removes a border of width `p` from the last two axes.
pub fn crop2d(x: &Tensor, p: usize) -> Tensor {
    if p == 0 {
        return x.clone();
    }
    let r = x.rank();
    let (np, tp) = (x.dim(r - 2), x.dim(r - 1));
    let (n, t) = (np - 2 * p, tp - 2 * p);
    let mut shape = x.shape().to_vec();
    shape[r - 2] = n;
    shape[r - 1] = t;
    let maps = x.len() / (np * tp).max(1);
    let mut out = Tensor::zeros(&shape);
    let (src, dst) = (x.data(), out.data_mut());
    for b in 0..maps {
        for l in 0..n {
            let s = b * np * tp + (l + p) * tp + p;
            let d = b * n * t + l * t;
            dst[d..d + t].copy_from_slice(&src[s..s + t]);
        }
    }
    out
}

fn check_padded(x: &Tensor, geom: &ConvGeometry) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return dim_err(format!("expected [F, H, W], got {:?}", x.shape()));
    }
    let (f, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if h != geom.padded_width() || w != geom.padded_height() {
        return dim_err(format!(
            "padded input {h}x{w} does not match geometry {}x{}",
            geom.padded_width(),
            geom.padded_height()
        ));
    }
    Ok((f, h, w))
}

/// Lays every receptive field of a padded `[F, H, W]` map out as one row.
///
/// Row `l*T_p + m`, column `f*R*R + j*R + k` holds `x[f, S*l + j, S*m + k]`.
pub fn im2col(x: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (f, _, w) = check_padded(x, geom)?;
    let (r, s) = (geom.receptive_field, geom.stride);
    let cols = f * r * r;
    let rows = geom.out_positions();
    let mut out = vec![0.0; rows * cols];
    let src = x.data();
    let h = geom.padded_width();
    for l in 0..geom.out_width {
        for m in 0..geom.out_height {
            let row = &mut out[(l * geom.out_height + m) * cols..][..cols];
            for ff in 0..f {
                for j in 0..r {
                    let base = ff * h * w + (s * l + j) * w + s * m;
                    row[ff * r * r + j * r..][..r].copy_from_slice(&src[base..base + r]);
                }
            }
        }
    }
    Tensor::from_vec(&[rows, cols], out)
}

/// Scatter-add adjoint of [`im2col`]; returns the padded `[F, H, W]` map.
pub fn col2im(cols: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [rows, ncols] = cols.dims2()?;
    let r = geom.receptive_field;
    if rows != geom.out_positions() || ncols % (r * r) != 0 {
        return dim_err(format!(
            "columns {:?} do not match geometry {}x{} with R={r}",
            cols.shape(),
            geom.out_width,
            geom.out_height
        ));
    }
    let f = ncols / (r * r);
    let (h, w, s) = (geom.padded_width(), geom.padded_height(), geom.stride);
    let mut out = Tensor::zeros(&[f, h, w]);
    let dst = out.data_mut();
    let src = cols.data();
    for l in 0..geom.out_width {
        for m in 0..geom.out_height {
            let row = &src[(l * geom.out_height + m) * ncols..][..ncols];
            for ff in 0..f {
                for j in 0..r {
                    let base = ff * h * w + (s * l + j) * w + s * m;
                    for k in 0..r {
                        dst[base + k] += row[ff * r * r + j * r + k];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Max-pooling result with the winning in-window offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolRows {
    pub values: Tensor,
    /// `(j, k)` of the maximum, one per output element in row-major order.
    pub argmax: Vec<(usize, usize)>,
}

/// Max pooling as a maximum search along the rows of the flattened windows.
///
/// Ties resolve to the smallest row-major `(j, k)`.
pub fn pool_rows(x: &Tensor, r: usize, s: usize) -> Result<PoolRows> {
    if x.rank() != 3 {
        return dim_err(format!("expected [F, H, W], got {:?}", x.shape()));
    }
    let (f, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let geom = ConvGeometry::new(h, w, r, s, 0)?;
    let (np, tp) = (geom.out_width, geom.out_height);
    let mut values = Tensor::zeros(&[f, np, tp]);
    let mut argmax = Vec::with_capacity(f * np * tp);
    for ff in 0..f {
        let single = x.slice_outer(ff).reshape(&[1, h, w])?;
        let rows = im2col(&single, &geom)?;
        for (pos, row) in rows.data().chunks(r * r).enumerate() {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            values.data_mut()[ff * np * tp + pos] = row[best];
            argmax.push((best / r, best % r));
        }
    }
    Ok(PoolRows { values, argmax })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 11) as f64) - 4.5).collect()).unwrap()
    }

    #[test]
    fn geometry_rejects_non_integral_output() {
        assert!(ConvGeometry::new(5, 5, 2, 2, 0).is_err());
        let g = ConvGeometry::new(5, 5, 3, 2, 0).unwrap();
        assert_eq!((g.out_width, g.out_height), (2, 2));
    }

    #[test]
    fn same_mode_preserves_size() {
        let g = ConvGeometry::same(7, 5, 3).unwrap();
        assert_eq!((g.padding, g.out_width, g.out_height), (1, 7, 5));
        assert!(ConvGeometry::same(4, 4, 2).is_err());
    }

    #[test]
    fn pad_single_pixel() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
        let p = pad2d(&x, 1);
        assert_eq!(p.shape(), &[1, 3, 3]);
        assert_eq!(p.sum(), 5.0);
        assert_eq!(p[[0, 1, 1]], 5.0);
        assert_eq!(pad2d(&x, 0), x);
    }

    #[test]
    fn pad_preserves_sum_and_crop_inverts() {
        let x = ramp(&[2, 3, 4, 5]);
        let p = pad2d(&x, 2);
        assert!((p.sum() - x.sum()).abs() < 1e-12);
        assert_eq!(crop2d(&p, 2), x);
    }

    #[test]
    fn im2col_full_field_is_flatten() {
        let x = ramp(&[1, 3, 3]);
        let g = ConvGeometry::new(3, 3, 3, 1, 0).unwrap();
        let c = im2col(&x, &g).unwrap();
        assert_eq!(c.shape(), &[1, 9]);
        assert_eq!(c.data(), x.data());
    }

    #[test]
    fn im2col_blocks() {
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let g = ConvGeometry::new(4, 4, 2, 2, 0).unwrap();
        let c = im2col(&x, &g).unwrap();
        assert_eq!(c.shape(), &[4, 4]);
        assert_eq!(c.outer(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(c.outer(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(c.outer(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(c.outer(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn col2im_non_overlapping_round_trip() {
        let x = ramp(&[2, 4, 6]);
        let g = ConvGeometry::new(4, 6, 2, 2, 0).unwrap();
        assert_eq!(col2im(&im2col(&x, &g).unwrap(), &g).unwrap(), x);
    }

    #[test]
    fn col2im_counts_overlaps() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let g = ConvGeometry::new(3, 3, 2, 1, 0).unwrap();
        let back = col2im(&im2col(&x, &g).unwrap(), &g).unwrap();
        assert_eq!(back[[0, 1, 1]], 4.0);
        assert_eq!(back[[0, 0, 0]], 1.0);
        assert_eq!(back[[0, 0, 1]], 2.0);
    }

    #[test]
    fn pool_constant_and_hand_case() {
        let c = pool_rows(&Tensor::full(&[1, 4, 4], 2.0), 2, 2).unwrap();
        assert!(c.values.data().iter().all(|&v| v == 2.0));
        assert!(c.argmax.iter().all(|&a| a == (0, 0)));
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pool_rows(&x, 2, 2).unwrap();
        assert_eq!(p.values.data(), &[4.0]);
        assert_eq!(p.argmax, vec![(1, 1)]);
    }

    #[test]
    fn pool_rejects_bad_window() {
        assert!(pool_rows(&Tensor::zeros(&[1, 5, 5]), 2, 2).is_err());
    }
}
