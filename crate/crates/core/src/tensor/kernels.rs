//! im2col-based convolution kernels over a normalized 3-D spatial layout.
//!
//! 2-D inputs are handled as 3-D with a unit depth axis, so one code path
//! serves both spatial ranks.

use super::{Element, Result, TensorError};

/// Output length of a strided, zero-padded cross-correlation along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of the transposed convolution along one axis.
pub fn conv_transpose_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&n| n >= 1)
}

/// Geometry of one forward convolution. For a transposed convolution this
/// describes the forward convolution it is the adjoint of.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub rank: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

fn per_axis(op: &'static str, rank: usize, v: &[usize], fill: usize) -> Result<[usize; 3]> {
    let expanded: Vec<usize> = match v.len() {
        1 => vec![v[0]; rank],
        n if n == rank => v.to_vec(),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: vec![rank],
                got: vec![v.len()],
            })
        }
    };
    Ok(lift(rank, &expanded, fill))
}

fn lift(rank: usize, v: &[usize], fill: usize) -> [usize; 3] {
    if rank == 2 {
        [fill, v[0], v[1]]
    } else {
        [v[0], v[1], v[2]]
    }
}

fn spatial_rank(op: &'static str, shape: &[usize]) -> Result<usize> {
    let rank = shape.len().saturating_sub(2);
    if rank == 2 || rank == 3 {
        Ok(rank)
    } else {
        Err(TensorError::UnsupportedRank { op, rank })
    }
}

impl ConvGeom {
    pub fn for_conv(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Self> {
        const OP: &str = "conv_nd";
        let rank = spatial_rank(OP, x_shape)?;
        if w_shape.len() != x_shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: vec![x_shape.len()],
                got: vec![w_shape.len()],
            });
        }
        if w_shape[1] != x_shape[1] {
            return Err(TensorError::ChannelMismatch {
                op: OP,
                expected: w_shape[1],
                got: x_shape[1],
            });
        }
        let input = lift(rank, &x_shape[2..], 1);
        let kernel = lift(rank, &w_shape[2..], 1);
        let stride = per_axis(OP, rank, stride, 1)?;
        let pad = per_axis(OP, rank, padding, 0)?;
        let mut output = [1; 3];
        for a in 0..3 {
            output[a] = conv_output_len(input[a], kernel[a], stride[a], pad[a])
                .ok_or(TensorError::OutputTooSmall { op: OP })?;
        }
        Ok(Self {
            batch: x_shape[0],
            cin: x_shape[1],
            cout: w_shape[0],
            rank,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    /// `x_shape = [N, Cin, s...]`, `w_shape = [Cin, Cout, k...]`.
    pub fn for_conv_transpose(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Self> {
        const OP: &str = "conv_transpose_nd";
        let rank = spatial_rank(OP, x_shape)?;
        if w_shape.len() != x_shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: vec![x_shape.len()],
                got: vec![w_shape.len()],
            });
        }
        if w_shape[0] != x_shape[1] {
            return Err(TensorError::ChannelMismatch {
                op: OP,
                expected: w_shape[0],
                got: x_shape[1],
            });
        }
        let small = lift(rank, &x_shape[2..], 1);
        let kernel = lift(rank, &w_shape[2..], 1);
        let stride = per_axis(OP, rank, stride, 1)?;
        let pad = per_axis(OP, rank, padding, 0)?;
        let mut big = [1; 3];
        for a in 0..3 {
            big[a] = conv_transpose_output_len(small[a], kernel[a], stride[a], pad[a])
                .ok_or(TensorError::OutputTooSmall { op: OP })?;
        }
        Ok(Self {
            batch: x_shape[0],
            cin: w_shape[1],
            cout: w_shape[0],
            rank,
            input: big,
            kernel,
            stride,
            pad,
            output: small,
        })
    }

    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn spatial(&self, v: &[usize; 3]) -> Vec<usize> {
        if self.rank == 2 {
            vec![v[1], v[2]]
        } else {
            v.to_vec()
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cin];
        s.extend(self.spatial(&self.input));
        s
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cout];
        s.extend(self.spatial(&self.output));
        s
    }

    fn is_pointwise(&self) -> bool {
        self.kvol() == 1 && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

#[inline]
fn src_index(o: usize, stride: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let z = (o * stride + k) as isize - pad as isize;
    if z >= 0 && (z as usize) < len {
        Some(z as usize)
    } else {
        None
    }
}

/// Unfolds one sample `x[cin, D, H, W]` into `col[cin·kvol, out_vol]`.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let out_vol = g.out_vol();
    let mut r = 0;
    for c in 0..g.cin {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &mut col[r * out_vol..(r + 1) * out_vol];
                    r += 1;
                    for z in 0..od {
                        let Some(sz) = src_index(z, g.stride[0], a, g.pad[0], id) else {
                            row[z * oh * ow..(z + 1) * oh * ow].fill(T::zero());
                            continue;
                        };
                        for y in 0..oh {
                            let dst = &mut row[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let Some(sy) = src_index(y, g.stride[1], b, g.pad[1], ih) else {
                                dst.fill(T::zero());
                                continue;
                            };
                            let base = ((c * id + sz) * ih + sy) * iw;
                            for (xo, d) in dst.iter_mut().enumerate() {
                                *d = match src_index(xo, g.stride[2], e, g.pad[2], iw) {
                                    Some(sx) => x[base + sx],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back, accumulating into `dx`.
fn col2im<T: Element>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let out_vol = g.out_vol();
    let mut r = 0;
    for c in 0..g.cin {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &col[r * out_vol..(r + 1) * out_vol];
                    r += 1;
                    for z in 0..od {
                        let Some(sz) = src_index(z, g.stride[0], a, g.pad[0], id) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(sy) = src_index(y, g.stride[1], b, g.pad[1], ih) else {
                                continue;
                            };
                            let src = &row[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let base = ((c * id + sz) * ih + sy) * iw;
                            for (xo, &v) in src.iter().enumerate() {
                                if let Some(sx) = src_index(xo, g.stride[2], e, g.pad[2], iw) {
                                    dx[base + sx] = dx[base + sx] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.cin * g.kvol());
    let mut out = vec![T::zero(); g.batch * g.cout * out_vol];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * out_vol]
    };
    for n in 0..g.batch {
        let xn = &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let on = &mut out[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        T::gemm(g.cout, rows, out_vol, w, false, cols, false, T::zero(), on);
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(out_vol).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    }
    out
}

pub(crate) fn conv_backward_input<T: Element>(g: &ConvGeom, dy: &[T], w: &[T]) -> Vec<T> {
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.cin * g.kvol());
    let mut dx = vec![T::zero(); g.batch * g.cin * in_vol];
    let mut col = vec![T::zero(); rows * out_vol];
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        let dxn = &mut dx[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        if g.is_pointwise() {
            T::gemm(rows, g.cout, out_vol, w, true, dyn_, false, T::zero(), dxn);
        } else {
            T::gemm(rows, g.cout, out_vol, w, true, dyn_, false, T::zero(), &mut col);
            col2im(g, &col, dxn);
        }
    }
    dx
}

pub(crate) fn conv_backward_weight<T: Element>(g: &ConvGeom, dy: &[T], x: &[T]) -> Vec<T> {
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.cin * g.kvol());
    let mut dw = vec![T::zero(); g.cout * rows];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * out_vol]
    };
    for n in 0..g.batch {
        let xn = &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let dyn_ = &dy[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        T::gemm(g.cout, out_vol, rows, dyn_, false, cols, true, T::one(), &mut dw);
    }
    dw
}

pub(crate) fn channel_sums<T: Element>(batch: usize, channels: usize, dy: &[T]) -> Vec<T> {
    let vol = dy.len() / (batch * channels);
    let mut out = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (n * channels + c) * vol;
            *o = *o + dy[start..start + vol].iter().copied().sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop 2-D cross-correlation, single sample and channel pair.
    fn naive_conv2d(
        x: &[f64],
        (h, w): (usize, usize),
        k: &[f64],
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for a in 0..kh {
                    for b in 0..kw {
                        let y = (i * stride + a) as isize - pad as isize;
                        let x_ = (j * stride + b) as isize - pad as isize;
                        if y >= 0 && x_ >= 0 && (y as usize) < h && (x_ as usize) < w {
                            acc += x[y as usize * w + x_ as usize] * k[a * kw + b];
                        }
                    }
                }
                out[i * ow + j] = acc;
            }
        }
        out
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_output_len(64, 3, 2, 1), Some(32));
        assert_eq!(conv_output_len(2, 3, 1, 0), None);
        assert_eq!(conv_transpose_output_len(32, 2, 2, 0), Some(64));
        assert_eq!(conv_transpose_output_len(1, 1, 1, 1), None);
    }

    #[test]
    fn im2col_matches_naive_with_padding_and_stride() {
        let x: Vec<f64> = (0..35).map(|v| (v as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let g = ConvGeom::for_conv(&[1, 1, 5, 7], &[1, 1, 3, 3], &[stride], &[pad]).unwrap();
            let got = conv_forward(&g, &x, &k, None);
            let want = naive_conv2d(&x, (5, 7), &k, (3, 3), stride, pad);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::for_conv(&[1, 2, 3, 4, 5], &[1, 2, 3, 2, 3], &[2, 1, 2], &[1, 0, 1]).unwrap();
        let rows = g.cin * g.kvol();
        let x: Vec<f64> = (0..g.cin * g.in_vol()).map(|v| ((v * 7 % 11) as f64) - 5.0).collect();
        let c: Vec<f64> = (0..rows * g.out_vol()).map(|v| ((v * 5 % 13) as f64) - 6.0).collect();
        let mut ax = vec![0.0; rows * g.out_vol()];
        im2col(&g, &x, &mut ax);
        let mut atc = vec![0.0; x.len()];
        col2im(&g, &c, &mut atc);
        let lhs: f64 = ax.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&atc).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
