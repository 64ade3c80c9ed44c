//! 3D convolution (kernel 3, padding 1, stride 1 or 2) via im2col so the
//! inner contraction runs through the matrix-multiply kernel.

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use super::TapeFloat;

pub fn out_spatial(dim: usize, stride: usize) -> usize {
    (dim + 2 - 3) / stride + 1
}

/// Unfold the padded input into a `[C_in*27, n_out]` matrix.
fn im2col<F: TapeFloat>(input: &ArrayD<F>, stride: usize) -> Array2<F> {
    let shape = input.shape();
    let (c_in, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (od, oh, ow) = (
        out_spatial(d, stride),
        out_spatial(h, stride),
        out_spatial(w, stride),
    );
    let n_out = od * oh * ow;
    let mut cols = Array2::<F>::zeros((c_in * 27, n_out));
    for c in 0..c_in {
        for kz in 0..3usize {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = ((c * 3 + kz) * 3 + ky) * 3 + kx;
                    let mut col = 0;
                    for oz in 0..od {
                        let iz = (oz * stride + kz) as isize - 1;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - 1;
                                if iz >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (iz as usize) < d
                                    && (iy as usize) < h
                                    && (ix as usize) < w
                                {
                                    cols[[row, col]] =
                                        input[[c, iz as usize, iy as usize, ix as usize]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a `[C_in*27, n_out]` matrix back to input shape.
fn col2im<F: TapeFloat>(
    cols: &Array2<F>,
    input_shape: &[usize],
    stride: usize,
) -> ArrayD<F> {
    let (c_in, d, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (od, oh, ow) = (
        out_spatial(d, stride),
        out_spatial(h, stride),
        out_spatial(w, stride),
    );
    let mut out = ArrayD::<F>::zeros(IxDyn(input_shape));
    for c in 0..c_in {
        for kz in 0..3usize {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = ((c * 3 + kz) * 3 + ky) * 3 + kx;
                    let mut col = 0;
                    for oz in 0..od {
                        let iz = (oz * stride + kz) as isize - 1;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - 1;
                                if iz >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (iz as usize) < d
                                    && (iy as usize) < h
                                    && (ix as usize) < w
                                {
                                    out[[c, iz as usize, iy as usize, ix as usize]] =
                                        out[[c, iz as usize, iy as usize, ix as usize]]
                                            + cols[[row, col]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward: input `[C_in, D, H, W]`, kernel `[C_out, C_in, 3, 3, 3]`, bias
/// `[C_out]` → `[C_out, D', H', W']`.
pub fn conv3_forward<F: TapeFloat>(
    input: &ArrayD<F>,
    kernel: &ArrayD<F>,
    bias: &ArrayD<F>,
    stride: usize,
) -> ArrayD<F> {
    let c_out = kernel.shape()[0];
    let c_in = kernel.shape()[1];
    let cols = im2col(input, stride);
    let kmat = kernel
        .view()
        .into_shape_with_order((c_out, c_in * 27))
        .expect("kernel reshape");
    let mut out_mat = kmat.dot(&cols);
    for (mut row, b) in out_mat.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + *b);
    }
    let (od, oh, ow) = (
        out_spatial(input.shape()[1], stride),
        out_spatial(input.shape()[2], stride),
        out_spatial(input.shape()[3], stride),
    );
    out_mat
        .into_shape_with_order(IxDyn(&[c_out, od, oh, ow]))
        .expect("output reshape")
}

/// Backward: gradients for input, kernel and bias. The unfolded input is
/// recomputed here rather than cached on the tape.
pub fn conv3_backward<F: TapeFloat>(
    input: &ArrayD<F>,
    kernel: &ArrayD<F>,
    grad_out: &ArrayD<F>,
    stride: usize,
) -> (ArrayD<F>, ArrayD<F>, ArrayD<F>) {
    let c_out = kernel.shape()[0];
    let c_in = kernel.shape()[1];
    let n_out: usize = grad_out.shape()[1..].iter().product();
    let g_mat = grad_out
        .view()
        .into_shape_with_order((c_out, n_out))
        .expect("grad reshape")
        .into_dimensionality::<Ix2>()
        .expect("2d");
    let cols = im2col(input, stride);
    let dk_mat = g_mat.dot(&cols.t());
    let dkernel = dk_mat
        .into_shape_with_order(IxDyn(kernel.shape()))
        .expect("kernel grad reshape");
    let dbias_vec: Vec<F> = g_mat.rows().into_iter().map(|r| r.sum()).collect();
    let dbias = ArrayD::from_shape_vec(IxDyn(&[c_out]), dbias_vec).expect("bias grad");
    let kmat = kernel
        .view()
        .into_shape_with_order((c_out, c_in * 27))
        .expect("kernel reshape");
    let dcols = kmat.t().dot(&g_mat);
    let dinput = col2im(&dcols, input.shape(), stride);
    (dinput, dkernel, dbias)
}
