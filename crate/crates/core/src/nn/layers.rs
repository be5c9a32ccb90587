//! Convolution and pooling kernels (im2col + GEMM).

use super::{FeatureShape, Layer, LayerSpec};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{gemm_slices, Tensor};

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn of<S>(layer: &Layer<S>) -> Self {
        let (FeatureShape::Image {
            channels: c,
            height: h,
            width: w,
        }, LayerSpec::Conv2d {
            out_ch: o,
            kernel: k,
            stride: s,
            ..
        }, FeatureShape::Image {
            height: ho,
            width: wo,
            ..
        }) = (layer.input, layer.spec, layer.output)
        else {
            unreachable!("conv layer with non-image shapes")
        };
        ConvGeom {
            c,
            h,
            w,
            o,
            k,
            s,
            ho,
            wo,
        }
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let src = (ci * self.h + oy * self.s + ki) * self.w + kj;
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = x[src + ox * self.s];
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let dst = (ci * self.h + oy * self.s + ki) * self.w + kj;
                        for ox in 0..self.wo {
                            let d = &mut dx[dst + ox * self.s];
                            *d = *d + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv_forward<S: Scalar>(layer: &Layer<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    let g = ConvGeom::of(layer);
    let weight = layer.weight.as_ref().expect("conv weight").as_slice();
    let bias = layer.bias.as_ref().expect("conv bias").as_slice();
    let batch = a.rows();
    let (patch, pos) = (g.patch(), g.positions());
    let out_len = g.o * pos;
    let mut out = vec![S::zero(); batch * out_len];
    let mut cols = vec![S::zero(); patch * pos];
    for b in 0..batch {
        g.im2col(a.row(b), &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (oc, chunk) in dst.chunks_mut(pos).enumerate() {
            chunk.fill(bias[oc]);
        }
        gemm_slices(
            g.o,
            patch,
            pos,
            weight,
            patch as isize,
            1,
            &cols,
            pos as isize,
            1,
            dst,
            S::one(),
        );
    }
    Tensor::matrix(batch, out_len, out)
}

#[allow(clippy::type_complexity)]
pub(super) fn conv_backward<S: Scalar>(
    layer: &Layer<S>,
    input: &Tensor<S>,
    delta: &Tensor<S>,
    need_params: bool,
    need_input: bool,
) -> Result<(Option<Tensor<S>>, Option<(Tensor<S>, Tensor<S>)>)> {
    let g = ConvGeom::of(layer);
    let weight = layer.weight.as_ref().expect("conv weight");
    let batch = input.rows();
    let (patch, pos) = (g.patch(), g.positions());
    let mut gw = vec![S::zero(); g.o * patch];
    let mut gb = vec![S::zero(); g.o];
    let mut dx = need_input.then(|| vec![S::zero(); batch * g.c * g.h * g.w]);
    let mut cols = vec![S::zero(); patch * pos];
    let mut dcols = vec![S::zero(); patch * pos];
    for b in 0..batch {
        let d = delta.row(b);
        if need_params {
            g.im2col(input.row(b), &mut cols);
            // gw += δ_b · colsᵀ
            gemm_slices(
                g.o,
                pos,
                patch,
                d,
                pos as isize,
                1,
                &cols,
                1,
                pos as isize,
                &mut gw,
                S::one(),
            );
            for (oc, chunk) in d.chunks(pos).enumerate() {
                gb[oc] = gb[oc] + chunk.iter().copied().sum::<S>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · δ_b
            gemm_slices(
                patch,
                g.o,
                pos,
                weight.as_slice(),
                1,
                patch as isize,
                d,
                pos as isize,
                1,
                &mut dcols,
                S::zero(),
            );
            let len = g.c * g.h * g.w;
            g.col2im_add(&dcols, &mut dx[b * len..(b + 1) * len]);
        }
    }
    let params = if need_params {
        Some((
            Tensor::new(weight.shape().to_vec(), gw)?,
            Tensor::vector(gb)?,
        ))
    } else {
        None
    };
    let d_in = match dx {
        Some(dx) => Some(Tensor::matrix(batch, g.c * g.h * g.w, dx)?),
        None => None,
    };
    Ok((d_in, params))
}

fn pool_dims(input: FeatureShape, k: usize) -> (usize, usize, usize, usize, usize) {
    let FeatureShape::Image {
        channels,
        height,
        width,
    } = input
    else {
        unreachable!("pool layer with flat input")
    };
    (channels, height, width, height / k, width / k)
}

/// Flat offset (within one example) of the winning input of each pooled cell.
fn pool_argmax<S: Scalar>(input: FeatureShape, k: usize, x: &[S], mut visit: impl FnMut(usize, usize)) {
    let (c, h, w, ho, wo) = pool_dims(input, k);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ci * h + oy * k) * w + ox * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = (ci * h + oy * k + ki) * w + ox * k + kj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                visit((ci * ho + oy) * wo + ox, best);
            }
        }
    }
}

pub(super) fn maxpool_forward<S: Scalar>(input: FeatureShape, k: usize, a: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, _, _, ho, wo) = pool_dims(input, k);
    let out_len = c * ho * wo;
    let batch = a.rows();
    let mut out = vec![S::zero(); batch * out_len];
    for b in 0..batch {
        let x = a.row(b);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        pool_argmax(input, k, x, |o, i| dst[o] = x[i]);
    }
    Tensor::matrix(batch, out_len, out)
}

pub(super) fn maxpool_backward<S: Scalar>(
    input: FeatureShape,
    k: usize,
    x: &Tensor<S>,
    delta: &Tensor<S>,
) -> Tensor<S> {
    let mut dx = Tensor::zeros(x.shape().to_vec()).expect("same shape as input");
    for b in 0..x.rows() {
        let d = delta.row(b);
        let row = dx.row_mut(b);
        pool_argmax(input, k, x.row(b), |o, i| row[i] = row[i] + d[o]);
    }
    dx
}
