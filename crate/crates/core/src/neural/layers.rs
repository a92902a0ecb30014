//! Forward and backward kernels. Shapes are validated by the caller.

use super::{LayerSpec, Params, Tensor};

const NORM_FLOOR: f32 = 1e-12;

pub(super) fn forward(layer: &LayerSpec, params: Option<&Params>, x: &Tensor) -> (Tensor, Option<Vec<u32>>) {
    match *layer {
        LayerSpec::Conv2d { stride, padding, .. } => (conv_forward(params.unwrap(), x, stride, padding), None),
        LayerSpec::Relu => {
            let data = x.data.iter().map(|&v| v.max(0.0)).collect();
            (Tensor { shape: x.shape.clone(), data }, None)
        }
        LayerSpec::MaxPool2d { window, stride } => {
            let (y, choice) = pool_forward(x, window, stride);
            (y, Some(choice))
        }
        LayerSpec::Flatten => (x.clone().reshaped(vec![x.len()]), None),
        LayerSpec::Dense { .. } => (dense_forward(params.unwrap(), x), None),
        LayerSpec::L2Normalize => {
            let d = l2_norm(&x.data).max(NORM_FLOOR);
            let data = x.data.iter().map(|&v| v / d).collect();
            (Tensor { shape: x.shape.clone(), data }, None)
        }
    }
}

pub(super) fn backward(
    layer: &LayerSpec,
    params: Option<&Params>,
    x: &Tensor,
    argmax: Option<&[u32]>,
    g: &Tensor,
) -> (Tensor, Option<Params>) {
    match *layer {
        LayerSpec::Conv2d { stride, padding, .. } => {
            let (gx, pg) = conv_backward(params.unwrap(), x, g, stride, padding);
            (gx, Some(pg))
        }
        LayerSpec::Relu => {
            let data = x.data.iter().zip(&g.data).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
            (Tensor { shape: x.shape.clone(), data }, None)
        }
        LayerSpec::MaxPool2d { .. } => {
            let mut gx = Tensor::zeros(&x.shape);
            for (&src, &d) in argmax.unwrap().iter().zip(&g.data) {
                gx.data[src as usize] += d;
            }
            (gx, None)
        }
        LayerSpec::Flatten => (g.clone().reshaped(x.shape.clone()), None),
        LayerSpec::Dense { .. } => {
            let (gx, pg) = dense_backward(params.unwrap(), x, g);
            (gx, Some(pg))
        }
        LayerSpec::L2Normalize => (l2_backward(x, g), None),
    }
}

fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

// Jacobian (I - y y^T) / n with y = x / n; below the floor the map is
// x / floor, whose Jacobian is I / floor.
fn l2_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let n = l2_norm(&x.data);
    let data = if n >= NORM_FLOOR {
        let y: Vec<f32> = x.data.iter().map(|v| v / n).collect();
        let dot: f32 = y.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        y.iter().zip(&g.data).map(|(&yi, &gi)| (gi - yi * dot) / n).collect()
    } else {
        g.data.iter().map(|v| v / NORM_FLOOR).collect()
    };
    Tensor { shape: x.shape.clone(), data }
}

fn dense_forward(p: &Params, x: &Tensor) -> Tensor {
    let (out, inp) = (p.weight.shape[0], p.weight.shape[1]);
    let w = &p.weight.data;
    let data = (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            p.bias.data[o] + row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect();
    Tensor { shape: vec![out], data }
}

fn dense_backward(p: &Params, x: &Tensor, g: &Tensor) -> (Tensor, Params) {
    let (out, inp) = (p.weight.shape[0], p.weight.shape[1]);
    let mut gw = vec![0.0f32; out * inp];
    let mut gx = vec![0.0f32; inp];
    for o in 0..out {
        let d = g.data[o];
        let row = &p.weight.data[o * inp..(o + 1) * inp];
        let grow = &mut gw[o * inp..(o + 1) * inp];
        for i in 0..inp {
            grow[i] = d * x.data[i];
            gx[i] += row[i] * d;
        }
    }
    let grads = Params {
        weight: Tensor { shape: p.weight.shape.clone(), data: gw },
        bias: Tensor { shape: p.bias.shape.clone(), data: g.data.clone() },
    };
    (Tensor { shape: x.shape.clone(), data: gx }, grads)
}

struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(p: &Params, x: &Tensor, stride: usize, pad: usize) -> Self {
        let (in_c, in_h, in_w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (out_c, k) = (p.weight.shape[0], p.weight.shape[2]);
        ConvGeometry {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        }
    }

    /// Output columns whose input column `ox*stride + kx - pad` is inside
    /// the image, as a half-open range.
    fn valid(&self, kk: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // ox*stride + kk >= pad  and  ox*stride + kk - pad < in_len
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(self.stride) };
        let hi_excl = if in_len + self.pad > kk { (in_len + self.pad - kk).div_ceil(self.stride) } else { 0 };
        (lo, hi_excl.min(out_len))
    }
}

fn conv_forward(p: &Params, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    let geo = ConvGeometry::new(p, x, stride, pad);
    let plane = geo.out_h * geo.out_w;
    let mut out = vec![0.0f32; geo.out_c * plane];
    for oc in 0..geo.out_c {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        dst.iter_mut().for_each(|v| *v = p.bias.data[oc]);
        for ic in 0..geo.in_c {
            let src = &x.data[ic * geo.in_h * geo.in_w..(ic + 1) * geo.in_h * geo.in_w];
            for ky in 0..geo.k {
                let (oy0, oy1) = geo.valid(ky, geo.out_h, geo.in_h);
                for kx in 0..geo.k {
                    let w = p.weight.data[((oc * geo.in_c + ic) * geo.k + ky) * geo.k + kx];
                    let (ox0, ox1) = geo.valid(kx, geo.out_w, geo.in_w);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let src_row = &src[iy * geo.in_w..(iy + 1) * geo.in_w];
                        let dst_row = &mut dst[oy * geo.out_w..(oy + 1) * geo.out_w];
                        for ox in ox0..ox1 {
                            dst_row[ox] += w * src_row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![geo.out_c, geo.out_h, geo.out_w], data: out }
}

fn conv_backward(p: &Params, x: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Params) {
    let geo = ConvGeometry::new(p, x, stride, pad);
    let plane = geo.out_h * geo.out_w;
    let in_plane = geo.in_h * geo.in_w;
    let mut gw = vec![0.0f32; p.weight.len()];
    let mut gb = vec![0.0f32; geo.out_c];
    let mut gx = vec![0.0f32; x.len()];
    for oc in 0..geo.out_c {
        let gout = &g.data[oc * plane..(oc + 1) * plane];
        gb[oc] = gout.iter().sum();
        for ic in 0..geo.in_c {
            let src = &x.data[ic * in_plane..(ic + 1) * in_plane];
            let gsrc = &mut gx[ic * in_plane..(ic + 1) * in_plane];
            for ky in 0..geo.k {
                let (oy0, oy1) = geo.valid(ky, geo.out_h, geo.in_h);
                for kx in 0..geo.k {
                    let wi = ((oc * geo.in_c + ic) * geo.k + ky) * geo.k + kx;
                    let w = p.weight.data[wi];
                    let (ox0, ox1) = geo.valid(kx, geo.out_w, geo.in_w);
                    let mut acc = 0.0f32;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gout[oy * geo.out_w..(oy + 1) * geo.out_w];
                        for ox in ox0..ox1 {
                            let ix = iy * geo.in_w + ox * stride + kx - pad;
                            let d = grow[ox];
                            acc += d * src[ix];
                            gsrc[ix] += w * d;
                        }
                    }
                    gw[wi] = acc;
                }
            }
        }
    }
    let grads = Params {
        weight: Tensor { shape: p.weight.shape.clone(), data: gw },
        bias: Tensor { shape: p.bias.shape.clone(), data: gb },
    };
    (Tensor { shape: x.shape.clone(), data: gx }, grads)
}

// Ties keep the first maximum in row-major window order.
fn pool_forward(x: &Tensor, window: usize, stride: usize) -> (Tensor, Vec<u32>) {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut choice = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * stride * w + ox * stride;
                let mut best = x.data[best_i];
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                choice.push(best_i as u32);
            }
        }
    }
    (Tensor { shape: vec![c, oh, ow], data: out }, choice)
}
