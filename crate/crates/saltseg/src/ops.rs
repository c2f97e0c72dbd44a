//! Low-level differentiable kernels: convolution, activations, 2x2 max
//! pooling and nearest-neighbor resizing, each with a hand-derived backward
//! pass. All functions are pure; callers own all state.

use crate::error::{Result, SaltError};
use crate::tensor::{PoolIndices, Tensor};

/// Weights (out_channels, in_channels, k_h, k_w) plus per-filter bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(SaltError::Shape(format!(
                "conv weights must be rank 4, got {:?}",
                weights.dims()
            )));
        }
        if bias.rank() != 1 || bias.dims()[0] != weights.dims()[0] {
            return Err(SaltError::Shape(format!(
                "bias dims {:?} do not match out_channels {}",
                bias.dims(),
                weights.dims()[0]
            )));
        }
        Ok(ConvKernel { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

// Independent accumulators keep the FP add chain off the critical path.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xs, ys) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xs[k] * ys[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f64>() + tail
}

/// Flipped-kernel 2D convolution of two rank-2 tensors, evaluated by direct
/// summation with zero padding outside the support of `f`. The output keeps
/// the extent of `f`, cropped so the kernel center sits on the output pixel:
///
///   out(m, n) = sum_{a,b} f(m + ch - a, n + cw - b) * g(a, b)
///
/// with (ch, cw) = (Kh/2, Kw/2). That center makes the crop line up with the
/// learned cross-correlation layer's "same" padding of (K-1)/2 for every
/// kernel size, so the two agree exactly under a 180-degree kernel flip.
pub fn conv2d_ref(f: &Tensor, g: &Tensor) -> Result<Tensor> {
    if f.rank() != 2 || g.rank() != 2 {
        return Err(SaltError::Shape(format!(
            "conv2d_ref expects rank-2 tensors, got {:?} and {:?}",
            f.dims(),
            g.dims()
        )));
    }
    let (h, w) = (f.dims()[0], f.dims()[1]);
    let (kh, kw) = (g.dims()[0], g.dims()[1]);
    let (ch, cw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w];
    for m in 0..h {
        for n in 0..w {
            let mut acc = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    let i = m as isize + ch as isize - a as isize;
                    let j = n as isize + cw as isize - b as isize;
                    if i >= 0 && (i as usize) < h && j >= 0 && (j as usize) < w {
                        acc += f.data()[i as usize * w + j as usize] * g.data()[a * kw + b];
                    }
                }
            }
            out[m * w + n] = acc;
        }
    }
    Tensor::new(vec![h, w], out)
}

fn check_conv_shapes(input: &Tensor, kernel: &ConvKernel) -> Result<()> {
    if input.rank() != 4 {
        return Err(SaltError::Shape(format!(
            "conv input must be rank 4, got {:?}",
            input.dims()
        )));
    }
    if input.dims()[1] != kernel.in_channels() {
        return Err(SaltError::Shape(format!(
            "input has {} channels but kernel expects {}",
            input.dims()[1],
            kernel.in_channels()
        )));
    }
    Ok(())
}

/// Cross-correlation of an NCHW batch with a filter bank, stride 1,
/// symmetric "same" zero padding of (k-1)/2. No activation applied.
pub fn conv2d_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    check_conv_shapes(input, kernel)?;
    let (n, in_c, h, w) = dims4(input);
    let out_c = kernel.out_channels();
    let (kh, kw) = (kernel.weights.dims()[2], kernel.weights.dims()[3]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);

    let mut out = Tensor::zeros(&[n, out_c, h, w]);
    // Row-tiled: one output row of every filter is accumulated in a scratch
    // block while the needed input rows are hot in cache.
    let mut scratch = vec![0.0f64; out_c * w];
    for b in 0..n {
        for y in 0..h {
            for (o, acc) in scratch.chunks_mut(w).enumerate() {
                acc.fill(kernel.bias.data()[o]);
            }
            for c in 0..in_c {
                let in_plane = input.plane(b, c);
                for u in 0..kh {
                    let iy = y as isize + u as isize - ph as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let row = &in_plane[iy as usize * w..iy as usize * w + w];
                    for (o, acc) in scratch.chunks_mut(w).enumerate() {
                        let w_base = ((o * in_c) + c) * kh * kw + u * kw;
                        for v in 0..kw {
                            let wt = kernel.weights.data()[w_base + v];
                            // x + v - pw must land in [0, w)
                            let xlo = pw.saturating_sub(v);
                            let xhi = (w + pw).saturating_sub(v).min(w);
                            if xlo < xhi {
                                axpy(&mut acc[xlo..xhi], &row[xlo + v - pw..], wt);
                            }
                        }
                    }
                }
            }
            for o in 0..out_c {
                out.plane_mut(b, o)[y * w..(y + 1) * w].copy_from_slice(&scratch[o * w..(o + 1) * w]);
            }
        }
    }
    Ok(out)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    (t.dims()[0], t.dims()[1], t.dims()[2], t.dims()[3])
}

/// Exact analytic gradients of `conv2d_forward` with respect to its input,
/// weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &ConvKernel,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_conv_shapes(input, kernel)?;
    let (n, in_c, h, w) = dims4(input);
    let out_c = kernel.out_channels();
    let (kh, kw) = (kernel.weights.dims()[2], kernel.weights.dims()[3]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    if grad_output.dims() != [n, out_c, h, w] {
        return Err(SaltError::Shape(format!(
            "grad_output dims {:?} do not match forward output [{n}, {out_c}, {h}, {w}]",
            grad_output.dims()
        )));
    }

    let mut grad_input = Tensor::zeros(input.dims());
    let mut grad_weights = vec![0.0; kernel.weights.len()];
    let mut grad_bias = vec![0.0; out_c];

    // Same row tiling as the forward pass, once per gradient target.
    let mut scratch = vec![0.0f64; in_c * w];
    for b in 0..n {
        // grad_input: each input row gathers from the kh output rows above it.
        for iy in 0..h {
            scratch.fill(0.0);
            for o in 0..out_c {
                let go_plane = grad_output.plane(b, o);
                for u in 0..kh {
                    let y = iy as isize - u as isize + ph as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    let go_row = &go_plane[y as usize * w..y as usize * w + w];
                    for (c, acc) in scratch.chunks_mut(w).enumerate() {
                        let w_base = ((o * in_c) + c) * kh * kw + u * kw;
                        for v in 0..kw {
                            let wt = kernel.weights.data()[w_base + v];
                            // ix - v + pw must land in [0, w)
                            let ixlo = v.saturating_sub(pw);
                            let ixhi = (w + v).saturating_sub(pw).min(w);
                            if ixlo < ixhi {
                                axpy(
                                    &mut acc[ixlo..ixhi],
                                    &go_row[ixlo + pw - v..],
                                    wt,
                                );
                            }
                        }
                    }
                }
            }
            for c in 0..in_c {
                grad_input.plane_mut(b, c)[iy * w..(iy + 1) * w]
                    .copy_from_slice(&scratch[c * w..(c + 1) * w]);
            }
        }
        // grad_weights and grad_bias: row-wise dot products.
        for y in 0..h {
            for o in 0..out_c {
                let go_plane = grad_output.plane(b, o);
                let go_row = &go_plane[y * w..(y + 1) * w];
                grad_bias[o] += go_row.iter().sum::<f64>();
                for c in 0..in_c {
                    let in_plane = input.plane(b, c);
                    let w_base = ((o * in_c) + c) * kh * kw;
                    for u in 0..kh {
                        let iy = y as isize + u as isize - ph as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
                        for v in 0..kw {
                            let xlo = pw.saturating_sub(v);
                            let xhi = (w + pw).saturating_sub(v).min(w);
                            if xlo < xhi {
                                grad_weights[w_base + u * kw + v] +=
                                    dot(&go_row[xlo..xhi], &in_row[xlo + v - pw..]);
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((
        grad_input,
        Tensor::new(kernel.weights.dims().to_vec(), grad_weights)?,
        Tensor::new(vec![out_c], grad_bias)?,
    ))
}

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    if !input.same_dims(grad_output) {
        return Err(SaltError::Shape(format!(
            "relu_backward dims {:?} vs {:?}",
            input.dims(),
            grad_output.dims()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

/// Numerically stable logistic function, branching on the sign of x so exp
/// is only taken of non-positive arguments. Saturated tails clamp to the
/// nearest representable value inside (0, 1).
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

/// Non-overlapping 2x2 window maximum with stride 2. Ties break toward the
/// first element in row-major window order. Returns the per-window argmax
/// offsets needed for the exact backward pass.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    if input.rank() != 4 {
        return Err(SaltError::Shape(format!(
            "maxpool input must be rank 4, got {:?}",
            input.dims()
        )));
    }
    let (n, c, h, w) = dims4(input);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(SaltError::Shape(format!(
            "maxpool requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut offsets = vec![0u8; n * c * oh * ow];
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            let plane = input.plane(b, ch);
            let out_plane = out.plane_mut(b, ch);
            for y in 0..oh {
                for x in 0..ow {
                    let base = (2 * y) * w + 2 * x;
                    let window = [plane[base], plane[base + 1], plane[base + w], plane[base + w + 1]];
                    let mut best = 0usize;
                    for k in 1..4 {
                        if window[k] > window[best] {
                            best = k;
                        }
                    }
                    out_plane[y * ow + x] = window[best];
                    offsets[idx] = best as u8;
                    idx += 1;
                }
            }
        }
    }
    let indices = PoolIndices {
        dims: vec![n, c, oh, ow],
        offsets,
    };
    Ok((out, indices))
}

/// Routes each output gradient to the recorded argmax position; everything
/// else receives zero.
pub fn maxpool2x2_backward(indices: &PoolIndices, grad_output: &Tensor) -> Result<Tensor> {
    if grad_output.dims() != indices.dims.as_slice() {
        return Err(SaltError::Shape(format!(
            "grad_output dims {:?} do not match pool indices dims {:?}",
            grad_output.dims(),
            indices.dims
        )));
    }
    let (n, c, oh, ow) = (
        indices.dims[0],
        indices.dims[1],
        indices.dims[2],
        indices.dims[3],
    );
    let (h, w) = (oh * 2, ow * 2);
    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            let gi = grad_input.plane_mut(b, ch);
            let go = grad_output.plane(b, ch);
            for y in 0..oh {
                for x in 0..ow {
                    let off = indices.offsets[idx] as usize;
                    let base = (2 * y + off / 2) * w + 2 * x + off % 2;
                    gi[base] += go[y * ow + x];
                    idx += 1;
                }
            }
        }
    }
    Ok(grad_input)
}

/// Nearest-neighbor resize with the floor source mapping
/// src = floor(dst * in / out), which reduces to pixel replication at
/// integral scale factors. Handles both up- and downsampling.
pub fn resize_nearest_forward(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(SaltError::Shape(format!(
            "resize input must be rank 4, got {:?}",
            input.dims()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(SaltError::Shape("resize target must be positive".into()));
    }
    let (n, c, h, w) = dims4(input);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let src_x: Vec<usize> = (0..out_w).map(|x| x * w / out_w).collect();
    for b in 0..n {
        for ch in 0..c {
            let plane = input.plane(b, ch);
            let out_plane = out.plane_mut(b, ch);
            for y in 0..out_h {
                let sy = y * h / out_h;
                let row = &plane[sy * w..sy * w + w];
                let out_row = &mut out_plane[y * out_w..(y + 1) * out_w];
                for (o, &sx) in out_row.iter_mut().zip(&src_x) {
                    *o = row[sx];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of the nearest-neighbor resize: each input cell accumulates the
/// gradients of every output pixel that sampled it. Conserves total mass.
pub fn resize_nearest_backward(in_h: usize, in_w: usize, grad_output: &Tensor) -> Result<Tensor> {
    if grad_output.rank() != 4 {
        return Err(SaltError::Shape(format!(
            "resize grad must be rank 4, got {:?}",
            grad_output.dims()
        )));
    }
    let (n, c, oh, ow) = dims4(grad_output);
    let mut grad_input = Tensor::zeros(&[n, c, in_h, in_w]);
    let src_x: Vec<usize> = (0..ow).map(|x| x * in_w / ow).collect();
    for b in 0..n {
        for ch in 0..c {
            let go = grad_output.plane(b, ch);
            let gi = grad_input.plane_mut(b, ch);
            for y in 0..oh {
                let sy = y * in_h / oh;
                let row = &mut gi[sy * in_w..sy * in_w + in_w];
                let go_row = &go[y * ow..(y + 1) * ow];
                for (&g, &sx) in go_row.iter().zip(&src_x) {
                    row[sx] += g;
                }
            }
        }
    }
    Ok(grad_input)
}
