//! Convolution and pooling kernels over raw slices.
//!
//! Both 2D and 3D inputs are handled by one code path: a rank-2 spatial input
//! `[h, w]` is treated as `[1, h, w]` with a unit kernel/window along depth.

use super::{EngineError, Real};

/// Output extent of a sliding window along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Resolved geometry of a batched convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
    /// Number of spatial axes of the public tensors (2 or 3).
    pub spatial_rank: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, EngineError> {
        let rank = input_shape.len();
        if !(rank == 4 || rank == 5) {
            return Err(EngineError::Shape(format!(
                "convolution input must be [batch, channels, spatial..] with 2 or 3 spatial axes, got {input_shape:?}"
            )));
        }
        if kernel_shape.len() != rank {
            return Err(EngineError::Shape(format!(
                "kernel {kernel_shape:?} does not match input rank {rank}"
            )));
        }
        if kernel_shape[1] != input_shape[1] {
            return Err(EngineError::Shape(format!(
                "input has {} channels but kernel expects {}",
                input_shape[1], kernel_shape[1]
            )));
        }
        let spatial_rank = rank - 2;
        let lift = |s: &[usize], fill: usize| -> [usize; 3] {
            if s.len() == 2 {
                [fill, s[0], s[1]]
            } else {
                [s[0], s[1], s[2]]
            }
        };
        let input = lift(&input_shape[2..], 1);
        let kernel = lift(&kernel_shape[2..], 1);
        let stride3 = if spatial_rank == 2 { [1, stride, stride] } else { [stride; 3] };
        let padding3 = if spatial_rank == 2 { [0, padding, padding] } else { [padding; 3] };
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = output_extent(input[a], kernel[a], stride3[a], padding3[a]).ok_or_else(|| {
                EngineError::Shape(format!(
                    "kernel {:?} with padding {padding} and stride {stride} does not fit input {:?}",
                    &kernel_shape[2..],
                    &input_shape[2..]
                ))
            })?;
        }
        Ok(Self {
            batch: input_shape[0],
            in_channels: input_shape[1],
            out_channels: kernel_shape[0],
            input,
            kernel,
            stride: stride3,
            padding: padding3,
            output,
            spatial_rank,
        })
    }

    pub fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the unfolded (im2col) matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.batch, self.out_channels];
        if self.spatial_rank == 2 {
            shape.extend_from_slice(&self.output[1..]);
        } else {
            shape.extend_from_slice(&self.output);
        }
        shape
    }

    /// Source index along `axis` for output position `o` and kernel offset `k`,
    /// or `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k) as isize - self.padding[axis] as isize;
        if pos < 0 || pos as usize >= self.input[axis] {
            None
        } else {
            Some(pos as usize)
        }
    }
}

/// Output positions `[lo, hi)` along `axis` whose source for kernel offset `k`
/// lies inside the input.
#[inline]
fn valid_range(g: &ConvGeometry, axis: usize, k: usize) -> (usize, usize) {
    let (s, p, n, o) = (g.stride[axis], g.padding[axis] as isize, g.input[axis] as isize, g.output[axis]);
    let k = k as isize;
    // need 0 <= o*s + k - p < n
    let lo = if p - k > 0 { ((p - k) as usize).div_ceil(s) } else { 0 };
    let hi_num = n - 1 + p - k;
    let hi = if hi_num < 0 { 0 } else { (hi_num as usize / s + 1).min(o) };
    (lo.min(hi), hi)
}

/// Unfolds one sample `[cin, d, h, w]` into `cols[patch_len, out_volume]`.
pub fn im2col<T: Real>(g: &ConvGeometry, sample: &[T], cols: &mut [T]) {
    im2col_planes(g, sample, 0..g.output[0], cols)
}

/// [`im2col`] restricted to output depth planes `planes`; `cols` is
/// `[patch_len, planes.len() * oh * ow]`.
pub fn im2col_planes<T: Real>(g: &ConvGeometry, sample: &[T], planes: std::ops::Range<usize>, cols: &mut [T]) {
    let [_, oh, ow] = g.output;
    let [_, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let sx = g.stride[2];
    let px = g.padding[2];
    let in_vol = g.input_volume();
    let block = planes.len() * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &sample[c * in_vol..(c + 1) * in_vol];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (lo, hi) = valid_range(g, 2, kx);
                    let dst = &mut cols[row * block..(row + 1) * block];
                    for (oz, plane) in planes.clone().zip(dst.chunks_mut(oh * ow)) {
                        let sz = g.source(0, oz, kz);
                        for (oy, line) in plane.chunks_mut(ow).enumerate() {
                            match (sz, g.source(1, oy, ky)) {
                                (Some(z), Some(y)) if lo < hi => {
                                    let base = (z * ih + y) * iw;
                                    line[..lo].fill(T::zero());
                                    line[hi..].fill(T::zero());
                                    let x0 = base + lo * sx + kx - px;
                                    if sx == 1 {
                                        line[lo..hi].copy_from_slice(&chan[x0..x0 + (hi - lo)]);
                                    } else {
                                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                            *v = chan[x0 + i * sx];
                                        }
                                    }
                                }
                                _ => line.fill(T::zero()),
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto a sample gradient.
pub fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], sample_grad: &mut [T]) {
    col2im_planes(g, cols, 0..g.output[0], sample_grad)
}

/// Adjoint of [`im2col_planes`].
pub fn col2im_planes<T: Real>(g: &ConvGeometry, cols: &[T], planes: std::ops::Range<usize>, sample_grad: &mut [T]) {
    let [_, oh, ow] = g.output;
    let [_, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let sx = g.stride[2];
    let px = g.padding[2];
    let in_vol = g.input_volume();
    let block = planes.len() * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut sample_grad[c * in_vol..(c + 1) * in_vol];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (lo, hi) = valid_range(g, 2, kx);
                    let src = &cols[row * block..(row + 1) * block];
                    if lo < hi {
                        for (oz, plane) in planes.clone().zip(src.chunks(oh * ow)) {
                            let Some(z) = g.source(0, oz, kz) else { continue };
                            for (oy, line) in plane.chunks(ow).enumerate() {
                                let Some(y) = g.source(1, oy, ky) else { continue };
                                let x0 = (z * ih + y) * iw + lo * sx + kx - px;
                                for (i, &v) in line[lo..hi].iter().enumerate() {
                                    let d = &mut chan[x0 + i * sx];
                                    *d = *d + v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Number of output depth planes unfolded at a time, sized so the column
/// buffer stays around 2 MB.
fn planes_per_block(g: &ConvGeometry) -> usize {
    let [od, oh, ow] = g.output;
    let per_plane = g.patch_len() * oh * ow * 4;
    ((1 << 21) / per_plane.max(1)).clamp(1, od)
}

/// Batched convolution: `out[b] = kernel * im2col(input[b]) + bias`.
pub fn conv_forward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let patch = g.patch_len();
    let [od, oh, ow] = g.output;
    let plane = oh * ow;
    let out_vol = g.output_volume();
    let in_sample = g.in_channels * g.input_volume();
    let out_sample = g.out_channels * out_vol;
    let step = planes_per_block(g);
    let mut out = vec![T::zero(); g.batch * out_sample];
    let mut cols = vec![T::zero(); patch * step * plane];
    for b in 0..g.batch {
        let sample = &input[b * in_sample..(b + 1) * in_sample];
        let dst = &mut out[b * out_sample..(b + 1) * out_sample];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(out_vol).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        for z0 in (0..od).step_by(step) {
            let z1 = (z0 + step).min(od);
            let n = (z1 - z0) * plane;
            im2col_planes(g, sample, z0..z1, &mut cols[..patch * n]);
            T::gemm(
                g.out_channels,
                patch,
                n,
                T::one(),
                kernel,
                (patch as isize, 1),
                &cols[..patch * n],
                (n as isize, 1),
                T::one(),
                &mut dst[z0 * plane..],
                (out_vol as isize, 1),
            );
        }
    }
    out
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> ConvGrads<T> {
    let patch = g.patch_len();
    let [od, oh, ow] = g.output;
    let plane = oh * ow;
    let out_vol = g.output_volume();
    let in_sample = g.in_channels * g.input_volume();
    let out_sample = g.out_channels * out_vol;
    let step = planes_per_block(g);
    let mut grad_kernel = vec![T::zero(); g.out_channels * patch];
    let mut grad_bias = vec![T::zero(); g.out_channels];
    let mut grad_input = if need_input_grad { vec![T::zero(); input.len()] } else { Vec::new() };
    let mut cols = vec![T::zero(); patch * step * plane];
    for b in 0..g.batch {
        let dout = &grad_out[b * out_sample..(b + 1) * out_sample];
        for (co, chunk) in dout.chunks(out_vol).enumerate() {
            grad_bias[co] = grad_bias[co] + chunk.iter().copied().sum::<T>();
        }
        let sample = &input[b * in_sample..(b + 1) * in_sample];
        for z0 in (0..od).step_by(step) {
            let z1 = (z0 + step).min(od);
            let n = (z1 - z0) * plane;
            let block = &mut cols[..patch * n];
            im2col_planes(g, sample, z0..z1, block);
            // dK += dOut[:, block] * cols^T
            T::gemm(
                g.out_channels,
                n,
                patch,
                T::one(),
                &dout[z0 * plane..],
                (out_vol as isize, 1),
                block,
                (1, n as isize),
                T::one(),
                &mut grad_kernel,
                (patch as isize, 1),
            );
            if need_input_grad {
                // dCols = K^T * dOut[:, block]
                T::gemm(
                    patch,
                    g.out_channels,
                    n,
                    T::one(),
                    kernel,
                    (1, patch as isize),
                    &dout[z0 * plane..],
                    (out_vol as isize, 1),
                    T::zero(),
                    block,
                    (n as isize, 1),
                );
                col2im_planes(g, block, z0..z1, &mut grad_input[b * in_sample..(b + 1) * in_sample]);
            }
        }
    }
    ConvGrads { input: grad_input, kernel: grad_kernel, bias: grad_bias }
}

/// Resolved geometry of a max pooling window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub input: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
    pub spatial_rank: usize,
}

impl PoolGeometry {
    pub fn new(input_shape: &[usize], window: usize, stride: usize) -> Result<Self, EngineError> {
        let rank = input_shape.len();
        if !(rank == 4 || rank == 5) {
            return Err(EngineError::Shape(format!(
                "pooling input must be [batch, channels, spatial..] with 2 or 3 spatial axes, got {input_shape:?}"
            )));
        }
        let spatial_rank = rank - 2;
        let sp = &input_shape[2..];
        let input = if spatial_rank == 2 { [1, sp[0], sp[1]] } else { [sp[0], sp[1], sp[2]] };
        let window3 = if spatial_rank == 2 { [1, window, window] } else { [window; 3] };
        let stride3 = if spatial_rank == 2 { [1, stride, stride] } else { [stride; 3] };
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = output_extent(input[a], window3[a], stride3[a], 0).ok_or_else(|| {
                EngineError::Shape(format!(
                    "pooling window {window} (stride {stride}) exceeds spatial extents {sp:?}"
                ))
            })?;
        }
        Ok(Self {
            batch: input_shape[0],
            channels: input_shape[1],
            input,
            window: window3,
            stride: stride3,
            output,
            spatial_rank,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.batch, self.channels];
        if self.spatial_rank == 2 {
            shape.extend_from_slice(&self.output[1..]);
        } else {
            shape.extend_from_slice(&self.output);
        }
        shape
    }
}

/// Max pooling; returns values and the flat input index of each window's
/// maximum (first index wins ties).
pub fn maxpool_forward<T: Real>(g: &PoolGeometry, input: &[T]) -> (Vec<T>, Vec<usize>) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let in_vol = id * ih * iw;
    let planes = g.batch * g.channels;
    let n_out = planes * od * oh * ow;
    let mut values = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    for p in 0..planes {
        let base = p * in_vol;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for wz in 0..g.window[0] {
                        let z = oz * g.stride[0] + wz;
                        for wy in 0..g.window[1] {
                            let y = oy * g.stride[1] + wy;
                            for wx in 0..g.window[2] {
                                let x = ox * g.stride[2] + wx;
                                let idx = base + (z * ih + y) * iw + x;
                                let v = input[idx];
                                if best == usize::MAX || v > best_v {
                                    best = idx;
                                    best_v = v;
                                }
                            }
                        }
                    }
                    values.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    (values, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_formula() {
        assert_eq!(output_extent(5, 3, 1, 1), Some(5));
        assert_eq!(output_extent(5, 3, 2, 0), Some(2));
        assert_eq!(output_extent(2, 3, 1, 0), None);
        assert_eq!(output_extent(7, 2, 2, 0), Some(3));
    }

    #[test]
    fn channel_mismatch_is_structural_error() {
        let err = ConvGeometry::new(&[1, 2, 4, 4, 4], &[1, 3, 3, 3, 3], 1, 1).unwrap_err();
        assert!(matches!(err, EngineError::Shape(_)));
    }

    #[test]
    fn two_d_geometry_lifts_depth() {
        let g = ConvGeometry::new(&[2, 3, 6, 5], &[4, 3, 3, 3], 1, 1).unwrap();
        assert_eq!(g.input, [1, 6, 5]);
        assert_eq!(g.kernel, [1, 3, 3]);
        assert_eq!(g.output_shape(), vec![2, 4, 6, 5]);
    }

    #[test]
    fn pool_window_larger_than_extent_fails() {
        assert!(PoolGeometry::new(&[1, 1, 1, 4, 4], 2, 2).is_err());
        assert!(PoolGeometry::new(&[1, 1, 2, 2, 2], 2, 2).is_ok());
    }
}
