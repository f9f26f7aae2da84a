//! Convolution and normalisation building blocks shared by every network.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::VarBuilder;

use crate::{Error, Result};

/// Upper bound on the unfolded-patch buffer a single convolution call may
/// allocate. Larger convolutions are split into horizontal bands.
pub const IM2COL_BUDGET_BYTES: usize = 128 << 20;

/// Cross-correlation with explicit per-axis zero padding, evaluated in row
/// bands when the unfolded input would exceed [`IM2COL_BUDGET_BYTES`].
pub fn conv2d_banded(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: (usize, usize),
) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (_cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "convolution expects {wcin} input channels, got {cin}"
        )));
    }
    let (ph, pw) = padding;
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::Shape(format!(
            "input {h}×{w} too small for {kh}×{kw} kernel with padding {padding:?}"
        )));
    }
    let ho = (h + 2 * ph - kh) / stride + 1;
    let wo = (w + 2 * pw - kw) / stride + 1;
    if !x.track_op() && !weight.track_op() {
        return conv2d_unfolded(x, weight, stride, padding, (ho, wo));
    }
    // candle's conv backward derives the transposed-conv output padding from
    // the height alone, so both axes must leave the same remainder.
    if (h + 2 * ph - kh) % stride != (w + 2 * pw - kw) % stride {
        return Err(Error::Shape(format!(
            "differentiable convolution needs matching stride remainders, got {h}×{w} with stride {stride}"
        )));
    }
    let row_bytes = b * cin * kh * kw * wo * std::mem::size_of::<f32>();
    if ph == pw && row_bytes * ho <= IM2COL_BUDGET_BYTES {
        return Ok(x.conv2d(weight, ph, stride, 1, 1)?);
    }
    let mut xp = x.clone();
    if ph > 0 {
        xp = xp.pad_with_zeros(2, ph, ph)?;
    }
    if pw > 0 {
        xp = xp.pad_with_zeros(3, pw, pw)?;
    }
    let rows = (IM2COL_BUDGET_BYTES / row_bytes.max(1)).clamp(1, ho);
    if rows == ho {
        return Ok(xp.conv2d(weight, 0, stride, 1, 1)?);
    }
    let mut bands = Vec::with_capacity(ho.div_ceil(rows));
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + rows).min(ho);
        let start = r0 * stride;
        let len = (r1 - 1 - r0) * stride + kh;
        bands.push(xp.narrow(2, start, len)?.conv2d(weight, 0, stride, 1, 1)?);
        r0 = r1;
    }
    Ok(Tensor::cat(&bands, 2)?)
}

/// Graph-free convolution: each kernel tap's shifted input plane is copied
/// into one row of a K×M column matrix (K = Cin·kh·kw, M = output pixels of a
/// band), so the product `W · col` is already in channel-major layout.
fn conv2d_unfolded(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    (ph, pw): (usize, usize),
    (ho, wo): (usize, usize),
) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, _, kh, kw) = weight.dims4()?;
    let k = cin * kh * kw;
    let xs = x.flatten_all()?.to_vec1::<f32>()?;
    let wmat = weight.reshape((cout, k))?;
    let rows = (IM2COL_BUDGET_BYTES / (k * wo * std::mem::size_of::<f32>()).max(1)).clamp(1, ho);
    let mut images = Vec::with_capacity(b);
    for n in 0..b {
        let mut bands = Vec::with_capacity(ho.div_ceil(rows));
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + rows).min(ho);
            let m = (r1 - r0) * wo;
            let mut col = vec![0f32; k * m];
            for c in 0..cin {
                let plane = &xs[(n * cin + c) * h * w..(n * cin + c + 1) * h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let dst = &mut col[((c * kh + i) * kw + j) * m..][..m];
                        // Output columns whose input column ox·stride + j - pw lies inside the image.
                        let lo = pw.saturating_sub(j).div_ceil(stride);
                        let hi = ((w + pw).saturating_sub(j)).div_ceil(stride).min(wo);
                        for (t, oy) in (r0..r1).enumerate() {
                            let iy = oy * stride + i;
                            if iy < ph || iy >= h + ph || lo >= hi {
                                continue;
                            }
                            let src = &plane[(iy - ph) * w..(iy - ph + 1) * w];
                            let drow = &mut dst[t * wo..(t + 1) * wo];
                            if stride == 1 {
                                drow[lo..hi].copy_from_slice(&src[lo + j - pw..hi + j - pw]);
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                                    *d = src[ox * stride + j - pw];
                                }
                            }
                        }
                    }
                }
            }
            let col = Tensor::from_vec(col, (k, m), x.device())?;
            bands.push(wmat.matmul(&col)?.reshape((cout, r1 - r0, wo))?);
            r0 = r1;
        }
        images.push(Tensor::cat(&bands, 1)?);
    }
    Ok(Tensor::stack(&images, 0)?)
}

fn add_bias(x: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(x.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: (usize, usize),
}

impl Conv2d {
    /// Loads `weight` (Cout×Cin×kh×kw) and optionally `bias` from `vb`.
    #[allow(clippy::too_many_arguments)]
    pub fn load(
        vb: VarBuilder,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        let weight = vb.get((cout, cin, kernel.0, kernel.1), "weight")?;
        let bias = if bias { Some(vb.get(cout, "bias")?) } else { None };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d_banded(x, &self.weight, self.stride, self.padding).map_err(to_candle)?;
        add_bias(y, self.bias.as_ref()).map_err(to_candle)
    }
}

/// Transposed convolution with a 4×4 kernel, stride 2 and padding 1, which
/// exactly doubles the spatial size.
///
/// Evaluated as four 2×2 sub-pixel convolutions whose outputs are interleaved;
/// this is arithmetically identical to the scatter formulation and lets the
/// work go through the (banded) im2col path.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    /// Cin×Cout×4×4, the usual transposed-convolution layout.
    weight: Tensor,
    bias: Option<Tensor>,
}

/// Kernel taps feeding even (`[0]`) and odd (`[1]`) output positions, ordered
/// by increasing input offset.
const PHASE_TAPS: [[u32; 2]; 2] = [[3, 1], [2, 0]];

impl ConvTranspose2d {
    pub fn load(vb: VarBuilder, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let weight = vb.get((cin, cout, 4, 4), "weight")?;
        let bias = if bias { Some(vb.get(cout, "bias")?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, _, kh, kw) = weight.dims4()?;
        if (kh, kw) != (4, 4) {
            return Err(Error::Shape(format!("expected a 4×4 kernel, got {kh}×{kw}")));
        }
        Ok(Self { weight, bias })
    }

    fn phase_kernels(&self) -> Result<Tensor> {
        let dev = self.weight.device();
        let mut phases = Vec::with_capacity(4);
        for rows in PHASE_TAPS {
            let rows = Tensor::new(&rows, dev)?;
            let w_rows = self.weight.index_select(&rows, 2)?;
            for cols in PHASE_TAPS {
                let cols = Tensor::new(&cols, dev)?;
                phases.push(w_rows.index_select(&cols, 3)?.transpose(0, 1)?);
            }
        }
        Ok(Tensor::cat(&phases, 0)?.contiguous()?)
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.forward_impl(x).map_err(to_candle)
    }
}

impl ConvTranspose2d {
    fn forward_impl(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _cin, h, w) = x.dims4()?;
        let cout = self.weight.dims()[1];
        let kernels = self.phase_kernels()?;
        let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let all = conv2d_banded(&xp, &kernels, 1, (0, 0))?;
        let mut rows = Vec::with_capacity(2);
        for py in 0..2 {
            let mut cols = Vec::with_capacity(2);
            for px in 0..2 {
                let phase = all
                    .narrow(1, (2 * py + px) * cout, cout)?
                    .narrow(2, py, h)?
                    .narrow(3, px, w)?;
                cols.push(phase);
            }
            rows.push(Tensor::stack(&cols, 4)?);
        }
        let y = Tensor::stack(&rows, 3)?.reshape((b, cout, 2 * h, 2 * w))?;
        add_bias(y, self.bias.as_ref())
    }
}

/// Per-sample, per-channel normalisation over the spatial axes.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    affine: Option<(Tensor, Tensor)>,
    eps: f64,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn load(vb: VarBuilder, channels: usize, affine: bool) -> Result<Self> {
        let affine = if affine {
            Some((vb.get(channels, "weight")?, vb.get(channels, "bias")?))
        } else {
            None
        };
        Ok(Self {
            affine,
            eps: Self::EPS,
        })
    }
}

impl Module for InstanceNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        match &self.affine {
            Some((gamma, beta)) => y
                .broadcast_mul(&gamma.reshape((1, c, 1, 1))?)?
                .broadcast_add(&beta.reshape((1, c, 1, 1))?),
            None => Ok(y),
        }
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.maximum(&(x * slope)?)
}

pub(crate) fn to_candle(e: Error) -> candle_core::Error {
    match e {
        Error::Tensor(e) => e,
        other => candle_core::Error::Msg(other.to_string()),
    }
}

/// A detached copy of every tensor in a var map, keyed by name.
pub fn snapshot(varmap: &candle_nn::VarMap) -> Result<std::collections::HashMap<String, Tensor>> {
    let data = varmap.data().lock().expect("var map lock poisoned");
    data.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
        .collect()
}

pub(crate) fn var_builder_from(tensors: std::collections::HashMap<String, Tensor>) -> VarBuilder<'static> {
    VarBuilder::from_tensors(tensors, DType::F32, &Device::Cpu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let v = util::normal_vec(&mut util::rng(seed, 0), n, 0.0, 1.0);
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    }

    /// Scatter-form transposed convolution, written out directly.
    fn naive_conv_transpose(x: &Tensor, w: &Tensor) -> Tensor {
        let (b, cin, h, wd) = x.dims4().unwrap();
        let cout = w.dims()[1];
        let xv = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![0f32; b * cout * ho * wo];
        for n in 0..b {
            for ci in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        let v = xv[((n * cin + ci) * h + i) * wd + j];
                        for co in 0..cout {
                            for ki in 0..4 {
                                for kj in 0..4 {
                                    let oi = (2 * i + ki) as isize - 1;
                                    let oj = (2 * j + kj) as isize - 1;
                                    if oi < 0 || oj < 0 || oi >= ho as isize || oj >= wo as isize {
                                        continue;
                                    }
                                    let wk = wv[((ci * cout + co) * 4 + ki) * 4 + kj];
                                    out[((n * cout + co) * ho + oi as usize) * wo + oj as usize] += v * wk;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(out, (b, cout, ho, wo), &Device::Cpu).unwrap()
    }

    #[test]
    fn sub_pixel_transpose_matches_scatter_oracle() {
        let x = randn(1, &[2, 3, 5, 7]);
        let w = randn(2, &[3, 4, 4, 4]);
        let layer = ConvTranspose2d::from_tensors(w.clone(), None).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 4, 10, 14]);
        assert!(max_abs_diff(&y, &naive_conv_transpose(&x, &w)) < 1e-4);
        // The library's own transposed convolution is a second, independent route.
        let reference = x.conv_transpose2d(&w, 1, 0, 2, 1).unwrap();
        assert!(max_abs_diff(&y, &reference) < 1e-4);
    }

    fn tracked(t: &Tensor) -> Tensor {
        candle_core::Var::from_tensor(t).unwrap().as_tensor().clone()
    }

    #[test]
    fn unfolded_convolution_matches_candle() {
        let x = randn(3, &[2, 8, 70, 33]);
        for (stride, k) in [(1, 3), (2, 4), (1, 2), (3, 3)] {
            let w = randn(4, &[5, 8, k, k]);
            for pad in [0, 1, 2] {
                let direct = x.conv2d(&w, pad, stride, 1, 1).unwrap();
                let fast = conv2d_banded(&x, &w, stride, (pad, pad)).unwrap();
                assert_eq!(direct.dims(), fast.dims());
                assert!(max_abs_diff(&direct, &fast) < 1e-4, "stride {stride} kernel {k} pad {pad}");
            }
        }
    }

    #[test]
    fn asymmetric_padding_matches_explicit_pad() {
        let x = randn(3, &[1, 4, 21, 17]);
        let w = randn(4, &[3, 4, 1, 7]);
        let xp = x.pad_with_zeros(3, 3, 3).unwrap();
        let direct = xp.conv2d(&w, 0, 1, 1, 1).unwrap();
        for input in [x.clone(), tracked(&x)] {
            let out = conv2d_banded(&input, &w, 1, (0, 3)).unwrap();
            assert!(max_abs_diff(&direct, &out) < 1e-4);
        }
    }

    #[test]
    fn tracked_inputs_use_differentiable_path() {
        let x = tracked(&randn(3, &[1, 8, 31, 33]));
        let w = randn(4, &[5, 8, 4, 4]);
        let y = conv2d_banded(&x, &w, 2, (1, 1)).unwrap();
        assert!(y.track_op());
        let grads = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().dims(), x.dims());
    }

    #[test]
    fn mismatched_remainders_are_refused_only_when_tracked() {
        let x = randn(3, &[1, 8, 30, 33]);
        let w = randn(4, &[5, 8, 4, 4]);
        assert!(conv2d_banded(&x, &w, 2, (1, 1)).is_ok());
        assert!(matches!(conv2d_banded(&tracked(&x), &w, 2, (1, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn banding_kicks_in_for_large_inputs() {
        // 64 channels × 16 taps × 4 bytes × 512 columns ≈ 2 MiB per output row,
        // so 100 output rows need several bands on either path.
        let x = randn(5, &[1, 64, 200, 1024]);
        let w = randn(6, &[2, 64, 4, 4]);
        let direct = x.conv2d(&w, 1, 2, 1, 1).unwrap();
        for input in [x.clone(), tracked(&x)] {
            let banded = conv2d_banded(&input, &w, 2, (1, 1)).unwrap();
            assert_eq!(direct.dims(), banded.dims());
            assert!(max_abs_diff(&direct, &banded) < 1e-3);
        }
    }

    #[test]
    fn instance_norm_standardises_each_channel() {
        let x = (randn(7, &[2, 3, 6, 5]) * 4.0).unwrap().affine(1.0, 3.0).unwrap();
        let vm = candle_nn::VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let norm = InstanceNorm::load(vb, 3, false).unwrap();
        let y = norm.forward(&x).unwrap();
        let mean = y.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap();
        let var = y.sqr().unwrap().mean_keepdim(3).unwrap().mean_keepdim(2).unwrap();
        for m in mean.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!(m.abs() < 1e-5);
        }
        for v in var.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn leaky_relu_slope() {
        let x = Tensor::new(&[-2.0f32, 0.0, 3.0], &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![-0.4, 0.0, 3.0]);
    }
}
