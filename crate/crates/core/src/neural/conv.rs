//! 2-D convolution on single samples laid out channels × height × width.
//! The fast path lowers to GEMM through an explicit im2col buffer; the
//! reference path is a direct loop that counts every multiply-accumulate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (height, width)
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// (top, bottom, left, right) zero padding.
    pub padding: [usize; 4],
    pub groups: usize,
    pub bias: bool,
    /// Per-output-filter L2 bound applied after every optimizer step.
    pub max_norm: Option<f64>,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            dilation: (1, 1),
            padding: [0; 4],
            groups: 1,
            bias: true,
            max_norm: None,
        }
    }

    /// Output size equal to input size at stride 1; an even kernel puts the
    /// extra column on the right.
    pub fn same(mut self) -> Self {
        let th = self.dilation.0 * (self.kernel.0 - 1);
        let tw = self.dilation.1 * (self.kernel.1 - 1);
        self.padding = [th / 2, th - th / 2, tw / 2, tw - tw / 2];
        self
    }

    /// Pad `(k-1)·d` on both sides of the time axis; a following chomp of the
    /// same length makes the convolution causal.
    pub fn causal_padded(mut self) -> Self {
        let p = self.dilation.1 * (self.kernel.1 - 1);
        self.padding = [0, 0, p, p];
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.in_channels;
        self
    }

    pub fn stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn dilation(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub fn padding(mut self, pad: [usize; 4]) -> Self {
        self.padding = pad;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn max_norm(mut self, bound: f64) -> Self {
        self.max_norm = Some(bound);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 || self.in_channels % g != 0 || self.out_channels % g != 0 {
            return Err(Error::Shape(format!(
                "groups {g} must divide {} input and {} output channels",
                self.in_channels, self.out_channels
            )));
        }
        if [self.kernel.0, self.kernel.1, self.stride.0, self.stride.1, self.dilation.0, self.dilation.1]
            .contains(&0)
        {
            return Err(Error::Shape("kernel, stride and dilation must be positive".into()));
        }
        Ok(())
    }

    pub fn cin_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Taps per output element.
    pub fn fan_in(&self) -> usize {
        self.cin_per_group() * self.kernel.0 * self.kernel.1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn padded(&self, h: usize, w: usize) -> (usize, usize) {
        (h + self.padding[0] + self.padding[1], w + self.padding[2] + self.padding[3])
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = self.padded(h, w);
        let eh = self.dilation.0 * (self.kernel.0 - 1) + 1;
        let ew = self.dilation.1 * (self.kernel.1 - 1) + 1;
        if hp < eh || wp < ew {
            return Err(Error::Shape(format!(
                "kernel extent {eh}x{ew} exceeds padded input {hp}x{wp}"
            )));
        }
        Ok(((hp - eh) / self.stride.0 + 1, (wp - ew) / self.stride.1 + 1))
    }

    /// Multiply-accumulates for one sample, padded taps included.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (ho, wo) = self.out_hw(h, w)?;
        Ok((self.out_channels * ho * wo * self.fan_in()) as u64)
    }
}

fn pad_input(spec: &ConvSpec, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let [top, _, left, _] = spec.padding;
    let (hp, wp) = spec.padded(h, w);
    if (hp, wp) == (h, w) {
        return x.to_vec();
    }
    let mut out = vec![0.0; spec.in_channels * hp * wp];
    for c in 0..spec.in_channels {
        for i in 0..h {
            let src = &x[(c * h + i) * w..(c * h + i + 1) * w];
            let dst = (c * hp + i + top) * wp + left;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// Rows are (channel-in-group, kh, kw) taps, columns output positions.
fn im2col(spec: &ConvSpec, xp: &[f64], hp: usize, wp: usize, g: usize, ho: usize, wo: usize, col: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let cg = spec.cin_per_group();
    let n = ho * wo;
    for ci in 0..cg {
        let c = g * cg + ci;
        for a in 0..kh {
            for b in 0..kw {
                let row = &mut col[((ci * kh + a) * kw + b) * n..((ci * kh + a) * kw + b + 1) * n];
                for oi in 0..ho {
                    let base = (c * hp + oi * sh + a * dh) * wp + b * dw;
                    let dst = &mut row[oi * wo..(oi + 1) * wo];
                    if sw == 1 {
                        dst.copy_from_slice(&xp[base..base + wo]);
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            *d = xp[base + oj * sw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(spec: &ConvSpec, col: &[f64], hp: usize, wp: usize, g: usize, ho: usize, wo: usize, dxp: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let cg = spec.cin_per_group();
    let n = ho * wo;
    for ci in 0..cg {
        let c = g * cg + ci;
        for a in 0..kh {
            for b in 0..kw {
                let row = &col[((ci * kh + a) * kw + b) * n..((ci * kh + a) * kw + b + 1) * n];
                for oi in 0..ho {
                    let base = (c * hp + oi * sh + a * dh) * wp + b * dw;
                    for oj in 0..wo {
                        dxp[base + oj * sw] += row[oi * wo + oj];
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, all row-major, optionally transposed
/// operands given by their strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c` for
    // the given m, k, n; callers size the slices accordingly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(spec: &ConvSpec, x: &[f64], h: usize, w: usize, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = spec.out_hw(h, w).expect("shape checked at build");
    let (hp, wp) = spec.padded(h, w);
    let xp = pad_input(spec, x, h, w);
    let k = spec.fan_in();
    let n = ho * wo;
    let cg = spec.cout_per_group();
    let mut out = vec![0.0; spec.out_channels * n];
    let mut col = vec![0.0; k * n];
    for g in 0..spec.groups {
        im2col(spec, &xp, hp, wp, g, ho, wo, &mut col);
        let wg = &weight[g * cg * k..(g + 1) * cg * k];
        let og = &mut out[g * cg * n..(g + 1) * cg * n];
        gemm(cg, k, n, wg, (k as isize, 1), &col, (n as isize, 1), 0.0, og);
    }
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += b[o]);
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    spec: &ConvSpec,
    x: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
    need_input: bool,
) -> Option<Vec<f64>> {
    let (ho, wo) = spec.out_hw(h, w).expect("shape checked at build");
    let (hp, wp) = spec.padded(h, w);
    let xp = pad_input(spec, x, h, w);
    let k = spec.fan_in();
    let n = ho * wo;
    let cg = spec.cout_per_group();
    if let Some(gb) = grad_b {
        for (o, row) in grad_out.chunks(n).enumerate() {
            gb[o] += row.iter().sum::<f64>();
        }
    }
    let mut col = vec![0.0; k * n];
    let mut dxp = if need_input { vec![0.0; xp.len()] } else { Vec::new() };
    let mut dcol = if need_input { vec![0.0; k * n] } else { Vec::new() };
    for g in 0..spec.groups {
        im2col(spec, &xp, hp, wp, g, ho, wo, &mut col);
        let dog = &grad_out[g * cg * n..(g + 1) * cg * n];
        // dW[cg×k] += dout[cg×n] · colᵀ[n×k]
        gemm(cg, n, k, dog, (n as isize, 1), &col, (1, n as isize), 1.0, &mut grad_w[g * cg * k..(g + 1) * cg * k]);
        if need_input {
            // dcol[k×n] = Wᵀ[k×cg] · dout[cg×n]
            let wg = &weight[g * cg * k..(g + 1) * cg * k];
            gemm(k, cg, n, wg, (1, k as isize), dog, (n as isize, 1), 0.0, &mut dcol);
            col2im(spec, &dcol, hp, wp, g, ho, wo, &mut dxp);
        }
    }
    if !need_input {
        return None;
    }
    let [top, _, left, _] = spec.padding;
    let mut dx = vec![0.0; spec.in_channels * h * w];
    for c in 0..spec.in_channels {
        for i in 0..h {
            let src = (c * hp + i + top) * wp + left;
            dx[(c * h + i) * w..(c * h + i + 1) * w].copy_from_slice(&dxp[src..src + w]);
        }
    }
    Some(dx)
}

/// Direct-loop convolution; every multiply-accumulate increments `macs`.
pub(crate) fn forward_reference(
    spec: &ConvSpec,
    x: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    macs: &mut u64,
) -> Vec<f64> {
    let (ho, wo) = spec.out_hw(h, w).expect("shape checked at build");
    let (hp, wp) = spec.padded(h, w);
    let xp = pad_input(spec, x, h, w);
    let (kh, kw) = spec.kernel;
    let cg_in = spec.cin_per_group();
    let cg_out = spec.cout_per_group();
    let mut out = vec![0.0; spec.out_channels * ho * wo];
    for o in 0..spec.out_channels {
        let g = o / cg_out;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for ci in 0..cg_in {
                    let c = g * cg_in + ci;
                    for a in 0..kh {
                        for b in 0..kw {
                            let xi = oi * spec.stride.0 + a * spec.dilation.0;
                            let xj = oj * spec.stride.1 + b * spec.dilation.1;
                            acc += weight[((o * cg_in + ci) * kh + a) * kw + b] * xp[(c * hp + xi) * wp + xj];
                            *macs += 1;
                        }
                    }
                }
                out[(o * ho + oi) * wo + oj] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, r: &mut rand_xoshiro::Xoshiro256PlusPlus) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn specs() -> Vec<(ConvSpec, usize, usize)> {
        vec![
            (ConvSpec::new(1, 8, (1, 32)).same().bias(false), 15, 205),
            (ConvSpec::new(8, 16, (15, 1)).depthwise().bias(false), 15, 205),
            (ConvSpec::new(15, 15, (1, 16)).depthwise().stride(1, 8), 1, 213),
            (ConvSpec::new(16, 12, (1, 4)).dilation(1, 2).causal_padded(), 1, 3),
            (ConvSpec::new(4, 6, (3, 3)).stride(2, 2).padding([1, 0, 2, 1]), 7, 9),
        ]
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let mut r = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(2);
        for (spec, h, w) in specs() {
            spec.validate().unwrap();
            let x = random(spec.in_channels * h * w, &mut r);
            let wt = random(spec.weight_len(), &mut r);
            let b = random(spec.out_channels, &mut r);
            let bias = spec.bias.then_some(b.as_slice());
            let fast = forward(&spec, &x, h, w, &wt, bias);
            let mut macs = 0;
            let slow = forward_reference(&spec, &x, h, w, &wt, bias, &mut macs);
            let err = fast.iter().zip(&slow).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12, "{err:e}");
            assert_eq!(macs, spec.macs(h, w).unwrap());
        }
    }

    #[test]
    fn same_padding_shapes() {
        let s = ConvSpec::new(1, 8, (1, 32)).same();
        assert_eq!(s.padding, [0, 0, 15, 16]);
        assert_eq!(s.out_hw(15, 205).unwrap(), (15, 205));
        assert_eq!(ConvSpec::new(1, 1, (1, 16)).stride(1, 8).out_hw(1, 213).unwrap(), (1, 25));
    }

    #[test]
    fn first_conv_mac_count() {
        assert_eq!(ConvSpec::new(1, 8, (1, 32)).same().macs(15, 205).unwrap(), 787_200);
    }

    #[test]
    fn backward_matches_adjoint_identity() {
        // <dout, conv(x)> is linear in x and w; its gradients are exact
        // adjoints, checked against the forward map by inner products.
        let mut r = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(4);
        for (spec, h, w) in specs() {
            let x = random(spec.in_channels * h * w, &mut r);
            let wt = random(spec.weight_len(), &mut r);
            let (ho, wo) = spec.out_hw(h, w).unwrap();
            let dout = random(spec.out_channels * ho * wo, &mut r);
            let mut gw = vec![0.0; wt.len()];
            let mut gb = vec![0.0; spec.out_channels];
            let dx = backward(&spec, &x, h, w, &wt, &dout, &mut gw, Some(&mut gb), true).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let y = forward(&spec, &x, h, w, &wt, None);
            assert!((dot(&dx, &x) - dot(&dout, &y)).abs() < 1e-9);
            assert!((dot(&gw, &wt) - dot(&dout, &y)).abs() < 1e-9);
            let ones = vec![1.0; spec.out_channels];
            let yb = forward(&spec, &vec![0.0; x.len()], h, w, &vec![0.0; wt.len()], Some(&ones));
            assert!((gb.iter().sum::<f64>() - dot(&dout, &yb)).abs() < 1e-9);
        }
    }
}
