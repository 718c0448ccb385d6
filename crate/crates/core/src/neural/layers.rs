use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-sample activation shape: channels × height × width.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFn {
    Elu,
    Tanh,
    Sigmoid,
}

impl ActivationFn {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationFn::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            ActivationFn::Tanh => x.tanh(),
            ActivationFn::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input and the output.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            ActivationFn::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            ActivationFn::Tanh => 1.0 - y * y,
            ActivationFn::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Dropout active, batch statistics, running buffers updated.
    Train,
    /// Batch statistics and running updates, dropout off.
    TrainNoDropout,
    Eval,
}

impl Mode {
    fn batch_stats(self) -> bool {
        self != Mode::Eval
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    /// Depthwise stage followed by a 1×1 pointwise stage.
    Separable { depthwise: ConvSpec, pointwise: ConvSpec },
    BatchNorm { channels: usize, eps: f64, momentum: f64 },
    Activation { function: ActivationFn },
    AvgPool { size: (usize, usize), stride: (usize, usize) },
    MaxPool { size: (usize, usize), stride: (usize, usize) },
    Dropout { p: f64 },
    Dense { inputs: usize, outputs: usize, bias: bool, max_norm: Option<f64> },
    Flatten,
    Reshape { shape: Shape3 },
    /// (top, bottom, left, right)
    ZeroPad { padding: [usize; 4] },
    /// Drops `left` and `right` columns of the time axis.
    Chomp { left: usize, right: usize },
    Add,
    Concat,
}

impl LayerSpec {
    pub fn conv(spec: ConvSpec) -> Self {
        LayerSpec::Conv2d(spec)
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn activation(function: ActivationFn) -> Self {
        LayerSpec::Activation { function }
    }

    pub fn avgpool(kh: usize, kw: usize) -> Self {
        LayerSpec::AvgPool {
            size: (kh, kw),
            stride: (kh, kw),
        }
    }

    pub fn maxpool(kh: usize, kw: usize) -> Self {
        LayerSpec::MaxPool {
            size: (kh, kw),
            stride: (kh, kw),
        }
    }

    pub fn dropout(p: f64) -> Self {
        LayerSpec::Dropout { p }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            bias: true,
            max_norm: None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(c) if c.groups > 1 && c.groups == c.in_channels => "depthwise_conv2d",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Separable { depthwise, .. } if depthwise.kernel.0 == 1 => "separable_conv1d",
            LayerSpec::Separable { .. } => "separable_conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::AvgPool { .. } => "avgpool2d",
            LayerSpec::MaxPool { .. } => "maxpool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::ZeroPad { .. } => "zeropad",
            LayerSpec::Chomp { .. } => "chomp1d",
            LayerSpec::Add => "add",
            LayerSpec::Concat => "concat",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            LayerSpec::Add => Some(2),
            LayerSpec::Concat => None,
            _ => Some(1),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.param_count(),
            LayerSpec::Separable { depthwise, pointwise } => depthwise.param_count() + pointwise.param_count(),
            LayerSpec::BatchNorm { channels, .. } => 2 * channels,
            LayerSpec::Dense { inputs, outputs, bias, .. } => inputs * outputs + if *bias { *outputs } else { 0 },
            _ => 0,
        }
    }

    pub fn out_shape(&self, inputs: &[Shape3]) -> Result<Shape3> {
        let arity_ok = match self.arity() {
            Some(n) => inputs.len() == n,
            None => inputs.len() >= 2,
        };
        if !arity_ok {
            return Err(Error::Shape(format!("{} got {} inputs", self.kind(), inputs.len())));
        }
        let [c, h, w] = inputs[0];
        let out = match self {
            LayerSpec::Conv2d(s) => {
                s.validate()?;
                check_channels(s.in_channels, c)?;
                let (ho, wo) = s.out_hw(h, w)?;
                [s.out_channels, ho, wo]
            }
            LayerSpec::Separable { depthwise, pointwise } => {
                depthwise.validate()?;
                pointwise.validate()?;
                check_channels(depthwise.in_channels, c)?;
                check_channels(pointwise.in_channels, depthwise.out_channels)?;
                let (h1, w1) = depthwise.out_hw(h, w)?;
                let (h2, w2) = pointwise.out_hw(h1, w1)?;
                [pointwise.out_channels, h2, w2]
            }
            LayerSpec::BatchNorm { channels, eps, momentum } => {
                check_channels(*channels, c)?;
                if !(*eps > 0.0 && (0.0..=1.0).contains(momentum)) {
                    return Err(Error::Shape("batchnorm eps must be > 0, momentum in [0, 1]".into()));
                }
                inputs[0]
            }
            LayerSpec::Activation { .. } => inputs[0],
            LayerSpec::AvgPool { size, stride } | LayerSpec::MaxPool { size, stride } => {
                if size.0 == 0 || size.1 == 0 || stride.0 == 0 || stride.1 == 0 || size.0 > h || size.1 > w {
                    return Err(Error::Shape(format!("pool {size:?} does not fit {h}x{w}")));
                }
                [c, (h - size.0) / stride.0 + 1, (w - size.1) / stride.1 + 1]
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::Shape(format!("dropout p {p} outside [0, 1)")));
                }
                inputs[0]
            }
            LayerSpec::Dense { inputs: fi, outputs, .. } => {
                if h != 1 || w != 1 || c != *fi {
                    return Err(Error::Shape(format!("dense expects {fi}x1x1, got {c}x{h}x{w}")));
                }
                [*outputs, 1, 1]
            }
            LayerSpec::Flatten => [c * h * w, 1, 1],
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != c * h * w {
                    return Err(Error::Shape(format!("cannot reshape {c}x{h}x{w} into {shape:?}")));
                }
                *shape
            }
            LayerSpec::ZeroPad { padding } => [c, h + padding[0] + padding[1], w + padding[2] + padding[3]],
            LayerSpec::Chomp { left, right } => {
                if left + right >= w {
                    return Err(Error::Shape(format!("chomp {left}+{right} leaves nothing of {w}")));
                }
                [c, h, w - left - right]
            }
            LayerSpec::Add => {
                if inputs[1] != inputs[0] {
                    return Err(Error::Shape(format!("add {:?} vs {:?}", inputs[0], inputs[1])));
                }
                inputs[0]
            }
            LayerSpec::Concat => {
                if inputs.iter().any(|s| s[1] != h || s[2] != w) {
                    return Err(Error::Shape(format!("concat spatial mismatch {inputs:?}")));
                }
                [inputs.iter().map(|s| s[0]).sum(), h, w]
            }
        };
        Ok(out)
    }

    /// Multiply-accumulates for one sample.
    pub fn macs(&self, input: Shape3) -> Result<u64> {
        Ok(match self {
            LayerSpec::Conv2d(s) => s.macs(input[1], input[2])?,
            LayerSpec::Separable { depthwise, pointwise } => {
                let (h1, w1) = depthwise.out_hw(input[1], input[2])?;
                depthwise.macs(input[1], input[2])? + pointwise.macs(h1, w1)?
            }
            LayerSpec::Dense { inputs, outputs, .. } => (inputs * outputs) as u64,
            _ => 0,
        })
    }
}

fn check_channels(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("expected {expected} channels, got {got}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// L2 bound on every row along the leading axis.
    pub max_norm: Option<f64>,
}

impl Param {
    fn new(name: &str, shape: Vec<usize>, value: Vec<f64>, max_norm: Option<f64>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
            max_norm,
        }
    }

    fn glorot(name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize, max_norm: Option<f64>, r: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| r.random_range(-limit..limit)).collect();
        Self::new(name, shape, value, max_norm)
    }

    /// Rescale rows whose L2 norm exceeds the bound.
    pub fn project(&mut self) {
        let Some(bound) = self.max_norm else { return };
        let rows = self.shape.first().copied().unwrap_or(1).max(1);
        let len = self.value.len() / rows;
        for row in self.value.chunks_mut(len.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > bound {
                let s = bound / norm;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

/// Batch of activations, batch × channels × height × width.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub n: usize,
    pub shape: Shape3,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(n: usize, shape: Shape3) -> Self {
        Self {
            n,
            shape,
            data: vec![0.0; n * shape.iter().product::<usize>()],
        }
    }

    pub fn item_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }
}

/// Values the backward pass needs beyond inputs and outputs.
#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    Mask(Vec<f64>),
    Mid(Act),
    Bn {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: Option<(Vec<f64>, Vec<f64>)>,
    },
    Argmax(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Param>,
    pub buffers: Vec<Buffer>,
}

fn conv_params(prefix: &str, s: &ConvSpec, r: &mut Rng) -> Vec<Param> {
    let shape = vec![s.out_channels, s.cin_per_group(), s.kernel.0, s.kernel.1];
    let taps = s.kernel.0 * s.kernel.1;
    let mut p = vec![Param::glorot(
        &format!("{prefix}weight"),
        shape,
        s.fan_in(),
        s.cout_per_group() * taps,
        s.max_norm,
        r,
    )];
    if s.bias {
        p.push(Param::new(&format!("{prefix}bias"), vec![s.out_channels], vec![0.0; s.out_channels], None));
    }
    p
}

impl Layer {
    pub fn new(spec: LayerSpec, r: &mut Rng) -> Self {
        let mut buffers = Vec::new();
        let params = match &spec {
            LayerSpec::Conv2d(s) => conv_params("", s, r),
            LayerSpec::Separable { depthwise, pointwise } => {
                let mut p = conv_params("depthwise.", depthwise, r);
                p.extend(conv_params("pointwise.", pointwise, r));
                p
            }
            LayerSpec::BatchNorm { channels, .. } => {
                buffers.push(Buffer {
                    name: "running_mean".into(),
                    value: vec![0.0; *channels],
                });
                buffers.push(Buffer {
                    name: "running_var".into(),
                    value: vec![1.0; *channels],
                });
                vec![
                    Param::new("gamma", vec![*channels], vec![1.0; *channels], None),
                    Param::new("beta", vec![*channels], vec![0.0; *channels], None),
                ]
            }
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
                max_norm,
            } => {
                let mut p = vec![Param::glorot("weight", vec![*outputs, *inputs], *inputs, *outputs, *max_norm, r)];
                if *bias {
                    p.push(Param::new("bias", vec![*outputs], vec![0.0; *outputs], None));
                }
                p
            }
            _ => Vec::new(),
        };
        Self { spec, params, buffers }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn forward(&self, inputs: &[&Act], out_shape: Shape3, mode: Mode, r: &mut Rng) -> (Act, Aux) {
        let x = inputs[0];
        let n = x.n;
        let [c, h, w] = x.shape;
        match &self.spec {
            LayerSpec::Conv2d(s) => {
                let mut out = Act::zeros(n, out_shape);
                let bias = s.bias.then(|| self.params[1].value.as_slice());
                let ol = out.item_len();
                for i in 0..n {
                    let y = conv::forward(s, x.item(i), h, w, &self.params[0].value, bias);
                    out.data[i * ol..(i + 1) * ol].copy_from_slice(&y);
                }
                (out, Aux::None)
            }
            LayerSpec::Separable { depthwise, pointwise } => {
                let (dp, pp) = self.params.split_at(1 + depthwise.bias as usize);
                let (h1, w1) = depthwise.out_hw(h, w).expect("shape checked at build");
                let mut mid = Act::zeros(n, [depthwise.out_channels, h1, w1]);
                let mut out = Act::zeros(n, out_shape);
                let (ml, ol) = (mid.item_len(), out.item_len());
                for i in 0..n {
                    let m = conv::forward(depthwise, x.item(i), h, w, &dp[0].value, dp.get(1).map(|b| b.value.as_slice()));
                    let y = conv::forward(pointwise, &m, h1, w1, &pp[0].value, pp.get(1).map(|b| b.value.as_slice()));
                    mid.data[i * ml..(i + 1) * ml].copy_from_slice(&m);
                    out.data[i * ol..(i + 1) * ol].copy_from_slice(&y);
                }
                (out, Aux::Mid(mid))
            }
            LayerSpec::BatchNorm { eps, .. } => {
                let hw = h * w;
                let (gamma, beta) = (&self.params[0].value, &self.params[1].value);
                let (mean, var, batch) = if mode.batch_stats() {
                    let m = (n * hw) as f64;
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for (k, plane) in x.data.chunks(hw).enumerate() {
                        mean[k % c] += plane.iter().sum::<f64>();
                    }
                    mean.iter_mut().for_each(|v| *v /= m);
                    for (k, plane) in x.data.chunks(hw).enumerate() {
                        let mu = mean[k % c];
                        var[k % c] += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    var.iter_mut().for_each(|v| *v /= m);
                    (mean.clone(), var.clone(), Some((mean, var)))
                } else {
                    (self.buffers[0].value.clone(), self.buffers[1].value.clone(), None)
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut out = Act::zeros(n, out_shape);
                let mut xhat = vec![0.0; x.data.len()];
                for (k, ((o, xh), xv)) in out.data.chunks_mut(hw).zip(xhat.chunks_mut(hw)).zip(x.data.chunks(hw)).enumerate() {
                    let ch = k % c;
                    let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                    for ((o, xh), xv) in o.iter_mut().zip(xh.iter_mut()).zip(xv) {
                        *xh = (xv - mu) * is;
                        *o = ga * *xh + be;
                    }
                }
                (out, Aux::Bn { xhat, inv_std, batch })
            }
            LayerSpec::Activation { function } => {
                let data = x.data.iter().map(|&v| function.apply(v)).collect();
                (Act { n, shape: out_shape, data }, Aux::None)
            }
            LayerSpec::AvgPool { size, stride } => {
                let mut out = Act::zeros(n, out_shape);
                let [_, ho, wo] = out_shape;
                let norm = 1.0 / (size.0 * size.1) as f64;
                for (plane, o) in x.data.chunks(h * w).zip(out.data.chunks_mut(ho * wo)) {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let mut acc = 0.0;
                            for a in 0..size.0 {
                                let row = (oi * stride.0 + a) * w + oj * stride.1;
                                acc += plane[row..row + size.1].iter().sum::<f64>();
                            }
                            o[oi * wo + oj] = acc * norm;
                        }
                    }
                }
                (out, Aux::None)
            }
            LayerSpec::MaxPool { size, stride } => {
                let mut out = Act::zeros(n, out_shape);
                let [_, ho, wo] = out_shape;
                let mut arg = vec![0; out.data.len()];
                for (p, (plane, o)) in x.data.chunks(h * w).zip(out.data.chunks_mut(ho * wo)).enumerate() {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let mut best = (oi * stride.0) * w + oj * stride.1;
                            for a in 0..size.0 {
                                for b in 0..size.1 {
                                    let k = (oi * stride.0 + a) * w + oj * stride.1 + b;
                                    if plane[k] > plane[best] {
                                        best = k;
                                    }
                                }
                            }
                            o[oi * wo + oj] = plane[best];
                            arg[p * ho * wo + oi * wo + oj] = p * h * w + best;
                        }
                    }
                }
                (out, Aux::Argmax(arg))
            }
            LayerSpec::Dropout { p } => {
                if mode != Mode::Train || *p == 0.0 {
                    return (x.clone(), Aux::None);
                }
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.data.len())
                    .map(|_| if r.random::<f64>() < *p { 0.0 } else { keep })
                    .collect();
                let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
                (Act { n, shape: out_shape, data }, Aux::Mask(mask))
            }
            LayerSpec::Dense { inputs: fi, outputs, bias, .. } => {
                let wt = &self.params[0].value;
                let mut out = Act::zeros(n, out_shape);
                for i in 0..n {
                    let xi = x.item(i);
                    for o in 0..*outputs {
                        let row = &wt[o * fi..(o + 1) * fi];
                        let b = if *bias { self.params[1].value[o] } else { 0.0 };
                        out.data[i * outputs + o] = b + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                (out, Aux::None)
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => (
                Act {
                    n,
                    shape: out_shape,
                    data: x.data.clone(),
                },
                Aux::None,
            ),
            LayerSpec::ZeroPad { padding } => {
                let [_, hp, wp] = out_shape;
                let mut out = Act::zeros(n, out_shape);
                for (plane, o) in x.data.chunks(h * w).zip(out.data.chunks_mut(hp * wp)) {
                    for i in 0..h {
                        let dst = (i + padding[0]) * wp + padding[2];
                        o[dst..dst + w].copy_from_slice(&plane[i * w..(i + 1) * w]);
                    }
                }
                (out, Aux::None)
            }
            LayerSpec::Chomp { left, .. } => {
                let wo = out_shape[2];
                let mut data = Vec::with_capacity(n * c * h * wo);
                for row in x.data.chunks(w) {
                    data.extend_from_slice(&row[*left..*left + wo]);
                }
                (Act { n, shape: out_shape, data }, Aux::None)
            }
            LayerSpec::Add => {
                let data = x.data.iter().zip(&inputs[1].data).map(|(a, b)| a + b).collect();
                (Act { n, shape: out_shape, data }, Aux::None)
            }
            LayerSpec::Concat => {
                let mut data = Vec::with_capacity(n * out_shape.iter().product::<usize>());
                for i in 0..n {
                    for inp in inputs {
                        data.extend_from_slice(inp.item(i));
                    }
                }
                (Act { n, shape: out_shape, data }, Aux::None)
            }
        }
    }

    /// Direct-loop forward for one sample, counting multiply-accumulates.
    pub(crate) fn forward_counted(&self, inputs: &[&Act], out_shape: Shape3, macs: &mut u64) -> Act {
        let x = inputs[0];
        let [_, h, w] = x.shape;
        match &self.spec {
            LayerSpec::Conv2d(s) => {
                let bias = s.bias.then(|| self.params[1].value.as_slice());
                let data = (0..x.n)
                    .flat_map(|i| conv::forward_reference(s, x.item(i), h, w, &self.params[0].value, bias, macs))
                    .collect();
                Act { n: x.n, shape: out_shape, data }
            }
            LayerSpec::Separable { depthwise, pointwise } => {
                let (dp, pp) = self.params.split_at(1 + depthwise.bias as usize);
                let (h1, w1) = depthwise.out_hw(h, w).expect("shape checked at build");
                let data = (0..x.n)
                    .flat_map(|i| {
                        let m = conv::forward_reference(depthwise, x.item(i), h, w, &dp[0].value, dp.get(1).map(|b| b.value.as_slice()), macs);
                        conv::forward_reference(pointwise, &m, h1, w1, &pp[0].value, pp.get(1).map(|b| b.value.as_slice()), macs)
                    })
                    .collect();
                Act { n: x.n, shape: out_shape, data }
            }
            LayerSpec::Dense { inputs: fi, outputs, bias, .. } => {
                let mut out = Act::zeros(x.n, out_shape);
                for i in 0..x.n {
                    for o in 0..*outputs {
                        let mut acc = if *bias { self.params[1].value[o] } else { 0.0 };
                        for k in 0..*fi {
                            acc += self.params[0].value[o * fi + k] * x.item(i)[k];
                            *macs += 1;
                        }
                        out.data[i * outputs + o] = acc;
                    }
                }
                out
            }
            _ => self.forward(inputs, out_shape, Mode::Eval, &mut rand::SeedableRng::seed_from_u64(0)).0,
        }
    }

    pub(crate) fn update_running(&mut self, aux: &Aux, count: usize) {
        let (LayerSpec::BatchNorm { momentum, .. }, Aux::Bn { batch: Some((mean, var)), .. }) = (&self.spec, aux) else {
            return;
        };
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for (rm, m) in self.buffers[0].value.iter_mut().zip(mean) {
            *rm = (1.0 - momentum) * *rm + momentum * m;
        }
        for (rv, v) in self.buffers[1].value.iter_mut().zip(var) {
            *rv = (1.0 - momentum) * *rv + momentum * v * unbias;
        }
    }

    /// Accumulates parameter gradients and returns one gradient per input
    /// (`None` where `need[k]` is false).
    pub(crate) fn backward(&mut self, inputs: &[&Act], out: &Act, aux: &Aux, grad: &Act, need: &[bool]) -> Vec<Option<Act>> {
        let x = inputs[0];
        let n = x.n;
        let [c, h, w] = x.shape;
        let like = |data: Vec<f64>| Act { n, shape: x.shape, data };
        match &self.spec {
            LayerSpec::Conv2d(s) => {
                let (wp, rest) = self.params.split_at_mut(1);
                let mut dx = need[0].then(|| Act::zeros(n, x.shape));
                let il = x.item_len();
                for i in 0..n {
                    let d = conv::backward(
                        s,
                        x.item(i),
                        h,
                        w,
                        &wp[0].value,
                        grad.item(i),
                        &mut wp[0].grad,
                        rest.first_mut().map(|b| b.grad.as_mut_slice()),
                        need[0],
                    );
                    if let (Some(dx), Some(d)) = (dx.as_mut(), d) {
                        dx.data[i * il..(i + 1) * il].copy_from_slice(&d);
                    }
                }
                vec![dx]
            }
            LayerSpec::Separable { depthwise, pointwise } => {
                let Aux::Mid(mid) = aux else { unreachable!("separable without cached midpoint") };
                let (dp, pp) = self.params.split_at_mut(1 + depthwise.bias as usize);
                let (pw, pb) = pp.split_at_mut(1);
                let (dw, db) = dp.split_at_mut(1);
                let [_, h1, w1] = mid.shape;
                let mut dx = need[0].then(|| Act::zeros(n, x.shape));
                let il = x.item_len();
                for i in 0..n {
                    let dm = conv::backward(
                        pointwise,
                        mid.item(i),
                        h1,
                        w1,
                        &pw[0].value,
                        grad.item(i),
                        &mut pw[0].grad,
                        pb.first_mut().map(|b| b.grad.as_mut_slice()),
                        true,
                    )
                    .expect("input gradient requested");
                    let d = conv::backward(
                        depthwise,
                        x.item(i),
                        h,
                        w,
                        &dw[0].value,
                        &dm,
                        &mut dw[0].grad,
                        db.first_mut().map(|b| b.grad.as_mut_slice()),
                        need[0],
                    );
                    if let (Some(dx), Some(d)) = (dx.as_mut(), d) {
                        dx.data[i * il..(i + 1) * il].copy_from_slice(&d);
                    }
                }
                vec![dx]
            }
            LayerSpec::BatchNorm { .. } => {
                let Aux::Bn { xhat, inv_std, batch } = aux else { unreachable!("batchnorm without cache") };
                let hw = h * w;
                let gamma = self.params[0].value.clone();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (k, (g, xh)) in grad.data.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    sum_dy[k % c] += g.iter().sum::<f64>();
                    sum_dy_xhat[k % c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                }
                for ch in 0..c {
                    self.params[0].grad[ch] += sum_dy_xhat[ch];
                    self.params[1].grad[ch] += sum_dy[ch];
                }
                if !need[0] {
                    return vec![None];
                }
                let m = (n * hw) as f64;
                let mut data = vec![0.0; grad.data.len()];
                for (k, ((d, g), xh)) in data.chunks_mut(hw).zip(grad.data.chunks(hw)).zip(xhat.chunks(hw)).enumerate() {
                    let ch = k % c;
                    let kk = gamma[ch] * inv_std[ch];
                    if batch.is_some() {
                        let (a, b) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                        for ((d, g), xh) in d.iter_mut().zip(g).zip(xh) {
                            *d = kk * (g - a - xh * b);
                        }
                    } else {
                        for (d, g) in d.iter_mut().zip(g) {
                            *d = kk * g;
                        }
                    }
                }
                vec![Some(like(data))]
            }
            LayerSpec::Activation { function } => {
                let data = grad
                    .data
                    .iter()
                    .zip(&x.data)
                    .zip(&out.data)
                    .map(|((g, xv), yv)| g * function.derivative(*xv, *yv))
                    .collect();
                vec![Some(like(data))]
            }
            LayerSpec::AvgPool { size, stride } => {
                let [_, ho, wo] = out.shape;
                let norm = 1.0 / (size.0 * size.1) as f64;
                let mut dx = vec![0.0; x.data.len()];
                for (d, g) in dx.chunks_mut(h * w).zip(grad.data.chunks(ho * wo)) {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let v = g[oi * wo + oj] * norm;
                            for a in 0..size.0 {
                                let row = (oi * stride.0 + a) * w + oj * stride.1;
                                d[row..row + size.1].iter_mut().for_each(|e| *e += v);
                            }
                        }
                    }
                }
                vec![Some(like(dx))]
            }
            LayerSpec::MaxPool { .. } => {
                let Aux::Argmax(arg) = aux else { unreachable!("maxpool without argmax") };
                let mut dx = vec![0.0; x.data.len()];
                for (g, &k) in grad.data.iter().zip(arg) {
                    dx[k] += g;
                }
                vec![Some(like(dx))]
            }
            LayerSpec::Dropout { .. } => match aux {
                Aux::Mask(mask) => vec![Some(like(grad.data.iter().zip(mask).map(|(g, m)| g * m).collect()))],
                _ => vec![Some(like(grad.data.clone()))],
            },
            LayerSpec::Dense { inputs: fi, outputs, bias, .. } => {
                let mut dx = vec![0.0; x.data.len()];
                for i in 0..n {
                    let xi = x.item(i);
                    for o in 0..*outputs {
                        let g = grad.data[i * outputs + o];
                        if *bias {
                            self.params[1].grad[o] += g;
                        }
                        let Param { value, grad: pg, .. } = &mut self.params[0];
                        let (wv, wg) = (&value[o * fi..(o + 1) * fi], &mut pg[o * fi..(o + 1) * fi]);
                        for k in 0..*fi {
                            wg[k] += g * xi[k];
                            dx[i * fi + k] += g * wv[k];
                        }
                    }
                }
                vec![need[0].then(|| like(dx))]
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => vec![Some(like(grad.data.clone()))],
            LayerSpec::ZeroPad { padding } => {
                let [_, hp, wp] = out.shape;
                let mut dx = Vec::with_capacity(x.data.len());
                for g in grad.data.chunks(hp * wp) {
                    for i in 0..h {
                        let src = (i + padding[0]) * wp + padding[2];
                        dx.extend_from_slice(&g[src..src + w]);
                    }
                }
                vec![Some(like(dx))]
            }
            LayerSpec::Chomp { left, .. } => {
                let wo = out.shape[2];
                let mut dx = vec![0.0; x.data.len()];
                for (d, g) in dx.chunks_mut(w).zip(grad.data.chunks(wo)) {
                    d[*left..*left + wo].copy_from_slice(g);
                }
                vec![Some(like(dx))]
            }
            LayerSpec::Add => need.iter().map(|&k| k.then(|| like(grad.data.clone()))).collect(),
            LayerSpec::Concat => {
                let ol = out.item_len();
                let mut offset = 0;
                inputs
                    .iter()
                    .zip(need)
                    .map(|(inp, &k)| {
                        let l = inp.item_len();
                        let start = offset;
                        offset += l;
                        k.then(|| Act {
                            n,
                            shape: inp.shape,
                            data: (0..n).flat_map(|i| grad.data[i * ol + start..i * ol + start + l].iter().copied()).collect(),
                        })
                    })
                    .collect()
            }
        }
    }
}
