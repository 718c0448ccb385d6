use super::conv::ConvSpec;
use super::graph::{GraphBuilder, ModelGraph};
use super::layers::{ActivationFn, LayerSpec};
use crate::error::{Error, Result};

pub const ARCHITECTURES: [&str; 5] = ["sepconv1d", "eegnet", "eegtcnet", "eeginception", "deepconvnet"];

const ELU: LayerSpec = LayerSpec::Activation {
    function: ActivationFn::Elu,
};

/// Build a named network for `channels × samples` single-trial input.
pub fn build_architecture(name: &str, channels: usize, samples: usize, seed: u64) -> Result<ModelGraph> {
    let b = match name {
        "sepconv1d" => sepconv1d(channels, samples)?,
        "eegnet" => eegnet(channels, samples)?,
        "eegtcnet" => eegtcnet(channels, samples)?,
        "eeginception" => eeginception(channels, samples)?,
        "deepconvnet" => deepconvnet(channels, samples)?,
        other => return Err(Error::UnknownArchitecture(other.into())),
    };
    b.build(seed)
}

fn head(b: &mut GraphBuilder, max_norm: Option<f64>) -> Result<()> {
    let [c, h, w] = b.shape(b.last());
    b.then("flatten", LayerSpec::Flatten)?;
    b.then(
        "dense",
        LayerSpec::Dense {
            inputs: c * h * w,
            outputs: 1,
            bias: true,
            max_norm,
        },
    )?;
    b.then("sigmoid", LayerSpec::activation(ActivationFn::Sigmoid))?;
    Ok(())
}

fn sepconv1d(channels: usize, samples: usize) -> Result<GraphBuilder> {
    let mut b = GraphBuilder::new("sepconv1d", [1, channels, samples]);
    b.then("reshape", LayerSpec::Reshape { shape: [channels, 1, samples] })?;
    b.then("zeropad", LayerSpec::ZeroPad { padding: [0, 0, 4, 4] })?;
    b.then(
        "separable_conv",
        LayerSpec::Separable {
            depthwise: ConvSpec::new(channels, channels, (1, 16)).depthwise().stride(1, 8).bias(false),
            pointwise: ConvSpec::new(channels, 4, (1, 1)),
        },
    )?;
    b.then("tanh", LayerSpec::activation(ActivationFn::Tanh))?;
    head(&mut b, None)?;
    Ok(b)
}

/// Temporal conv, spatial depthwise conv and a separable block; shared by
/// EEGNet and the EEGTCNet front end.
fn eegnet_stem(b: &mut GraphBuilder, channels: usize, pools: (usize, usize)) -> Result<()> {
    b.then("conv_temporal", LayerSpec::conv(ConvSpec::new(1, 8, (1, 32)).same().bias(false)))?;
    b.then("bn1", LayerSpec::batchnorm(8))?;
    b.then(
        "depthwise_spatial",
        LayerSpec::conv(ConvSpec::new(8, 16, (channels, 1)).depthwise().bias(false).max_norm(1.0)),
    )?;
    b.then("bn2", LayerSpec::batchnorm(16))?;
    b.then("elu1", ELU)?;
    b.then("pool1", LayerSpec::avgpool(1, pools.0))?;
    b.then("dropout1", LayerSpec::dropout(0.5))?;
    b.then(
        "separable",
        LayerSpec::Separable {
            depthwise: ConvSpec::new(16, 16, (1, 16)).depthwise().same().bias(false),
            pointwise: ConvSpec::new(16, 16, (1, 1)).bias(false),
        },
    )?;
    b.then("bn3", LayerSpec::batchnorm(16))?;
    b.then("elu2", ELU)?;
    b.then("pool2", LayerSpec::avgpool(1, pools.1))?;
    b.then("dropout2", LayerSpec::dropout(0.5))?;
    Ok(())
}

fn eegnet(channels: usize, samples: usize) -> Result<GraphBuilder> {
    let mut b = GraphBuilder::new("eegnet", [1, channels, samples]);
    eegnet_stem(&mut b, channels, (4, 8))?;
    head(&mut b, Some(0.25))?;
    Ok(b)
}

/// Residual block of two dilated causal convolutions.
fn tcn_block(b: &mut GraphBuilder, tag: &str, filters: usize, kernel: usize, dilation: usize) -> Result<usize> {
    let input = b.last();
    let cin = b.shape(input)[0];
    let pad = dilation * (kernel - 1);
    let mut cur = input;
    for (i, c) in [(1, cin), (2, filters)] {
        let conv = ConvSpec::new(c, filters, (1, kernel)).dilation(1, dilation).causal_padded();
        b.add(&format!("{tag}.conv{i}"), LayerSpec::conv(conv), &[cur])?;
        b.then(&format!("{tag}.chomp{i}"), LayerSpec::Chomp { left: 0, right: pad })?;
        b.then(&format!("{tag}.bn{i}"), LayerSpec::batchnorm(filters))?;
        b.then(&format!("{tag}.elu{i}"), ELU)?;
        cur = b.then(&format!("{tag}.dropout{i}"), LayerSpec::dropout(0.2))?;
    }
    let skip = if cin == filters {
        input
    } else {
        b.add(&format!("{tag}.downsample"), LayerSpec::conv(ConvSpec::new(cin, filters, (1, 1))), &[input])?
    };
    b.add(&format!("{tag}.add"), LayerSpec::Add, &[cur, skip])?;
    b.then(&format!("{tag}.elu"), ELU)
}

fn eegtcnet(channels: usize, samples: usize) -> Result<GraphBuilder> {
    let mut b = GraphBuilder::new("eegtcnet", [1, channels, samples]);
    eegnet_stem(&mut b, channels, (8, 8))?;
    tcn_block(&mut b, "tcn1", 12, 4, 1)?;
    let out = tcn_block(&mut b, "tcn2", 12, 4, 2)?;
    let w = b.shape(out)[2];
    b.then("last_step", LayerSpec::Chomp { left: w - 1, right: 0 })?;
    head(&mut b, None)?;
    Ok(b)
}

fn conv_block(b: &mut GraphBuilder, tag: &str, from: usize, conv: ConvSpec) -> Result<usize> {
    let filters = conv.out_channels;
    b.add(&format!("{tag}.conv"), LayerSpec::conv(conv), &[from])?;
    b.then(&format!("{tag}.bn"), LayerSpec::batchnorm(filters))?;
    b.then(&format!("{tag}.elu"), ELU)?;
    b.then(&format!("{tag}.dropout"), LayerSpec::dropout(0.2))
}

fn eeginception(channels: usize, samples: usize) -> Result<GraphBuilder> {
    let mut b = GraphBuilder::new("eeginception", [1, channels, samples]);
    let input = b.last();
    let mut n1 = Vec::new();
    for (i, k) in [(1, 64), (2, 32), (3, 16)] {
        let c = conv_block(&mut b, &format!("c{i}"), input, ConvSpec::new(1, 8, (1, k)).same())?;
        let d = ConvSpec::new(8, 16, (channels, 1)).depthwise().bias(false);
        n1.push(conv_block(&mut b, &format!("d{i}"), c, d)?);
    }
    b.add("n1", LayerSpec::Concat, &n1)?;
    let a1 = b.then("a1", LayerSpec::avgpool(1, 4))?;
    let cin = b.shape(a1)[0];
    let mut n2 = Vec::new();
    for (i, k) in [(4, 16), (5, 8), (6, 4)] {
        n2.push(conv_block(&mut b, &format!("c{i}"), a1, ConvSpec::new(cin, 8, (1, k)).same())?);
    }
    b.add("n2", LayerSpec::Concat, &n2)?;
    let a2 = b.then("a2", LayerSpec::avgpool(1, 2))?;
    conv_block(&mut b, "c7", a2, ConvSpec::new(24, 12, (1, 8)).same().bias(false))?;
    let a3 = b.then("a3", LayerSpec::avgpool(1, 2))?;
    conv_block(&mut b, "c8", a3, ConvSpec::new(12, 6, (1, 4)).same().bias(false))?;
    b.then("a4", LayerSpec::avgpool(1, 2))?;
    head(&mut b, None)?;
    Ok(b)
}

fn deepconvnet(channels: usize, samples: usize) -> Result<GraphBuilder> {
    let mut b = GraphBuilder::new("deepconvnet", [1, channels, samples]);
    b.then("conv_temporal", LayerSpec::conv(ConvSpec::new(1, 25, (1, 5)).bias(false).max_norm(2.0)))?;
    b.then("conv_spatial", LayerSpec::conv(ConvSpec::new(25, 25, (channels, 1)).bias(false).max_norm(2.0)))?;
    let mut cin = 25;
    for (i, filters) in [(1, 25), (2, 50), (3, 100), (4, 200)] {
        if i > 1 {
            let conv = ConvSpec::new(cin, filters, (1, 5)).bias(false).max_norm(2.0);
            b.then(&format!("block{i}.conv"), LayerSpec::conv(conv))?;
        }
        b.then(&format!("block{i}.bn"), LayerSpec::batchnorm(filters))?;
        b.then(&format!("block{i}.elu"), ELU)?;
        b.then(&format!("block{i}.pool"), LayerSpec::maxpool(1, 2))?;
        b.then(&format!("block{i}.dropout"), LayerSpec::dropout(0.5))?;
        cin = filters;
    }
    head(&mut b, Some(0.5))?;
    Ok(b)
}
