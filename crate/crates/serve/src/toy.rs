//! A hand-wired probe that needs no training: the click encoder writes the
//! positive-minus-negative disk coverage of each patch into feature channel 0
//! and a linear head reads that channel back with a negative bias.

use clickprobe::model::{ClickEncoderKind, HeadKind, InjectionMode, ModelConfig, ProbeModel};
use clickprobe::tensor::Tensor;
use clickprobe::upsample::UpsamplerKind;
use clickprobe::{Error, Result};

pub const TOY_ID: &str = "toy";

const CLICK_GAIN: f32 = 80.0;
const HEAD_BIAS: f32 = -2.0;

pub fn toy_model(upsampler: UpsamplerKind, injection: InjectionMode) -> Result<ProbeModel<f32>> {
    if upsampler.is_ingested() {
        return Err(Error::Config("the toy model only runs native upsamplers".into()));
    }
    let mut cfg = ModelConfig { upsampler, injection, ..ModelConfig::default() };
    cfg.encoder.kind = ClickEncoderKind::PatchEmbed;
    cfg.head.kind = HeadKind::Linear;
    let mut model = ProbeModel::<f32>::new(cfg)?;
    let mut params = model.export_params();

    let enc = params.get_mut("encoder.patch.w").expect("patch-embed encoder");
    let shape = enc.shape().to_vec();
    let area = shape[2] * shape[3];
    let gain = CLICK_GAIN / area as f32;
    *enc = Tensor::from_fn(shape, |i| match i / area {
        0 => gain,
        1 => -gain,
        _ => 0.0,
    });
    let out = params.get_mut("head.out.w").expect("linear head");
    *out = Tensor::from_fn(out.shape().to_vec(), |i| if i == 0 { 1.0 } else { 0.0 });
    params.insert("head.out.b".into(), Tensor::from_fn(vec![1], |_| HEAD_BIAS));
    model.load_params(&params)?;
    Ok(model)
}
