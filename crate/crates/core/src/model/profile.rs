use super::config::ModelConfig;
use super::network::PhysMamba;
use crate::error::Result;

/// Parameter and multiply-accumulate totals, with a per-layer breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub params: usize,
    pub macs: u64,
    pub layers: Vec<LayerCost>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

/// Analytic count for a batch-1 input of `frames × height × width`.
///
/// Convolutions and linear maps count one MAC per output element per input
/// channel per kernel tap; each scan step counts three per state
/// (transition, input, readout). Normalizations, activations and pooling
/// are not counted.
pub fn profile_model(config: &ModelConfig, frames: usize, height: usize, width: usize) -> Result<Profile> {
    config.check_input(frames, height, width)?;
    let net = PhysMamba::new(config.clone())?;
    let mut layers = Vec::new();
    let mut push = |name: String, params: usize, macs: u64| layers.push(LayerCost { name, params, macs });
    let conv = |out: usize, cin: usize, k: usize, elems: usize| -> (usize, u64) {
        (out * cin * k, (elems * out * cin * k) as u64)
    };

    let [c1, c2, c3] = config.stem_channels();
    let (c, cf) = (config.slow_channels(), config.fast_channels());
    let (t, h, w) = (frames, height, width);
    let (p, m) = conv(c1, 3, 25, t * h * w);
    push("stem.0".into(), p + 2 * c1, m);
    let (h, w) = (h / 2, w / 2);
    let (p, m) = conv(c2, c1, 27, t * h * w);
    push("stem.1".into(), p + 2 * c2, m);
    let (p, m) = conv(c3, c2, 27, t * h * w);
    push("stem.2".into(), p + 2 * c3, m);
    let (mut h, mut w) = (h / 2, w / 2);
    let (ts, tf) = (t / 4, t / 2);
    let (p, m) = conv(c, c, 3, ts * h * w);
    push("slow_down".into(), p + 2 * c, m);
    let (p, m) = conv(cf, c, 3, tf * h * w);
    push("fast_down".into(), p + 2 * cf, m);

    for i in 0..config.blocks {
        let (s, f) = (&net.slow[i], &net.fast[i]);
        push(s.prefix.clone(), s.param_count(), s.macs(ts, h, w));
        push(f.prefix.clone(), f.param_count(), f.macs(tf, h, w));
        if i < config.fused_blocks() {
            h /= 2;
            w /= 2;
            let (p, m) = conv(c, cf, 3, ts * h * w);
            push(format!("lateral.{i}"), p, m);
        }
    }
    let hw = config.head_width;
    let (p, m) = conv(hw, c + cf, 3, t);
    push("head.conv".into(), p + 2 * hw, m);
    push("head.proj".into(), hw + 1, (t * hw) as u64);

    Ok(Profile {
        params: layers.iter().map(|l| l.params).sum(),
        macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}
