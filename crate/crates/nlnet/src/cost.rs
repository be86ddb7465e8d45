//! Parameter and multiply-add accounting, in exact integer arithmetic.
//!
//! Multiply-adds count the dense work of convolutions, linear maps, and the
//! non-local pairwise/aggregation products for a single clip (batch 1).
//! Normalizations, activations, and pooling are counted as zero.

use crate::backbone::{Network, StageItem};
use crate::error::Result;
use crate::nonlocal::NonLocalConfig;
use crate::scalar::Scalar;
use std::fmt::Write as _;

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer and total counts for one network and input shape.
#[derive(Clone, Debug, Default)]
pub struct CostReport {
    pub entries: Vec<LayerCost>,
}

impl CostReport {
    pub fn push(&mut self, name: impl Into<String>, params: u64, macs: u64) {
        self.entries.push(LayerCost {
            name: name.into(),
            params,
            macs,
        });
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// (parameter ratio, multiply-add ratio) against a baseline report.
    pub fn ratios_vs(&self, base: &CostReport) -> (f64, f64) {
        (
            self.total_params() as f64 / base.total_params() as f64,
            self.total_macs() as f64 / base.total_macs() as f64,
        )
    }

    pub fn render_text(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {title}");
        let _ = writeln!(s, "{:<28} {:>14} {:>16}", "layer", "params", "multiply-adds");
        for e in &self.entries {
            let _ = writeln!(s, "{:<28} {:>14} {:>16}", e.name, e.params, e.macs);
        }
        let _ = writeln!(
            s,
            "{:<28} {:>14} {:>16}",
            "total",
            self.total_params(),
            self.total_macs()
        );
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("layer,params,multiply_adds\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.name, e.params, e.macs);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params(), self.total_macs());
        s
    }
}

/// Cost of one non-local block on a T x H x W feature map.
///
/// Parameters: |W_g| + |W_theta| + |W_phi| + |W_z| (+ |w_f|) + bn affine.
/// Multiply-adds: embedding maps, pairwise scores (N*M*d with d the pairwise
/// width), aggregation (N*M*b), and the output map, with M = N/subsample^2.
pub fn count_block_cost(cfg: &NonLocalConfig, t: usize, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate_for_input(t, h, w)?;
    let (c, b) = (cfg.channels_in as u64, cfg.bottleneck as u64);
    let n = (t * h * w) as u64;
    let s = cfg.subsample_spatial as u64;
    let m = n / (s * s);
    let mut r = CostReport::default();
    r.push("w_g", c * b, n * c * b);
    if cfg.kind.uses_embeddings() {
        r.push("w_theta", c * b, n * c * b);
        r.push("w_phi", c * b, n * c * b);
    }
    if matches!(cfg.kind, crate::pairwise::PairwiseKind::Concatenation) {
        r.push("w_f", 2 * b, n * b + m * b);
    }
    let d = cfg.pairwise_width() as u64;
    r.push("pairwise", 0, n * m * d);
    r.push("aggregate", 0, n * m * b);
    r.push("w_z", b * c, n * b * c);
    if cfg.use_bn_on_wz {
        r.push("bn", 2 * c, 0);
    }
    Ok(r)
}

/// Whole-network cost for a (t, h, w, c) input clip.
pub fn count_network_cost<T: Scalar>(
    net: &Network<T>,
    input_thwc: [usize; 4],
) -> Result<CostReport> {
    let spec = &net.spec;
    let [t0, h0, w0, _] = input_thwc;
    let mut r = CostReport::default();
    let conv_out = |l: usize, k: usize, s: usize, p: usize| (l + 2 * p - k) / s + 1;

    // stem
    let k1 = spec.conv1_kernel;
    let (mut t, mut h, mut w) = (
        conv_out(t0, k1[0], spec.conv1_stride[0], k1[0] / 2),
        conv_out(h0, k1[1], spec.conv1_stride[1], k1[1] / 2),
        conv_out(w0, k1[2], spec.conv1_stride[2], k1[2] / 2),
    );
    let taps = (k1[0] * k1[1] * k1[2] * spec.in_channels) as u64;
    r.push(
        "conv1",
        taps * spec.conv1_channels as u64,
        (t * h * w) as u64 * taps * spec.conv1_channels as u64,
    );
    r.push("bn1", 2 * spec.conv1_channels as u64, 0);
    let p1 = spec.pool1;
    t = conv_out(t, p1.window[0], p1.stride[0], p1.pad[0]);
    h = conv_out(h, p1.window[1], p1.stride[1], p1.pad[1]);
    w = conv_out(w, p1.window[2], p1.stride[2], p1.pad[2]);

    let mut in_ch = spec.conv1_channels;
    for (si, stage) in net.stages.iter().enumerate() {
        let st = &spec.stages[si];
        let mut res_idx = 0usize;
        for item in &stage.items {
            match item {
                StageItem::NonLocal(nl) => {
                    let block = count_block_cost(&nl.cfg, t, h, w)?;
                    r.push(&nl.name, block.total_params(), block.total_macs());
                }
                StageItem::Residual(block) => {
                    let stride = if res_idx == 0 { st.spatial_stride } else { 1 };
                    let (ot, oh, ow) = (t, conv_out(h, 1, stride, 0), conv_out(w, 1, stride, 0));
                    let count_conv = |r: &mut CostReport,
                                      name: &str,
                                      kernel: &[usize],
                                      ci: usize,
                                      co: usize,
                                      positions: u64| {
                        let taps = (kernel[0] * kernel[1] * kernel[2] * ci) as u64;
                        r.push(name, taps * co as u64, positions * taps * co as u64);
                    };
                    let pos_mid = (ot * oh * ow) as u64;
                    count_conv(
                        &mut r,
                        &format!("{}.conv1", block.name),
                        block.conv1.weight.dims(),
                        in_ch,
                        st.bottleneck,
                        (t * h * w) as u64,
                    );
                    r.push(format!("{}.bn1", block.name), 2 * st.bottleneck as u64, 0);
                    count_conv(
                        &mut r,
                        &format!("{}.conv2", block.name),
                        block.conv2.weight.dims(),
                        st.bottleneck,
                        st.bottleneck,
                        pos_mid,
                    );
                    r.push(format!("{}.bn2", block.name), 2 * st.bottleneck as u64, 0);
                    count_conv(
                        &mut r,
                        &format!("{}.conv3", block.name),
                        block.conv3.weight.dims(),
                        st.bottleneck,
                        st.out_channels,
                        pos_mid,
                    );
                    r.push(format!("{}.bn3", block.name), 2 * st.out_channels as u64, 0);
                    if block.shortcut.is_some() {
                        count_conv(
                            &mut r,
                            &format!("{}.shortcut.conv", block.name),
                            &[1, 1, 1],
                            in_ch,
                            st.out_channels,
                            pos_mid,
                        );
                        r.push(
                            format!("{}.shortcut.bn", block.name),
                            2 * st.out_channels as u64,
                            0,
                        );
                    }
                    h = oh;
                    w = ow;
                    in_ch = st.out_channels;
                    res_idx += 1;
                }
            }
        }
        if si == 0 {
            if let Some(p2) = spec.pool2 {
                t = conv_out(t, p2.window[0], p2.stride[0], p2.pad[0]);
                h = conv_out(h, p2.window[1], p2.stride[1], p2.pad[1]);
                w = conv_out(w, p2.window[2], p2.stride[2], p2.pad[2]);
            }
        }
    }
    let classes = spec.num_classes as u64;
    r.push(
        "head.fc",
        in_ch as u64 * classes + classes,
        in_ch as u64 * classes,
    );
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_network, NetworkSpec};
    use crate::pairwise::PairwiseKind;

    #[test]
    fn block_weight_count_matches_reference_figures() {
        // C=1024, b=512: the four projection matrices hold 4*1024*512 weights
        let cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 1024);
        let r = count_block_cost(&cfg, 4, 14, 14).unwrap();
        let weights: u64 = r
            .entries
            .iter()
            .filter(|e| e.name.starts_with("w_"))
            .map(|e| e.params)
            .sum();
        assert_eq!(weights, 4 * 1024 * 512);
    }

    #[test]
    fn subsampling_quarters_pairwise_and_aggregation() {
        let mut cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 64);
        let full = count_block_cost(&cfg, 4, 8, 8).unwrap();
        cfg.subsample_spatial = 2;
        let sub = count_block_cost(&cfg, 4, 8, 8).unwrap();
        let pick = |r: &CostReport, n: &str| r.entries.iter().find(|e| e.name == n).unwrap().macs;
        assert_eq!(pick(&full, "pairwise"), 4 * pick(&sub, "pairwise"));
        assert_eq!(pick(&full, "aggregate"), 4 * pick(&sub, "aggregate"));
    }

    #[test]
    fn halving_bottleneck_halves_embedding_maps() {
        let mut cfg = NonLocalConfig::new(PairwiseKind::EmbeddedGaussian, 64);
        cfg.bottleneck = 64;
        let wide = count_block_cost(&cfg, 2, 4, 4).unwrap();
        cfg.bottleneck = 32;
        let half = count_block_cost(&cfg, 2, 4, 4).unwrap();
        let embed = |r: &CostReport| -> u64 {
            r.entries
                .iter()
                .filter(|e| matches!(e.name.as_str(), "w_g" | "w_theta" | "w_phi"))
                .map(|e| e.macs)
                .sum()
        };
        assert_eq!(embed(&wide), 2 * embed(&half));
    }

    #[test]
    fn single_conv_layer_hand_count() {
        // k=3 spatial, Cin=Cout=4, 1x4x4 input, zero pad: weights 4*4*9,
        // multiply-adds 16 positions * (4*9) taps * 4 outputs
        let mut spec = NetworkSpec::micro(4, 2);
        spec.conv1_channels = 4;
        spec.conv1_kernel = [1, 3, 3];
        spec.conv1_stride = [1, 1, 1];
        let net = build_network::<f64>(&spec, 1.0, 1.0, 0).unwrap();
        let r = count_network_cost(&net, [1, 4, 4, 4]).unwrap();
        let conv1 = r.entries.iter().find(|e| e.name == "conv1").unwrap();
        assert_eq!(conv1.params, 4 * 4 * 9);
        assert_eq!(conv1.macs, 16 * (4 * 9) * 4);
    }

    #[test]
    fn ratio_of_network_to_itself_is_one() {
        let spec = NetworkSpec::desk(1, 2);
        let net = build_network::<f64>(&spec, 1.0, 1.0, 0).unwrap();
        let r = count_network_cost(&net, [8, 32, 32, 1]).unwrap();
        let (p, f) = r.ratios_vs(&r);
        assert_eq!(p, 1.0);
        assert_eq!(f, 1.0);
    }
}
