//! Static description of the network: every convolution, in execution order.
//!
//! Channel widths per backbone stage are `width_base · [1, 2, 4, 8, 8]`.
//! Each stage is a stride-2 3x3 convolution followed by one CSP block; SPP
//! (pools 5/9/13) closes the backbone; the neck is a top-down then bottom-up
//! path aggregation over strides 8/16/32; the head is one 1x1 convolution per
//! scale.

use super::DetectorConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub path: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Head convolutions are linear; everything else is followed by leaky-ReLU.
    pub activated: bool,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.path)
    }
}

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

/// Block outputs that can be captured besides individual convolutions.
pub const BLOCK_OUTPUTS: [&str; 6] =
    ["backbone.p3", "backbone.p4", "backbone.p5", "neck.out_p3", "neck.out_p4", "neck.out_p5"];

/// The three neck outputs that feed the head.
pub const NECK_OUTPUTS: [&str; 3] = ["neck.out_p3", "neck.out_p4", "neck.out_p5"];

pub fn stage_widths(width_base: usize) -> [usize; 5] {
    let w = width_base;
    [w, 2 * w, 4 * w, 8 * w, 8 * w]
}

pub fn head_channels(cfg: &DetectorConfig) -> usize {
    super::NUM_ANCHORS * (5 + cfg.num_classes)
}

fn conv(table: &mut Vec<ConvSpec>, path: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) {
    table.push(ConvSpec { path, in_ch, out_ch, kernel, stride, activated: true });
}

fn csp(table: &mut Vec<ConvSpec>, path: &str, in_ch: usize, out_ch: usize) {
    let h = out_ch / 2;
    conv(table, format!("{path}.cv1"), in_ch, h, 1, 1);
    conv(table, format!("{path}.m.cv1"), h, h, 1, 1);
    conv(table, format!("{path}.m.cv2"), h, h, 3, 1);
    conv(table, format!("{path}.cv2"), in_ch, h, 1, 1);
    conv(table, format!("{path}.cv3"), 2 * h, out_ch, 1, 1);
}

/// All convolutions of the network for `cfg`, in the order `forward` runs them.
pub fn layer_table(cfg: &DetectorConfig) -> Vec<ConvSpec> {
    let c = stage_widths(cfg.width_base);
    let mut t = Vec::new();
    let mut prev = cfg.in_channels;
    for (i, &ch) in c.iter().enumerate() {
        conv(&mut t, format!("backbone.b{}.down", i + 1), prev, ch, 3, 2);
        csp(&mut t, &format!("backbone.b{}.csp", i + 1), ch, ch);
        prev = ch;
    }
    conv(&mut t, "backbone.spp.cv1".into(), c[4], c[4] / 2, 1, 1);
    conv(&mut t, "backbone.spp.cv2".into(), 4 * (c[4] / 2), c[4], 1, 1);

    conv(&mut t, "neck.lat5".into(), c[4], c[3], 1, 1);
    csp(&mut t, "neck.td4", 2 * c[3], c[3]);
    conv(&mut t, "neck.lat4".into(), c[3], c[2], 1, 1);
    csp(&mut t, "neck.td3", 2 * c[2], c[2]);
    conv(&mut t, "neck.down3".into(), c[2], c[2], 3, 2);
    csp(&mut t, "neck.bu4", 2 * c[2], c[3]);
    conv(&mut t, "neck.down4".into(), c[3], c[3], 3, 2);
    csp(&mut t, "neck.bu5", 2 * c[3], c[4]);

    let hc = head_channels(cfg);
    for (name, ch) in [("p3", c[2]), ("p4", c[3]), ("p5", c[4])] {
        t.push(ConvSpec { path: format!("head.{name}"), in_ch: ch, out_ch: hc, kernel: 1, stride: 1, activated: false });
    }
    t
}
