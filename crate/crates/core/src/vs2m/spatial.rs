//! Untrained hourglass network producing one `I x J` abundance map from a
//! fixed random latent.
//!
//! Three stride-2 encoder stages, a mirrored decoder with nearest-neighbour
//! upsampling and concatenated skips, a channel-attention gate after every
//! decoder stage, and a linear 1x1 output head.

use rand::Rng;

use super::layers::{
    concat, leaky_backward, leaky_forward, split, upsample_backward, upsample_to, AttentionCache,
    ChannelAttention, ChannelNorm, Conv2d, ConvCache, Feature, Layout, NormCache,
};

/// Shape of a spatial generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialArch {
    /// Latent channels `C0`; the latent holds `C0 * I * J` entries.
    pub latent_channels: usize,
    /// Encoder widths, shallow to deep.
    pub widths: Vec<usize>,
    pub attention_reduction: usize,
    /// Concatenate the raw latent into the last, full-resolution decoder stage.
    pub latent_skip: bool,
}

impl Default for SpatialArch {
    fn default() -> Self {
        SpatialArch {
            latent_channels: 8,
            widths: vec![16, 32, 64],
            attention_reduction: 4,
            latent_skip: LATENT_SKIP_DEFAULT,
        }
    }
}

const LATENT_SKIP_DEFAULT: bool = false;

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv2d,
    norm: ChannelNorm,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    conv: Conv2d,
    norm: ChannelNorm,
    attention: ChannelAttention,
    // channels coming up from the deeper level; the rest are skip channels
    up_channels: usize,
}

/// Parameterized layout of the hourglass; holds offsets, not weights.
#[derive(Debug, Clone)]
pub(crate) struct SpatialNet {
    encoder: Vec<Stage>,
    // ordered deep to shallow
    decoder: Vec<DecoderStage>,
    head: Conv2d,
    latent_skip: bool,
    param_len: usize,
}

struct StageCache {
    conv: ConvCache,
    norm: NormCache,
    pre_act: Feature,
}

struct DecoderCache {
    up_h: usize,
    up_w: usize,
    conv: ConvCache,
    norm: NormCache,
    pre_act: Feature,
    activated: Feature,
    attention: AttentionCache,
}

pub(crate) struct SpatialCache {
    encoder: Vec<StageCache>,
    decoder: Vec<DecoderCache>,
    head: ConvCache,
}

impl SpatialNet {
    pub fn new(arch: &SpatialArch) -> Self {
        assert!(!arch.widths.is_empty(), "hourglass needs at least one level");
        let mut layout = Layout::default();
        let mut encoder = Vec::with_capacity(arch.widths.len());
        let mut cin = arch.latent_channels;
        for &w in &arch.widths {
            encoder.push(Stage {
                conv: Conv2d::new(&mut layout, cin, w, 3, 2),
                norm: ChannelNorm::new(&mut layout, w),
            });
            cin = w;
        }
        // skip source at level l is the encoder output of level l (level 0 = latent)
        let mut skip_channels = vec![if arch.latent_skip { arch.latent_channels } else { 0 }];
        skip_channels.extend_from_slice(&arch.widths[..arch.widths.len() - 1]);
        let mut decoder = Vec::with_capacity(arch.widths.len());
        let mut up = *arch.widths.last().unwrap();
        for level in (0..arch.widths.len()).rev() {
            let out = arch.widths[level.saturating_sub(1)];
            decoder.push(DecoderStage {
                conv: Conv2d::new(&mut layout, up + skip_channels[level], out, 3, 1),
                norm: ChannelNorm::new(&mut layout, out),
                attention: ChannelAttention::new(&mut layout, out, arch.attention_reduction),
                up_channels: up,
            });
            up = out;
        }
        let head = Conv2d::new(&mut layout, up, 1, 1, 1);
        SpatialNet {
            encoder,
            decoder,
            head,
            latent_skip: arch.latent_skip,
            param_len: layout.len(),
        }
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for stage in &self.encoder {
            stage.conv.init(params, rng);
            stage.norm.init(params);
        }
        for stage in &self.decoder {
            stage.conv.init(params, rng);
            stage.norm.init(params);
            stage.attention.init(params, rng);
        }
        self.head.init(params, rng);
    }

    pub fn head_ranges(&self) -> [std::ops::Range<usize>; 2] {
        [self.head.weight_range(), self.head.bias_range()]
    }

    pub fn forward(&self, params: &[f64], latent: &Feature) -> (Feature, SpatialCache) {
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        // skips[l] is the feature at level l
        let mut skips = vec![if self.latent_skip {
            latent.clone()
        } else {
            Feature::zeros(0, latent.h, latent.w)
        }];
        let mut x = latent.clone();
        for stage in &self.encoder {
            let (c, conv_cache) = stage.conv.forward(params, &x);
            let (pre_act, norm_cache) = stage.norm.forward(params, &c);
            let out = leaky_forward(&pre_act);
            enc_caches.push(StageCache {
                conv: conv_cache,
                norm: norm_cache,
                pre_act,
            });
            skips.push(out.clone());
            x = out;
        }
        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        for (stage, level) in self.decoder.iter().zip((0..self.encoder.len()).rev()) {
            let skip = &skips[level];
            let (up_h, up_w) = (x.h, x.w);
            let upsampled = upsample_to(&x, skip.h, skip.w);
            let joined = concat(&upsampled, skip);
            let (c, conv_cache) = stage.conv.forward(params, &joined);
            let (pre_act, norm_cache) = stage.norm.forward(params, &c);
            let activated = leaky_forward(&pre_act);
            let (out, att_cache) = stage.attention.forward(params, &activated);
            dec_caches.push(DecoderCache {
                up_h,
                up_w,
                conv: conv_cache,
                norm: norm_cache,
                pre_act,
                activated,
                attention: att_cache,
            });
            x = out;
        }
        let (out, head_cache) = self.head.forward(params, &x);
        let cache = SpatialCache {
            encoder: enc_caches,
            decoder: dec_caches,
            head: head_cache,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients for `d loss / d output` into `grads`.
    pub fn backward(&self, params: &[f64], cache: &SpatialCache, dout: &Feature, grads: &mut [f64]) {
        let mut dx = self.head.backward(params, &cache.head, dout, grads);
        // gradient flowing into the skip source of each level; index 0 (latent) is dropped
        let mut dskips: Vec<Option<Feature>> = vec![None; self.encoder.len() + 1];
        // decoder stages run deep to shallow, so walk them back shallow to deep
        for ((stage, dc), level) in self
            .decoder
            .iter()
            .zip(&cache.decoder)
            .zip((0..self.encoder.len()).rev())
            .rev()
        {
            let dact = stage
                .attention
                .backward(params, &dc.activated, &dc.attention, &dx, grads);
            let dpre = leaky_backward(&dc.pre_act, &dact);
            let dconv = stage.norm.backward(params, &dc.norm, &dpre, grads);
            let djoined = stage.conv.backward(params, &dc.conv, &dconv, grads);
            let (dup, dskip) = split(&djoined, stage.up_channels);
            dskips[level] = Some(dskip);
            dx = upsample_backward(&dup, dc.up_h, dc.up_w);
        }
        // dx now holds the gradient w.r.t. the deepest encoder output
        for (idx, (stage, sc)) in self.encoder.iter().zip(&cache.encoder).enumerate().rev() {
            let level = idx + 1;
            if level < self.encoder.len() {
                if let Some(ds) = dskips[level].take() {
                    for (a, b) in dx.data.iter_mut().zip(&ds.data) {
                        *a += b;
                    }
                }
            }
            let dpre = leaky_backward(&sc.pre_act, &dx);
            let dconv = stage.norm.backward(params, &sc.norm, &dpre, grads);
            dx = stage.conv.backward(params, &sc.conv, &dconv, grads);
        }
    }
}
