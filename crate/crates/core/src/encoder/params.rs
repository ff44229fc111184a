use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::EncoderError;

pub const INIT_STDDEV: f64 = 0.02;

/// Role of a parameter tensor; one kind may occur once per layer.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    TokenEmbedding,
    PositionEmbedding,
    SegmentEmbedding,
    EmbeddingNormScale,
    EmbeddingNormShift,
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    AttentionOutWeight,
    AttentionOutBias,
    AttentionNormScale,
    AttentionNormShift,
    FfnInWeight,
    FfnInBias,
    FfnOutWeight,
    FfnOutBias,
    FfnNormScale,
    FfnNormShift,
    PoolerWeight,
    PoolerBias,
    ClassifierWeight,
    ClassifierBias,
    MlmTransformWeight,
    MlmTransformBias,
    MlmNormScale,
    MlmNormShift,
    MlmDecoderWeight,
    MlmDecoderBias,
}

impl TensorKind {
    pub fn is_norm_scale(self) -> bool {
        matches!(
            self,
            Self::EmbeddingNormScale | Self::AttentionNormScale | Self::FfnNormScale | Self::MlmNormScale
        )
    }

    pub fn is_bias_like(self) -> bool {
        matches!(
            self,
            Self::EmbeddingNormShift
                | Self::QueryBias
                | Self::KeyBias
                | Self::ValueBias
                | Self::AttentionOutBias
                | Self::AttentionNormShift
                | Self::FfnInBias
                | Self::FfnOutBias
                | Self::FfnNormShift
                | Self::PoolerBias
                | Self::ClassifierBias
                | Self::MlmTransformBias
                | Self::MlmNormShift
                | Self::MlmDecoderBias
        )
    }

    /// Decoupled weight decay skips biases and layer-norm parameters.
    pub fn decays(self) -> bool {
        !self.is_bias_like() && !self.is_norm_scale()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub kind: TensorKind,
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub query_w: usize,
    pub query_b: usize,
    pub key_w: usize,
    pub key_b: usize,
    pub value_w: usize,
    pub value_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub attn_norm_g: usize,
    pub attn_norm_b: usize,
    pub ffn_in_w: usize,
    pub ffn_in_b: usize,
    pub ffn_out_w: usize,
    pub ffn_out_b: usize,
    pub ffn_norm_g: usize,
    pub ffn_norm_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct MlmSlots {
    pub transform_w: usize,
    pub transform_b: usize,
    pub norm_g: usize,
    pub norm_b: usize,
    pub decoder_w: usize,
    pub decoder_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Slots {
    pub token: usize,
    pub position: usize,
    pub segment: usize,
    pub emb_norm_g: usize,
    pub emb_norm_b: usize,
    pub layers: Vec<LayerSlots>,
    pub pooler_w: usize,
    pub pooler_b: usize,
    pub classifier_w: usize,
    pub classifier_b: usize,
    pub mlm: Option<MlmSlots>,
}

/// Ordered tensor table of a configuration. Vectors are stored as 1×n.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
    pub(crate) slots: Slots,
}

struct Builder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, kind: TensorKind, layer: Option<usize>, rows: usize, cols: usize) -> usize {
        self.specs.push(TensorSpec {
            name,
            kind,
            layer,
            rows,
            cols,
            offset: self.total,
        });
        self.total += rows * cols;
        self.specs.len() - 1
    }
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        use TensorKind::*;
        let (h, f) = (cfg.hidden_size, cfg.ffn_size);
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let token = b.add("embeddings.token".into(), TokenEmbedding, None, cfg.vocab_size, h);
        let position = b.add("embeddings.position".into(), PositionEmbedding, None, cfg.max_len, h);
        let segment = b.add("embeddings.segment".into(), SegmentEmbedding, None, 2, h);
        let emb_norm_g = b.add("embeddings.norm.scale".into(), EmbeddingNormScale, None, 1, h);
        let emb_norm_b = b.add("embeddings.norm.shift".into(), EmbeddingNormShift, None, 1, h);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let mut add =
                    |name: &str, kind, rows, cols| b.add(format!("layer.{l}.{name}"), kind, Some(l), rows, cols);
                LayerSlots {
                    query_w: add("attention.query.weight", QueryWeight, h, h),
                    query_b: add("attention.query.bias", QueryBias, 1, h),
                    key_w: add("attention.key.weight", KeyWeight, h, h),
                    key_b: add("attention.key.bias", KeyBias, 1, h),
                    value_w: add("attention.value.weight", ValueWeight, h, h),
                    value_b: add("attention.value.bias", ValueBias, 1, h),
                    out_w: add("attention.output.weight", AttentionOutWeight, h, h),
                    out_b: add("attention.output.bias", AttentionOutBias, 1, h),
                    attn_norm_g: add("attention.norm.scale", AttentionNormScale, 1, h),
                    attn_norm_b: add("attention.norm.shift", AttentionNormShift, 1, h),
                    ffn_in_w: add("ffn.in.weight", FfnInWeight, h, f),
                    ffn_in_b: add("ffn.in.bias", FfnInBias, 1, f),
                    ffn_out_w: add("ffn.out.weight", FfnOutWeight, f, h),
                    ffn_out_b: add("ffn.out.bias", FfnOutBias, 1, h),
                    ffn_norm_g: add("ffn.norm.scale", FfnNormScale, 1, h),
                    ffn_norm_b: add("ffn.norm.shift", FfnNormShift, 1, h),
                }
            })
            .collect();
        let pooler_w = b.add("pooler.weight".into(), PoolerWeight, None, h, h);
        let pooler_b = b.add("pooler.bias".into(), PoolerBias, None, 1, h);
        let classifier_w = b.add("classifier.weight".into(), ClassifierWeight, None, h, cfg.num_classes);
        let classifier_b = b.add("classifier.bias".into(), ClassifierBias, None, 1, cfg.num_classes);
        let mlm = cfg.mlm_head.then(|| MlmSlots {
            transform_w: b.add("mlm.transform.weight".into(), MlmTransformWeight, None, h, h),
            transform_b: b.add("mlm.transform.bias".into(), MlmTransformBias, None, 1, h),
            norm_g: b.add("mlm.norm.scale".into(), MlmNormScale, None, 1, h),
            norm_b: b.add("mlm.norm.shift".into(), MlmNormShift, None, 1, h),
            decoder_w: b.add("mlm.decoder.weight".into(), MlmDecoderWeight, None, h, cfg.vocab_size),
            decoder_b: b.add("mlm.decoder.bias".into(), MlmDecoderBias, None, 1, cfg.vocab_size),
        });
        Layout {
            specs: b.specs,
            total: b.total,
            slots: Slots {
                token,
                position,
                segment,
                emb_norm_g,
                emb_norm_b,
                layers,
                pooler_w,
                pooler_b,
                classifier_w,
                classifier_b,
                mlm,
            },
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spec(&self, slot: usize) -> &TensorSpec {
        &self.specs[slot]
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub(crate) fn view<'a>(&self, data: &'a [f64], slot: usize) -> ArrayView2<'a, f64> {
        let s = &self.specs[slot];
        ArrayView2::from_shape((s.rows, s.cols), &data[s.range()]).expect("layout shape")
    }

    pub(crate) fn view1<'a>(&self, data: &'a [f64], slot: usize) -> ArrayView1<'a, f64> {
        let s = &self.specs[slot];
        ArrayView1::from(&data[s.range()])
    }

    pub(crate) fn view_mut<'a>(&self, data: &'a mut [f64], slot: usize) -> ArrayViewMut2<'a, f64> {
        let s = &self.specs[slot];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[s.range()]).expect("layout shape")
    }

    pub(crate) fn view1_mut<'a>(&self, data: &'a mut [f64], slot: usize) -> ArrayViewMut1<'a, f64> {
        let s = &self.specs[slot];
        ArrayViewMut1::from(&mut data[s.range()])
    }
}

/// Configuration plus every weight, in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl EncoderModel {
    /// Normal(0, 0.02) matrices and embeddings, zero biases, unit layer-norm
    /// scales; bit-reproducible from `config.seed`.
    pub fn init(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STDDEV).expect("valid stddev");
        for spec in layout.specs() {
            let dst = &mut params[spec.range()];
            if spec.kind.is_norm_scale() {
                dst.fill(1.0);
            } else if !spec.kind.is_bias_like() {
                for x in dst.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: Vec<f64>) -> Result<Self, EncoderError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(EncoderError::Format(format!(
                "expected {} parameters, found {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.params[s.range()])
    }

    pub(crate) fn m(&self, slot: usize) -> ArrayView2<'_, f64> {
        self.layout.view(&self.params, slot)
    }

    pub(crate) fn v(&self, slot: usize) -> ArrayView1<'_, f64> {
        self.layout.view1(&self.params, slot)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }
}
