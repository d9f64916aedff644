//! Architecture and run configuration.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{conv_output_size, Normalizer, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResNetVariant {
    /// Post-activation blocks: conv, norm, ReLU, conv, norm, add, ReLU.
    V1,
    /// Pre-activation blocks: norm, ReLU, conv, norm, ReLU, conv, add.
    V2,
}

/// How running statistics are accumulated for inference-mode normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbnInference {
    /// Cumulative average over all training batches seen.
    MovingAverage,
    /// `running ← decay · running + (1 − decay) · batch`.
    ExponentialMovingAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub variant: ResNetVariant,
    /// `(H, W, C)` of the input images.
    pub input_size: (usize, usize, usize),
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 3×3 stride-2 max pool after the stem.
    pub stem_pool: bool,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub cbn_enabled: bool,
    /// 1-based stage indices whose norms are conditional.
    pub cbn_stages: Vec<usize>,
    pub finetune_last_stage: bool,
    /// 1-based stage whose final activation is the conv feature grid.
    pub conv_extraction_stage: usize,
    pub bn_decay: f64,
    pub bn_eps: f64,
    pub cbn_hidden: usize,
    pub cbn_inference: CbnInference,
}

impl ResNetConfig {
    /// Four stages of 256..2048 channels on 224×224 input. Stage strides are
    /// chosen so the third stage yields a 7×7×1024 map and the fourth a
    /// 2048-channel pooled vector.
    pub fn full_v1() -> Self {
        Self {
            variant: ResNetVariant::V1,
            input_size: (224, 224, 3),
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stage_channels: vec![256, 512, 1024, 2048],
            blocks_per_stage: vec![3, 4, 6, 3],
            stage_strides: vec![2, 2, 2, 1],
            cbn_enabled: true,
            cbn_stages: vec![1, 2, 3, 4],
            finetune_last_stage: false,
            conv_extraction_stage: 3,
            bn_decay: 0.99,
            bn_eps: 1e-5,
            cbn_hidden: 512,
            cbn_inference: CbnInference::ExponentialMovingAverage,
        }
    }

    pub fn full_v2() -> Self {
        Self { variant: ResNetVariant::V2, input_size: (299, 299, 3), ..Self::full_v1() }
    }

    /// 8×8 images, channels 8..64, one block per stage.
    pub fn desk() -> Self {
        Self {
            variant: ResNetVariant::V1,
            input_size: (8, 8, 3),
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: false,
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: vec![1, 1, 1, 1],
            stage_strides: vec![1, 2, 2, 2],
            cbn_enabled: true,
            cbn_stages: vec![1, 2, 3, 4],
            finetune_last_stage: false,
            conv_extraction_stage: 3,
            bn_decay: 0.99,
            bn_eps: 1e-5,
            cbn_hidden: 32,
            cbn_inference: CbnInference::ExponentialMovingAverage,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        if n == 0 {
            return Err(Error::Parameter("at least one stage is required".into()));
        }
        if self.blocks_per_stage.len() != n || self.stage_strides.len() != n {
            return Err(Error::Parameter(
                "stage_channels, blocks_per_stage and stage_strides must have equal length".into(),
            ));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("stage_channels must be strictly increasing".into()));
        }
        if self.blocks_per_stage.contains(&0) || self.stage_strides.contains(&0) {
            return Err(Error::Parameter("blocks and strides must be positive".into()));
        }
        if let Some(s) = self.cbn_stages.iter().find(|&&s| s == 0 || s > n) {
            return Err(Error::Parameter(format!("cbn stage {s} is not one of the {n} stages")));
        }
        if self.conv_extraction_stage == 0 || self.conv_extraction_stage > n {
            return Err(Error::Parameter("conv_extraction_stage out of range".into()));
        }
        if !(self.bn_decay > 0.0 && self.bn_decay < 1.0) || !(self.bn_eps > 0.0) {
            return Err(Error::Parameter("decay must be in (0,1) and eps positive".into()));
        }
        if self.input_size.2 == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return Err(Error::Parameter("input channels and stem geometry must be positive".into()));
        }
        self.stage_output_shapes().map(|_| ())
    }

    /// `(H, W, C)` after the stem and after each stage, from stride arithmetic.
    pub fn stage_output_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let bad = || Error::Size("image too small for the configured network".into());
        let (mut h, mut w, _) = self.input_size;
        h = conv_output_size(h, self.stem_kernel, self.stem_stride, Padding::Same).ok_or_else(bad)?;
        w = conv_output_size(w, self.stem_kernel, self.stem_stride, Padding::Same).ok_or_else(bad)?;
        if self.stem_pool {
            h = conv_output_size(h, 3, 2, Padding::Same).ok_or_else(bad)?;
            w = conv_output_size(w, 3, 2, Padding::Same).ok_or_else(bad)?;
        }
        let mut shapes = vec![(h, w, self.stage_channels[0])];
        for (i, &c) in self.stage_channels.iter().enumerate() {
            let s = self.stage_strides[i];
            h = conv_output_size(h, 3, s, Padding::Same).ok_or_else(bad)?;
            w = conv_output_size(w, 3, s, Padding::Same).ok_or_else(bad)?;
            shapes.push((h, w, c));
        }
        Ok(shapes)
    }

    pub fn pool5_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated config has stages")
    }

    /// `(L, d_loc)` of the conv feature grid.
    pub fn grid_shape(&self) -> Result<(usize, usize)> {
        let shapes = self.stage_output_shapes()?;
        let (h, w, c) = shapes[self.conv_extraction_stage];
        Ok((h * w, c))
    }

    pub fn stage_uses_cbn(&self, stage: usize) -> bool {
        self.cbn_enabled && self.cbn_stages.contains(&stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualMode {
    /// No image input at all (image-blind ablation).
    TextOnly,
    /// Global max-pooled vector gates every annotation.
    Pool5,
    /// Decoder-side soft attention over the conv grid.
    Conv,
    /// Encoder-side attention: each annotation queries the conv grid.
    EncoderAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// `h_i ⊙ tanh(W_pool · V_i)`
    Gate,
    /// `tanh(W_fuse · [h_i ; V_i] + b)`
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LnPlacement {
    None,
    /// Normalize the combined pre-activation of each gate and the candidate.
    Gates,
}

/// Keep probabilities (1.0 disables the corresponding dropout).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    pub gru_in: f64,
    pub gru_out: f64,
    pub cgru_in: f64,
    pub cgru_out: f64,
    pub softmax_out: f64,
}

impl DropoutConfig {
    pub fn standard() -> Self {
        Self { gru_in: 0.7, gru_out: 0.5, cgru_in: 1.0, cgru_out: 1.0, softmax_out: 0.5 }
    }

    pub fn none() -> Self {
        Self { gru_in: 1.0, gru_out: 1.0, cgru_in: 1.0, cgru_out: 1.0, softmax_out: 1.0 }
    }

    pub fn is_disabled(&self) -> bool {
        *self == Self::none()
    }

    fn validate(&self) -> Result<()> {
        for p in [self.gru_in, self.gru_out, self.cgru_in, self.cgru_out, self.softmax_out] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Parameter(format!("keep probability {p} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    pub gru_dim: usize,
    pub att_dim: usize,
    /// Size of the pooled conditioning vector fed to the CBN predictors.
    pub q_dim: usize,
    pub layer_norm: LnPlacement,
    pub ln_eps: f64,
    pub stop_gradient_q: bool,
    pub attention_normalizer: Normalizer,
    pub visual: VisualMode,
    pub fusion: Fusion,
    /// Re-gate the text annotations with the attended visual vector at every
    /// decoding step instead of feeding it to the output layer.
    pub conv_remodulate: bool,
    pub resnet: ResNetConfig,
    pub dropout: DropoutConfig,
    pub max_len_factor: usize,
    pub length_penalty: f64,
    pub beam: usize,
    pub max_sentence_len: usize,
}

impl ModelConfig {
    pub fn full(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            emb_dim: 128,
            gru_dim: 256,
            att_dim: 256,
            q_dim: 256,
            layer_norm: LnPlacement::Gates,
            ln_eps: 1e-5,
            stop_gradient_q: false,
            attention_normalizer: Normalizer::Softmax,
            visual: VisualMode::Pool5,
            fusion: Fusion::Gate,
            conv_remodulate: false,
            resnet: ResNetConfig::full_v1(),
            dropout: DropoutConfig::standard(),
            max_len_factor: 3,
            length_penalty: 0.0,
            beam: 12,
            max_sentence_len: 100,
        }
    }

    /// Desk-scale defaults: 20-unit GRUs, 8×8 images, dropout off.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            emb_dim: 16,
            gru_dim: 20,
            att_dim: 16,
            q_dim: 16,
            resnet: ResNetConfig::desk(),
            dropout: DropoutConfig::none(),
            beam: 4,
            ..Self::full(src_vocab, tgt_vocab)
        }
    }

    /// Very small dimensions for finite-difference checks.
    pub fn tiny(src_vocab: usize, tgt_vocab: usize) -> Self {
        let mut resnet = ResNetConfig::desk();
        resnet.stage_channels = vec![2, 3, 4, 5];
        resnet.cbn_hidden = 4;
        Self {
            emb_dim: 4,
            gru_dim: 3,
            att_dim: 3,
            q_dim: 3,
            resnet,
            dropout: DropoutConfig::none(),
            beam: 2,
            ..Self::full(src_vocab, tgt_vocab)
        }
    }

    pub fn annotation_dim(&self) -> usize {
        2 * self.gru_dim
    }

    pub fn uses_images(&self) -> bool {
        self.visual != VisualMode::TextOnly
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.src_vocab, self.tgt_vocab, self.emb_dim, self.gru_dim, self.att_dim, self.q_dim];
        if dims.contains(&0) {
            return Err(Error::Parameter("all model dimensions must be positive".into()));
        }
        if self.src_vocab <= 4 || self.tgt_vocab <= 4 {
            return Err(Error::Parameter("vocabularies must hold more than the 4 reserved ids".into()));
        }
        if self.layer_norm == LnPlacement::Gates && self.gru_dim < 2 {
            return Err(Error::Parameter("layer normalization needs gru_dim >= 2".into()));
        }
        if self.beam == 0 {
            return Err(Error::Parameter("beam must be at least 1".into()));
        }
        self.dropout.validate()?;
        if self.uses_images() {
            self.resnet.validate()?;
        }
        Ok(())
    }
}

/// Which 1-based stages receive conditional normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbnStages {
    All,
    From2,
    From3,
}

impl CbnStages {
    pub fn stages(self, n: usize) -> Vec<usize> {
        let first = match self {
            CbnStages::All => 1,
            CbnStages::From2 => 2,
            CbnStages::From3 => 3,
        };
        (first..=n).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            CbnStages::All => "all",
            CbnStages::From2 => "2-4",
            CbnStages::From3 => "3-4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CbnStages::All),
            "2-4" => Ok(CbnStages::From2),
            "3-4" => Ok(CbnStages::From3),
            _ => Err(Error::Parameter(format!("unknown CBN stage selection '{s}' (all, 2-4, 3-4)"))),
        }
    }
}

/// Model variants compared in the experiments, plus an image-blind ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunVariant {
    TextOnly,
    BaselinePool5,
    CbnConv,
    CbnPool5,
    CbnPool5V2,
    CbnPool5Finetune,
    CbnEncAtt,
}

impl RunVariant {
    pub const ALL: [RunVariant; 7] = [
        RunVariant::TextOnly,
        RunVariant::BaselinePool5,
        RunVariant::CbnConv,
        RunVariant::CbnPool5,
        RunVariant::CbnPool5V2,
        RunVariant::CbnPool5Finetune,
        RunVariant::CbnEncAtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunVariant::TextOnly => "text_only",
            RunVariant::BaselinePool5 => "baseline_pool5_frozen_pretrainless",
            RunVariant::CbnConv => "cbn_conv",
            RunVariant::CbnPool5 => "cbn_pool5",
            RunVariant::CbnPool5V2 => "cbn_pool5_v2",
            RunVariant::CbnPool5Finetune => "cbn_pool5_finetune",
            RunVariant::CbnEncAtt => "cbn_enc_att",
        }
    }

    /// Row label in the results table.
    pub fn label(self) -> &'static str {
        match self {
            RunVariant::TextOnly => "Text only (image-blind)",
            RunVariant::BaselinePool5 => "Frozen Pool5 (no CBN)",
            RunVariant::CbnConv => "RN v1 CBN Conv",
            RunVariant::CbnPool5 => "RN v1 CBN Pool5",
            RunVariant::CbnPool5V2 => "RN v2 CBN Pool5",
            RunVariant::CbnPool5Finetune => "RN v1 CBN FT Pool5",
            RunVariant::CbnEncAtt => "RN v1 CBN enc-att",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::Parameter(format!("unknown variant '{s}'; valid names: {}", names.join(", ")))
        })
    }

    pub fn valid_names() -> String {
        let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
        names.join(", ")
    }

    /// Sets the wiring fields of `cfg` for this variant.
    pub fn configure(self, cfg: &mut ModelConfig, stages: CbnStages) {
        let r = &mut cfg.resnet;
        r.variant = ResNetVariant::V1;
        r.cbn_enabled = true;
        r.finetune_last_stage = false;
        r.cbn_stages = stages.stages(r.num_stages());
        cfg.visual = match self {
            RunVariant::TextOnly => VisualMode::TextOnly,
            RunVariant::CbnConv => VisualMode::Conv,
            RunVariant::CbnEncAtt => VisualMode::EncoderAttention,
            _ => VisualMode::Pool5,
        };
        match self {
            RunVariant::TextOnly | RunVariant::BaselinePool5 => r.cbn_enabled = false,
            RunVariant::CbnPool5V2 => r.variant = ResNetVariant::V2,
            RunVariant::CbnPool5Finetune => r.finetune_last_stage = true,
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_feature_shapes() {
        let r = ResNetConfig::full_v1();
        r.validate().unwrap();
        assert_eq!(r.pool5_dim(), 2048);
        assert_eq!(r.grid_shape().unwrap(), (49, 1024));
    }

    #[test]
    fn desk_scale_32px_shapes() {
        let mut r = ResNetConfig::desk();
        r.input_size = (32, 32, 3);
        r.stage_channels = vec![16, 32, 64, 128];
        let shapes = r.stage_output_shapes().unwrap();
        // stem keeps 32, then strides 1,2,2,2
        assert_eq!(shapes, vec![(32, 32, 16), (32, 32, 16), (16, 16, 32), (8, 8, 64), (4, 4, 128)]);
        assert_eq!(r.grid_shape().unwrap(), (64, 64));
        assert_eq!(r.pool5_dim(), 128);
    }

    #[test]
    fn rejects_bad_resnet_configs() {
        let mut r = ResNetConfig::desk();
        r.stage_channels = vec![8, 8, 32, 64];
        assert!(r.validate().is_err());
        let mut r = ResNetConfig::desk();
        r.cbn_stages = vec![5];
        assert!(r.validate().is_err());
        let mut r = ResNetConfig::desk();
        r.bn_decay = 1.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in RunVariant::ALL {
            assert_eq!(RunVariant::parse(v.name()).unwrap(), v);
        }
        let err = RunVariant::parse("nope").unwrap_err();
        assert!(format!("{err}").contains("cbn_pool5"));
    }

    #[test]
    fn stage_selection() {
        assert_eq!(CbnStages::From3.stages(4), vec![3, 4]);
        assert_eq!(CbnStages::parse("2-4").unwrap(), CbnStages::From2);
    }
}
