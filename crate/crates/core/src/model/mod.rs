//! Depth network: encoder, optional ConvLSTM at the bottleneck, multi-scale
//! disparity decoder, and the pose network used by self-supervision.

mod checkpoint;
mod convlstm;
mod decoder;
mod encoder;
pub mod layers;
mod params;
mod pose;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA};
pub use convlstm::{ConvLstmCell, HiddenState, LstmActivation};
pub use decoder::{decoder_channels, DepthDecoder, NUM_SCALES};
pub use encoder::{resnet_blocks, resnet_channels, FusedEncoder, ResnetEncoder};
pub use params::ParamStore;
pub use pose::PoseNet;

use crate::error::{Error, Result};
use crate::mode::Mode;

pub const INIT_H: &str = "depth.lstm.init_h";
pub const INIT_C: &str = "depth.lstm.init_c";
/// Prefix shared by the learned initial state tensors.
pub const INIT_PREFIX: &str = "depth.lstm.init_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub encoder_depth: usize,
    pub base_width: usize,
    pub pose_encoder_depth: usize,
    pub pose_base_width: usize,
    /// Without recurrence the decoder reads the encoder bottleneck directly.
    pub recurrent: bool,
    pub lstm_activation: LstmActivation,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Optional safetensors file with initial encoder weights.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 192,
            encoder_depth: 18,
            base_width: 64,
            pose_encoder_depth: 18,
            pose_base_width: 64,
            recurrent: true,
            lstm_activation: LstmActivation::Elu,
            min_depth: 0.1,
            max_depth: 100.0,
            pretrained: None,
        }
    }
}

impl ModelConfig {
    /// Reduced network and resolution for CPU-only runs.
    pub fn smoke() -> Self {
        Self {
            width: 160,
            height: 64,
            encoder_depth: 10,
            base_width: 8,
            pose_encoder_depth: 10,
            pose_base_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 32 != 0 || self.height % 32 != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} is not a positive multiple of 32",
                self.width, self.height
            )));
        }
        resnet_blocks(self.encoder_depth)?;
        resnet_blocks(self.pose_encoder_depth)?;
        if self.base_width == 0 || self.pose_base_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::Config(format!(
                "depth range [{}, {}] is invalid",
                self.min_depth, self.max_depth
            )));
        }
        Ok(())
    }

    /// Spatial size of the stride-32 bottleneck.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.height / 32, self.width / 32)
    }

    pub fn bottleneck_channels(&self) -> usize {
        resnet_channels(self.base_width)[4]
    }
}

/// Map sigmoid disparity to depth in `[min_depth, max_depth]`.
pub fn disp_to_depth(disp: &Tensor, min_depth: f64, max_depth: f64) -> Result<Tensor> {
    let min_disp = 1.0 / max_depth;
    let max_disp = 1.0 / min_depth;
    Ok(disp.affine(max_disp - min_disp, min_disp)?.recip()?)
}

/// Encoder outputs: skips at strides 2, 4, 8, 16 and the stride-32 bottleneck.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub skips: Vec<Tensor>,
    pub bottleneck: Tensor,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// Disparities in `(0, 1)`; index `s` at stride `2^s`.
    pub disparities: Vec<Tensor>,
    /// Updated recurrent state, absent for the image-based variant.
    pub state: Option<HiddenState>,
}

enum DepthEncoder {
    Image(ResnetEncoder),
    Fused(FusedEncoder),
}

pub struct DepthModel {
    config: ModelConfig,
    mode: Mode,
    seed: u64,
    store: ParamStore,
    encoder: DepthEncoder,
    lstm: Option<ConvLstmCell>,
    decoder: DepthDecoder,
    pose: Option<PoseNet>,
}

impl DepthModel {
    pub fn new(config: &ModelConfig, mode: Mode, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, DType::F32, device);
        let encoder = if mode.uses_sparse_input() {
            DepthEncoder::Fused(FusedEncoder::new(
                &mut store,
                "depth.encoder",
                config.encoder_depth,
                config.base_width,
            )?)
        } else {
            DepthEncoder::Image(ResnetEncoder::new(
                &mut store,
                "depth.encoder",
                3,
                config.encoder_depth,
                config.base_width,
            )?)
        };
        let enc_ch = resnet_channels(config.base_width);
        let lstm = if config.recurrent {
            let (h, w) = config.bottleneck_size();
            let shape = [1, enc_ch[4], h, w];
            store.constant(INIT_H, &shape, 0.0, true)?;
            store.constant(INIT_C, &shape, 0.0, true)?;
            Some(ConvLstmCell::new(
                &mut store,
                "depth.lstm",
                enc_ch[4],
                config.lstm_activation,
            )?)
        } else {
            None
        };
        let decoder = DepthDecoder::new(
            &mut store,
            "depth.decoder",
            enc_ch,
            decoder_channels(config.base_width),
        )?;
        let pose = if mode.is_self_supervised() {
            Some(PoseNet::new(
                &mut store,
                "pose",
                config.pose_encoder_depth,
                config.pose_base_width,
            )?)
        } else {
            None
        };
        let model = Self {
            config: config.clone(),
            mode,
            seed,
            store,
            encoder,
            lstm,
            decoder,
            pose,
        };
        if let Some(path) = &config.pretrained {
            model.load_encoder_weights(path)?;
        }
        Ok(model)
    }

    fn load_encoder_weights(&self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let all = candle_core::safetensors::load_buffer(&bytes, self.store.device())?;
        let picked: HashMap<String, Tensor> = all
            .into_iter()
            .filter(|(k, _)| k.starts_with("depth.encoder.") && self.store.get(k).is_some())
            .collect();
        if picked.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "no depth.encoder.* tensors matching this architecture".into(),
            });
        }
        self.store.load(&picked, false)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn is_recurrent(&self) -> bool {
        self.lstm.is_some()
    }

    pub fn lstm(&self) -> Option<&ConvLstmCell> {
        self.lstm.as_ref()
    }

    pub fn has_pose_net(&self) -> bool {
        self.pose.is_some()
    }

    fn check_input(&self, image: &Tensor) -> Result<usize> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 || h != self.config.height || w != self.config.width {
            return Err(Error::shape(format!(
                "model expects (B, 3, {}, {}) input, got {:?}",
                self.config.height,
                self.config.width,
                image.dims()
            )));
        }
        Ok(b)
    }

    pub fn encode(&self, image: &Tensor, sparse: Option<(&Tensor, &Tensor)>, train: bool) -> Result<EncoderFeatures> {
        self.check_input(image)?;
        let mut feats = match (&self.encoder, sparse) {
            (DepthEncoder::Image(e), _) => e.forward_t(&encoder::normalize_image(image)?, train)?,
            (DepthEncoder::Fused(e), Some((d, m))) => e.forward_t(image, d, m, train)?,
            (DepthEncoder::Fused(_), None) => {
                return Err(Error::MissingInput {
                    mode: self.mode.as_str(),
                    what: "sparse depth",
                })
            }
        };
        let bottleneck = feats.pop().ok_or_else(|| Error::shape("encoder returned no features"))?;
        Ok(EncoderFeatures {
            skips: feats,
            bottleneck,
        })
    }

    /// Learned initial state broadcast over the batch.
    pub fn initial_state(&self, batch: usize) -> Result<HiddenState> {
        let (Some(h), Some(c)) = (self.store.get(INIT_H), self.store.get(INIT_C)) else {
            return Err(Error::Config("model has no recurrent state".into()));
        };
        let dims = h.dims();
        let shape = (batch, dims[1], dims[2], dims[3]);
        Ok(HiddenState {
            h: h.as_tensor().broadcast_as(shape)?.contiguous()?,
            c: c.as_tensor().broadcast_as(shape)?.contiguous()?,
        })
    }

    pub fn zero_state(&self, batch: usize) -> Result<HiddenState> {
        let (h, w) = self.config.bottleneck_size();
        let shape = (batch, self.config.bottleneck_channels(), h, w);
        let z = Tensor::zeros(shape, self.store.dtype(), self.store.device())?;
        Ok(HiddenState { h: z.clone(), c: z })
    }

    pub fn decode(&self, x: &Tensor, skips: &[Tensor]) -> Result<Vec<Tensor>> {
        self.decoder.forward(x, skips)
    }

    /// One frame through the network. For the recurrent variant a missing
    /// `state` starts from the learned initial state.
    pub fn forward(
        &self,
        image: &Tensor,
        sparse: Option<(&Tensor, &Tensor)>,
        state: Option<&HiddenState>,
        train: bool,
    ) -> Result<FrameOutput> {
        let b = self.check_input(image)?;
        let feats = self.encode(image, sparse, train)?;
        match &self.lstm {
            Some(cell) => {
                let start = match state {
                    Some(s) => s.clone(),
                    None => self.initial_state(b)?,
                };
                let next = cell.step(&feats.bottleneck, &start)?;
                let disparities = self.decode(&next.h, &feats.skips)?;
                Ok(FrameOutput {
                    disparities,
                    state: Some(next),
                })
            }
            None => Ok(FrameOutput {
                disparities: self.decode(&feats.bottleneck, &feats.skips)?,
                state: None,
            }),
        }
    }

    /// Pose from the camera of `first` to the camera of `second`, `(B, 6)`.
    pub fn predict_pose(&self, first: &Tensor, second: &Tensor, train: bool) -> Result<Tensor> {
        match &self.pose {
            Some(p) => p.forward_t(first, second, train),
            None => Err(Error::Config(format!(
                "{} models have no pose network",
                self.mode
            ))),
        }
    }

    pub fn disp_to_depth(&self, disp: &Tensor) -> Result<Tensor> {
        disp_to_depth(disp, self.config.min_depth, self.config.max_depth)
    }
}
