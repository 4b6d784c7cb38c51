//! The assembled detector: reconstruction branches plus the residual flow.

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_WINDOW;
use crate::dbr::{self, ChannelBranchParams, DbrOutput, TemporalBranchParams};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowStack};
use crate::numkit::{Graph, ParamStore, Tensor, Var};
use crate::train::{Ablation, TrainConfig};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window: usize,
    pub d_enc: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub channel_layers: usize,
    pub channel_heads: usize,
    pub memory_size: usize,
    pub flow: FlowConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: DEFAULT_WINDOW,
            d_enc: 512,
            temporal_layers: 3,
            temporal_heads: 8,
            channel_layers: 3,
            channel_heads: 4,
            memory_size: 100,
            flow: FlowConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.window == 0 {
            out.push("model.window must be positive".into());
        }
        if self.d_enc == 0 {
            out.push("model.d_enc must be positive".into());
        }
        if self.temporal_heads == 0 || self.d_enc % self.temporal_heads != 0 {
            out.push(format!(
                "model.d_enc ({}) must be divisible by model.temporal_heads ({})",
                self.d_enc, self.temporal_heads
            ));
        }
        if self.channel_heads == 0 || self.window % self.channel_heads != 0 {
            out.push(format!(
                "model.window ({}) must be divisible by model.channel_heads ({})",
                self.window, self.channel_heads
            ));
        }
        if self.memory_size == 0 {
            out.push("model.memory_size must be positive".into());
        }
        out.extend(self.flow.problems().into_iter().map(|p| format!("model.{p}")));
        out
    }
}

/// Which parts of the model exist and how the flow is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub temporal: bool,
    pub channel: bool,
    pub flow: bool,
    pub cosine: bool,
    pub shuffle: bool,
    /// The flow models the raw window rather than the residual.
    pub flow_on_input: bool,
}

impl Layout {
    pub fn from_ablation(a: &Ablation) -> Self {
        Layout {
            temporal: !a.channel_only,
            channel: !a.temporal_only && !a.disable_dbr,
            flow: !a.disable_af,
            cosine: !a.no_cosine && !a.disable_dbr,
            shuffle: !a.no_shuffle,
            flow_on_input: a.flow_on_raw_input,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DbrAfModel {
    pub config: ModelConfig,
    pub channels: usize,
    pub layout: Layout,
    pub params: ParamStore,
    pub temporal: Option<TemporalBranchParams>,
    pub channel: Option<ChannelBranchParams>,
    pub flow: Option<FlowStack>,
}

impl DbrAfModel {
    /// Builds and initialises a model for `channels` input channels. All
    /// random draws come from `cfg.seed`.
    pub fn new(cfg: &TrainConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 {
            return Err(Error::Config("model needs at least one channel".into()));
        }
        let m = &cfg.model;
        let layout = Layout::from_ablation(&cfg.ablation);
        let mut params = ParamStore::new();
        let temporal = layout
            .temporal
            .then(|| {
                TemporalBranchParams::register(
                    &mut params,
                    cfg.seed,
                    m.window,
                    channels,
                    m.d_enc,
                    m.temporal_layers,
                    m.temporal_heads,
                )
            })
            .transpose()?;
        let channel = layout
            .channel
            .then(|| {
                ChannelBranchParams::register(
                    &mut params,
                    cfg.seed,
                    m.window,
                    m.memory_size,
                    m.channel_layers,
                    m.channel_heads,
                )
            })
            .transpose()?;
        let flow = layout
            .flow
            .then(|| -> Result<FlowStack> {
                let mut stack = FlowStack::register(&mut params, cfg.seed, channels, &m.flow)?;
                if !layout.shuffle {
                    let ident: Vec<usize> = (0..channels).collect();
                    stack.eval_perms = vec![vec![ident; stack.layers.len()]];
                }
                Ok(stack)
            })
            .transpose()?;
        Ok(DbrAfModel {
            config: m.clone(),
            channels,
            layout,
            params,
            temporal,
            channel,
            flow,
        })
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    pub fn reconstruct(&self, g: &mut Graph<'_>, x: Var) -> Result<DbrOutput> {
        let (t, c) = (g.value(x).rows(), g.value(x).cols());
        if c != self.channels || t != self.config.window {
            return Err(Error::Dimension(format!(
                "window is {t}×{c}, model expects {}×{}",
                self.config.window, self.channels
            )));
        }
        dbr::reconstruct(g, x, self.temporal.as_ref(), self.channel.as_ref())
    }

    /// Forward-only reconstruction of one window.
    pub fn reconstruct_window(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let xv = g.constant(x.clone());
        let out = self.reconstruct(&mut g, xv)?;
        Ok(g.value(out.recon).clone())
    }

    /// Identity permutations for every flow layer.
    pub fn identity_perms(&self) -> Vec<Vec<usize>> {
        let n = self.flow.as_ref().map_or(0, |f| f.layers.len());
        vec![(0..self.channels).collect(); n]
    }
}
