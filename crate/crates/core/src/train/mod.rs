//! Loss composition, the optimisation loop and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_with, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use serde::{Deserialize, Serialize};

use crate::data::{Split, WindowSet};
use crate::dbr::reconstruction_loss;
use crate::error::{Error, Result};
use crate::model::{DbrAfModel, ModelConfig};
use crate::numkit::{adam_step, AdamState, Grads, Graph, RngState, RngStream, Tensor, Var};

/// Ablation switches. Each one removes or rewires exactly one component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop the temporal branch.
    pub channel_only: bool,
    /// Drop the channel branch.
    pub temporal_only: bool,
    pub no_cosine: bool,
    /// Fit the flow to the raw window instead of the residual.
    pub flow_on_raw_input: bool,
    /// Let the NLL gradient reach the reconstruction branches.
    pub no_detach: bool,
    /// Keep the channel order fixed inside the flow.
    pub no_shuffle: bool,
    /// Plain reconstruction baseline: temporal branch, squared error only.
    pub disable_dbr: bool,
    /// No flow; score with the mean squared error.
    pub disable_af: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 8] = [
        "channel_only",
        "temporal_only",
        "no_cosine",
        "flow_on_raw_input",
        "no_detach",
        "no_shuffle",
        "disable_dbr",
        "disable_af",
    ];

    pub fn set(&mut self, flag: &str) -> Result<()> {
        let slot = match flag {
            "channel_only" => &mut self.channel_only,
            "temporal_only" => &mut self.temporal_only,
            "no_cosine" => &mut self.no_cosine,
            "flow_on_raw_input" => &mut self.flow_on_raw_input,
            "no_detach" => &mut self.no_detach,
            "no_shuffle" => &mut self.no_shuffle,
            "disable_dbr" => &mut self.disable_dbr,
            "disable_af" => &mut self.disable_af,
            other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
        };
        *slot = true;
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let on = [
            self.channel_only,
            self.temporal_only,
            self.no_cosine,
            self.flow_on_raw_input,
            self.no_detach,
            self.no_shuffle,
            self.disable_dbr,
            self.disable_af,
        ];
        Self::FLAGS.iter().zip(on).filter(|(_, b)| *b).map(|(f, _)| *f).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the cosine term in the reconstruction loss.
    pub lambda: f64,
    /// Weight of the NLL term.
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            beta: 1.0,
            batch_size: 256,
            lr: 1e-4,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            ablation: Ablation::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            out.push(format!("lambda must be a finite value ≥ 0, got {}", self.lambda));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            out.push(format!("beta must be a finite value ≥ 0, got {}", self.beta));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            out.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.patience == 0 {
            out.push("patience must be at least 1".into());
        }
        let a = &self.ablation;
        if a.channel_only && a.temporal_only {
            out.push("channel_only and temporal_only are mutually exclusive".into());
        }
        if a.channel_only && a.disable_dbr {
            out.push("channel_only conflicts with disable_dbr, which keeps only the temporal branch".into());
        }
        if a.disable_af && (a.flow_on_raw_input || a.no_detach || a.no_shuffle) {
            out.push("flow_on_raw_input, no_detach and no_shuffle need the flow; drop disable_af".into());
        }
        out.extend(self.model.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// The cosine weight actually used by the reconstruction loss.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_cosine || self.ablation.disable_dbr {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Graph nodes of one window's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub nll: Option<Var>,
}

/// Scalar values of one window's loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub nll: f64,
}

/// `L = L_rec + β·L_nll` for one window. `perms` holds one channel
/// permutation per flow layer.
pub fn total_loss(
    g: &mut Graph<'_>,
    model: &DbrAfModel,
    cfg: &TrainConfig,
    x: Var,
    perms: &[Vec<usize>],
) -> Result<LossVars> {
    let out = model.reconstruct(g, x)?;
    let rec = reconstruction_loss(g, x, out.recon, cfg.effective_lambda())?;
    let Some(flow) = &model.flow else {
        return Ok(LossVars { total: rec, rec, nll: None });
    };
    let a = &cfg.ablation;
    let input = if a.flow_on_raw_input {
        x
    } else if a.no_detach {
        g.sub(x, out.recon)?
    } else {
        out.residual
    };
    let nll = flow.nll(g, input, perms)?;
    let weighted = g.scale(nll, cfg.beta);
    let total = g.add(rec, weighted)?;
    Ok(LossVars {
        total,
        rec,
        nll: Some(nll),
    })
}

impl LossVars {
    pub fn values(&self, g: &Graph<'_>) -> LossParts {
        LossParts {
            total: g.value(self.total).item(),
            rec: g.value(self.rec).item(),
            nll: self.nll.map_or(0.0, |v| g.value(v).item()),
        }
    }
}

/// Loss values of one window without building gradients.
pub fn loss_parts(model: &DbrAfModel, cfg: &TrainConfig, x: &Tensor, perms: &[Vec<usize>]) -> Result<LossParts> {
    let mut g = Graph::with_params(&model.params);
    let xv = g.constant(x.clone());
    Ok(total_loss(&mut g, model, cfg, xv, perms)?.values(&g))
}

/// Patience-based early stopping on a monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's value; returns `true` when it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if self.best.is_none_or(|b| value < b) {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's training windows.
    pub loss: f64,
    pub rec: f64,
    pub nll: f64,
    pub valid_rec: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: DbrAfModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_valid: Option<f64>,
    pub epochs_run: usize,
    pub rng: Vec<RngState>,
}

/// Mean validation reconstruction loss.
pub fn validation_rec(model: &DbrAfModel, cfg: &TrainConfig, windows: &WindowSet) -> Result<f64> {
    let lambda = cfg.effective_lambda();
    let mut sum = 0.0;
    let mut n = 0;
    for w in windows.of(Split::Valid) {
        let mut g = Graph::with_params(&model.params);
        let x = g.constant(w.values.clone());
        let out = model.reconstruct(&mut g, x)?;
        let l = reconstruction_loss(&mut g, x, out.recon, lambda)?;
        sum += g.value(l).item();
        n += 1;
    }
    Ok(sum / n as f64)
}

pub fn fit(windows: &WindowSet, cfg: &TrainConfig) -> Result<Trained> {
    fit_with(windows, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(windows: &WindowSet, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Trained> {
    cfg.validate()?;
    let train: Vec<&Tensor> = windows.of(Split::Train).map(|w| &w.values).collect();
    if train.is_empty() || windows.count(Split::Valid) == 0 {
        return Err(Error::Config(format!(
            "training needs at least one train and one validation window, got {} and {}",
            train.len(),
            windows.count(Split::Valid)
        )));
    }
    let mut model = DbrAfModel::new(cfg, windows.channels())?;
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut grads = Grads::zeros_like(&model.params);
    let mut order_rng = RngStream::new(cfg.seed, "train/order");
    let mut perm_rng = RngStream::new(cfg.seed, "train/perm");
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = None;
    let mut history = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let mut sums = [0.0; 3];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let perms = match &model.flow {
                    Some(f) if model.layout.shuffle => f.sample_perms(&mut perm_rng),
                    _ => model.identity_perms(),
                };
                let mut g = Graph::with_params(&model.params);
                let x = g.constant(train[i].clone());
                let loss = total_loss(&mut g, &model, cfg, x, &perms)?;
                let parts = loss.values(&g);
                if !parts.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}, batch {}: loss is {} (L_rec {}, L_nll {})",
                        b + 1,
                        parts.total,
                        parts.rec,
                        parts.nll
                    )));
                }
                sums[0] += parts.total;
                sums[1] += parts.rec;
                sums[2] += parts.nll;
                g.backward_into(loss.total, scale, &mut grads)?;
            }
            adam_step(&mut model.params, &grads, &mut adam).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                other => other,
            })?;
            if let Some(f) = &model.flow {
                if f.prior.trainable {
                    f.prior.project(&mut model.params);
                }
            }
        }
        let n = train.len() as f64;
        let valid_rec = validation_rec(&model, cfg, windows)?;
        if !valid_rec.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: validation loss is {valid_rec}")));
        }
        let rec = EpochRecord {
            epoch,
            loss: sums[0] / n,
            rec: sums[1] / n,
            nll: sums[2] / n,
            valid_rec,
        };
        on_epoch(&rec);
        history.push(rec);
        epochs_run = epoch;
        if stopper.observe(epoch, valid_rec) {
            best_params = Some(model.params.clone());
        }
        if stopper.should_stop() {
            break;
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(Trained {
        model,
        history,
        best_epoch: stopper.best_epoch,
        best_valid: stopper.best,
        epochs_run,
        rng: vec![order_rng.state(), perm_rng.state()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience_bad_epochs() {
        let mut s = EarlyStopping::new(5);
        let mut stopped_at = None;
        for epoch in 1..=20 {
            s.observe(epoch, epoch as f64);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn improvement_resets_counter() {
        let mut s = EarlyStopping::new(2);
        s.observe(1, 1.0);
        s.observe(2, 1.0);
        assert_eq!(s.bad_epochs, 1);
        assert!(s.observe(3, 0.5));
        assert_eq!(s.bad_epochs, 0);
        s.observe(4, 0.5);
        assert!(!s.should_stop());
        s.observe(5, 0.7);
        assert!(s.should_stop());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.ablation.channel_only = true;
        c.ablation.temporal_only = true;
        c.patience = 0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("mutually exclusive"), "{msg}");
        assert!(msg.contains("patience"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "bogus": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"lr": 0.1, "ablation": {"no_cosine": true}}"#).unwrap();
        assert_eq!(c.lr, 0.1);
        assert!(c.ablation.no_cosine);
        assert_eq!(c.batch_size, 256);
    }

    #[test]
    fn ablation_flags_by_name() {
        let mut a = Ablation::default();
        for f in Ablation::FLAGS {
            a.set(f).unwrap();
        }
        assert_eq!(a.active().len(), 8);
        assert!(a.set("nope").is_err());
    }
}
