//! Normalizing flow over per-timestep residual vectors.
//!
//! A stack of `K` invertible layers maps a residual `z₀ ∈ ℝ^C` to a latent
//! `z_K` scored under a diagonal Gaussian mixture prior; the change of
//! variables adds each layer's log-determinant. Every layer permutes its
//! input first. During training those permutations are drawn fresh; at
//! evaluation the stack averages the log-likelihood over `E` fixed
//! permutation assignments.

mod layer;

pub use layer::{made_masks, FlowKind, FlowLayer, MadeMasks};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{linalg, Graph, ParamStore, RngStream, Tensor, Var};

/// Smallest allowed prior variance.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub layers: usize,
    pub hidden: usize,
    pub s_max: f64,
    pub components: usize,
    pub trainable_prior: bool,
    pub eval_permutations: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            kind: FlowKind::MaskedAutoregressiveAffine,
            layers: 2,
            hidden: 64,
            s_max: 5.0,
            components: 2,
            trainable_prior: false,
            eval_permutations: 4,
        }
    }
}

impl FlowConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden == 0 {
            out.push("flow.hidden must be positive".into());
        }
        if !(self.s_max.is_finite() && self.s_max > 0.0) {
            out.push(format!("flow.s_max must be positive, got {}", self.s_max));
        }
        if self.components == 0 {
            out.push("flow.components must be positive".into());
        }
        if self.eval_permutations == 0 {
            out.push("flow.eval_permutations must be positive".into());
        }
        out
    }
}

/// Diagonal Gaussian mixture with frozen, equal weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior {
    pub channels: usize,
    pub log_weights: Vec<f64>,
    /// `n_c×C`.
    pub means: usize,
    /// `n_c×C` log-variances.
    pub logvars: usize,
    pub trainable: bool,
}

impl GmmPrior {
    /// Means are spread evenly over `[−0.5, 0.5]·𝟙` (a single component sits
    /// at the origin); covariances start at the identity.
    pub fn register(store: &mut ParamStore, channels: usize, components: usize, trainable: bool) -> Self {
        let mut means = Vec::with_capacity(components * channels);
        for m in 0..components {
            let v = if components == 1 {
                0.0
            } else {
                -0.5 + m as f64 / (components - 1) as f64
            };
            means.extend(std::iter::repeat_n(v, channels));
        }
        let shape = [components, channels];
        let means = store.add("flow.prior.means", Tensor::new(shape.to_vec(), means).unwrap(), trainable);
        let logvars = store.add("flow.prior.logvars", Tensor::zeros(&shape), trainable);
        GmmPrior {
            channels,
            log_weights: vec![-(components as f64).ln(); components],
            means,
            logvars,
            trainable,
        }
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_density(&self, store: &ParamStore, z: &[f64]) -> f64 {
        let mut terms = vec![0.0; self.components()];
        linalg::diag_gmm_log_density(
            z,
            store.value(self.means).data(),
            store.value(self.logvars).data(),
            &self.log_weights,
            &mut terms,
        )
    }

    /// Per-component posterior responsibilities of `z`.
    pub fn responsibilities(&self, store: &ParamStore, z: &[f64]) -> Vec<f64> {
        let mut terms = vec![0.0; self.components()];
        let lp = linalg::diag_gmm_log_density(
            z,
            store.value(self.means).data(),
            store.value(self.logvars).data(),
            &self.log_weights,
            &mut terms,
        );
        terms.into_iter().map(|t| (t - lp).exp()).collect()
    }

    pub fn log_density_rows(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let (m, lv) = (g.param(self.means), g.param(self.logvars));
        g.gmm_logpdf_rows(z, m, lv, &self.log_weights)
    }

    /// Raises every variance to at least [`VAR_FLOOR`].
    pub fn project(&self, store: &mut ParamStore) {
        let floor = VAR_FLOOR.ln();
        for v in store.get_mut(self.logvars).value.data_mut() {
            if *v < floor {
                *v = floor;
            }
        }
    }
}

/// `K` flow layers, their evaluation permutations and the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    pub channels: usize,
    pub layers: Vec<FlowLayer>,
    /// `E` assignments, each holding one permutation per layer.
    pub eval_perms: Vec<Vec<Vec<usize>>>,
    pub prior: GmmPrior,
}

impl FlowStack {
    pub fn register(store: &mut ParamStore, seed: u64, channels: usize, cfg: &FlowConfig) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let layers = (0..cfg.layers)
            .map(|k| FlowLayer::register(store, seed, k, cfg.kind, channels, cfg.hidden, cfg.s_max))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = RngStream::new(seed, "flow/eval_perms");
        let eval_perms = (0..cfg.eval_permutations)
            .map(|_| (0..cfg.layers).map(|_| rng.permutation(channels)).collect())
            .collect();
        let prior = GmmPrior::register(store, channels, cfg.components, cfg.trainable_prior);
        Ok(FlowStack {
            channels,
            layers,
            eval_perms,
            prior,
        })
    }

    /// One fresh permutation per layer.
    pub fn sample_perms(&self, rng: &mut RngStream) -> Vec<Vec<usize>> {
        self.layers.iter().map(|_| rng.permutation(self.channels)).collect()
    }

    /// Row-wise `log p(z₀)` (`T×1`) under one permutation assignment.
    pub fn log_likelihood_rows(&self, g: &mut Graph<'_>, z: Var, perms: &[Vec<usize>]) -> Result<Var> {
        if perms.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "{} permutations for {} flow layers",
                perms.len(),
                self.layers.len()
            )));
        }
        let mut z = z;
        let mut logdet: Option<Var> = None;
        for (layer, perm) in self.layers.iter().zip(perms) {
            let (next, ld) = layer.forward(g, z, perm)?;
            z = next;
            logdet = match (logdet, ld) {
                (Some(a), Some(b)) => Some(g.add(a, b)?),
                (a, b) => a.or(b),
            };
        }
        let lp = self.prior.log_density_rows(g, z)?;
        match logdet {
            Some(ld) => g.add(lp, ld),
            None => Ok(lp),
        }
    }

    /// Evaluation estimator: the mean of the row log-likelihoods over the
    /// fixed permutation assignments. With no layers or a single assignment
    /// it is the plain log-likelihood.
    pub fn eval_log_likelihood_rows(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        if self.layers.is_empty() || self.eval_perms.len() == 1 {
            let perms = self.eval_perms.first().cloned().unwrap_or_default();
            return self.log_likelihood_rows(g, z, &perms);
        }
        let mut acc: Option<Var> = None;
        for perms in &self.eval_perms {
            let lp = self.log_likelihood_rows(g, z, perms)?;
            acc = Some(match acc {
                Some(a) => g.add(a, lp)?,
                None => lp,
            });
        }
        let acc = acc.expect("at least one evaluation permutation");
        Ok(g.scale(acc, 1.0 / self.eval_perms.len() as f64))
    }

    /// `−mean_t log p(z_t)` for a `T×C` node and one permutation assignment.
    pub fn nll(&self, g: &mut Graph<'_>, z: Var, perms: &[Vec<usize>]) -> Result<Var> {
        let lp = self.log_likelihood_rows(g, z, perms)?;
        let m = g.mean(lp);
        Ok(g.scale(m, -1.0))
    }

    /// Evaluation log-likelihood of one residual vector.
    pub fn log_likelihood(&self, store: &ParamStore, z0: &[f64]) -> Result<f64> {
        let rows = Tensor::matrix(1, z0.len(), z0.to_vec())?;
        Ok(self.log_likelihood_batch(store, &rows)?[0])
    }

    /// Evaluation log-likelihoods of every row of a `T×C` matrix.
    pub fn log_likelihood_batch(&self, store: &ParamStore, z: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(store);
        let zv = g.constant(z.clone());
        let lp = self.eval_log_likelihood_rows(&mut g, zv)?;
        Ok(g.data(lp).to_vec())
    }

    /// Evaluation NLL of a `T×C` residual matrix.
    pub fn nll_loss(&self, store: &ParamStore, residuals: &Tensor) -> Result<f64> {
        let mut g = Graph::with_params(store);
        let zv = g.constant(residuals.clone());
        let lp = self.eval_log_likelihood_rows(&mut g, zv)?;
        let m = g.mean(lp);
        let nll = g.scale(m, -1.0);
        Ok(g.value(nll).item())
    }

    /// Composes the layers on one vector under the given permutations,
    /// returning the latent and the accumulated log-determinant.
    pub fn forward_vec(&self, store: &ParamStore, z0: &[f64], perms: &[Vec<usize>]) -> Result<(Vec<f64>, f64)> {
        let mut z = z0.to_vec();
        let mut logdet = 0.0;
        for (layer, perm) in self.layers.iter().zip(perms) {
            let (next, ld) = layer.forward_vec(store, &z, perm)?;
            z = next;
            logdet += ld;
        }
        Ok((z, logdet))
    }

    pub fn inverse_vec(&self, store: &ParamStore, z: &[f64], perms: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut z = z.to_vec();
        for (layer, perm) in self.layers.iter().zip(perms).rev() {
            z = layer.inverse_vec(store, &z, perm)?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln_2pi() -> f64 {
        (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn standard_normal_at_origin() {
        let mut store = ParamStore::new();
        let p = GmmPrior::register(&mut store, 2, 1, false);
        assert!((p.log_density(&store, &[0.0, 0.0]) + ln_2pi()).abs() < 1e-12);
        assert!((p.log_density(&store, &[0.0, 0.0]) + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn symmetric_prior_has_equal_responsibilities_at_midpoint() {
        let mut store = ParamStore::new();
        let p = GmmPrior::register(&mut store, 3, 2, false);
        let r = p.responsibilities(&store, &[0.0; 3]);
        assert_eq!(r[0], r[1]);
        assert!((r[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn default_prior_layout() {
        let mut store = ParamStore::new();
        let p = GmmPrior::register(&mut store, 2, 2, false);
        assert_eq!(store.value(p.means).data(), &[-0.5, -0.5, 0.5, 0.5]);
        assert!(!store.get(p.means).requires_grad);
        let w: f64 = p.log_weights.iter().map(|l| l.exp()).sum();
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn variance_floor() {
        let mut store = ParamStore::new();
        let p = GmmPrior::register(&mut store, 2, 2, true);
        store.get_mut(p.logvars).value.data_mut()[1] = -40.0;
        p.project(&mut store);
        assert!(store.value(p.logvars).data().iter().all(|v| v.exp() >= VAR_FLOOR * (1.0 - 1e-12)));
    }

    #[test]
    fn zero_conditioner_is_identity() {
        let mut store = ParamStore::new();
        let l = FlowLayer::register(&mut store, 0, 0, FlowKind::MaskedAutoregressiveAffine, 3, 4, 5.0).unwrap();
        for i in 0..store.len() {
            store.get_mut(i).value.data_mut().fill(0.0);
        }
        let (z1, ld) = l.forward_vec(&store, &[1.0, -2.0, 3.0], &[0, 1, 2]).unwrap();
        assert_eq!(z1, vec![1.0, -2.0, 3.0]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn single_channel_halving() {
        let mut store = ParamStore::new();
        let l = FlowLayer::register(&mut store, 0, 0, FlowKind::MaskedAutoregressiveAffine, 1, 3, 5.0).unwrap();
        for i in 0..store.len() {
            store.get_mut(i).value.data_mut().fill(0.0);
        }
        // α = 5·tanh(b/5) = ln 2
        let b = 5.0 * (2f64.ln() / 5.0).atanh();
        store.get_mut(l.b2).value.data_mut()[1] = b;
        let (z1, ld) = l.forward_vec(&store, &[3.0], &[0]).unwrap();
        assert!((z1[0] - 1.5).abs() < 1e-12);
        assert!((ld + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn coupling_needs_two_channels() {
        let mut store = ParamStore::new();
        assert!(matches!(
            FlowLayer::register(&mut store, 0, 0, FlowKind::AdditiveCoupling, 1, 4, 5.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masks_for_two_channels() {
        let mut rng = RngStream::new(0, "m");
        let m = made_masks(2, 5, &mut rng);
        assert!(m.hidden_degrees.iter().all(|&d| d == 1));
        // input of degree 2 reaches no hidden unit
        assert!(m.m1.row(1).iter().all(|&v| v == 0.0));
        // outputs of degree 1 have no incoming connections
        for j in 0..5 {
            assert_eq!(m.m2.at(j, 0), 0.0);
            assert_eq!(m.m2.at(j, 1), 1.0);
        }
    }

    #[test]
    fn masks_for_one_channel_are_unconditional() {
        let mut rng = RngStream::new(0, "m");
        let m = made_masks(1, 4, &mut rng);
        assert!(m.m2.data().iter().all(|&v| v == 0.0));
    }
}
