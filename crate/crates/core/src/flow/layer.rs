use serde::{Deserialize, Serialize};

use crate::dbr::init_normal;
use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamStore, RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    #[default]
    MaskedAutoregressiveAffine,
    /// NICE-style: shifts only, unit Jacobian.
    AdditiveCoupling,
    /// RealNVP-style: scale and shift.
    AffineCoupling,
}

impl FlowKind {
    pub fn is_coupling(self) -> bool {
        !matches!(self, FlowKind::MaskedAutoregressiveAffine)
    }
}

/// Degree assignment and binary masks of a MADE conditioner.
///
/// `m1` is `C×D` (input → hidden) and `m2` is `D×2C` (hidden → `[μ | α̂]`).
#[derive(Clone, Debug, PartialEq)]
pub struct MadeMasks {
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<usize>,
    pub m1: Tensor,
    pub m2: Tensor,
}

/// Builds MADE masks for `c` inputs and `hidden` units. Hidden degrees cycle
/// through `1..c−1` starting at a random offset; with one input every hidden
/// unit gets degree 1, which leaves the outputs unconditional.
pub fn made_masks(c: usize, hidden: usize, rng: &mut RngStream) -> MadeMasks {
    assert!(c >= 1 && hidden >= 1, "made_masks needs c ≥ 1 and hidden ≥ 1");
    let input_degrees: Vec<usize> = (1..=c).collect();
    let hidden_degrees: Vec<usize> = if c == 1 {
        vec![1; hidden]
    } else {
        let offset = rng.below(0, c - 1);
        (0..hidden).map(|j| 1 + (offset + j) % (c - 1)).collect()
    };
    let mut m1 = vec![0.0; c * hidden];
    for (i, &din) in input_degrees.iter().enumerate() {
        for (j, &dh) in hidden_degrees.iter().enumerate() {
            if dh >= din {
                m1[i * hidden + j] = 1.0;
            }
        }
    }
    let mut m2 = vec![0.0; hidden * 2 * c];
    for (j, &dh) in hidden_degrees.iter().enumerate() {
        for (o, &dout) in input_degrees.iter().enumerate() {
            if dout > dh {
                m2[j * 2 * c + o] = 1.0;
                m2[j * 2 * c + c + o] = 1.0;
            }
        }
    }
    MadeMasks {
        input_degrees,
        hidden_degrees,
        m1: Tensor::matrix(c, hidden, m1).expect("mask shape"),
        m2: Tensor::matrix(hidden, 2 * c, m2).expect("mask shape"),
    }
}

/// One invertible layer: a permutation followed by a conditioned affine or
/// additive transform. Outputs stay in permuted coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowLayer {
    pub index: usize,
    pub kind: FlowKind,
    pub channels: usize,
    pub hidden: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub masks: Option<MadeMasks>,
    pub s_max: f64,
}

fn clamp(v: f64, s_max: f64) -> f64 {
    s_max * (v * (1.0 / s_max)).tanh()
}

impl FlowLayer {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        index: usize,
        kind: FlowKind,
        channels: usize,
        hidden: usize,
        s_max: f64,
    ) -> Result<Self> {
        if channels == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "flow layer {index}: needs at least one channel and one hidden unit"
            )));
        }
        if kind.is_coupling() && channels < 2 {
            return Err(Error::Config(format!(
                "flow layer {index}: coupling layers need at least 2 channels, got {channels}"
            )));
        }
        let (n_in, n_out) = match kind {
            FlowKind::MaskedAutoregressiveAffine => (channels, 2 * channels),
            FlowKind::AdditiveCoupling => (channels.div_ceil(2), channels / 2),
            FlowKind::AffineCoupling => (channels.div_ceil(2), 2 * (channels / 2)),
        };
        let p = |s: &str| format!("flow.layer{index}.{s}");
        let w1 = init_normal(store, seed, &p("w1"), &[n_in, hidden], crate::dbr::INIT_STD);
        let b1 = store.add(p("b1"), Tensor::zeros(&[hidden]), true);
        let w2 = init_normal(store, seed, &p("w2"), &[hidden, n_out], crate::dbr::INIT_STD);
        let b2 = store.add(p("b2"), Tensor::zeros(&[n_out]), true);
        let masks = (kind == FlowKind::MaskedAutoregressiveAffine).then(|| {
            let mut rng = RngStream::new(seed, format!("flow/masks/{index}"));
            made_masks(channels, hidden, &mut rng)
        });
        Ok(FlowLayer {
            index,
            kind,
            channels,
            hidden,
            w1,
            b1,
            w2,
            b2,
            masks,
            s_max,
        })
    }

    fn split(&self) -> usize {
        self.channels.div_ceil(2)
    }

    fn check_perm(&self, perm: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.channels];
        let ok = perm.len() == self.channels
            && perm.iter().all(|&p| p < self.channels && !std::mem::replace(&mut seen[p], true));
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "flow layer {}: {perm:?} is not a permutation of {} channels",
                self.index, self.channels
            )))
        }
    }

    /// Conditioner MLP on a plain vector, masks applied.
    fn conditioner(&self, store: &ParamStore, input: &[f64]) -> Vec<f64> {
        let w1 = store.value(self.w1).data();
        let b1 = store.value(self.b1).data();
        let w2 = store.value(self.w2).data();
        let b2 = store.value(self.b2).data();
        let n_out = b2.len();
        let (m1, m2) = match &self.masks {
            Some(m) => (Some(m.m1.data()), Some(m.m2.data())),
            None => (None, None),
        };
        let mut h = b1.to_vec();
        for (i, &x) in input.iter().enumerate() {
            for (j, hj) in h.iter_mut().enumerate() {
                let k = i * self.hidden + j;
                *hj += x * w1[k] * m1.map_or(1.0, |m| m[k]);
            }
        }
        let mut out = b2.to_vec();
        for (j, hj) in h.iter().enumerate() {
            let a = hj.tanh();
            for (o, out_o) in out.iter_mut().enumerate() {
                let k = j * n_out + o;
                *out_o += a * w2[k] * m2.map_or(1.0, |m| m[k]);
            }
        }
        out
    }

    fn check_finite(&self, values: &[f64]) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "flow layer {} ({:?}): conditioner produced a non-finite value",
                self.index, self.kind
            )))
        }
    }

    /// Density direction on one vector: returns the permuted-coordinate
    /// output and `log|det J|`.
    pub fn forward_vec(&self, store: &ParamStore, z0: &[f64], perm: &[usize]) -> Result<(Vec<f64>, f64)> {
        self.check_perm(perm)?;
        let c = self.channels;
        let zp: Vec<f64> = perm.iter().map(|&p| z0[p]).collect();
        match self.kind {
            FlowKind::MaskedAutoregressiveAffine => {
                let out = self.conditioner(store, &zp);
                self.check_finite(&out)?;
                let mut logdet = 0.0;
                let z1 = (0..c)
                    .map(|i| {
                        let a = clamp(out[c + i], self.s_max);
                        logdet -= a;
                        (zp[i] - out[i]) * (-a).exp()
                    })
                    .collect();
                Ok((z1, logdet))
            }
            FlowKind::AdditiveCoupling | FlowKind::AffineCoupling => {
                let d1 = self.split();
                let d2 = c - d1;
                let out = self.conditioner(store, &zp[..d1]);
                self.check_finite(&out)?;
                let mut z1 = zp[..d1].to_vec();
                let mut logdet = 0.0;
                for i in 0..d2 {
                    let x = zp[d1 + i];
                    z1.push(if self.kind == FlowKind::AdditiveCoupling {
                        x + out[i]
                    } else {
                        let s = clamp(out[i], self.s_max);
                        logdet += s;
                        x * s.exp() + out[d2 + i]
                    });
                }
                Ok((z1, logdet))
            }
        }
    }

    /// Exact inverse of [`FlowLayer::forward_vec`]; autoregressive layers
    /// are inverted one degree at a time.
    pub fn inverse_vec(&self, store: &ParamStore, z1: &[f64], perm: &[usize]) -> Result<Vec<f64>> {
        self.check_perm(perm)?;
        let c = self.channels;
        let mut zp = vec![0.0; c];
        match self.kind {
            FlowKind::MaskedAutoregressiveAffine => {
                for i in 0..c {
                    let out = self.conditioner(store, &zp);
                    self.check_finite(&out)?;
                    let a = clamp(out[c + i], self.s_max);
                    zp[i] = z1[i] * a.exp() + out[i];
                }
            }
            FlowKind::AdditiveCoupling | FlowKind::AffineCoupling => {
                let d1 = self.split();
                let d2 = c - d1;
                zp[..d1].copy_from_slice(&z1[..d1]);
                let out = self.conditioner(store, &zp[..d1]);
                self.check_finite(&out)?;
                for i in 0..d2 {
                    zp[d1 + i] = if self.kind == FlowKind::AdditiveCoupling {
                        z1[d1 + i] - out[i]
                    } else {
                        let s = clamp(out[i], self.s_max);
                        (z1[d1 + i] - out[d2 + i]) * (-s).exp()
                    };
                }
            }
        }
        let mut z0 = vec![0.0; c];
        for (j, &p) in perm.iter().enumerate() {
            z0[p] = zp[j];
        }
        Ok(z0)
    }

    /// Row-wise forward on a `T×C` graph node. The log-determinant is `T×1`,
    /// or `None` for additive layers where it is identically zero.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, perm: &[usize]) -> Result<(Var, Option<Var>)> {
        self.check_perm(perm)?;
        if g.value(z).cols() != self.channels {
            return Err(Error::Dimension(format!(
                "flow layer {}: input has {} channels, layer expects {}",
                self.index,
                g.value(z).cols(),
                self.channels
            )));
        }
        let c = self.channels;
        let zp = g.gather_cols(z, perm)?;
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let (w1, w2) = match &self.masks {
            Some(m) => {
                let m1 = g.constant(m.m1.clone());
                let m2 = g.constant(m.m2.clone());
                (g.mul(w1, m1)?, g.mul(w2, m2)?)
            }
            None => (w1, w2),
        };
        let d1 = self.split();
        let cond_in = if self.kind.is_coupling() { g.slice_cols(zp, 0, d1)? } else { zp };
        let h = g.matmul(cond_in, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h);
        let out = g.matmul(h, w2)?;
        let out = g.add_row(out, b2)?;
        self.check_finite(g.data(out))?;

        match self.kind {
            FlowKind::MaskedAutoregressiveAffine => {
                let mu = g.slice_cols(out, 0, c)?;
                let raw = g.slice_cols(out, c, c)?;
                let alpha = self.clamped(g, raw);
                let shifted = g.sub(zp, mu)?;
                let neg = g.scale(alpha, -1.0);
                let inv_scale = g.exp(neg);
                let z1 = g.mul(shifted, inv_scale)?;
                let logdet = g.sum_rows(neg)?;
                Ok((z1, Some(logdet)))
            }
            FlowKind::AdditiveCoupling => {
                let a = g.slice_cols(zp, 0, d1)?;
                let b = g.slice_cols(zp, d1, c - d1)?;
                let b = g.add(b, out)?;
                Ok((g.concat_cols(&[a, b])?, None))
            }
            FlowKind::AffineCoupling => {
                let d2 = c - d1;
                let a = g.slice_cols(zp, 0, d1)?;
                let b = g.slice_cols(zp, d1, d2)?;
                let raw = g.slice_cols(out, 0, d2)?;
                let t = g.slice_cols(out, d2, d2)?;
                let s = self.clamped(g, raw);
                let es = g.exp(s);
                let b = g.mul(b, es)?;
                let b = g.add(b, t)?;
                let logdet = g.sum_rows(s)?;
                Ok((g.concat_cols(&[a, b])?, Some(logdet)))
            }
        }
    }

    fn clamped(&self, g: &mut Graph<'_>, raw: Var) -> Var {
        let v = g.scale(raw, 1.0 / self.s_max);
        let v = g.tanh(v);
        g.scale(v, self.s_max)
    }
}
