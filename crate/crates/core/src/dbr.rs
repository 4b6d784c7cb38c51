//! Dual-branch reconstruction.
//!
//! The temporal branch embeds a `T×C` window with a width-3 convolution plus
//! a learned positional table, runs pre-norm self-attention encoder layers
//! over time, and projects back to `C` channels. The channel branch works on
//! the transposed window (`C×T`): every layer cross-attends from the current
//! channel rows to a learned `M_mem×T` memory bank and adds the result back
//! onto its input. The two outputs are summed.

use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamStore, RngStream, Tensor, Var};

/// Standard deviation of every random weight initialisation.
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

pub(crate) fn init_normal(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    shape: &[usize],
    std: f64,
) -> usize {
    let n = shape.iter().product();
    let mut rng = RngStream::new(seed, format!("init/{name}"));
    let t = Tensor::new(shape.to_vec(), rng.normal_vec(n, std)).expect("init shape");
    store.add(name, t, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalLayer {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

/// Parameter indices of the temporal branch.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalBranchParams {
    pub embed: usize,
    pub pos: usize,
    pub layers: Vec<TemporalLayer>,
    pub proj_w: usize,
    pub proj_b: usize,
    pub heads: usize,
    pub width: usize,
}

impl TemporalBranchParams {
    /// Registers the branch parameters. The feed-forward sublayer expands to
    /// `4·width`.
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        window: usize,
        channels: usize,
        width: usize,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "temporal width {width} is not divisible by {heads} heads"
            )));
        }
        let ff = 4 * width;
        let embed = init_normal(store, seed, "temporal.embed", &[3, channels, width], INIT_STD);
        let pos = init_normal(store, seed, "temporal.pos", &[window, width], INIT_STD);
        let layers = (0..layers)
            .map(|l| {
                let p = |s: &str| format!("temporal.layer{l}.{s}");
                TemporalLayer {
                    ln1_g: store.add(p("ln1.g"), Tensor::full(&[width], 1.0), true),
                    ln1_b: store.add(p("ln1.b"), Tensor::zeros(&[width]), true),
                    wq: init_normal(store, seed, &p("wq"), &[width, width], INIT_STD),
                    wk: init_normal(store, seed, &p("wk"), &[width, width], INIT_STD),
                    wv: init_normal(store, seed, &p("wv"), &[width, width], INIT_STD),
                    wo: init_normal(store, seed, &p("wo"), &[width, width], INIT_STD),
                    ln2_g: store.add(p("ln2.g"), Tensor::full(&[width], 1.0), true),
                    ln2_b: store.add(p("ln2.b"), Tensor::zeros(&[width]), true),
                    ff_w1: init_normal(store, seed, &p("ff.w1"), &[width, ff], INIT_STD),
                    ff_b1: store.add(p("ff.b1"), Tensor::zeros(&[ff]), true),
                    ff_w2: init_normal(store, seed, &p("ff.w2"), &[ff, width], INIT_STD),
                    ff_b2: store.add(p("ff.b2"), Tensor::zeros(&[width]), true),
                }
            })
            .collect();
        let proj_w = init_normal(store, seed, "temporal.proj.w", &[width, channels], INIT_STD);
        let proj_b = store.add("temporal.proj.b", Tensor::zeros(&[channels]), true);
        Ok(TemporalBranchParams {
            embed,
            pos,
            layers,
            proj_w,
            proj_b,
            heads,
            width,
        })
    }

    /// `x` is one `T×C` window; returns the `T×C` temporal reconstruction.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let t = g.value(x).rows();
        let pos = g.param(self.pos);
        if g.value(pos).rows() != t {
            return Err(Error::Dimension(format!(
                "window length {t} does not match the positional table length {}",
                g.value(pos).rows()
            )));
        }
        let w = g.param(self.embed);
        let e = g.conv1d_same(x, w)?;
        let mut h = g.add(e, pos)?;
        for layer in &self.layers {
            let (lg, lb) = (g.param(layer.ln1_g), g.param(layer.ln1_b));
            let n = g.layer_norm(h, lg, lb, LN_EPS)?;
            let att = self.self_attention(g, n, layer)?;
            h = g.add(h, att)?;

            let (lg, lb) = (g.param(layer.ln2_g), g.param(layer.ln2_b));
            let n = g.layer_norm(h, lg, lb, LN_EPS)?;
            let (w1, b1) = (g.param(layer.ff_w1), g.param(layer.ff_b1));
            let (w2, b2) = (g.param(layer.ff_w2), g.param(layer.ff_b2));
            let f = g.matmul(n, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.tanh(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            h = g.add(h, f)?;
        }
        let (pw, pb) = (g.param(self.proj_w), g.param(self.proj_b));
        let out = g.matmul(h, pw)?;
        g.add_row(out, pb)
    }

    fn self_attention(&self, g: &mut Graph<'_>, n: Var, layer: &TemporalLayer) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            g.param(layer.wq),
            g.param(layer.wk),
            g.param(layer.wv),
            g.param(layer.wo),
        );
        let q = g.matmul(n, wq)?;
        let k = g.matmul(n, wk)?;
        let v = g.matmul(n, wv)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let s = g.matmul_t(qh, false, kh, true)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        g.matmul(cat, wo)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelLayer {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

/// Parameter indices of the channel branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBranchParams {
    pub memory: usize,
    pub layers: Vec<ChannelLayer>,
    pub heads: usize,
    pub window: usize,
}

impl ChannelBranchParams {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        window: usize,
        memory_size: usize,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || window % heads != 0 {
            return Err(Error::Config(format!(
                "window length {window} is not divisible by {heads} channel-branch heads"
            )));
        }
        if memory_size == 0 {
            return Err(Error::Config("memory bank needs at least one row".into()));
        }
        let memory = init_normal(store, seed, "channel.memory", &[memory_size, window], INIT_STD);
        let layers = (0..layers)
            .map(|l| {
                let p = |s: &str| format!("channel.layer{l}.{s}");
                ChannelLayer {
                    wq: init_normal(store, seed, &p("wq"), &[window, window], INIT_STD),
                    wk: init_normal(store, seed, &p("wk"), &[window, window], INIT_STD),
                    wv: init_normal(store, seed, &p("wv"), &[window, window], INIT_STD),
                    wo: init_normal(store, seed, &p("wo"), &[window, window], INIT_STD),
                }
            })
            .collect();
        Ok(ChannelBranchParams {
            memory,
            layers,
            heads,
            window,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.0)
    }

    /// Forward pass that also returns every attention matrix (`C×M_mem`,
    /// per layer and head).
    pub fn forward_traced(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        let t = g.value(x).rows();
        if t != self.window {
            return Err(Error::Dimension(format!(
                "window length {t} does not match the channel-branch width {}",
                self.window
            )));
        }
        let mem = g.param(self.memory);
        let dh = self.window / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = g.transpose(x)?;
        let mut attns = Vec::new();
        for layer in &self.layers {
            let (wq, wk, wv, wo) = (
                g.param(layer.wq),
                g.param(layer.wk),
                g.param(layer.wv),
                g.param(layer.wo),
            );
            let q = g.matmul(h, wq)?;
            let k = g.matmul(mem, wk)?;
            let v = g.matmul(mem, wv)?;
            let mut outs = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let s = g.matmul_t(qh, false, kh, true)?;
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s)?;
                attns.push(a);
                outs.push(g.matmul(a, vh)?);
            }
            let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let o = g.matmul(cat, wo)?;
            h = g.add(o, h)?;
        }
        Ok((g.transpose(h)?, attns))
    }
}

/// Graph nodes produced by [`reconstruct`].
#[derive(Clone, Copy, Debug)]
pub struct DbrOutput {
    pub temporal: Option<Var>,
    pub channel: Option<Var>,
    pub recon: Var,
    /// `x − x̂` with no gradient path into `x̂`.
    pub residual: Var,
}

/// Sums whichever branches are present; with neither, the reconstruction is
/// zero.
pub fn reconstruct(
    g: &mut Graph<'_>,
    x: Var,
    temporal: Option<&TemporalBranchParams>,
    channel: Option<&ChannelBranchParams>,
) -> Result<DbrOutput> {
    let t_out = temporal.map(|p| p.forward(g, x)).transpose()?;
    let c_out = channel.map(|p| p.forward(g, x)).transpose()?;
    let recon = match (t_out, c_out) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => {
            let shape = g.shape(x).to_vec();
            g.constant(Tensor::zeros(&shape))
        }
    };
    let residual = residual(g, x, recon)?;
    Ok(DbrOutput {
        temporal: t_out,
        channel: c_out,
        recon,
        residual,
    })
}

/// `x − sg[x̂]`.
pub fn residual(g: &mut Graph<'_>, x: Var, recon: Var) -> Result<Var> {
    let r = g.detach(recon);
    g.sub(x, r)
}

/// `‖x − x̂‖²` summed over the window plus `λ/T · Σ_t (1 − cos(x_t, x̂_t))`.
pub fn reconstruction_loss(g: &mut Graph<'_>, x: Var, recon: Var, lambda: f64) -> Result<Var> {
    let d = g.sub(x, recon)?;
    let sq = g.mul(d, d)?;
    let l2 = g.sum(sq);
    if lambda == 0.0 {
        return Ok(l2);
    }
    let cos = g.cos_dist_rows(x, recon)?;
    let cos = g.mean(cos);
    let cos = g.scale(cos, lambda);
    g.add(l2, cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(t: usize, c: usize, seed: u64) -> Tensor {
        let mut r = RngStream::new(seed, "x");
        Tensor::matrix(t, c, r.normal_vec(t * c, 1.0)).unwrap()
    }

    #[test]
    fn loss_of_perfect_reconstruction_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(window(5, 3, 1));
        let l = reconstruction_loss(&mut g, x, x, 1.0).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn loss_of_scaled_reconstruction() {
        let xt = window(5, 3, 2);
        let sq: f64 = xt.data().iter().map(|v| v * v).sum();
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let x2 = g.scale(x, 2.0);
        let l = reconstruction_loss(&mut g, x, x2, 1.0).unwrap();
        assert!((g.value(l).item() - sq).abs() < 1e-12);
    }

    #[test]
    fn loss_of_orthogonal_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let y = g.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let l = reconstruction_loss(&mut g, x, y, 1.0).unwrap();
        assert!((g.value(l).item() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_rows_skip_cosine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let y = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let l = reconstruction_loss(&mut g, x, y, 1.0).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn residual_is_plain_subtraction() {
        let (a, b) = (window(4, 2, 3), window(4, 2, 4));
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let y = g.input(b.clone(), true);
        let r = residual(&mut g, x, y).unwrap();
        let want: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect();
        assert_eq!(g.data(r), &want[..]);
        assert!(!g.requires_grad(r));
    }

    #[test]
    fn heads_must_divide_window() {
        let mut store = ParamStore::new();
        assert!(matches!(
            ChannelBranchParams::register(&mut store, 0, 10, 5, 1, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn temporal_rejects_wrong_window_length() {
        let mut store = ParamStore::new();
        let p = TemporalBranchParams::register(&mut store, 0, 4, 2, 8, 1, 1).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(window(5, 2, 0));
        assert!(matches!(p.forward(&mut g, x), Err(Error::Dimension(_))));
    }
}
