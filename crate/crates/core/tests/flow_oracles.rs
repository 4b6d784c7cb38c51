use dbraf::flow::{FlowConfig, FlowKind, FlowLayer, FlowStack, GmmPrior};
use dbraf::numkit::linalg::determinant;
use dbraf::numkit::{Graph, ParamStore, RngStream, Tensor};
use proptest::prelude::*;

const KINDS: [FlowKind; 3] = [
    FlowKind::MaskedAutoregressiveAffine,
    FlowKind::AdditiveCoupling,
    FlowKind::AffineCoupling,
];

fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = RngStream::new(seed, "randomize");
    for i in 0..store.len() {
        let p = store.get_mut(i);
        if p.name.starts_with("flow.prior") {
            continue;
        }
        for v in p.value.data_mut() {
            *v = rng.normal() * std;
        }
    }
}

fn layer(kind: FlowKind, c: usize, seed: u64) -> (ParamStore, FlowLayer) {
    let mut store = ParamStore::new();
    let l = FlowLayer::register(&mut store, seed, 0, kind, c, 16, 5.0).unwrap();
    randomize(&mut store, seed, 0.5);
    (store, l)
}

/// Central-difference Jacobian, `J[i][j] = ∂out_i/∂in_j`.
fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h = 1e-5;
    let mut j = vec![0.0; n * n];
    let mut xp = x.to_vec();
    for col in 0..n {
        xp[col] = x[col] + h;
        let a = f(&xp);
        xp[col] = x[col] - h;
        let b = f(&xp);
        xp[col] = x[col];
        for row in 0..n {
            j[row * n + col] = (a[row] - b[row]) / (2.0 * h);
        }
    }
    j
}

#[test]
fn round_trips_for_every_kind_and_width() {
    for kind in KINDS {
        for c in [1, 2, 4, 8, 16] {
            if kind.is_coupling() && c == 1 {
                let mut store = ParamStore::new();
                assert!(FlowLayer::register(&mut store, 0, 0, kind, 1, 8, 5.0).is_err());
                continue;
            }
            let (store, l) = layer(kind, c, c as u64);
            let mut rng = RngStream::new(9, "z");
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let z0 = rng.normal_vec(c, 1.0);
                let perm = rng.permutation(c);
                let (z1, _) = l.forward_vec(&store, &z0, &perm).unwrap();
                let back = l.inverse_vec(&store, &z1, &perm).unwrap();
                for (a, b) in z0.iter().zip(&back) {
                    worst = worst.max((a - b).abs());
                }
            }
            assert!(worst < 1e-8, "{kind:?} C={c}: {worst}");
        }
    }
}

#[test]
fn logdet_matches_numerical_jacobian() {
    for kind in KINDS {
        for c in 2..=6 {
            for trial in 0..20 {
                let (store, l) = layer(kind, c, 100 + trial);
                let mut rng = RngStream::new(trial, "z");
                let z0 = rng.normal_vec(c, 1.0);
                let perm = rng.permutation(c);
                let (_, ld) = l.forward_vec(&store, &z0, &perm).unwrap();
                let j = jacobian(|z| l.forward_vec(&store, z, &perm).unwrap().0, &z0);
                let fd = determinant(c, &j).abs().ln();
                let rel = (ld - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-4, "{kind:?} C={c}: {ld} vs {fd}");
                if kind == FlowKind::AdditiveCoupling {
                    assert_eq!(ld, 0.0);
                }
            }
        }
    }
}

#[test]
fn autoregressive_jacobian_is_lower_triangular_in_permuted_coordinates() {
    for c in 2..=6 {
        let (store, l) = layer(FlowKind::MaskedAutoregressiveAffine, c, c as u64);
        let ident: Vec<usize> = (0..c).collect();
        let mut rng = RngStream::new(3, "z");
        let z0 = rng.normal_vec(c, 1.0);
        let j = jacobian(|z| l.forward_vec(&store, z, &ident).unwrap().0, &z0);
        for i in 0..c {
            for k in i + 1..c {
                assert!(j[i * c + k].abs() < 1e-8);
            }
        }
    }
}

#[test]
fn output_dependence_follows_degrees() {
    let c = 5;
    let (store, l) = layer(FlowKind::MaskedAutoregressiveAffine, c, 77);
    let ident: Vec<usize> = (0..c).collect();
    let base = vec![0.3, -0.2, 0.7, 1.1, -0.9];
    let (z_base, _) = l.forward_vec(&store, &base, &ident).unwrap();
    for d in 0..c {
        let mut x = base.clone();
        x[d] += 0.5;
        let (z, _) = l.forward_vec(&store, &x, &ident).unwrap();
        for o in 0..c {
            let changed = z[o] != z_base[o];
            // output o (degree o+1) moves iff o == d or o > d
            assert_eq!(changed, o >= d, "input {d} output {o}");
        }
    }
}

#[test]
fn graph_and_vector_paths_agree() {
    for kind in KINDS {
        let c = 4;
        let (store, l) = layer(kind, c, 5);
        let mut rng = RngStream::new(1, "z");
        let z = Tensor::matrix(6, c, rng.normal_vec(6 * c, 1.0)).unwrap();
        let perm = rng.permutation(c);
        let mut g = Graph::with_params(&store);
        let zv = g.constant(z.clone());
        let (out, ld) = l.forward(&mut g, zv, &perm).unwrap();
        for r in 0..6 {
            let (want, want_ld) = l.forward_vec(&store, z.row(r), &perm).unwrap();
            for (a, b) in g.value(out).row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            let got_ld = ld.map_or(0.0, |v| g.data(v)[r]);
            assert!((got_ld - want_ld).abs() < 1e-12);
        }
    }
}

fn trapezoid(f: impl Fn(f64) -> f64) -> f64 {
    let n = 4001;
    let h = 20.0 / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            w * f(-10.0 + i as f64 * h)
        })
        .sum::<f64>()
        * h
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    for kind in [FlowKind::MaskedAutoregressiveAffine] {
        let mut store = ParamStore::new();
        let cfg = FlowConfig {
            kind,
            layers: 2,
            ..FlowConfig::default()
        };
        let stack = FlowStack::register(&mut store, 4, 1, &cfg).unwrap();
        randomize(&mut store, 4, 0.1);
        let mass = trapezoid(|z| stack.log_likelihood(&store, &[z]).unwrap().exp());
        assert!((mass - 1.0).abs() < 1e-2, "{mass}");
    }
}

#[test]
fn two_dimensional_density_integrates_to_one() {
    for kind in KINDS {
        let mut store = ParamStore::new();
        let cfg = FlowConfig {
            kind,
            layers: 2,
            hidden: 8,
            eval_permutations: 1,
            ..FlowConfig::default()
        };
        let stack = FlowStack::register(&mut store, 8, 2, &cfg).unwrap();
        randomize(&mut store, 8, 0.2);
        let n = 401;
        let h = 20.0 / (n - 1) as f64;
        let grid: Vec<f64> = (0..n).map(|i| -10.0 + i as f64 * h).collect();
        let mut rows = Vec::with_capacity(n * n * 2);
        for &a in &grid {
            for &b in &grid {
                rows.extend([a, b]);
            }
        }
        let lp = stack
            .log_likelihood_batch(&store, &Tensor::matrix(n * n, 2, rows).unwrap())
            .unwrap();
        let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                mass += w(i) * w(j) * lp[i * n + j].exp();
            }
        }
        mass *= h * h;
        assert!((mass - 1.0).abs() < 1e-2, "{kind:?}: {mass}");
    }
}

#[test]
fn gmm_matches_direct_summation() {
    let (c, nc) = (3, 3);
    let mut store = ParamStore::new();
    let prior = GmmPrior::register(&mut store, c, nc, true);
    let mut rng = RngStream::new(21, "prior");
    for v in store.get_mut(prior.means).value.data_mut() {
        *v = rng.normal();
    }
    for v in store.get_mut(prior.logvars).value.data_mut() {
        *v = rng.uniform_range(-1.0, 1.0);
    }
    let means = store.value(prior.means).data().to_vec();
    let lv = store.value(prior.logvars).data().to_vec();
    for _ in 0..200 {
        let z = rng.normal_vec(c, 1.5);
        let mut p = 0.0;
        for m in 0..nc {
            let mut dens = 1.0 / nc as f64;
            for j in 0..c {
                let var = lv[m * c + j].exp();
                let d = z[j] - means[m * c + j];
                dens *= (-0.5 * d * d / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            p += dens;
        }
        assert!((prior.log_density(&store, &z) - p.ln()).abs() < 1e-10);
    }
}

#[test]
fn empty_stack_is_the_bare_prior_bitwise() {
    let c = 4;
    let mut store = ParamStore::new();
    let cfg = FlowConfig {
        layers: 0,
        ..FlowConfig::default()
    };
    let stack = FlowStack::register(&mut store, 0, c, &cfg).unwrap();
    let mut rng = RngStream::new(2, "r");
    let t = 1000;
    let r = Tensor::matrix(t, c, rng.normal_vec(t * c, 1.0)).unwrap();
    let direct: f64 = -((0..t).map(|i| stack.prior.log_density(&store, r.row(i))).sum::<f64>() / t as f64);
    assert_eq!(stack.nll_loss(&store, &r).unwrap().to_bits(), direct.to_bits());
}

#[test]
fn nll_is_mean_of_row_likelihoods() {
    let c = 3;
    let mut store = ParamStore::new();
    let stack = FlowStack::register(&mut store, 1, c, &FlowConfig::default()).unwrap();
    randomize(&mut store, 1, 0.3);
    let mut rng = RngStream::new(3, "r");
    let r = Tensor::matrix(20, c, rng.normal_vec(20 * c, 1.0)).unwrap();
    let rows: Vec<f64> = (0..20)
        .map(|i| stack.log_likelihood(&store, r.row(i)).unwrap())
        .collect();
    let want = -rows.iter().sum::<f64>() / 20.0;
    let got = stack.nll_loss(&store, &r).unwrap();
    assert!((got - want).abs() < 1e-12);

    let mut doubled = r.data().to_vec();
    doubled.extend_from_slice(r.data());
    let d = stack
        .nll_loss(&store, &Tensor::matrix(40, c, doubled).unwrap())
        .unwrap();
    assert!((d - got).abs() < 1e-12);
}

#[test]
fn identity_layers_give_prior_density() {
    let c = 3;
    let mut store = ParamStore::new();
    let stack = FlowStack::register(&mut store, 1, c, &FlowConfig::default()).unwrap();
    for i in 0..store.len() {
        if !store.get(i).name.starts_with("flow.prior") {
            store.get_mut(i).value.data_mut().fill(0.0);
        }
    }
    let z = [0.5, 0.5, 0.5];
    let want = stack.prior.log_density(&store, &z);
    assert!((stack.log_likelihood(&store, &z).unwrap() - want).abs() < 1e-12);
    // residuals at a prior mode under identity layers
    let r = Tensor::matrix(2, c, [z, z].concat()).unwrap();
    assert!((stack.nll_loss(&store, &r).unwrap() + want).abs() < 1e-12);
}

#[test]
fn non_finite_conditioner_names_the_layer() {
    let (mut store, l) = layer(FlowKind::MaskedAutoregressiveAffine, 3, 0);
    store.get_mut(l.b2).value.data_mut()[0] = f64::NAN;
    let err = l.forward_vec(&store, &[0.0; 3], &[0, 1, 2]).unwrap_err().to_string();
    assert!(err.contains("flow layer 0"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_clamp_bounds_logdet(seed in 0u64..1000, c in 1usize..8, std in 0.1f64..20.0) {
        let mut store = ParamStore::new();
        let l = FlowLayer::register(&mut store, seed, 0, FlowKind::MaskedAutoregressiveAffine, c, 16, 5.0).unwrap();
        randomize(&mut store, seed, std);
        let mut rng = RngStream::new(seed, "z");
        let z = rng.normal_vec(c, 3.0);
        let (_, ld) = l.forward_vec(&store, &z, &rng.permutation(c)).unwrap();
        prop_assert!(ld.abs() <= 5.0 * c as f64 + 1e-9);
    }

    #[test]
    fn random_round_trip(seed in 0u64..1000, kind_ix in 0usize..3, c in 2usize..10) {
        let kind = KINDS[kind_ix];
        let (store, l) = layer(kind, c, seed);
        let mut rng = RngStream::new(seed, "z");
        let z0 = rng.normal_vec(c, 2.0);
        let perm = rng.permutation(c);
        let (z1, _) = l.forward_vec(&store, &z0, &perm).unwrap();
        let back = l.inverse_vec(&store, &z1, &perm).unwrap();
        for (a, b) in z0.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }
}
