use dbraf::data::{make_windows, split_train_valid, RawSeries, WindowSet};
use dbraf::error::Error;
use dbraf::evalkit::{anomaly_score, score_windows, ScoreOptions};
use dbraf::model::DbrAfModel;
use dbraf::numkit::{Graph, RngStream, Tensor};
use dbraf::train::{
    fit, load_checkpoint, load_checkpoint_with, loss_parts, save_checkpoint, total_loss, Checkpoint, TrainConfig,
};

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.window = 10;
    c.model.d_enc = 8;
    c.model.temporal_layers = 1;
    c.model.temporal_heads = 2;
    c.model.channel_layers = 1;
    c.model.channel_heads = 2;
    c.model.memory_size = 5;
    c.model.flow.layers = 1;
    c.model.flow.hidden = 8;
    c.seed = 3;
    c
}

fn randomized(cfg: &TrainConfig, channels: usize) -> DbrAfModel {
    let mut m = DbrAfModel::new(cfg, channels).unwrap();
    let mut rng = RngStream::new(99, "rand");
    for i in 0..m.params.len() {
        let p = m.params.get_mut(i);
        if !p.requires_grad {
            continue;
        }
        for v in p.value.data_mut() {
            *v += rng.normal() * 0.3;
        }
    }
    m
}

fn window(t: usize, c: usize, seed: u64) -> Tensor {
    let mut r = RngStream::new(seed, "w");
    Tensor::matrix(t, c, r.normal_vec(t * c, 1.0)).unwrap()
}

#[derive(Clone, Copy)]
enum Term {
    Rec,
    Nll,
    Total,
}

fn pick(p: dbraf::train::LossParts, term: Term) -> f64 {
    match term {
        Term::Rec => p.rec,
        Term::Nll => p.nll,
        Term::Total => p.total,
    }
}

/// Analytic gradient of one loss term for every trainable parameter.
fn analytic(model: &DbrAfModel, cfg: &TrainConfig, x: &Tensor, perms: &[Vec<usize>], term: Term) -> Vec<Vec<f64>> {
    let mut g = Graph::with_params(&model.params);
    let xv = g.constant(x.clone());
    let l = total_loss(&mut g, model, cfg, xv, perms).unwrap();
    let target = match term {
        Term::Rec => l.rec,
        Term::Nll => l.nll.unwrap(),
        Term::Total => l.total,
    };
    let mut grads = dbraf::numkit::Grads::zeros_like(&model.params);
    g.backward_into(target, 1.0, &mut grads).unwrap();
    (0..model.params.len()).map(|i| grads.get(i).to_vec()).collect()
}

fn numeric(model: &mut DbrAfModel, cfg: &TrainConfig, x: &Tensor, perms: &[Vec<usize>], term: Term, idx: usize) -> Vec<f64> {
    let h = 1e-5;
    let n = model.params.get(idx).value.len();
    (0..n)
        .map(|k| {
            let orig = model.params.get(idx).value.data()[k];
            model.params.get_mut(idx).value.data_mut()[k] = orig + h;
            let a = pick(loss_parts(model, cfg, x, perms).unwrap(), term);
            model.params.get_mut(idx).value.data_mut()[k] = orig - h;
            let b = pick(loss_parts(model, cfg, x, perms).unwrap(), term);
            model.params.get_mut(idx).value.data_mut()[k] = orig;
            (a - b) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn check_gradients(cfg: &TrainConfig, terms: &[Term], skip_dbr_for_nll: bool) {
    let mut model = randomized(cfg, 3);
    let x = window(10, 3, 1);
    let perms = vec![vec![2, 0, 1]];
    for &term in terms {
        let an = analytic(&model, cfg, &x, &perms, term);
        for idx in 0..model.params.len() {
            let p = model.params.get(idx);
            // under the stop-gradient the NLL still moves with these weights,
            // but by design no gradient reaches them
            let blocked = skip_dbr_for_nll && !matches!(term, Term::Rec) && !p.name.starts_with("flow.");
            if !p.requires_grad || blocked {
                continue;
            }
            let num = numeric(&mut model, cfg, &x, &perms, term, idx);
            let e = rel_err(&an[idx], &num);
            assert!(e < 1e-3, "{}: relative error {e}", model.params.get(idx).name);
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    check_gradients(&tiny_config(), &[Term::Rec, Term::Nll, Term::Total], true);
    let mut open = tiny_config();
    open.ablation.no_detach = true;
    check_gradients(&open, &[Term::Nll, Term::Total], false);
}

#[test]
fn detached_residual_blocks_nll_gradient() {
    let cfg = tiny_config();
    let mut model = randomized(&cfg, 3);
    let x = window(10, 3, 2);
    let perms = vec![vec![0, 1, 2]];
    let an = analytic(&model, &cfg, &x, &perms, Term::Nll);
    let before = loss_parts(&model, &cfg, &x, &perms).unwrap().nll;
    for idx in 0..model.params.len() {
        let name = model.params.get(idx).name.clone();
        if name.starts_with("temporal.") || name.starts_with("channel.") {
            assert!(an[idx].iter().all(|&g| g == 0.0), "{name}");
        }
    }
    // yet the NLL value does depend on the projection weights
    let proj = model.params.index_of("temporal.proj.w").unwrap();
    model.params.get_mut(proj).value.data_mut()[0] += 0.1;
    assert_ne!(loss_parts(&model, &cfg, &x, &perms).unwrap().nll, before);

    // with the detach removed, the same weights receive gradient
    let mut open = cfg.clone();
    open.ablation.no_detach = true;
    let an = analytic(&model, &open, &x, &perms, Term::Nll);
    assert!(an[proj].iter().any(|&g| g != 0.0));
}

#[test]
fn reconstruction_parameters_see_only_the_reconstruction_gradient() {
    let cfg = tiny_config();
    let model = randomized(&cfg, 3);
    let x = window(10, 3, 3);
    let perms = vec![vec![1, 2, 0]];
    let total = analytic(&model, &cfg, &x, &perms, Term::Total);
    let rec = analytic(&model, &cfg, &x, &perms, Term::Rec);
    let nll = analytic(&model, &cfg, &x, &perms, Term::Nll);
    for idx in 0..model.params.len() {
        let name = &model.params.get(idx).name;
        if name.starts_with("flow.") {
            assert!(rec[idx].iter().all(|&g| g == 0.0), "{name}");
            assert_eq!(total[idx], nll[idx], "{name}");
        } else {
            assert_eq!(total[idx], rec[idx], "{name}");
        }
    }
}

#[test]
fn loss_parts_recombine() {
    let mut cfg = tiny_config();
    cfg.beta = 0.7;
    let model = randomized(&cfg, 3);
    let x = window(10, 3, 4);
    let p = loss_parts(&model, &cfg, &x, &[vec![0, 1, 2]]).unwrap();
    assert!((p.total - p.rec - 0.7 * p.nll).abs() < 1e-12);

    cfg.beta = 0.0;
    let p = loss_parts(&model, &cfg, &x, &[vec![0, 1, 2]]).unwrap();
    assert_eq!(p.total, p.rec);
}

#[test]
fn each_flag_changes_only_its_term() {
    let base_cfg = tiny_config();
    let x = window(10, 3, 5);
    let perms = vec![vec![2, 1, 0]];
    let base_model = randomized(&base_cfg, 3);
    let base = loss_parts(&base_model, &base_cfg, &x, &perms).unwrap();

    let with = |f: &str| {
        let mut c = base_cfg.clone();
        c.ablation.set(f).unwrap();
        let m = randomized(&c, 3);
        (loss_parts(&m, &c, &x, &perms).unwrap(), m)
    };

    let (p, _) = with("no_cosine");
    assert!(p.rec < base.rec);
    assert_eq!(p.nll, base.nll);

    let (p, _) = with("no_detach");
    assert_eq!((p.rec, p.nll), (base.rec, base.nll));

    let (p, _) = with("flow_on_raw_input");
    assert_eq!(p.rec, base.rec);
    assert_ne!(p.nll, base.nll);

    let (p, m) = with("disable_af");
    assert_eq!(p.rec, base.rec);
    assert_eq!((p.nll, p.total), (0.0, p.rec));
    assert!(m.flow.is_none());

    let (p, m) = with("temporal_only");
    assert!(m.channel.is_none() && m.temporal.is_some());
    assert_ne!(p.rec, base.rec);

    let (_, m) = with("channel_only");
    assert!(m.temporal.is_none() && m.channel.is_some());

    let (p, m) = with("disable_dbr");
    assert!(m.channel.is_none() && m.flow.is_some());
    // plain squared error with no cosine term
    let xh = m.reconstruct_window(&x).unwrap();
    let sq: f64 = x.data().iter().zip(xh.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((p.rec - sq).abs() < 1e-12);

    let (_, m) = with("no_shuffle");
    let f = m.flow.as_ref().unwrap();
    assert_eq!(f.eval_perms, vec![vec![vec![0, 1, 2]]]);
}

#[test]
fn conflicting_flags_are_rejected() {
    let mut cfg = tiny_config();
    cfg.ablation.channel_only = true;
    cfg.ablation.temporal_only = true;
    assert!(matches!(DbrAfModel::new(&cfg, 3), Err(Error::Config(_))));
}

fn tiny_windows(c: usize, seed: u64) -> WindowSet {
    let t = 100;
    let mut r = RngStream::new(seed, "series");
    let data: Vec<f64> = (0..t * c)
        .map(|i| ((i / c) as f64 * 0.3 + (i % c) as f64).sin() + 0.05 * r.normal())
        .collect();
    let s = RawSeries::new(
        Tensor::matrix(t, c, data).unwrap(),
        None,
        (0..c).map(|i| format!("c{i}")).collect(),
    )
    .unwrap();
    split_train_valid(make_windows(&s, 10, 10).unwrap(), None).unwrap()
}

#[test]
fn zero_epochs_returns_initial_model() {
    let mut cfg = tiny_config();
    cfg.max_epochs = 0;
    let w = tiny_windows(3, 0);
    let t = fit(&w, &cfg).unwrap();
    assert!(t.history.is_empty());
    let init = DbrAfModel::new(&cfg, 3).unwrap();
    for (a, b) in t.model.params.iter().zip(init.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn fit_is_reproducible_and_restores_best_epoch() {
    let mut cfg = tiny_config();
    cfg.max_epochs = 6;
    cfg.batch_size = 4;
    cfg.lr = 1e-2;
    let w = tiny_windows(3, 1);
    let a = fit(&w, &cfg).unwrap();
    let b = fit(&w, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    for (p, q) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(p.value, q.value);
    }
    let best = a
        .history
        .iter()
        .min_by(|x, y| x.valid_rec.total_cmp(&y.valid_rec))
        .unwrap();
    assert_eq!(a.best_epoch, best.epoch);
    let v = dbraf::train::validation_rec(&a.model, &cfg, &w).unwrap();
    assert_eq!(v, best.valid_rec);
    assert!(a.history.last().unwrap().loss < a.history[0].loss);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny_config();
    let model = randomized(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint {
        config: cfg.clone(),
        model: model.clone(),
        epoch: 7,
        best_valid: Some(0.1 + 0.2),
        rng: vec![RngStream::new(1, "a").state()],
        norm: None,
    };
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.epoch, 7);
    assert_eq!(back.best_valid, Some(0.1 + 0.2));
    assert_eq!(back.rng, ck.rng);
    let x = window(10, 3, 8);
    assert_eq!(
        model.reconstruct_window(&x).unwrap().data(),
        back.model.reconstruct_window(&x).unwrap().data()
    );
    let wins = make_windows(
        &RawSeries::new(x.clone(), None, vec!["a".into(), "b".into(), "c".into()]).unwrap(),
        10,
        10,
    )
    .unwrap();
    let s1 = score_windows(&model, &wins, ScoreOptions::default()).unwrap().0;
    let s2 = score_windows(&back.model, &wins, ScoreOptions::default()).unwrap().0;
    assert_eq!(s1, s2);

    // saving again gives the same bytes
    let path2 = dir.path().join("m2.ckpt");
    save_checkpoint(&path2, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_errors() {
    let cfg = tiny_config();
    let model = randomized(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint {
        config: cfg.clone(),
        model,
        epoch: 0,
        best_valid: None,
        rng: vec![],
        norm: None,
    };
    save_checkpoint(&path, &ck).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));

    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(&path).unwrap_err().to_string().contains("truncated"));

    std::fs::write(&path, &bytes).unwrap();
    let mut deeper = cfg.clone();
    deeper.model.flow.layers = 2;
    let err = load_checkpoint_with(&path, &deeper).unwrap_err().to_string();
    assert!(err.contains("flow.layer1"), "{err}");

    let mut wider = cfg;
    wider.model.d_enc = 16;
    let err = load_checkpoint_with(&path, &wider).unwrap_err().to_string();
    assert!(err.contains("shape"), "{err}");
}

#[test]
fn scores_are_products_of_their_factors() {
    let cfg = tiny_config();
    let model = randomized(&cfg, 3);
    let x = window(20, 3, 9);
    let s = RawSeries::new(x, Some(vec![0; 20]), vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let wins = make_windows(&s, 10, 10).unwrap();
    let (series, recons) = score_windows(&model, &wins, ScoreOptions::default()).unwrap();
    assert_eq!(series.len(), 20);
    for (wi, w) in wins.iter().enumerate() {
        for t in 0..10 {
            let i = wi * 10 + t;
            let (a, b) = (w.values.row(t), recons[wi].row(t));
            let want = anomaly_score(&model, a, b).unwrap();
            assert!((series.scores[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            let prod = series.neg_log_p[i] * (series.mse[i] + series.cos_dist[i]);
            assert!((series.scores[i] - prod).abs() <= 1e-12 * prod.abs().max(1.0));
        }
    }
    // a cloned model scores bitwise identically
    let again = score_windows(&model.clone(), &wins, ScoreOptions::default()).unwrap().0;
    assert_eq!(again, series);
}

#[test]
fn flow_settings_leave_reconstruction_training_untouched() {
    // with the stop-gradient in place the flow never feeds back into the
    // branches, so their trajectory is the same with or without it
    let mut cfg = tiny_config();
    cfg.max_epochs = 4;
    cfg.batch_size = 4;
    cfg.lr = 1e-2;
    let w = tiny_windows(3, 2);
    let full = fit(&w, &cfg).unwrap();
    for flag in ["disable_af", "flow_on_raw_input", "no_shuffle"] {
        let mut other = cfg.clone();
        other.ablation.set(flag).unwrap();
        let t = fit(&w, &other).unwrap();
        assert_eq!(t.best_epoch, full.best_epoch, "{flag}");
        for p in t.model.params.iter().filter(|p| !p.name.starts_with("flow.")) {
            let q = full.model.params.get(full.model.params.index_of(&p.name).unwrap());
            assert_eq!(p.value, q.value, "{flag}: {}", p.name);
        }
    }
}
