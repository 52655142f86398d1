use hrvvs_core::autograd::Graph;
use hrvvs_core::config::{DwfmConfig, ModelConfig, MsimConfig, NUM_STAGES};
use hrvvs_core::dwfm::Dwfm;
use hrvvs_core::gradcheck::worst_rel_err;
use hrvvs_core::msim::{restack, Msim};
use hrvvs_core::params::{Init, ParamStore};
use hrvvs_core::toyvar::ToyVar;
use hrvvs_core::{Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn normal(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Init { rng: &mut rng }.normal(shape, std)
}

/// Replace zero-initialized parameters so every path carries gradient.
fn randomize(store: &mut ParamStore, names: &[&str], std: f64, seed: u64) {
    for (i, n) in names.iter().enumerate() {
        let shape = store.get(n).unwrap_or_else(|| panic!("{n}")).shape().to_vec();
        store.insert(*n, normal(&shape, std, seed + i as u64));
    }
}

#[test]
fn msim_on_8x8_tokens() {
    let (c, mem) = (8, 12);
    let m = Msim::new(MsimConfig { heads: 2, ..MsimConfig::default() }, c, mem);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    m.init_params(&mut store, &mut Init { rng: &mut rng });
    randomize(&mut store, &["msim.history.o.w", "msim.locals.o.w", "msim.global.o.w"], 0.5, 2);
    let x = normal(&[5, c, 8, 8], 1.0, 3);
    let memory = normal(&[16, mem], 1.0, 4);
    let weights = normal(&[5, c, 8, 8], 1.0, 5);
    let names = ["msim.history.k.w", "msim.history.v.w", "msim.locals.q.w", "msim.locals.v.w", "msim.global.k.w", "msim.global.o.w"];
    let (worst, samples) = worst_rel_err(&store, &names, 5, 1e-6, 1e-8, |g| {
        let st = g.constant(x.clone());
        let out = m.forward(g, st, &memory).unwrap();
        let y = restack(g, &out);
        let w = g.constant(weights.clone());
        let p = g.mul(y, w);
        g.sum(p)
    });
    assert!(worst < 1e-4, "{worst} {samples:?}");
}

#[test]
fn dwfm_head_on_8x8_tokens() {
    let c = 8;
    let d = Dwfm::new(DwfmConfig { reference_side: 4, ..DwfmConfig::default() }, c);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    d.init_params(&mut store, &mut Init { rng: &mut rng });
    randomize(&mut store, &["dwfm.attn.o.w", "dwfm.head.b"], 0.5, 7);
    let locals = normal(&[4, c, 8, 8], 1.0, 8);
    let reference = normal(&[c, 8, 8], 1.0, 9);
    let coeff = normal(&[4, 16], 1.0, 10);
    let names = ["dwfm.head.w", "dwfm.head.b", "dwfm.attn.q.w", "dwfm.attn.k.w", "dwfm.attn.o.w"];
    let (worst, samples) = worst_rel_err(&store, &names, 6, 1e-6, 1e-8, |g| {
        let l = g.constant(locals.clone());
        let r = g.constant(reference.clone());
        let w = d.patch_weights(g, l, Some(r)).unwrap();
        let k = g.constant(coeff.clone());
        let p = g.mul(w, k);
        g.sum(p)
    });
    assert!(worst < 1e-4, "{worst} {samples:?}");
}

#[test]
fn adapter_and_prior_projections() {
    let channels = [8, 8, 8, 8, 8];
    let cfg = hrvvs_core::config::ToyVarConfig {
        scales: [1, 2, 4, 8, 16],
        ..Default::default()
    };
    let tv = ToyVar::new(cfg, channels).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    tv.init_params(&mut store, &mut Init { rng: &mut rng });
    let proj: Vec<String> = (1..=NUM_STAGES).map(|s| format!("var.proj.{s}.w")).collect();
    let mut names: Vec<&str> = proj.iter().map(|s| s.as_str()).collect();
    names.push("var.adapter.up.w");
    randomize(&mut store, &names, 0.3, 12);
    names.push("var.adapter.down.w");
    names.push("var.adapter.down.b");
    let views = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 37 % 101) as f64) / 100.0);
    let sizes: [(usize, usize); NUM_STAGES] = std::array::from_fn(|i| (16 >> i, 16 >> i));
    let coeff: Vec<Tensor> = (0..NUM_STAGES).map(|i| normal(&[2, 8, 16 >> i, 16 >> i], 1.0, 20 + i as u64)).collect();
    let (worst, samples) = worst_rel_err(&store, &names, 4, 1e-6, 1e-8, |g| {
        let priors = tv.extract_priors(g, &views, &sizes).unwrap();
        let mut total = None;
        for (p, c) in priors.iter().zip(&coeff) {
            let c = g.constant(c.clone());
            let prod = g.mul(p.unwrap(), c);
            let s = g.sum(prod);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
        total.unwrap()
    });
    assert!(worst < 1e-4, "{worst} {samples:?}");
}

#[test]
fn backbone_receives_no_gradient_when_frozen() {
    let model = Model::new(ModelConfig { height: 64, width: 64, ..ModelConfig::desk() }).unwrap();
    let store = model.init_params(3);
    let frame = Tensor::from_fn(&[3, 64, 64], |i| ((i * 13 % 97) as f64) / 96.0);
    let labels: Vec<u8> = (0..64 * 64).map(|i| (i % 3) as u8).collect();
    let mut g = Graph::new(&store).with_trainable(model.trainable());
    let state = model.new_stream();
    let fwd = model.forward_frame(&mut g, &frame, &state).unwrap();
    let loss = model.frame_loss(&mut g, &fwd, &labels).unwrap();
    let grads = g.backward(loss);
    assert!(grads.params().keys().all(|n| !n.starts_with("var.backbone.")));
    assert!(grads.param("var.proj.1.w").is_some());
    assert!(grads.param("decoder.head.w").is_some());
}

#[test]
fn end_to_end_loss_on_64x64_frames() {
    let model = Model::new(ModelConfig { height: 64, width: 64, ..ModelConfig::desk() }).unwrap();
    let mut store = model.init_params(4);
    randomize(
        &mut store,
        &["msim.history.o.w", "msim.locals.o.w", "msim.global.o.w", "var.proj.1.w", "var.proj.5.w", "var.adapter.up.w"],
        0.1,
        30,
    );
    let frames: Vec<Tensor> = (0..2)
        .map(|t| Tensor::from_fn(&[3, 64, 64], |i| (((i + 7 * t) * 31 % 89) as f64) / 88.0))
        .collect();
    let labels: Vec<Vec<u8>> = (0..2)
        .map(|t| (0..64 * 64).map(|i| (((i / 64) / 8 + (i % 64) / 8 + t) % 3) as u8).collect())
        .collect();
    // two frames: the second uses memory, the history weights and the previous reference
    let mut state = model.new_stream();
    {
        let mut g = Graph::new(&store);
        let fwd = model.forward_frame(&mut g, &frames[0], &state).unwrap();
        model.commit(&g, &fwd, &mut state).unwrap();
    }
    let names = [
        "encoder.stage1.a.w",
        "encoder.stage5.b.w",
        "decoder.up1.b.w",
        "decoder.head.w",
        "decoder.refine.w",
        "dwfm.head.w",
        "dwfm.mix",
        "msim.history.q.w",
        "msim.global.o.w",
        "var.proj.1.w",
        "var.proj.5.w",
        "var.adapter.up.w",
    ];
    let (worst, samples) = worst_rel_err(&store, &names, 2, 1e-5, 1e-6, |g| {
        let fwd = model.forward_frame(g, &frames[1], &state).unwrap();
        model.frame_loss(g, &fwd, &labels[1]).unwrap()
    });
    assert!(worst < 1e-3, "{worst} {samples:?}");
}
