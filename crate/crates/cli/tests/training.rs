mod common;

use common::tiny_config;
use hrvvs_cli::data::LoadedVideo;
use hrvvs_cli::evaluate::evaluate;
use hrvvs_cli::train::{total_steps, train};
use hrvvs_core::datasets::synth_generate;
use hrvvs_cli::Checkpoint;
use hrvvs_core::params::Adam;
use hrvvs_core::{Error, Model};

fn videos(cfg: &hrvvs_cli::RunConfig) -> (tempfile::TempDir, Vec<LoadedVideo>) {
    let dir = tempfile::tempdir().unwrap();
    let records = synth_generate(&cfg.data.synth, dir.path()).unwrap();
    let v = records.iter().map(|r| LoadedVideo::load(r, &cfg.model).unwrap()).collect();
    (dir, v)
}

#[test]
fn fixed_seed_gives_identical_curves_and_weights() {
    let cfg = tiny_config();
    let (_d, v) = videos(&cfg);
    let a = train(&cfg, &v, None).unwrap();
    let b = train(&cfg, &v, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let mut other = cfg.clone();
    other.train.seed = 1;
    assert_ne!(train(&other, &v, None).unwrap().log, a.log);
}

#[test]
fn schedule_reaches_zero_and_backbone_stays_frozen() {
    let mut cfg = tiny_config();
    cfg.pretrain.steps = 0;
    let (_d, v) = videos(&cfg);
    let out = train(&cfg, &v, None).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|s| s.lr).collect();
    assert_eq!(lrs[0], cfg.train.lr);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let model = Model::new(cfg.model.clone()).unwrap();
    let init = model.init_params(cfg.train.seed);
    for (name, t) in out.checkpoint.params.iter() {
        if name.starts_with("var.backbone.") {
            assert_eq!(t, init.get(name).unwrap(), "{name}");
        }
    }
    assert_ne!(out.checkpoint.params.get("decoder.head.w"), init.get("decoder.head.w"));
    assert!(out.pretrain.is_none());
}

#[test]
fn step_count_follows_epochs_when_uncapped() {
    let mut cfg = tiny_config();
    cfg.train.max_steps = 0;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    // 2 videos x 3 windows of 2 frames = 6 windows -> 2 steps per epoch
    assert_eq!(total_steps(&cfg, 6), 4);
}

#[test]
fn non_finite_loss_aborts_training() {
    let mut cfg = tiny_config();
    cfg.pretrain.steps = 0;
    let (_d, v) = videos(&cfg);
    let model = Model::new(cfg.model.clone()).unwrap();
    let mut params = model.init_params(cfg.train.seed);
    params.get_mut("decoder.head.b").unwrap().data_mut()[1] = f64::NAN;
    let init = Checkpoint { config: cfg.clone(), step: 1, params, adam: Adam::default() };
    match train(&cfg, &v, Some(init)) {
        Err(Error::Training { step, reason }) => {
            assert_eq!(step, 1);
            assert!(reason.contains("NaN"), "{reason}");
        }
        other => panic!("expected a training error, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn empty_training_set_is_a_contract_violation() {
    assert!(matches!(train(&tiny_config(), &[], None), Err(Error::Contract(_))));
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let cfg = tiny_config();
    let (_d, v) = videos(&cfg);
    let out = train(&cfg, &v, None).unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let before = evaluate(&model, &out.checkpoint.params, &v, cfg.data.eval_mode, None).unwrap();
    let back = hrvvs_cli::Checkpoint::from_bytes(&out.checkpoint.to_bytes()).unwrap();
    let after = evaluate(&model, &back.params, &v, cfg.data.eval_mode, None).unwrap();
    assert_eq!(before, after);
}
