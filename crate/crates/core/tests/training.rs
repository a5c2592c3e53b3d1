mod common;

use common::rng;
use vctrl_core::extract::synth_dataset;
use vctrl_core::train::{pretrain_base, train_vctrl, TrainConfig, TrainSample};
use vctrl_core::{
    encode, record_control, AdapterConfig, BaseConfig, BaseParams, ControlKind, Error, Layout,
    NetworkSpec, NoiseSchedule, ParamSet, PatchSpec, VCtrlParams,
};

fn samples(n: usize) -> Vec<TrainSample> {
    let patch = PatchSpec::default();
    synth_dataset(n, 8, 16, 16, 21)
        .unwrap()
        .iter()
        .map(|c| TrainSample {
            latent: encode(&c.video, patch).unwrap(),
            class: c.caption_class,
            control: Some(record_control(c, ControlKind::Canny, patch).unwrap()),
        })
        .collect()
}

fn base_config() -> BaseConfig {
    BaseConfig {
        latent_channels: 96,
        grid: (4, 4, 4),
        width: 16,
        blocks: 3,
        heads: 2,
        mlp_hidden: 32,
        time_dim: 16,
        num_classes: vctrl_core::extract::NUM_CLASSES,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn pretraining_lowers_loss_and_adapter_training_leaves_base_alone() {
    let data = samples(8);
    let sched = NoiseSchedule::desk();
    let cfg = TrainConfig {
        steps: 300,
        batch: 4,
        seed: 1,
        ..TrainConfig::desk()
    };
    let init = BaseParams::init(base_config(), &mut rng(2)).unwrap();
    let out = pretrain_base(&data, init, &sched, &cfg).unwrap();
    let head = mean(out.curve[..50].iter().map(|p| p.loss));
    let tail = mean(out.curve[250..].iter().map(|p| p.loss));
    assert!(tail < 0.9 * head, "loss {head} -> {tail}");
    assert!(out.curve.iter().all(|p| p.clipped_norm <= 1.0 + 1e-9));

    let base = out.params;
    let frozen = base.clone();
    let spec = NetworkSpec::new(3, 2, Layout::Space).unwrap();
    let adapter = VCtrlParams::init(
        AdapterConfig {
            control_channels: 97,
            width: 8,
            heads: 2,
            mlp_hidden: 16,
            base_width: 16,
            blocks: 2,
        },
        &mut rng(3),
    )
    .unwrap();
    let cfg = TrainConfig {
        steps: 50,
        batch: 4,
        seed: 4,
        ..TrainConfig::desk()
    };
    let trained = train_vctrl(&data, &base, &spec, adapter.clone(), &sched, &cfg).unwrap();
    assert!(base.bit_eq(&frozen));
    assert!(!trained.params.bit_eq(&adapter));
    let fuse: f64 = trained
        .params
        .fuse_out
        .iter()
        .map(|l| l.weight.data.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(fuse > 0.0);
}

#[test]
fn training_is_deterministic_and_reports_divergence() {
    let mut data = samples(2);
    let sched = NoiseSchedule::desk();
    let cfg = TrainConfig {
        steps: 5,
        batch: 2,
        seed: 9,
        ..TrainConfig::desk()
    };
    let init = BaseParams::init(base_config(), &mut rng(2)).unwrap();
    let a = pretrain_base(&data, init.clone(), &sched, &cfg).unwrap();
    let b = pretrain_base(&data, init.clone(), &sched, &cfg).unwrap();
    assert!(a.params.bit_eq(&b.params));
    assert_eq!(a.curve, b.curve);

    for s in &mut data {
        s.latent.data[0] = f64::NAN;
    }
    assert!(matches!(
        pretrain_base(&data, init, &sched, &cfg),
        Err(Error::NumericDivergence { step: 0 })
    ));
}

#[test]
fn zero_steps_return_the_initialisation() {
    let data = samples(2);
    let sched = NoiseSchedule::desk();
    let cfg = TrainConfig {
        steps: 0,
        batch: 2,
        ..TrainConfig::desk()
    };
    let init = BaseParams::init(base_config(), &mut rng(5)).unwrap();
    let out = pretrain_base(&data, init.clone(), &sched, &cfg).unwrap();
    assert!(out.params.bit_eq(&init));
    assert!(out.curve.is_empty());

    let spec = NetworkSpec::new(3, 1, Layout::End).unwrap();
    let adapter = VCtrlParams::init(
        AdapterConfig {
            control_channels: 97,
            width: 8,
            heads: 2,
            mlp_hidden: 16,
            base_width: 16,
            blocks: 1,
        },
        &mut rng(6),
    )
    .unwrap();
    let trained = train_vctrl(&data, &init, &spec, adapter.clone(), &sched, &cfg).unwrap();
    assert!(trained.params.bit_eq(&adapter));
    let model = vctrl_core::ControlledModel::new(&init, &trained.params, &spec);
    let s = &data[0];
    let a = model
        .forward(&s.latent, 10, s.class, s.control.as_ref().unwrap())
        .unwrap();
    let b = vctrl_core::BaseModel::new(&init)
        .forward(&s.latent, 10, s.class)
        .unwrap();
    assert_eq!(a.eps().data, b.eps.data);
}
