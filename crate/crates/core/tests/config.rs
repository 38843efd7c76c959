use eaanet::attention::Mechanism;
use eaanet::autograd::{Module, Tape};
use eaanet::backbone::{build_model, Augment, Downsample, Model, ModelSpec};
use eaanet::config::{load_config, model_from_text, DataSource, RunConfig};
use eaanet::init::Init;
use eaanet::tensor::Tensor;
use eaanet::train::LrSchedule;
use eaanet::{weights, Error};
use proptest::prelude::*;
use std::path::Path;

#[test]
fn empty_file_is_the_flagship() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg.model, ModelSpec::flagship());
    assert_eq!(cfg, RunConfig::default());
    let m = &cfg.model;
    assert_eq!(m.attn.mechanism, Mechanism::Longformer2D);
    assert_eq!(m.downsample, Downsample::Patch2x2);
    let aug: Vec<Augment> = m.layers.iter().map(|l| l.augment).collect();
    assert_eq!(aug, [Augment::None, Augment::None, Augment::Concat, Augment::Concat]);
    assert_eq!(cfg.data.source, DataSource::Auto);
}

#[test]
fn zero_rank_names_the_key() {
    let err = RunConfig::parse("attn.mechanism = linformer\nattn.k_rank = 0\n").unwrap_err();
    match err {
        Error::InvalidValue { key, .. } => assert_eq!(key, "attn.k_rank"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn rank_above_token_count_is_rejected() {
    let err = RunConfig::parse("attn.mechanism = linformer\nattn.k_rank = 100000\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn unknown_key_reports_its_line() {
    let err = RunConfig::parse("# comment\ntrain.epochs = 2\nmodel.colour = red\n").unwrap_err();
    match err {
        Error::Parse { line, msg } => {
            assert_eq!(line, 3);
            assert!(msg.contains("model.colour"));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn bad_values_name_their_key() {
    for (text, key) in [
        ("train.lr = fast", "train.lr"),
        ("train.augment = maybe", "train.augment"),
        ("model.layer3.augment = sideways", "model.layer3.augment"),
        ("model.layer9.channels = 4", "model.layer9.channels"),
        ("data.subset = 10\ndata.holdout = 10", "data.holdout"),
    ] {
        match RunConfig::parse(text).unwrap_err() {
            Error::InvalidValue { key: k, .. } => assert_eq!(k, key, "{text}"),
            e => panic!("{text}: unexpected {e}"),
        }
    }
}

#[test]
fn model_text_accepts_model_keys_only() {
    assert!(matches!(model_from_text("train.epochs = 3"), Err(Error::Parse { line: 1, .. })));
    assert_eq!(model_from_text("").unwrap(), ModelSpec::flagship());
}

#[test]
fn load_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "attn.mechanism = full\nmodel.layer4.augment = replace\n").unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.model.attn.mechanism, Mechanism::Full);
    assert_eq!(cfg.model.layers[3].augment, Augment::Replace);
    assert!(matches!(load_config(&dir.path().join("missing")), Err(Error::Io(_))));
}

fn mechanism() -> impl Strategy<Value = Mechanism> {
    prop_oneof![Just(Mechanism::Full), Just(Mechanism::Linformer), Just(Mechanism::Longformer2D)]
}

fn augment() -> impl Strategy<Value = Augment> {
    prop_oneof![Just(Augment::None), Just(Augment::Concat), Just(Augment::Replace)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn text_round_trip(
        mech in mechanism(),
        aug3 in augment(),
        aug4 in augment(),
        heads in prop::sample::select(vec![1usize, 2, 4]),
        k in 1usize..4,
        w in prop::sample::select(vec![1usize, 3, 5]),
        g in 0usize..3,
        epochs in 0usize..100,
        lr in 1e-4f64..1.0,
        step in any::<bool>(),
        seed in any::<u64>(),
        holdout in 0usize..50,
    ) {
        let mut cfg = RunConfig::default();
        let m = &mut cfg.model;
        m.attn.mechanism = mech;
        m.attn.heads = heads;
        m.attn.k_rank = k;
        m.attn.window = w;
        if mech == Mechanism::Longformer2D {
            m.attn.global_tokens = g;
        }
        m.layers[2].augment = aug3;
        m.layers[3].augment = aug4;
        cfg.train.epochs = epochs;
        cfg.train.lr = lr;
        cfg.train.seed = seed;
        cfg.train.lr_schedule = if step { LrSchedule::Step } else { LrSchedule::Cosine };
        cfg.data.subset = 100;
        cfg.data.holdout = holdout;
        cfg.data.dir = "some dir/with spaces".into();
        cfg.validate().unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

fn forward(model: &Model<f32>, input: &Tensor<f32>) -> Vec<f32> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let y = model.forward(&mut tape, x, false).unwrap();
    tape.value(y).to_vec()
}

fn small(mech: Mechanism, aug: Augment) -> ModelSpec {
    let mut s = ModelSpec::flagship();
    s.stem_channels = 8;
    for (l, c) in s.layers.iter_mut().zip([8, 16, 16, 32]) {
        l.channels = c;
    }
    s.layers[2].augment = aug;
    s.layers[3].augment = aug;
    s.attn.mechanism = mech;
    s.attn.heads = 2;
    s.attn.k_rank = 4;
    s.attn.window = 3;
    if mech == Mechanism::Longformer2D {
        s.attn.global_tokens = 1;
    }
    s
}

#[test]
fn weights_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let input = Tensor::<f32>::from_f64(&[2, 3, 32, 32], &Init::new(9).standard_normal_vec(2 * 3 * 32 * 32)).unwrap();
    for (mech, aug) in [
        (Mechanism::Full, Augment::Concat),
        (Mechanism::Linformer, Augment::Replace),
        (Mechanism::Longformer2D, Augment::Concat),
        (Mechanism::Full, Augment::None),
    ] {
        let spec = small(mech, aug);
        let model = build_model::<f32>(&spec, 42).unwrap();
        // move the batch-norm statistics away from their initial values
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        model.forward(&mut tape, x, true).unwrap();
        drop(tape);
        let path = dir.path().join("w.bin");
        weights::save(&model, &path).unwrap();
        let back = weights::load::<f32>(&path).unwrap();
        assert_eq!(back.spec, spec);
        let (a, b) = (forward(&model, &input), forward(&back, &input));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{mech} {aug}");
        for (p, q) in model.param_list().iter().zip(back.param_list()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.to_vec(), q.value.to_vec());
        }
    }
}

#[test]
fn damaged_weight_files_are_rejected() {
    let model = build_model::<f32>(&small(Mechanism::Full, Augment::Concat), 1).unwrap();
    let bytes = weights::encode(&model);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(weights::decode::<f32>(&bad), Err(Error::Format(m)) if m.contains("magic")));
    assert!(matches!(weights::decode::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(weights::decode::<f32>(&long), Err(Error::Format(_))));
    let mut version = bytes;
    version[4] = 9;
    assert!(matches!(weights::decode::<f32>(&version), Err(Error::Format(_))));
}

#[test]
fn shipped_configs_parse_and_match_the_bench_variants() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let stem = path.file_stem().unwrap().to_str().unwrap();
        if let Ok(v) = stem.parse::<eaanet::bench::Variant>() {
            assert_eq!(cfg.model, v.spec(32), "{stem}");
        }
        seen += 1;
    }
    assert!(seen >= 6);
    assert_eq!(load_config(&dir.join("flagship.cfg")).unwrap().model, ModelSpec::flagship());
}

#[test]
fn readme_example_is_the_default_config() {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let section = &readme[readme.find("## Config format").unwrap()..];
    let start = section.find("```\n").unwrap() + 4;
    let block = &section[start..start + section[start..].find("```").unwrap()];
    assert_eq!(RunConfig::parse(block).unwrap(), RunConfig::default());
}
