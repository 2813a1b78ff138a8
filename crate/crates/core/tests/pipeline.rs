use emoq_core::bridge::{DecoderAdapter, TinyDecoder};
use emoq_core::encoders::StubTokenizer;
use emoq_core::harness::{make_fixture, DatasetManifest, FixtureSpec, RunConfig};
use emoq_core::pipeline::stage1::{aux_predict, AUX_PREFIX};
use emoq_core::pipeline::{
    encode_dataset, labels_of, load_checkpoint, save_checkpoint, train_stage1, train_stage2, EmoqModel, Example,
};
use emoq_core::EmoqError;

fn examples(manifest: &DatasetManifest, split: &str, run: &RunConfig) -> Vec<Example> {
    let tok = StubTokenizer::new(&manifest.labels).unwrap();
    encode_dataset(&manifest.split_manifest(split), &run.encoder(), &tok).unwrap()
}

fn small_run() -> RunConfig {
    RunConfig {
        stage1_epochs: 4,
        stage2_epochs: 2,
        ..RunConfig::desk()
    }
}

fn decoder(run: &RunConfig) -> Box<TinyDecoder> {
    Box::new(TinyDecoder::new(run.decoder_config()).unwrap())
}

fn tokenizer(labels: &[String]) -> Box<StubTokenizer> {
    Box::new(StubTokenizer::new(labels).unwrap())
}

#[test]
fn stage1_separates_xor_fixture() {
    let run = RunConfig {
        stage1_epochs: 200,
        ..RunConfig::desk()
    };
    assert_eq!(run.d_h, 8);
    let manifest = make_fixture(&FixtureSpec::split(50, 0, 2, 3)).unwrap();
    let train = examples(&manifest, "train", &run);
    let out = train_stage1(&train, None, &manifest.labels, &run).unwrap();
    assert!(out.train_accuracy >= 0.95, "aux accuracy {}", out.train_accuracy);
    assert_eq!(out.epoch_losses.len(), 200);
    // Noisy mini-batch loss, so compare windows rather than single epochs.
    let head: f64 = out.epoch_losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = out.epoch_losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn stage1_checkpoint_drops_aux_head() {
    let run = small_run();
    let manifest = make_fixture(&FixtureSpec::split(8, 4, 2, 1)).unwrap();
    let train = examples(&manifest, "train", &run);
    let test = examples(&manifest, "test", &run);
    let out = train_stage1(&train, Some(&test), &manifest.labels, &run).unwrap();
    assert_eq!(out.checkpoint.stage, "stage1");
    assert!(out.checkpoint.params.names().all(|n| n.starts_with("fusion.")));
    assert!(out.aux_head.names().all(|n| n.starts_with(AUX_PREFIX)));
    assert!(out.best_validation_wa.is_some());

    let mut store = out.checkpoint.params.clone();
    store.merge(out.aux_head.clone());
    let pred = aux_predict(&run.fusion_config(), &store, &train).unwrap();
    assert_eq!(pred.len(), train.len());
}

#[test]
fn stage1_rejects_tiny_batches() {
    let run = RunConfig {
        stage1_batch_size: 1,
        ..small_run()
    };
    let manifest = make_fixture(&FixtureSpec::split(4, 0, 2, 1)).unwrap();
    let train = examples(&manifest, "train", &run);
    let err = train_stage1(&train, None, &manifest.labels, &run).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn stage2_keeps_decoder_frozen_and_is_deterministic() {
    let run = small_run();
    let manifest = make_fixture(&FixtureSpec::split(6, 2, 2, 2)).unwrap();
    let train = examples(&manifest, "train", &run);
    let stage1 = train_stage1(&train, None, &manifest.labels, &run).unwrap();

    let go = || {
        train_stage2(
            &train,
            &manifest.labels,
            &run,
            Some(&stage1.checkpoint),
            decoder(&run),
            tokenizer(&manifest.labels),
        )
        .unwrap()
    };
    let a = go();
    let b = go();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.steps, 2 * 2);

    let fresh = TinyDecoder::new(run.decoder_config()).unwrap();
    assert_eq!(a.model.decoder().params(), fresh.params());
    for name in a.model.params.names() {
        assert!(
            ["fusion.", "projector.", "lora."].iter().any(|p| name.starts_with(p)),
            "unexpected trainable tensor {name}"
        );
    }
    // Stage-1 weights were loaded and then moved by stage 2.
    let q = "fusion.queries";
    assert_ne!(a.model.params.value(q).unwrap(), stage1.checkpoint.params.value(q).unwrap());
}

#[test]
fn stage2_resume_reproduces_outputs() {
    let run = small_run();
    let manifest = make_fixture(&FixtureSpec::split(6, 3, 2, 4)).unwrap();
    let train = examples(&manifest, "train", &run);
    let test = examples(&manifest, "test", &run);
    let out = train_stage2(&train, &manifest.labels, &run, None, decoder(&run), tokenizer(&manifest.labels)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage2.emqc");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let model = EmoqModel::from_checkpoint(&back, decoder(&run), tokenizer(&manifest.labels)).unwrap();
    for ex in &test {
        assert_eq!(model.posteriors(ex).unwrap(), out.model.posteriors(ex).unwrap());
    }
    let m = model.evaluate(&test).unwrap();
    assert_eq!(m.total() as usize, test.len());

    // A stage-1 checkpoint cannot stand in for a stage-2 one.
    let s1 = train_stage1(&train, None, &manifest.labels, &run).unwrap();
    let err = EmoqModel::from_checkpoint(&s1.checkpoint, decoder(&run), tokenizer(&manifest.labels)).unwrap_err();
    assert!(matches!(err, EmoqError::Checkpoint(_)));
}

#[test]
fn lora_is_a_no_op_at_init() {
    let run = small_run();
    let manifest = make_fixture(&FixtureSpec::split(2, 0, 2, 5)).unwrap();
    let train = examples(&manifest, "train", &run);
    let model = EmoqModel::new(&run, &manifest.labels, decoder(&run), tokenizer(&manifest.labels), None).unwrap();
    for ex in &train {
        let with = model.decoder_logits(ex, true).unwrap();
        let without = model.decoder_logits(ex, false).unwrap();
        let bits = |m: &ndarray::Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&with), bits(&without));
    }
}

#[test]
fn stage2_needs_labels() {
    let run = small_run();
    let mut manifest = make_fixture(&FixtureSpec::split(2, 0, 2, 5)).unwrap();
    manifest.records[0].label = None;
    let train = examples(&manifest, "train", &run);
    assert!(labels_of(&train).is_err());
    let err = train_stage2(&train, &manifest.labels, &run, None, decoder(&run), tokenizer(&manifest.labels)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
