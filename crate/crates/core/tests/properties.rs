use std::collections::BTreeSet;

use emoq_core::autodiff::{Graph, Mat, ParamStore};
use emoq_core::bridge::{extract_emotion_posteriors, DecoderAdapter, EmotionVocabulary, TinyDecoder, TinyDecoderConfig};
use emoq_core::encoders::{AudioRef, StubTokenizer};
use emoq_core::fusion::{forward_with, graph_forward, DimRole, EmbeddingSequence, FusionConfig, FusionParams, TextInput};
use emoq_core::harness::manifest::{DatasetKind, DatasetManifest, UtteranceRecord};
use emoq_core::harness::{compute_metrics, make_iemocap_folds, MetricsReport, RunConfig};
use emoq_core::losses::{focal_loss, supervised_contrastive_loss, LabeledEmbeddingBatch};
use emoq_core::pipeline::Checkpoint;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Mat::from_shape_vec((rows, cols), v).unwrap())
}

#[derive(Debug, Clone)]
struct FusionInput {
    cfg: FusionConfig,
    seed: u64,
    audio: Mat,
    valid: usize,
    text: Vec<usize>,
}

fn fusion_input() -> impl Strategy<Value = FusionInput> {
    (1usize..=2, 1usize..=4, prop_oneof![Just(1usize), Just(2), Just(4)], 1usize..=6, any::<u64>())
        .prop_flat_map(|(layers, queries, heads, audio_len, seed)| {
            let cfg = FusionConfig {
                d_a: 6,
                d_h: 8,
                num_layers: layers,
                num_heads: heads,
                num_queries: queries,
                pooling_heads: heads.min(2),
                ffn_mult: 2,
                text_vocab: 16,
            };
            (
                Just(cfg),
                Just(seed),
                matrix(audio_len, 6, 3.0),
                1..=audio_len,
                proptest::collection::vec(0usize..16, 0..5),
            )
        })
        .prop_map(|(cfg, seed, audio, valid, text)| FusionInput {
            cfg,
            seed,
            audio,
            valid,
            text,
        })
}

fn params(input: &FusionInput) -> FusionParams {
    FusionParams::new(input.cfg.clone(), &mut ChaCha8Rng::seed_from_u64(input.seed)).unwrap()
}

fn naive_scl(e: &Mat, labels: &[usize], tau: f64) -> f64 {
    let n = labels.len();
    let (mut total, mut anchors) = (0.0, 0);
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (e.row(i).dot(&e.row(k)) / tau).exp()).sum();
        let mut li = 0.0;
        for &j in &pos {
            li += ((e.row(i).dot(&e.row(j)) / tau).exp() / denom).ln();
        }
        total -= li / pos.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fused_embedding_is_unit_norm(input in fusion_input()) {
        let p = params(&input);
        let audio = EmbeddingSequence::new(input.audio.clone(), input.valid, DimRole::AudioRaw).unwrap();
        let fused = forward_with(&audio, TextInput::Tokens(&input.text), &p).unwrap();
        prop_assume!(!fused.is_degenerate());
        prop_assert!((fused.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn padded_audio_rows_do_not_matter(input in fusion_input(), noise in matrix(6, 6, 100.0)) {
        let p = params(&input);
        let audio = EmbeddingSequence::new(input.audio.clone(), input.valid, DimRole::AudioRaw).unwrap();
        let mut perturbed = input.audio.clone();
        for r in input.valid..perturbed.nrows() {
            perturbed.row_mut(r).assign(&noise.row(r));
        }
        let other = EmbeddingSequence::new(perturbed, input.valid, DimRole::AudioRaw).unwrap();
        let a = forward_with(&audio, TextInput::Tokens(&input.text), &p).unwrap();
        let b = forward_with(&other, TextInput::Tokens(&input.text), &p).unwrap();
        let bits = |v: &ndarray::Array1<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(a.vector()), bits(b.vector()));
    }

    #[test]
    fn attention_rows_are_distributions(input in fusion_input()) {
        let p = params(&input);
        let audio = EmbeddingSequence::new(input.audio.clone(), input.valid, DimRole::AudioRaw).unwrap();
        let mut g = Graph::new();
        let nodes = graph_forward(&mut g, &p.config, &p.store, &audio, TextInput::Tokens(&input.text)).unwrap();
        for map in nodes.attention_maps {
            for row in g.value(map).rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn emotion_posteriors_form_a_simplex(h in proptest::collection::vec(-20.0f64..20.0, 16), classes in 2usize..=7) {
        let names: Vec<String> = ["neutral", "angry", "sadness", "joy", "surprise", "disgust", "fear"][..classes]
            .iter().map(|s| s.to_string()).collect();
        let tok = StubTokenizer::new(&names).unwrap();
        let vocab = EmotionVocabulary::new(&names, &tok).unwrap();
        let dec = TinyDecoder::new(TinyDecoderConfig { width: 16, ..TinyDecoderConfig::default() }).unwrap();
        let q = extract_emotion_posteriors(&ndarray::Array1::from(h), &dec, &vocab).unwrap();
        prop_assert_eq!(q.len(), classes);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(q.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scl_matches_double_loop(
        e in (2usize..=8, 2usize..=8).prop_flat_map(|(n, d)| (matrix(n, d, 1.0), proptest::collection::vec(0usize..3, n))),
        tau in 0.05f64..1.0,
    ) {
        let (mut m, labels) = e;
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            prop_assume!(n > 1e-3);
            row.mapv_inplace(|v| v / n);
        }
        let fast = supervised_contrastive_loss(&LabeledEmbeddingBatch::new(m.clone(), labels.clone()).unwrap(), tau).unwrap();
        prop_assert!((fast.value - naive_scl(&m, &labels, tau)).abs() <= 1e-8);
        prop_assert!(fast.value >= 0.0);
    }

    #[test]
    fn focal_without_focusing_is_cross_entropy(
        z in (1usize..=6, 2usize..=7).prop_flat_map(|(n, c)| (matrix(n, c, 10.0), proptest::collection::vec(0usize..c, n)))
    ) {
        let (logits, labels) = z;
        let c = logits.ncols();
        let focal = focal_loss(&logits, &labels, &vec![1.0; c], 0.0).unwrap().value;
        let ce: f64 = labels.iter().enumerate().map(|(i, &y)| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            -(row[y] - m - z.ln())
        }).sum::<f64>() / labels.len() as f64;
        prop_assert!((focal - ce).abs() <= 1e-10);
    }

    #[test]
    fn focal_never_exceeds_cross_entropy(
        z in (1usize..=6, 2usize..=5).prop_flat_map(|(n, c)| (matrix(n, c, 5.0), proptest::collection::vec(0usize..c, n))),
        gamma in 0.0f64..5.0,
    ) {
        let (logits, labels) = z;
        let ones = vec![1.0; logits.ncols()];
        let ce = focal_loss(&logits, &labels, &ones, 0.0).unwrap().value;
        prop_assert!(focal_loss(&logits, &labels, &ones, gamma).unwrap().value <= ce + 1e-12);
    }

    #[test]
    fn metrics_recompute_from_confusion(
        pairs in (2usize..=7).prop_flat_map(|c| (Just(c), proptest::collection::vec((0..c, 0..c), 1..80)))
    ) {
        let (c, pairs) = pairs;
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&pred, &truth, c).unwrap();
        let again = MetricsReport::from_confusion(m.confusion.clone()).unwrap();
        prop_assert!((again.wa - m.wa).abs() <= 1e-12);
        prop_assert!((again.wf1 - m.wf1).abs() <= 1e-12);
        prop_assert!((again.ua - m.ua).abs() <= 1e-12);
        for v in [m.wa, m.ua, m.wf1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn equal_supports_give_wa_equal_ua(c in 2usize..=5, per in 1usize..10, preds in proptest::collection::vec(0usize..5, 50)) {
        let truth: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, per)).collect();
        let pred: Vec<usize> = truth.iter().enumerate().map(|(i, _)| preds[i % preds.len()] % c).collect();
        let m = compute_metrics(&pred, &truth, c).unwrap();
        prop_assert!((m.wa - m.ua).abs() <= 1e-12);
    }

    #[test]
    fn folds_partition_speakers(assign in proptest::collection::vec(0usize..10, 10..120)) {
        let records: Vec<UtteranceRecord> = assign.iter().enumerate().map(|(i, s)| UtteranceRecord {
            id: format!("u{i}"),
            audio: AudioRef::File(format!("{i}.emq").into()),
            transcript: "w".into(),
            speaker: Some(format!("Ses{:02}", s)),
            label: Some(i % 4),
            dialogue_id: None,
            split: None,
        }).collect();
        let speakers: BTreeSet<_> = records.iter().map(|r| r.speaker.clone()).collect();
        prop_assume!(speakers.len() >= 5);
        let manifest = DatasetManifest {
            kind: DatasetKind::Iemocap4,
            labels: DatasetKind::Iemocap4.default_labels().unwrap(),
            records,
            base_dir: None,
        };
        let folds = make_iemocap_folds(&manifest).unwrap();
        prop_assert_eq!(folds.len(), 5);
        let mut seen = vec![0usize; manifest.records.len()];
        for fold in &folds {
            let spk = |i: &usize| manifest.records[*i].speaker.clone();
            let train: BTreeSet<_> = fold.train.iter().map(spk).collect();
            let test: BTreeSet<_> = fold.test.iter().map(spk).collect();
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(fold.train.len() + fold.test.len(), manifest.records.len());
            for &i in &fold.test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&k| k == 1));
    }

    #[test]
    fn checkpoint_round_trip(values in proptest::collection::vec(-1e3f64..1e3, 1..40), trainable in any::<bool>()) {
        let mut store = ParamStore::new();
        let n = values.len();
        store.insert("fusion.x", Mat::from_shape_vec((1, n), values).unwrap(), trainable);
        let ck = Checkpoint::new("stage1", vec!["a".into(), "b".into()], RunConfig::desk(), Default::default(), &store);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(&back, &ck);
    }
}

#[test]
fn non_finite_padding_is_ignored() {
    let cfg = FusionConfig {
        d_a: 6,
        d_h: 8,
        num_layers: 2,
        num_heads: 2,
        num_queries: 3,
        pooling_heads: 2,
        ffn_mult: 2,
        text_vocab: 16,
    };
    let p = FusionParams::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let data = Mat::from_shape_fn((5, 6), |(r, c)| (r * 6 + c) as f64 * 0.1 - 1.0);
    let clean = EmbeddingSequence::new(data.clone(), 3, DimRole::AudioRaw).unwrap();
    let mut dirty = data;
    dirty.row_mut(3).fill(f64::NAN);
    dirty.row_mut(4).fill(f64::INFINITY);
    let dirty = EmbeddingSequence::new(dirty, 3, DimRole::AudioRaw).unwrap();
    let a = forward_with(&clean, TextInput::Tokens(&[1, 2]), &p).unwrap();
    let b = forward_with(&dirty, TextInput::Tokens(&[1, 2]), &p).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decoder_is_causal_under_random_suffixes() {
    let dec = TinyDecoder::new(TinyDecoderConfig::default()).unwrap();
    let base = [5, 6, 7, 8, 9, 10];
    let (_, a) = dec.forward(&dec.embed(&base).unwrap(), None).unwrap();
    let mut changed = base;
    changed[4] = 200;
    changed[5] = 201;
    let (_, b) = dec.forward(&dec.embed(&changed).unwrap(), None).unwrap();
    for r in 0..4 {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(4), b.row(4));
}
