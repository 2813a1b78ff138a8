//! Analytic gradients against central finite differences at 64-bit.

use emoq_core::autodiff::{Graph, Mat, ParamStore};
use emoq_core::bridge::lora::{init_lora_params, up_name, LoraConfig, LoraContext};
use emoq_core::bridge::{graph_weighted_ce, DecoderAdapter, TinyDecoder, TinyDecoderConfig};
use emoq_core::fusion::{graph_forward, init_params, DimRole, EmbeddingSequence, FusionConfig, TextInput};
use emoq_core::gradcheck::{
    central_difference, max_relative_error, max_relative_error_by_name, store_central_difference, FLOOR, STEP,
};
use emoq_core::losses::{focal_loss, graph_focal, graph_scl, supervised_contrastive_loss, LabeledEmbeddingBatch};
use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-4;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn unit_rows(mut m: Mat) -> Mat {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    m
}

fn labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

#[test]
fn scl_embedding_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let tau = [0.07, 0.1, 0.5][trial % 3];
        let y = labels(&mut rng, n, 3);
        let e = unit_rows(normal(&mut rng, n, d, 1.0));
        let analytic = supervised_contrastive_loss(&LabeledEmbeddingBatch::new(e.clone(), y.clone()).unwrap(), tau)
            .unwrap()
            .grad;
        let numeric = central_difference(
            |x| {
                supervised_contrastive_loss(&LabeledEmbeddingBatch::new(x.clone(), y.clone()).unwrap(), tau)
                    .unwrap()
                    .value
            },
            &e,
            STEP,
        );
        let err = max_relative_error(&analytic, &numeric, FLOOR);
        assert!(err <= TOL, "trial {trial}: rel error {err:e}");
    }
}

#[test]
fn focal_logit_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        let n = rng.random_range(1..=6);
        let c = rng.random_range(2..=7);
        let gamma = [0.0, 0.5, 2.0, 3.0][trial % 4];
        let alpha: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        let y = labels(&mut rng, n, c);
        let z = normal(&mut rng, n, c, 2.0);
        let analytic = focal_loss(&z, &y, &alpha, gamma).unwrap().grad;
        let numeric = central_difference(|x| focal_loss(x, &y, &alpha, gamma).unwrap().value, &z, STEP);
        let err = max_relative_error(&analytic, &numeric, FLOOR);
        assert!(err <= TOL, "trial {trial}: rel error {err:e}");
    }
}

fn tiny_decoder() -> TinyDecoder {
    TinyDecoder::new(TinyDecoderConfig {
        vocab_size: 24,
        width: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_len: 16,
        seed: 3,
    })
    .unwrap()
}

fn weighted_ce_value(logits: &Mat, start: usize, targets: &[usize], weights: &[f64]) -> f64 {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    graph_weighted_ce(&mut g, z, start, targets, weights, 2).unwrap().1
}

#[test]
fn weighted_ce_logit_gradient_on_tiny_decoder() {
    let dec = tiny_decoder();
    let tokens = [3, 7, 11, 1, 2, 5, 9, 4];
    let (_, logits) = dec.forward(&dec.embed(&tokens).unwrap(), None).unwrap();
    let (start, targets, weights) = (6, [9, 4], [1.0, 5.0]);
    let mut g = Graph::new();
    let z = g.variable(logits.clone());
    let (loss, _) = graph_weighted_ce(&mut g, z, start, &targets, &weights, 2).unwrap();
    let analytic = g.backward(loss).unwrap().get(z).unwrap().clone();
    let numeric = central_difference(|x| weighted_ce_value(x, start, &targets, &weights), &logits, STEP);
    let err = max_relative_error(&analytic, &numeric, FLOOR);
    assert!(err <= TOL, "rel error {err:e}");
}

#[test]
fn weighted_ce_through_decoder_and_lora() {
    let dec = tiny_decoder();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lora_cfg = LoraConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
        targets: vec!["q".into(), "k".into(), "v".into(), "o".into()],
    };
    let mut store = init_lora_params(&lora_cfg, dec.num_layers(), dec.width(), &mut rng);
    for layer in 0..dec.num_layers() {
        for t in ["q", "k", "v", "o"] {
            store.get_mut(&up_name(layer, t)).unwrap().value = normal(&mut rng, 2, dec.width(), 0.3);
        }
    }
    let tokens = [3, 7, 2, 1, 5, 9, 4];
    let emb = dec.embed(&tokens).unwrap();
    let (start, targets, weights) = (5, [9, 4], [1.0, 5.0]);

    let loss_of = |store: &ParamStore, emb: &Mat, g: &mut Graph| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = LoraContext {
            config: &lora_cfg,
            store,
            train: false,
            rng: &mut r,
        };
        let x = g.variable(emb.clone());
        let h = dec.forward_hidden(g, x, Some(&mut ctx)).unwrap();
        let z = dec.forward_logits(g, h).unwrap();
        (x, graph_weighted_ce(g, z, start, &targets, &weights, 1).unwrap())
    };

    let mut g = Graph::new();
    let (x, (loss, _)) = loss_of(&store, &emb, &mut g);
    let grads = g.backward(loss).unwrap();
    let analytic_emb = grads.get(x).unwrap().clone();
    let analytic = grads.by_name();
    assert!(analytic.keys().all(|k| k.starts_with("lora.")), "decoder weights must stay frozen");

    let numeric = store_central_difference(&store, |s| loss_of(s, &emb, &mut Graph::new()).1 .1, STEP);
    let (err, name) = max_relative_error_by_name(&analytic, &numeric, FLOOR);
    assert!(err <= TOL, "{name}: rel error {err:e}");

    let numeric_emb = central_difference(|e| loss_of(&store, e, &mut Graph::new()).1 .1, &emb, STEP);
    let err = max_relative_error(&analytic_emb, &numeric_emb, FLOOR);
    assert!(err <= TOL, "soft prompt rows: rel error {err:e}");
}

struct FusionCase {
    cfg: FusionConfig,
    store: ParamStore,
    audio: Vec<EmbeddingSequence>,
    text: Vec<Vec<usize>>,
    labels: Vec<usize>,
    probe: Mat,
}

fn fusion_case(seed: u64, num_layers: usize) -> FusionCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FusionConfig {
        d_a: 5,
        d_h: 8,
        num_layers,
        num_heads: 2,
        num_queries: 3,
        pooling_heads: 2,
        ffn_mult: 2,
        text_vocab: 12,
    };
    // Move every tensor away from its initializer so no gradient path is
    // trivially zero.
    let mut store = init_params(&cfg, &mut rng);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let p = store.get_mut(&name).unwrap();
        let (r, c) = p.value.dim();
        p.value = &p.value + &normal(&mut rng, r, c, 0.3);
    }
    let n = 4;
    let audio = (0..n)
        .map(|_| {
            let len = rng.random_range(2..=5);
            let valid = rng.random_range(1..=len);
            EmbeddingSequence::new(normal(&mut rng, len, cfg.d_a, 1.0), valid, DimRole::AudioRaw).unwrap()
        })
        .collect();
    let text = (0..n)
        .map(|i| {
            let len = if i == 0 { 0 } else { rng.random_range(1..=4) };
            (0..len).map(|_| rng.random_range(0..cfg.text_vocab)).collect()
        })
        .collect();
    FusionCase {
        labels: vec![0, 1, 0, 1],
        probe: normal(&mut rng, n, cfg.d_h, 1.0),
        cfg,
        store,
        audio,
        text,
    }
}

/// Linear read-out of the fused rows plus SCL over them.
fn fusion_objective(case: &FusionCase, store: &ParamStore, g: &mut Graph) -> emoq_core::autodiff::NodeId {
    let rows: Vec<_> = case
        .audio
        .iter()
        .zip(&case.text)
        .map(|(a, t)| graph_forward(g, &case.cfg, store, a, TextInput::Tokens(t)).unwrap().fused)
        .collect();
    let fused = g.concat_rows(&rows).unwrap();
    let read = g.mul_const(fused, case.probe.clone()).unwrap();
    let read = g.sum(read);
    let (scl, _) = graph_scl(g, fused, &case.labels, 0.5).unwrap();
    g.add(read, scl).unwrap()
}

fn check_fusion(case: &FusionCase) {
    let mut g = Graph::new();
    let out = fusion_objective(case, &case.store, &mut g);
    let analytic = g.backward(out).unwrap().by_name();
    let numeric = store_central_difference(
        &case.store,
        |s| {
            let mut g = Graph::new();
            let out = fusion_objective(case, s, &mut g);
            g.scalar(out)
        },
        STEP,
    );
    assert_eq!(numeric.len(), case.store.len());
    let (err, name) = max_relative_error_by_name(&analytic, &numeric, FLOOR);
    assert!(err <= TOL, "{name}: rel error {err:e}");
}

#[test]
fn fusion_forward_all_parameters() {
    check_fusion(&fusion_case(5, 1));
}

#[test]
fn fusion_forward_two_layers() {
    check_fusion(&fusion_case(6, 2));
}

#[test]
fn focal_on_aux_logits_through_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = normal(&mut rng, 8, 3, 1.0);
    let x = unit_rows(normal(&mut rng, 5, 8, 1.0));
    let y = vec![0, 2, 1, 1, 0];
    let alpha = [0.5, 1.0, 1.5];
    let f = |w: &Mat| -> (f64, Option<Mat>) {
        let mut g = Graph::new();
        let wn = g.variable(w.clone());
        let xn = g.constant(x.clone());
        let z = g.matmul(xn, wn).unwrap();
        let (loss, v) = graph_focal(&mut g, z, &y, &alpha, 2.0).unwrap();
        (v, g.backward(loss).unwrap().get(wn).cloned())
    };
    let analytic = f(&w).1.unwrap();
    let numeric = central_difference(|m| f(m).0, &w, STEP);
    assert!(max_relative_error(&analytic, &numeric, FLOOR) <= TOL);
    // Logits are shift invariant per row, so each gradient row sums to zero.
    let z = x.dot(&w);
    let col = focal_loss(&z, &y, &alpha, 2.0).unwrap().grad.sum_axis(Axis(1));
    assert!(col.iter().all(|v| v.abs() < 1e-12));
}
