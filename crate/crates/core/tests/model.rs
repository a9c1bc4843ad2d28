use gpgnn::layers::{bilstm_encode, Mode, ParameterStore};
use gpgnn::model::{
    check_model_gradients, initial_states, pair_representation, propagate_layer, toy_config,
    toy_problem, EncodedSentence, EntityGraph, GpGnn,
};
use gpgnn::tensor::{softmax, Activation, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Direct triple loop over receivers, senders and matrix entries.
fn naive_propagate(a: &[f64], h: &[f64], graph: &EntityGraph, dn: usize) -> Vec<f64> {
    let m = graph.m;
    let mut out = vec![0.0; m * dn];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let e = graph.edges.iter().position(|&x| x == (i, j)).unwrap();
            for r in 0..dn {
                let mut acc = 0.0;
                for c in 0..dn {
                    acc += a[(e * dn + r) * dn + c] * h[j * dn + c];
                }
                out[i * dn + r] += relu(acc);
            }
        }
    }
    out
}

#[test]
fn batched_propagation_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let m = rng.gen_range(2..=5);
        let dn = [2, 4, 8][rng.gen_range(0..3)];
        let graph = EntityGraph::new(m).unwrap();
        let pairs = rng.gen_range(1..=3);
        let e = graph.edge_count();
        let a: Vec<f64> = (0..e * dn * dn).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..pairs * m * dn)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut tape = Tape::new();
        let av = tape.constant(&[e, dn, dn], a.clone()).unwrap();
        let hv = tape.constant(&[pairs * m, dn], h.clone()).unwrap();
        let out = propagate_layer(&mut tape, hv, av, &graph, pairs, Activation::Relu).unwrap();
        for p in 0..pairs {
            let expect = naive_propagate(&a, &h[p * m * dn..(p + 1) * m * dn], &graph, dn);
            let got = &tape.value(out)[p * m * dn..(p + 1) * m * dn];
            for (x, y) in got.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

fn toy(
    layers: usize,
    m: usize,
    relations: usize,
    seed: u64,
) -> (ParameterStore, GpGnn, EncodedSentence) {
    toy_problem(&toy_config(layers), m, relations, seed).unwrap()
}

fn zero_param(store: &mut ParameterStore, name: &str) {
    let id = store.id(name).unwrap();
    store.tensor_mut(id).values_mut().fill(0.0);
}

#[test]
fn transition_matrices_have_edge_shape_and_vanish_with_zero_output_layer() {
    let (mut store, model, sentence) = toy(2, 3, 4, 1);
    let mut tape = Tape::new();
    let a = model
        .transition_matrices(&store, &mut tape, &sentence, &mut Mode::Eval)
        .unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(tape.shape(a[0]), &[6, 4, 4]);
    assert_ne!(tape.value(a[0]), tape.value(a[1]));

    for n in 0..2 {
        zero_param(&mut store, &format!("encoder{n}.mlp.layer1.w"));
        zero_param(&mut store, &format!("encoder{n}.mlp.layer1.b"));
    }
    let mut tape = Tape::new();
    let a = model
        .transition_matrices(&store, &mut tape, &sentence, &mut Mode::Eval)
        .unwrap();
    assert!(tape.value(a[0]).iter().all(|&v| v == 0.0));
}

#[test]
fn factorised_edge_encoding_matches_explicit_context() {
    let (store, model, sentence) = toy(2, 3, 4, 2);
    let mut tape = Tape::new();
    let a = model
        .transition_matrices(&store, &mut tape, &sentence, &mut Mode::Eval)
        .unwrap();
    let dn2 = 16;
    for (n, enc) in model.encoders.iter().enumerate() {
        for e in 0..sentence.graph.edge_count() {
            let ctx = model
                .encode_edge_context(&store, &mut tape, &sentence, e)
                .unwrap();
            assert_eq!(tape.shape(ctx), &[sentence.len(), 9]);
            let h = bilstm_encode(&store, &mut tape, &enc.fwd, &enc.bwd, ctx).unwrap();
            let flat = enc
                .mlp
                .forward(&store, &mut tape, h, &mut Mode::Eval)
                .unwrap();
            let expect = tape.value(flat).to_vec();
            let got = &tape.value(a[n])[e * dn2..(e + 1) * dn2];
            for (x, y) in got.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "layer {n} edge {e}");
            }
        }
    }
}

#[test]
fn tied_layers_share_matrices() {
    let mut config = toy_config(3);
    config.tied = true;
    let (store, model, sentence) = toy_problem(&config, 3, 4, 3).unwrap();
    assert_eq!(model.encoders.len(), 1);
    let mut tape = Tape::new();
    let a = model
        .transition_matrices(&store, &mut tape, &sentence, &mut Mode::Eval)
        .unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a[0], a[2]);
}

#[test]
fn zero_head_gives_uniform_distribution_and_known_loss() {
    let (mut store, model, sentence) = toy(1, 2, 5, 4);
    for name in [
        "head.layer0.w",
        "head.layer0.b",
        "head.layer1.w",
        "head.layer1.b",
    ] {
        zero_param(&mut store, name);
    }
    for probs in model.predict(&store, &sentence).unwrap() {
        assert!(probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }
    let mut tape = Tape::new();
    let loss = model
        .sentence_loss(&store, &mut tape, &sentence, 1.0, &mut Mode::Eval)
        .unwrap();
    assert!((tape.value(loss)[0] - 2.0 * 5f64.ln()).abs() < 1e-12);
}

#[test]
fn predictions_are_distributions() {
    let (store, model, sentence) = toy(2, 4, 6, 5);
    for probs in model.predict(&store, &sentence).unwrap() {
        assert!(probs.iter().all(|&p| p >= 0.0));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sentence_loss_is_sum_of_pair_losses() {
    let (store, model, sentence) = toy(2, 3, 4, 6);
    let mut tape = Tape::new();
    let total = model
        .sentence_loss(&store, &mut tape, &sentence, 1.0, &mut Mode::Eval)
        .unwrap();
    let total = tape.value(total)[0];

    let labels = sentence.complete_labels().unwrap();
    let mut sum = 0.0;
    for (e, &pair) in sentence.graph.edges.iter().enumerate() {
        let mut tape = Tape::new();
        let logits = model
            .logits(&store, &mut tape, &sentence, &[pair], &mut Mode::Eval)
            .unwrap();
        let l = tape.value(logits);
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        sum += lse - l[labels[e]];
    }
    assert!((total - sum).abs() < 1e-12, "{total} vs {sum}");
}

#[test]
fn saturated_head_bias_gives_near_zero_loss() {
    let (mut store, model, mut sentence) = toy(1, 2, 3, 7);
    zero_param(&mut store, "head.layer1.w");
    let b = store.id("head.layer1.b").unwrap();
    store
        .tensor_mut(b)
        .values_mut()
        .copy_from_slice(&[40.0, 0.0, 0.0]);
    sentence.labels = vec![Some(0), Some(0)];
    let mut tape = Tape::new();
    let loss = model
        .sentence_loss(&store, &mut tape, &sentence, 1.0, &mut Mode::Eval)
        .unwrap();
    assert!(tape.value(loss)[0] < 1e-6);
}

#[test]
fn missing_label_is_an_error() {
    let (store, model, mut sentence) = toy(1, 2, 3, 8);
    sentence.labels[1] = None;
    let mut tape = Tape::new();
    assert!(model
        .sentence_loss(&store, &mut tape, &sentence, 1.0, &mut Mode::Eval)
        .is_err());
}

#[test]
fn loss_is_invariant_to_entity_permutation() {
    let (store, model, sentence) = toy(2, 4, 5, 9);
    let m = sentence.graph.m;
    let perm = [2, 0, 3, 1];
    let graph = sentence.graph.clone();
    let mut permuted = sentence.clone();
    for (e, &(i, j)) in graph.edges.iter().enumerate() {
        let k = graph.edge_index(perm[i], perm[j]);
        permuted.markers[k] = sentence.markers[e].clone();
        permuted.labels[k] = sentence.labels[e];
    }
    assert_eq!(permuted.graph.m, m);
    let value = |s: &EncodedSentence| {
        let mut tape = Tape::new();
        let l = model
            .sentence_loss(&store, &mut tape, s, 1.0, &mut Mode::Eval)
            .unwrap();
        tape.value(l)[0]
    };
    assert!((value(&sentence) - value(&permuted)).abs() < 1e-9);
}

#[test]
fn zero_layer_zero_states_of_other_nodes_stay_out_of_pair_features() {
    let mut tape = Tape::new();
    let h0 = initial_states(3, &[(0, 2)], 4).unwrap();
    assert!(h0.values()[4..8].iter().all(|&v| v == 0.0));
    let h = tape.leaf(&h0);
    let r = pair_representation(&mut tape, &[h], &[(0, 2)], 3).unwrap();
    assert!(tape.value(r).iter().all(|&v| v == 0.0));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for (m, seed) in [(2, 21), (3, 22)] {
        let (store, model, sentence) = toy(2, m, 4, seed);
        let report = check_model_gradients(&model, &store, &sentence, 1e-5, 1e-4).unwrap();
        assert!(report.coordinates() > 500);
        assert!(report.passed(), "m={m}: worst {:?}", report.worst());
    }
}

#[test]
fn softmax_shift_invariance_of_argmax() {
    let l = [0.3, -1.2, 2.5, 0.0];
    let shifted: Vec<f64> = l.iter().map(|x| x + 17.0).collect();
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    };
    assert_eq!(argmax(&softmax(&l)), argmax(&softmax(&shifted)));
}
