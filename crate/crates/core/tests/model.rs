//! Architectural properties of the model.

use onebt::cost::count_params;
use onebt::model::{attention, fill_params, preset, random_input, AttentionVars, ForwardCtx, LatentState, ModelConfig, OneBt};
use onebt::rng::{stream, Stream};
use onebt::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

fn random(shape: [usize; 2], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Stream::Synthetic);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    x.select_rows(perm).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attn_vars(tape: &mut Tape<f64>, d_q: usize, d_kv: usize, heads: usize, head_dim: usize, seed: u64) -> AttentionVars {
    let inner = heads * head_dim;
    AttentionVars {
        q: tape.constant(random([d_q, inner], seed)),
        k: tape.constant(random([d_kv, inner], seed + 1)),
        v: tape.constant(random([d_kv, inner], seed + 2)),
        out: tape.constant(random([inner, d_q], seed + 3)),
        out_bias: Some(tape.constant(random([1, d_q], seed + 4).reshape([d_q]).unwrap())),
        heads,
        head_dim,
    }
}

#[test]
fn single_key_broadcasts_its_value() {
    let mut tape = Tape::new();
    let w = attn_vars(&mut tape, 6, 5, 2, 3, 10);
    let kv = random([1, 5], 1);
    let kv_v = tape.constant(kv.clone());
    let q_a = tape.constant(random([4, 6], 2));
    let q_b = tape.constant(random([4, 6], 3));
    let ya = attention(&mut tape, &w, q_a, kv_v, 0.0, &mut ForwardCtx::eval()).unwrap();
    let yb = attention(&mut tape, &w, q_b, kv_v, 0.0, &mut ForwardCtx::eval()).unwrap();
    // oracle: (kv · Wv) · Wout + b, identical for every query row
    let vw = tape.matmul(kv_v, w.v).unwrap();
    let o = tape.matmul(vw, w.out).unwrap();
    let o = tape.add(o, w.out_bias.unwrap()).unwrap();
    let row = tape.value(o).data().to_vec();
    for y in [ya, yb] {
        for i in 0..4 {
            assert!(max_abs_diff(tape.value(y).row(i), &row) < 1e-12);
        }
    }
}

#[test]
fn permuting_keys_and_values_leaves_output_unchanged() {
    let mut tape = Tape::new();
    let w = attn_vars(&mut tape, 6, 5, 3, 2, 20);
    let kv = random([7, 5], 4);
    let q = tape.constant(random([3, 6], 5));
    let perm = [3, 6, 0, 2, 5, 1, 4];
    let a = tape.constant(kv.clone());
    let b = tape.constant(permute_rows(&kv, &perm));
    let ya = attention(&mut tape, &w, q, a, 0.0, &mut ForwardCtx::eval()).unwrap();
    let yb = attention(&mut tape, &w, q, b, 0.0, &mut ForwardCtx::eval()).unwrap();
    let err = max_abs_diff(tape.value(ya).data(), tape.value(yb).data());
    assert!(err < 1e-14, "{err:e}");
}

#[test]
fn two_by_two_identity_projections_match_brute_force() {
    let q = [[0.3, -1.2], [2.0, 0.5]];
    let kv = [[1.0, 0.0], [-0.5, 1.5]];
    let mut tape = Tape::new();
    let id = Tensor::from_fn([2, 2], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 });
    let w = AttentionVars {
        q: tape.constant(id.clone()),
        k: tape.constant(id.clone()),
        v: tape.constant(id.clone()),
        out: tape.constant(id),
        out_bias: None,
        heads: 1,
        head_dim: 2,
    };
    let qv = tape.constant(Tensor::from_rows(&q.map(|r| r.to_vec())).unwrap());
    let kvv = tape.constant(Tensor::from_rows(&kv.map(|r| r.to_vec())).unwrap());
    let y = attention(&mut tape, &w, qv, kvv, 0.0, &mut ForwardCtx::eval()).unwrap();

    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| (q[i][0] * kv[j][0] + q[i][1] * kv[j][1]) / 2f64.sqrt()).collect();
        let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let z = e[0] + e[1];
        for c in 0..2 {
            let want = (e[0] * kv[0][c] + e[1] * kv[1][c]) / z;
            assert!((tape.value(y).row(i)[c] - want).abs() < 1e-14);
        }
    }
}

fn tiny_model(seed: u64) -> OneBt<f64> {
    OneBt::new(ModelConfig::tiny(), seed).unwrap()
}

#[test]
fn cross_block_is_invariant_to_token_order() {
    let model = tiny_model(1);
    let cfg = model.config().clone();
    let x = random_input::<f64>(&cfg, &mut stream(1, Stream::Synthetic));
    let tokens = model.tokenize(&x).unwrap().values;
    let mut perm: Vec<usize> = (0..cfg.seq_len).collect();
    perm.shuffle(&mut stream(2, Stream::Shuffle));

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let t1 = tape.constant(tokens.clone());
    let t2 = tape.constant(permute_rows(&tokens, &perm));
    let lat = model.initial_latents(&vars);
    let a = model.cross_attend_block(&mut tape, &vars, lat, t1, &mut ForwardCtx::eval()).unwrap();
    let b = model.cross_attend_block(&mut tape, &vars, lat, t2, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(tape.shape(a.0), &[cfg.num_latents, cfg.latent_dim]);
    let err = max_abs_diff(tape.value(a.0).data(), tape.value(b.0).data());
    assert!(err < 1e-13, "{err:e}");
}

#[test]
fn self_block_is_equivariant_to_latent_order() {
    let cfg = ModelConfig {
        num_latents: 4,
        ..ModelConfig::tiny()
    };
    let model = OneBt::<f64>::new(cfg.clone(), 5).unwrap();
    let lat = random([4, cfg.latent_dim], 6);
    let perm = [2, 0, 3, 1];
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let l1 = LatentState(tape.constant(lat.clone()));
    let l2 = LatentState(tape.constant(permute_rows(&lat, &perm)));
    let a = model.self_attend_block(&mut tape, &vars, 0, l1, &mut ForwardCtx::eval()).unwrap();
    let b = model.self_attend_block(&mut tape, &vars, 0, l2, &mut ForwardCtx::eval()).unwrap();
    let a_perm = permute_rows(tape.value(a.0), &perm);
    let err = max_abs_diff(a_perm.data(), tape.value(b.0).data());
    assert!(err < 1e-13, "{err:e}");
}

#[test]
fn single_latent_self_attention_passes_value_through() {
    let cfg = ModelConfig {
        num_latents: 1,
        ..ModelConfig::tiny()
    };
    let model = OneBt::<f64>::new(cfg.clone(), 2).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    let idx = |n: &str| names.iter().position(|&m| m == n).unwrap();
    let lat = tape.constant(random([1, cfg.latent_dim], 3));
    let g = vars[idx("self.0.norm.gain")];
    let b = vars[idx("self.0.norm.bias")];
    let h = tape.layer_norm(lat, g, b, 1e-5).unwrap();
    let w = AttentionVars {
        q: vars[idx("self.0.attn.q_proj.weight")],
        k: vars[idx("self.0.attn.k_proj.weight")],
        v: vars[idx("self.0.attn.v_proj.weight")],
        out: vars[idx("self.0.attn.out_proj.weight")],
        out_bias: Some(vars[idx("self.0.attn.out_proj.bias")]),
        heads: cfg.self_heads,
        head_dim: cfg.self_head_dim,
    };
    let y = attention(&mut tape, &w, h, h, 0.0, &mut ForwardCtx::eval()).unwrap();
    let hv = tape.matmul(h, w.v).unwrap();
    let o = tape.matmul(hv, w.out).unwrap();
    let o = tape.add(o, w.out_bias.unwrap()).unwrap();
    assert!(max_abs_diff(tape.value(y).data(), tape.value(o).data()) < 1e-14);
}

#[test]
fn eight_blocks_preserve_latent_shape() {
    let cfg = ModelConfig {
        self_per_cross: 8,
        num_latents: 3,
        ..ModelConfig::tiny()
    };
    let model = OneBt::<f64>::new(cfg.clone(), 0).unwrap();
    let x = random_input::<f64>(&cfg, &mut stream(0, Stream::Synthetic));
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let tokens = tape.constant(model.tokenize(&x).unwrap().values);
    let mut lat = model.initial_latents(&vars);
    lat = model.cross_attend_block(&mut tape, &vars, lat, tokens, &mut ForwardCtx::eval()).unwrap();
    for i in 0..8 {
        lat = model.self_attend_block(&mut tape, &vars, i, lat, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(tape.shape(lat.0), &[3, cfg.latent_dim]);
    }
    assert!(model.self_attend_block(&mut tape, &vars, 8, lat, &mut ForwardCtx::eval()).is_err());
}

#[test]
fn zeroed_residual_updates_reduce_to_classifier_of_latents() {
    let mut model = tiny_model(9);
    fill_params(
        model.params_mut(),
        &["out_proj.weight", "out_proj.bias", "down.weight", "down.bias"],
        0.0,
    );
    let cfg = model.config().clone();
    let x = random_input::<f64>(&cfg, &mut stream(4, Stream::Synthetic));
    let logits = model.forward(&x).unwrap();

    // oracle: layer-norm each latent row with the final norm, average, apply head
    let p = |n: &str| model.params().by_name(n).unwrap().tensor.data().to_vec();
    let latents = p("latents");
    let (gain, bias) = (p("final_norm.gain"), p("final_norm.bias"));
    let (hw, hb) = (p("head.weight"), p("head.bias"));
    let d = cfg.latent_dim;
    let mut pooled = vec![0.0; d];
    for row in latents.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            pooled[j] += ((row[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j]) / cfg.num_latents as f64;
        }
    }
    for c in 0..cfg.num_classes {
        let want = hb[c] + (0..d).map(|j| pooled[j] * hw[j * cfg.num_classes + c]).sum::<f64>();
        assert!((logits[c] - want).abs() < 1e-12, "class {c}: {} vs {want}", logits[c]);
    }
    // and the result no longer depends on the input
    let y = random_input::<f64>(&cfg, &mut stream(5, Stream::Synthetic));
    assert_eq!(model.forward(&y).unwrap(), logits);
}

#[test]
fn forward_is_pure_and_order_sensitive() {
    let model = tiny_model(3);
    let cfg = model.config().clone();
    let x = random_input::<f64>(&cfg, &mut stream(8, Stream::Synthetic));
    let a = model.forward(&x).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(model.forward(&x.clone()).unwrap(), a);
    let rev: Vec<usize> = (0..cfg.seq_len).rev().collect();
    let b = model.forward(&permute_rows(&x, &rev)).unwrap();
    assert!(max_abs_diff(&a, &b) > 1e-9, "{a:?} vs {b:?}");
}

#[test]
fn zero_signal_tokens_differ_only_in_position_features() {
    let cfg = ModelConfig::tiny();
    let model = OneBt::<f64>::new(cfg.clone(), 0).unwrap();
    let tok = model.tokenize(&Tensor::zeros([cfg.seq_len, cfg.input_channels])).unwrap();
    assert_eq!(tok.width(), cfg.token_dim());
    for t in 0..cfg.seq_len {
        let row = tok.values.row(t);
        assert!(row[..cfg.input_channels].iter().all(|&v| v == 0.0));
    }
    assert_ne!(tok.values.row(0), tok.values.row(1));
}

#[test]
fn batched_and_single_forward_agree() {
    let model = tiny_model(4);
    let cfg = model.config().clone();
    let mut rng = stream(2, Stream::Synthetic);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| random_input(&cfg, &mut rng)).collect();
    let refs: Vec<&Tensor<f64>> = xs.iter().collect();
    let batch = model.forward_batch(&refs).unwrap();
    for (i, x) in xs.iter().enumerate() {
        assert_eq!(batch.row(i), model.forward(x).unwrap().as_slice());
    }
}

#[test]
fn enumerated_parameter_count_equals_closed_form_for_every_table_config() {
    let base = ModelConfig::default();
    let rows = preset("all").unwrap();
    assert_eq!(rows.len(), 15);
    for a in rows {
        let cfg = a.apply(&base);
        let model = OneBt::<f32>::new(cfg.clone(), 0).unwrap();
        let closed: u64 = count_params(&cfg).values().sum();
        assert_eq!(model.num_params() as u64, closed, "{a:?}");
    }
}

#[test]
fn distinct_seeds_give_distinct_latents() {
    let a = tiny_model(1);
    let b = tiny_model(2);
    let la = &a.params().by_name("latents").unwrap().tensor;
    let lb = &b.params().by_name("latents").unwrap().tensor;
    assert_ne!(la, lb);
    assert_eq!(la, &tiny_model(1).params().by_name("latents").unwrap().tensor);
}

#[test]
fn dropout_only_acts_in_training() {
    let model = tiny_model(6);
    let cfg = model.config().clone();
    let x = random_input::<f64>(&cfg, &mut stream(3, Stream::Synthetic));
    let run = |ctx: &mut ForwardCtx| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.bind(&mut tape);
        let y = model.logits_var(&mut tape, &vars, &x, ctx).unwrap();
        tape.value(y).data().to_vec()
    };
    let eval = run(&mut ForwardCtx::eval());
    assert_eq!(eval, model.forward(&x).unwrap());
    let t1 = run(&mut ForwardCtx::train(1));
    assert_ne!(t1, eval);
    assert_eq!(t1, run(&mut ForwardCtx::train(1)));
}
