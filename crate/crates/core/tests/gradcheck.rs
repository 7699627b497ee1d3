//! Reverse-mode gradients against central finite differences at 64-bit.
//!
//! Errors are measured per tensor: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.

use onebt::model::{ForwardCtx, ModelConfig, OneBt};
use onebt::rng::{stream, Stream};
use onebt::{Result, Tape, Tensor, Var};
use rand::Rng;

const H: f64 = 1e-4;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nn);
    if den == 0.0 {
        diff
    } else {
        diff / den
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Stream::Synthetic);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

/// Scalarises `f` with fixed random weights so that every output element
/// contributes a distinct amount, then compares input gradients.
fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let y = f(&mut tape, &vars).unwrap();
        let shape = tape.shape(y).to_vec();
        let w = tape.constant(random(&shape, 99));
        let weighted = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(weighted);
        let value = tape.value(loss).item();
        if !grads {
            return (value, vec![]);
        }
        let g = tape.gradients(loss).unwrap();
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| g.get(v).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; x.numel()]))
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *slot = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

macro_rules! primitive {
    ($name:ident, $tol:expr, [$($shape:expr),*], |$t:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let mut seed = 0;
            let inputs: Vec<Tensor<f64>> = vec![$({ seed += 1; random(&$shape, seed) }),*];
            let err = check(&inputs, |$t, $v| $body);
            assert!(err < $tol, "{}: relative error {err:e}", stringify!($name));
        }
    };
}

primitive!(matmul, 1e-6, [[3, 4], [4, 2]], |t, v| t.matmul(v[0], v[1]));
primitive!(transpose, 1e-4, [[3, 5]], |t, v| t.transpose(v[0]));
primitive!(add_same_shape, 1e-4, [[3, 4], [3, 4]], |t, v| t.add(v[0], v[1]));
primitive!(add_broadcast, 1e-4, [[3, 4], [4]], |t, v| t.add(v[0], v[1]));
primitive!(mul, 1e-4, [[2, 5], [2, 5]], |t, v| t.mul(v[0], v[1]));
primitive!(scale, 1e-4, [[2, 3]], |t, v| Ok(t.scale(v[0], 0.7)));
primitive!(gelu, 1e-4, [[3, 4]], |t, v| Ok(t.gelu(v[0])));
primitive!(softmax_rows, 1e-4, [[3, 5]], |t, v| t.softmax_rows(v[0]));
primitive!(layer_norm, 1e-4, [[4, 6], [6], [6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
primitive!(mean_axis_rows, 1e-4, [[4, 3]], |t, v| t.mean_axis(v[0], 0));
primitive!(mean_axis_cols, 1e-4, [[4, 3]], |t, v| t.mean_axis(v[0], 1));
primitive!(concat_last, 1e-4, [[5, 3], [5, 4]], |t, v| t.concat_last_axis(v[0], v[1]));
primitive!(concat_rows, 1e-4, [[1, 3], [2, 3]], |t, v| t.concat_rows(&[v[0], v[1]]));
primitive!(slice_last, 1e-4, [[3, 6]], |t, v| t.slice_last(v[0], 2, 3));
primitive!(reshape, 1e-4, [[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
primitive!(sum_all, 1e-4, [[2, 3]], |t, v| Ok(t.sum_all(v[0])));
primitive!(cross_entropy, 1e-4, [[4, 2]], |t, v| t.cross_entropy_label_smoothed(v[0], &[0, 1, 1, 0], 0.1));
primitive!(cross_entropy_unsmoothed, 1e-4, [[3, 3]], |t, v| t.cross_entropy_label_smoothed(v[0], &[2, 0, 1], 0.0));
primitive!(dropout_fixed_mask, 1e-4, [[4, 5]], |t, v| {
    let mut rng = stream(5, Stream::Dropout);
    t.dropout(v[0], 0.3, true, &mut rng)
});
primitive!(attention_chain, 1e-4, [[3, 4], [5, 4], [4, 4]], |t, v| {
    let q = t.matmul(v[0], v[2])?;
    let kt = t.transpose(v[1])?;
    let s = t.matmul(q, kt)?;
    let p = t.softmax_rows(s)?;
    t.matmul(p, v[1])
});

/// Every parameter of the tiny model against finite differences of the
/// label-smoothed batch loss.
fn end_to_end(training: bool) -> Vec<(String, f64)> {
    let cfg = ModelConfig::tiny();
    let mut model = OneBt::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = stream(11, Stream::Synthetic);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| onebt::model::random_input(&cfg, &mut rng)).collect();
    let labels = [0, 1, 1];
    let ctx = || if training { ForwardCtx::train(42) } else { ForwardCtx::eval() };

    let loss_of = |m: &mut OneBt<f64>, grads: bool| -> f64 {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let refs: Vec<&Tensor<f64>> = xs.iter().collect();
        let logits = m.logits_batch(&mut tape, &vars, &refs, &mut ctx()).unwrap();
        let loss = tape.cross_entropy_label_smoothed(logits, &labels, 0.1).unwrap();
        if grads {
            m.params_mut().zero_grad();
            tape.backward(loss, m.params_mut()).unwrap();
        }
        tape.value(loss).item()
    };

    loss_of(&mut model, true);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let mut out = Vec::new();
    for i in 0..model.params().len() {
        let n = model.params().get(i).tensor.numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().get(i).tensor.data()[j];
            model.params_mut().get_mut(i).tensor.data_mut()[j] = orig + H;
            let plus = loss_of(&mut model, false);
            model.params_mut().get_mut(i).tensor.data_mut()[j] = orig - H;
            let minus = loss_of(&mut model, false);
            model.params_mut().get_mut(i).tensor.data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * H);
        }
        let name = model.params().get(i).name.clone();
        assert!(analytic[i].iter().any(|&g| g != 0.0), "{name}: gradient is identically zero");
        out.push((name, rel_err(&analytic[i], &numeric)));
    }
    out
}

#[test]
fn every_parameter_of_tiny_model_eval_mode() {
    let errs = end_to_end(false);
    assert_eq!(errs.len(), OneBt::<f64>::new(ModelConfig::tiny(), 0).unwrap().params().len());
    for (name, e) in errs {
        assert!(e < 1e-3, "{name}: relative error {e:e}");
    }
}

#[test]
fn every_parameter_of_tiny_model_with_fixed_dropout_masks() {
    for (name, e) in end_to_end(true) {
        assert!(e < 1e-3, "{name}: relative error {e:e}");
    }
}

#[test]
fn repeated_backward_accumulates() {
    let mut params = onebt::tensor::ParamSet::new();
    params.add("w", random(&[2, 2], 1)).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&params, params.id_of("w").unwrap());
    let loss = tape.sum_all(w);
    tape.backward(loss, &mut params).unwrap();
    tape.backward(loss, &mut params).unwrap();
    assert_eq!(params.get(0).grad.data(), &[2.0; 4]);
}

#[test]
fn backward_on_non_scalar_is_contract_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(random(&[2, 2], 1));
    assert!(matches!(tape.gradients(x), Err(onebt::Error::Contract(_))));
}
