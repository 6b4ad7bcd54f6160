//! Tensors, reverse-mode autodiff, seeded randomness and gradient checking.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Bindings, ParamStore};
pub use rng::{fnv1a64, Rng, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax, Real, Tensor};

pub(crate) use tape::for_each_patch_index;

#[cfg(test)]
mod tests {
    use super::*;

    fn random_param(rng: &mut Rng, shape: Vec<usize>, std: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normal_vec(n).iter().map(|v| v * std).collect())
            .unwrap()
            .with_grad(true)
    }

    /// Every differentiable op, checked against central differences in f64.
    fn check(build: impl Fn(&mut Tape<f64>, &Bindings) -> crate::Result<Var>, params: &mut ParamStore) {
        let r = grad_check(build, params, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = Rng::new(11);
        let mut p = ParamStore::new();
        p.insert("a", random_param(&mut rng, vec![3, 4], 1.0));
        p.insert("b", random_param(&mut rng, vec![3, 4], 1.0));
        p.insert("s", Tensor::from_vec(vec![1.7]).with_grad(true));
        p.insert("v", random_param(&mut rng, vec![4], 1.0));
        check(
            |t, b| {
                let (a, bb, s, v) = (b.var("a")?, b.var("b")?, b.var("s")?, b.var("v")?);
                let x = t.mul(a, bb)?;
                let x = t.add(x, s)?;
                let y = t.sub(a, bb)?;
                let y = t.div(y, s)?;
                let z = t.add_broadcast(y, v)?;
                let z = t.sigmoid(z);
                let w = t.silu(x);
                let w = t.gelu(w);
                let q = t.square(w);
                let q = t.scale(q, 0.3);
                let q = t.add_scalar(q, 2.0);
                let m = t.mul(z, q)?;
                let m = t.mul(m, s)?;
                let d = t.div(m, s)?;
                Ok(t.mean(d))
            },
            &mut p,
        );
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = Rng::new(12);
        let mut p = ParamStore::new();
        p.insert("x", random_param(&mut rng, vec![2, 3, 4], 1.0));
        p.insert("y", random_param(&mut rng, vec![2, 2, 4], 1.0));
        p.insert("table", random_param(&mut rng, vec![3, 4], 1.0));
        p.insert("w", random_param(&mut rng, vec![2, 3], 1.0));
        p.insert("pr", random_param(&mut rng, vec![3, 4], 1.0));
        check(
            |t, b| {
                let (x, y) = (b.var("x")?, b.var("y")?);
                let c = t.concat_tokens(y, x)?; // [2,5,4]
                let d = t.drop_tokens(c, 1)?; // [2,4,4]
                let s1 = t.slice_last(d, 1, 2)?;
                let s2 = t.slice_last(d, 0, 1)?;
                let cat = t.concat_last(&[s2, s1])?; // [2,4,3]
                let r = t.reshape(cat, vec![8, 3])?;
                let mr = t.mean_rows(r)?; // [3]
                let g = t.gather_rows(b.var("table")?, &[2, 0, 2])?; // [3,4]
                let gs = t.sum(g);
                let wt = t.weight_tokens(b.var("w")?, b.var("pr")?)?; // [2,3,4]
                let wt2 = t.weight_tokens(b.var("w")?, x)?;
                let e = t.mse(wt, wt2)?;
                let m = t.square(mr);
                let m = t.sum(m);
                let out = t.add(m, gs)?;
                t.add(out, e)
            },
            &mut p,
        );
    }

    #[test]
    fn linear_layernorm_softmax_gradients() {
        let mut rng = Rng::new(13);
        let mut p = ParamStore::new();
        p.insert("x", random_param(&mut rng, vec![2, 3, 5], 1.0));
        p.insert("w", random_param(&mut rng, vec![5, 4], 0.5));
        p.insert("b", random_param(&mut rng, vec![4], 0.5));
        p.insert("target", random_param(&mut rng, vec![2, 3, 4], 1.0));
        check(
            |t, b| {
                let h = t.layernorm(b.var("x")?);
                let h = t.linear(h, b.var("w")?, Some(b.var("b")?))?;
                let s = t.softmax(h)?;
                t.mse(s, b.var("target")?)
            },
            &mut p,
        );
    }

    #[test]
    fn modulation_and_attention_gradients() {
        let mut rng = Rng::new(14);
        let mut p = ParamStore::new();
        p.insert("x", random_param(&mut rng, vec![2, 3, 4], 1.0));
        p.insert("kv", random_param(&mut rng, vec![2, 5, 4], 1.0));
        p.insert("shift", random_param(&mut rng, vec![2, 4], 0.5));
        p.insert("scale", random_param(&mut rng, vec![2, 4], 0.5));
        p.insert("gate", random_param(&mut rng, vec![2, 4], 0.5));
        check(
            |t, b| {
                let x = b.var("x")?;
                let kv = b.var("kv")?;
                let m = t.modulate(x, b.var("shift")?, b.var("scale")?)?;
                let v = t.scale(kv, 0.7);
                let a = t.attention(m, kv, v, 2)?;
                let r = t.gated_residual(x, b.var("gate")?, a)?;
                let sq = t.square(r);
                Ok(t.mean(sq))
            },
            &mut p,
        );
    }

    #[test]
    fn unpatchify_gradient_is_inverse_map() {
        let mut rng = Rng::new(15);
        let mut p = ParamStore::new();
        p.insert("x", random_param(&mut rng, vec![1, 4, 2 * 2 * 3], 1.0));
        p.insert("w", random_param(&mut rng, vec![1, 4, 4, 3], 1.0));
        check(
            |t, b| {
                let img = t.unpatchify(b.var("x")?, 2, 3)?;
                let prod = t.mul(img, b.var("w")?)?;
                Ok(t.sum(prod))
            },
            &mut p,
        );
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f32>::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let a: Vec<f32> = (0..12).map(|v| v as f32 * 0.25 - 1.0).collect();
        let i3 = tape.constant(vec![3, 3], eye).unwrap();
        let av = tape.constant(vec![3, 4], a.clone()).unwrap();
        let out = tape.matmul(i3, av).unwrap();
        assert_eq!(tape.value(out), a.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![4, 2], vec![0.0; 8]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn layernorm_normalizes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.layernorm(x);
        let v = tape.value(y);
        let mean: f32 = v.iter().sum::<f32>() / 3.0;
        let var: f32 = v.iter().map(|a| (a - mean).powi(2)).sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn attention_single_matching_key_returns_its_value() {
        // one key equal to one query with large magnitude: softmax mass concentrates
        let d = 4;
        let q = vec![10.0, 0.0, 0.0, 0.0];
        let keys = [vec![10.0, 0.0, 0.0, 0.0], vec![0.0, 10.0, 0.0, 0.0], vec![0.0, 0.0, -10.0, 0.0]];
        let vals = [vec![1.0, 2.0, 3.0, 4.0], vec![-5.0, 0.0, 5.0, 1.0], vec![7.0, 7.0, 7.0, 7.0]];
        let mut tape = Tape::<f64>::new();
        let qv = tape.constant(vec![1, 1, d], q.clone()).unwrap();
        let kv = tape.constant(vec![1, 3, d], keys.concat()).unwrap();
        let vv = tape.constant(vec![1, 3, d], vals.concat()).unwrap();
        let out = tape.attention(qv, kv, vv, 1).unwrap();
        // brute-force softmax-weighted sum
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..d {
            let expect: f64 = (0..3).map(|i| e[i] / z * vals[i][j]).sum();
            assert!((tape.value(out)[j] - expect).abs() < 1e-12);
            assert!((tape.value(out)[j] - vals[0][j]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(vec![4], vec![50.0, -50.0, 49.0, -49.0]).unwrap();
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s);
        assert!(v.iter().all(|p| p.is_finite() && *p >= 0.0));
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(&Tensor::full(vec![2, 2], 0.5));
        let x = tape.leaf(&Tensor::full(vec![1, 2], 1.0).with_grad(true));
        let y = tape.linear(x, w, None).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
    }
}
