//! Finite-difference checks of every tape op in double precision.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use super::{ConvGeom, RegionIndex, Tape, Var};

fn pseudo(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    })
}

/// Compare d(loss)/d(input) for every element of every input.
fn check<F>(inputs: Vec<ArrayD<f64>>, build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |vals: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<_> = vals.iter().map(|v| t.leaf(Arc::new(v.clone()), true)).collect();
        let out = build(&mut t, &vars);
        t.scalar(out)
    };
    let mut t = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| t.leaf(Arc::new(v.clone()), true)).collect();
    let out = build(&mut t, &vars);
    let grads = t.backward(out);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        for idx in 0..input.len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[k].as_slice_mut().unwrap()[idx] += h;
            minus[k].as_slice_mut().unwrap()[idx] -= h;
            let numeric = (run(&plus) - run(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
            assert!(err < 1e-5, "input {k} elem {idx}: analytic {a} numeric {numeric}");
        }
    }
}

/// Weighted sum of all elements, so every output element gets a distinct cotangent.
fn probe(t: &mut Tape<f64>, x: Var) -> Var {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(pseudo(&shape, 99));
    let zero = t.constant(ArrayD::zeros(IxDyn(&shape)));
    // sum(w * x) is not an op; use l1 of (x - 0) plus ls to a target to mix signs
    let a = t.ls_target(x, 0.1);
    let b = t.l1_mean(x, w);
    let c = t.l1_mean(x, zero);
    t.weighted_sum(&[(a, 3.0), (b, 1.0), (c, 0.5)])
}

#[test]
fn conv2d_gradients() {
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (4, 2, 2), (4, 1, 2)] {
        check(
            vec![pseudo(&[2, 2, 6, 5], 1), pseudo(&[3, 2, k, k], 2), pseudo(&[3], 3)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(k, s, p));
                probe(t, y)
            },
        );
    }
}

#[test]
fn conv_transpose_gradients() {
    check(vec![pseudo(&[2, 3, 3, 4], 4), pseudo(&[3, 2, 3, 3], 5), pseudo(&[2], 6)], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeom::new(3, 2, 1));
        assert_eq!(t.value(y).shape(), &[2, 2, 6, 8]);
        probe(t, y)
    });
}

#[test]
fn pad_norm_activation_gradients() {
    check(vec![pseudo(&[2, 2, 4, 5], 7)], |t, v| {
        let p = t.reflect_pad(v[0], 2);
        let n = t.instance_norm(p);
        let a = t.leaky_relu(n, 0.2);
        let b = t.tanh(a);
        probe(t, b)
    });
    check(vec![pseudo(&[1, 3, 4, 4], 8)], |t, v| {
        let r = t.relu(v[0]);
        let pooled = t.avg_pool2(r);
        probe(t, pooled)
    });
}

#[test]
fn concat_add_gradients() {
    check(vec![pseudo(&[1, 2, 3, 3], 9), pseudo(&[1, 1, 3, 3], 10), pseudo(&[1, 3, 3, 3], 11)], |t, v| {
        let c = t.concat(&[v[0], v[1]]);
        let s = t.add(c, v[2]);
        probe(t, s)
    });
}

#[test]
fn region_pool_gradients() {
    // 4x4 source with three regions, 2x2 destination
    let src = RegionIndex::new(
        4,
        4,
        [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 1, 2, 2, 2, 1]
            .iter()
            .map(|&r| Some(r as u32))
            .collect(),
        3,
    );
    let dst = RegionIndex::new(2, 2, vec![Some(0), Some(1), None, Some(2)], 3);
    let src = Arc::new(vec![src]);
    let dst = Arc::new(vec![dst]);
    check(vec![pseudo(&[1, 2, 4, 4], 12)], move |t, v| {
        let y = t.region_pool(v[0], src.clone(), dst.clone());
        probe(t, y)
    });
}

#[test]
fn softmax_cross_entropy_gradients() {
    let labels = Arc::new(vec![0u8, 2, 1, 1, 0, 2, 2, 1]);
    check(vec![pseudo(&[2, 3, 2, 2], 13)], {
        let labels = labels.clone();
        move |t, v| t.softmax_cross_entropy(v[0], labels.clone())
    });
    check(vec![pseudo(&[2, 3, 2, 2], 17)], move |t, v| t.softmax_cross_entropy_weighted(v[0], labels.clone(), &[0.5, 3.0, 1.25]));
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Arc::new(pseudo(&[1, 1, 4, 4], 1)), false);
    let w = t.leaf(Arc::new(pseudo(&[1, 1, 3, 3], 2)), true);
    let y = t.conv2d(x, w, None, ConvGeom::new(3, 1, 1));
    let l = t.ls_target(y, 1.0);
    let g = t.backward(l);
    assert!(g.get(x).is_none());
    assert!(g.get(w).is_some());
}
