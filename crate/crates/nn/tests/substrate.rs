use isac_nn::gradcheck::{check, GradCheckConfig};
use isac_nn::layers::{elementwise_cross_attention, Grif, LayerNorm, Mlp};
use isac_nn::{
    read_checkpoint, write_checkpoint, Adam, AdamConfig, Graph, Init, ParamStore, Tensor,
};
use proptest::prelude::*;

fn ramp(shape: &[usize], offset: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i as f64 * 0.37 + offset).sin()) * 0.9)
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

#[test]
fn elementary_ops_pass_gradcheck() {
    let mut store = ParamStore::new(21);
    let a = store.add("a", vec![2, 3, 4], Init::Uniform(1.0));
    let b = store.add("b", vec![2, 4, 3], Init::Uniform(1.0));
    let c = store.add("c", vec![4], Init::Uniform(1.0));
    let ln = LayerNorm::new(&mut store, "ln", 4);
    let rep = check(&mut store, GradCheckConfig::default(), |g, p| {
        let t = g.transpose_last(p[b])?;
        let s = g.sub(p[a], t)?;
        let s = g.mul(s, p[c])?;
        let n = ln.forward(g, p, s)?;
        let sm = g.softmax(n);
        let left = g.slice_last(sm, 0, 2)?;
        let right = g.slice_last(s, 1, 3)?;
        let cat = g.concat(&[left, right])?;
        let pooled = g.mean_axis1(cat)?;
        let y = g.bmm(p[a], p[b])?;
        let ym = g.mean(y);
        let sig = g.sigmoid(pooled);
        let sc = g.scale(sig, 3.0);
        let l = g.mse(sc, &[0.5; 10])?;
        let out = g.add(l, ym)?;
        Ok(out)
    })
    .unwrap();
    assert!(rep.max_rel_error() < 1e-5, "{:?}", rep.worst());
}

#[test]
fn cross_attention_passes_gradcheck() {
    let mut store = ParamStore::new(22);
    let q = store.add("q", vec![3, 6], Init::Uniform(1.5));
    let k = store.add("k", vec![3, 6], Init::Uniform(1.5));
    let v = store.add("v", vec![3, 6], Init::Uniform(1.5));
    let rep = check(&mut store, GradCheckConfig::default(), |g, p| {
        let o = elementwise_cross_attention(g, p[q], p[k], p[v])?;
        g.mse(o, &[0.25; 18])
    })
    .unwrap();
    assert!(rep.max_rel_error() < 1e-5, "{:?}", rep.worst());
}

#[test]
fn strided_conv_passes_gradcheck() {
    let mut store = ParamStore::new(23);
    let x = store.add("x", vec![1, 2, 5, 5], Init::Uniform(1.0));
    let w = store.add("w", vec![3, 2, 3, 3], Init::Uniform(1.0));
    let bias = store.add("bias", vec![3], Init::Uniform(1.0));
    let rep = check(&mut store, GradCheckConfig::default(), |g, p| {
        let y = g.conv2d(p[x], p[w], Some(p[bias]), 2)?;
        let y = g.sigmoid(y);
        Ok(g.mean(y))
    })
    .unwrap();
    assert!(rep.max_rel_error() < 1e-5, "{:?}", rep.worst());
}

#[test]
fn grif_passes_gradcheck() {
    let mut store = ParamStore::new(24);
    let grif = Grif::new(&mut store, "grif", 2);
    let a = ramp(&[4, 2], 0.1);
    let b = ramp(&[4, 2], 1.7);
    let rep = check(&mut store, GradCheckConfig::default(), |g, p| {
        let av = g.input(a.clone());
        let bv = g.input(b.clone());
        let y = grif.forward(g, p, av, bv)?;
        g.mse(y, &[0.0; 8])
    })
    .unwrap();
    assert!(rep.max_rel_error() < 1e-5, "{:?}", rep.worst());
}

#[test]
fn full_batch_training_loss_decreases_every_epoch() {
    let mut store = ParamStore::new(3);
    let mlp = Mlp::new(&mut store, "mlp", &[2, 8, 1]);
    let x = ramp(&[16, 2], 0.0);
    let target: Vec<f64> = x
        .data()
        .chunks(2)
        .map(|r| 0.5 * r[0] - 0.3 * r[1] + 0.1)
        .collect();
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-2,
        ..Default::default()
    });
    let mut prev = f64::INFINITY;
    for _ in 0..10 {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.input(x.clone());
        let y = mlp.forward(&mut g, &p, xv).unwrap();
        let loss = g.mse(y, &target).unwrap();
        let l = g.value(loss)[0];
        assert!(l < prev, "loss rose from {prev} to {l}");
        prev = l;
        g.backward(loss).unwrap();
        store.collect_grads(&g, &p);
        adam.step(&mut store);
    }
}

proptest! {
    #[test]
    fn checkpoint_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5),
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::new(seed);
        for (i, s) in shapes.iter().enumerate() {
            store.add(&format!("p{i}"), s.clone(), Init::Uniform(3.0));
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for ((name, t), (n0, t0)) in back.iter().zip(store.iter()) {
            prop_assert_eq!(name.as_str(), n0);
            prop_assert_eq!(t.shape(), t0.shape());
            for (a, b) in t.data().iter().zip(t0.data()) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
