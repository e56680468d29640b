//! Central finite-difference verification of every analytic gradient, in
//! float64: elementary ops, the merge encoder, the transformer, and the full
//! compressed-prefix loss graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ktm_core::encoder::{InitStrategy, MergeEncoder};
use ktm_core::model::{Forward, LoraConfig, LoraSet, ModelConfig, ModelParams};
use ktm_core::params::ParamStore;
use ktm_core::tensor::{Graph, NodeId};
use ktm_core::train::{masked_nll, sample_loss, TrainSample};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

/// Check d(loss)/d(param) for every trainable parameter against central
/// differences, on a few random coordinates per parameter.
fn check<F>(store: &mut ParamStore<f64>, build: F, label: &str, rng: &mut ChaCha8Rng)
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> NodeId,
{
    let mut g: Graph<f64> = Graph::new();
    let loss = build(store, &mut g);
    assert_eq!(g.shape(loss), (1, 1), "{label}: loss must be scalar");
    g.backward(loss).unwrap();
    let leaves: Vec<_> = g.param_leaves().to_vec();
    assert!(!leaves.is_empty(), "{label}: no trainable leaves");

    // a parameter used in several places appears as several leaves; its full
    // gradient is the sum over all of them
    let mut grads: std::collections::BTreeMap<_, Vec<f64>> = std::collections::BTreeMap::new();
    for (pid, node) in leaves {
        if let Some(grad) = g.grad(node) {
            let acc = grads.entry(pid).or_insert_with(|| vec![0.0; grad.len()]);
            for (a, &v) in acc.iter_mut().zip(grad) {
                *a += v;
            }
        }
    }
    for (pid, grad) in grads {
        let len = grad.len();
        let n_coords = len.min(4);
        for _ in 0..n_coords {
            let i = rng.gen_range(0..len);
            let orig = store.data(pid)[i];
            store.data_mut(pid)[i] = orig + H;
            let mut gp = Graph::new();
            let lp = build(store, &mut gp);
            let fp = gp.data(lp)[0];
            store.data_mut(pid)[i] = orig - H;
            let mut gm = Graph::new();
            let lm = build(store, &mut gm);
            let fm = gm.data(lm)[0];
            store.data_mut(pid)[i] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let analytic = grad[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                err <= TOL,
                "{label}: param {} coord {i}: analytic {analytic} vs numeric {numeric} (rel err {err:.2e})",
                store.entry(pid).name
            );
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| ktm_core::params::gauss(rng) * scale).collect()
}

#[test]
fn elementary_op_gradients() {
    // 12 small graphs over the op family, multiple random draws each
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for trial in 0..3u64 {
        let mut rng_init = ChaCha8Rng::seed_from_u64(200 + trial);

        // matmul chain -> mean
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", randn(&mut rng_init, 12, 1.0), 3, 4, true);
        let b = store.add("b", randn(&mut rng_init, 20, 1.0), 4, 5, true);
        check(
            &mut store,
            |s, g| {
                let an = s.node(g, a);
                let bn = s.node(g, b);
                let y = g.matmul(an, bn).unwrap();
                g.mean_all(y)
            },
            "matmul",
            &mut rng,
        );

        // transposed matmul, add, row-broadcast, elementwise mul, scale
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", randn(&mut rng_init, 12, 1.0), 3, 4, true);
        let b = store.add("b", randn(&mut rng_init, 20, 1.0), 5, 4, true);
        let row = store.add("row", randn(&mut rng_init, 5, 1.0), 1, 5, true);
        check(
            &mut store,
            |s, g| {
                let an = s.node(g, a);
                let bn = s.node(g, b);
                let rn = s.node(g, row);
                let y = g.matmul_nt(an, bn).unwrap();
                let y = g.add_row(y, rn).unwrap();
                let y2 = g.mul(y, y).unwrap();
                let y2 = g.scale(y2, 0.7);
                let y = g.add(y, y2).unwrap();
                g.sum_all(y)
            },
            "matmul_nt/add_row/mul/scale",
            &mut rng,
        );

        // gelu
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", randn(&mut rng_init, 15, 2.0), 3, 5, true);
        check(
            &mut store,
            |s, g| {
                let an = s.node(g, a);
                let y = g.gelu(an);
                g.mean_all(y)
            },
            "gelu",
            &mut rng,
        );

        // softmax weighted by a fixed random matrix (plain sum is gradient-free)
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", randn(&mut rng_init, 12, 1.0), 3, 4, true);
        let w = randn(&mut rng_init, 12, 1.0);
        check(
            &mut store,
            move |s, g| {
                let an = s.node(g, a);
                let p = g.softmax_rows(an).unwrap();
                let wn = g.constant(w.clone(), 3, 4);
                let y = g.mul(p, wn).unwrap();
                g.sum_all(y)
            },
            "softmax_rows",
            &mut rng,
        );

        // log-softmax + masked NLL
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", randn(&mut rng_init, 20, 1.0), 4, 5, true);
        check(
            &mut store,
            |s, g| {
                let an = s.node(g, a);
                masked_nll(g, an, &[Some(1), None, Some(4), Some(0)]).unwrap()
            },
            "masked_nll",
            &mut rng,
        );

        // layer norm with affine params
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", randn(&mut rng_init, 18, 1.0), 3, 6, true);
        let gm = store.add("g", randn(&mut rng_init, 6, 0.3), 1, 6, true);
        let bt = store.add("b", randn(&mut rng_init, 6, 0.3), 1, 6, true);
        let w = randn(&mut rng_init, 18, 1.0);
        check(
            &mut store,
            move |s, g| {
                let an = s.node(g, a);
                let gn = s.node(g, gm);
                let bn = s.node(g, bt);
                let y = g.layer_norm(an, gn, bn, 1e-5).unwrap();
                let wn = g.constant(w.clone(), 3, 6);
                let y = g.mul(y, wn).unwrap();
                g.mean_all(y)
            },
            "layer_norm",
            &mut rng,
        );

        // reshape, slice, concat, gather, mean_rows
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", randn(&mut rng_init, 24, 1.0), 4, 6, true);
        check(
            &mut store,
            |s, g| {
                let an = s.node(g, a);
                let flat = g.reshape(an, 2, 12).unwrap();
                let left = g.slice_cols(flat, 0, 5).unwrap();
                let right = g.slice_cols(flat, 5, 7).unwrap();
                let l2 = g.mul(left, left).unwrap();
                let top = g.slice_rows(an, 0, 2).unwrap();
                let gat = g.gather_rows(an, &[3, 1, 1]).unwrap();
                let cat = g.concat_rows(&[top, gat]).unwrap();
                let m = g.mean_rows(cat);
                let parts = [g.sum_all(l2), g.sum_all(right), g.sum_all(m)];
                let y = g.concat_cols(&parts).unwrap();
                g.sum_all(y)
            },
            "reshape/slice/concat/gather",
            &mut rng,
        );
    }
}

#[test]
fn encoder_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for (trial, k) in [(0u64, 2usize), (1, 3), (2, 4)] {
        let d = 6;
        let mut store: ParamStore<f64> = ParamStore::new();
        let enc = MergeEncoder::init(&mut store, k, d, InitStrategy::RandomFull, 40 + trial).unwrap();
        let mut rng_in = ChaCha8Rng::seed_from_u64(50 + trial);
        let block = randn(&mut rng_in, k * d, 0.5);
        let w = randn(&mut rng_in, d, 1.0);
        check(
            &mut store,
            move |s, g| {
                let bn = g.constant(block.clone(), k, d);
                let out = enc.forward(g, s, bn).unwrap();
                let wn = g.constant(w.clone(), 1, d);
                let y = g.mul(out, wn).unwrap();
                g.sum_all(y)
            },
            &format!("encoder K={k}"),
            &mut rng,
        );
    }
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig { vocab_size: 11, embed_dim: 8, n_layers: 2, n_heads: 2, max_seq_len: 8, dropout_p: 0.0 }
}

#[test]
fn transformer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for trial in 0..3u64 {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = ModelParams::init(&mut store, &cfg, 60 + trial).unwrap();
        let mut lora = LoraSet::init(&mut store, &cfg, &LoraConfig { rank: 2, alpha: 4.0, dropout_p: 0.0 }, 70 + trial);
        // give the adapter B factors nonzero values so their gradients flow
        let b_ids: Vec<_> = lora.adapters.iter().map(|a| a.b).collect();
        let mut rng_b = ChaCha8Rng::seed_from_u64(80 + trial);
        for bid in b_ids {
            let n = store.data(bid).len();
            *store.data_mut(bid) = randn(&mut rng_b, n, 0.05);
        }
        lora.adapters.iter_mut().for_each(|a| a.dropout_p = 0.0);

        let mut rng_in = ChaCha8Rng::seed_from_u64(90 + trial);
        let inputs = randn(&mut rng_in, 4 * cfg.embed_dim, 0.5);
        let lora_ref = lora;
        check(
            &mut store,
            move |s, g| {
                let x = g.constant(inputs.clone(), 4, 8);
                let logits = Forward::new(s, &ModelParams::from_store(s, &tiny_cfg()).unwrap(), Some(&lora_ref))
                    .forward_lm(g, x)
                    .unwrap();
                masked_nll(g, logits, &[None, Some(3), Some(7), Some(1)]).unwrap()
            },
            &format!("transformer trial {trial}"),
            &mut rng,
        );
        let _ = model;
    }
}

#[test]
fn full_compressed_loss_gradients() {
    // the end-to-end path: embedding gather -> merge encoder -> transformer
    // -> masked NLL, gradients flowing into every stage
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for trial in 0..2u64 {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = ModelParams::init(&mut store, &cfg, 61 + trial).unwrap();
        let mut lora = LoraSet::init(&mut store, &cfg, &LoraConfig { rank: 2, alpha: 4.0, dropout_p: 0.0 }, 71 + trial);
        let b_ids: Vec<_> = lora.adapters.iter().map(|a| a.b).collect();
        let mut rng_b = ChaCha8Rng::seed_from_u64(81 + trial);
        for bid in b_ids {
            let n = store.data(bid).len();
            *store.data_mut(bid) = randn(&mut rng_b, n, 0.05);
        }
        lora.adapters.iter_mut().for_each(|a| a.dropout_p = 0.0);
        let encoder = MergeEncoder::init(&mut store, 3, cfg.embed_dim, InitStrategy::RandomFull, 41 + trial).unwrap();

        let sample = TrainSample {
            prompt_tokens: vec![4, 5, 6, 7, 8, 9, 10],
            target_tokens: vec![2, 3, 1],
        };
        check(
            &mut store,
            move |s, g| {
                let m = ModelParams::from_store(s, &tiny_cfg()).unwrap();
                sample_loss(g, s, &m, Some(&lora), &encoder, &sample, 0, false, 0).unwrap()
            },
            &format!("full path trial {trial}"),
            &mut rng,
        );
        let _ = model;
    }
}
