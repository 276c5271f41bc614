use super::*;
use crate::windows::GridGeometry;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const C: usize = 8;

fn encoder(blocks: usize, seed: u64) -> (Encoder, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        blocks,
        heads: 2,
        ffn_expansion: 2,
        c_model: C,
    };
    let enc = Encoder::new(&cfg, &mut store, &mut rng).unwrap();
    (enc, store)
}

fn zero(store: &mut ParamStore<f64>, id: ParamId) {
    let n = store.get(id).numel();
    store.set(id, &vec![0.0; n]).unwrap();
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng).unwrap()
}

/// Level maps at strides 16..2 of a `16·h × 16·w` image.
fn pyramid_tensors(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    [1, 2, 4, 8].iter().map(|&s| randn(&[h * s, w * s, C], rng)).collect()
}

fn bind_pyramid(g: &mut Graph<f64>, maps: &[Tensor<f64>]) -> Pyramid {
    let v: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();
    Pyramid {
        levels: v.try_into().unwrap(),
    }
}

fn matrix(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn mm(a: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    a.iter()
        .map(|row| {
            (0..dout)
                .map(|o| (0..din).map(|i| row[i] * w.at(&[i, o])).sum())
                .collect()
        })
        .collect()
}

/// Straight-line multi-head attention.
fn mha_oracle(store: &ParamStore<f64>, prm: &AttentionParams, q: &[Vec<f64>], kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (qp, kp, vp) = (
        mm(q, store.get(prm.wq)),
        mm(kv, store.get(prm.wk)),
        mm(kv, store.get(prm.wv)),
    );
    let d = C / prm.heads;
    let mut out = vec![vec![0.0; C]; q.len()];
    for h in 0..prm.heads {
        for (i, qi) in qp.iter().enumerate() {
            let s: Vec<f64> = kp
                .iter()
                .map(|kj| (h * d..(h + 1) * d).map(|c| qi[c] * kj[c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for (j, vj) in vp.iter().enumerate() {
                let a = (s[j] - m).exp() / z;
                for c in h * d..(h + 1) * d {
                    out[i][c] += a * vj[c];
                }
            }
        }
    }
    mm(&out, store.get(prm.wo))
}

fn layer_norm_oracle(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let mu = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / r.len() as f64;
            r.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn assert_close(got: &Tensor<f64>, want: &[Vec<f64>], tol: f64) {
    let flat: Vec<f64> = want.concat();
    assert_eq!(got.numel(), flat.len());
    for (i, (a, b)) in got.data().iter().zip(&flat).enumerate() {
        assert!((a - b).abs() <= tol, "element {i}: {a} vs {b}");
    }
}

#[test]
fn single_key_attention_projects_the_value() {
    let (enc, store) = encoder(1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prm = &enc.blocks()[0].cross;
    let (qt, vt) = (randn(&[3, C], &mut rng), randn(&[1, C], &mut rng));
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let (q, kv) = (g.constant(qt), g.constant(vt.clone()));
    let out = multi_head_attention(&mut g, &p, prm, q, kv).unwrap();
    let proj = mm(&mm(&matrix(&vt), store.get(prm.wv)), store.get(prm.wo));
    for row in g.data(out).chunks(C) {
        for (a, b) in row.iter().zip(&proj[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_average_the_values() {
    let (enc, mut store) = encoder(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // a zero key projection makes every key identical while values differ
    let prm = enc.blocks()[0].cross.clone();
    zero(&mut store, prm.wk);
    let (qt, kvt) = (randn(&[2, C], &mut rng), randn(&[2, C], &mut rng));
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let (q, kv) = (g.constant(qt), g.constant(kvt.clone()));
    let out = multi_head_attention(&mut g, &p, &prm, q, kv).unwrap();
    let rows = matrix(&kvt);
    let mean: Vec<f64> = (0..C).map(|c| 0.5 * (rows[0][c] + rows[1][c])).collect();
    let want = mm(&mm(&[mean], store.get(prm.wv)), store.get(prm.wo));
    for row in g.data(out).chunks(C) {
        for (a, b) in row.iter().zip(&want[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_scalar_oracle() {
    let (enc, store) = encoder(1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prm = &enc.blocks()[0].self_attn;
    let (qt, kvt) = (randn(&[3, C], &mut rng), randn(&[5, C], &mut rng));
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let (q, kv) = (g.constant(qt.clone()), g.constant(kvt.clone()));
    let out = multi_head_attention(&mut g, &p, prm, q, kv).unwrap();
    assert_close(
        g.value(out),
        &mha_oracle(&store, prm, &matrix(&qt), &matrix(&kvt)),
        1e-12,
    );
}

#[test]
fn empty_key_set_is_an_error() {
    // no tensor or gathered window can have zero tokens
    assert!(Tensor::<f64>::zeros(&[0, C]).is_err());
    let mut g = Graph::<f64>::new();
    let kv = g.constant(Tensor::zeros(&[4, C]).unwrap());
    assert!(g.gather_rows(kv, &[]).is_err());
}

/// Grid, pyramid and assignment for a 4×4 grid over a 16×64 ground image.
fn cross_setup(windows: usize, seed: u64) -> (Tensor<f64>, Vec<Tensor<f64>>, GridGeometry) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = GridGeometry::new(4, 4, windows).unwrap();
    (randn(&[16, C], &mut rng), pyramid_tensors(1, 4, &mut rng), geom)
}

fn run_cross(
    enc: &Encoder,
    store: &ParamStore<f64>,
    tokens: &Tensor<f64>,
    maps: &[Tensor<f64>],
    geom: GridGeometry,
) -> (Tensor<f64>, WindowAssignment) {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let pyr = bind_pyramid(&mut g, maps);
    let t = g.constant(tokens.clone());
    let map = g.reshape(t, &[4, 4, C]).unwrap();
    let grid = BevGrid { tokens: map, geom };
    let ground = partition_ground(&g, &pyr, geom.windows).unwrap();
    let asg = match_windows(&g, &partition_bev(map, &geom), &ground).unwrap();
    let (out, _) = enc.w2w_cross_attention(&mut g, &p, 0, &grid, t, &pyr, &asg).unwrap();
    (g.value(out).clone(), asg)
}

#[test]
fn zero_value_projection_leaves_layer_norm() {
    let (enc, mut store) = encoder(1, 7);
    zero(&mut store, enc.blocks()[0].cross.wv);
    zero(&mut store, enc.blocks()[0].self_attn.wv);
    let (tokens, maps, geom) = cross_setup(4, 8);
    let (out, _) = run_cross(&enc, &store, &tokens, &maps, geom);
    let want = layer_norm_oracle(&matrix(&tokens));
    assert_close(&out, &want, 1e-12);

    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let t = g.constant(tokens.clone());
    let (out, _) = enc.bev_self_attention(&mut g, &p, 0, t).unwrap();
    let ln = g
        .layer_norm(t, p[enc.blocks()[0].norms[1].gamma], p[enc.blocks()[0].norms[1].beta])
        .unwrap();
    assert_eq!(g.value(out), g.value(ln));
}

#[test]
fn single_window_is_plain_cross_attention_summed_over_levels() {
    let (enc, store) = encoder(1, 9);
    let (tokens, maps, geom) = cross_setup(1, 10);
    let (out, asg) = run_cross(&enc, &store, &tokens, &maps, geom);
    assert!(asg.matches.iter().all(|m| m == &[0; 4]));
    let q = matrix(&tokens);
    let mut upd = vec![vec![0.0; C]; 16];
    for m in &maps {
        upd = add(&upd, &mha_oracle(&store, &enc.blocks()[0].cross, &q, &matrix(m)));
    }
    assert_close(&out, &layer_norm_oracle(&add(&q, &upd)), 1e-10);
}

#[test]
fn windowed_cross_attention_composes_per_window_calls() {
    let (enc, store) = encoder(1, 11);
    let (tokens, maps, geom) = cross_setup(4, 12);
    let (out, asg) = run_cross(&enc, &store, &tokens, &maps, geom);
    let rows = matrix(&tokens);
    let mut upd = vec![vec![0.0; C]; 16];
    for (i, m) in asg.matches.iter().enumerate() {
        let idx = geom.window_tokens(i);
        let q: Vec<Vec<f64>> = idx.iter().map(|&t| rows[t].clone()).collect();
        for (l, map) in maps.iter().enumerate() {
            let (h, w) = (map.shape()[0], map.shape()[1]);
            let sw = w / 4;
            let level = matrix(map);
            let mut strip = Vec::new();
            for r in 0..h {
                for c in m[l] * sw..(m[l] + 1) * sw {
                    strip.push(level[r * w + c].clone());
                }
            }
            let a = mha_oracle(&store, &enc.blocks()[0].cross, &q, &strip);
            for (k, &t) in idx.iter().enumerate() {
                upd[t] = add(&[upd[t].clone()], &[a[k].clone()]).remove(0);
            }
        }
    }
    assert_close(&out, &layer_norm_oracle(&add(&rows, &upd)), 1e-10);
}

#[test]
#[should_panic(expected = "out of range")]
fn bad_assignment_is_a_hard_failure() {
    let (enc, store) = encoder(1, 11);
    let (tokens, maps, geom) = cross_setup(4, 12);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let pyr = bind_pyramid(&mut g, &maps);
    let t = g.constant(tokens);
    let map = g.reshape(t, &[4, 4, C]).unwrap();
    let grid = BevGrid { tokens: map, geom };
    let ground = partition_ground(&g, &pyr, 4).unwrap();
    let mut asg = match_windows(&g, &partition_bev(map, &geom), &ground).unwrap();
    asg.matches[2][1] = 4;
    let _ = enc.w2w_cross_attention(&mut g, &p, 0, &grid, t, &pyr, &asg);
}

#[test]
fn self_attention_single_token_and_oracle() {
    let (enc, store) = encoder(1, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let prm = &enc.blocks()[0].self_attn;
    for len in [1, 6] {
        let x = randn(&[len, C], &mut rng);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let t = g.constant(x.clone());
        let (out, attn) = enc.bev_self_attention(&mut g, &p, 0, t).unwrap();
        let rows = matrix(&x);
        let upd = if len == 1 {
            mm(&mm(&rows, store.get(prm.wv)), store.get(prm.wo))
        } else {
            mha_oracle(&store, prm, &rows, &rows)
        };
        assert_close(g.value(out), &layer_norm_oracle(&add(&rows, &upd)), 1e-12);
        let (w, [heads, lq, lk]) = g.attention_weights(attn).unwrap();
        assert_eq!((heads, lq, lk), (2, len, len));
        for row in w.chunks(lk) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn ffn_zero_weights_and_oracle() {
    let (enc, mut store) = encoder(1, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = randn(&[5, C], &mut rng);
    let rows = matrix(&x);
    let f = enc.blocks()[0].ffn.clone();
    let b1 = randn(&[2 * C], &mut rng);
    store.set(f.b1, b1.data()).unwrap();

    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let t = g.constant(x.clone());
        let out = enc.ffn(&mut g, &p, 0, t).unwrap();
        g.value(out).clone()
    };
    let hidden: Vec<Vec<f64>> = mm(&rows, store.get(f.w1))
        .iter()
        .map(|r| r.iter().zip(b1.data()).map(|(v, b)| (v + b).max(0.0)).collect())
        .collect();
    let upd = mm(&hidden, store.get(f.w2));
    assert_close(&run(&store), &layer_norm_oracle(&add(&rows, &upd)), 1e-12);

    // with the hidden layer all positive the sublayer is affine in x
    let positive: Vec<f64> = vec![50.0; 2 * C];
    store.set(f.b1, &positive).unwrap();
    let lin = mm(&mm(&rows, store.get(f.w1)), store.get(f.w2));
    let bias_path = mm(&[positive], store.get(f.w2));
    let upd: Vec<Vec<f64>> = lin
        .iter()
        .map(|r| add(std::slice::from_ref(r), &bias_path).remove(0))
        .collect();
    assert_close(&run(&store), &layer_norm_oracle(&add(&rows, &upd)), 1e-10);

    zero(&mut store, f.w1);
    zero(&mut store, f.w2);
    assert_close(&run(&store), &layer_norm_oracle(&rows), 1e-12);
}

fn encode_with(
    enc: &Encoder,
    store: &ParamStore<f64>,
    grid_t: &Tensor<f64>,
    maps: &[Tensor<f64>],
    geom: GridGeometry,
) -> (Tensor<f64>, Vec<WindowAssignment>) {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let pyr = bind_pyramid(&mut g, maps);
    let grid = BevGrid {
        tokens: g.constant(grid_t.clone()),
        geom,
    };
    let (out, trace) = enc.encode(&mut g, &p, &grid, &pyr).unwrap();
    (g.value(out).clone(), trace.into_iter().map(|t| t.assignment).collect())
}

#[test]
fn zero_blocks_returns_the_grid() {
    let (enc, store) = encoder(0, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let grid = randn(&[4, 4, C], &mut rng);
    let maps = pyramid_tensors(1, 4, &mut rng);
    let (out, trace) = encode_with(&enc, &store, &grid, &maps, GridGeometry::new(4, 4, 4).unwrap());
    assert_eq!(out, grid);
    assert!(trace.is_empty());
}

#[test]
fn rolling_every_level_by_one_strip_leaves_encoding_unchanged() {
    let (enc, store) = encoder(3, 19);
    let geom = GridGeometry::new(4, 4, 4).unwrap();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let grid = randn(&[4, 4, C], &mut rng);
        let maps = pyramid_tensors(1, 4, &mut rng);
        let rolled: Vec<Tensor<f64>> = maps
            .iter()
            .map(|m| m.roll_width((m.shape()[1] / 4) as isize).unwrap())
            .collect();
        let (a, asg_a) = encode_with(&enc, &store, &grid, &maps, geom);
        let (b, asg_b) = encode_with(&enc, &store, &grid, &rolled, geom);
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
        for (x, y) in asg_a.iter().zip(&asg_b) {
            for (mx, my) in x.matches.iter().zip(&y.matches) {
                for l in 0..4 {
                    assert_eq!(my[l], (mx[l] + 1) % 4);
                }
            }
        }
    }
}

#[test]
fn zero_pyramid_golden_value() {
    let (enc, store) = encoder(3, 21);
    let geom = GridGeometry::new(4, 4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let pos = Tensor::randn(&[4, 4, C], 0.02, &mut rng).unwrap();
    let maps: Vec<Tensor<f64>> = [1, 2, 4, 8]
        .iter()
        .map(|&s| Tensor::zeros(&[s, 4 * s, C]).unwrap())
        .collect();
    let (out, _) = encode_with(&enc, &store, &pos, &maps, geom);
    let (again, _) = encode_with(&enc, &store, &pos, &maps, geom);
    assert_eq!(out, again);
    let golden = [-0.9255774782462018, 0.28438942103291465, 1.1013170374615167];
    for (k, &i) in [0, 37, 127].iter().enumerate() {
        assert!(
            (out.data()[i] - golden[k]).abs() < 1e-12,
            "token value {i}: {}",
            out.data()[i]
        );
    }
}
