use pqvit::tape::{normal_cdf, Tape};
use pqvit::tensor::Tensor;
use pqvit::vit::{argmax, embed, forward_tape, patchify, unpatchify, ModelParams, ViTConfig, VisionTransformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn config(side: usize, patch: usize, dim: usize, heads: usize, layers: usize, classes: usize) -> ViTConfig {
    ViTConfig {
        image_height: side,
        image_width: side,
        channels: 1,
        patch_size: patch,
        dim,
        layers,
        heads,
        mlp_ratio: 4,
        num_classes: classes,
        final_norm: true,
        ln_eps: 1e-6,
        init_seed: 3,
    }
}

fn tiny() -> ViTConfig {
    config(6, 3, 4, 2, 1, 3)
}

/// Model with every parameter jittered so biases and LN terms are nonzero.
fn scrambled(cfg: ViTConfig, seed: u64) -> VisionTransformer {
    let mut model = VisionTransformer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    model
}

fn random_image(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![side, side, 1], (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_bias(a: &Mat, b: &Tensor) -> Mat {
    a.iter().map(|r| r.iter().zip(b.data()).map(|(x, y)| x + y).collect()).collect()
}

fn layer_norm(a: &Mat, g: &Tensor, b: &Tensor, eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Straight-line loop implementation of the classifier.
fn reference_logits(model: &VisionTransformer, image: &Tensor) -> Vec<f64> {
    let cfg = &model.config;
    let w = &model.params;
    let (side, p) = (cfg.image_width, cfg.patch_size);
    let mut patches = Vec::new();
    for pr in 0..side / p {
        for pc in 0..side / p {
            let mut flat = Vec::new();
            for r in 0..p {
                for c in 0..p {
                    flat.push(image.data()[(pr * p + r) * side + pc * p + c]);
                }
            }
            patches.push(flat);
        }
    }
    let mut tokens = mat(&w.cls_token);
    tokens.extend(mm(&patches, &mat(&w.patch_embed)));
    let mut x = add(&tokens, &mat(&w.pos_embed));
    let dh = cfg.dim / cfg.heads;
    for l in &w.layers {
        let n = layer_norm(&x, &l.norm1_gamma, &l.norm1_beta, cfg.ln_eps);
        let q = add_bias(&mm(&n, &mat(&l.query_weight)), &l.query_bias);
        let k = add_bias(&mm(&n, &mat(&l.key_weight)), &l.key_bias);
        let v = add_bias(&mm(&n, &mat(&l.value_weight)), &l.value_bias);
        let mut merged = vec![vec![0.0; cfg.dim]; x.len()];
        for h in 0..cfg.heads {
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..x.len())
                    .map(|j| (0..dh).map(|e| q[i][h * dh + e] * k[j][h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for e in 0..dh {
                    merged[i][h * dh + e] = (0..x.len()).map(|j| a[j] * v[j][h * dh + e]).sum();
                }
            }
        }
        let mid = add(&x, &add_bias(&mm(&merged, &mat(&l.out_weight)), &l.out_bias));
        let n2 = layer_norm(&mid, &l.norm2_gamma, &l.norm2_beta, cfg.ln_eps);
        let hidden: Mat = add_bias(&mm(&n2, &mat(&l.fc1_weight)), &l.fc1_bias)
            .iter()
            .map(|r| r.iter().map(|z| z * normal_cdf(*z)).collect())
            .collect();
        x = add(&mid, &add_bias(&mm(&hidden, &mat(&l.fc2_weight)), &l.fc2_bias));
    }
    let mut cls = vec![x[0].clone()];
    if cfg.final_norm {
        cls = layer_norm(&cls, &w.norm_gamma, &w.norm_beta, cfg.ln_eps);
    }
    add_bias(&mm(&cls, &mat(&w.head_weight)), &w.head_bias).remove(0)
}

#[test]
fn forward_matches_loop_reference() {
    for seed in 0..5 {
        let model = scrambled(tiny(), seed);
        let image = random_image(6, seed + 100);
        let got = model.logits(&image).unwrap();
        let want = reference_logits(&model, &image);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "seed {seed}: {got:?} vs {want:?}");
        }
    }
    let mut cfg = config(8, 4, 6, 3, 2, 4);
    cfg.final_norm = false;
    let model = scrambled(cfg, 9);
    let image = random_image(8, 9);
    let got = model.logits(&image).unwrap();
    let want = reference_logits(&model, &image);
    assert!(got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-10));
}

fn embedded(model: &VisionTransformer, image: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let w = model.params.bind(&mut tape);
    let patches = tape.leaf(patchify(image, model.config.patch_size).unwrap());
    let out = embed(&mut tape, patches, &w).unwrap();
    tape.value(out).clone()
}

#[test]
fn embedding_oracles() {
    let model = scrambled(tiny(), 4);
    let w = &model.params;
    let mut cls_plus_pos = mat(&w.cls_token);
    cls_plus_pos.extend(vec![vec![0.0; 4]; 4]);
    let cls_plus_pos = add(&cls_plus_pos, &mat(&w.pos_embed));

    let zero = Tensor::zeros(&[6, 6, 1]);
    assert_eq!(mat(&embedded(&model, &zero)), cls_plus_pos);

    let mut no_proj = model.clone();
    no_proj.params.patch_embed = Tensor::zeros(w.patch_embed.shape());
    assert_eq!(mat(&embedded(&no_proj, &random_image(6, 1))), cls_plus_pos);

    let image = random_image(6, 2);
    let got = mat(&embedded(&model, &image));
    let e = mat(&w.patch_embed);
    for n in 0..4 {
        let (pr, pc) = (n / 2, n % 2);
        for d in 0..4 {
            let mut acc = w.pos_embed.get2(n + 1, d);
            for r in 0..3 {
                for c in 0..3 {
                    acc += image.data()[(pr * 3 + r) * 6 + pc * 3 + c] * e[r * 3 + c][d];
                }
            }
            assert!((got[n + 1][d] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn hand_set_attention() {
    let mut cfg = config(3, 3, 2, 1, 1, 2);
    cfg.ln_eps = 1e-12;
    let mut params = ModelParams::init(&cfg).unwrap();
    for t in params.iter_mut() {
        if t.shape().len() == 2 {
            t.data_mut().fill(0.0);
        }
    }
    let layer = &mut params.layers[0];
    layer.query_weight = Tensor::eye(2);
    layer.key_weight = Tensor::eye(2);
    params.pos_embed = Tensor::matrix(2, 2, vec![-0.5, 0.5, 0.5, -0.5]).unwrap();
    let model = VisionTransformer::from_params(cfg, params).unwrap();

    let mut tape = Tape::new();
    let w = model.params.bind(&mut tape);
    let trace = forward_tape(&mut tape, &Tensor::zeros(&[3, 3, 1]), &w, &model.config).unwrap();
    let attn = tape.value(trace.attention[0][0]);
    // Normalized tokens are (-1, 1) and (1, -1): scores ±2/√2.
    let same = 1.0 / (1.0 + (-2.0 * 2f64.sqrt()).exp());
    let want = [same, 1.0 - same, 1.0 - same, same];
    for (g, w) in attn.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-9, "{:?}", attn.data());
    }
}

#[test]
fn init_deviation_and_bounds() {
    let params = ModelParams::init(&config(64, 16, 64, 4, 1, 5)).unwrap();
    let e = params.patch_embed.data();
    assert!(e.len() >= 10_000);
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let std = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.02).abs() < 0.002, "std {std}");
    assert!(mean.abs() < 0.002);
    for (name, t) in params.named().filter(|(n, _)| n.ends_with(".weight") || n == "pos_embed") {
        assert!(t.data().iter().all(|v| v.abs() <= 0.04), "{name}");
    }
    assert!(params.cls_token.data().iter().all(|&v| v == 0.0));
    assert!(params.layers[0].norm1_gamma.data().iter().all(|&v| v == 1.0));
    assert!(params.head_bias.data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_permutation_is_invisible_without_positions() {
    let mut model = scrambled(config(8, 2, 8, 2, 2, 3), 6);
    model.params.pos_embed.data_mut().fill(0.0);
    let image = random_image(8, 8);
    let patches = patchify(&image, 2).unwrap();
    let (n, len) = (patches.rows(), patches.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let permuted: Vec<f64> = order.iter().flat_map(|&i| patches.data()[i * len..(i + 1) * len].to_vec()).collect();
    let shuffled = unpatchify(&Tensor::matrix(n, len, permuted).unwrap(), 8, 8, 1, 2).unwrap();
    assert_ne!(shuffled, image);
    let a = model.logits(&image).unwrap();
    let b = model.logits(&shuffled).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
}

#[test]
fn head_bias_shift_keeps_prediction() {
    let mut model = scrambled(tiny(), 2);
    let image = random_image(6, 5);
    let before = model.forward(&image).unwrap();
    for v in model.params.head_bias.data_mut() {
        *v += 3.7;
    }
    let after = model.forward(&image).unwrap();
    assert_eq!(argmax(&before), argmax(&after));
    assert!(before.iter().zip(&after).all(|(x, y)| (x - y).abs() < 1e-12));
}
