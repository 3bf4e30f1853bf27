use super::*;
use crate::bbox::BBox;
use crate::graph::{Graph, Mode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

fn image(size: usize, batch: usize, rng: &mut Rng) -> Tensor<f32> {
    Tensor::rand_uniform(&[batch, 3, size, size], 0.0, 1.0, rng)
}

#[test]
fn default_token_counts() {
    let cfg = TrackerConfig::default();
    assert_eq!(cfg.template_tokens(), 16);
    assert_eq!(cfg.search_tokens(), 64);
    let (model, store) = Tracker::new::<f32>(&cfg).unwrap();
    let mut rng = Rng::new(1);
    let mut g = Graph::with_params(&store, Mode::Eval);
    let t = g.constant(&image(64, 1, &mut rng));
    let s = g.constant(&image(128, 1, &mut rng));
    let tokens = model.backbone_forward(&mut g, t, s).unwrap();
    assert_eq!(g.shape(tokens), &[1, 80, 64]);
    let out = model.head_forward(&mut g, tokens).unwrap();
    assert_eq!(g.shape(out.center), &[1, 1, 8, 8]);
    assert!(g.value(out.center).iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn zero_image_embeds_to_positions() {
    let cfg = TrackerConfig::micro();
    let (model, mut store) = Tracker::new::<f64>(&cfg).unwrap();
    let bias = model.backbone.patch_embed.bias.unwrap();
    store.get_mut(bias).data_mut().fill(0.0);
    let mut g = Graph::with_params(&store, Mode::Eval);
    let x = g.constant(&Tensor::zeros(&[1, 3, cfg.search_size, cfg.search_size]));
    let tokens = model.patch_embed(&mut g, x, model.backbone.pos_search).unwrap();
    assert_eq!(g.value(tokens), store.get(model.backbone.pos_search).data());
}

#[test]
fn patch_embed_follows_patch_permutation() {
    let cfg = TrackerConfig::micro();
    let (model, store) = Tracker::new::<f64>(&cfg).unwrap();
    let (ps, side, n) = (cfg.patch_size, cfg.search_size, cfg.search_tokens());
    let grid = cfg.grid();
    let mut rng = Rng::new(4);
    let img = Tensor::<f64>::rand_uniform(&[1, 3, side, side], 0.0, 1.0, &mut rng);
    // Swap patch (0, 0) with the last patch.
    let mut swapped = img.clone();
    for c in 0..3 {
        for dy in 0..ps {
            for dx in 0..ps {
                let (y2, x2) = ((grid - 1) * ps + dy, (grid - 1) * ps + dx);
                swapped.set(&[0, c, dy, dx], img.at(&[0, c, y2, x2]));
                swapped.set(&[0, c, y2, x2], img.at(&[0, c, dy, dx]));
            }
        }
    }
    let embed = |t: &Tensor<f64>| {
        let mut g = Graph::with_params(&store, Mode::Eval);
        let x = g.constant(t);
        let v = model.patch_embed(&mut g, x, model.backbone.pos_search).unwrap();
        g.value(v).to_vec()
    };
    let (a, b) = (embed(&img), embed(&swapped));
    let pos = store.get(model.backbone.pos_search).data();
    let d = cfg.embed_dim;
    let content = |v: &[f64], i: usize| -> Vec<f64> { (0..d).map(|j| v[i * d + j] - pos[i * d + j]).collect() };
    for (i, j) in [(0, n - 1), (n - 1, 0)] {
        for (u, w) in content(&a, i).iter().zip(content(&b, j)) {
            assert!((u - w).abs() < 1e-12);
        }
    }
    for i in 1..n - 1 {
        assert_eq!(content(&a, i), content(&b, i));
    }
}

#[test]
fn zeroed_coefficients_reduce_to_plain_model() {
    let cfg = TrackerConfig::micro();
    let (model, mut store) = Tracker::new::<f32>(&cfg).unwrap();
    model.zero_pfi(&mut store);
    let mut rng = Rng::new(9);
    let t = image(cfg.template_size, 2, &mut rng);
    let s = image(cfg.search_size, 2, &mut rng);
    let run = |plain: bool| {
        let mut g = Graph::with_params(&store, Mode::Eval);
        let (tv, sv) = (g.constant(&t), g.constant(&s));
        let out = if plain { model.forward_plain(&mut g, tv, sv) } else { model.forward(&mut g, tv, sv) }.unwrap();
        [out.center, out.size, out.offset].map(|v| g.value(v).to_vec())
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn wrong_region_size_is_rejected() {
    let cfg = TrackerConfig::micro();
    let (model, store) = Tracker::new::<f32>(&cfg).unwrap();
    let mut g = Graph::with_params(&store, Mode::Eval);
    let t = g.constant(&Tensor::zeros(&[1, 3, cfg.template_size, cfg.template_size]));
    let s = g.constant(&Tensor::zeros(&[1, 3, cfg.search_size + 8, cfg.search_size + 8]));
    assert!(model.forward(&mut g, t, s).is_err());
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn entropy(p: f64) -> f64 {
    let xlogx = |x: f64| if x == 0.0 { 0.0 } else { x * x.ln() };
    -(xlogx(p) + xlogx(1.0 - p))
}

/// Head outputs that encode `gts` exactly, with the gt heatmap as center map.
fn perfect_output(g: &mut Graph<'_, f64>, gts: &[BBox], grid: usize, ps: usize, side: usize) -> (HeadOutput, Vec<f64>) {
    let b = gts.len();
    let plane = grid * grid;
    let mut logits = Vec::new();
    let mut size = Vec::new();
    let mut offset = Vec::new();
    let mut heat = Vec::new();
    for gt in gts {
        let h = target_heatmap(gt, grid, ps);
        logits.extend(h.iter().map(|&p| logit(p)));
        heat.extend(h);
        let m = HeadMaps::encode(gt, grid, ps, side);
        size.extend(m.size);
        offset.extend(m.offset);
    }
    let cl = g.input(&Tensor::new(&[b, 1, grid, grid], logits).unwrap());
    let center = g.sigmoid(cl).unwrap();
    let size = g.constant(&Tensor::new(&[b, 2, grid, grid], size).unwrap());
    let offset = g.constant(&Tensor::new(&[b, 2, grid, grid], offset).unwrap());
    assert_eq!(heat.len(), b * plane);
    (HeadOutput { center_logits: cl, center, size, offset }, heat)
}

#[test]
fn perfect_prediction_leaves_only_heatmap_entropy() {
    let gts = [BBox::new(40.3, 52.1, 30.0, 22.5), BBox::new(70.2, 61.7, 18.0, 40.0)];
    let mut g = Graph::<f64>::new();
    let (out, heat) = perfect_output(&mut g, &gts, 8, 16, 128);
    let loss = tracking_loss(&mut g, &out, &gts, 16, 128).unwrap();
    let expect = heat.iter().map(|&p| entropy(p)).sum::<f64>() / heat.len() as f64;
    assert!((g.scalar_value(loss) - expect).abs() < 1e-9, "{} vs {expect}", g.scalar_value(loss));
}

#[test]
fn loss_is_non_negative_on_random_outputs() {
    let mut rng = Rng::new(21);
    for _ in 0..20 {
        let gts = [BBox::from_center(rng.uniform_range(1.0, 127.0), rng.uniform_range(1.0, 127.0), 20.0, 30.0),
            BBox::from_center(rng.uniform_range(1.0, 127.0), rng.uniform_range(1.0, 127.0), 9.0, 12.0)];
        let mut g = Graph::<f64>::new();
        let cl = g.input(&Tensor::randn(&[2, 1, 8, 8], 3.0, &mut rng));
        let center = g.sigmoid(cl).unwrap();
        let size = g.constant(&Tensor::rand_uniform(&[2, 2, 8, 8], 0.0, 1.0, &mut rng));
        let offset = g.constant(&Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng));
        let out = HeadOutput { center_logits: cl, center, size, offset };
        let loss = tracking_loss(&mut g, &out, &gts, 16, 128).unwrap();
        assert!(g.scalar_value(loss) >= 0.0);
    }
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let gts = [BBox::new(40.3, 52.1, 30.0, 22.5), BBox::new(70.2, 61.7, 18.0, 40.0)];
    let mut rng = Rng::new(3);
    let logits = Tensor::<f64>::randn(&[2, 1, 8, 8], 1.0, &mut rng);
    let size = Tensor::<f64>::rand_uniform(&[2, 2, 8, 8], 0.05, 0.5, &mut rng);
    let offset = Tensor::<f64>::rand_uniform(&[2, 2, 8, 8], 0.1, 0.9, &mut rng);
    let eval = |l: &Tensor<f64>| -> (f64, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let cl = g.input(&l.clone().with_requires_grad());
        let center = g.sigmoid(cl).unwrap();
        let out = HeadOutput { center_logits: cl, center, size: g.constant(&size), offset: g.constant(&offset) };
        let loss = tracking_loss(&mut g, &out, &gts, 16, 128).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.scalar_value(loss), grads.get_or_zeros(cl, l.numel()))
    };
    let (_, analytic) = eval(&logits);
    let h = 1e-5;
    let numeric: Vec<f64> = (0..logits.numel())
        .map(|i| {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            (eval(&p).0 - eval(&m).0) / (2.0 * h)
        })
        .collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
}

#[test]
fn loss_rejects_center_outside_region() {
    let gts = [BBox::new(130.0, 10.0, 10.0, 10.0)];
    let mut g = Graph::<f64>::new();
    let cl = g.input(&Tensor::zeros(&[1, 1, 8, 8]));
    let center = g.sigmoid(cl).unwrap();
    let size = g.constant(&Tensor::zeros(&[1, 2, 8, 8]));
    let out = HeadOutput { center_logits: cl, center, size, offset: size };
    assert!(tracking_loss(&mut g, &out, &gts, 16, 128).is_err());
}

fn static_sequence(n: usize) -> crate::data::Sequence {
    let cfg = crate::data::SceneConfig { n_frames: n, motion: 0.0, ..crate::data::SceneConfig::default() };
    crate::data::gen_sequence(&cfg).unwrap()
}

#[test]
fn track_output_length_and_first_box() {
    let cfg = TrackerConfig::micro();
    let (model, store) = Tracker::new::<f32>(&cfg).unwrap();
    let seq = static_sequence(4);
    let out = track_sequence(&model, &store, &seq.frames, seq.boxes[0], Variant::Prompted).unwrap();
    assert_eq!(out.len(), 4);
    assert_eq!(out[0], seq.boxes[0]);
    assert!(out.iter().all(|b| b.is_finite() && b.w >= MIN_SIDE && b.h >= MIN_SIDE));
    assert!(track_sequence(&model, &store, &[], seq.boxes[0], Variant::Prompted).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = TrackerConfig::micro();
    let (_, mut store) = Tracker::new::<f32>(&cfg).unwrap();
    let mut rng = Rng::new(2);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.normal() as f32);
    }
    let mut bytes = Vec::new();
    checkpoint::write_store(&store, &mut bytes).unwrap();
    let (_, mut fresh) = Tracker::new::<f32>(&cfg).unwrap();
    checkpoint::read_into(&mut fresh, &mut bytes.as_slice()).unwrap();
    for (id, e) in store.iter() {
        let a: Vec<u32> = e.tensor.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = fresh.get(id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{}", e.name);
    }
    assert!(checkpoint::read_into(&mut fresh, &mut &bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::read_into(&mut fresh, &mut bad.as_slice()).is_err());
}

fn tiny_training(steps: usize, lr: f64) -> (ParamStore<f32>, Vec<LossRecord>) {
    let cfg = TrackerConfig { steps, lr, batch_size: 2, ..TrackerConfig::micro() };
    let data = vec![static_sequence(3)];
    let (_, store, log) = train(&cfg, &data, |_| {}).unwrap();
    (store, log)
}

#[test]
fn zero_learning_rate_keeps_trainable_parameters() {
    let cfg = TrackerConfig::micro();
    let (_, init) = Tracker::new::<f32>(&cfg).unwrap();
    let (trained, log) = tiny_training(3, 0.0);
    assert_eq!(log.len(), 3);
    for (id, e) in init.iter().filter(|(_, e)| e.is_trainable()) {
        assert_eq!(e.tensor.data(), trained.get(id).data(), "{}", e.name);
    }
}

#[test]
fn training_is_deterministic() {
    let (a, la) = tiny_training(3, 1e-3);
    let (b, lb) = tiny_training(3, 1e-3);
    assert_eq!(la, lb);
    for (id, e) in a.iter() {
        assert_eq!(e.tensor.data(), b.get(id).data());
    }
}

#[test]
fn loss_csv_header_and_rows() {
    let csv = loss_csv(&[LossRecord { step: 0, loss: 1.5, lr: 4e-4 }]);
    assert_eq!(csv, "step,loss,lr\n0,1.5,0.0004\n");
}
