use crate::bbox::BBox;
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::nn::BatchNorm2d;
use crate::optim::{AdamW, AdamWConfig, StepDecay};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{tracking_loss, CropWindow, Tracker, TrackerConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// One training example: template and search crops plus the target box in
/// search-crop pixels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub template: Tensor<f32>,
    pub search: Tensor<f32>,
    pub gt: BBox,
}

/// Crops for frame pair `(template_frame, search_frame)` of `seq`. The
/// search window is shifted and rescaled at random, as the previous-frame
/// box would be during tracking.
pub fn make_sample(
    cfg: &TrackerConfig,
    seq: &Sequence,
    template_frame: usize,
    search_frame: usize,
    rng: &mut Rng,
) -> Sample {
    let tb = &seq.boxes[template_frame];
    let twin = CropWindow::for_box(tb, cfg.template_factor, cfg.template_size);
    let sb = &seq.boxes[search_frame];
    let side = cfg.search_factor * (sb.w * sb.h).sqrt() * rng.symmetric(cfg.scale_jitter).exp();
    let (cx, cy) = sb.center();
    let sx = cx + rng.symmetric(cfg.center_jitter) * side;
    let sy = cy + rng.symmetric(cfg.center_jitter) * side;
    let swin = CropWindow::around(sx, sy, side, cfg.search_size);
    Sample {
        template: twin.sample(&seq.frames[template_frame]),
        search: swin.sample(&seq.frames[search_frame]),
        gt: swin.to_crop(sb),
    }
}

/// Draw a sample from a random sequence. Half of the templates come from
/// the first frame, which is what tracking uses.
pub fn draw_sample(cfg: &TrackerConfig, data: &[Sequence], rng: &mut Rng) -> Sample {
    let seq = &data[rng.below(data.len())];
    let t = if rng.uniform() < 0.5 { 0 } else { rng.below(seq.len()) };
    let s = rng.below(seq.len());
    make_sample(cfg, seq, t, s, rng)
}

/// Stack `[C, H, W]` tensors into `[B, C, H, W]`.
pub fn stack(items: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data).expect("equal item shapes")
}

/// Loss of one batch in training mode. Gradients are accumulated into the
/// store and batch-norm running statistics updated.
pub fn train_step(model: &Tracker, store: &mut ParamStore<f32>, batch: &[Sample]) -> Result<f64> {
    let cfg = &model.cfg;
    let template = stack(&batch.iter().map(|s| &s.template).collect::<Vec<_>>());
    let search = stack(&batch.iter().map(|s| &s.search).collect::<Vec<_>>());
    let gts: Vec<BBox> = batch.iter().map(|s| s.gt).collect();
    let (loss, grads, bn) = {
        let mut g = Graph::with_params(store, Mode::Train);
        let t = g.constant(&template);
        let s = g.constant(&search);
        let out = model.forward(&mut g, t, s)?;
        let loss = tracking_loss(&mut g, &out, &gts, cfg.patch_size, cfg.search_size)?;
        let grads = g.backward(loss)?;
        (g.scalar_value(loss) as f64, g.param_grads(&grads), g.take_bn_updates())
    };
    store.accumulate_grads(&grads)?;
    store.apply_bn_updates(&bn, BatchNorm2d::MOMENTUM);
    Ok(loss)
}

/// AdamW training on crops drawn from `data`. `on_step` sees every loss.
pub fn train(
    cfg: &TrackerConfig,
    data: &[Sequence],
    mut on_step: impl FnMut(&LossRecord),
) -> Result<(Tracker, ParamStore<f32>, Vec<LossRecord>)> {
    if data.is_empty() || data.iter().any(|s| s.is_empty() || s.boxes.len() != s.len()) {
        return Err(Error::InvalidArgument("training needs annotated, non-empty sequences".into()));
    }
    let (model, mut store) = Tracker::new::<f32>(cfg)?;
    let log = train_model(&model, &mut store, data, &mut on_step)?;
    Ok((model, store, log))
}

/// Continue training an existing model in place.
pub fn train_model(
    model: &Tracker,
    store: &mut ParamStore<f32>,
    data: &[Sequence],
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    let cfg = &model.cfg;
    cfg.validate()?;
    let mut opt = AdamW::new(
        store,
        AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
    );
    if cfg.freeze_backbone {
        opt.freeze(ParamGroup::Backbone);
    }
    let sched = StepDecay { base: cfg.lr, factor: cfg.lr_decay, decay_at: cfg.decay_at };
    let mut rng = Rng::new(cfg.seed).fork(0x5EED);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = sched.lr(step, cfg.steps);
        let batch: Vec<Sample> = (0..cfg.batch_size).map(|_| draw_sample(cfg, data, &mut rng)).collect();
        store.zero_grads();
        let loss = train_step(model, store, &batch)?;
        opt.step(store, lr)?;
        let rec = LossRecord { step, loss, lr };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// CSV with header `step,loss,lr`.
pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    s
}
