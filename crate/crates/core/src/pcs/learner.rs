//! The weak learner: a small fully convolutional network trained from bag
//! labels alone, whose per-pixel responses become the crowd segmentation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bags::{scene_bags, AnchorConfig, Bag, BagLabel, Rect};
use crate::dataset::CrowdScene;
use crate::rng::{self, Stream};
use crate::tensor::{checkpoint, softmax2, Adam, AdamConfig, LayerSpec, ParamStore, Real, Sequential, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLearnerConfig {
    pub hidden: usize,
    pub steps: usize,
    /// Bags per step, split evenly between the two classes.
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for WeakLearnerConfig {
    fn default() -> Self {
        WeakLearnerConfig {
            hidden: 16,
            steps: 500,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

/// Three 3×3 convolution blocks, stride 1 and size-preserving, producing a
/// crowd (channel 0) and background (channel 1) response map.
#[derive(Clone, Debug)]
pub struct WeakLearner<T: Real = f32> {
    net: Sequential,
    params: ParamStore<T>,
    channels: usize,
    trained: bool,
}

impl<T: Real> WeakLearner<T> {
    pub fn new(channels: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Sequential::new(
            "pcs",
            vec![
                LayerSpec::conv3x3(channels, hidden),
                LayerSpec::Relu,
                LayerSpec::conv3x3(hidden, hidden),
                LayerSpec::Relu,
                LayerSpec::conv3x3(hidden, 2),
            ],
            &mut params,
            rng,
        )?;
        Ok(WeakLearner {
            net,
            params,
            channels,
            trained: false,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Response map `[N, 2, H, W]` for a `[N, C, H, W]` input.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<(Var, crate::tensor::Bound)> {
        let bound = self.params.bind(tape)?;
        let out = self.net.forward(tape, &bound, input)?;
        Ok((out, bound))
    }

    pub fn cast<U: Real>(&self) -> WeakLearner<U> {
        WeakLearner {
            net: self.net.clone(),
            params: self.params.cast(),
            channels: self.channels,
            trained: self.trained,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Loads trained parameters into a network of the given shape.
    pub fn load(path: &Path, channels: usize, hidden: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                what: "weak learner checkpoint".into(),
                path: path.to_path_buf(),
            });
        }
        let mut rng = rng::stream(0, Stream::WeakLearnerInit);
        let mut f = Self::new(channels, hidden, &mut rng)?;
        f.params.load(checkpoint::load_arrays(path)?)?;
        f.trained = true;
        Ok(f)
    }
}

/// Bag classification loss from a `[2, h, w]` response map: spatial means of
/// the two channels, a two-way softmax, and the negative log-probability of
/// the bag's class.
pub fn bag_loss(response: &Tensor<f64>, label: BagLabel) -> Result<f64> {
    let s = response.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::shape("bag_loss", &[2, 0, 0], s));
    }
    response.ensure_finite("bag_loss")?;
    let hw = s[1] * s[2];
    let a0 = response.data()[..hw].iter().sum::<f64>() / hw as f64;
    let a1 = response.data()[hw..].iter().sum::<f64>() / hw as f64;
    let (p0, p1) = softmax2(a0, a1);
    Ok(-match label {
        BagLabel::Crowd => p0,
        BagLabel::Background => p1,
    }
    .ln())
}

fn crop_bag<T: Real>(scene: &CrowdScene, r: &Rect, out: &mut Vec<T>) {
    for c in 0..scene.channels {
        let plane = &scene.image[c * scene.width * scene.height..(c + 1) * scene.width * scene.height];
        for y in r.y..r.y + r.h {
            out.extend(plane[y * scene.width + r.x..y * scene.width + r.x + r.w].iter().map(|&v| T::of(v as f64)));
        }
    }
}

/// Mean bag loss of a mixed-size batch, recorded on `tape`. Bags are grouped
/// by size so each group runs as one batched forward pass.
pub fn batch_bag_loss<T: Real>(
    f: &WeakLearner<T>,
    tape: &mut Tape<T>,
    scenes: &[CrowdScene],
    bags: &[Bag],
) -> Result<(Var, crate::tensor::Bound)> {
    let bound = f.params.bind(tape)?;
    let mut groups: BTreeMap<(usize, usize), Vec<&Bag>> = BTreeMap::new();
    for b in bags {
        groups.entry((b.rect.w, b.rect.h)).or_default().push(b);
    }
    let mut total: Option<Var> = None;
    for ((w, h), group) in groups {
        let mut data = Vec::with_capacity(group.len() * f.channels * w * h);
        for b in &group {
            crop_bag(&scenes[b.scene], &b.rect, &mut data);
        }
        let x = tape.constant(Tensor::new(vec![group.len(), f.channels, h, w], data)?)?;
        let m = f.net.forward(tape, &bound, x)?;
        let a = tape.global_avg_pool(m)?;
        let labels: Vec<usize> = group.iter().map(|b| b.label.index()).collect();
        let ce = tape.cross_entropy2(a, &labels)?;
        let weighted = tape.scale(ce, T::of(group.len() as f64 / bags.len() as f64))?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok((total.ok_or_else(|| Error::Empty("bag batch".into()))?, bound))
}

/// Per-step mean losses of weak-learner training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeakLearnerLog {
    pub losses: Vec<f64>,
    pub crowd_bags: usize,
    pub background_bags: usize,
}

/// Collects the refined bags of every scene.
pub fn collect_bags(scenes: &[CrowdScene], anchors: &AnchorConfig) -> Result<Vec<Bag>> {
    let mut bags = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        bags.extend(scene_bags(i, s.width, s.height, &s.points, anchors)?);
    }
    Ok(bags)
}

/// Trains the weak learner on bags sampled from labelled source scenes.
///
/// Every step draws `batch_size / 2` bags from each class uniformly with
/// replacement, so the abundant background bags cannot swamp the crowd bags.
pub fn train_weak_learner(
    scenes: &[CrowdScene],
    anchors: &AnchorConfig,
    config: &WeakLearnerConfig,
    seed: u64,
) -> Result<(WeakLearner<f32>, WeakLearnerLog)> {
    let first = scenes.first().ok_or_else(|| Error::Empty("no source scenes for the weak learner".into()))?;
    let bags = collect_bags(scenes, anchors)?;
    let (crowd, background): (Vec<Bag>, Vec<Bag>) = bags.into_iter().partition(|b| b.label == BagLabel::Crowd);
    if crowd.is_empty() || background.is_empty() {
        return Err(Error::Empty(format!(
            "degenerate bag set: {} crowd and {} background bags",
            crowd.len(),
            background.len()
        )));
    }
    let half = (config.batch_size / 2).max(1);
    let mut f = WeakLearner::<f32>::new(first.channels, config.hidden, &mut rng::stream(seed, Stream::WeakLearnerInit))?;
    let mut adam = Adam::new(&f.params, AdamConfig::with_lr(config.lr))?;
    let mut rng = rng::stream(seed, Stream::WeakLearnerBatches);
    let mut log = WeakLearnerLog {
        losses: Vec::with_capacity(config.steps),
        crowd_bags: crowd.len(),
        background_bags: background.len(),
    };
    for _ in 0..config.steps {
        let mut batch: Vec<Bag> = (0..half).map(|_| crowd[rng.random_range(0..crowd.len())]).collect();
        batch.extend((0..half).map(|_| background[rng.random_range(0..background.len())]));
        let mut tape = Tape::new();
        let (loss, bound) = batch_bag_loss(&f, &mut tape, scenes, &batch)?;
        log.losses.push(tape.value(loss).data()[0] as f64);
        let grads = tape.backward_scalar(loss)?;
        let g = bound.grads(&grads, &f.params);
        adam.step(&mut f.params, &g)?;
    }
    f.trained = true;
    Ok((f, log))
}

/// Full-image response map `[2, H, W]`: channel 0 is the crowd
/// segmentation, channel 1 the background map.
pub fn infer_segmentation<T: Real>(f: &WeakLearner<T>, scene: &CrowdScene) -> Result<Tensor<T>> {
    if !f.trained {
        return Err(Error::Config("weak learner has not been trained or loaded".into()));
    }
    if scene.channels != f.channels {
        return Err(Error::shape("infer_segmentation", &[f.channels], &[scene.channels]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(scene.to_tensor().cast())?;
    let (m, _) = f.forward(&mut tape, x)?;
    tape.value(m).clone().reshape(vec![2, scene.height, scene.width])
}

/// Bag classification accuracy by argmax of the aggregated responses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BagAccuracy {
    pub overall: f64,
    pub crowd: f64,
    pub background: f64,
    pub bags: usize,
}

pub fn bag_accuracy(f: &WeakLearner<f32>, scenes: &[CrowdScene], anchors: &AnchorConfig) -> Result<BagAccuracy> {
    let bags = collect_bags(scenes, anchors)?;
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for chunk in bags.chunks(256) {
        let mut groups: BTreeMap<(usize, usize), Vec<&Bag>> = BTreeMap::new();
        for b in chunk {
            groups.entry((b.rect.w, b.rect.h)).or_default().push(b);
        }
        for ((w, h), group) in groups {
            let mut data = Vec::with_capacity(group.len() * f.channels * w * h);
            for b in &group {
                crop_bag(&scenes[b.scene], &b.rect, &mut data);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![group.len(), f.channels, h, w], data)?)?;
            let (m, _) = f.forward(&mut tape, x)?;
            let a = tape.global_avg_pool(m)?;
            for (b, pair) in group.iter().zip(tape.value(a).data().chunks(2)) {
                let predicted = if pair[0] > pair[1] { 0 } else { 1 };
                let k = b.label.index();
                total[k] += 1;
                if predicted == k {
                    correct[k] += 1;
                }
            }
        }
    }
    let frac = |c: usize, t: usize| if t == 0 { 1.0 } else { c as f64 / t as f64 };
    Ok(BagAccuracy {
        overall: frac(correct[0] + correct[1], total[0] + total[1]),
        crowd: frac(correct[0], total[0]),
        background: frac(correct[1], total[1]),
        bags: total[0] + total[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_domain, Domain, SynthConfig};

    fn scenes(n: usize) -> Vec<CrowdScene> {
        let cfg = SynthConfig {
            train_scenes: n,
            test_scenes: 0,
            ..SynthConfig::default()
        };
        generate_domain(&cfg, Domain::Source).unwrap().train
    }

    #[test]
    fn bag_loss_examples() {
        let flat = Tensor::full(vec![2, 4, 4], 0.3);
        assert!((bag_loss(&flat, BagLabel::Crowd).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((bag_loss(&flat, BagLabel::Background).unwrap() - 2f64.ln()).abs() < 1e-12);
        let two = Tensor::from_fn(vec![2, 3, 3], |i| if i < 9 { 2.0 } else { 0.0 });
        assert!((bag_loss(&two, BagLabel::Crowd).unwrap() - 0.1269).abs() < 1e-4);
        assert!((bag_loss(&two, BagLabel::Background).unwrap() - 2.1269).abs() < 1e-4);
        let bad = Tensor::from_fn(vec![2, 1, 1], |i| if i == 0 { f64::NAN } else { 0.0 });
        assert!(bag_loss(&bad, BagLabel::Crowd).is_err());
    }

    proptest::proptest! {
        #[test]
        fn bag_loss_shift_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 18), c in -50.0f64..50.0) {
            let m = Tensor::new(vec![2, 3, 3], vals).unwrap();
            let shifted = m.map(|v| v + c);
            for label in [BagLabel::Crowd, BagLabel::Background] {
                let a = bag_loss(&m, label).unwrap();
                let b = bag_loss(&shifted, label).unwrap();
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tape_loss_matches_closed_form() {
        let data = scenes(2);
        let bags = collect_bags(&data, &AnchorConfig::default()).unwrap();
        let f = WeakLearner::<f64>::new(1, 4, &mut rng::stream(3, Stream::WeakLearnerInit)).unwrap();
        let pick: Vec<Bag> = bags.iter().step_by(37).copied().collect();
        let mut tape = Tape::new();
        let (loss, _) = batch_bag_loss(&f, &mut tape, &data, &pick).unwrap();
        let mut want = 0.0;
        for b in &pick {
            let mut crop = Vec::new();
            crop_bag(&data[b.scene], &b.rect, &mut crop);
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![1, 1, b.rect.h, b.rect.w], crop).unwrap()).unwrap();
            let (m, _) = f.forward(&mut t, x).unwrap();
            let resp = t.value(m).clone().reshape(vec![2, b.rect.h, b.rect.w]).unwrap();
            want += bag_loss(&resp, b.label).unwrap();
        }
        want /= pick.len() as f64;
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_bag_sets_rejected() {
        let mut data = scenes(2);
        for s in &mut data {
            s.points.clear();
        }
        let cfg = WeakLearnerConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(matches!(
            train_weak_learner(&data, &AnchorConfig::default(), &cfg, 0),
            Err(Error::Empty(_))
        ));
        assert!(train_weak_learner(&[], &AnchorConfig::default(), &cfg, 0).is_err());
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let data = scenes(4);
        let cfg = WeakLearnerConfig {
            steps: 3,
            batch_size: 8,
            ..Default::default()
        };
        let (a, la) = train_weak_learner(&data, &AnchorConfig::default(), &cfg, 1).unwrap();
        let (b, lb) = train_weak_learner(&data, &AnchorConfig::default(), &cfg, 1).unwrap();
        let (c, _) = train_weak_learner(&data, &AnchorConfig::default(), &cfg, 2).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(la, lb);
        assert_ne!(a.params(), c.params());
        assert!((la.losses[0] - 2f64.ln()).abs() < 0.15, "first loss {}", la.losses[0]);
    }

    #[test]
    fn untrained_learner_refuses_inference() {
        let data = scenes(1);
        let f = WeakLearner::<f32>::new(1, 4, &mut rng::stream(0, Stream::WeakLearnerInit)).unwrap();
        assert!(infer_segmentation(&f, &data[0]).is_err());
    }

    #[test]
    fn crop_of_full_map_equals_map_of_crop() {
        let data = scenes(1);
        let s = &data[0];
        let mut f = WeakLearner::<f64>::new(1, 8, &mut rng::stream(9, Stream::WeakLearnerInit)).unwrap();
        f.mark_trained();
        let full = infer_segmentation(&f, s).unwrap();
        let r = Rect::new(20, 12, 16, 16);
        let mut crop = Vec::new();
        crop_bag(s, &r, &mut crop);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 16, 16], crop).unwrap()).unwrap();
        let (m, _) = f.forward(&mut tape, x).unwrap();
        let local = tape.value(m);
        // Three 3×3 layers: the zero-padding border effect reaches 3 pixels.
        for c in 0..2 {
            for y in 3..13 {
                for x in 3..13 {
                    let a = local.data()[(c * 16 + y) * 16 + x];
                    let b = full.data()[(c * s.height + r.y + y) * s.width + r.x + x];
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let mut f = WeakLearner::<f32>::new(1, 16, &mut rng::stream(4, Stream::WeakLearnerInit)).unwrap();
        f.mark_trained();
        f.save(&path).unwrap();
        let g = WeakLearner::<f32>::load(&path, 1, 16).unwrap();
        assert_eq!(g.params(), f.params());
        assert!(g.is_trained());
        assert!(WeakLearner::<f32>::load(&dir.path().join("none"), 1, 16).is_err());
        assert!(WeakLearner::<f32>::load(&path, 1, 8).is_err());
    }
}
