//! Source pretraining and the adaptation loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nets::{cda_loss, crt_loss, CounterConfig, CounterNet, DensityDiscriminator, DomainClassifiers, GatedSample, LEVELS};
use super::seg::{harden_seg, normalize_seg, seg_to_level};
use super::sppl::{make_sppl, update_count};
use crate::dataset::{CropWindow, CrowdScene};
use crate::density::{make_density_map, DensityConfig, DensityMap};
use crate::pcs::{infer_segmentation, WeakLearner};
use crate::rng::{self, Stream};
use crate::tensor::{Adam, AdamConfig, Bound, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegMode {
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the feature alignment term.
    pub lambda_crt: f64,
    /// Weight of the density alignment term.
    pub lambda_cda: f64,
    pub lambda_grl: f64,
    pub counter_lr: f64,
    pub classifier_lr: f64,
    pub pretrain_iterations: usize,
    pub iterations: usize,
    pub crop_size: usize,
    pub seg_mode: SegMode,
    /// Iterations between pseudo-label redraws of one target image.
    pub sppl_refresh: usize,
    /// Factor between density maps and the counter's regression target.
    pub density_scale: f64,
    /// Factor applied to (scaled) density maps entering the discriminator.
    pub discriminator_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_crt: 1.0,
            lambda_cda: 0.3,
            lambda_grl: 1.0,
            counter_lr: 1e-4,
            classifier_lr: 1e-5,
            pretrain_iterations: 2000,
            iterations: 3000,
            crop_size: 64,
            seg_mode: SegMode::Soft,
            sppl_refresh: 50,
            density_scale: 100.0,
            discriminator_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_crt, self.lambda_cda];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        let positive = [
            ("lambda_grl", self.lambda_grl),
            ("counter_lr", self.counter_lr),
            ("classifier_lr", self.classifier_lr),
            ("density_scale", self.density_scale),
            ("discriminator_scale", self.discriminator_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.crop_size == 0 || self.crop_size % 8 != 0 {
            return Err(Error::Config(format!("crop size {} must be a positive multiple of 8", self.crop_size)));
        }
        if self.sppl_refresh == 0 {
            return Err(Error::Config("sppl_refresh must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub l_den: f64,
    pub l_crt: f64,
    pub l_cda: f64,
    pub l_total: f64,
    /// Mean pseudo-label count over the target images.
    pub n_mean: f64,
}

fn check_scenes(scenes: &[CrowdScene], what: &str, channels: usize) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Empty(format!("no {what} scenes")));
    }
    if let Some(s) = scenes.iter().find(|s| s.channels != channels) {
        return Err(Error::shape("scene channels", &[channels], &[s.channels]));
    }
    Ok(())
}

fn draw<'a>(scenes: &'a [CrowdScene], crop: usize, rng: &mut impl Rng) -> Result<(usize, &'a CrowdScene, CropWindow)> {
    let i = rng.random_range(0..scenes.len());
    let s = &scenes[i];
    Ok((i, s, CropWindow::sample(s.width, s.height, crop, rng)?))
}

fn crop_tensor(scene: &CrowdScene, w: &CropWindow) -> Result<Tensor<f32>> {
    let data = w.apply_planes(&scene.image, scene.channels, scene.width, scene.height);
    Tensor::new(vec![1, scene.channels, w.height, w.width], data)
}

/// Records the counting loss of one augmented source crop.
fn source_term(
    tape: &mut Tape<f32>,
    counter: &CounterNet<f32>,
    bound: &Bound,
    scene: &CrowdScene,
    window: &CropWindow,
    density: &DensityConfig,
    scale: f64,
) -> Result<(crate::adapt::CounterPass, crate::tensor::Var)> {
    let points: Vec<_> = scene.points.iter().filter_map(|p| window.map_point(p)).collect();
    let gt = make_density_map(&points, window.height, window.width, density)?;
    let gt = gt.to_tensor().map(|v| v * scale as f32);
    let x = tape.constant(crop_tensor(scene, window)?)?;
    let pass = counter.forward(tape, bound, x)?;
    let loss = tape.euclidean_loss(pass.density, gt)?;
    Ok((pass, loss))
}

fn at_iteration(k: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("iteration {k}: {m}")),
        other => other,
    }
}

/// Supervised counting on augmented source crops, one image per step.
/// Returns the per-step counting losses.
pub fn train_supervised(
    counter: &mut CounterNet<f32>,
    source: &[CrowdScene],
    density: &DensityConfig,
    config: &TrainConfig,
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_scenes(source, "source", counter.config().channels)?;
    let mut adam = Adam::new(counter.params(), AdamConfig::with_lr(config.counter_lr))?;
    let mut rng = rng::stream(seed, Stream::SourceSampling);
    let mut losses = Vec::with_capacity(iterations);
    for k in 0..iterations {
        let (_, scene, window) = draw(source, config.crop_size, &mut rng)?;
        let mut step = || -> Result<f64> {
            let mut tape = Tape::new();
            let bound = counter.bind(&mut tape)?;
            let (_, loss) = source_term(&mut tape, counter, &bound, scene, &window, density, config.density_scale)?;
            let g = tape.backward_scalar(loss)?;
            let g = bound.grads(&g, counter.params());
            adam.step(counter.params_mut(), &g)?;
            Ok(tape.value(loss).data()[0] as f64)
        };
        losses.push(step().map_err(at_iteration(k))?);
    }
    Ok(losses)
}

/// A freshly initialized counter trained on the source domain.
pub fn pretrain_source(
    counter: &CounterConfig,
    source: &[CrowdScene],
    density: &DensityConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(CounterNet<f32>, Vec<f64>)> {
    let mut net = CounterNet::new(counter, &mut rng::stream(seed, Stream::CounterInit))?;
    let losses = train_supervised(&mut net, source, density, config, config.pretrain_iterations, seed)?;
    Ok((net, losses))
}

/// Estimated count of a whole scene.
pub fn predict_count(counter: &CounterNet<f32>, scene: &CrowdScene, density_scale: f64) -> Result<f64> {
    let d = counter.predict(scene.to_tensor())?;
    Ok(d.data().iter().map(|&v| v as f64).sum::<f64>() / density_scale)
}

pub fn predict_counts(counter: &CounterNet<f32>, scenes: &[CrowdScene], density_scale: f64) -> Result<Vec<f64>> {
    scenes.iter().map(|s| predict_count(counter, s, density_scale)).collect()
}

/// Normalized crowd channel of the weak learner's response for each scene.
pub fn soft_segmentations(f: &WeakLearner<f32>, scenes: &[CrowdScene]) -> Result<Vec<Vec<f32>>> {
    scenes
        .iter()
        .map(|s| {
            let m = infer_segmentation(f, s)?;
            normalize_seg(&m.data()[..s.width * s.height])
        })
        .collect()
}

/// Everything the adaptation loop consumes besides the counter.
pub struct AdaptInputs<'a> {
    pub source: &'a [CrowdScene],
    pub target: &'a [CrowdScene],
    /// Soft segmentations of the source and target scenes. Without them
    /// the feature gates are all ones and density alignment is off.
    pub segmentations: Option<(&'a [Vec<f32>], &'a [Vec<f32>])>,
    /// Starting pseudo-label count of each target scene.
    pub initial_counts: &'a [f64],
}

fn level_gates(gate: &[f32], window: &CropWindow, width: usize, height: usize) -> Result<[Tensor<f32>; LEVELS]> {
    let crop = window.apply_planes(gate, 1, width, height);
    let level = |l: u32| -> Result<Tensor<f32>> {
        let v = seg_to_level(&crop, window.width, window.height, l)?;
        Tensor::new(vec![1, 1, window.height >> l, window.width >> l], v)
    };
    Ok([level(1)?, level(2)?, level(3)?])
}

struct PseudoLabel {
    built: usize,
    map: DensityMap,
}

/// The adaptation loop. Each step draws one source and one target crop,
/// and takes a single optimizer step on
/// `L_den + λ_crt · L_crt + λ_cda · L_cda` for the counter, the level
/// classifiers and the density discriminator together; gradient reversal
/// turns the adversarial terms into a minimax game. Returns one record per
/// iteration and the final per-target pseudo-label counts.
pub fn adapt_train(
    counter: &mut CounterNet<f32>,
    inputs: &AdaptInputs<'_>,
    density: &DensityConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Vec<IterRecord>, Vec<f64>)> {
    config.validate()?;
    let channels = counter.config().channels;
    check_scenes(inputs.source, "source", channels)?;
    check_scenes(inputs.target, "target", channels)?;
    if inputs.initial_counts.len() != inputs.target.len() {
        return Err(Error::shape("initial counts", &[inputs.target.len()], &[inputs.initial_counts.len()]));
    }
    let gates = match inputs.segmentations {
        Some((src, tgt)) => {
            if src.len() != inputs.source.len() || tgt.len() != inputs.target.len() {
                return Err(Error::shape("segmentations", &[inputs.source.len(), inputs.target.len()], &[src.len(), tgt.len()]));
            }
            let prep = |maps: &[Vec<f32>]| -> Vec<Vec<f32>> {
                match config.seg_mode {
                    SegMode::Soft => maps.to_vec(),
                    SegMode::Hard => maps.iter().map(|m| harden_seg(m)).collect(),
                }
            };
            Some((prep(src), prep(tgt)))
        }
        None => None,
    };

    let mut init = rng::stream(seed, Stream::DiscriminatorInit);
    let mut classifiers = DomainClassifiers::<f32>::new(counter.config(), config.lambda_grl, &mut init)?;
    let mut discriminator =
        DensityDiscriminator::<f32>::new(counter.config(), config.discriminator_scale, &mut init)?;
    let mut opt_counter = Adam::new(counter.params(), AdamConfig::with_lr(config.counter_lr))?;
    let mut opt_classifiers = Adam::new(classifiers.params(), AdamConfig::with_lr(config.classifier_lr))?;
    let mut opt_discriminator = Adam::new(discriminator.params(), AdamConfig::with_lr(config.classifier_lr))?;
    let mut source_rng = rng::stream(seed, Stream::SourceSampling);
    let mut target_rng = rng::stream(seed, Stream::TargetSampling);
    let mut sppl_rng = rng::stream(seed, Stream::Sppl);

    let mut counts = inputs.initial_counts.to_vec();
    let mut pseudo: Vec<Option<PseudoLabel>> = (0..inputs.target.len()).map(|_| None).collect();
    let mut log = Vec::with_capacity(config.iterations);
    let scale = config.density_scale;

    for k in 0..config.iterations {
        let (si, src, src_win) = draw(inputs.source, config.crop_size, &mut source_rng)?;
        let (ti, tgt, tgt_win) = draw(inputs.target, config.crop_size, &mut target_rng)?;
        if let Some((_, target_soft)) = inputs.segmentations {
            let stale = pseudo[ti].as_ref().is_none_or(|p| k - p.built >= config.sppl_refresh);
            if stale {
                let n = counts[ti].round() as usize;
                let map = make_sppl(&target_soft[ti], tgt.width, tgt.height, n, density, &mut sppl_rng)?;
                pseudo[ti] = Some(PseudoLabel { built: k, map });
            }
        }

        let mut step = || -> Result<(IterRecord, f64)> {
            let mut tape = Tape::new();
            let bn = counter.bind(&mut tape)?;
            let bc = classifiers.params().bind(&mut tape)?;
            let bd = discriminator.params().bind(&mut tape)?;
            let (src_pass, l_den) = source_term(&mut tape, counter, &bn, src, &src_win, density, scale)?;
            let x_t = tape.constant(crop_tensor(tgt, &tgt_win)?)?;
            let tgt_pass = counter.forward(&mut tape, &bn, x_t)?;

            let (src_gate, tgt_gate) = match &gates {
                Some((s, t)) => (
                    level_gates(&s[si], &src_win, src.width, src.height)?,
                    level_gates(&t[ti], &tgt_win, tgt.width, tgt.height)?,
                ),
                None => (ones_gates(&src_win), ones_gates(&tgt_win)),
            };
            let l_crt = crt_loss(
                &mut tape,
                &classifiers,
                &bc,
                vec![
                    GatedSample {
                        features: src_pass.features,
                        gates: src_gate,
                        label: 1.0,
                    },
                    GatedSample {
                        features: tgt_pass.features,
                        gates: tgt_gate,
                        label: 0.0,
                    },
                ],
            )?;
            let mut total = tape.scale(l_crt, config.lambda_crt as f32)?;
            total = tape.add(l_den, total)?;
            let mut l_cda_value = 0.0;
            if let Some(p) = &pseudo[ti] {
                let real = p
                    .map
                    .window(tgt_win.x0, tgt_win.y0, tgt_win.width, tgt_win.height, tgt_win.flip)
                    .to_tensor()
                    .map(|v| v * scale as f32);
                let l_cda = cda_loss(&mut tape, &discriminator, &bd, real, tgt_pass.density, config.lambda_grl)?;
                l_cda_value = tape.value(l_cda).data()[0] as f64;
                let weighted = tape.scale(l_cda, config.lambda_cda as f32)?;
                total = tape.add(total, weighted)?;
            }

            let g = tape.backward_scalar(total)?;
            let (gn, gc, gd) = (
                bn.grads(&g, counter.params()),
                bc.grads(&g, classifiers.params()),
                bd.grads(&g, discriminator.params()),
            );
            opt_counter.step(counter.params_mut(), &gn)?;
            opt_classifiers.step(classifiers.params_mut(), &gc)?;
            opt_discriminator.step(discriminator.params_mut(), &gd)?;

            let est = if tgt_win.covers(tgt) {
                tape.value(tgt_pass.density).sum() as f64 / scale
            } else {
                predict_count(counter, tgt, scale)?
            };
            let value = |v| tape.value(v).data()[0] as f64;
            let record = IterRecord {
                iter: k,
                l_den: value(l_den),
                l_crt: value(l_crt),
                l_cda: l_cda_value,
                l_total: value(total),
                n_mean: 0.0,
            };
            Ok((record, est))
        };
        let (mut record, est) = step().map_err(at_iteration(k))?;
        let terms = [record.l_den, record.l_crt, record.l_cda, record.l_total];
        if terms.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite(format!("iteration {k}: loss terms {terms:?}")));
        }
        counts[ti] = update_count(counts[ti], est.max(0.0)).map_err(at_iteration(k))?;
        record.n_mean = counts.iter().sum::<f64>() / counts.len() as f64;
        log.push(record);
    }
    Ok((log, counts))
}

fn ones_gates(window: &CropWindow) -> [Tensor<f32>; LEVELS] {
    std::array::from_fn(|l| Tensor::full(vec![1, 1, window.height >> (l + 1), window.width >> (l + 1)], 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SynthConfig};

    fn small() -> CounterConfig {
        CounterConfig {
            channels: 1,
            widths: [3, 4, 4],
            decoder: [4, 3, 2],
            classifier_width: 2,
            discriminator_widths: [2, 2],
        }
    }

    fn data() -> (Vec<CrowdScene>, Vec<CrowdScene>) {
        let cfg = SynthConfig {
            width: 32,
            height: 32,
            train_scenes: 3,
            test_scenes: 0,
            ..SynthConfig::default()
        };
        let (s, t) = generate(&cfg).unwrap();
        (s.train, t.train)
    }

    fn config(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            crop_size: 16,
            sppl_refresh: 3,
            ..TrainConfig::default()
        }
    }

    fn fresh() -> CounterNet<f32> {
        CounterNet::new(&small(), &mut rng::stream(3, Stream::CounterInit)).unwrap()
    }

    fn flat_segs(scenes: &[CrowdScene]) -> Vec<Vec<f32>> {
        scenes.iter().map(|s| vec![0.5; s.width * s.height]).collect()
    }

    #[test]
    fn validate_rejects_bad_settings() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { crop_size: 12, ..TrainConfig::default() },
            TrainConfig { sppl_refresh: 0, ..TrainConfig::default() },
            TrainConfig { lambda_cda: -1.0, ..TrainConfig::default() },
            TrainConfig { counter_lr: f64::NAN, ..TrainConfig::default() },
            TrainConfig { lambda_grl: 0.0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn adaptation_is_deterministic() {
        let (src, tgt) = data();
        let (ss, ts) = (flat_segs(&src), flat_segs(&tgt));
        let run = || {
            let mut net = fresh();
            let inputs = AdaptInputs {
                source: &src,
                target: &tgt,
                segmentations: Some((&ss, &ts)),
                initial_counts: &[5.0, 5.0, 5.0],
            };
            let out = adapt_train(&mut net, &inputs, &DensityConfig::default(), &config(5), 11).unwrap();
            (out, net.params().values().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let ((log, counts), _) = a;
        assert_eq!(log.len(), 5);
        assert_eq!(counts.len(), 3);
        assert!(log.iter().any(|r| r.l_cda > 0.0));
        assert!(log.iter().all(|r| r.l_crt > 0.0));
    }

    #[test]
    fn zero_weights_reduce_to_supervised_training() {
        let (src, tgt) = data();
        let mut cfg = config(6);
        cfg.lambda_crt = 0.0;
        cfg.lambda_cda = 0.0;
        let mut adapted = fresh();
        let inputs = AdaptInputs {
            source: &src,
            target: &tgt,
            segmentations: None,
            initial_counts: &[0.0; 3],
        };
        let (log, _) = adapt_train(&mut adapted, &inputs, &DensityConfig::default(), &cfg, 4).unwrap();
        let mut plain = fresh();
        let losses = train_supervised(&mut plain, &src, &DensityConfig::default(), &cfg, 6, 4).unwrap();
        let l_den: Vec<f64> = log.iter().map(|r| r.l_den).collect();
        assert_eq!(l_den, losses);
        assert_eq!(adapted.params().values(), plain.params().values());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (src, tgt) = data();
        let mut net = fresh();
        let inputs = AdaptInputs {
            source: &src,
            target: &tgt,
            segmentations: None,
            initial_counts: &[1.0],
        };
        assert!(adapt_train(&mut net, &inputs, &DensityConfig::default(), &config(1), 0).is_err());
        let inputs = AdaptInputs {
            source: &[],
            target: &tgt,
            segmentations: None,
            initial_counts: &[1.0; 3],
        };
        assert!(matches!(
            adapt_train(&mut net, &inputs, &DensityConfig::default(), &config(1), 0),
            Err(Error::Empty(_))
        ));
    }
}
