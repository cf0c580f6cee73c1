//! The density counter, the per-level domain classifiers and the density
//! discriminator, with the two adversarial losses built on them.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{checkpoint, Bound, LayerSpec, ParamStore, Real, Sequential, Tape, Tensor, Var};
use crate::{Error, Result};

/// Number of pooling stages, and so of aligned feature levels.
pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterConfig {
    pub channels: usize,
    /// Backbone widths of the three conv-conv-pool stages.
    pub widths: [usize; LEVELS],
    /// Widths of the three upsampling blocks.
    pub decoder: [usize; LEVELS],
    /// Hidden width of each level's domain classifier.
    pub classifier_width: usize,
    pub discriminator_widths: [usize; 2],
}

impl Default for CounterConfig {
    fn default() -> Self {
        CounterConfig {
            channels: 1,
            widths: [16, 32, 64],
            decoder: [32, 16, 8],
            classifier_width: 16,
            discriminator_widths: [8, 16],
        }
    }
}

impl CounterConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self.widths.iter().chain(&self.decoder).chain(&self.discriminator_widths);
        if self.channels == 0 || self.classifier_width == 0 || all.copied().any(|w| w == 0) {
            return Err(Error::Config("network widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Backbone of three `(conv3×3, relu, conv3×3, relu, maxpool2)` stages
/// followed by three `(upsample2, conv3×3, relu)` blocks and a final
/// `conv3×3, relu` to one channel.
#[derive(Clone, Debug)]
pub struct CounterNet<T: Real = f32> {
    stages: Vec<Sequential>,
    decoder: Sequential,
    params: ParamStore<T>,
    config: CounterConfig,
}

/// Handles into a recorded counter pass.
#[derive(Clone, Copy, Debug)]
pub struct CounterPass {
    pub density: Var,
    /// Pooled features after each stage, at 1/2, 1/4 and 1/8 resolution.
    pub features: [Var; LEVELS],
}

impl<T: Real> CounterNet<T> {
    pub fn new(config: &CounterConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut stages = Vec::with_capacity(LEVELS);
        let mut c = config.channels;
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(Sequential::new(
                &format!("backbone.{i}"),
                vec![
                    LayerSpec::conv3x3(c, w),
                    LayerSpec::Relu,
                    LayerSpec::conv3x3(w, w),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2,
                ],
                &mut params,
                rng,
            )?);
            c = w;
        }
        let mut layers = Vec::new();
        for &w in &config.decoder {
            layers.extend([LayerSpec::Upsample2, LayerSpec::conv3x3(c, w), LayerSpec::Relu]);
            c = w;
        }
        layers.extend([LayerSpec::conv3x3(c, 1), LayerSpec::Relu]);
        let decoder = Sequential::new("decoder", layers, &mut params, rng)?;
        Ok(CounterNet {
            stages,
            decoder,
            params,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &CounterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        self.params.bind(tape)
    }

    /// Records a pass over a `[N, C, H, W]` input with `H` and `W`
    /// divisible by 8.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<CounterPass> {
        let mut x = input;
        let mut features = [input; LEVELS];
        for (stage, slot) in self.stages.iter().zip(&mut features) {
            x = stage.forward(tape, bound, x)?;
            *slot = x;
        }
        let density = self.decoder.forward(tape, bound, x)?;
        Ok(CounterPass { density, features })
    }

    /// Density map `[H, W]` of one image given as `[1, C, H, W]`.
    pub fn predict(&self, image: Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = image.dims4()?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(image)?;
        let pass = self.forward(&mut tape, &bound, x)?;
        tape.value(pass.density).clone().reshape(vec![h, w])
    }

    pub fn cast<U: Real>(&self) -> CounterNet<U> {
        CounterNet {
            stages: self.stages.clone(),
            decoder: self.decoder.clone(),
            params: self.params.cast(),
            config: self.config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn load(path: &Path, config: &CounterConfig) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                what: "counter checkpoint".into(),
                path: path.to_path_buf(),
            });
        }
        let mut net = Self::new(config, &mut crate::rng::stream(0, crate::rng::Stream::CounterInit))?;
        net.params.load(checkpoint::load_arrays(path)?)?;
        Ok(net)
    }
}

/// One domain classifier per feature level. Each starts with a gradient
/// reversal layer and ends in a single logit per image; the probability
/// of "source" is its sigmoid.
#[derive(Clone, Debug)]
pub struct DomainClassifiers<T: Real = f32> {
    nets: Vec<Sequential>,
    params: ParamStore<T>,
}

impl<T: Real> DomainClassifiers<T> {
    pub fn new(config: &CounterConfig, lambda_grl: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let hidden = config.classifier_width;
        let nets = config
            .widths
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                Sequential::new(
                    &format!("classifier.{l}"),
                    vec![
                        LayerSpec::GradReverse { scale: lambda_grl },
                        LayerSpec::conv3x3(c, hidden),
                        LayerSpec::Relu,
                        LayerSpec::conv3x3(hidden, 1),
                        LayerSpec::GlobalAvgPool,
                    ],
                    &mut params,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(DomainClassifiers { nets, params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Logits `[N, 1]` of level `level` for gated features.
    pub fn logits(&self, tape: &mut Tape<T>, bound: &Bound, level: usize, features: Var) -> Result<Var> {
        self.nets[level].forward(tape, bound, features)
    }

    pub fn cast<U: Real>(&self) -> DomainClassifiers<U> {
        DomainClassifiers {
            nets: self.nets.clone(),
            params: self.params.cast(),
        }
    }
}

/// Discriminator over full-resolution density maps. Inputs are multiplied
/// by `input_scale` first so that typical densities are of order one.
#[derive(Clone, Debug)]
pub struct DensityDiscriminator<T: Real = f32> {
    net: Sequential,
    params: ParamStore<T>,
    input_scale: f64,
}

impl<T: Real> DensityDiscriminator<T> {
    pub fn new(config: &CounterConfig, input_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(input_scale > 0.0) {
            return Err(Error::Config("discriminator input scale must be > 0".into()));
        }
        let [a, b] = config.discriminator_widths;
        let mut params = ParamStore::new();
        let net = Sequential::new(
            "discriminator",
            vec![
                LayerSpec::conv3x3(1, a),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::conv3x3(a, b),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::conv3x3(b, 1),
                LayerSpec::GlobalAvgPool,
            ],
            &mut params,
            rng,
        )?;
        Ok(DensityDiscriminator {
            net,
            params,
            input_scale,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Logits `[N, 1]`; the probability of "pseudo label" is their sigmoid.
    pub fn logits(&self, tape: &mut Tape<T>, bound: &Bound, density: Var) -> Result<Var> {
        let x = tape.scale(density, T::of(self.input_scale))?;
        self.net.forward(tape, bound, x)
    }

    pub fn cast<U: Real>(&self) -> DensityDiscriminator<U> {
        DensityDiscriminator {
            net: self.net.clone(),
            params: self.params.cast(),
            input_scale: self.input_scale,
        }
    }
}

/// Features of one image at every level with their gates and domain label
/// (1 for source, 0 for target).
pub struct GatedSample<T> {
    pub features: [Var; LEVELS],
    /// `[1, 1, h_l, w_l]` gate per level.
    pub gates: [Tensor<T>; LEVELS],
    pub label: T,
}

/// Segmentation-gated adversarial loss: for each image the binary cross
/// entropies of all levels are summed, then averaged over the images.
pub fn crt_loss<T: Real>(
    tape: &mut Tape<T>,
    classifiers: &DomainClassifiers<T>,
    bound: &Bound,
    samples: Vec<GatedSample<T>>,
) -> Result<Var> {
    let count = samples.len();
    if count == 0 {
        return Err(Error::Empty("crt_loss needs at least one image".into()));
    }
    let mut total: Option<Var> = None;
    for s in samples {
        for (level, (f, gate)) in s.features.into_iter().zip(s.gates).enumerate() {
            let gated = tape.mask_mul(f, gate)?;
            let z = classifiers.logits(tape, bound, level, gated)?;
            let n = tape.shape(z)[0];
            let bce = tape.bce_with_logits(z, &vec![s.label; n])?;
            total = Some(match total {
                Some(t) => tape.add(t, bce)?,
                None => bce,
            });
        }
    }
    tape.scale(total.expect("non-empty"), T::of(1.0 / count as f64))
}

/// Density alignment loss: pseudo labels are the real class, the counter's
/// target output the fake one. The fake branch is gradient-reversed, so the
/// counter is pushed to fool the discriminator while the discriminator
/// learns to separate the two. Averaged over the batch.
pub fn cda_loss<T: Real>(
    tape: &mut Tape<T>,
    discriminator: &DensityDiscriminator<T>,
    bound: &Bound,
    pseudo: Tensor<T>,
    estimate: Var,
    lambda_grl: f64,
) -> Result<Var> {
    if pseudo.shape() != tape.shape(estimate) {
        return Err(Error::shape("cda_loss", tape.shape(estimate), pseudo.shape()));
    }
    let n = pseudo.shape()[0];
    let real = tape.constant(pseudo)?;
    let real = discriminator.logits(tape, bound, real)?;
    let real = tape.bce_with_logits(real, &vec![T::one(); n])?;
    let fake = tape.grad_reverse(estimate, T::of(lambda_grl))?;
    let fake = discriminator.logits(tape, bound, fake)?;
    let fake = tape.bce_with_logits(fake, &vec![T::zero(); n])?;
    let both = tape.add(real, fake)?;
    tape.scale(both, T::of(1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn small() -> CounterConfig {
        CounterConfig {
            channels: 1,
            widths: [2, 3, 2],
            decoder: [2, 2, 2],
            classifier_width: 2,
            discriminator_widths: [2, 2],
        }
    }

    #[test]
    fn counter_shapes() {
        let net = CounterNet::<f32>::new(&CounterConfig::default(), &mut rng::stream(0, Stream::CounterInit)).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::full(vec![1, 1, 16, 24], 0.5)).unwrap();
        let pass = net.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(pass.density), [1, 1, 16, 24]);
        assert_eq!(tape.shape(pass.features[0]), [1, 16, 8, 12]);
        assert_eq!(tape.shape(pass.features[1]), [1, 32, 4, 6]);
        assert_eq!(tape.shape(pass.features[2]), [1, 64, 2, 3]);
        assert!(tape.value(pass.density).data().iter().all(|&v| v >= 0.0));
    }

    /// Replaces every parameter with zeros so all logits are exactly 0.
    fn zeroed<T: Real>(store: &mut ParamStore<T>) {
        for v in store.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    #[test]
    fn symmetric_classifiers_give_log_two_losses() {
        let cfg = small();
        let net = CounterNet::<f64>::new(&cfg, &mut rng::stream(1, Stream::CounterInit)).unwrap();
        let mut cls = DomainClassifiers::<f64>::new(&cfg, 1.0, &mut rng::stream(1, Stream::DiscriminatorInit)).unwrap();
        zeroed(cls.params_mut());
        let mut dm = DensityDiscriminator::<f64>::new(&cfg, 100.0, &mut rng::stream(2, Stream::DiscriminatorInit)).unwrap();
        zeroed(dm.params_mut());
        let mut tape = Tape::new();
        let bn = net.bind(&mut tape).unwrap();
        let bc = cls.params().bind(&mut tape).unwrap();
        let bd = dm.params().bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 8, 8], |i| (i % 5) as f64 / 5.0)).unwrap();
        let pass = net.forward(&mut tape, &bn, x).unwrap();
        let gates = [
            Tensor::full(vec![1, 1, 4, 4], 1.0),
            Tensor::full(vec![1, 1, 2, 2], 1.0),
            Tensor::full(vec![1, 1, 1, 1], 1.0),
        ];
        let sample = |label| GatedSample {
            features: pass.features,
            gates: gates.clone(),
            label,
        };
        let crt = crt_loss(&mut tape, &cls, &bc, vec![sample(1.0), sample(0.0)]).unwrap();
        assert!((tape.value(crt).data()[0] - 3.0 * 2f64.ln()).abs() < 1e-12);
        let pseudo = Tensor::full(vec![1, 1, 8, 8], 0.01);
        let cda = cda_loss(&mut tape, &dm, &bd, pseudo, pass.density, 1.0).unwrap();
        assert!((tape.value(cda).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_gate_blocks_backbone_gradient() {
        let cfg = small();
        let net = CounterNet::<f64>::new(&cfg, &mut rng::stream(3, Stream::CounterInit)).unwrap();
        let cls = DomainClassifiers::<f64>::new(&cfg, 1.0, &mut rng::stream(3, Stream::DiscriminatorInit)).unwrap();
        let mut tape = Tape::new();
        let bn = net.bind(&mut tape).unwrap();
        let bc = cls.params().bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 8, 8], |i| (i % 7) as f64 / 7.0)).unwrap();
        let pass = net.forward(&mut tape, &bn, x).unwrap();
        let gates = [
            Tensor::zeros(vec![1, 1, 4, 4]),
            Tensor::zeros(vec![1, 1, 2, 2]),
            Tensor::zeros(vec![1, 1, 1, 1]),
        ];
        let loss = crt_loss(
            &mut tape,
            &cls,
            &bc,
            vec![GatedSample {
                features: pass.features,
                gates,
                label: 1.0,
            }],
        )
        .unwrap();
        let g = tape.backward_scalar(loss).unwrap();
        for t in bn.grads(&g, net.params()) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pseudo_branch_does_not_reach_counter() {
        let cfg = small();
        let net = CounterNet::<f64>::new(&cfg, &mut rng::stream(4, Stream::CounterInit)).unwrap();
        let dm = DensityDiscriminator::<f64>::new(&cfg, 100.0, &mut rng::stream(4, Stream::DiscriminatorInit)).unwrap();
        let mut tape = Tape::new();
        let bn = net.bind(&mut tape).unwrap();
        let bd = dm.params().bind(&mut tape).unwrap();
        // The estimate is a constant leaf, so only the pseudo-label branch
        // and the discriminator are differentiable.
        let est = tape.constant(Tensor::full(vec![1, 1, 8, 8], 0.02)).unwrap();
        let loss = cda_loss(&mut tape, &dm, &bd, Tensor::full(vec![1, 1, 8, 8], 0.01), est, 1.0).unwrap();
        let g = tape.backward_scalar(loss).unwrap();
        for t in bn.grads(&g, net.params()) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(bd.grads(&g, dm.params()).iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counter.ckpt");
        let cfg = CounterConfig::default();
        let net = CounterNet::<f32>::new(&cfg, &mut rng::stream(5, Stream::CounterInit)).unwrap();
        net.save(&path).unwrap();
        assert_eq!(CounterNet::<f32>::load(&path, &cfg).unwrap().params(), net.params());
        assert!(CounterNet::<f32>::load(&path, &small()).is_err());
    }
}
