//! Encoder-decoder segmentation network with a state-space bottleneck.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Head, ModelConfig};
use super::ssm::{ssm_mix_op, SsmParamVars};
use crate::error::{shape_err, Error, Result};
use crate::nn::conv::{conv3d, conv_transpose3d};
use crate::nn::ops::{add, concat_channels, instance_norm, leaky_relu, softmax_channels_value};
use crate::nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};

const NEG_SLOPE: f64 = 0.01;
const NORM_EPS: f64 = 1e-5;

/// Encoder activations, ordered shallow to deep. The last map is the
/// bottleneck output (after sequence mixing).
#[derive(Clone, Debug)]
pub struct FeatureMaps<T: Real> {
    pub maps: Vec<Tensor<T>>,
}

impl<T: Real> FeatureMaps<T> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Clone, Debug)]
struct ConvNormAct {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: Option<ParamId>,
    blocks: [ConvNormAct; 2],
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up_weight: ParamId,
    up_bias: ParamId,
    blocks: [ConvNormAct; 2],
}

#[derive(Clone, Debug)]
struct BottleneckParams {
    fwd: [ParamId; 4],
    bwd: [ParamId; 4],
    skip: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<EncoderStage>,
    bottleneck: BottleneckParams,
    /// decoder[s] produces the stage-`s` resolution, s = 0..num_stages-1
    decoder: Vec<DecoderStage>,
    head_weight: ParamId,
    head_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct UNet<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn kaiming<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let gain = (2.0 / (1.0 + NEG_SLOPE * NEG_SLOPE)).sqrt();
    scaled_normal(shape, gain / (fan_in as f64).sqrt(), rng)
}

fn scaled_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(rng)))
}

fn build_layout<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Layout {
    let conv_block = |store: &mut ParamStore<T>, rng: &mut R, name: String, cin: usize, cout: usize| {
        ConvNormAct {
            weight: store.add(format!("{name}.conv.weight"), kaiming(&[cout, cin, 3, 3, 3], cin * 27, rng)),
            gamma: store.add(format!("{name}.norm.gamma"), ArrayD::ones(IxDyn(&[cout]))),
            beta: store.add(format!("{name}.norm.beta"), ArrayD::zeros(IxDyn(&[cout]))),
        }
    };
    let mut encoder = Vec::with_capacity(cfg.num_stages);
    let mut cin = cfg.in_channels;
    for s in 0..cfg.num_stages {
        let c = cfg.stage_channels(s);
        let down = (s > 0).then(|| {
            store.add(format!("enc.{s}.down.weight"), kaiming(&[c, cin, 2, 2, 2], cin * 8, rng))
        });
        let first_in = if s == 0 { cin } else { c };
        let b0 = conv_block(store, rng, format!("enc.{s}.block0"), first_in, c);
        let b1 = conv_block(store, rng, format!("enc.{s}.block1"), c, c);
        encoder.push(EncoderStage { down, blocks: [b0, b1] });
        cin = c;
    }

    let f = cfg.stage_channels(cfg.num_stages - 1);
    let n = cfg.bottleneck_state_dim;
    let proj_std = 0.5 / (f as f64).sqrt();
    let direction = |store: &mut ParamStore<T>, rng: &mut R, dir: &str| {
        [
            store.add(format!("bottleneck.{dir}.decay_w"), scaled_normal(&[f], 0.1 / (f as f64).sqrt(), rng)),
            store.add(format!("bottleneck.{dir}.decay_b"), ArrayD::from_elem(IxDyn(&[1]), T::one())),
            store.add(format!("bottleneck.{dir}.w_b"), scaled_normal(&[n, f], proj_std, rng)),
            store.add(format!("bottleneck.{dir}.w_c"), scaled_normal(&[n, f], proj_std, rng)),
        ]
    };
    let fwd = direction(store, rng, "fwd");
    let bwd = direction(store, rng, "bwd");
    let skip = store.add("bottleneck.skip", ArrayD::zeros(IxDyn(&[f])));
    let bottleneck = BottleneckParams { fwd, bwd, skip };

    let mut decoder = Vec::with_capacity(cfg.num_stages - 1);
    for s in 0..cfg.num_stages - 1 {
        let (deep, c) = (cfg.stage_channels(s + 1), cfg.stage_channels(s));
        let up_weight = store.add(format!("dec.{s}.up.weight"), kaiming(&[deep, c, 2, 2, 2], deep * 8, rng));
        let up_bias = store.add(format!("dec.{s}.up.bias"), ArrayD::zeros(IxDyn(&[c])));
        let b0 = conv_block(store, rng, format!("dec.{s}.block0"), 2 * c, c);
        let b1 = conv_block(store, rng, format!("dec.{s}.block1"), c, c);
        decoder.push(DecoderStage {
            up_weight,
            up_bias,
            blocks: [b0, b1],
        });
    }

    let (c0, out) = (cfg.stage_channels(0), cfg.output_channels());
    let head_weight = store.add("head.weight", scaled_normal(&[out, c0, 1, 1, 1], 1.0 / (c0 as f64).sqrt(), rng));
    let head_bias = store.add("head.bias", ArrayD::zeros(IxDyn(&[out])));
    Layout {
        encoder,
        bottleneck,
        decoder,
        head_weight,
        head_bias,
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

impl<T: Real> UNet<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, rng);
        Ok(Self { config, params, layout })
    }

    /// Rebuild a network from stored parameters; names and shapes must match
    /// what `config` lays out.
    pub fn from_params(config: ModelConfig, stored: ParamStore<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        if stored.len() != model.params.len() {
            return shape_err(format!(
                "parameter count {} does not match config ({})",
                stored.len(),
                model.params.len()
            ));
        }
        for ((_, expect), (_, got)) in model.params.iter().zip(stored.iter()) {
            if expect.name != got.name || expect.value.shape() != got.value.shape() {
                return shape_err(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    expect.name,
                    expect.value.shape(),
                    got.name,
                    got.value.shape()
                ));
            }
        }
        model.params = stored;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameters of the encoder-decoder trunk, in store order.
    pub fn trunk_params(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.params
            .iter()
            .filter(|(_, p)| !is_head(&p.name))
            .map(|(_, p)| (p.name.as_str(), &p.value))
    }

    /// Same network in another element type.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.config.in_channels || s[2..] != self.config.patch_size[..] {
            return shape_err(format!(
                "input {:?} does not match [N, {}, {:?}]",
                s, self.config.in_channels, self.config.patch_size
            ));
        }
        if s[0] == 0 {
            return shape_err("empty batch");
        }
        Ok(())
    }

    fn conv_norm_act(&self, g: &mut Graph<T>, x: Var, b: &ConvNormAct) -> Var {
        let w = g.param(&self.params, b.weight);
        let h = conv3d(g, x, w, None, 1, 1);
        let gamma = g.param(&self.params, b.gamma);
        let beta = g.param(&self.params, b.beta);
        let h = instance_norm(g, h, gamma, beta, T::lit(NORM_EPS));
        leaky_relu(g, h, T::lit(NEG_SLOPE))
    }

    /// Encoder pass recorded on `g`; `x` is `[N, in_channels, D, H, W]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        self.check_input(g.value(x))?;
        let mut h = x;
        let mut maps = Vec::with_capacity(self.config.num_stages);
        for (s, stage) in self.layout.encoder.iter().enumerate() {
            if let Some(down) = stage.down {
                let w = g.param(&self.params, down);
                h = conv3d(g, h, w, None, 2, 0);
            }
            for b in &stage.blocks {
                h = self.conv_norm_act(g, h, b);
            }
            if s + 1 == self.config.num_stages {
                let p = &self.layout.bottleneck;
                let vars = SsmParamVars {
                    fwd: p.fwd.map(|id| g.param(&self.params, id)),
                    bwd: p.bwd.map(|id| g.param(&self.params, id)),
                    skip: g.param(&self.params, p.skip),
                };
                let mixed = ssm_mix_op(g, h, &vars);
                h = add(g, h, mixed);
            }
            maps.push(h);
        }
        Ok(maps)
    }

    /// Decoder pass from (possibly perturbed) encoder maps; returns logits
    /// (segmentation) or the single-channel reconstruction.
    pub fn decode_graph(&self, g: &mut Graph<T>, maps: &[Var]) -> Result<Var> {
        let stages = self.config.num_stages;
        if maps.len() != stages {
            return shape_err(format!("expected {stages} feature maps, got {}", maps.len()));
        }
        for (s, &m) in maps.iter().enumerate() {
            let shape = g.value(m).shape();
            let ext = self.config.stage_extent(s);
            if shape.len() != 5 || shape[1] != self.config.stage_channels(s) || shape[2..] != ext[..] {
                return shape_err(format!("feature map {s} has shape {shape:?}"));
            }
        }
        let mut h = maps[stages - 1];
        for s in (0..stages - 1).rev() {
            let stage = &self.layout.decoder[s];
            let w = g.param(&self.params, stage.up_weight);
            let b = g.param(&self.params, stage.up_bias);
            let up = conv_transpose3d(g, h, w, Some(b), 2);
            h = concat_channels(g, up, maps[s]);
            for blk in &stage.blocks {
                h = self.conv_norm_act(g, h, blk);
            }
        }
        let w = g.param(&self.params, self.layout.head_weight);
        let b = g.param(&self.params, self.layout.head_bias);
        Ok(conv3d(g, h, w, Some(b), 1, 0))
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let maps = self.encode_graph(g, x)?;
        self.decode_graph(g, &maps)
    }

    /// Evaluation-mode encoder pass.
    pub fn encode(&self, x: &Tensor<T>) -> Result<FeatureMaps<T>> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let maps = self.encode_graph(&mut g, xv)?;
        Ok(FeatureMaps {
            maps: maps.into_iter().map(|m| g.value(m).clone()).collect(),
        })
    }

    /// Evaluation-mode decoder pass.
    pub fn decode(&self, features: &FeatureMaps<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = features.maps.iter().map(|m| g.constant(m.clone())).collect();
        let out = self.decode_graph(&mut g, &vars)?;
        Ok(g.value(out).clone())
    }

    /// Evaluation-mode forward: logits or reconstruction, `[N, out, D, H, W]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// Evaluation-mode class probabilities (segmentation head only).
    pub fn predict_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.config.head != Head::Segmentation {
            return Err(Error::Config("probabilities need a segmentation head".into()));
        }
        Ok(softmax_channels_value(&self.forward(x)?))
    }
}

/// Swap a reconstruction (or any) head for a freshly initialized head of
/// `target`; trunk parameters are copied unchanged.
pub fn convert_head<T: Real, R: Rng + ?Sized>(source: &UNet<T>, target: &ModelConfig, rng: &mut R) -> Result<UNet<T>> {
    if !source.config.same_trunk(target) {
        return Err(Error::Config(
            "cannot convert head: encoder/decoder trunk configs differ".into(),
        ));
    }
    let mut out = UNet::new(target.clone(), rng)?;
    for (id, p) in out.params.iter_mut() {
        if is_head(&p.name) {
            continue;
        }
        let src = source
            .params
            .find(&p.name)
            .ok_or_else(|| Error::Shape(format!("source lacks parameter {}", p.name)))?;
        debug_assert_eq!(id.index(), src.index());
        p.value.clone_from(source.params.value(src));
    }
    Ok(out)
}

/// Bottleneck weights as plain arrays (for inspection and tests).
pub fn bottleneck_weights<T: Real>(model: &UNet<T>) -> super::ssm::SsmWeights<T> {
    let p = &model.layout.bottleneck;
    let v = |id: ParamId| model.params.value(id).clone();
    let dir = |ids: &[ParamId; 4]| super::ssm::ScanWeights {
        decay_w: v(ids[0]).into_dimensionality::<ndarray::Ix1>().expect("vector"),
        decay_b: v(ids[1]).iter().next().copied().unwrap_or_else(T::zero),
        w_b: v(ids[2]).into_dimensionality::<ndarray::Ix2>().expect("matrix"),
        w_c: v(ids[3]).into_dimensionality::<ndarray::Ix2>().expect("matrix"),
    };
    super::ssm::SsmWeights {
        forward: dir(&p.fwd),
        backward: dir(&p.bwd),
        skip: v(p.skip).into_dimensionality::<ndarray::Ix1>().expect("vector"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let [d, h, w] = cfg.patch_size;
        scaled_normal(&[n, 1, d, h, w], 1.0, rng)
    }

    #[test]
    fn encoder_halves_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::test_default();
        let model = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let x = input(&cfg, 2, &mut rng);
        let f = model.encode(&x).unwrap();
        let shapes: Vec<Vec<usize>> = f.maps.iter().map(|m| m.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 8, 32, 32, 32],
                vec![2, 16, 16, 16, 16],
                vec![2, 32, 8, 8, 8],
                vec![2, 64, 4, 4, 4]
            ]
        );
        let logits = model.decode(&f).unwrap();
        assert_eq!(logits.shape(), &[2, 3, 32, 32, 32]);
    }

    #[test]
    fn identical_batch_items_give_identical_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = ModelConfig::test_default();
        cfg.patch_size = [16, 16, 16];
        cfg.num_stages = 3;
        let model = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let one = input(&cfg, 1, &mut rng);
        let two = ndarray::concatenate(ndarray::Axis(0), &[one.view(), one.view()]).unwrap();
        let f = model.encode(&two).unwrap();
        for m in &f.maps {
            let a = m.index_axis(ndarray::Axis(0), 0);
            let b = m.index_axis(ndarray::Axis(0), 1);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reconstruction_head_matches_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = ModelConfig::test_default().with_head(Head::Reconstruction);
        cfg.patch_size = [16, 16, 16];
        let model = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let x = input(&cfg, 1, &mut rng);
        assert_eq!(model.forward(&x).unwrap().shape(), x.shape());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig::test_default();
        let model = UNet::<f32>::new(cfg, &mut rng).unwrap();
        let x = ArrayD::<f32>::zeros(IxDyn(&[1, 1, 16, 32, 32]));
        assert!(matches!(model.encode(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn convert_head_keeps_trunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = ModelConfig::test_default().with_head(Head::Reconstruction);
        cfg.patch_size = [16, 16, 16];
        cfg.num_stages = 3;
        let recon = UNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let target = cfg.clone().with_head(Head::Segmentation);
        let seg = convert_head(&recon, &target, &mut rng).unwrap();
        for ((na, a), (nb, b)) in recon.trunk_params().zip(seg.trunk_params()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        let x = input(&cfg, 1, &mut rng);
        let fa = recon.encode(&x).unwrap();
        let fb = seg.encode(&x).unwrap();
        for (a, b) in fa.maps.iter().zip(&fb.maps) {
            assert_eq!(a, b);
        }
        assert_eq!(recon.forward(&x).unwrap().shape()[1], 1);
        assert_eq!(seg.forward(&x).unwrap().shape()[1], target.num_classes);

        let mut other = target.clone();
        other.base_channels = 4;
        assert!(convert_head(&recon, &other, &mut rng).is_err());
    }
}
