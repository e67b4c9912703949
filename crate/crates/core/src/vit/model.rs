use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{argmax, Tape, Tensor, Var};

use super::encoder::{self, BlockView, Gate, TapeTrace};
use super::params::{self, bind, leaves, Block, BlockNorms, BlockWeights, Head, Stem, ViTParams};
use super::{ModelError, ViTConfig};

/// σ of the positional / prefix token initialization.
pub const EMBED_INIT_STD: f32 = 0.02;

/// Outputs of one forward pass. Attention maps are `[H×n×n]` per block and
/// hidden states `[n×D]` per block; both are empty unless a trace was requested.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub distill_logits: Option<Tensor>,
    pub attentions: Vec<Tensor>,
    pub hiddens: Vec<Tensor>,
}

impl ForwardTrace {
    /// Logits used for classification: the mean of both heads when a
    /// distillation head exists.
    pub fn fused_logits(&self) -> Tensor {
        fuse_logits(&self.logits, self.distill_logits.as_ref())
    }

    pub(crate) fn collect(tape: &Tape, t: &TapeTrace, heads: usize, want_trace: bool) -> Result<Self, ModelError> {
        let flat = |v: Var| {
            let val = tape.value(v);
            val.reshape(&[val.numel()])
        };
        let mut out = ForwardTrace {
            logits: flat(t.logits)?,
            distill_logits: t.distill_logits.map(flat).transpose()?,
            attentions: Vec::new(),
            hiddens: Vec::new(),
        };
        if want_trace {
            for &a in &t.attentions {
                let val = tape.value(a);
                let n = val.dims2().1;
                out.attentions.push(val.reshape(&[heads, n, n])?);
            }
            out.hiddens = t.hiddens.iter().map(|&h| tape.value(h).clone()).collect();
        }
        Ok(out)
    }
}

pub(crate) fn fuse_logits(cls: &Tensor, dist: Option<&Tensor>) -> Tensor {
    match dist {
        Some(d) => cls.zip_map(d, |a, b| 0.5 * (a + b)).expect("heads share the class count"),
        None => cls.clone(),
    }
}

/// Argmax label, lowest index on ties.
pub fn label_of(logits: &Tensor) -> usize {
    argmax(logits.data())
}

/// A float ViT / DeiT classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ViTConfig,
    params: ViTParams<Tensor>,
}

impl Model {
    /// Seeded initialization.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let stem = Stem {
            patch: params::linear_init(&mut rng, config.patch_dim(), d),
            cls: params::normal(&mut rng, &[1, d], EMBED_INIT_STD),
            dist: config.use_distill_token.then(|| params::normal(&mut rng, &[1, d], EMBED_INIT_STD)),
            pos: params::normal(&mut rng, &[config.num_tokens(), d], EMBED_INIT_STD),
        };
        let blocks = (0..config.depth)
            .map(|_| Block {
                norms: BlockNorms { ln1: params::norm_init(d), ln2: params::norm_init(d) },
                weights: BlockWeights {
                    q: params::linear_init(&mut rng, d, d),
                    k: params::linear_init(&mut rng, d, d),
                    v: params::linear_init(&mut rng, d, d),
                    o: params::linear_init(&mut rng, d, d),
                    fc1: params::linear_init(&mut rng, d, config.mlp_hidden()),
                    fc2: params::linear_init(&mut rng, config.mlp_hidden(), d),
                },
            })
            .collect();
        let head = Head {
            norm: params::norm_init(d),
            head: params::linear_init(&mut rng, d, config.num_classes),
            dist_head: config
                .use_distill_token
                .then(|| params::linear_init(&mut rng, d, config.num_classes)),
        };
        Ok(Self { config, params: ViTParams { stem, blocks, head } })
    }

    /// Wraps existing parameters after checking them against `config`.
    pub fn from_params(config: ViTConfig, params: ViTParams<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = Model::new(config.clone(), 0)?;
        let want = params::named_leaves(&reference.params);
        let got = params::named_leaves(&params);
        if want.len() != got.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || wt.shape() != gt.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {gn} {:?} does not match expected {wn} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ViTParams<Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ViTParams<Tensor> {
        &mut self.params
    }

    pub fn into_params(self) -> ViTParams<Tensor> {
        self.params
    }

    pub fn num_params(&self) -> usize {
        leaves(&self.params).iter().map(|t| t.numel()).sum()
    }

    pub(crate) fn check_image(&self, image: &Tensor) -> Result<(), ModelError> {
        check_image(&self.config, image)
    }

    /// Records the forward pass on `tape` with already-bound parameters.
    pub(crate) fn encode_bound(
        &self,
        tape: &mut Tape,
        vars: &ViTParams<Var>,
        image: Var,
        gate: Gate,
        trace: bool,
    ) -> Result<TapeTrace, ModelError> {
        let views: Vec<BlockView> = vars
            .blocks
            .iter()
            .map(|b| BlockView { norms: &b.norms, weights: &b.weights, affine: None })
            .collect();
        Ok(encoder::encode(tape, &self.config, &vars.stem, &views, &vars.head, image, gate, trace)?)
    }

    pub fn forward(&self, image: &Tensor, want_trace: bool) -> Result<ForwardTrace, ModelError> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.params, false);
        let x = tape.constant(image.clone());
        let t = self.encode_bound(&mut tape, &vars, x, Gate::Off, want_trace)?;
        ForwardTrace::collect(&tape, &t, self.config.heads, want_trace)
    }

    /// Argmax of the fused logits.
    pub fn classify(&self, image: &Tensor) -> Result<usize, ModelError> {
        Ok(label_of(&self.forward(image, false)?.fused_logits()))
    }

    /// Gradient of cross-entropy (on fused logits) with respect to the input image.
    pub fn input_gradient(&self, image: &Tensor, label: usize) -> Result<Tensor, ModelError> {
        super::train::input_gradient(self, image, label)
    }
}

pub(crate) fn check_image(config: &ViTConfig, image: &Tensor) -> Result<(), ModelError> {
    if image.shape() != config.image_shape() {
        return Err(ModelError::ImageShape { expected: config.image_shape().to_vec(), got: image.shape().to_vec() });
    }
    Ok(())
}

/// `-log softmax(logits)[label]` for `[1×C]` logits.
pub(crate) fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> crate::tensor::Result<Var> {
    let c = tape.value(logits).numel();
    let lp = tape.log_softmax(logits);
    let onehot = tape.constant(Tensor::from_fn(&[1, c], |i| if i == label { -1.0 } else { 0.0 }));
    let picked = tape.mul(lp, onehot)?;
    Ok(tape.sum(picked))
}
