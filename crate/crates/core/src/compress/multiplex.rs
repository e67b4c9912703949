//! Weight multiplexing: consecutive blocks share one set of matrices.
//!
//! Each group of `g` blocks points at a single [`BlockWeights`]; every block
//! keeps its own LayerNorms and, when sharing is on, a diagonal scale + shift
//! on its output so shared blocks can still differ.

use crate::tensor::{Tape, Tensor, Var};
use crate::vit::checkpoint::{Checkpoint, CheckpointError, VariantStanza};
use crate::vit::encoder::{self, BlockView, Gate};
use crate::vit::params::{
    bind, identity_affine, join, leaves, leaves_mut, Affine, BlockNorms, BlockWeights, Head, MapLeaves, ParamTree, Stem,
    Visitor, VisitorMut,
};
use crate::vit::train::TapeModel;
use crate::vit::{check_image, ForwardTrace, Model, ModelError, TapeTrace, ViTConfig};

/// All trainable tensors of a [`MiniModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct MiniParams<T> {
    pub stem: Stem<T>,
    pub shared: Vec<BlockWeights<T>>,
    pub norms: Vec<BlockNorms<T>>,
    pub affines: Vec<Affine<T>>,
    pub head: Head<T>,
}

impl<T> ParamTree<T> for MiniParams<T> {
    fn visit<'a>(&'a self, path: &str, f: Visitor<'a, '_, T>) {
        self.stem.visit(&join(path, "stem"), f);
        self.shared.visit(&join(path, "shared"), f);
        self.norms.visit(&join(path, "norms"), f);
        self.affines.visit(&join(path, "affines"), f);
        self.head.visit(&join(path, "head"), f);
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: VisitorMut<'a, '_, T>) {
        self.stem.visit_mut(&join(path, "stem"), f);
        self.shared.visit_mut(&join(path, "shared"), f);
        self.norms.visit_mut(&join(path, "norms"), f);
        self.affines.visit_mut(&join(path, "affines"), f);
        self.head.visit_mut(&join(path, "head"), f);
    }
}

impl<T> MapLeaves<T> for MiniParams<T> {
    type Out<U> = MiniParams<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> MiniParams<U> {
        let stem = self.stem.map_leaves(f);
        let shared = self.shared.map_leaves(f);
        let norms = self.norms.map_leaves(f);
        let affines = self.affines.map_leaves(f);
        let head = self.head.map_leaves(f);
        MiniParams { stem, shared, norms, affines, head }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniModel {
    config: ViTConfig,
    group_size: usize,
    params: MiniParams<Tensor>,
}

/// Shares the first block's matrices across each group of `group_size`
/// consecutive blocks. With `group_size == 1` nothing is shared and no
/// transformations are added, so the model is parameter-for-parameter the original.
pub fn multiplex(model: &Model, group_size: usize) -> Result<MiniModel, ModelError> {
    let cfg = model.config();
    if group_size == 0 || cfg.depth % group_size != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "depth {} is not divisible by group size {group_size}",
            cfg.depth
        )));
    }
    let p = model.params();
    let shared = p.blocks.iter().step_by(group_size).map(|b| b.weights.clone()).collect();
    let norms = p.blocks.iter().map(|b| b.norms.clone()).collect();
    let affines = if group_size > 1 { (0..cfg.depth).map(|_| identity_affine(cfg.embed_dim)).collect() } else { Vec::new() };
    Ok(MiniModel {
        config: cfg.clone(),
        group_size,
        params: MiniParams { stem: p.stem.clone(), shared, norms, affines, head: p.head.clone() },
    })
}

impl MiniModel {
    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn params(&self) -> &MiniParams<Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MiniParams<Tensor> {
        &mut self.params
    }

    /// Matrices used by block `i`.
    pub fn block_weights(&self, i: usize) -> &BlockWeights<Tensor> {
        &self.params.shared[i / self.group_size]
    }

    pub fn num_params(&self) -> usize {
        leaves(&self.params).iter().map(|t| t.numel()).sum()
    }

    /// Parameters attributable to transformer blocks (shared matrices, per-block norms and transforms).
    pub fn block_params(&self) -> usize {
        let count = |v: Vec<&Tensor>| v.iter().map(|t| t.numel()).sum::<usize>();
        count(leaves(&self.params.shared)) + count(leaves(&self.params.norms)) + count(leaves(&self.params.affines))
    }

    fn encode_bound(&self, tape: &mut Tape, vars: &MiniParams<Var>, image: Var, trace: bool) -> Result<TapeTrace, ModelError> {
        let views: Vec<BlockView> = (0..self.config.depth)
            .map(|i| BlockView {
                norms: &vars.norms[i],
                weights: &vars.shared[i / self.group_size],
                affine: vars.affines.get(i),
            })
            .collect();
        Ok(encoder::encode(tape, &self.config, &vars.stem, &views, &vars.head, image, Gate::Off, trace)?)
    }

    pub fn forward(&self, image: &Tensor, want_trace: bool) -> Result<ForwardTrace, ModelError> {
        check_image(&self.config, image)?;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.params, false);
        let x = tape.constant(image.clone());
        let t = self.encode_bound(&mut tape, &vars, x, want_trace)?;
        ForwardTrace::collect(&tape, &t, self.config.heads, want_trace)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.config.clone(),
            variant: VariantStanza::Multiplexed { group_size: self.group_size },
            tensors: Vec::new(),
        };
        ck.push_tree("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let VariantStanza::Multiplexed { group_size } = ck.variant else {
            return Err(CheckpointError::Mismatch(format!("expected a multiplexed checkpoint, found {:?}", ck.variant)));
        };
        let reference = Model::new(ck.config.clone(), 0).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut m = multiplex(&reference, group_size).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut cursor = 0;
        ck.fill_tree(&mut cursor, "", &mut m.params)?;
        if cursor != ck.tensors.len() {
            return Err(CheckpointError::Mismatch(format!("{} unexpected trailing tensors", ck.tensors.len() - cursor)));
        }
        Ok(m)
    }
}

impl TapeModel for MiniModel {
    fn config(&self) -> &ViTConfig {
        &self.config
    }

    fn trainable(&self) -> Vec<&Tensor> {
        leaves(&self.params)
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        leaves_mut(&mut self.params)
    }

    fn record(&self, tape: &mut Tape, image: Var, trace: bool) -> Result<(TapeTrace, Vec<Var>), ModelError> {
        let vars = bind(tape, &self.params, true);
        let t = self.encode_bound(tape, &vars, image, trace)?;
        Ok((t, leaves(&vars).into_iter().copied().collect()))
    }

    fn record_eval(&self, tape: &mut Tape, image: Var) -> Result<TapeTrace, ModelError> {
        let vars = bind(tape, &self.params, false);
        self.encode_bound(tape, &vars, image, false)
    }

    fn eval_logits(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(image, false)?.fused_logits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ToySize;

    fn img(cfg: &ViTConfig) -> Tensor {
        Tensor::from_fn(&cfg.image_shape(), |i| ((i * 31) % 97) as f32 / 97.0)
    }

    #[test]
    fn group_of_one_keeps_parameter_count_and_function() {
        let cfg = ViTConfig::toy_small();
        let m = Model::new(cfg.clone(), 1).unwrap();
        let mini = multiplex(&m, 1).unwrap();
        assert_eq!(mini.num_params(), m.num_params());
        let a = m.forward(&img(&cfg), false).unwrap().logits;
        assert_eq!(mini.forward(&img(&cfg), false).unwrap().logits, a);
    }

    #[test]
    fn pairs_roughly_halve_block_parameters() {
        let cfg = ViTConfig::toy(ToySize::ToyBase);
        let m = Model::new(cfg.clone(), 1).unwrap();
        let mini = multiplex(&m, 2).unwrap();
        let unshared = cfg.depth * cfg.block_param_count();
        let ratio = mini.block_params() as f64 / unshared as f64;
        assert!((0.5..0.55).contains(&ratio), "{ratio}");
        assert!(mini.num_params() < m.num_params());
    }

    #[test]
    fn depth_must_divide() {
        let m = Model::new(ViTConfig::toy(ToySize::ToyBase), 1).unwrap();
        assert!(multiplex(&m, 4).is_err());
        assert!(multiplex(&m, 0).is_err());
        assert!(multiplex(&m, 3).is_ok());
    }

    #[test]
    fn shared_weights_alias_within_a_group() {
        let cfg = ViTConfig::toy_small();
        let mut mini = multiplex(&Model::new(cfg.clone(), 2).unwrap(), 2).unwrap();
        assert!(std::ptr::eq(mini.block_weights(0), mini.block_weights(1)));
        assert!(!std::ptr::eq(mini.block_weights(1), mini.block_weights(2)));
        let before = mini.forward(&img(&cfg), true).unwrap();
        mini.params_mut().shared[0].fc2.bias.data_mut()[0] += 0.5;
        // both blocks of group 0 see the same new bias
        assert_eq!(mini.block_weights(0).fc2.bias.data()[0], mini.block_weights(1).fc2.bias.data()[0]);
        let after = mini.forward(&img(&cfg), true).unwrap();
        for i in 0..2 {
            assert_ne!(before.hiddens[i], after.hiddens[i]);
        }
    }

    #[test]
    fn fresh_multiplex_is_finite_but_different() {
        let cfg = ViTConfig::toy_small();
        let m = Model::new(cfg.clone(), 3).unwrap();
        let mini = multiplex(&m, 2).unwrap();
        let a = m.forward(&img(&cfg), false).unwrap().logits;
        let b = mini.forward(&img(&cfg), true).unwrap();
        assert!(b.logits.is_finite());
        assert_ne!(a, b.logits);
        for att in &b.attentions {
            for row in att.data().chunks(cfg.num_tokens()) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_smaller() {
        let cfg = ViTConfig::toy(ToySize::ToyBase);
        let m = Model::new(cfg, 4).unwrap();
        let mini = multiplex(&m, 2).unwrap();
        let ck = mini.checkpoint();
        let bytes = ck.to_bytes();
        let back = MiniModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, mini);
        assert!(ck.payload_bytes() < crate::vit::checkpoint::float_checkpoint(&m).payload_bytes());
    }

    #[test]
    fn gradients_accumulate_over_shared_blocks() {
        let cfg = ViTConfig { image_size: 8, patch_size: 4, channels: 1, embed_dim: 8, depth: 2, heads: 2, ..ViTConfig::toy_small() };
        let mini = multiplex(&Model::new(cfg.clone(), 5).unwrap(), 2).unwrap();
        let image = img(&cfg);
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let (t, vars) = mini.record(&mut tape, x, false).unwrap();
        let loss = crate::vit::cross_entropy(&mut tape, t.logits, 1).unwrap();
        let mut g = tape.backward(loss).unwrap();
        // index of shared[0].q.weight among trainable leaves
        let names = crate::vit::params::named_leaves(&mini.params);
        let qi = names.iter().position(|(n, _)| n == "shared.0.q.weight").unwrap();
        let analytic = g.take(vars[qi]).unwrap();
        let coords: Vec<usize> = (0..analytic.numel()).step_by(5).collect();
        let fd = crate::tensor::finite_diff_at(
            |w| {
                let mut m2 = mini.clone();
                m2.params_mut().shared[0].q.weight = w.clone();
                let l = m2.forward(&image, false).unwrap().logits;
                let lse = l.data().iter().map(|&v| f64::from(v).exp()).sum::<f64>().ln();
                lse - f64::from(l.data()[1])
            },
            &mini.params.shared[0].q.weight,
            &coords,
            1e-2,
        );
        for (&c, n) in coords.iter().zip(fd) {
            let a = f64::from(analytic.data()[c]);
            assert!((a - n).abs() < 1e-2 * a.abs().max(n.abs()).max(1e-2), "{a} vs {n}");
        }
    }
}
