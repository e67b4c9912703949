//! Parameter trees, generic over the leaf type.
//!
//! The same structure holds either owned [`Tensor`]s or tape handles
//! ([`Var`]). `visit` walks leaves in one canonical order; checkpoint
//! manifests, gradient collection and optimizer state all rely on it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Tape, Tensor, Var};

pub type Visitor<'a, 'b, T> = &'b mut dyn FnMut(&str, &'a T);
pub type VisitorMut<'a, 'b, T> = &'b mut dyn FnMut(&str, &'a mut T);

pub trait ParamTree<T> {
    fn visit<'a>(&'a self, path: &str, f: Visitor<'a, '_, T>);
    fn visit_mut<'a>(&'a mut self, path: &str, f: VisitorMut<'a, '_, T>);
}

pub(crate) fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

/// Collects leaves of a tree in canonical order.
pub fn leaves<T, P: ParamTree<T> + ?Sized>(tree: &P) -> Vec<&T> {
    let mut out = Vec::new();
    tree.visit("", &mut |_, t| out.push(t));
    out
}

pub fn leaves_mut<T, P: ParamTree<T> + ?Sized>(tree: &mut P) -> Vec<&mut T> {
    let mut out = Vec::new();
    tree.visit_mut("", &mut |_, t| out.push(t));
    out
}

pub fn named_leaves<T, P: ParamTree<T> + ?Sized>(tree: &P) -> Vec<(String, &T)> {
    let mut out = Vec::new();
    tree.visit("", &mut |n, t| out.push((n.to_string(), t)));
    out
}

/// Dense layer `y = x·W + b` with `W[in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

/// Matrices of one transformer block; the part that weight multiplexing shares.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockNorms<T> {
    pub ln1: Norm<T>,
    pub ln2: Norm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norms: BlockNorms<T>,
    pub weights: BlockWeights<T>,
}

/// Patch projection plus prefix tokens and positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem<T> {
    pub patch: Linear<T>,
    pub cls: T,
    pub dist: Option<T>,
    pub pos: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub norm: Norm<T>,
    pub head: Linear<T>,
    pub dist_head: Option<Linear<T>>,
}

/// Per-block diagonal scale and shift applied to a block's output.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub scale: T,
    pub shift: T,
}

/// Token importance predictor: two-layer perceptron over
/// `[token ∥ mean of live tokens]`, one logit per token.
#[derive(Clone, Debug, PartialEq)]
pub struct Scorer<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T> {
    pub stem: Stem<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Head<T>,
}

macro_rules! param_tree {
    ($ty:ident { $($leaf:ident),* } { $($sub:ident),* }) => {
        impl<T> ParamTree<T> for $ty<T> {
            fn visit<'a>(&'a self, path: &str, f: Visitor<'a, '_, T>) {
                $( f(&join(path, stringify!($leaf)), &self.$leaf); )*
                $( self.$sub.visit(&join(path, stringify!($sub)), f); )*
            }
            fn visit_mut<'a>(&'a mut self, path: &str, f: VisitorMut<'a, '_, T>) {
                $( f(&join(path, stringify!($leaf)), &mut self.$leaf); )*
                $( self.$sub.visit_mut(&join(path, stringify!($sub)), f); )*
            }
        }
    };
}

param_tree!(Linear { weight, bias } {});
param_tree!(Norm { gamma, beta } {});
param_tree!(Affine { scale, shift } {});
param_tree!(BlockWeights {} { q, k, v, o, fc1, fc2 });
param_tree!(BlockNorms {} { ln1, ln2 });
param_tree!(Block {} { norms, weights });
param_tree!(Scorer {} { fc1, fc2 });

impl<T> ParamTree<T> for Stem<T> {
    fn visit<'a>(&'a self, path: &str, f: Visitor<'a, '_, T>) {
        self.patch.visit(&join(path, "patch"), f);
        f(&join(path, "cls"), &self.cls);
        if let Some(d) = &self.dist {
            f(&join(path, "dist"), d);
        }
        f(&join(path, "pos"), &self.pos);
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: VisitorMut<'a, '_, T>) {
        self.patch.visit_mut(&join(path, "patch"), f);
        f(&join(path, "cls"), &mut self.cls);
        if let Some(d) = &mut self.dist {
            f(&join(path, "dist"), d);
        }
        f(&join(path, "pos"), &mut self.pos);
    }
}

impl<T> ParamTree<T> for Head<T> {
    fn visit<'a>(&'a self, path: &str, f: Visitor<'a, '_, T>) {
        self.norm.visit(&join(path, "norm"), f);
        self.head.visit(&join(path, "head"), f);
        if let Some(d) = &self.dist_head {
            d.visit(&join(path, "dist_head"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: VisitorMut<'a, '_, T>) {
        self.norm.visit_mut(&join(path, "norm"), f);
        self.head.visit_mut(&join(path, "head"), f);
        if let Some(d) = &mut self.dist_head {
            d.visit_mut(&join(path, "dist_head"), f);
        }
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    fn visit<'a>(&'a self, path: &str, f: Visitor<'a, '_, T>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(path, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: VisitorMut<'a, '_, T>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(path, &i.to_string()), f);
        }
    }
}

param_tree!(ViTParams {} { stem, blocks, head });

/// Structural map from one leaf type to another.
pub trait MapLeaves<T> {
    type Out<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Out<U>;
}

impl<T> MapLeaves<T> for Linear<T> {
    type Out<U> = Linear<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

impl<T> MapLeaves<T> for Norm<T> {
    type Out<U> = Norm<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Norm<U> {
        Norm { gamma: f(&self.gamma), beta: f(&self.beta) }
    }
}

impl<T> MapLeaves<T> for Affine<T> {
    type Out<U> = Affine<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Affine<U> {
        Affine { scale: f(&self.scale), shift: f(&self.shift) }
    }
}

impl<T> MapLeaves<T> for Scorer<T> {
    type Out<U> = Scorer<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Scorer<U> {
        Scorer { fc1: self.fc1.map_leaves(f), fc2: self.fc2.map_leaves(f) }
    }
}

impl<T, P: MapLeaves<T>> MapLeaves<T> for Vec<P> {
    type Out<U> = Vec<P::Out<U>>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Vec<P::Out<U>> {
        self.iter().map(|p| p.map_leaves(f)).collect()
    }
}

impl<T> MapLeaves<T> for BlockWeights<T> {
    type Out<U> = BlockWeights<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BlockWeights<U> {
        BlockWeights {
            q: self.q.map_leaves(f),
            k: self.k.map_leaves(f),
            v: self.v.map_leaves(f),
            o: self.o.map_leaves(f),
            fc1: self.fc1.map_leaves(f),
            fc2: self.fc2.map_leaves(f),
        }
    }
}

impl<T> MapLeaves<T> for BlockNorms<T> {
    type Out<U> = BlockNorms<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BlockNorms<U> {
        BlockNorms { ln1: self.ln1.map_leaves(f), ln2: self.ln2.map_leaves(f) }
    }
}

impl<T> MapLeaves<T> for Block<T> {
    type Out<U> = Block<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Block<U> {
        Block { norms: self.norms.map_leaves(f), weights: self.weights.map_leaves(f) }
    }
}

impl<T> MapLeaves<T> for Stem<T> {
    type Out<U> = Stem<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Stem<U> {
        // field order mirrors `visit` so leaves are bound in canonical order
        let patch = self.patch.map_leaves(f);
        let cls = f(&self.cls);
        let dist = self.dist.as_ref().map(|d| f(d));
        let pos = f(&self.pos);
        Stem { patch, cls, dist, pos }
    }
}

impl<T> MapLeaves<T> for Head<T> {
    type Out<U> = Head<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Head<U> {
        Head {
            norm: self.norm.map_leaves(f),
            head: self.head.map_leaves(f),
            dist_head: self.dist_head.as_ref().map(|d| d.map_leaves(f)),
        }
    }
}

impl<T> MapLeaves<T> for ViTParams<T> {
    type Out<U> = ViTParams<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ViTParams<U> {
        ViTParams {
            stem: self.stem.map_leaves(f),
            blocks: self.blocks.iter().map(|b| b.map_leaves(f)).collect(),
            head: self.head.map_leaves(f),
        }
    }
}

/// Binds every tensor of a tree onto `tape`, as trainable params or constants.
pub fn bind<P: MapLeaves<Tensor>>(tape: &mut Tape, tree: &P, trainable: bool) -> P::Out<Var> {
    tree.map_leaves(&mut |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub(crate) fn linear_init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
    // LeCun-normal weights, zero bias
    Linear {
        weight: normal(rng, &[fan_in, fan_out], (1.0 / fan_in as f32).sqrt()),
        bias: Tensor::zeros(&[fan_out]),
    }
}

pub(crate) fn norm_init(dim: usize) -> Norm<Tensor> {
    Norm { gamma: Tensor::ones(&[dim]), beta: Tensor::zeros(&[dim]) }
}

pub(crate) fn identity_affine(dim: usize) -> Affine<Tensor> {
    Affine { scale: Tensor::ones(&[dim]), shift: Tensor::zeros(&[dim]) }
}
