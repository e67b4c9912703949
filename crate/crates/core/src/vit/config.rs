use serde::{Deserialize, Serialize};

use super::ModelError;

fn default_mlp_ratio() -> usize {
    4
}

/// Shape of a toy ViT / DeiT.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub use_distill_token: bool,
}

/// The three named desk-scale sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToySize {
    ToyTiny,
    ToySmall,
    ToyBase,
}

impl ToySize {
    pub fn name(self) -> &'static str {
        match self {
            ToySize::ToyTiny => "toy-tiny",
            ToySize::ToySmall => "toy-small",
            ToySize::ToyBase => "toy-base",
        }
    }
}

impl ViTConfig {
    pub fn toy(size: ToySize) -> Self {
        let (embed_dim, depth) = match size {
            ToySize::ToyTiny => (32, 2),
            ToySize::ToySmall => (64, 4),
            ToySize::ToyBase => (128, 6),
        };
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim,
            depth,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            use_distill_token: false,
        }
    }

    pub fn toy_small() -> Self {
        Self::toy(ToySize::ToySmall)
    }

    /// DeiT-small geometry (224px, 16px patches, 197 tokens); used for FLOPs accounting.
    pub fn deit_small() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            num_classes: 1000,
            use_distill_token: false,
        }
    }

    pub fn with_distill_token(mut self, on: bool) -> Self {
        self.use_distill_token = on;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.channels == 0 || self.num_classes < 2 || self.mlp_ratio == 0 {
            return fail("channels, mlp ratio must be positive and num_classes >= 2".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens that are never pruned (CLS and optional distillation token).
    pub fn num_prefix_tokens(&self) -> usize {
        1 + usize::from(self.use_distill_token)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + self.num_prefix_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Parameters in one transformer block (norms, attention, MLP).
    pub fn block_param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let c = self.num_classes;
        let stem = self.patch_dim() * d + d + d * self.num_prefix_tokens() + self.num_tokens() * d;
        let heads = if self.use_distill_token { 2 } else { 1 };
        stem + self.depth * self.block_param_count() + 2 * d + heads * (d * c + c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_small_token_count() {
        let c = ViTConfig::toy_small();
        assert_eq!(c.num_tokens(), 17);
        assert_eq!(c.with_distill_token(true).num_tokens(), 18);
        assert_eq!(ViTConfig::deit_small().num_tokens(), 197);
    }

    #[test]
    fn validation() {
        let mut c = ViTConfig::toy_small();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::toy_small();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::toy_small();
        c.depth = 0;
        assert!(c.validate().is_err());
        assert!(ViTConfig::toy_small().validate().is_ok());
    }

    #[test]
    fn sizes_are_ordered() {
        let counts: Vec<usize> = [ToySize::ToyTiny, ToySize::ToySmall, ToySize::ToyBase]
            .iter()
            .map(|&s| ViTConfig::toy(s).param_count())
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2]);
    }
}
