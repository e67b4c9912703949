//! Analytic compute accounting.
//!
//! Counts follow the fvcore convention used by the DeiT / DynamicViT model
//! tables: one fused multiply-add is one FLOP. Per block with `n` live tokens
//! that is `4nD²` (Q, K, V, output projections) `+ 2n²D` (scores and
//! weighted values) `+ 8nD²` (MLP at ratio 4). Patch embedding and the
//! classifier heads are included; softmax, norms, GELU, and the token
//! scorers are not.

use serde::{Deserialize, Serialize};

use super::ViTConfig;

/// Token keep schedule: before block `stages[s]` the live patch count becomes
/// `ceil(ratios[0]·…·ratios[s] · N_patches)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepSchedule {
    pub stages: Vec<usize>,
    pub ratios: Vec<f64>,
}

impl KeepSchedule {
    pub fn uniform(rho: f64, stages: &[usize]) -> Self {
        Self { stages: stages.to_vec(), ratios: vec![rho; stages.len()] }
    }

    /// Live patch counts after each stage.
    pub fn live_counts(&self, num_patches: usize) -> Vec<usize> {
        let mut frac = 1.0f64;
        self.ratios
            .iter()
            .map(|&r| {
                frac *= r;
                keep_count(frac, num_patches)
            })
            .collect()
    }
}

/// `ceil(frac · n)`, at least one token; the epsilon absorbs products like
/// `0.5·16` landing a hair above an integer.
pub fn keep_count(frac: f64, n: usize) -> usize {
    let k = (frac * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Stage layout `⌈L/4⌉, ⌈L/2⌉, ⌈3L/4⌉`, deduplicated and restricted to valid
/// block indices `1..L`.
pub fn default_stages(depth: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [1, 2, 3].iter().map(|&q| (q * depth).div_ceil(4)).filter(|&l| l >= 1 && l < depth).collect();
    out.dedup();
    out
}

fn block_flops(n: u64, d: u64, hidden: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d + 2 * n * d * hidden
}

/// Forward-pass FLOPs for one image.
pub fn count_flops(config: &ViTConfig, keep: Option<&KeepSchedule>) -> u64 {
    let d = config.embed_dim as u64;
    let hidden = config.mlp_hidden() as u64;
    let np = config.num_patches();
    let prefix = config.num_prefix_tokens();
    let mut live = np;
    let mut total = (np * config.patch_dim()) as u64 * d;
    let live_after = keep.map(|k| k.live_counts(np));
    for layer in 0..config.depth {
        if let (Some(k), Some(counts)) = (keep, &live_after) {
            if let Some(s) = k.stages.iter().position(|&l| l == layer) {
                live = counts[s];
            }
        }
        total += block_flops((live + prefix) as u64, d, hidden);
    }
    let heads = if config.use_distill_token { 2 } else { 1 };
    total + heads * d * config.num_classes as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_small_matches_hand_count() {
        // per block: 12·17·64² + 2·17²·64 = 835584 + 36992
        let per_block = 872_576u64;
        let patch = 16 * 192 * 64;
        let head = 64 * 10;
        assert_eq!(count_flops(&ViTConfig::toy_small(), None), 4 * per_block + patch + head);
    }

    #[test]
    fn toy_small_pruned_hand_count() {
        // ρ=0.5 before blocks 1,2,3: live patches 16, 8, 4, 2
        let cfg = ViTConfig::toy_small();
        let sched = KeepSchedule::uniform(0.5, &default_stages(4));
        let b = |n: u64| 12 * n * 64 * 64 + 2 * n * n * 64;
        let want = b(17) + b(9) + b(5) + b(3) + 16 * 192 * 64 + 640;
        assert_eq!(count_flops(&cfg, Some(&sched)), want);
    }

    #[test]
    fn deit_small_unpruned_is_about_4_6_g() {
        let g = count_flops(&ViTConfig::deit_small(), None) as f64 / 1e9;
        assert!((g - 4.6).abs() / 4.6 < 0.05, "{g}");
    }

    #[test]
    fn live_counts_follow_ceil_rho_power() {
        let s = KeepSchedule::uniform(0.7, &[1, 2, 3]);
        assert_eq!(s.live_counts(16), vec![12, 8, 6]);
        assert_eq!(KeepSchedule::uniform(0.6, &[1, 2, 3]).live_counts(16), vec![10, 6, 4]);
        assert_eq!(KeepSchedule::uniform(0.5, &[1, 2, 3]).live_counts(16), vec![8, 4, 2]);
        assert_eq!(KeepSchedule::uniform(1.0, &[1, 2, 3]).live_counts(16), vec![16, 16, 16]);
    }

    #[test]
    fn stage_layout() {
        assert_eq!(default_stages(12), vec![3, 6, 9]);
        assert_eq!(default_stages(4), vec![1, 2, 3]);
        assert_eq!(default_stages(6), vec![2, 3, 5]);
    }

    proptest! {
        #[test]
        fn monotone_in_each_keep_ratio(a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0, bump in 0.0f64..0.5, which in 0usize..3) {
            let cfg = ViTConfig::deit_small();
            let base = KeepSchedule { stages: vec![3, 6, 9], ratios: vec![a, b, c] };
            let mut up = base.clone();
            up.ratios[which] = (up.ratios[which] + bump).min(1.0);
            prop_assert!(count_flops(&cfg, Some(&up)) >= count_flops(&cfg, Some(&base)));
        }
    }
}
