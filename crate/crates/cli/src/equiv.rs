//! Randomized pruned-vs-masked comparisons of whole networks and of every
//! block in isolation.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use m2ae_core::deform::DeformSampler;
use m2ae_core::ledger::FlopLedger;
use m2ae_core::network::{m2as_block, BlockContext, ForwardOptions, Mode, Network, NetworkConfig, StageId, init_weights};
use m2ae_core::tensor::norm_rel_diff;
use m2ae_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrialError {
    /// Max absolute difference of the network outputs.
    pub output_abs: f32,
    /// Largest normwise relative difference (`max|Δ| / max|reference|`) of
    /// any block, each block fed the same input in both modes.
    pub block_rel: f32,
}

impl TrialError {
    pub fn max(self, o: TrialError) -> TrialError {
        TrialError { output_abs: self.output_abs.max(o.output_abs), block_rel: self.block_rel.max(o.block_rel) }
    }
}

/// A random binary mask per stage, each with its own density.
pub fn random_masks(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BTreeMap<StageId, Tensor> {
    StageId::ALL
        .iter()
        .map(|&s| {
            let p: f64 = rng.gen_range(0.0..1.0);
            let (sh, sw) = (h >> s.level(), w >> s.level());
            (s, Tensor::from_fn([sh, sw], |_| if rng.gen_bool(p) { 1.0 } else { 0.0 }))
        })
        .collect()
}

/// Seed of trial `k` in a run started from `seed`.
pub fn trial_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

/// One trial: random weights, image and masks derived from `seed`.
pub fn run_trial(cfg: &NetworkConfig, h: usize, w: usize, seed: u64) -> Result<TrialError> {
    let net = Network::from_store(&init_weights(cfg, seed), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::from_fn([3, h, w], |_| rng.gen_range(0.0..1.0));
    let masks = random_masks(&mut rng, h, w);
    compare(&net, &img, masks, seed)
}

/// Pruned vs masked-dense on one input with fixed masks.
pub fn compare(net: &Network, img: &Tensor, masks: BTreeMap<StageId, Tensor>, seed: u64) -> Result<TrialError> {
    let opts = |mode| ForwardOptions { mode: Some(mode), seed, mask_override: masks.clone(), trace_blocks: true };
    let masked = net.forward_with(img, &opts(Mode::Masked))?;
    let pruned = net.forward_with(img, &opts(Mode::Pruned))?;
    let output_abs = pruned.image.max_abs_diff(&masked.image)?;

    let positions = &net.config().mask_conv_positions;
    let mut block_rel = 0.0f32;
    let mut samplers: BTreeMap<StageId, DeformSampler> = BTreeMap::new();
    for t in &masked.trace {
        let stage = masked.stage(t.stage).expect("traced stage has a report");
        let sampler = match samplers.entry(t.stage) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(DeformSampler::new(&net.offsets_for(&stage.displacements)?)?),
        };
        let ctx = BlockContext { mask: &stage.mask.hard, sampler, mode: Mode::Pruned, positions };
        let p = net.block(t.stage, t.block).expect("traced block exists");
        let got = m2as_block(&t.input, p, &ctx, &mut FlopLedger::new(), "check")?;
        block_rel = block_rel.max(norm_rel_diff(&got, &t.output)?);
    }
    Ok(TrialError { output_abs, block_rel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_change_the_masked_output() {
        let cfg = NetworkConfig { base_width: 4, encoder_blocks: vec![1, 1, 1, 1], ..NetworkConfig::default() };
        let net = Network::from_store(&init_weights(&cfg, 4), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::from_fn([3, 32, 32], |_| rng.gen_range(0.0..1.0));
        let masks = random_masks(&mut rng, 32, 32);
        let run = |mode| {
            let opts = ForwardOptions { mode: Some(mode), mask_override: masks.clone(), ..Default::default() };
            net.forward_with(&img, &opts).unwrap().image
        };
        assert!(run(Mode::Dense).max_abs_diff(&run(Mode::Masked)).unwrap() > 1e-4);
        let e = compare(&net, &img, masks, 0).unwrap();
        assert!(e.output_abs <= 1e-4 && e.block_rel <= 1e-5);
    }
}
