//! Per-node compression state: local clipping, momentum-corrected
//! accumulation, momentum factor masking and the warm-up sparsity schedule.
//!
//! The engine never applies a learning rate. It turns a node's raw gradient
//! into the sparse update that node contributes to the all-reduce; the
//! simulator's optimizer does the rest.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::codec::SparseUpdate;
use crate::error::{DgcError, Result};
use crate::rng::RngStream;
use crate::sparsify::{
    check_sparsity, compute_thresholds, masked_indices, select_scopes, split_out, ScopeThreshold,
    SparsityConfig,
};
use crate::vector::{l2_norm, GradientVector, LayerLayout};

/// Where momentum lives and how the local accumulation is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `U <- m*U + G; V <- V + U`
    VanillaCorrected,
    /// `U <- m*(U + G); V <- V + U + G`
    NesterovCorrected,
    /// `V <- V + G`, momentum applied after aggregation.
    VanillaUncorrected,
    /// `V <- V + G`, Nesterov momentum applied after aggregation.
    NesterovUncorrected,
    /// Gradient dropping: `V <- V + G`, no local clipping, momentum after
    /// aggregation.
    PlainSparse,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::VanillaCorrected,
        Variant::NesterovCorrected,
        Variant::VanillaUncorrected,
        Variant::NesterovUncorrected,
        Variant::PlainSparse,
    ];

    /// Whether the node keeps its own velocity buffer.
    pub fn is_corrected(self) -> bool {
        matches!(self, Variant::VanillaCorrected | Variant::NesterovCorrected)
    }

    pub fn is_nesterov(self) -> bool {
        matches!(
            self,
            Variant::NesterovCorrected | Variant::NesterovUncorrected
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaCorrected => "vanilla_corrected",
            Variant::NesterovCorrected => "nesterov_corrected",
            Variant::VanillaUncorrected => "vanilla_uncorrected",
            Variant::NesterovUncorrected => "nesterov_uncorrected",
            Variant::PlainSparse => "plain_sparse",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DgcError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DgcError::InvalidParameter(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    /// Threshold on the L2 norm of the aggregated gradient.
    pub global_threshold: f64,
    pub node_count: usize,
}

impl ClipConfig {
    pub fn new(global_threshold: f64, node_count: usize) -> Result<Self> {
        if !(global_threshold > 0.0 && global_threshold.is_finite()) {
            return Err(DgcError::InvalidParameter(format!(
                "clip threshold {global_threshold} must be positive"
            )));
        }
        if node_count == 0 {
            return Err(DgcError::InvalidParameter("node_count must be >= 1".into()));
        }
        Ok(Self {
            global_threshold,
            node_count,
        })
    }

    /// `thr_G * N^(-1/2)`: one node's share of the global norm budget under
    /// i.i.d. node gradients.
    pub fn local_threshold(&self) -> f64 {
        self.global_threshold / (self.node_count as f64).sqrt()
    }
}

/// Rescales `g` onto the local norm ball when it lies outside it.
pub fn local_clip(g: &GradientVector, clip: &ClipConfig) -> GradientVector {
    let limit = clip.local_threshold();
    let norm = l2_norm(g.values());
    if norm <= limit || norm == 0.0 {
        return g.clone();
    }
    let mut scale = limit / norm;
    let mut out = g.clone();
    loop {
        for (o, &x) in out.values_mut().iter_mut().zip(g.values()) {
            *o = (f64::from(x) * scale) as f32;
        }
        // f32 rounding can land a hair outside the ball; shrink until inside.
        if l2_norm(out.values()) <= limit {
            return out;
        }
        scale *= 1.0 - 1e-7;
    }
}

/// Per-epoch sparsity: a warm-up table followed by the final value.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    warmup: Vec<f64>,
    final_sparsity: f64,
}

impl SparsitySchedule {
    pub fn new(warmup: Vec<f64>, final_sparsity: f64) -> Result<Self> {
        check_sparsity(final_sparsity)?;
        for &s in &warmup {
            check_sparsity(s)?;
        }
        if warmup.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DgcError::InvalidParameter(
                "warm-up sparsities must be strictly increasing".into(),
            ));
        }
        if warmup.last().is_some_and(|&l| l > final_sparsity) {
            return Err(DgcError::InvalidParameter(
                "last warm-up sparsity exceeds the final sparsity".into(),
            ));
        }
        Ok(Self {
            warmup,
            final_sparsity,
        })
    }

    pub fn constant(sparsity: f64) -> Result<Self> {
        Self::new(Vec::new(), sparsity)
    }

    /// 75%, 93.75%, 98.4375%, 99.6% over four warm-up epochs, then 99.9%.
    pub fn exponential_warmup() -> Self {
        Self {
            warmup: vec![0.75, 0.9375, 0.984375, 0.996],
            final_sparsity: 0.999,
        }
    }

    pub fn warmup(&self) -> &[f64] {
        &self.warmup
    }

    pub fn final_sparsity(&self) -> f64 {
        self.final_sparsity
    }
}

pub fn warmup_sparsity(epoch: usize, schedule: &SparsitySchedule) -> f64 {
    schedule
        .warmup
        .get(epoch)
        .copied()
        .unwrap_or(schedule.final_sparsity)
}

/// One node's accumulation buffers and compression settings.
#[derive(Debug, Clone)]
pub struct DgcNodeState {
    /// Velocity accumulation `U`; only corrected variants keep one.
    velocity: Option<GradientVector>,
    /// Gradient accumulation `V`.
    accumulation: GradientVector,
    momentum: f32,
    variant: Variant,
    clip: Option<ClipConfig>,
    momentum_masking: bool,
    selection: SparsityConfig,
}

impl DgcNodeState {
    pub fn new(
        layout: Arc<LayerLayout>,
        momentum: f32,
        variant: Variant,
        selection: SparsityConfig,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(DgcError::InvalidParameter(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        selection.validate()?;
        Ok(Self {
            velocity: variant
                .is_corrected()
                .then(|| GradientVector::zeros(layout.clone())),
            accumulation: GradientVector::zeros(layout),
            momentum,
            variant,
            clip: None,
            momentum_masking: true,
            selection,
        })
    }

    pub fn with_clip(mut self, clip: Option<ClipConfig>) -> Self {
        self.clip = clip;
        self
    }

    /// Momentum factor masking is on by default.
    pub fn with_momentum_masking(mut self, on: bool) -> Self {
        self.momentum_masking = on;
        self
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn velocity(&self) -> Option<&GradientVector> {
        self.velocity.as_ref()
    }

    pub fn accumulation(&self) -> &GradientVector {
        &self.accumulation
    }

    pub fn selection(&self) -> &SparsityConfig {
        &self.selection
    }

    /// Clips (when configured) and folds `g` into `U`/`V`.
    pub fn accumulate(&mut self, g: &GradientVector) -> Result<()> {
        g.ensure_same_layout(&self.accumulation)?;
        if let Some(i) = g.values().iter().position(|x| !x.is_finite()) {
            return Err(DgcError::NonFinite { index: i });
        }
        let clipped;
        let g = match (&self.clip, self.variant) {
            (Some(clip), v) if v != Variant::PlainSparse => {
                clipped = local_clip(g, clip);
                &clipped
            }
            _ => g,
        };
        let m = self.momentum;
        let v = self.accumulation.values_mut();
        match (self.variant, self.velocity.as_mut()) {
            (Variant::VanillaCorrected, Some(u)) => {
                for ((ui, vi), &gi) in u.values_mut().iter_mut().zip(v.iter_mut()).zip(g.values()) {
                    *ui = m * *ui + gi;
                    *vi += *ui;
                }
            }
            (Variant::NesterovCorrected, Some(u)) => {
                for ((ui, vi), &gi) in u.values_mut().iter_mut().zip(v.iter_mut()).zip(g.values()) {
                    *ui = m * (*ui + gi);
                    *vi = *vi + *ui + gi;
                }
            }
            _ => {
                for (vi, &gi) in v.iter_mut().zip(g.values()) {
                    *vi += gi;
                }
            }
        }
        Ok(())
    }

    /// Per-scope thresholds on `|V|` at the given sparsity.
    pub fn thresholds(&self, sparsity: f64, rng: &mut RngStream) -> Result<Vec<ScopeThreshold>> {
        let cfg = self.selection.with_sparsity(sparsity);
        compute_thresholds(
            self.accumulation.values(),
            self.accumulation.layout(),
            &cfg,
            rng,
        )
    }

    /// Sends the masked part of `V`, clearing it from `V` and, with momentum
    /// factor masking, from `U` as well.
    pub fn emit(&mut self, thresholds: &[ScopeThreshold]) -> Result<SparseUpdate> {
        let per_layer = self.selection.per_layer;
        let layout = Arc::clone(self.accumulation.layout());
        let masks = select_scopes(self.accumulation.values(), &layout, per_layer, thresholds)?;
        let kept = masked_indices(&layout, per_layer, &masks);
        self.emit_indices(&kept)
    }

    /// Like [`DgcNodeState::emit`] with an explicit ascending mask.
    pub fn emit_indices(&mut self, kept: &[usize]) -> Result<SparseUpdate> {
        let len = self.accumulation.len();
        if kept.windows(2).any(|w| w[0] >= w[1]) || kept.last().is_some_and(|&i| i >= len) {
            return Err(DgcError::InvalidParameter(
                "mask indices must be ascending and in range".into(),
            ));
        }
        let (update, _) = split_out(self.accumulation.values_mut(), kept);
        if self.momentum_masking {
            if let Some(u) = self.velocity.as_mut() {
                let u = u.values_mut();
                for &i in kept {
                    u[i] = 0.0;
                }
            }
        }
        Ok(update)
    }

    pub fn step(
        &mut self,
        g: &GradientVector,
        sparsity: f64,
        rng: &mut RngStream,
    ) -> Result<SparseUpdate> {
        check_sparsity(sparsity)?;
        self.accumulate(g)?;
        let thresholds = self.thresholds(sparsity, rng)?;
        self.emit(&thresholds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, Purpose};
    use rand::Rng;

    fn single() -> Arc<LayerLayout> {
        Arc::new(LayerLayout::single("w", 1).unwrap())
    }

    fn release() -> [ScopeThreshold; 1] {
        [ScopeThreshold {
            threshold: 0.0,
            budget: 1,
        }]
    }

    #[test]
    fn local_threshold_is_scaled_by_inverse_sqrt_n() {
        let c = ClipConfig::new(0.4, 4).unwrap();
        assert_eq!(c.local_threshold(), 0.2);
        assert!(ClipConfig::new(0.0, 4).is_err());
        assert!(ClipConfig::new(1.0, 0).is_err());
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let g = GradientVector::from_flat(vec![0.06, 0.08]).unwrap();
        let c = ClipConfig::new(0.4, 4).unwrap();
        assert_eq!(local_clip(&g, &c), g);
        let z = GradientVector::from_flat(vec![0.0, 0.0]).unwrap();
        assert_eq!(local_clip(&z, &c), z);
    }

    #[test]
    fn clip_rescales_onto_ball() {
        let g = GradientVector::from_flat(vec![3.0, 4.0]).unwrap();
        let c = ClipConfig::new(2.5, 1).unwrap();
        let out = local_clip(&g, &c);
        assert_eq!(out.values(), &[1.5, 2.0]);
        assert_eq!(l2_norm(out.values()), 2.5);
    }

    #[test]
    fn schedule_lookup() {
        let s = SparsitySchedule::exponential_warmup();
        assert_eq!(warmup_sparsity(0, &s), 0.75);
        assert_eq!(warmup_sparsity(1, &s), 0.9375);
        assert_eq!(warmup_sparsity(2, &s), 0.984375);
        assert_eq!(warmup_sparsity(3, &s), 0.996);
        assert_eq!(warmup_sparsity(4, &s), 0.999);
        assert_eq!(warmup_sparsity(400, &s), 0.999);
        let flat = SparsitySchedule::constant(0.9).unwrap();
        assert_eq!(warmup_sparsity(0, &flat), 0.9);
    }

    #[test]
    fn schedule_validation() {
        assert!(SparsitySchedule::new(vec![0.5, 0.5], 0.9).is_err());
        assert!(SparsitySchedule::new(vec![0.5, 0.95], 0.9).is_err());
        assert!(SparsitySchedule::new(vec![], 1.0).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    /// Single weight, unit gradient, sends suppressed for two steps and
    /// released on the third.
    fn transmitted_after_three(variant: Variant) -> f32 {
        let mut st = DgcNodeState::new(single(), 0.9, variant, SparsityConfig::default()).unwrap();
        let g = GradientVector::from_values(vec![1.0], single()).unwrap();
        for _ in 0..2 {
            st.accumulate(&g).unwrap();
            assert_eq!(st.emit(&[ScopeThreshold::suppress()]).unwrap().nnz(), 0);
        }
        st.accumulate(&g).unwrap();
        let u = st.emit(&release()).unwrap();
        assert_eq!(u.indices(), &[0]);
        u.values()[0]
    }

    #[test]
    fn momentum_correction_keeps_discount_sums() {
        assert_eq!(transmitted_after_three(Variant::VanillaCorrected), 5.61f32);
        assert_eq!(transmitted_after_three(Variant::VanillaUncorrected), 3.0f32);
        assert_eq!(transmitted_after_three(Variant::PlainSparse), 3.0f32);
    }

    #[test]
    fn emitted_positions_are_cleared() {
        let layout = Arc::new(LayerLayout::from_extents([("a", 300), ("b", 200)]).unwrap());
        for variant in [Variant::VanillaCorrected, Variant::NesterovCorrected] {
            let mut st =
                DgcNodeState::new(layout.clone(), 0.9, variant, SparsityConfig::default()).unwrap();
            for t in 0..20 {
                let mut rng = derive_stream(4, 0, t, Purpose::Other(9));
                let g: Vec<f32> = (0..500).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let g = GradientVector::from_values(g, layout.clone()).unwrap();
                let up = st.step(&g, 0.95, &mut rng).unwrap();
                assert_eq!(up.nnz(), 15 + 10);
                for &i in up.indices() {
                    assert_eq!(st.accumulation().values()[i], 0.0);
                    assert_eq!(st.velocity().unwrap().values()[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn without_masking_velocity_survives_send() {
        let mut st = DgcNodeState::new(
            single(),
            0.5,
            Variant::VanillaCorrected,
            SparsityConfig::default(),
        )
        .unwrap()
        .with_momentum_masking(false);
        let g = GradientVector::from_values(vec![2.0], single()).unwrap();
        st.accumulate(&g).unwrap();
        let up = st.emit(&release()).unwrap();
        assert_eq!(up.values(), &[2.0]);
        assert_eq!(st.velocity().unwrap().values(), &[2.0]);
        assert_eq!(st.accumulation().values(), &[0.0]);
    }

    #[test]
    fn masking_zero_positions_is_idempotent() {
        let layout = Arc::new(LayerLayout::single("w", 4).unwrap());
        let mut st = DgcNodeState::new(
            layout.clone(),
            0.9,
            Variant::VanillaCorrected,
            SparsityConfig::default(),
        )
        .unwrap();
        let g = GradientVector::from_values(vec![0.5, 1.0, 0.25, -2.0], layout).unwrap();
        st.accumulate(&g).unwrap();
        let first = st.emit_indices(&[1, 3]).unwrap();
        assert_eq!(first.indices(), &[1, 3]);
        let u = st.velocity().unwrap().clone();
        let v = st.accumulation().clone();
        let again = st.emit_indices(&[1, 3]).unwrap();
        assert_eq!(again.nnz(), 0);
        assert_eq!(st.velocity().unwrap(), &u);
        assert_eq!(st.accumulation(), &v);
        assert!(st.emit_indices(&[3, 1]).is_err());
    }

    #[test]
    fn clipping_applies_before_accumulation() {
        let layout = Arc::new(LayerLayout::single("w", 2).unwrap());
        let clip = ClipConfig::new(5.0, 4).unwrap();
        let mut st = DgcNodeState::new(
            layout.clone(),
            0.0,
            Variant::VanillaCorrected,
            SparsityConfig::default(),
        )
        .unwrap()
        .with_clip(Some(clip));
        let g = GradientVector::from_values(vec![3.0, 4.0], layout.clone()).unwrap();
        st.accumulate(&g).unwrap();
        assert_eq!(st.accumulation().values(), &[1.5, 2.0]);

        let mut plain =
            DgcNodeState::new(layout, 0.0, Variant::PlainSparse, SparsityConfig::default())
                .unwrap()
                .with_clip(Some(clip));
        plain.accumulate(&g).unwrap();
        assert_eq!(plain.accumulation().values(), &[3.0, 4.0]);
    }

    #[test]
    fn conservation_of_accumulated_velocity() {
        // Without masking every velocity added to V is either still in V or
        // has been transmitted.
        let layout = Arc::new(LayerLayout::single("w", 64).unwrap());
        let mut st = DgcNodeState::new(
            layout.clone(),
            0.9,
            Variant::VanillaCorrected,
            SparsityConfig::default(),
        )
        .unwrap()
        .with_momentum_masking(false);
        let mut inputs = vec![0.0f64; 64];
        let mut sent = vec![0.0f64; 64];
        let mut sends_on_zero = 0;
        for t in 0..200 {
            let mut rng = derive_stream(8, 0, t, Purpose::Other(4));
            let g: Vec<f32> = (0..64).map(|_| rng.random_range(0.0f32..1.0)).collect();
            let g = GradientVector::from_values(g, layout.clone()).unwrap();
            let up = st.step(&g, 0.9, &mut rng).unwrap();
            for (i, u) in st.velocity().unwrap().values().iter().enumerate() {
                inputs[i] += f64::from(*u);
            }
            for (i, x) in up.iter() {
                sent[i] += f64::from(x);
                sends_on_zero += usize::from(i == 0);
            }
        }
        assert!(sends_on_zero > 0);
        for i in 0..64 {
            let v_end = f64::from(st.accumulation().values()[i]);
            let lhs = sent[i] + v_end;
            assert!(
                (lhs - inputs[i]).abs() <= 1e-6 * inputs[i],
                "coordinate {i}: {lhs} vs {}",
                inputs[i]
            );
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DgcNodeState::new(
            single(),
            1.0,
            Variant::VanillaCorrected,
            SparsityConfig::default()
        )
        .is_err());
        let mut st = DgcNodeState::new(
            single(),
            0.5,
            Variant::VanillaCorrected,
            SparsityConfig::default(),
        )
        .unwrap();
        let other = Arc::new(LayerLayout::single("x", 2).unwrap());
        let g = GradientVector::zeros(other);
        assert!(st.accumulate(&g).is_err());
        let g = GradientVector::zeros(single());
        let mut rng = derive_stream(0, 0, 0, Purpose::ThresholdSample);
        assert!(st.step(&g, 1.0, &mut rng).is_err());
    }
}
