use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LrnParams, Scalar, Shape};

/// The six named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    B,
    #[serde(rename = "B-F")]
    BF,
    #[serde(rename = "B-K")]
    BK,
    BT,
    BL,
    BLT,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::B, Preset::BF, Preset::BK, Preset::BT, Preset::BL, Preset::BLT];

    pub fn name(self) -> &'static str {
        match self {
            Preset::B => "B",
            Preset::BF => "B-F",
            Preset::BK => "B-K",
            Preset::BT => "BT",
            Preset::BL => "BL",
            Preset::BLT => "BLT",
        }
    }

    /// (filter multiplier, kernel size, lateral, top-down)
    fn layout(self) -> (usize, usize, bool, bool) {
        match self {
            Preset::B => (1, 3, false, false),
            Preset::BF => (2, 3, false, false),
            Preset::BK => (1, 5, false, false),
            Preset::BT => (1, 3, false, true),
            Preset::BL => (1, 3, true, false),
            Preset::BLT => (1, 3, true, true),
        }
    }

    pub fn is_recurrent(self) -> bool {
        let (_, _, l, t) = self.layout();
        l || t
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_ascii_uppercase();
        match norm.as_str() {
            "B" => Ok(Preset::B),
            "BF" => Ok(Preset::BF),
            "BK" => Ok(Preset::BK),
            "BT" => Ok(Preset::BT),
            "BL" => Ok(Preset::BL),
            "BLT" => Ok(Preset::BLT),
            _ => Err(Error::Invalid(format!("unknown model preset {s:?}"))),
        }
    }
}

/// Architecture descriptor for a two-hidden-layer network.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub has_lateral: bool,
    pub has_topdown: bool,
    pub filters: usize,
    pub kernel_size: usize,
    pub tau: usize,
    pub classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

/// Kernel size of top-down (transposed) connections.
pub const TOPDOWN_KERNEL: usize = 3;

impl ModelSpec {
    /// Full-size preset: 32 base filters, 32x32 input, 10 classes, four time steps.
    pub fn preset(preset: Preset, input_channels: usize) -> Self {
        Self::preset_scaled(preset, 32, input_channels)
    }

    /// Preset with `base_filters` in place of 32 (B-F doubles it).
    pub fn preset_scaled(preset: Preset, base_filters: usize, input_channels: usize) -> Self {
        let (mult, kernel_size, has_lateral, has_topdown) = preset.layout();
        ModelSpec {
            has_lateral,
            has_topdown,
            filters: base_filters * mult,
            kernel_size,
            tau: 4,
            classes: 10,
            input_channels,
            input_size: 32,
        }
    }

    pub fn with_tau(mut self, tau: usize) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn is_recurrent(&self) -> bool {
        self.has_lateral || self.has_topdown
    }

    /// The preset these flags describe, assuming 32 base filters.
    pub fn preset_name(&self) -> Option<Preset> {
        Preset::ALL.into_iter().find(|&p| {
            let s = ModelSpec::preset(p, self.input_channels);
            s.has_lateral == self.has_lateral
                && s.has_topdown == self.has_topdown
                && s.filters == self.filters
                && s.kernel_size == self.kernel_size
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.filters == 0 || self.classes < 2 || self.input_channels == 0 || self.tau == 0 {
            return fail(format!("degenerate model spec {self:?}"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            return fail(format!(
                "input size {} must be a positive multiple of 4 for two 2x2 poolings",
                self.input_size
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.input_size, self.input_size, self.input_channels)
    }

    /// Pre-pool shape of hidden layer `layer` (1 or 2).
    pub fn hidden_shape(&self, layer: usize, batch: usize) -> Shape {
        let n = self.input_size >> (layer - 1);
        Shape::new(batch, n, n, self.filters)
    }

    pub fn dense_features(&self) -> usize {
        let n = self.input_size / 4;
        n * n * self.filters
    }

    /// LRN settings; the window radius is capped below the channel count.
    pub fn lrn<T: Scalar>(&self) -> LrnParams<T> {
        let base = LrnParams::<T>::default();
        LrnParams { depth_radius: base.depth_radius.min(self.filters.saturating_sub(1).max(1)), ..base }
    }

    /// Trainable parameter count: kernels, bottom-up biases, BN gamma/beta and
    /// the dense layer.
    pub fn count_params(&self) -> usize {
        let f = self.filters;
        let k2 = self.kernel_size * self.kernel_size;
        let bottom_up = k2 * self.input_channels * f + f + k2 * f * f + f;
        let lateral = if self.has_lateral { 2 * k2 * f * f } else { 0 };
        let topdown = if self.has_topdown { TOPDOWN_KERNEL * TOPDOWN_KERNEL * f * f } else { 0 };
        let bn = 2 * 2 * f;
        let dense = self.dense_features() * self.classes + self.classes;
        bottom_up + lateral + topdown + bn + dense
    }
}
