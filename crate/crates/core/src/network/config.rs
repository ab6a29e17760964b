use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order in which decoder levels are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderOrder {
    /// Finest scale first, each level feeding the next coarser one.
    F2c,
    /// Coarsest scale first.
    C2f,
}

impl DecoderOrder {
    pub fn label(self) -> &'static str {
        match self {
            DecoderOrder::F2c => "F2C",
            DecoderOrder::C2f => "C2F",
        }
    }
}

/// Architecture and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub num_scales: usize,
    pub enc_channels: usize,
    pub dec_channels: usize,
    pub dec_layers: usize,
    pub att_layers: usize,
    pub enc_layers: usize,
    pub radius: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub att_weight: f64,
    pub leaky_slope: f64,
    pub use_direct_warp: bool,
    pub use_attention: bool,
    pub use_cost_block: bool,
    pub order: DecoderOrder,
    pub joint_tasks: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_scales: 4,
            enc_channels: 32,
            dec_channels: 32,
            dec_layers: 5,
            att_layers: 3,
            enc_layers: 4,
            radius: crate::cost::DEFAULT_RADIUS,
            gamma: 2.0,
            alpha: 0.25,
            att_weight: 0.5,
            leaky_slope: 0.1,
            use_direct_warp: true,
            use_attention: true,
            use_cost_block: true,
            order: DecoderOrder::F2c,
            joint_tasks: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_scales < 2 {
            return bad("num_scales must be at least 2");
        }
        if self.enc_channels == 0 || self.dec_channels == 0 || self.dec_layers == 0 || self.enc_layers == 0 {
            return bad("layer and channel counts must be positive");
        }
        if self.att_layers < 2 {
            return bad("att_layers must be at least 2");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.att_weight >= 0.0) || !self.leaky_slope.is_finite() {
            return bad("att_weight must be non-negative and leaky_slope finite");
        }
        Ok(())
    }

    /// Whether the attention module is built (needs both tasks).
    pub fn attention_active(&self) -> bool {
        self.use_attention && self.joint_tasks
    }

    /// Frame sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.num_scales - 1)
    }

    /// Short tag such as `full`, `-A` or `-DAB`.
    pub fn flag_label(&self) -> String {
        let mut off = String::new();
        if !self.use_direct_warp {
            off.push('D');
        }
        if !self.use_attention {
            off.push('A');
        }
        if !self.use_cost_block {
            off.push('B');
        }
        if off.is_empty() {
            "full".to_string()
        } else {
            format!("-{off}")
        }
    }
}

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Log evaluation metrics every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 1000,
            batch_size: 4,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("invalid optimiser settings".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// On-disk run configuration: `[net]` and `[train]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        NetConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
        assert_eq!(NetConfig::default().size_multiple(), 8);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = NetConfig { num_scales: 1, ..Default::default() };
        assert!(c.validate().is_err());
        c.num_scales = 2;
        c.gamma = -1.0;
        assert!(c.validate().is_err());
        c.gamma = 0.0;
        c.dec_channels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn labels() {
        let mut c = NetConfig::default();
        assert_eq!(c.flag_label(), "full");
        c.use_attention = false;
        assert_eq!(c.flag_label(), "-A");
        c.use_direct_warp = false;
        c.use_cost_block = false;
        assert_eq!(c.flag_label(), "-DAB");
    }
}
