//! Model configuration: desk-scale presets, a flat key=value file format,
//! and validation. Unknown keys are rejected so typos cannot silently fall
//! back to defaults.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Sequence,
    Grid,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Sequence => write!(f, "sequence"),
            Domain::Grid => write!(f, "grid"),
        }
    }
}

/// How the decoder injects style. AdaIN is the ablation baseline: the style
/// set is flattened to one vector and applied as a per-channel affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    LinkAttention,
    AdaIn,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderKind::LinkAttention => write!(f, "link"),
            DecoderKind::AdaIn => write!(f, "adain"),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config field '{}': {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Full model + training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverConfig {
    pub domain: Domain,
    /// Raw token dimension coming out of the dataset.
    pub d_raw: usize,
    /// Working width of the encoder/decoder.
    pub d: usize,
    /// Content code dimension (G codebook slices concatenated).
    pub d_c: usize,
    /// Style token dimension.
    pub d_s: usize,
    pub d_ffn: usize,
    /// Pre-processing transformer blocks.
    pub l_e: usize,
    /// Style encoder blocks.
    pub l_s: usize,
    /// Decoder blocks.
    pub l_d: usize,
    /// Style token count.
    pub m: usize,
    pub heads: usize,
    /// VQ groups and entries per group.
    pub groups: usize,
    pub entries: usize,
    /// Decoder context conv kernel (1-D depthwise for sequences, square 2-D
    /// for grids).
    pub kernel: usize,
    pub lambda_rec: f64,
    pub lambda_vq: f64,
    pub lambda_sc: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_decay: f64,
    /// Truncation ceiling for the sequence constraint; None = ln(entries).
    pub gamma: Option<f64>,
    /// Warmup steps for the lr schedule; 0 disables scheduling.
    pub warmup: usize,
    /// Inverse-power decay exponent after warmup.
    pub lr_power: f64,
    pub log_every: usize,
    pub ckpt_every: usize,
    /// Link-attention layer used for co-occurrence analysis; None = first
    /// layer for sequences, third for grids.
    pub cooccur_layer: Option<usize>,
    /// Use [0,1]-normalized pixel coordinates in the geometric loss.
    pub normalize_coords: bool,
    /// Style injection mechanism in the decoder.
    pub decoder: DecoderKind,
    /// Grid layout (ignored for sequences).
    pub grid_h: usize,
    pub grid_w: usize,
}

impl RetrieverConfig {
    /// Sequence preset: 64-wide everything, no pre-processing blocks, a
    /// capacity-matched G=1/V=8 bottleneck, and the sequence loss weights
    /// (5, 0.3, 0.1).
    pub fn desk_sequence() -> Self {
        RetrieverConfig {
            domain: Domain::Sequence,
            d_raw: 64,
            d: 64,
            d_c: 64,
            d_s: 64,
            d_ffn: 256,
            l_e: 0,
            l_s: 3,
            l_d: 4,
            m: 8,
            heads: 4,
            groups: 1,
            entries: 8,
            kernel: 31,
            lambda_rec: 5.0,
            lambda_vq: 1.0,
            lambda_sc: 0.1,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch: 32,
            epochs: 10,
            seed: 42,
            dropout: 0.0,
            tau_init: 2.0,
            tau_min: 0.01,
            tau_decay: 0.9973,
            gamma: None,
            warmup: 0,
            lr_power: 0.3,
            log_every: 10,
            ckpt_every: 200,
            cooccur_layer: None,
            normalize_coords: false,
            decoder: DecoderKind::LinkAttention,
            grid_h: 0,
            grid_w: 0,
        }
    }

    /// Grid preset: narrower model, single VQ group with one entry per part
    /// plus background, geometric constraint on normalized coordinates.
    pub fn desk_grid() -> Self {
        RetrieverConfig {
            domain: Domain::Grid,
            d_raw: 8,
            d: 32,
            d_c: 32,
            d_s: 32,
            d_ffn: 128,
            l_e: 2,
            l_s: 3,
            l_d: 4,
            m: 8,
            heads: 4,
            groups: 1,
            entries: 5,
            kernel: 3,
            lambda_rec: 1.0,
            lambda_vq: 0.3,
            lambda_sc: 4.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch: 8,
            epochs: 10,
            seed: 42,
            dropout: 0.0,
            tau_init: 2.0,
            tau_min: 0.01,
            tau_decay: 0.993,
            gamma: None,
            warmup: 0,
            lr_power: 0.3,
            log_every: 10,
            ckpt_every: 200,
            cooccur_layer: None,
            normalize_coords: true,
            decoder: DecoderKind::LinkAttention,
            grid_h: 16,
            grid_w: 16,
        }
    }

    /// Effective truncation ceiling for the sequence constraint.
    pub fn gamma_value(&self) -> f64 {
        self.gamma.unwrap_or_else(|| (self.entries as f64).ln())
    }

    /// Link-attention layer index used for analysis maps.
    pub fn cooccur_layer_value(&self) -> usize {
        let auto = match self.domain {
            Domain::Sequence => 0,
            Domain::Grid => 2,
        };
        self.cooccur_layer.unwrap_or(auto).min(self.l_d.saturating_sub(1))
    }

    /// Learning rate at a (1-based) step: constant when warmup = 0, else
    /// linear warmup followed by inverse-power decay
    /// lr * min(step/warmup, (warmup/step)^p).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            return self.lr;
        }
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.lr * f64::min(s / w, (w / s).powf(self.lr_power))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("d_raw", self.d_raw),
            ("d", self.d),
            ("d_c", self.d_c),
            ("d_s", self.d_s),
            ("d_ffn", self.d_ffn),
            ("m", self.m),
            ("heads", self.heads),
            ("groups", self.groups),
            ("entries", self.entries),
            ("kernel", self.kernel),
            ("batch", self.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(cfg_err(name, "must be positive"));
            }
        }
        if self.d % self.heads != 0 {
            return Err(cfg_err("heads", format!("{} must divide d {}", self.heads, self.d)));
        }
        if self.d_s % self.heads != 0 {
            return Err(cfg_err(
                "heads",
                format!("{} must divide d_s {}", self.heads, self.d_s),
            ));
        }
        if self.d_c % self.groups != 0 {
            return Err(cfg_err(
                "groups",
                format!("{} must divide d_c {}", self.groups, self.d_c),
            ));
        }
        if self.entries < 2 {
            return Err(cfg_err("entries", "need at least 2 codebook entries"));
        }
        if self.kernel % 2 == 0 {
            return Err(cfg_err("kernel", "must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(cfg_err("dropout", "must be in [0, 1)"));
        }
        if self.tau_init <= 0.0 || self.tau_min <= 0.0 || self.tau_decay <= 0.0 || self.tau_decay > 1.0 {
            return Err(cfg_err("tau_init", "temperature schedule must be positive with decay in (0, 1]"));
        }
        if let Some(g) = self.gamma {
            if g <= 0.0 {
                return Err(cfg_err("gamma", "must be positive or 'auto'"));
            }
        }
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_vq", self.lambda_vq),
            ("lambda_sc", self.lambda_sc),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(cfg_err(name, "must be a finite non-negative number"));
            }
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(cfg_err("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(cfg_err("beta1", "betas must be in [0, 1)"));
        }
        if self.domain == Domain::Grid && (self.grid_h * self.grid_w == 0) {
            return Err(cfg_err("grid_h", "grid domain needs grid_h and grid_w"));
        }
        Ok(())
    }

    pub fn to_lines(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("domain".into(), self.domain.to_string()),
            ("d_raw".into(), self.d_raw.to_string()),
            ("d".into(), self.d.to_string()),
            ("d_c".into(), self.d_c.to_string()),
            ("d_s".into(), self.d_s.to_string()),
            ("d_ffn".into(), self.d_ffn.to_string()),
            ("l_e".into(), self.l_e.to_string()),
            ("l_s".into(), self.l_s.to_string()),
            ("l_d".into(), self.l_d.to_string()),
            ("m".into(), self.m.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("groups".into(), self.groups.to_string()),
            ("entries".into(), self.entries.to_string()),
            ("kernel".into(), self.kernel.to_string()),
            ("lambda_rec".into(), self.lambda_rec.to_string()),
            ("lambda_vq".into(), self.lambda_vq.to_string()),
            ("lambda_sc".into(), self.lambda_sc.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("tau_init".into(), self.tau_init.to_string()),
            ("tau_min".into(), self.tau_min.to_string()),
            ("tau_decay".into(), self.tau_decay.to_string()),
            (
                "gamma".into(),
                self.gamma.map_or("auto".into(), |g| g.to_string()),
            ),
            ("warmup".into(), self.warmup.to_string()),
            ("lr_power".into(), self.lr_power.to_string()),
            ("log_every".into(), self.log_every.to_string()),
            ("ckpt_every".into(), self.ckpt_every.to_string()),
            (
                "cooccur_layer".into(),
                self.cooccur_layer.map_or("auto".into(), |l| l.to_string()),
            ),
            ("normalize_coords".into(), self.normalize_coords.to_string()),
            ("decoder".into(), self.decoder.to_string()),
        ];
        if self.domain == Domain::Grid {
            out.push(("grid_h".into(), self.grid_h.to_string()));
            out.push(("grid_w".into(), self.grid_w.to_string()));
        }
        out
    }

    pub fn to_file_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_lines() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Parses a flat key=value config. The domain key picks the preset that
    /// provides defaults; every other key overrides one field. Unknown keys
    /// are an error naming the key.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(&format!("line {}", i + 1), format!("expected key=value, got '{line}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    /// Same as [`Self::parse`] but from already-split pairs (checkpoint echo).
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let domain = match pairs.iter().find(|(k, _)| k == "domain").map(|(_, v)| v.as_str()) {
            Some("sequence") | None => Domain::Sequence,
            Some("grid") => Domain::Grid,
            Some(other) => return Err(cfg_err("domain", format!("unknown domain '{other}'"))),
        };
        let mut cfg = match domain {
            Domain::Sequence => Self::desk_sequence(),
            Domain::Grid => Self::desk_grid(),
        };
        for (k, v) in pairs {
            let parse_usize = || -> Result<usize, ConfigError> {
                v.parse().map_err(|_| cfg_err(k, format!("'{v}' is not a non-negative integer")))
            };
            let parse_u64 = || -> Result<u64, ConfigError> {
                v.parse().map_err(|_| cfg_err(k, format!("'{v}' is not an integer")))
            };
            let parse_f64 = || -> Result<f64, ConfigError> {
                v.parse().map_err(|_| cfg_err(k, format!("'{v}' is not a number")))
            };
            match k.as_str() {
                "domain" => {}
                "d_raw" => cfg.d_raw = parse_usize()?,
                "d" => cfg.d = parse_usize()?,
                "d_c" => cfg.d_c = parse_usize()?,
                "d_s" => cfg.d_s = parse_usize()?,
                "d_ffn" => cfg.d_ffn = parse_usize()?,
                "l_e" => cfg.l_e = parse_usize()?,
                "l_s" => cfg.l_s = parse_usize()?,
                "l_d" => cfg.l_d = parse_usize()?,
                "m" => cfg.m = parse_usize()?,
                "heads" => cfg.heads = parse_usize()?,
                "groups" => cfg.groups = parse_usize()?,
                "entries" => cfg.entries = parse_usize()?,
                "kernel" => cfg.kernel = parse_usize()?,
                "lambda_rec" => cfg.lambda_rec = parse_f64()?,
                "lambda_vq" => cfg.lambda_vq = parse_f64()?,
                "lambda_sc" => cfg.lambda_sc = parse_f64()?,
                "lr" => cfg.lr = parse_f64()?,
                "beta1" => cfg.beta1 = parse_f64()?,
                "beta2" => cfg.beta2 = parse_f64()?,
                "batch" => cfg.batch = parse_usize()?,
                "epochs" => cfg.epochs = parse_usize()?,
                "seed" => cfg.seed = parse_u64()?,
                "dropout" => cfg.dropout = parse_f64()?,
                "tau_init" => cfg.tau_init = parse_f64()?,
                "tau_min" => cfg.tau_min = parse_f64()?,
                "tau_decay" => cfg.tau_decay = parse_f64()?,
                "gamma" => {
                    cfg.gamma = if v == "auto" {
                        None
                    } else {
                        Some(parse_f64()?)
                    }
                }
                "warmup" => cfg.warmup = parse_usize()?,
                "lr_power" => cfg.lr_power = parse_f64()?,
                "log_every" => cfg.log_every = parse_usize()?,
                "ckpt_every" => cfg.ckpt_every = parse_usize()?,
                "cooccur_layer" => {
                    cfg.cooccur_layer = if v == "auto" {
                        None
                    } else {
                        Some(parse_usize()?)
                    }
                }
                "decoder" => {
                    cfg.decoder = match v.as_str() {
                        "link" => DecoderKind::LinkAttention,
                        "adain" => DecoderKind::AdaIn,
                        other => {
                            return Err(cfg_err(k, format!("unknown decoder '{other}' (link or adain)")))
                        }
                    }
                }
                "normalize_coords" => {
                    cfg.normalize_coords = v.parse().map_err(|_| {
                        cfg_err(k, format!("'{v}' is not true/false"))
                    })?
                }
                "grid_h" => cfg.grid_h = parse_usize()?,
                "grid_w" => cfg.grid_w = parse_usize()?,
                unknown => return Err(cfg_err(unknown, "unknown config key")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
