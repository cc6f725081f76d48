//! Network and training settings, with a `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htk::{HtkConfig, Thresholds, TopKSchedule};

/// Which path a forward pass takes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Decide per input: fallback, multi-candidate or locked single ROI.
    #[default]
    Gate,
    /// Always use the Top-K candidates with soft guidance, never lock.
    Candidate,
    /// Full-image path: no windows, no guidance, no masks.
    Fallback,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Gate => "gate",
            Mode::Candidate => "candidate",
            Mode::Fallback => "fallback",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gate" => Ok(Mode::Gate),
            "candidate" => Ok(Mode::Candidate),
            "fallback" => Ok(Mode::Fallback),
            _ => Err(format!("unknown mode '{s}' (gate, candidate, fallback)")),
        }
    }
}

/// Architecture and ROI-reasoning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channels per encoder level, finest first; its length is the depth.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub classes: usize,
    pub retention_heads: usize,
    pub lambda: f64,
    pub sigma_ratio: f64,
    pub tau_ratio: f64,
    pub gamma_fuse: f64,
    pub eps: f64,
    pub tau1: f64,
    /// Entropy threshold; `None` means `0.9·ln N`.
    pub tau2: Option<f64>,
    pub tau_lock: f64,
    /// Per-level Top-K budget, finest first; `None` means the default halving.
    pub topk: Option<Vec<usize>>,
    /// Per-level weights, finest first; `None` means uniform.
    pub alpha: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: vec![16, 32, 64, 128],
            in_channels: 1,
            classes: 1,
            retention_heads: 2,
            lambda: 1.0,
            sigma_ratio: 0.5,
            tau_ratio: 0.25,
            gamma_fuse: 5.0,
            eps: 1e-6,
            tau1: 0.15,
            tau2: None,
            tau_lock: 0.30,
            topk: None,
            alpha: None,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Every violated constraint, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let l = self.levels();
        if l < 2 {
            errs.push(format!("channels: need at least 2 levels, got {l}"));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            errs.push("channels: must strictly increase with depth".into());
        }
        if self.channels.first() == Some(&0) {
            errs.push("channels: must be positive".into());
        }
        if self.retention_heads == 0 || self.channels.iter().any(|c| c % self.retention_heads != 0) {
            errs.push(format!(
                "retention_heads: {} must divide every channel count",
                self.retention_heads
            ));
        }
        if self.in_channels == 0 {
            errs.push("in_channels: must be positive".into());
        }
        if !matches!(self.classes, 1 | 3) {
            errs.push(format!("classes: {} (1 for WT, 3 for WT/TC/ET)", self.classes));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("eps", self.eps),
            ("tau1", self.tau1),
            ("tau_lock", self.tau_lock),
            ("gamma_fuse", self.gamma_fuse),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name}: {v} must be finite and non-negative"));
            }
        }
        for (name, v) in [("sigma_ratio", self.sigma_ratio), ("tau_ratio", self.tau_ratio)] {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name}: {v} must be positive"));
            }
        }
        if let Some(t) = self.tau2 {
            if !t.is_finite() {
                errs.push(format!("tau2: {t} must be finite"));
            }
        }
        if let Some(k) = &self.topk {
            if k.len() != l {
                errs.push(format!("topk: {} entries for {l} levels", k.len()));
            } else if let Err(Error::Config(e)) = (TopKSchedule { k: k.clone() }).validate(usize::MAX) {
                errs.extend(e.into_iter().map(|m| format!("topk: {m}")));
            }
        }
        if let Some(a) = &self.alpha {
            if a.len() != l {
                errs.push(format!("alpha: {} entries for {l} levels", a.len()));
            }
            if a.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                errs.push("alpha: weights must be finite and non-negative".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Decision settings for `n` priors.
    pub fn htk(&self, n: usize) -> Result<HtkConfig> {
        let l = self.levels();
        let mut cfg = HtkConfig::default_for(n, l);
        if let Some(k) = &self.topk {
            cfg.schedule = TopKSchedule {
                k: k.iter().map(|&k| k.min(n.max(1))).collect(),
            };
        }
        cfg.schedule.validate(n)?;
        if let Some(a) = &self.alpha {
            cfg.alpha = a.clone();
        }
        cfg.thresholds = Thresholds {
            tau1: self.tau1,
            tau2: self.tau2.unwrap_or(Thresholds::default_for(n).tau2),
            tau_lock: self.tau_lock,
        };
        Ok(cfg)
    }
}

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub dice_weight: f64,
    pub bce_weight: f64,
    pub val_fraction: f64,
    pub train_mode: Mode,
    pub eval_mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 300,
            patience: 50,
            batch_size: 4,
            dice_weight: 0.2,
            bce_weight: 0.8,
            val_fraction: 0.2,
            train_mode: Mode::Candidate,
            eval_mode: Mode::Candidate,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr: {} must be positive", self.lr));
        }
        if self.epochs == 0 {
            errs.push("epochs: must be at least 1".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size: must be at least 1".into());
        }
        if !(self.dice_weight >= 0.0 && self.bce_weight >= 0.0 && self.dice_weight + self.bce_weight > 0.0) {
            errs.push("dice_weight/bce_weight: must be non-negative with a positive sum".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            errs.push(format!("val_fraction: {} must lie in (0, 1)", self.val_fraction));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Loss weights scaled to sum to one.
    pub fn loss_weights(&self) -> (f64, f64) {
        let s = self.dice_weight + self.bce_weight;
        (self.dice_weight / s, self.bce_weight / s)
    }
}

/// Both configurations, as read from a settings file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub net: NetConfig,
    pub train: TrainConfig,
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("bad list entry '{}'", s.trim())))
        .collect()
}

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse '{v}'"))
}

fn optional<T>(
    v: &str,
    f: impl Fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<Option<T>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

impl Settings {
    /// Sets one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (n, t) = (&mut self.net, &mut self.train);
        let v = value.trim();
        match key.trim() {
            "channels" => n.channels = list(v)?,
            "in_channels" => n.in_channels = scalar(v)?,
            "classes" => n.classes = scalar(v)?,
            "retention_heads" => n.retention_heads = scalar(v)?,
            "lambda" => n.lambda = scalar(v)?,
            "sigma_ratio" => n.sigma_ratio = scalar(v)?,
            "tau_ratio" => n.tau_ratio = scalar(v)?,
            "gamma_fuse" => n.gamma_fuse = scalar(v)?,
            "eps" => n.eps = scalar(v)?,
            "tau1" => n.tau1 = scalar(v)?,
            "tau2" => n.tau2 = optional(v, scalar)?,
            "tau_lock" => n.tau_lock = scalar(v)?,
            "topk" => n.topk = optional(v, list)?,
            "alpha" => n.alpha = optional(v, list)?,
            "seed" => {
                n.seed = scalar(v)?;
                t.seed = n.seed;
            }
            "lr" => t.lr = scalar(v)?,
            "epochs" => t.epochs = scalar(v)?,
            "patience" => t.patience = scalar(v)?,
            "batch_size" => t.batch_size = scalar(v)?,
            "dice_weight" => t.dice_weight = scalar(v)?,
            "bce_weight" => t.bce_weight = scalar(v)?,
            "val_fraction" => t.val_fraction = scalar(v)?,
            "train_mode" => t.train_mode = v.parse()?,
            "eval_mode" => t.eval_mode = v.parse()?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// All offending lines are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = s.set(k, v) {
                        errs.push(format!("line {}: {}: {e}", i + 1, k.trim()));
                    }
                }
                None => errs.push(format!("line {}: expected key = value", i + 1)),
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(s)
    }

    /// Validates both halves, reporting every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.net.validate(), self.train.validate()] {
            if let Err(Error::Config(e)) = r {
                errs.extend(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// The `key = value` form; [`Settings::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let (n, t) = (&self.net, &self.train);
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "channels = {}", join(&n.channels));
        let _ = writeln!(s, "in_channels = {}", n.in_channels);
        let _ = writeln!(s, "classes = {}", n.classes);
        let _ = writeln!(s, "retention_heads = {}", n.retention_heads);
        let _ = writeln!(s, "lambda = {}", n.lambda);
        let _ = writeln!(s, "sigma_ratio = {}", n.sigma_ratio);
        let _ = writeln!(s, "tau_ratio = {}", n.tau_ratio);
        let _ = writeln!(s, "gamma_fuse = {}", n.gamma_fuse);
        let _ = writeln!(s, "eps = {}", n.eps);
        let _ = writeln!(s, "tau1 = {}", n.tau1);
        let _ = writeln!(s, "tau2 = {}", n.tau2.map_or("auto".into(), |v| v.to_string()));
        let _ = writeln!(s, "tau_lock = {}", n.tau_lock);
        let _ = writeln!(s, "topk = {}", n.topk.as_deref().map_or("auto".into(), join));
        let _ = writeln!(
            s,
            "alpha = {}",
            n.alpha.as_ref().map_or("auto".into(), |a| a
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","))
        );
        let _ = writeln!(s, "seed = {}", n.seed);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "patience = {}", t.patience);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "dice_weight = {}", t.dice_weight);
        let _ = writeln!(s, "bce_weight = {}", t.bce_weight);
        let _ = writeln!(s, "val_fraction = {}", t.val_fraction);
        let _ = writeln!(s, "train_mode = {}", t.train_mode.name());
        let _ = writeln!(s, "eval_mode = {}", t.eval_mode.name());
        s
    }
}
