use std::fmt;
use std::str::FromStr;

use crate::denoise::ScorerKind;
use crate::error::{Error, Result};

/// Model variants used by the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Both generators, diffusion-enhanced contrast and the IB phase.
    #[default]
    Full,
    /// A second VGAE replaces the relation-aware denoiser.
    GenGen,
    /// The denoiser's attention scorer becomes `⟨w ⊙ e_i, e_j⟩ + b`.
    GenLinear,
    /// Plain two-view InfoNCE: no diffusion, no IB phase.
    NoDacl,
    /// No diffusion, IB phase kept.
    AclOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::GenGen,
        Variant::GenLinear,
        Variant::NoDacl,
        Variant::AclOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GenGen => "gen+gen",
            Variant::GenLinear => "gen+linear",
            Variant::NoDacl => "no-dacl",
            Variant::AclOnly => "acl-only",
        }
    }

    /// `None` means the second generator is a VGAE.
    pub fn second_scorer(self) -> Option<ScorerKind> {
        match self {
            Variant::GenGen => None,
            Variant::GenLinear => Some(ScorerKind::Linear),
            _ => Some(ScorerKind::Relational),
        }
    }

    pub fn uses_diffusion(self) -> bool {
        matches!(self, Variant::Full | Variant::GenGen | Variant::GenLinear)
    }

    pub fn uses_ib_phase(self) -> bool {
        self != Variant::NoDacl
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}` (valid: {})", names.join(", "))
            })
    }
}

/// Which embeddings the diffusion model denoises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiffuseSide {
    #[default]
    Both,
    Users,
    Items,
}

impl DiffuseSide {
    pub fn users(self) -> bool {
        self != DiffuseSide::Items
    }

    pub fn items(self) -> bool {
        self != DiffuseSide::Users
    }
}

impl fmt::Display for DiffuseSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiffuseSide::Both => "both",
            DiffuseSide::Users => "users",
            DiffuseSide::Items => "items",
        })
    }
}

impl FromStr for DiffuseSide {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "both" => Ok(DiffuseSide::Both),
            "users" => Ok(DiffuseSide::Users),
            "items" => Ok(DiffuseSide::Items),
            _ => Err(format!("unknown diffusion side `{s}` (valid: both, users, items)")),
        }
    }
}

macro_rules! train_config {
    ($( $(#[doc = $doc:expr])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every hyperparameter of a training run.
        ///
        /// The on-disk form is flat `key = value` text using the field
        /// names; `RADAR_<FIELD>` environment variables override it.
        #[derive(Clone, Debug, PartialEq)]
        pub struct TrainConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value
                            .parse::<$ty>()
                            .map_err(|e| format!("{key}: cannot parse `{value}`: {e}"))?;
                        Ok(())
                    } )*
                    _ => Err(format!("unknown config key `{key}`")),
                }
            }

            /// Canonical `key = value` text, one line per field.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($name), self.$name)); )*
                out
            }
        }
    };
}

train_config! {
    /// Embedding width `d`.
    dim: usize = 32,
    /// Propagation depth `L`.
    layers: usize = 2,
    /// Contrastive temperature.
    tau: f64 = 0.2,
    /// Weight of the intra-view (view vs. denoised view) term.
    lambda1: f64 = 0.1,
    /// Weight of the inter-view (denoised vs. denoised) term.
    lambda2: f64 = 0.1,
    /// Generator weight decay.
    lambda2_reg: f64 = 1e-4,
    /// Weight of the contrastive loss in phase 1.
    lambda3: f64 = 0.1,
    /// Embedding weight decay in phase 1.
    lambda4: f64 = 1e-5,
    /// Weight of the denoised-view IB term.
    lambda_ratio: f64 = 5.5,
    batch_size: usize = 1024,
    /// Learning rate for embeddings and the predictor.
    lr: f64 = 1e-3,
    /// Learning rate for both view generators.
    gen_lr: f64 = 1e-3,
    /// Learning rate for the diffusion network.
    diff_lr: f64 = 1e-3,
    /// Outer rounds of phases 1 → 2 → 3.
    epochs: usize = 20,
    phase1_steps: usize = 20,
    phase2_steps: usize = 2,
    phase3_steps: usize = 5,
    /// Decay of the historical (EMA) representations.
    ema_decay: f64 = 0.9,
    /// Outer rounds before the diffusion regulariser switches on.
    warmup_epochs: usize = 5,
    /// Weight of the delayed diffusion regulariser (0 disables it).
    ddr_weight: f64 = 0.0,
    /// Diffusion steps `T`.
    diff_steps: usize = 50,
    /// Steps `S` used to produce denoised views.
    denoise_steps: usize = 5,
    /// Noise scale `s`.
    diff_s: f64 = 0.2,
    alpha_low: f64 = 0.05,
    alpha_up: f64 = 0.5,
    diff_hidden: usize = 64,
    time_dim: usize = 16,
    diffuse: DiffuseSide = DiffuseSide::Both,
    att_hidden: usize = 16,
    /// Scale of the per-edge mean concrete penalty.
    concrete_weight: f64 = 1.0,
    /// Neighbours sampled per anchor in the asymmetric loss.
    acl_max_neighbors: usize = 16,
    /// Use edge weights in the normalised adjacency.
    use_weights: bool = false,
    variant: Variant = Variant::Full,
    seed: u64 = 2024,
}

impl TrainConfig {
    /// Parses `key = value` lines (`#` comments allowed) on top of the
    /// defaults, collecting every problem before failing.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((key, value)) => {
                    if let Err(e) = cfg.set(key.trim(), value.trim()) {
                        errors.push(format!("line {}: {e}", k + 1));
                    }
                }
                None => errors.push(format!("line {}: expected `key = value`", k + 1)),
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Applies `RADAR_<FIELD>` overrides; other variables are ignored.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut errors = Vec::new();
        for (name, value) in vars {
            let Some(field) = name.strip_prefix("RADAR_") else {
                continue;
            };
            let key = field.to_ascii_lowercase();
            if Self::KEYS.contains(&key.as_str()) {
                if let Err(e) = self.set(&key, &value) {
                    errors.push(format!("{name}: {e}"));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Lists every invalid field.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                e.push(msg.to_string());
            }
        };
        need(self.dim >= 1, "dim: must be at least 1");
        need(self.layers >= 1, "layers: must be at least 1");
        need(self.tau > 0.0, "tau: must be positive");
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda2_reg", self.lambda2_reg),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda_ratio", self.lambda_ratio),
            ("lr", self.lr),
            ("gen_lr", self.gen_lr),
            ("diff_lr", self.diff_lr),
            ("ddr_weight", self.ddr_weight),
            ("concrete_weight", self.concrete_weight),
        ] {
            need(v >= 0.0 && v.is_finite(), &format!("{name}: must be a finite value >= 0"));
        }
        need(self.batch_size >= 1, "batch_size: must be at least 1");
        need((0.0..1.0).contains(&self.ema_decay), "ema_decay: must lie in [0, 1)");
        need(self.diff_steps >= 2, "diff_steps: must be at least 2");
        need(
            self.denoise_steps <= self.diff_steps,
            "denoise_steps: must not exceed diff_steps",
        );
        need((0.0..=1.0).contains(&self.diff_s), "diff_s: must lie in [0, 1]");
        need(
            0.0 < self.alpha_low && self.alpha_low < self.alpha_up && self.alpha_up < 1.0,
            "alpha_low, alpha_up: need 0 < alpha_low < alpha_up < 1",
        );
        need(self.diff_hidden >= 1, "diff_hidden: must be at least 1");
        need(
            self.time_dim >= 2 && self.time_dim.is_multiple_of(2),
            "time_dim: must be an even number >= 2",
        );
        need(self.att_hidden >= 1, "att_hidden: must be at least 1");
        need(self.acl_max_neighbors >= 1, "acl_max_neighbors: must be at least 1");
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }
}
