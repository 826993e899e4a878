//! Experiment configuration: one flat set of `key: value` pairs covering
//! every module, readable from a text file and overridable per key.

use std::path::Path;

use crate::conditioning::{CondFlags, SceneEncoderConfig};
use crate::diffusion::{DenoiserConfig, DenoiserTrainConfig};
use crate::error::{Error, Result};
use crate::format::read_file;
use crate::synth::{Scenario, SynthConfig};
use crate::vae::{ElboWeights, VaeConfig, VaeTrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    // Data.
    pub scenario: Scenario,
    pub kappa: f64,
    pub frames: usize,
    pub lookahead: usize,
    pub lag: usize,
    pub fps: f32,
    pub scene_points: usize,
    pub train_episodes: usize,
    pub test_episodes: usize,
    // Motion VAE.
    pub latent_dim: usize,
    pub vae_layers: usize,
    pub vae_heads: usize,
    pub vae_ff_dim: usize,
    pub kl_weight: f64,
    pub fk_weight: f64,
    pub vae_steps: usize,
    pub vae_batch_size: usize,
    pub vae_lr: f64,
    // Denoiser.
    pub denoiser_hidden: usize,
    pub denoiser_layers: usize,
    pub denoiser_heads: usize,
    pub denoiser_ff_dim: usize,
    pub denoiser_steps: usize,
    pub denoiser_batch_size: usize,
    pub denoiser_lr: f64,
    pub weight_decay: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
    // Conditioning.
    pub cond_interactee: bool,
    pub cond_scene: bool,
    pub scene_hidden: Vec<usize>,
    pub scene_encoder_points: usize,
    pub scene_warmup_steps: usize,
    pub scene_lr: f64,
    /// Frames the interactee window is shifted forward for conditioning.
    pub interactee_offset: usize,
    /// Offset used for the future row of the future ablation.
    pub future_offset: usize,
    pub interactee_noise: f64,
    // Evaluation.
    pub samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: Scenario::Mixed,
            kappa: 0.9,
            frames: 60,
            lookahead: 30,
            lag: 10,
            fps: 30.0,
            scene_points: 1024,
            train_episodes: 200,
            test_episodes: 50,
            latent_dim: 256,
            vae_layers: 9,
            vae_heads: 4,
            vae_ff_dim: 1024,
            kl_weight: 1e-4,
            fk_weight: 1.0,
            vae_steps: 3000,
            vae_batch_size: 64,
            vae_lr: 1e-4,
            denoiser_hidden: 256,
            denoiser_layers: 9,
            denoiser_heads: 4,
            denoiser_ff_dim: 1024,
            denoiser_steps: 3000,
            denoiser_batch_size: 128,
            denoiser_lr: 1e-4,
            weight_decay: 0.01,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 20,
            cond_interactee: true,
            cond_scene: true,
            scene_hidden: vec![64, 128, 256],
            scene_encoder_points: 1024,
            scene_warmup_steps: 500,
            scene_lr: 1e-4,
            interactee_offset: 0,
            future_offset: 30,
            interactee_noise: 0.0,
            samples: 3,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("{key}: cannot parse '{value}'"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true/false, got '{value}'")),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// All keys in serialization order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("scenario", self.scenario.to_string()),
            ("kappa", self.kappa.to_string()),
            ("frames", self.frames.to_string()),
            ("lookahead", self.lookahead.to_string()),
            ("lag", self.lag.to_string()),
            ("fps", self.fps.to_string()),
            ("scene_points", self.scene_points.to_string()),
            ("train_episodes", self.train_episodes.to_string()),
            ("test_episodes", self.test_episodes.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("vae_layers", self.vae_layers.to_string()),
            ("vae_heads", self.vae_heads.to_string()),
            ("vae_ff_dim", self.vae_ff_dim.to_string()),
            ("kl_weight", self.kl_weight.to_string()),
            ("fk_weight", self.fk_weight.to_string()),
            ("vae_steps", self.vae_steps.to_string()),
            ("vae_batch_size", self.vae_batch_size.to_string()),
            ("vae_lr", self.vae_lr.to_string()),
            ("denoiser_hidden", self.denoiser_hidden.to_string()),
            ("denoiser_layers", self.denoiser_layers.to_string()),
            ("denoiser_heads", self.denoiser_heads.to_string()),
            ("denoiser_ff_dim", self.denoiser_ff_dim.to_string()),
            ("denoiser_steps", self.denoiser_steps.to_string()),
            ("denoiser_batch_size", self.denoiser_batch_size.to_string()),
            ("denoiser_lr", self.denoiser_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("inference_steps", self.inference_steps.to_string()),
            ("cond_interactee", self.cond_interactee.to_string()),
            ("cond_scene", self.cond_scene.to_string()),
            ("scene_hidden", join(&self.scene_hidden)),
            (
                "scene_encoder_points",
                self.scene_encoder_points.to_string(),
            ),
            ("scene_warmup_steps", self.scene_warmup_steps.to_string()),
            ("scene_lr", self.scene_lr.to_string()),
            ("interactee_offset", self.interactee_offset.to_string()),
            ("future_offset", self.future_offset.to_string()),
            ("interactee_noise", self.interactee_noise.to_string()),
            ("samples", self.samples.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default()
            .entries()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "scenario" => {
                self.scenario = value
                    .trim()
                    .parse()
                    .map_err(|e: Error| format!("{key}: {e}"))?
            }
            "kappa" => self.kappa = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "lookahead" => self.lookahead = parse(key, value)?,
            "lag" => self.lag = parse(key, value)?,
            "fps" => self.fps = parse(key, value)?,
            "scene_points" => self.scene_points = parse(key, value)?,
            "train_episodes" => self.train_episodes = parse(key, value)?,
            "test_episodes" => self.test_episodes = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "vae_layers" => self.vae_layers = parse(key, value)?,
            "vae_heads" => self.vae_heads = parse(key, value)?,
            "vae_ff_dim" => self.vae_ff_dim = parse(key, value)?,
            "kl_weight" => self.kl_weight = parse(key, value)?,
            "fk_weight" => self.fk_weight = parse(key, value)?,
            "vae_steps" => self.vae_steps = parse(key, value)?,
            "vae_batch_size" => self.vae_batch_size = parse(key, value)?,
            "vae_lr" => self.vae_lr = parse(key, value)?,
            "denoiser_hidden" => self.denoiser_hidden = parse(key, value)?,
            "denoiser_layers" => self.denoiser_layers = parse(key, value)?,
            "denoiser_heads" => self.denoiser_heads = parse(key, value)?,
            "denoiser_ff_dim" => self.denoiser_ff_dim = parse(key, value)?,
            "denoiser_steps" => self.denoiser_steps = parse(key, value)?,
            "denoiser_batch_size" => self.denoiser_batch_size = parse(key, value)?,
            "denoiser_lr" => self.denoiser_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "inference_steps" => self.inference_steps = parse(key, value)?,
            "cond_interactee" => self.cond_interactee = parse_bool(key, value)?,
            "cond_scene" => self.cond_scene = parse_bool(key, value)?,
            "scene_hidden" => {
                self.scene_hidden = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<std::result::Result<_, _>>()?
            }
            "scene_encoder_points" => self.scene_encoder_points = parse(key, value)?,
            "scene_warmup_steps" => self.scene_warmup_steps = parse(key, value)?,
            "scene_lr" => self.scene_lr = parse(key, value)?,
            "interactee_offset" => self.interactee_offset = parse(key, value)?,
            "future_offset" => self.future_offset = parse(key, value)?,
            "interactee_noise" => self.interactee_noise = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Serialized `key: value` text; [`ExperimentConfig::parse_text`] reads it back.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}: {v}\n"))
            .collect()
    }

    /// Starts from the defaults and applies every `key: value` line. Blank
    /// lines and `#` comments are skipped. Reports every bad line at once.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once(':') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        errors.push(format!("line {}: {e}", n + 1));
                    }
                }
                None => errors.push(format!(
                    "line {}: expected 'key: value', got '{line}'",
                    n + 1
                )),
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = read_file(path, "config file")?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(vec!["config file is not UTF-8".into()]))?;
        Self::parse_text(&text)
    }

    /// Applies `(key, value)` overrides, collecting every failure.
    pub fn apply_overrides<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<()> {
        let errors: Vec<String> = pairs
            .into_iter()
            .filter_map(|(k, v)| self.set(k, v).err())
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Checks every constraint and lists all violations.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                e.push(msg);
            }
        };
        need(
            (0.0..=1.0).contains(&self.kappa),
            format!("kappa must lie in [0, 1], got {}", self.kappa),
        );
        need(
            self.frames >= 3,
            format!("frames must be ≥ 3, got {}", self.frames),
        );
        need(
            self.fps > 0.0 && self.fps.is_finite(),
            format!("fps must be positive, got {}", self.fps),
        );
        need(self.scene_points > 0, "scene_points must be ≥ 1".into());
        need(self.train_episodes > 0, "train_episodes must be ≥ 1".into());
        need(self.test_episodes > 0, "test_episodes must be ≥ 1".into());
        need(self.latent_dim > 0, "latent_dim must be ≥ 1".into());
        need(self.vae_layers > 0, "vae_layers must be ≥ 1".into());
        need(
            self.vae_heads > 0 && self.latent_dim.is_multiple_of(self.vae_heads.max(1)),
            format!(
                "latent_dim {} must be divisible by vae_heads {}",
                self.latent_dim, self.vae_heads
            ),
        );
        need(self.vae_ff_dim > 0, "vae_ff_dim must be ≥ 1".into());
        need(
            self.kl_weight >= 0.0 && self.kl_weight.is_finite(),
            "kl_weight must be ≥ 0".into(),
        );
        need(
            self.fk_weight >= 0.0 && self.fk_weight.is_finite(),
            "fk_weight must be ≥ 0".into(),
        );
        need(self.vae_batch_size > 0, "vae_batch_size must be ≥ 1".into());
        need(
            self.vae_lr > 0.0 && self.vae_lr.is_finite(),
            "vae_lr must be positive".into(),
        );
        need(
            self.denoiser_layers > 0,
            "denoiser_layers must be ≥ 1".into(),
        );
        need(
            self.denoiser_heads > 0 && self.denoiser_hidden.is_multiple_of(self.denoiser_heads.max(1)),
            format!(
                "denoiser_hidden {} must be divisible by denoiser_heads {}",
                self.denoiser_hidden, self.denoiser_heads
            ),
        );
        need(
            self.denoiser_hidden > 0,
            "denoiser_hidden must be ≥ 1".into(),
        );
        need(
            self.denoiser_ff_dim > 0,
            "denoiser_ff_dim must be ≥ 1".into(),
        );
        need(
            self.denoiser_batch_size > 0,
            "denoiser_batch_size must be ≥ 1".into(),
        );
        need(
            self.denoiser_lr > 0.0 && self.denoiser_lr.is_finite(),
            "denoiser_lr must be positive".into(),
        );
        need(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay must be ≥ 0".into(),
        );
        need(
            self.diffusion_steps > 0,
            "diffusion_steps must be ≥ 1".into(),
        );
        need(
            0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0,
            format!(
                "need 0 < beta_start ≤ beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            ),
        );
        need(
            (1..=self.diffusion_steps).contains(&self.inference_steps),
            format!(
                "inference_steps must lie in [1, {}], got {}",
                self.diffusion_steps, self.inference_steps
            ),
        );
        need(
            !self.scene_hidden.is_empty() && self.scene_hidden.iter().all(|&w| w > 0),
            "scene_hidden must list ≥ 1 positive width".into(),
        );
        need(
            self.scene_encoder_points > 0,
            "scene_encoder_points must be ≥ 1".into(),
        );
        need(
            self.scene_lr > 0.0 && self.scene_lr.is_finite(),
            "scene_lr must be positive".into(),
        );
        need(
            self.interactee_offset <= self.lookahead,
            format!(
                "interactee_offset {} exceeds lookahead {}",
                self.interactee_offset, self.lookahead
            ),
        );
        need(
            self.future_offset <= self.lookahead,
            format!(
                "future_offset {} exceeds lookahead {}",
                self.future_offset, self.lookahead
            ),
        );
        need(
            self.interactee_noise >= 0.0 && self.interactee_noise.is_finite(),
            "interactee_noise must be ≥ 0".into(),
        );
        need(self.samples > 0, "samples must be ≥ 1".into());
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    pub fn flags(&self) -> CondFlags {
        CondFlags {
            interactee: self.cond_interactee,
            scene: self.cond_scene,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            frames: self.frames,
            lookahead: self.lookahead,
            kappa: self.kappa,
            scene_points: self.scene_points,
            fps: self.fps,
            lag: self.lag,
        }
    }

    pub fn vae_model(&self) -> VaeConfig {
        VaeConfig {
            frames: self.frames,
            joints: crate::body::SMPL_JOINTS,
            latent_dim: self.latent_dim,
            layers: self.vae_layers,
            heads: self.vae_heads,
            ff_dim: self.vae_ff_dim,
            fps: self.fps,
        }
    }

    pub fn vae_training(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            model: self.vae_model(),
            steps: self.vae_steps,
            batch_size: self.vae_batch_size,
            lr: self.vae_lr,
            weight_decay: self.weight_decay,
            weights: ElboWeights {
                kl: self.kl_weight,
                fk: self.fk_weight,
            },
            seed: self.seed,
        }
    }

    pub fn denoiser_model(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_dim: self.latent_dim,
            hidden: self.denoiser_hidden,
            layers: self.denoiser_layers,
            heads: self.denoiser_heads,
            ff_dim: self.denoiser_ff_dim,
        }
    }

    pub fn denoiser_training(&self, flags: CondFlags) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            model: self.denoiser_model(),
            steps: self.denoiser_steps,
            batch_size: self.denoiser_batch_size,
            lr: self.denoiser_lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            diffusion_steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            flags,
            scene_warmup_steps: self.scene_warmup_steps,
            scene_points: self.scene_encoder_points,
            scene_lr: self.scene_lr,
            scene_hidden: self.scene_hidden.clone(),
        }
    }

    pub fn scene_encoder(&self) -> SceneEncoderConfig {
        SceneEncoderConfig {
            latent_dim: self.latent_dim,
            hidden: self.scene_hidden.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.latent_dim, c.vae_layers, c.vae_heads), (256, 9, 4));
        assert_eq!((c.denoiser_layers, c.denoiser_heads), (9, 4));
        assert_eq!((c.diffusion_steps, c.inference_steps), (1000, 20));
        assert_eq!((c.vae_lr, c.denoiser_lr), (1e-4, 1e-4));
        assert_eq!((c.vae_batch_size, c.denoiser_batch_size), (64, 128));
        assert_eq!((c.frames, c.future_offset, c.lag), (60, 30, 10));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.kappa = 0.1 + 0.2;
        c.scene_hidden = vec![8, 16];
        c.scenario = Scenario::FarAverted;
        c.cond_scene = false;
        assert_eq!(ExperimentConfig::parse_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_reports_every_bad_line() {
        let text = "# desk\nframes: 30\nkappa: x\nbogus: 1\nno separator\n";
        match ExperimentConfig::parse_text(text) {
            Err(Error::Config(errs)) => {
                assert_eq!(errs.len(), 3, "{errs:?}");
                assert!(errs[0].contains("line 3") && errs[0].contains("kappa"));
                assert!(errs[1].contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut c = ExperimentConfig::default();
        c.kappa = 1.5;
        c.frames = 2;
        c.vae_heads = 3;
        c.future_offset = 99;
        match c.validate() {
            Err(Error::Config(errs)) => {
                assert_eq!(errs.len(), 4, "{errs:?}");
                for key in ["kappa", "frames", "vae_heads", "future_offset"] {
                    assert!(
                        errs.iter().any(|e| e.contains(key)),
                        "{key} missing from {errs:?}"
                    );
                }
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides([
            ("latent_dim", "32"),
            ("latent_dim", "64"),
            ("cond_scene", "false"),
        ])
        .unwrap();
        assert_eq!(c.latent_dim, 64);
        assert!(!c.cond_scene);
        assert!(
            matches!(c.apply_overrides([("nope", "1"), ("frames", "-1")]), Err(Error::Config(v)) if v.len() == 2)
        );
    }
}
