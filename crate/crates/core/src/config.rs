//! One JSON-serializable bundle for a whole run — dataset recipe, model
//! shape, training schedule — with dot-path overrides so scripts can vary a
//! single knob without editing files.

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetSpec;
use crate::ensure_arg;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// The laptop-scale profile used by the test suite and examples.
    pub fn desk() -> Self {
        RunConfig {
            dataset: DatasetSpec {
                n_a: 1000,
                n_b: 1000,
                n_eval_a: 64,
                n_eval_b: 64,
                vocab_size: 20,
                overlap_fraction: 0.5,
                image_h: 16,
                image_w: 16,
                bands: 20,
                frames_per_token: 10,
                seed: 7,
            },
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }

    /// Full-scale widths, checked in for documentation; far too heavy for
    /// the test machine.
    pub fn full() -> Self {
        RunConfig {
            dataset: DatasetSpec {
                n_a: 10_000,
                n_b: 10_000,
                n_eval_a: 512,
                n_eval_b: 512,
                vocab_size: 65,
                overlap_fraction: 0.26,
                image_h: 128,
                image_w: 128,
                bands: 80,
                frames_per_token: 10,
                seed: 7,
            },
            model: ModelConfig::full(),
            train: TrainConfig::default(),
        }
    }

    /// Validate each part and their agreement, so mismatches surface before
    /// any data is generated or trained on.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        ensure_arg!(
            self.dataset.vocab_size == self.model.vocab_size,
            "dataset vocabulary {} != model vocabulary {}",
            self.dataset.vocab_size,
            self.model.vocab_size
        );
        ensure_arg!(
            self.dataset.image_h == self.model.image_h && self.dataset.image_w == self.model.image_w,
            "dataset image {}x{} != model {}x{}",
            self.dataset.image_h,
            self.dataset.image_w,
            self.model.image_h,
            self.model.image_w
        );
        ensure_arg!(
            self.dataset.bands == self.model.bands,
            "dataset bands {} != model bands {}",
            self.dataset.bands,
            self.model.bands
        );
        let rows = self.dataset.audio_rows();
        ensure_arg!(
            rows % self.model.chunk_rows == 0 && rows % self.model.rows_per_step() == 0,
            "audio rows {} must divide into encoder chunks of {} and decoder groups of {}",
            rows,
            self.model.chunk_rows,
            self.model.rows_per_step()
        );
        Ok(())
    }
}

/// Apply `path.to.field=value` overrides. Values parse as JSON where they
/// can (numbers, booleans) and fall back to strings, so
/// `train.strategy=alternate` works without quoting.
pub fn apply_overrides(config: &RunConfig, sets: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(config)?;
    for set in sets {
        let (path, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override '{set}' is not key=value")))?;
        ensure_arg!(!path.is_empty(), "override '{}' has an empty path", set);
        let new: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

        let mut slot = &mut value;
        for seg in path.split('.') {
            slot = slot.get_mut(seg).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown config field '{seg}' in override '{set}'"))
            })?;
        }
        ensure_arg!(
            !slot.is_object(),
            "override '{}' targets a whole section, not a field",
            set
        );
        *slot = new;
    }
    serde_json::from_value(value)
        .map_err(|e| Error::InvalidArgument(format!("override produced an invalid config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mib::AblationFlags;
    use crate::training::Strategy;

    #[test]
    fn desk_and_full_profiles_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::full().validate().unwrap();
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let cfg = RunConfig::desk();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::desk();
        let out = apply_overrides(
            &cfg,
            &[
                "model.d_z=16".into(),
                "train.lr=0.01".into(),
                "train.strategy=alternate".into(),
                "train.flags.no_m=true".into(),
                "dataset.overlap_fraction=0.26".into(),
            ],
        )
        .unwrap();
        assert_eq!(out.model.d_z, 16);
        assert_eq!(out.train.lr, 0.01);
        assert_eq!(out.train.strategy, Strategy::Alternate);
        assert_eq!(out.train.flags, AblationFlags { no_m: true, ..Default::default() });
        assert_eq!(out.dataset.overlap_fraction, 0.26);
        // The input is untouched.
        assert_eq!(cfg.model.d_z, 32);
    }

    #[test]
    fn bad_overrides_are_rejected_with_context() {
        let cfg = RunConfig::desk();
        for bad in ["model.d_z", "model.nope=3", "train=8", "model.d_z=fast"] {
            let err = apply_overrides(&cfg, &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, Error::InvalidArgument(_)), "{bad} should be rejected");
        }
    }

    #[test]
    fn cross_field_disagreements_fail_validation() {
        let mut cfg = RunConfig::desk();
        cfg.model.vocab_size = 30;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk();
        cfg.dataset.frames_per_token = 7; // 21 rows, not divisible by chunks of 5
        assert!(cfg.validate().is_err());
    }
}
