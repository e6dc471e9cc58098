//! Scheduler configuration, presets and validation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditioning::PromptTrack;
use crate::error::{Error, Result};
use crate::schedule::{build_schedule, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "fifo")]
    Fifo,
    #[serde(rename = "tta")]
    Tta,
    #[serde(rename = "tta+dce")]
    TtaDce,
    #[serde(rename = "stage2-only")]
    Stage2Only,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Fifo, Mode::Tta, Mode::TtaDce, Mode::Stage2Only];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fifo => "fifo",
            Mode::Tta => "tta",
            Mode::TtaDce => "tta+dce",
            Mode::Stage2Only => "stage2-only",
        }
    }

    pub fn is_zigzag(self) -> bool {
        matches!(self, Mode::Tta | Mode::TtaDce)
    }

    pub fn uses_dce(self) -> bool {
        self == Mode::TtaDce
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// How guidance latents are picked from the prior range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSampling {
    #[default]
    Even,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub f0: usize,
    #[serde(rename = "L_zig")]
    pub l_zig: usize,
    pub e: usize,
    pub delta_adju: f64,
    pub m_guid: usize,
    pub n_samp: usize,
    pub f_ref: usize,
    pub f_eval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_judg: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_guid: Option<usize>,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_prom", default, skip_serializing_if = "Option::is_none")]
    pub n_prom: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub l: usize,
    pub d: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<String>,
    #[serde(default)]
    pub guidance_sampling: GuidanceSampling,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self::videocrafter2_like()
    }
}

pub const PRESETS: [&str; 2] = ["videocrafter2-like", "wan-like"];

impl SchedulerConfig {
    pub fn videocrafter2_like() -> Self {
        Self {
            t: 64,
            f0: 16,
            l_zig: 4,
            e: 10,
            delta_adju: 0.01,
            m_guid: 6,
            n_samp: 4,
            f_ref: 8,
            f_eval: 4,
            f_judg: None,
            f_guid: None,
            n: 64,
            n_prom: None,
            stride: None,
            seed: 0,
            mode: Mode::TtaDce,
            l: 16,
            d: 8,
            beta_min: 1e-4,
            beta_max: 2e-2,
            eta: 0.0,
            prompts: Vec::new(),
            guidance_sampling: GuidanceSampling::Even,
        }
    }

    pub fn wan_like() -> Self {
        Self {
            t: 54,
            f0: 21,
            l_zig: 7,
            m_guid: 4,
            ..Self::videocrafter2_like()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "videocrafter2-like" => Ok(Self::videocrafter2_like()),
            "wan-like" => Ok(Self::wan_like()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {PRESETS:?})"
            ))),
        }
    }

    /// Parses a TOML document. An optional `preset` key selects the base
    /// values; every other key overrides it. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let base = match table.remove("preset") {
            None => Self::default(),
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(other) => {
                return Err(Error::Config(format!("preset must be a string, got {other}")))
            }
        };
        let mut merged = toml::Table::try_from(&base).expect("config always serializes");
        merged.extend(table);
        let config: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.f0 / 2)
    }

    /// Number of zigzag groups the clean seed is spread over.
    pub fn n_zig(&self) -> usize {
        self.f0.div_ceil(self.l_zig)
    }

    /// Rounds of progressive guidance while building the zigzag queue.
    pub fn init_rounds(&self) -> usize {
        self.t.saturating_sub(self.n_zig() + self.e)
    }

    /// Resident Stage-1 queue length: levels `e ..= T−1` in `L_zig` groups.
    pub fn resident_len(&self) -> usize {
        self.f0 + self.init_rounds() * self.l_zig
    }

    /// `N` rounded up to a multiple of `L_zig`.
    pub fn padded_frames(&self) -> usize {
        self.n.div_ceil(self.l_zig) * self.l_zig
    }

    pub fn stage1_iterations(&self) -> usize {
        self.n.div_ceil(self.l_zig)
    }

    pub fn f_judg(&self) -> usize {
        self.f_judg.unwrap_or_else(|| {
            (self.resident_len() + 1).saturating_sub(2 * self.l_zig + self.f_eval)
        })
    }

    pub fn f_guid(&self) -> usize {
        self.f_guid.unwrap_or(self.f0 / 2)
    }

    /// Tail length a reflection search regenerates: `L − f_judg + 1`.
    pub fn reflection_tail(&self) -> usize {
        (self.resident_len() + 1).saturating_sub(self.f_judg())
    }

    pub fn reflection_rounds(&self) -> usize {
        self.reflection_tail().div_ceil(self.l_zig)
    }

    /// Highest global frame index a run touches; a target sequence must be
    /// at least this long.
    pub fn required_target_frames(&self) -> usize {
        match self.mode {
            Mode::Fifo => self.t + self.n,
            Mode::Tta | Mode::TtaDce => self.resident_len() + self.stage1_iterations() * self.l_zig,
            Mode::Stage2Only => self.n,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.t, self.beta_min, self.beta_max)
    }

    pub fn prompt_track(&self) -> Result<PromptTrack> {
        if self.prompts.is_empty() {
            return Ok(PromptTrack::single());
        }
        let per = match self.n_prom {
            Some(p) => p,
            None if self.prompts.len() == 1 => usize::MAX,
            None => self.n / self.prompts.len(),
        };
        PromptTrack::new(self.prompts.clone(), per)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.t < 2 {
            return bad(format!("T = {} (need T ≥ 2)", self.t));
        }
        if self.f0 < 2 || self.f0 > self.t {
            return bad(format!("f0 = {} must lie in [2, T = {}]", self.f0, self.t));
        }
        let stride = self.stride();
        if stride == 0 || stride > self.f0 {
            return bad(format!("stride = {stride} must lie in [1, f0 = {}]", self.f0));
        }
        if self.l_zig == 0 || self.l_zig > self.f0 {
            return bad(format!("L_zig = {} must lie in [1, f0 = {}]", self.l_zig, self.f0));
        }
        if self.e == 0 || self.e > self.t {
            return bad(format!("e = {} must lie in [1, T = {}]", self.e, self.t));
        }
        if self.m_guid >= self.f0 {
            return bad(format!("m_guid = {} must be < f0 = {}", self.m_guid, self.f0));
        }
        if self.l == 0 || self.d == 0 {
            return bad(format!("latent shape {}x{} is empty", self.l, self.d));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta = {} outside [0, 1]", self.eta));
        }
        self.schedule()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;

        if self.mode.is_zigzag() {
            if !self.f0.is_multiple_of(self.l_zig) {
                return bad(format!(
                    "f0 = {} must be a multiple of L_zig = {}",
                    self.f0, self.l_zig
                ));
            }
            if self.e >= self.t - self.n_zig() {
                return bad(format!(
                    "e = {} leaves no room for Stage 1 (need e < T − ⌈f0/L_zig⌉ = {})",
                    self.e,
                    self.t - self.n_zig()
                ));
            }
        }
        if self.mode.uses_dce() {
            if self.m_guid > self.f0 - stride {
                return bad(format!(
                    "m_guid = {} exceeds f0 − stride = {}; guided windows could not commit a full stride",
                    self.m_guid,
                    self.f0 - stride
                ));
            }
            self.validate_reflection()?;
        }

        if let Some(per) = self.n_prom {
            if per == 0 {
                return bad("N_prom must be positive".into());
            }
            if self.prompts.len() > 1 && per * self.prompts.len() != self.n {
                return bad(format!(
                    "{} prompts × N_prom = {per} does not cover N = {}",
                    self.prompts.len(),
                    self.n
                ));
            }
        } else if self.prompts.len() > 1
            && (self.n == 0 || !self.n.is_multiple_of(self.prompts.len()))
        {
            return bad(format!(
                "N = {} is not divisible among {} prompts; set N_prom",
                self.n,
                self.prompts.len()
            ));
        }
        Ok(())
    }

    fn validate_reflection(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (f_eval, f_ref, f_judg, f_guid) = (self.f_eval, self.f_ref, self.f_judg(), self.f_guid());
        let len = self.resident_len();
        if f_eval == 0 || f_ref < f_eval {
            return bad(format!("need f_ref ≥ f_eval ≥ 1, got f_ref = {f_ref}, f_eval = {f_eval}"));
        }
        if f_eval + f_ref > f_judg {
            return bad(format!("need f_eval + f_ref ≤ f_judg, got {f_eval} + {f_ref} > {f_judg}"));
        }
        if f_judg + f_eval - 1 > len {
            return bad(format!(
                "evaluated latents [{f_judg}, {}] run past the resident queue of {len}",
                f_judg + f_eval - 1
            ));
        }
        if f_guid < f_ref || f_guid >= f_judg {
            return bad(format!("need f_ref ≤ f_guid < f_judg, got f_guid = {f_guid}"));
        }
        if self.n_samp == 0 {
            return bad("n_samp must be positive".into());
        }
        if !(self.delta_adju.is_finite() && self.delta_adju >= 0.0) {
            return bad(format!("delta_adju = {} must be finite and ≥ 0", self.delta_adju));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_have_closed_form_lengths() {
        let vc = SchedulerConfig::videocrafter2_like();
        vc.validate().unwrap();
        assert_eq!((vc.n_zig(), vc.init_rounds(), vc.resident_len()), (4, 50, 216));
        assert_eq!(vc.f_judg(), 205);
        assert_eq!(vc.reflection_rounds(), 3);
        let wan = SchedulerConfig::wan_like();
        wan.validate().unwrap();
        assert_eq!((wan.n_zig(), wan.init_rounds(), wan.resident_len()), (3, 41, 308));
    }

    #[test]
    fn toml_preset_with_overrides() {
        let c = SchedulerConfig::from_toml_str(
            "preset = \"wan-like\"\nN = 70\nmode = \"fifo\"\nseed = 9\n",
        )
        .unwrap();
        assert_eq!((c.t, c.f0, c.l_zig, c.m_guid), (54, 21, 7, 4));
        assert_eq!((c.n, c.mode, c.seed), (70, Mode::Fifo, 9));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(SchedulerConfig::from_toml_str("bogus = 1").is_err());
        assert!(SchedulerConfig::from_toml_str("preset = \"sora\"").is_err());
        assert!(SchedulerConfig::from_toml_str("mode = \"lookahead\"").is_err());
        assert!(SchedulerConfig::from_toml_str("f0 = 80").is_err());
        assert!(SchedulerConfig::from_toml_str("e = 61").is_err());
        assert!(SchedulerConfig::from_toml_str("m_guid = 16").is_err());
        assert!(SchedulerConfig::from_toml_str("L_zig = 5").is_err());
    }

    #[test]
    fn round_trip_through_toml() {
        let mut c = SchedulerConfig::wan_like();
        c.prompts = vec!["a".into(), "b".into()];
        c.n = 40;
        c.f_judg = Some(290);
        let back = SchedulerConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn required_target_frames_per_mode() {
        let mut c = SchedulerConfig {
            n: 20,
            ..SchedulerConfig::default()
        };
        assert_eq!(c.required_target_frames(), 216 + 20);
        c.mode = Mode::Fifo;
        assert_eq!(c.required_target_frames(), 84);
        c.mode = Mode::Stage2Only;
        assert_eq!(c.required_target_frames(), 20);
        c.mode = Mode::Tta;
        c.n = 21;
        assert_eq!(c.padded_frames(), 24);
        assert_eq!(c.required_target_frames(), 216 + 24);
    }

    #[test]
    fn prompt_split_must_cover_n() {
        let mut c = SchedulerConfig {
            prompts: vec!["a".into(), "b".into(), "c".into()],
            n: 90,
            ..SchedulerConfig::default()
        };
        c.validate().unwrap();
        assert_eq!(c.prompt_track().unwrap().frames_per_prompt(), 30);
        c.n = 91;
        assert!(c.validate().is_err());
        c.n_prom = Some(30);
        assert!(c.validate().is_err());
    }
}
