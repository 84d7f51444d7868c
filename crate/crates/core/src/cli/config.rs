//! Experiment configuration (TOML, or JSON by extension or content).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixing::{CnRegime, Method, RateSpec};
use crate::operators::BundleOptions;
use crate::regvar::TailLaw;
use crate::renewal::ReturnDistribution;
use crate::systems::DynSystem;
use crate::systems::{FiberMap, LsvMap, Point, SkewProduct, SyntheticSystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Lsv {
        gamma: f64,
    },
    Skew {
        gamma: f64,
        #[serde(default = "halving")]
        fiber: FiberMap,
    },
    /// I.i.d. returns drawn from `[tail]`, truncated at `len`.
    Synthetic {
        #[serde(default = "synthetic_len")]
        len: usize,
    },
    /// Explicit return-time probabilities `p_1, p_2, …`.
    Finite {
        p: Vec<f64>,
    },
}

fn halving() -> FiberMap {
    FiberMap::Halving
}

fn synthetic_len() -> usize {
    40_000
}

/// Observables on `Y` in the coordinates `(x₁, x₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    Constant {
        c: f64,
    },
    /// `height · max(0, 1 - |x₁ - center| / width)`; Lipschitz with
    /// constant `height / width`.
    Bump {
        center: f64,
        width: f64,
        #[serde(default = "one")]
        height: f64,
    },
    /// `a + b x₁ + c x₂`.
    Affine {
        a: f64,
        b: f64,
        #[serde(default)]
        c: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Observable {
    pub fn eval(&self, p: Point) -> f64 {
        match *self {
            Observable::Constant { c } => c,
            Observable::Bump { center, width, height } => height * (1.0 - (p.x1 - center).abs() / width).max(0.0),
            Observable::Affine { a, b, c } => a + b * p.x1 + c * p.x2,
        }
    }

    pub fn fiber_dependent(&self) -> bool {
        matches!(self, Observable::Affine { c, .. } if *c != 0.0)
    }

    /// Bump centred on `Y` reaching its ends.
    pub fn default_for(y: (f64, f64)) -> Self {
        Observable::Bump {
            center: 0.5 * (y.0 + y.1),
            width: 0.5 * (y.1 - y.0),
            height: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Observable::Constant { c } => c.is_finite(),
            Observable::Bump { center, width, height } => center.is_finite() && width > 0.0 && height.is_finite(),
            Observable::Affine { a, b, c } => a.is_finite() && b.is_finite() && c.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid observable {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailsSpec {
    pub samples: u64,
    pub window: (u64, u64),
    pub burn_in: usize,
    pub streams: usize,
    /// Steps of the orbit written to `orbit.csv`; 0 disables it.
    pub orbit_steps: usize,
    pub orbit_start: Option<(f64, f64)>,
}

impl Default for TailsSpec {
    fn default() -> Self {
        TailsSpec {
            samples: 1_000_000,
            window: (100, 10_000),
            burn_in: 10_000,
            streams: 8,
            orbit_steps: 0,
            orbit_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowerSpec {
    pub h_max: usize,
    pub ports: usize,
    pub bins: usize,
    pub depth: usize,
    pub ulam_cylinders: usize,
}

impl Default for TowerSpec {
    fn default() -> Self {
        let b = BundleOptions::default();
        TowerSpec {
            h_max: 500,
            ports: b.ports,
            bins: b.bins,
            depth: b.depth,
            ulam_cylinders: b.ulam_cylinders,
        }
    }
}

impl TowerSpec {
    pub fn bundle(&self, beta: Option<f64>) -> BundleOptions {
        BundleOptions {
            ports: self.ports,
            bins: self.bins,
            depth: self.depth,
            ulam_cylinders: self.ulam_cylinders,
            beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSpec {
    pub convcheck_n: usize,
    pub level_mass_j: usize,
    pub level_mass_k: usize,
    pub eterm_k: Vec<usize>,
    pub eterm_range: (u64, u64),
    pub eterm_points: usize,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        OperatorSpec {
            convcheck_n: 200,
            level_mass_j: 100,
            level_mass_k: 20,
            eterm_k: vec![2, 5, 10],
            eterm_range: (100, 10_000),
            eterm_points: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingSpec {
    pub method: Method,
    pub n_max: usize,
    /// Log-spaced grid size (operator method); the Monte Carlo grid is
    /// `{2^k}` plus `extra`.
    pub points: usize,
    pub extra: Vec<usize>,
    pub samples: u64,
    pub batches: usize,
    pub burn_in: usize,
    pub v: Option<Observable>,
    pub w: Option<Observable>,
    /// Quadrature nodes per atom when projecting observables.
    pub nodes: usize,
    /// Require the normalised series to approach its limit.
    pub assert: bool,
    /// Declares smooth tails when no `q` is given in `[tail]`.
    pub smooth_tails: bool,
    pub rate: RateSpec,
    /// Higher-order coefficients `d_1 = 1, d_2, …`.
    pub d: Vec<f64>,
    pub regime: CnRegime,
}

impl Default for MixingSpec {
    fn default() -> Self {
        MixingSpec {
            method: Method::Operator,
            n_max: 10_000,
            points: 25,
            extra: Vec::new(),
            samples: 1_000_000,
            batches: 32,
            burn_in: 10_000,
            v: None,
            w: None,
            nodes: 16,
            assert: false,
            smooth_tails: false,
            rate: RateSpec::default(),
            d: vec![1.0],
            regime: CnRegime::Beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenewalSpec {
    pub n: usize,
    /// Log-spaced rows in the CSV; 0 writes every `n`.
    pub points: usize,
}

impl Default for RenewalSpec {
    fn default() -> Self {
        RenewalSpec { n: 20_000, points: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSpec,
    /// Tail law; required by synthetic systems.
    #[serde(default)]
    pub tail: Option<TailLaw>,
    #[serde(default)]
    pub tails: TailsSpec,
    #[serde(default)]
    pub tower: TowerSpec,
    #[serde(default)]
    pub operators: OperatorSpec,
    #[serde(default)]
    pub mixing: MixingSpec,
    #[serde(default)]
    pub renewal: RenewalSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
}

/// A parsed configuration plus the SHA-256 of its source bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let text =
            String::from_utf8(bytes.clone()).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        let config = Self::parse(&text, json).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(LoadedConfig {
            config,
            sha256: sha256_hex(&bytes),
        })
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: ExperimentConfig = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match &self.system {
            SystemSpec::Lsv { gamma } | SystemSpec::Skew { gamma, .. } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return bad(format!("system.gamma = {gamma} must be positive"));
                }
            }
            SystemSpec::Synthetic { len } => {
                if self.tail.is_none() {
                    return bad("synthetic systems need a [tail] law".into());
                }
                if *len < 100 {
                    return bad("system.len must be at least 100".into());
                }
            }
            SystemSpec::Finite { p } => {
                if p.is_empty() {
                    return bad("system.p is empty".into());
                }
            }
        }
        if let SystemSpec::Skew { fiber, .. } = &self.system {
            fiber.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(law) = &self.tail {
            law.validate().map_err(|e| Error::Config(format!("tail: {e}")))?;
        }
        let m = &self.mixing;
        for o in [m.v, m.w].into_iter().flatten() {
            o.validate()?;
        }
        if m.n_max < 2 || m.points < 2 {
            return bad("mixing.n_max and mixing.points must be at least 2".into());
        }
        if m.batches < 2 {
            return bad("mixing.batches must be at least 2".into());
        }
        if m.d.first() != Some(&1.0) {
            return bad("mixing.d must start with d_1 = 1".into());
        }
        if m.method == Method::Operator
            && matches!(self.system, SystemSpec::Skew { .. })
            && [m.v, m.w].into_iter().flatten().any(|o| o.fiber_dependent())
        {
            return bad("the operator method works on the quotient: observables must not depend on x2".into());
        }
        if self.tails.window.0 < 1 || self.tails.window.0 >= self.tails.window.1 {
            return bad("tails.window must satisfy 1 <= lo < hi".into());
        }
        if self.tower.h_max == 0 || self.tower.ports == 0 || self.tower.bins == 0 {
            return bad("tower.h_max, tower.ports and tower.bins must be positive".into());
        }
        if self.renewal.n < 10 {
            return bad("renewal.n must be at least 10".into());
        }
        if m.assert {
            if let Some(beta) = self.beta() {
                let smooth = m.smooth_tails || self.tail.as_ref().is_some_and(|l| l.q.is_some());
                if beta <= 0.5 && !smooth {
                    return bad(format!(
                        "mixing.assert needs beta > 1/2 or smooth tails; beta = {beta} and neither [tail].q \
                         nor mixing.smooth_tails is set, so a_n rho_n need not converge"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Declared tail exponent, when known without computation.
    pub fn beta(&self) -> Option<f64> {
        match &self.system {
            SystemSpec::Lsv { gamma } | SystemSpec::Skew { gamma, .. } => Some((1.0 / gamma).min(1.0)),
            SystemSpec::Synthetic { .. } => self.tail.as_ref().map(|l| l.beta),
            SystemSpec::Finite { .. } => None,
        }
    }

    pub fn distribution(&self) -> Result<Option<ReturnDistribution>> {
        Ok(match &self.system {
            SystemSpec::Synthetic { len } => {
                let law = self
                    .tail
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing [tail]".into()))?;
                Some(ReturnDistribution::from_law(law, *len)?)
            }
            SystemSpec::Finite { p } => Some(ReturnDistribution::new(p.clone())?),
            _ => None,
        })
    }

    pub fn system(&self) -> Result<DynSystem> {
        Ok(match &self.system {
            SystemSpec::Lsv { gamma } => DynSystem::Lsv(LsvMap::new(*gamma)?),
            SystemSpec::Skew { gamma, fiber } => DynSystem::Skew(SkewProduct::new(LsvMap::new(*gamma)?, *fiber)?),
            _ => DynSystem::Synthetic(SyntheticSystem::new(self.distribution()?.expect("synthetic"))),
        })
    }

    pub fn observables(&self, y: (f64, f64)) -> (Observable, Observable) {
        let d = Observable::default_for(y);
        (self.mixing.v.unwrap_or(d), self.mixing.w.unwrap_or(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LSV: &str = r#"
seed = 7
[system]
kind = "lsv"
gamma = 1.25
[mixing]
method = "montecarlo"
v = { kind = "bump", center = 0.75, width = 0.25 }
"#;

    #[test]
    fn toml_and_json_agree() {
        let a = ExperimentConfig::parse(LSV, false).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let b = ExperimentConfig::parse(&json, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, 7);
        assert_eq!(a.mixing.method, Method::MonteCarlo);
        assert_eq!(a.beta(), Some(0.8));
    }

    #[test]
    fn schema_errors_are_config_errors() {
        for text in [
            "[system]\nkind = \"lsv\"\n",
            "[system]\nkind = \"lsv\"\ngamma = -1\n",
            "[system]\nkind = \"synthetic\"\n",
            "[system]\nkind = \"lsv\"\ngamma = 1.0\n[mixing]\nbogus = 1\n",
            "[system]\nkind = \"lsv\"\ngamma = 1.0\n[mixing]\nd = [2.0]\n",
        ] {
            let e = ExperimentConfig::parse(text, false).unwrap_err();
            assert!(e.is_config(), "{text}: {e}");
        }
    }

    #[test]
    fn small_beta_needs_smooth_tails() {
        let base = "[system]\nkind = \"synthetic\"\n[tail]\nbeta = 0.3\nell = { kind = \"constant\", c = 1.0 }\n";
        let refused = format!("{base}[mixing]\nassert = true\n");
        let e = ExperimentConfig::parse(&refused, false).unwrap_err();
        assert!(e.to_string().contains("beta > 1/2"));
        assert!(ExperimentConfig::parse(base, false).is_ok());
        let smooth = format!("{base}q = 1.0\n[mixing]\nassert = true\n");
        assert!(ExperimentConfig::parse(&smooth, false).is_ok());
    }

    #[test]
    fn fiber_observables_rejected_for_operator_method() {
        let t =
            "[system]\nkind = \"skew\"\ngamma = 1.25\n[mixing]\nv = { kind = \"affine\", a = 0.0, b = 1.0, c = 1.0 }\n";
        assert!(ExperimentConfig::parse(t, false).is_err());
    }

    #[test]
    fn observables() {
        let b = Observable::default_for((0.5, 1.0));
        assert_eq!(b.eval(Point::base(0.75)), 1.0);
        assert_eq!(b.eval(Point::base(0.5)), 0.0);
        assert!(Observable::Affine { a: 0.0, b: 0.0, c: 1.0 }.fiber_dependent());
    }
}
