//! Model and prior configuration, serializable to the TOML config schema.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// One variance per subject: s_i^2 = exp(log_s2_i).
    Constant,
    /// log s_ij^2 = lambda_i . basis(t_ij).
    TimeVarying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    Intercept,
    InterceptSlope,
}

impl RandomEffects {
    pub fn dim(self) -> usize {
        match self {
            RandomEffects::Intercept => 1,
            RandomEffects::InterceptSlope => 2,
        }
    }
}

/// Marker submodel shape. Bases are polynomials in t: dimension d means
/// [1, t, ..., t^(d-1)].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerSpec {
    #[serde(default = "default_basis_dim")]
    pub mean_basis_dim: usize,
    #[serde(default = "default_variance_mode")]
    pub variance_mode: VarianceMode,
    #[serde(default = "default_basis_dim")]
    pub var_basis_dim: usize,
}

fn default_basis_dim() -> usize {
    2
}
fn default_variance_mode() -> VarianceMode {
    VarianceMode::Constant
}

impl Default for MarkerSpec {
    fn default() -> Self {
        MarkerSpec {
            mean_basis_dim: 2,
            variance_mode: VarianceMode::Constant,
            var_basis_dim: 2,
        }
    }
}

impl MarkerSpec {
    pub fn p(&self) -> usize {
        self.mean_basis_dim
    }

    /// Variance basis dimension; 0 when the mode has no basis.
    pub fn p_s(&self) -> usize {
        match self.variance_mode {
            VarianceMode::Constant => 0,
            VarianceMode::TimeVarying => self.var_basis_dim,
        }
    }
}

/// Evaluates the polynomial basis [1, t, ..., t^(dim-1)] into `out`.
pub fn poly_basis(t: f64, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    let mut v = 1.0;
    for o in out.iter_mut() {
        *o = v;
        v *= t;
    }
}

/// One term of the outcome linear predictor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TermKind {
    Intercept,
    Mu,
    Var,
    Time,
    MuTime,
    VarTime,
    Covariate(String),
}

impl TermKind {
    pub fn name(&self) -> String {
        match self {
            TermKind::Intercept => "beta_intercept".into(),
            TermKind::Mu => "beta_mu".into(),
            TermKind::Var => "beta_var".into(),
            TermKind::Time => "beta_time".into(),
            TermKind::MuTime => "beta_mu_time".into(),
            TermKind::VarTime => "beta_var_time".into(),
            TermKind::Covariate(n) => format!("beta_w_{n}"),
        }
    }

    fn code(&self) -> String {
        match self {
            TermKind::Intercept => "intercept".into(),
            TermKind::Mu => "mu".into(),
            TermKind::Var => "var".into(),
            TermKind::Time => "time".into(),
            TermKind::MuTime => "mu_time".into(),
            TermKind::VarTime => "var_time".into(),
            TermKind::Covariate(n) => format!("cov:{n}"),
        }
    }

    fn parse(s: &str) -> Result<TermKind> {
        Ok(match s {
            "intercept" => TermKind::Intercept,
            "mu" => TermKind::Mu,
            "var" => TermKind::Var,
            "time" => TermKind::Time,
            "mu_time" => TermKind::MuTime,
            "var_time" => TermKind::VarTime,
            other => match other.strip_prefix("cov:") {
                Some(name) if !name.is_empty() => TermKind::Covariate(name.to_string()),
                _ => return Err(Error::Config(format!("unknown outcome term `{other}`"))),
            },
        })
    }
}

impl Serialize for TermKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for TermKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TermKind::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeSpec {
    #[serde(default = "default_terms")]
    pub terms: Vec<TermKind>,
    #[serde(default = "default_random_effects")]
    pub random_effects: RandomEffects,
}

fn default_terms() -> Vec<TermKind> {
    vec![
        TermKind::Intercept,
        TermKind::Mu,
        TermKind::Var,
        TermKind::Time,
        TermKind::MuTime,
        TermKind::VarTime,
    ]
}
fn default_random_effects() -> RandomEffects {
    RandomEffects::Intercept
}

impl Default for OutcomeSpec {
    fn default() -> Self {
        OutcomeSpec { terms: default_terms(), random_effects: RandomEffects::Intercept }
    }
}

impl OutcomeSpec {
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n_int = self.terms.iter().filter(|t| **t == TermKind::Intercept).count();
        if n_int != 1 {
            return Err(Error::Config(format!(
                "outcome terms must contain `intercept` exactly once, found {n_int}"
            )));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if self.terms[..i].contains(t) {
                return Err(Error::Config(format!("duplicate outcome term `{}`", t.name())));
            }
        }
        Ok(())
    }
}

/// Full model shape: marker submodel, outcome submodel, and whether the
/// outcome likelihood participates at all (stage 1 of the two-stage
/// outcome comparator turns it off).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub marker: MarkerSpec,
    #[serde(default)]
    pub outcome: OutcomeSpec,
    #[serde(default = "default_true")]
    pub include_outcome: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            marker: MarkerSpec::default(),
            outcome: OutcomeSpec::default(),
            include_outcome: true,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.marker.mean_basis_dim == 0 {
            return Err(Error::Config("mean_basis_dim must be >= 1".into()));
        }
        if self.marker.variance_mode == VarianceMode::TimeVarying && self.marker.var_basis_dim == 0
        {
            return Err(Error::Config("var_basis_dim must be >= 1".into()));
        }
        if self.include_outcome {
            self.outcome.validate()?;
        }
        Ok(())
    }

    /// Covariate names referenced by the outcome terms, in term order.
    pub fn covariate_names(&self) -> Vec<&str> {
        self.outcome
            .terms
            .iter()
            .filter_map(|t| match t {
                TermKind::Covariate(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Hyperprior settings. All scales strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Mean of the nu hyperprior (and of the delta coordinates in
    /// time-varying mode).
    pub m: f64,
    /// Sd of the nu hyperprior.
    pub xi: f64,
    /// Half-Cauchy scale for psi (and the K_s diagonals).
    pub tau: f64,
    /// Sd of the alpha prior.
    pub xi0: f64,
    /// Half-Cauchy scale for the K diagonals.
    pub tau0: f64,
    /// LKJ shape for all correlation priors.
    pub zeta: f64,
    /// Sd of the outcome beta priors.
    pub beta_sd: f64,
    /// Half-Cauchy scale for sigma.
    pub sigma_scale: f64,
    /// Half-Cauchy scale for the random-effect sd(s).
    pub tau_a_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            m: 0.0,
            xi: 10.0,
            tau: 2.5,
            xi0: 1.0,
            tau0: 2.5,
            zeta: 1.0,
            beta_sd: 10.0,
            sigma_scale: 2.5,
            tau_a_scale: 2.5,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("xi", self.xi),
            ("tau", self.tau),
            ("xi0", self.xi0),
            ("tau0", self.tau0),
            ("zeta", self.zeta),
            ("beta_sd", self.beta_sd),
            ("sigma_scale", self.sigma_scale),
            ("tau_a_scale", self.tau_a_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("prior scale `{name}` must be > 0, got {v}")));
            }
        }
        if !self.m.is_finite() {
            return Err(Error::Config("prior mean `m` must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_codes_round_trip() {
        let terms = vec![
            TermKind::Intercept,
            TermKind::Mu,
            TermKind::Var,
            TermKind::Time,
            TermKind::MuTime,
            TermKind::VarTime,
            TermKind::Covariate("age".into()),
        ];
        for t in &terms {
            let s = toml::to_string(&vec![t.clone()]).ok();
            let _ = s;
            assert_eq!(TermKind::parse(&t.code()).unwrap(), *t);
        }
    }

    #[test]
    fn model_spec_toml_round_trip() {
        let spec = ModelSpec {
            marker: MarkerSpec {
                mean_basis_dim: 2,
                variance_mode: VarianceMode::TimeVarying,
                var_basis_dim: 2,
            },
            outcome: OutcomeSpec {
                terms: vec![
                    TermKind::Intercept,
                    TermKind::Mu,
                    TermKind::Covariate("bmi".into()),
                ],
                random_effects: RandomEffects::InterceptSlope,
            },
            include_outcome: true,
        };
        let text = toml::to_string(&spec).unwrap();
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(back.marker.variance_mode, VarianceMode::TimeVarying);
        assert_eq!(back.outcome.terms, spec.outcome.terms);
        assert_eq!(back.outcome.random_effects, RandomEffects::InterceptSlope);
    }

    #[test]
    fn defaults_parse_from_empty_tables() {
        let spec: ModelSpec = toml::from_str("").unwrap();
        assert_eq!(spec.marker.mean_basis_dim, 2);
        assert_eq!(spec.outcome.terms.len(), 6);
        assert!(spec.include_outcome);
        let priors: PriorConfig = toml::from_str("").unwrap();
        assert_eq!(priors.xi, 10.0);
        assert_eq!(priors.tau_a_scale, 2.5);
        priors.validate().unwrap();
    }

    #[test]
    fn duplicate_intercept_rejected() {
        let spec = OutcomeSpec {
            terms: vec![TermKind::Intercept, TermKind::Intercept],
            random_effects: RandomEffects::Intercept,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn nonpositive_scale_rejected() {
        let priors = PriorConfig { tau: 0.0, ..PriorConfig::default() };
        assert!(priors.validate().is_err());
    }

    #[test]
    fn poly_basis_values() {
        let mut out = [0.0; 3];
        poly_basis(2.0, 3, &mut out);
        assert_eq!(out, [1.0, 2.0, 4.0]);
    }
}
