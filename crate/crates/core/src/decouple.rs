//! Splitting the shared feature `z` into an orientation-relevant part `υ`
//! and an orientation-invariant part `μ`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Linear, LinearInit, ParamId, ParamStore, Session};
use crate::tensor::{Real, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoupleVariant {
    /// `υ` and `μ` are the leading and trailing slices of `z`.
    Split,
    /// `υ = G(z)`, `μ = z − υ`.
    Subtraction,
    /// `υ = G_r(z)`, `μ = G_u(z)`.
    Prediction,
    /// No decoupling: `υ = μ = z`. Used by the baseline ablation.
    None,
}

impl FromStr for DecoupleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Self::Split),
            "subtraction" => Ok(Self::Subtraction),
            "prediction" => Ok(Self::Prediction),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown decouple.variant `{other}` (expected split, subtraction, prediction or none)"))),
        }
    }
}

impl fmt::Display for DecoupleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Split => "split",
            Self::Subtraction => "subtraction",
            Self::Prediction => "prediction",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoupleConfig {
    pub variant: DecoupleVariant,
    /// Fraction of `z` assigned to `υ` by the split variant.
    pub split_fraction: f64,
    /// Predictor hidden width; `None` means the feature width.
    pub mlp_hidden: Option<usize>,
}

impl Default for DecoupleConfig {
    fn default() -> Self {
        Self { variant: DecoupleVariant::Split, split_fraction: 0.5, mlp_hidden: None }
    }
}

impl DecoupleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("decouple.split_fraction must lie in (0, 1), got {}", self.split_fraction)));
        }
        if self.mlp_hidden == Some(0) {
            return Err(Error::Config("decouple.mlp_hidden must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of `υ` for the split variant on a `dim`-wide feature.
    pub fn split_point(&self, dim: usize) -> Result<usize> {
        let at = (self.split_fraction * dim as f64).floor() as usize;
        if at == 0 || at >= dim {
            return Err(Error::Config(format!(
                "split_fraction {} of a {dim}-d feature leaves an empty part",
                self.split_fraction
            )));
        }
        Ok(at)
    }
}

/// Orientation-relevant and orientation-invariant features of a batch.
#[derive(Debug, Clone, Copy)]
pub struct DecoupledFeatures<'g, F: Real> {
    pub upsilon: Var<'g, F>,
    pub mu: Var<'g, F>,
}

/// Two-layer perceptron `W2 · relu(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    /// With `zero_output` the final layer starts at zero, so the map is
    /// identically zero at initialization.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        (d_in, hidden, d_out): (usize, usize, usize),
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        let hidden_layer = Linear::new(store, &format!("{name}.fc1"), (d_in, hidden), true, LinearInit::FanIn, rng);
        let init = if zero_output { LinearInit::Zeros } else { LinearInit::FanIn };
        let out = Linear::new(store, &format!("{name}.fc2"), (hidden, d_out), true, init, rng);
        Self { hidden: hidden_layer, out }
    }

    pub fn forward<'g, F: Real>(&self, s: &Session<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        self.out.forward(s, self.hidden.forward(s, x).relu())
    }

    pub fn in_features<F: Real>(&self, store: &ParamStore<F>) -> usize {
        self.hidden.in_features(store)
    }

    pub fn out_features<F: Real>(&self, store: &ParamStore<F>) -> usize {
        self.out.out_features(store)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }
}

fn check_predictor<F: Real>(store: &ParamStore<F>, g: &Mlp, dim: usize, what: &str) -> Result<()> {
    let (i, o) = (g.in_features(store), g.out_features(store));
    if i != dim || o != dim {
        return Err(Error::Dimension(format!("{what} maps {i} -> {o}, feature width is {dim}")));
    }
    Ok(())
}

fn width<F: Real>(z: &Var<'_, F>) -> Result<usize> {
    match z.shape()[..] {
        [_, d] => Ok(d),
        ref other => Err(Error::Dimension(format!("decoupler expects [batch, d] features, got {other:?}"))),
    }
}

/// `υ = z[:, ..k]`, `μ = z[:, k..]` with `k = ⌊fraction · d⌋`.
pub fn decouple_split<'g, F: Real>(z: Var<'g, F>, cfg: &DecoupleConfig) -> Result<DecoupledFeatures<'g, F>> {
    cfg.validate()?;
    let d = width(&z)?;
    let k = cfg.split_point(d)?;
    Ok(DecoupledFeatures { upsilon: z.slice(1, 0, k), mu: z.slice(1, k, d) })
}

/// `υ = G(z)`, `μ = z − υ`.
pub fn decouple_subtraction<'g, F: Real>(s: &Session<'g, '_, F>, z: Var<'g, F>, g: &Mlp) -> Result<DecoupledFeatures<'g, F>> {
    check_predictor(s.store(), g, width(&z)?, "subtraction predictor")?;
    let upsilon = g.forward(s, z);
    Ok(DecoupledFeatures { upsilon, mu: z.sub(upsilon) })
}

/// `υ = G_r(z)`, `μ = G_u(z)`.
pub fn decouple_prediction<'g, F: Real>(
    s: &Session<'g, '_, F>,
    z: Var<'g, F>,
    g_r: &Mlp,
    g_u: &Mlp,
) -> Result<DecoupledFeatures<'g, F>> {
    let d = width(&z)?;
    check_predictor(s.store(), g_r, d, "orientation predictor")?;
    check_predictor(s.store(), g_u, d, "invariant predictor")?;
    Ok(DecoupledFeatures { upsilon: g_r.forward(s, z), mu: g_u.forward(s, z) })
}

/// A configured decoupling structure and its predictor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoupler {
    pub config: DecoupleConfig,
    dim: usize,
    g_r: Option<Mlp>,
    g_u: Option<Mlp>,
}

impl Decoupler {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, config: DecoupleConfig, dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let hidden = config.mlp_hidden.unwrap_or(dim);
        let (g_r, g_u) = match config.variant {
            DecoupleVariant::Split => {
                config.split_point(dim)?;
                (None, None)
            }
            DecoupleVariant::None => (None, None),
            DecoupleVariant::Subtraction => (Some(Mlp::new(store, "decouple.g", (dim, hidden, dim), true, rng)), None),
            DecoupleVariant::Prediction => (
                Some(Mlp::new(store, "decouple.g_r", (dim, hidden, dim), false, rng)),
                Some(Mlp::new(store, "decouple.g_u", (dim, hidden, dim), false, rng)),
            ),
        };
        Ok(Self { config, dim, g_r, g_u })
    }

    /// Widths of `(υ, μ)`.
    pub fn output_dims(&self) -> (usize, usize) {
        match self.config.variant {
            DecoupleVariant::Split => {
                let k = self.config.split_point(self.dim).expect("validated at construction");
                (k, self.dim - k)
            }
            _ => (self.dim, self.dim),
        }
    }

    /// Orientation predictor (`G` or `G_r`), if the variant has one.
    pub fn orientation_predictor(&self) -> Option<&Mlp> {
        self.g_r.as_ref()
    }

    pub fn invariant_predictor(&self) -> Option<&Mlp> {
        self.g_u.as_ref()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.g_r.iter().chain(&self.g_u).flat_map(Mlp::params).collect()
    }

    pub fn forward<'g, F: Real>(&self, s: &Session<'g, '_, F>, z: Var<'g, F>) -> Result<DecoupledFeatures<'g, F>> {
        let d = width(&z)?;
        if d != self.dim {
            return Err(Error::Dimension(format!("decoupler built for {}-d features, got {d}", self.dim)));
        }
        match (self.config.variant, &self.g_r, &self.g_u) {
            (DecoupleVariant::Split, ..) => decouple_split(z, &self.config),
            (DecoupleVariant::None, ..) => Ok(DecoupledFeatures { upsilon: z, mu: z }),
            (DecoupleVariant::Subtraction, Some(g), _) => decouple_subtraction(s, z, g),
            (DecoupleVariant::Prediction, Some(g_r), Some(g_u)) => decouple_prediction(s, z, g_r, g_u),
            _ => unreachable!("predictors are built with the variant"),
        }
    }
}
