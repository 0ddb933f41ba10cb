//! Key-configuration selection and the binary environment representation.
//!
//! Key configurations are drawn from dataset trajectories and kept only when
//! they are far (in joint space and at the tip) from every earlier pick and
//! collide in a bounded fraction of the dataset's environments. The collision
//! pattern of the keys in a new environment is its fingerprint `φ`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::DatasetRecord;
use crate::world::{in_collision, tip_position, ArmModel, Configuration, Environment, Vec2};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyConfigParams {
    /// Minimum joint-space separation, radians.
    pub d_q_min: f64,
    /// Minimum tip separation, meters.
    pub d_x_min: f64,
    /// Collision proportion must lie in `(c, 1 − c)`.
    pub c: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub max_attempts: usize,
}

impl Default for KeyConfigParams {
    fn default() -> Self {
        KeyConfigParams {
            d_q_min: 0.15,
            d_x_min: 0.05,
            c: 0.05,
            k: 64,
            max_attempts: 200 * 64,
        }
    }
}

impl KeyConfigParams {
    pub fn with_k(k: usize) -> Self {
        KeyConfigParams {
            k,
            max_attempts: 200 * k,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_q_min > 0.0 && self.d_x_min > 0.0) {
            return Err(Error::invalid("keyconfig params", "separations must be positive"));
        }
        if !(self.c > 0.0 && self.c < 0.5) {
            return Err(Error::invalid("keyconfig params", "c must lie in (0, 0.5)"));
        }
        if self.k == 0 {
            return Err(Error::invalid("keyconfig params", "K must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyConfigSet {
    pub params: KeyConfigParams,
    pub configs: Vec<Configuration>,
    /// Cached tip positions; rebuilt by [`KeyConfigSet::refresh_tips`].
    #[serde(skip)]
    pub tips: Vec<Vec2>,
}

impl KeyConfigSet {
    pub fn new(params: KeyConfigParams, configs: Vec<Configuration>, arm: &ArmModel) -> Result<Self> {
        let mut s = KeyConfigSet {
            params,
            configs,
            tips: Vec::new(),
        };
        s.refresh_tips(arm)?;
        Ok(s)
    }

    pub fn refresh_tips(&mut self, arm: &ArmModel) -> Result<()> {
        self.tips = self
            .configs
            .iter()
            .map(|q| tip_position(arm, q))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// Collision bits of the key configurations in one environment.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct EnvRepresentation {
    pub bits: Vec<bool>,
}

impl EnvRepresentation {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bits as `0.0` / `1.0`.
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::invalid("phi", "expected only '0' and '1'")),
            })
            .collect::<Result<Vec<_>>>()
            .map(|bits| EnvRepresentation { bits })
    }
}

impl fmt::Display for EnvRepresentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for EnvRepresentation {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EnvRepresentation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        EnvRepresentation::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Unweighted Euclidean distance between joint vectors.
pub fn cspace_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(crate::math::dist(a, b))
}

/// Fraction of `envs` in which `q` collides.
pub fn collision_proportion(arm: &ArmModel, envs: &[&Environment], q: &[f64]) -> Result<f64> {
    let mut hits = 0usize;
    for e in envs {
        if in_collision(arm, e, q)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / envs.len() as f64)
}

/// Rejection-samples `K` key configurations from dataset trajectories.
///
/// A candidate is accepted when its joint-space distance to every earlier
/// pick exceeds `d_q_min`, its tip distance exceeds `d_x_min`, and it collides
/// in a fraction of the dataset environments strictly inside `(c, 1 − c)`.
pub fn select_key_configurations<R: Rng + ?Sized>(
    dataset: &[DatasetRecord],
    arm: &ArmModel,
    params: &KeyConfigParams,
    rng: &mut R,
) -> Result<KeyConfigSet> {
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let envs: Vec<&Environment> = dataset.iter().map(|r| &r.env).collect();
    let mut configs: Vec<Configuration> = Vec::with_capacity(params.k);
    let mut tips: Vec<Vec2> = Vec::with_capacity(params.k);
    let mut pc_cache: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut attempts = 0;
    while configs.len() < params.k {
        if attempts >= params.max_attempts {
            return Err(Error::BudgetExhausted {
                attempts,
                accepted: configs.len(),
                wanted: params.k,
            });
        }
        attempts += 1;
        let ri = rng.random_range(0..dataset.len());
        let tau = &dataset[ri].tau;
        let wi = rng.random_range(0..tau.len());
        let q = tau.row(wi);
        let d_q = configs
            .iter()
            .map(|k| crate::math::dist(k, q))
            .fold(f64::INFINITY, f64::min);
        if !(d_q > params.d_q_min) {
            continue;
        }
        let tip = tip_position(arm, q)?;
        let d_x = tips
            .iter()
            .map(|t| (*t - tip).norm())
            .fold(f64::INFINITY, f64::min);
        if !(d_x > params.d_x_min) {
            continue;
        }
        let p_c = match pc_cache.get(&(ri, wi)) {
            Some(p) => *p,
            None => {
                let p = collision_proportion(arm, &envs, q)?;
                pc_cache.insert((ri, wi), p);
                p
            }
        };
        if p_c > params.c && p_c < 1.0 - params.c {
            configs.push(Configuration::from(q));
            tips.push(tip);
        }
    }
    Ok(KeyConfigSet {
        params: *params,
        configs,
        tips,
    })
}

/// Bit `k` is set iff key configuration `k` collides in `env`.
pub fn env_representation(keys: &KeyConfigSet, arm: &ArmModel, env: &Environment) -> Result<EnvRepresentation> {
    if keys.is_empty() {
        return Err(Error::invalid("key configurations", "set is empty"));
    }
    let bits = keys
        .configs
        .iter()
        .map(|q| in_collision(arm, env, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnvRepresentation { bits })
}
