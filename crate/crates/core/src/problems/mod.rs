//! Built-in problems and the id → builder registry.

mod lq;
mod owner_dog;
mod random;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::GameProblem;

pub use lq::{build_lq_game, lq_data, LqData, LqOptions};
pub use owner_dog::{
    build_owner_dog, default_owner_dog, dog_cost, owner_cost, DEFAULT_HORIZON, DEFAULT_X0,
};
pub use random::{build_random_smooth_game, RandomGame, RandomGameOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// A problem id with its parameters, e.g. `owner_dog` with `T = 11`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProblemSpec {
    #[serde(rename = "problem")]
    pub id: String,
    #[serde(flatten)]
    pub parameters: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Clone, Copy)]
pub struct RegistryEntry {
    pub id: &'static str,
    pub description: &'static str,
    pub parameters: &'static [&'static str],
}

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry {
        id: "owner_dog",
        description: "two players on a line: the owner heads for 1 and wants the dog near 2, the dog follows the owner",
        parameters: &["T", "x0"],
    },
    RegistryEntry {
        id: "lq",
        description: "seeded linear-quadratic game, solved exactly by one Newton step",
        parameters: &["seed", "N", "T", "n_x", "input_dims", "stability_margin"],
    },
    RegistryEntry {
        id: "single_agent",
        description: "seeded single-player LQ problem (classical LQR)",
        parameters: &["seed", "T", "n_x", "input_dims", "stability_margin"],
    },
    RegistryEntry {
        id: "random_smooth",
        description: "seeded smooth nonlinear game with tanh-coupled dynamics",
        parameters: &["seed", "N", "T", "n_x", "input_dims"],
    },
];

pub fn known_ids() -> String {
    REGISTRY.iter().map(|e| e.id).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub problem: GameProblem,
    pub notes: Vec<String>,
}

pub enum ConfigFormat {
    Toml,
    Json,
}

impl ProblemSpec {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            parameters: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: ParamValue) -> Self {
        self.parameters.insert(name.to_string(), value);
        self
    }

    pub fn parse(text: &str, format: ConfigFormat) -> Result<Self> {
        match format {
            ConfigFormat::Toml => toml::from_str(text).map_err(|e| Error::Parse(e.to_string())),
            ConfigFormat::Json => {
                serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
            }
        }
    }

    /// Reads a `.toml` or `.json` file; other extensions are tried as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        };
        Self::parse(&text, format)
    }

    fn entry(&self) -> Result<&'static RegistryEntry> {
        REGISTRY
            .iter()
            .find(|e| e.id == self.id)
            .ok_or_else(|| Error::UnknownProblem {
                id: self.id.clone(),
                known: known_ids(),
            })
    }

    fn bad(name: &str, reason: impl Into<String>) -> Error {
        Error::BadParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    fn scalar(&self, name: &str) -> Result<Option<f64>> {
        match self.parameters.get(name) {
            None => Ok(None),
            Some(ParamValue::Scalar(v)) => Ok(Some(*v)),
            Some(ParamValue::Vector(_)) => Err(Self::bad(name, "expected a scalar")),
        }
    }

    fn integer(&self, name: &str) -> Result<Option<u64>> {
        match self.scalar(name)? {
            None => Ok(None),
            Some(v) if v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 => Ok(Some(v as u64)),
            Some(v) => Err(Self::bad(
                name,
                format!("expected a non-negative integer, got {v}"),
            )),
        }
    }

    fn usize_or(&self, name: &str, default: usize) -> Result<usize> {
        Ok(self.integer(name)?.map(|v| v as usize).unwrap_or(default))
    }

    fn vector(&self, name: &str) -> Result<Option<Vec<f64>>> {
        match self.parameters.get(name) {
            None => Ok(None),
            Some(ParamValue::Vector(v)) => Ok(Some(v.clone())),
            Some(ParamValue::Scalar(v)) => Ok(Some(vec![*v])),
        }
    }

    fn dims_vector(&self, name: &str) -> Result<Option<Vec<usize>>> {
        self.vector(name)?
            .map(|v| {
                v.into_iter()
                    .map(|d| {
                        if d >= 1.0 && d.fract() == 0.0 {
                            Ok(d as usize)
                        } else {
                            Err(Self::bad(
                                name,
                                format!("dimensions must be positive integers, got {d}"),
                            ))
                        }
                    })
                    .collect()
            })
            .transpose()
    }

    fn player_dims(&self, default_players: usize) -> Result<(usize, Vec<usize>)> {
        let players = self.usize_or("N", default_players)?;
        let dims = self
            .dims_vector("input_dims")?
            .unwrap_or_else(|| vec![1; players]);
        Ok((players, dims))
    }

    pub fn build(&self) -> Result<BuiltProblem> {
        let entry = self.entry()?;
        if let Some(name) = self
            .parameters
            .keys()
            .find(|k| !entry.parameters.contains(&k.as_str()))
        {
            return Err(Self::bad(
                name,
                format!(
                    "not a parameter of `{}` (accepted: {})",
                    entry.id,
                    entry.parameters.join(", ")
                ),
            ));
        }
        let seed = self.integer("seed")?.unwrap_or(0);
        match entry.id {
            "owner_dog" => {
                let horizon = self.usize_or("T", DEFAULT_HORIZON)?;
                let x0 = self.vector("x0")?.unwrap_or_else(|| DEFAULT_X0.to_vec());
                if x0.len() != 2 {
                    return Err(Error::dim("x0", 2, x0.len()));
                }
                Ok(BuiltProblem {
                    problem: build_owner_dog(horizon, DVector::from_vec(x0)),
                    notes: vec![],
                })
            }
            "lq" | "single_agent" => {
                let default = LqOptions::default();
                let (players, input_dims) = if entry.id == "single_agent" {
                    (
                        1,
                        self.dims_vector("input_dims")?.unwrap_or_else(|| vec![1]),
                    )
                } else {
                    self.player_dims(default.players)?
                };
                let opts = LqOptions {
                    seed,
                    players,
                    horizon: self.usize_or("T", default.horizon)?,
                    state_dim: self.usize_or("n_x", default.state_dim)?,
                    input_dims,
                    stability_margin: self
                        .scalar("stability_margin")?
                        .unwrap_or(default.stability_margin),
                    linear_terms: true,
                };
                Ok(BuiltProblem {
                    problem: build_lq_game(&opts)?,
                    notes: vec![],
                })
            }
            "random_smooth" => {
                let default = RandomGameOptions::default();
                let (players, input_dims) = self.player_dims(default.players)?;
                let game = build_random_smooth_game(&RandomGameOptions {
                    seed,
                    players,
                    horizon: self.usize_or("T", default.horizon)?,
                    state_dim: self.usize_or("n_x", default.state_dim)?,
                    input_dims,
                })?;
                Ok(BuiltProblem {
                    problem: game.problem,
                    notes: game.notes,
                })
            }
            _ => unreachable!("registry entry without a builder"),
        }
    }
}
