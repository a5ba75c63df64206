//! Controlled vocabularies for the generation stages: PDE families, domain
//! shapes (with hole topologies) and boundary-condition assignments.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PdeFamily {
    PoissonElectrostatics,
    HeatConduction,
    LinearElasticity,
    Stokes,
    AdvectionDiffusion,
    Helmholtz,
    Plasticity,
}

impl PdeFamily {
    pub const ALL: [PdeFamily; 7] = [
        PdeFamily::PoissonElectrostatics,
        PdeFamily::HeatConduction,
        PdeFamily::LinearElasticity,
        PdeFamily::Stokes,
        PdeFamily::AdvectionDiffusion,
        PdeFamily::Helmholtz,
        PdeFamily::Plasticity,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PdeFamily::PoissonElectrostatics => "Poisson electrostatics",
            PdeFamily::HeatConduction => "heat conduction",
            PdeFamily::LinearElasticity => "linear elasticity",
            PdeFamily::Stokes => "Stokes flow",
            PdeFamily::AdvectionDiffusion => "advection-diffusion",
            PdeFamily::Helmholtz => "Helmholtz",
            PdeFamily::Plasticity => "plasticity",
        }
    }

    /// Families assigned to `n` drafts: every family once before any repeats.
    pub fn plan(n: usize) -> Vec<PdeFamily> {
        (0..n).map(|i| Self::ALL[i % Self::ALL.len()]).collect()
    }
}

impl fmt::Display for PdeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PdeFamily {
    type Err = String;

    /// Accepts the label or a recognisable keyword ("electrostatic", "elastic", ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_lowercase();
        let found = if t.contains("plastic") {
            Some(PdeFamily::Plasticity)
        } else if t.contains("elastic") {
            Some(PdeFamily::LinearElasticity)
        } else if t.contains("poisson") || t.contains("electrostatic") {
            Some(PdeFamily::PoissonElectrostatics)
        } else if t.contains("advection") || t.contains("convection") {
            Some(PdeFamily::AdvectionDiffusion)
        } else if t.contains("heat") || t.contains("thermal") {
            Some(PdeFamily::HeatConduction)
        } else if t.contains("stokes") {
            Some(PdeFamily::Stokes)
        } else if t.contains("helmholtz") {
            Some(PdeFamily::Helmholtz)
        } else {
            None
        };
        found.ok_or_else(|| format!("unknown PDE family `{}`", s.trim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Rectangle,
    Triangle,
    CircularDisk,
    EllipticalDisk,
    Trapezoid,
    LShape,
}

impl Shape {
    pub const ALL: [Shape; 7] = [
        Shape::Square,
        Shape::Rectangle,
        Shape::Triangle,
        Shape::CircularDisk,
        Shape::EllipticalDisk,
        Shape::Trapezoid,
        Shape::LShape,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Rectangle => "rectangle",
            Shape::Triangle => "triangle",
            Shape::CircularDisk => "circular disk",
            Shape::EllipticalDisk => "elliptical disk",
            Shape::Trapezoid => "trapezoid",
            Shape::LShape => "L-shaped polygon",
        }
    }

    fn hole_label(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Rectangle => "rectangular",
            Shape::Triangle => "triangular",
            Shape::CircularDisk => "circular",
            Shape::EllipticalDisk => "elliptical",
            Shape::Trapezoid => "trapezoidal",
            Shape::LShape => "L-shaped",
        }
    }
}

/// A computational domain: an outer shape, optionally with one interior hole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub outer: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hole: Option<Shape>,
}

impl fmt::Display for DomainDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hole {
            None => f.write_str(self.outer.label()),
            // a disk with a circular hole has its own name
            Some(Shape::CircularDisk) if self.outer == Shape::CircularDisk => f.write_str("annulus"),
            Some(h) => write!(f, "{} with a {} hole", self.outer.label(), h.hole_label()),
        }
    }
}

/// Every plain shape, then every shape with a hole of any shape: 7 + 49 descriptors.
pub fn domain_vocabulary() -> Vec<DomainDescriptor> {
    let plain = Shape::ALL.iter().map(|&outer| DomainDescriptor { outer, hole: None });
    let holed =
        Shape::ALL.iter().flat_map(|&outer| Shape::ALL.iter().map(move |&h| DomainDescriptor { outer, hole: Some(h) }));
    plain.chain(holed).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcKind {
    Dirichlet,
    Neumann,
    Robin,
}

impl BcKind {
    fn describe(self, magnitude: &str) -> String {
        match self {
            BcKind::Dirichlet => format!("Dirichlet condition with prescribed value {magnitude}"),
            BcKind::Neumann => format!("Neumann condition with prescribed flux {magnitude}"),
            BcKind::Robin => format!("Robin condition with transfer coefficient {magnitude}"),
        }
    }
}

/// Condition kinds on the primary boundary part (left edge, inlet, or outer
/// boundary) and on the rest of the boundary, with a data magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDescriptor {
    pub primary: BcKind,
    pub remainder: BcKind,
    pub magnitude: f64,
}

impl fmt::Display for BoundaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = format!("{}", self.magnitude);
        if self.primary == self.remainder {
            write!(f, "{} on the entire boundary", self.primary.describe(&m))
        } else {
            write!(
                f,
                "{} on the primary boundary part (left edge, inlet or outer boundary) and {} on the remaining boundary",
                self.primary.describe(&m),
                self.remainder.describe(&m)
            )
        }
    }
}

pub const BC_MAGNITUDES: [f64; 6] = [0.5, 1.0, 2.0, 5.0, 10.0, 100.0];

/// Kind pairs whose problems stay well posed without extra constraints
/// (pure Neumann is left out), times [`BC_MAGNITUDES`].
pub fn boundary_vocabulary() -> Vec<BoundaryDescriptor> {
    use BcKind::*;
    let pairs = [
        (Dirichlet, Dirichlet),
        (Dirichlet, Neumann),
        (Neumann, Dirichlet),
        (Dirichlet, Robin),
        (Robin, Dirichlet),
        (Robin, Robin),
        (Robin, Neumann),
        (Neumann, Robin),
    ];
    pairs
        .iter()
        .flat_map(|&(primary, remainder)| {
            BC_MAGNITUDES.iter().map(move |&magnitude| BoundaryDescriptor { primary, remainder, magnitude })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{requested} distinct {axis} descriptors requested, vocabulary has {available}")]
pub struct VocabularyTooSmall {
    pub axis: &'static str,
    pub requested: usize,
    pub available: usize,
}

/// Seed for a per-parent plan: the pipeline seed mixed with a hash of the parent id.
pub fn plan_seed(rng_seed: u64, key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    rng_seed ^ u64::from_le_bytes(b)
}

fn sample<T: Clone>(vocab: &[T], count: usize, seed: u64, axis: &'static str) -> Result<Vec<T>, VocabularyTooSmall> {
    if count > vocab.len() {
        return Err(VocabularyTooSmall { axis, requested: count, available: vocab.len() });
    }
    let mut idx: Vec<usize> = (0..vocab.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx[..count].iter().map(|&i| vocab[i].clone()).collect())
}

/// `count` distinct domains for one parent, deterministic in `(rng_seed, key)`.
pub fn geometry_plan(count: usize, rng_seed: u64, key: &str) -> Result<Vec<DomainDescriptor>, VocabularyTooSmall> {
    sample(&domain_vocabulary(), count, plan_seed(rng_seed, key), "geometry")
}

/// `count` distinct boundary assignments for one parent, deterministic in `(rng_seed, key)`.
pub fn boundary_plan(count: usize, rng_seed: u64, key: &str) -> Result<Vec<BoundaryDescriptor>, VocabularyTooSmall> {
    sample(&boundary_vocabulary(), count, plan_seed(rng_seed, key), "boundary")
}
