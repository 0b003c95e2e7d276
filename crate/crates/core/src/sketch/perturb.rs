//! Parameter perturbation (Mod-1 / Mod-2) and coincidence resolution.

use rand::Rng;

use crate::rng::stream_rng;

use super::{CoincidenceLink, Sketch, SketchError};

/// Seed-stream tag for perturbation sign draws.
const TAG_PERTURB: u64 = 0x70;

/// The two modification strengths applied to training sketches.
///
/// Mod-1 shifts every length by 1/20 of the longest bounding-box side and
/// every angle by 1 degree; Mod-2 uses 1/5 and 4 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbationLevel {
    Mod1,
    Mod2,
}

impl PerturbationLevel {
    pub fn length_fraction(self) -> f64 {
        match self {
            PerturbationLevel::Mod1 => 1.0 / 20.0,
            PerturbationLevel::Mod2 => 1.0 / 5.0,
        }
    }

    pub fn angle_delta_deg(self) -> f64 {
        match self {
            PerturbationLevel::Mod1 => 1.0,
            PerturbationLevel::Mod2 => 4.0,
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            PerturbationLevel::Mod1 => 1,
            PerturbationLevel::Mod2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PerturbationLevel::Mod1 => "mod1",
            PerturbationLevel::Mod2 => "mod2",
        }
    }
}

/// Shifts every length and angle parameter of `s` by the level's exact
/// delta, each sign drawn from a stream seeded by `seed`, then re-resolves
/// coincidence links.
///
/// The length delta is `fraction × max_bbox_side` of the *input* sketch.
/// When a decrement would drive a length to zero or below, the sign flips
/// to an increment so the delta magnitude stays exact and the entity stays
/// well-formed.
pub fn perturb(s: &Sketch, level: PerturbationLevel, seed: u64) -> Result<Sketch, SketchError> {
    let max_side = s.max_bbox_side();
    if !(max_side > 0.0) || !max_side.is_finite() {
        return Err(SketchError::DegenerateInput);
    }
    let dl = level.length_fraction() * max_side;
    let da = level.angle_delta_deg();

    let mut rng = stream_rng(seed, &[TAG_PERTURB, level.tag()]);
    let mut out = s.clone();
    for entity in &mut out.entities {
        for len in &mut entity.lengths {
            let decrement: bool = rng.random();
            *len = if decrement && *len - dl > 0.0 { *len - dl } else { *len + dl };
        }
        for ang in &mut entity.angles {
            let decrement: bool = rng.random();
            *ang = if decrement { *ang - da } else { *ang + da };
        }
    }
    resolve_constraints(&out)
}

/// Chain propagation: walks the links in order, translating the
/// later-indexed entity of each pair so the linked endpoints coincide.
/// Earlier entities keep their geometry. Once an entity has been placed by
/// a link it is pinned; a later link demanding a different placement (a
/// cycle that does not close) is unsatisfiable.
pub fn resolve_constraints(s: &Sketch) -> Result<Sketch, SketchError> {
    let mut out = s.clone();
    let mut pinned = vec![false; out.entities.len()];

    for link in &out.links {
        let CoincidenceLink { a, b } = *link;
        let (earlier, later) = if a.0 <= b.0 { (a, b) } else { (b, a) };
        let target = out.entities[earlier.0].endpoint(earlier.1);
        let current = out.entities[later.0].endpoint(later.1);
        let (dx, dy) = (target.0 - current.0, target.1 - current.1);
        let residual = (dx * dx + dy * dy).sqrt();

        if earlier.0 == later.0 || pinned[later.0] {
            if residual > 1e-9 {
                return Err(SketchError::UnsatisfiableConstraint {
                    a: earlier.0,
                    b: later.0,
                    residual,
                });
            }
            continue;
        }
        let e = &mut out.entities[later.0];
        e.anchor.0 += dx;
        e.anchor.1 += dy;
        pinned[later.0] = true;
    }

    for link in &out.links {
        let pa = out.entities[link.a.0].endpoint(link.a.1);
        let pb = out.entities[link.b.0].endpoint(link.b.1);
        let residual = ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
        if residual > 1e-9 {
            return Err(SketchError::UnsatisfiableConstraint {
                a: link.a.0,
                b: link.b.0,
                residual,
            });
        }
    }
    Ok(out)
}
